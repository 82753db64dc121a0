// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::instrument::Mode;
use crate::isa::parse_number;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Ok,
    Violation,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataCheck {
    Eq(Vec<u8>),
    Ne(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunExpect {
    Halted,
    Exited(Option<u64>),
    Yielded,
    /// Fuel ran out; the sandbox can continue.
    Paused,
    Trapped(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DestSpec {
    Label(String),
    Page(u64),
    PageOf(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Create { name: String, program: Option<String>, mode: Option<Mode> },
    Alloc { name: String, var: String, size: u64 },
    Write { name: String, var: String, offset: u64, bytes: Vec<u8>, expect: Expect },
    Read { name: String, var: String, offset: u64, len: usize, expect: Expect, check: Option<DataCheck> },
    Free { name: String, var: String, expect_invalid: bool },
    Relocate { plan: Vec<(String, DestSpec)> },
    Run { name: String, fuel: u64, expect: Option<RunExpect> },
    Schedule { slice: u64, rounds: u64 },
    ForgeRead { name: String, addr: u64, expect: Expect },
    ExpectTerminated { name: String, reason: String },
    ExpectLive { name: String },
    ExpectFlagged { name: String },
    ExpectStat { key: String, value: u64 },
    ExpectOutput { name: String, bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioLine {
    pub line: usize,
    pub text: String,
    pub command: Command,
}

pub fn parse_hex(s: &str) -> Result<Vec<u8>, String> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    if !s.len().is_multiple_of(2) {
        return Err(format!("odd-length hex string `{s}`"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| format!("bad hex byte `{}`", &s[i..i + 2])))
        .collect()
}

fn expect(s: &str) -> Result<Expect, String> {
    match s {
        "ok" => Ok(Expect::Ok),
        "violation" => Ok(Expect::Violation),
        "fault" => Ok(Expect::Fault),
        other => Err(format!("expected ok, violation or fault, got `{other}`")),
    }
}

fn number(s: &str) -> Result<u64, String> {
    parse_number(s).ok_or_else(|| format!("bad number `{s}`"))
}

fn run_expect(s: &str) -> Result<RunExpect, String> {
    match s.split_once(':') {
        None => match s {
            "halted" => Ok(RunExpect::Halted),
            "exited" => Ok(RunExpect::Exited(None)),
            "yielded" => Ok(RunExpect::Yielded),
            "paused" => Ok(RunExpect::Paused),
            other => Err(format!("unknown run expectation `{other}`")),
        },
        Some(("exited", code)) => Ok(RunExpect::Exited(Some(number(code)?))),
        Some(("trapped", reason)) if !reason.is_empty() => Ok(RunExpect::Trapped(reason.to_string())),
        _ => Err(format!("unknown run expectation `{s}`")),
    }
}

fn dest(s: &str) -> Result<DestSpec, String> {
    if let Some(n) = s.strip_prefix('#') {
        Ok(DestSpec::Page(number(n)?))
    } else if let Some(v) = s.strip_prefix('%') {
        Ok(DestSpec::PageOf(v.to_string()))
    } else if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        Ok(DestSpec::Label(s.to_string()))
    } else {
        Err(format!("bad relocation destination `{s}`"))
    }
}

fn parse_command(words: &[&str]) -> Result<Command, String> {
    let argc = |lo: usize, hi: usize| {
        let n = words.len() - 1;
        if n < lo || n > hi {
            Err(format!("{} takes {lo}..={hi} arguments, got {n}", words[0]))
        } else {
            Ok(())
        }
    };
    let s = |i: usize| words[i].to_string();
    Ok(match words[0] {
        "CREATE_SANDBOX" => {
            argc(2, 3)?;
            let program = (words[2] != "-").then(|| s(2));
            let mode = words.get(3).map(|m| m.parse()).transpose()?;
            Command::Create { name: s(1), program, mode }
        }
        "ALLOC" => {
            argc(3, 3)?;
            Command::Alloc { name: s(1), var: s(2), size: number(words[3])? }
        }
        "WRITE" => {
            argc(4, 5)?;
            let expect = words.get(5).map(|e| expect(e)).transpose()?.unwrap_or(Expect::Ok);
            Command::Write { name: s(1), var: s(2), offset: number(words[3])?, bytes: parse_hex(words[4])?, expect }
        }
        "READ" => {
            argc(5, 6)?;
            let check = match words.get(6) {
                None => None,
                Some(c) => match c.split_once('=') {
                    Some(("eq", h)) => Some(DataCheck::Eq(parse_hex(h)?)),
                    Some(("ne", h)) => Some(DataCheck::Ne(parse_hex(h)?)),
                    _ => return Err(format!("expected eq=HEX or ne=HEX, got `{c}`")),
                },
            };
            let len = number(words[4])? as usize;
            if let Some(DataCheck::Eq(b) | DataCheck::Ne(b)) = &check {
                if b.len() != len {
                    return Err(format!("check has {} bytes but READ reads {len}", b.len()));
                }
            }
            Command::Read { name: s(1), var: s(2), offset: number(words[3])?, len, expect: expect(words[5])?, check }
        }
        "FREE" => {
            argc(2, 3)?;
            let expect_invalid = match words.get(3) {
                None | Some(&"ok") => false,
                Some(&"invalid") => true,
                Some(other) => return Err(format!("expected ok or invalid, got `{other}`")),
            };
            Command::Free { name: s(1), var: s(2), expect_invalid }
        }
        "RELOCATE" => {
            let plan = words[1..]
                .iter()
                .map(|w| {
                    let (var, d) = w.split_once("->").ok_or_else(|| format!("expected VAR->DEST, got `{w}`"))?;
                    Ok((var.to_string(), dest(d)?))
                })
                .collect::<Result<Vec<_>, String>>()?;
            Command::Relocate { plan }
        }
        "RUN" => {
            argc(2, 3)?;
            let fuel = number(words[2])?;
            if fuel == 0 {
                return Err("fuel must be positive".into());
            }
            Command::Run { name: s(1), fuel, expect: words.get(3).map(|e| run_expect(e)).transpose()? }
        }
        "SCHEDULE" => {
            argc(2, 2)?;
            Command::Schedule { slice: number(words[1])?, rounds: number(words[2])? }
        }
        "FORGE_READ" => {
            argc(3, 3)?;
            Command::ForgeRead { name: s(1), addr: number(words[2])?, expect: expect(words[3])? }
        }
        "EXPECT_TERMINATED" => {
            argc(2, 2)?;
            Command::ExpectTerminated { name: s(1), reason: s(2) }
        }
        "EXPECT_LIVE" => {
            argc(1, 1)?;
            Command::ExpectLive { name: s(1) }
        }
        "EXPECT_FLAGGED" => {
            argc(1, 1)?;
            Command::ExpectFlagged { name: s(1) }
        }
        "EXPECT_STAT" => {
            argc(2, 2)?;
            Command::ExpectStat { key: s(1), value: number(words[2])? }
        }
        "EXPECT_OUTPUT" => {
            argc(2, 2)?;
            Command::ExpectOutput { name: s(1), bytes: parse_hex(words[2])? }
        }
        other => return Err(format!("unknown command `{other}`")),
    })
}

pub fn parse_scenario(text: &str) -> Result<Vec<ScenarioLine>, ScenarioParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = strip_comment(raw);
        let words: Vec<&str> = body.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let command = parse_command(&words).map_err(|message| ScenarioParseError { line: i + 1, message })?;
        out.push(ScenarioLine { line: i + 1, text: words.join(" "), command });
    }
    Ok(out)
}

/// A `#` at the start of a word opens a comment; `->#3` does not.
fn strip_comment(raw: &str) -> &str {
    for (i, c) in raw.char_indices() {
        if c == '#' && (i == 0 || raw[..i].ends_with(char::is_whitespace)) {
            return &raw[..i];
        }
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        let text = "\
# header
CREATE_SANDBOX a - r15
CREATE_SANDBOX b prog.s
ALLOC a x 100   # trailing comment
WRITE a x 0 deadbeef
READ b x 0 4 violation
READ a x 0 4 ok eq=deadbeef
FREE a x invalid
RELOCATE x->C y->#3 z->%x
RUN a 1000 trapped:PageFault
SCHEDULE 10 5
FORGE_READ a 0x0002000000000000 fault
EXPECT_TERMINATED b IntegrityViolation
EXPECT_LIVE a
EXPECT_FLAGGED a
EXPECT_STAT pages_reclaimed 2
EXPECT_OUTPUT a 5a
";
        let lines = parse_scenario(text).unwrap();
        assert_eq!(lines.len(), 16);
        assert_eq!(lines[0].command, Command::Create { name: "a".into(), program: None, mode: Some(Mode::R15) });
        assert_eq!(lines[2].text, "ALLOC a x 100");
        assert_eq!(
            lines[7].command,
            Command::Relocate {
                plan: vec![
                    ("x".into(), DestSpec::Label("C".into())),
                    ("y".into(), DestSpec::Page(3)),
                    ("z".into(), DestSpec::PageOf("x".into())),
                ]
            }
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_scenario("CREATE_SANDBOX a -\n\nBOGUS 1").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(parse_scenario("READ a x 0 4 maybe").is_err());
        assert!(parse_scenario("READ a x 0 4 ok eq=00").is_err());
        assert!(parse_scenario("RUN a 0").is_err());
    }

    #[test]
    fn hex() {
        assert_eq!(parse_hex("00FFa5").unwrap(), vec![0, 0xFF, 0xA5]);
        assert!(parse_hex("abc").is_err());
        assert!(parse_hex("zz").is_err());
    }
}
