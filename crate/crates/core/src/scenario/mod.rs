// SPDX-License-Identifier: Apache-2.0

//! Line-oriented scenario files driving one runtime instance, with a
//! versioned JSON report and a plain-text trace. The command vocabulary is
//! described in `docs/scenario.md`.

mod parse;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub use parse::{parse_hex, parse_scenario, Command, DataCheck, DestSpec, Expect, RunExpect, ScenarioLine, ScenarioParseError};

use crate::crypto::{EngineConfig, EngineStats, KeyId};
use crate::instrument::{Mode, Report as InstrumentationReport};
use crate::isa::vm::{Counters, Status, TrapReason};
use crate::isa::Program;
use crate::runtime::{Dest, Disposition, Runtime, RuntimeConfig, RuntimeError, RuntimeStats, SandboxId};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScenarioConfig {
    pub keyid_bits: u8,
    pub mac_bits: u8,
    pub mode: Mode,
    pub seed: u64,
    pub phys_pages: u64,
    pub stack_pages: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig { keyid_bits: 6, mac_bits: 28, mode: Mode::Gs, seed: 0, phys_pages: 1024, stack_pages: 2 }
    }
}

impl ScenarioConfig {
    pub fn runtime(&self) -> RuntimeConfig {
        RuntimeConfig {
            engine: EngineConfig {
                keyid_bits: self.keyid_bits,
                mac_bits: self.mac_bits,
                rng_seed: self.seed,
                phys_pages: self.phys_pages,
            },
            mode: self.mode,
            stack_pages: self.stack_pages,
            ..RuntimeConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Parse(#[from] ScenarioParseError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommandOutcome {
    pub line: usize,
    pub command: String,
    pub result: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViolationEntry {
    pub sandbox: String,
    pub keyid: KeyId,
    pub trap: TrapReason,
    pub action: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributed_writer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SandboxEntry {
    pub name: String,
    pub keyid: KeyId,
    pub mode: Mode,
    pub status: String,
    pub flagged: bool,
    pub vm: String,
    pub counters: Counters,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrumentation: Option<InstrumentationReport>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub schema: u32,
    pub scenario: String,
    pub config: ScenarioConfig,
    pub passed: bool,
    pub failures: Vec<String>,
    pub commands: Vec<CommandOutcome>,
    pub violations: Vec<ViolationEntry>,
    pub sandboxes: Vec<SandboxEntry>,
    pub allocator: RuntimeStats,
    pub engine: EngineStats,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub trace: String,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

struct Var {
    owner: SandboxId,
    vaddr: u64,
}

struct Runner<'a> {
    rt: Runtime,
    base_dir: Option<&'a Path>,
    names: HashMap<String, SandboxId>,
    vars: HashMap<String, Var>,
}

type Step = Result<String, (String, String)>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn classify(trap: &TrapReason) -> Expect {
    match trap {
        TrapReason::IntegrityViolation { .. } => Expect::Violation,
        _ => Expect::Fault,
    }
}

fn expect_name(e: Expect) -> &'static str {
    match e {
        Expect::Ok => "ok",
        Expect::Violation => "violation",
        Expect::Fault => "fault",
    }
}

fn status_name(s: &Status) -> String {
    match s {
        Status::Running => "running".into(),
        Status::Halted => "halted".into(),
        Status::Yielded => "yielded".into(),
        Status::Exited { code } => format!("exited:{code}"),
        Status::Trapped { reason: TrapReason::FuelExhausted } => "paused".into(),
        Status::Trapped { reason } => format!("trapped:{}", reason.name()),
    }
}

impl Runner<'_> {
    fn sandbox(&self, name: &str) -> Result<SandboxId, String> {
        self.names.get(name).copied().ok_or_else(|| format!("unknown sandbox `{name}`"))
    }

    fn var(&self, var: &str) -> Result<&Var, String> {
        self.vars.get(var).ok_or_else(|| format!("unknown variable `{var}`"))
    }

    /// `var` as seen from `name`'s window.
    fn address(&self, name: &str, var: &str, offset: u64) -> Result<(SandboxId, u64), String> {
        let id = self.sandbox(name)?;
        let v = self.var(var)?;
        let mask = self.rt.mem().layout().truncation_mask();
        let base = self.rt.sandbox(id).map_err(|e| e.to_string())?.base;
        Ok((id, base | ((v.vaddr & mask).wrapping_add(offset) & mask)))
    }

    fn load_program(&self, path: &str) -> Result<Program, String> {
        let full = match self.base_dir {
            Some(dir) => dir.join(path),
            None => Path::new(path).to_path_buf(),
        };
        let text = std::fs::read_to_string(&full).map_err(|e| format!("{path}: {e}"))?;
        Program::parse(&text).map_err(|e| format!("{path}: {e}"))
    }

    fn access_result(result: Result<Vec<u8>, TrapReason>, expect: Expect, check: Option<&DataCheck>) -> Step {
        let (got, shown) = match &result {
            Ok(bytes) => (Expect::Ok, format!("ok {}", hex(bytes))),
            Err(trap) => (classify(trap), format!("{}:{}", expect_name(classify(trap)), trap.name())),
        };
        if got != expect {
            return Err((shown, format!("expected {}", expect_name(expect))));
        }
        match (check, &result) {
            (Some(DataCheck::Eq(want)), Ok(bytes)) if bytes != want => Err((shown, format!("expected bytes {}", hex(want)))),
            (Some(DataCheck::Ne(avoid)), Ok(bytes)) if bytes == avoid => Err((shown, format!("bytes must differ from {}", hex(avoid)))),
            _ => Ok(shown),
        }
    }

    fn exec(&mut self, command: &Command) -> Step {
        let fail = |msg: String| (String::from("error"), msg);
        match command {
            Command::Create { name, program, mode } => {
                if self.names.contains_key(name) {
                    return Err(fail(format!("sandbox `{name}` already exists")));
                }
                let program = match program {
                    Some(path) => self.load_program(path).map_err(fail)?,
                    None => Program::parse("halt").expect("literal program"),
                };
                let id = self.rt.create(name, &program, *mode).map_err(|e| fail(e.to_string()))?;
                self.names.insert(name.clone(), id);
                let sb = self.rt.sandbox(id).expect("just created");
                Ok(format!("keyid={} base={:#x} mode={}", sb.keyid, sb.base, sb.mode))
            }
            Command::Alloc { name, var, size } => {
                if self.vars.contains_key(var) {
                    return Err(fail(format!("variable `{var}` already bound")));
                }
                let id = self.sandbox(name).map_err(fail)?;
                let vaddr = self.rt.alloc(id, *size).map_err(|e| fail(e.to_string()))?;
                let ppn = self.rt.chunk(id, vaddr).map(|c| c.extents[0].ppn).unwrap_or_default();
                self.vars.insert(var.clone(), Var { owner: id, vaddr });
                Ok(format!("vaddr={vaddr:#x} page={ppn}"))
            }
            Command::Write { name, var, offset, bytes, expect } => {
                let (id, addr) = self.address(name, var, *offset).map_err(fail)?;
                let result = self.rt.write_as(id, addr, bytes).map_err(|e| fail(e.to_string()))?;
                Self::access_result(result.map(|()| Vec::new()), *expect, None).map(|s| s.trim_end().to_string())
            }
            Command::Read { name, var, offset, len, expect, check } => {
                let (id, addr) = self.address(name, var, *offset).map_err(fail)?;
                let result = self.rt.read_as(id, addr, *len).map_err(|e| fail(e.to_string()))?;
                Self::access_result(result, *expect, check.as_ref())
            }
            Command::Free { name, var, expect_invalid } => {
                let (id, addr) = self.address(name, var, 0).map_err(fail)?;
                match (self.rt.free(id, addr), expect_invalid) {
                    (Ok(()), false) => Ok("ok".into()),
                    (Err(RuntimeError::InvalidFree { .. }), true) => Ok("invalid".into()),
                    (Ok(()), true) => Err(("ok".into(), "expected invalid".into())),
                    (Err(e), _) => Err(fail(e.to_string())),
                }
            }
            Command::Relocate { plan } => {
                let mut labels: Vec<&str> = Vec::new();
                let mut resolved = Vec::new();
                for (var, spec) in plan {
                    let v = self.var(var).map_err(fail)?;
                    let dest = match spec {
                        DestSpec::Page(p) => Dest::Page(*p),
                        DestSpec::PageOf(other) => {
                            let o = self.var(other).map_err(fail)?;
                            let c = self.rt.chunk(o.owner, o.vaddr).ok_or_else(|| fail(format!("`{other}` is not live")))?;
                            Dest::Page(c.extents[0].ppn)
                        }
                        DestSpec::Label(l) => {
                            let idx = labels.iter().position(|x| x == l).unwrap_or_else(|| {
                                labels.push(l);
                                labels.len() - 1
                            });
                            Dest::Fresh(idx as u32)
                        }
                    };
                    resolved.push((v.owner, v.vaddr, dest));
                }
                let s = self.rt.relocate(&resolved).map_err(|e| fail(e.to_string()))?;
                let fresh: Vec<String> = s.fresh_pages.iter().map(|(l, p)| format!("{}={p}", labels[*l as usize])).collect();
                Ok(format!(
                    "moved {} chunks ({} lines) fresh=[{}] reclaimed={:?}",
                    s.moved_chunks,
                    s.moved_lines,
                    fresh.join(","),
                    s.reclaimed_pages
                ))
            }
            Command::Run { name, fuel, expect } => {
                let id = self.sandbox(name).map_err(fail)?;
                let status = self.rt.run(id, *fuel).map_err(|e| fail(e.to_string()))?;
                let c = self.rt.sandbox(id).expect("known").vm().counters;
                let shown = format!("{} total={} extra={}", status_name(&status), c.total, c.extra_instrumentation);
                let ok = match (expect, &status) {
                    (None, _) => true,
                    (Some(RunExpect::Halted), Status::Halted) => true,
                    (Some(RunExpect::Yielded), Status::Yielded) => true,
                    (Some(RunExpect::Exited(None)), Status::Exited { .. }) => true,
                    (Some(RunExpect::Exited(Some(want))), Status::Exited { code }) => want == code,
                    (Some(RunExpect::Paused), Status::Trapped { reason: TrapReason::FuelExhausted }) => true,
                    (Some(RunExpect::Trapped(want)), Status::Trapped { reason }) => {
                        reason.name() == want && *reason != TrapReason::FuelExhausted
                    }
                    _ => false,
                };
                if ok {
                    Ok(shown)
                } else {
                    Err((shown, format!("expected {expect:?}")))
                }
            }
            Command::Schedule { slice, rounds } => {
                let used = self.rt.schedule(*slice, *rounds).map_err(|e| fail(e.to_string()))?;
                Ok(format!("rounds={used}"))
            }
            Command::ForgeRead { name, addr, expect } => {
                let id = self.sandbox(name).map_err(fail)?;
                let (confined, result) = self.rt.forge_read(id, *addr).map_err(|e| fail(e.to_string()))?;
                Self::access_result(result, *expect, None).map(|s| format!("addr={confined:#x} {s}")).map_err(
                    |(s, d)| (format!("addr={confined:#x} {s}"), d),
                )
            }
            Command::ExpectTerminated { name, reason } => {
                let id = self.sandbox(name).map_err(fail)?;
                let sb = self.rt.sandbox(id).expect("known");
                match sb.termination() {
                    Some(t) if t.name() == reason => Ok(format!("terminated:{}", t.name())),
                    Some(t) => Err((format!("terminated:{}", t.name()), format!("expected {reason}"))),
                    None => Err(("live".into(), format!("expected terminated:{reason}"))),
                }
            }
            Command::ExpectLive { name } => {
                let id = self.sandbox(name).map_err(fail)?;
                match self.rt.sandbox(id).expect("known").termination() {
                    None => Ok("live".into()),
                    Some(t) => Err((format!("terminated:{}", t.name()), "expected live".into())),
                }
            }
            Command::ExpectFlagged { name } => {
                let id = self.sandbox(name).map_err(fail)?;
                if self.rt.sandbox(id).expect("known").flagged {
                    Ok("flagged".into())
                } else {
                    Err(("not flagged".into(), "expected flagged".into()))
                }
            }
            Command::ExpectStat { key, value } => {
                let stats = serde_json::to_value(self.rt.stats()).expect("stats serialize");
                let got = stats.get(key).and_then(|v| v.as_u64()).ok_or_else(|| fail(format!("unknown stat `{key}`")))?;
                if got == *value {
                    Ok(format!("{key}={got}"))
                } else {
                    Err((format!("{key}={got}"), format!("expected {value}")))
                }
            }
            Command::ExpectOutput { name, bytes } => {
                let id = self.sandbox(name).map_err(fail)?;
                let out = &self.rt.sandbox(id).expect("known").output;
                if out == bytes {
                    Ok(format!("output={}", hex(out)))
                } else {
                    Err((format!("output={}", hex(out)), format!("expected {}", hex(bytes))))
                }
            }
        }
    }
}

/// Runs a scenario. Program paths resolve against `base_dir`. The report
/// and trace depend only on the text, the program files and `cfg`.
pub fn run_scenario(
    text: &str,
    scenario_name: &str,
    base_dir: Option<&Path>,
    cfg: &ScenarioConfig,
) -> Result<ScenarioOutcome, ScenarioError> {
    let lines = parse_scenario(text)?;
    let rt = Runtime::new(cfg.runtime())?;
    let mut runner = Runner { rt, base_dir, names: HashMap::new(), vars: HashMap::new() };
    let mut commands = Vec::new();
    let mut failures = Vec::new();
    let mut trace = String::new();
    let _ = writeln!(trace, "scenario {scenario_name} schema={REPORT_SCHEMA}");
    for l in &lines {
        let seen = runner.rt.violations().len();
        let (result, passed, detail) = match runner.exec(&l.command) {
            Ok(r) => (r, true, None),
            Err((r, d)) => {
                failures.push(format!("line {}: {}: {d} (got {r})", l.line, l.text));
                (r, false, Some(d))
            }
        };
        let _ = writeln!(trace, "{:>4} {} => {}{}", l.line, l.text, result, if passed { "" } else { "  [FAIL]" });
        for v in &runner.rt.violations()[seen..] {
            let name = &runner.rt.sandbox(v.sandbox).expect("recorded").name;
            let _ = writeln!(trace, "       violation {} {} -> {}", name, v.trap.name(), disposition_name(&v.disposition));
        }
        commands.push(CommandOutcome { line: l.line, command: l.text.clone(), result, passed, detail });
    }

    let rt = &runner.rt;
    let name_of = |id: SandboxId| rt.sandbox(id).map(|s| s.name.clone()).unwrap_or_default();
    let violations = rt
        .violations()
        .iter()
        .map(|v| ViolationEntry {
            sandbox: name_of(v.sandbox),
            keyid: v.keyid,
            trap: v.trap.clone(),
            action: disposition_name(&v.disposition).to_string(),
            attributed_writer: match v.disposition {
                Disposition::VictimAborted { writer } => writer.map(name_of),
                Disposition::Terminated => None,
            },
        })
        .collect();
    let sandboxes = rt
        .sandboxes()
        .iter()
        .map(|s| SandboxEntry {
            name: s.name.clone(),
            keyid: s.keyid,
            mode: s.mode,
            status: match s.termination() {
                None => "live".into(),
                Some(t) => format!("terminated:{}", t.name()),
            },
            flagged: s.flagged,
            vm: status_name(&s.vm().status),
            counters: s.vm().counters,
            instrumentation: s.report,
            output: hex(&s.output),
        })
        .collect();
    let passed = failures.is_empty();
    let _ = writeln!(trace, "result {}", if passed { "pass" } else { "fail" });
    let report = ScenarioReport {
        schema: REPORT_SCHEMA,
        scenario: scenario_name.to_string(),
        config: *cfg,
        passed,
        failures,
        commands,
        violations,
        sandboxes,
        allocator: rt.stats(),
        engine: rt.mem().engine().stats(),
    };
    Ok(ScenarioOutcome { report, trace })
}

/// Reads and runs a scenario file; programs resolve next to it.
pub fn run_scenario_file(path: &Path, cfg: &ScenarioConfig) -> Result<ScenarioOutcome, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(run_scenario(&text, &name, path.parent(), cfg)?)
}

fn disposition_name(d: &Disposition) -> &'static str {
    match d {
        Disposition::Terminated => "terminated",
        Disposition::VictimAborted { .. } => "victim_aborted",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str) -> ScenarioOutcome {
        run_scenario(text, "t.scn", None, &ScenarioConfig::default()).unwrap()
    }

    #[test]
    fn own_and_cross_reads() {
        let out = run("\
CREATE_SANDBOX a -
CREATE_SANDBOX b -
ALLOC a x 64
WRITE a x 0 01020304
READ a x 0 4 ok eq=01020304
READ b x 0 4 violation
EXPECT_TERMINATED b IntegrityViolation
EXPECT_LIVE a
EXPECT_STAT violations 1
");
        assert!(out.passed(), "{:#?}", out.report.failures);
        assert_eq!(out.report.schema, 1);
    }

    #[test]
    fn mismatches_are_listed() {
        let out = run("CREATE_SANDBOX a -\nALLOC a x 64\nREAD a x 0 1 violation\nEXPECT_STAT pages_reclaimed 9\n");
        assert!(!out.passed());
        assert_eq!(out.report.failures.len(), 2);
        assert!(out.report.failures[0].starts_with("line 3"));
        assert!(out.trace.contains("[FAIL]"));
    }

    #[test]
    fn unknown_names_fail_the_command() {
        let out = run("READ ghost x 0 1 ok\n");
        assert!(!out.passed());
        assert!(out.report.failures[0].contains("unknown sandbox"));
    }

    #[test]
    fn forged_pointer_is_confined() {
        let out = run("\
CREATE_SANDBOX a -
CREATE_SANDBOX b -
ALLOC a x 64
FORGE_READ b 0x0001001000000000 violation
");
        assert!(out.passed(), "{:#?}", out.report.failures);
        assert!(out.report.commands[3].result.starts_with("addr=0x2001000000000"));
    }

    #[test]
    fn same_input_same_report() {
        let text = "CREATE_SANDBOX a -\nALLOC a x 300\nWRITE a x 10 ff\nREAD a x 0 16 ok\n";
        let (x, y) = (run(text), run(text));
        assert_eq!(x.report.to_json(), y.report.to_json());
        assert_eq!(x.trace, y.trace);
    }
}
