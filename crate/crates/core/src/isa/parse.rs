// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use thiserror::Error;

use super::{min_code_size, AddrSource, Cond, Imm, Instr, MemOperand, Operand, Origin, Program, Reg, RuntimeCall, Segment, Slot, Target};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

/// Instruction with label references still unresolved.
enum Pending {
    Done(Instr),
    Jcc(Cond, String),
    Jmp(String),
    Call(String),
    MovLabel(Reg, String),
}

pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut labels: HashMap<String, u32> = HashMap::new();
    let mut pending: Vec<(usize, Pending)> = Vec::new();
    let mut static_data = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| ParseError { line: line_no, message };
        let mut line = raw.split(';').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some((name, rest)) = split_label(line) {
            if labels.insert(name.to_string(), pending.len() as u32).is_some() {
                return Err(err(format!("duplicate label `{name}`")));
            }
            line = rest.trim();
            if line.is_empty() {
                continue;
            }
        }
        if let Some(hex) = line.strip_prefix(".static") {
            static_data.extend(decode_hex(hex).map_err(err)?);
            continue;
        }
        let instr = parse_instr(line).map_err(err)?;
        pending.push((line_no, instr));
    }

    let resolve = |line: usize, name: &str| -> Result<u32, ParseError> {
        if let Some(n) = parse_number(name) {
            return u32::try_from(n).map_err(|_| ParseError { line, message: format!("target {name} out of range") });
        }
        labels
            .get(name)
            .copied()
            .ok_or_else(|| ParseError { line, message: format!("undefined label `{name}`") })
    };

    let mut slots = Vec::with_capacity(pending.len());
    for (i, (line, p)) in pending.into_iter().enumerate() {
        let instr = match p {
            Pending::Done(instr) => instr,
            Pending::Jcc(cond, l) => Instr::Jcc { cond, target: resolve(line, &l)? },
            Pending::Jmp(l) => Instr::Jmp { target: resolve(line, &l)? },
            Pending::Call(l) => Instr::Call { target: Target::Code(resolve(line, &l)?) },
            Pending::MovLabel(dst, l) => Instr::MovImm { dst, imm: Imm::Code(resolve(line, &l)?) },
        };
        slots.push(Slot { instr, origin: Origin::Original, source: i as u32 });
    }
    let code_size = min_code_size(slots.len());
    Ok(Program { slots, static_data, code_size })
}

fn split_label(line: &str) -> Option<(&str, &str)> {
    let colon = line.find(':')?;
    let name = &line[..colon];
    (is_ident(name) && name != "gs").then(|| (name, &line[colon + 1..]))
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn decode_hex(s: &str) -> Result<Vec<u8>, String> {
    let digits: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !digits.len().is_multiple_of(2) {
        return Err("odd number of hex digits".into());
    }
    (0..digits.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&digits[i..i + 2], 16).map_err(|_| format!("bad hex `{}`", &digits[i..i + 2])))
        .collect()
}

/// Decimal (optionally negative, two's complement) or `0x` hex.
pub(crate) fn parse_number(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return u64::from_str_radix(&hex.replace('_', ""), 16).ok();
    }
    if let Some(neg) = s.strip_prefix('-') {
        let v: u64 = neg.parse().ok()?;
        return (v <= 1 << 63).then(|| v.wrapping_neg());
    }
    s.parse().ok()
}

fn parse_reg(s: &str) -> Result<Reg, String> {
    match s.trim() {
        "rsp" => Ok(Reg::RSP),
        "rbp" => Ok(Reg::RBP),
        "gs" => Err("gs is not a general-purpose register".into()),
        other => other
            .strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .filter(|n| *n < 16)
            .map(Reg::gpr)
            .ok_or_else(|| format!("expected register, found `{other}`")),
    }
}

fn parse_operand(s: &str) -> Result<Operand, String> {
    match parse_number(s) {
        Some(v) => Ok(Operand::Imm(v)),
        None => parse_reg(s).map(Operand::Reg),
    }
}

fn parse_imm(s: &str) -> Result<u64, String> {
    parse_number(s).ok_or_else(|| format!("expected immediate, found `{}`", s.trim()))
}

fn parse_mem(s: &str) -> Result<MemOperand, String> {
    let s = s.trim();
    let (segment, rest) = match s.strip_prefix("gs:") {
        Some(r) => (Segment::Gs, r.trim()),
        None => (Segment::None, s),
    };
    let inner = rest
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| format!("expected memory operand, found `{s}`"))?;
    let mut mem = MemOperand { segment, ..Default::default() };
    let mut disp: i64 = 0;
    let mut term = String::new();
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut negative = false;
    for c in inner.chars().filter(|c| !c.is_whitespace()) {
        if (c == '+' || c == '-') && !term.is_empty() {
            terms.push((negative, std::mem::take(&mut term)));
            negative = c == '-';
        } else if c == '-' && term.is_empty() {
            negative = !negative;
        } else if c != '+' {
            term.push(c);
        }
    }
    if term.is_empty() {
        return Err(format!("empty term in `{s}`"));
    }
    terms.push((negative, term));

    for (neg, t) in terms {
        if let Some(v) = parse_number(&t) {
            let v = i64::try_from(v).map_err(|_| format!("displacement out of range in `{s}`"))?;
            disp += if neg { -v } else { v };
            continue;
        }
        if neg {
            return Err(format!("register cannot be subtracted in `{s}`"));
        }
        if let Some((r, scale)) = t.split_once('*') {
            let scale: u8 = scale.parse().map_err(|_| format!("bad scale in `{s}`"))?;
            if ![1, 2, 4, 8].contains(&scale) {
                return Err(format!("scale must be 1, 2, 4 or 8 in `{s}`"));
            }
            if mem.index.is_some() {
                return Err(format!("two index registers in `{s}`"));
            }
            mem.index = Some((parse_reg(r)?, scale));
        } else {
            let r = parse_reg(&t)?;
            if mem.base.is_none() {
                mem.base = Some(r);
            } else if mem.index.is_none() {
                mem.index = Some((r, 1));
            } else {
                return Err(format!("too many registers in `{s}`"));
            }
        }
    }
    mem.disp = i32::try_from(disp).map_err(|_| format!("displacement out of range in `{s}`"))?;
    Ok(mem)
}

fn parse_instr(line: &str) -> Result<Pending, String> {
    let (mnemonic, rest) = match line.find(char::is_whitespace) {
        Some(i) => (&line[..i], line[i..].trim()),
        None => (line, ""),
    };
    let ops: Vec<&str> = if rest.is_empty() { Vec::new() } else { rest.split(',').map(str::trim).collect() };
    let arity = |n: usize| -> Result<(), String> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(format!("`{mnemonic}` takes {n} operand(s), found {}", ops.len()))
        }
    };
    let label = |s: &str| -> Result<String, String> {
        if is_ident(s) || parse_number(s).is_some() {
            Ok(s.to_string())
        } else {
            Err(format!("expected label, found `{s}`"))
        }
    };

    let instr = match mnemonic {
        "mov" => {
            arity(2)?;
            Instr::Mov { dst: parse_reg(ops[0])?, src: parse_reg(ops[1])? }
        }
        "movimm" => {
            arity(2)?;
            let dst = parse_reg(ops[0])?;
            match parse_number(ops[1]) {
                Some(v) => Instr::MovImm { dst, imm: Imm::Value(v) },
                None => return Ok(Pending::MovLabel(dst, label(ops[1])?)),
            }
        }
        "add" | "or" => {
            arity(3)?;
            let (dst, a, b) = (parse_reg(ops[0])?, parse_reg(ops[1])?, parse_operand(ops[2])?);
            if mnemonic == "add" {
                Instr::Add { dst, a, b }
            } else {
                Instr::Or { dst, a, b }
            }
        }
        "and_keepflags" => {
            arity(3)?;
            let src = if ops[1].contains('[') {
                AddrSource::Expr(parse_mem(ops[1])?)
            } else {
                AddrSource::Reg(parse_reg(ops[1])?)
            };
            Instr::AndKeepFlags { dst: parse_reg(ops[0])?, src, mask: parse_imm(ops[2])? }
        }
        "lea" => {
            arity(2)?;
            Instr::Lea { dst: parse_reg(ops[0])?, mem: parse_mem(ops[1])? }
        }
        "load" => {
            arity(2)?;
            Instr::Load { dst: parse_reg(ops[0])?, mem: parse_mem(ops[1])? }
        }
        "store" => {
            arity(2)?;
            Instr::Store { mem: parse_mem(ops[0])?, src: parse_reg(ops[1])? }
        }
        "cmp" => {
            arity(2)?;
            Instr::Cmp { a: parse_reg(ops[0])?, b: parse_operand(ops[1])? }
        }
        "jz" | "jnz" => {
            arity(1)?;
            let cond = if mnemonic == "jz" { Cond::Zero } else { Cond::NotZero };
            return Ok(Pending::Jcc(cond, label(ops[0])?));
        }
        "jmp" => {
            arity(1)?;
            return Ok(Pending::Jmp(label(ops[0])?));
        }
        "call" => {
            arity(1)?;
            if let Some(name) = ops[0].strip_prefix('@') {
                let call = RuntimeCall::from_name(name).ok_or_else(|| format!("unknown runtime entry `@{name}`"))?;
                Instr::Call { target: Target::Runtime(call) }
            } else {
                return Ok(Pending::Call(label(ops[0])?));
            }
        }
        "jmpreg" | "callreg" | "push" | "pop" => {
            arity(1)?;
            let reg = parse_reg(ops[0])?;
            match mnemonic {
                "jmpreg" => Instr::JmpReg { reg },
                "callreg" => Instr::CallReg { reg },
                "push" => Instr::Push { reg },
                _ => Instr::Pop { reg },
            }
        }
        "maskcode" => match ops.len() {
            1 => {
                let r = parse_reg(ops[0])?;
                Instr::MaskCode { dst: r, src: r }
            }
            2 => Instr::MaskCode { dst: parse_reg(ops[0])?, src: parse_reg(ops[1])? },
            n => return Err(format!("`maskcode` takes 1 or 2 operands, found {n}")),
        },
        "assert_alias" => {
            arity(1)?;
            match ops[0].strip_prefix("gs:") {
                Some(r) => Instr::AssertAlias { reg: parse_reg(r)?, segment: Segment::Gs },
                None => Instr::AssertAlias { reg: parse_reg(ops[0])?, segment: Segment::None },
            }
        }
        "ret" | "syscall" | "halt" => {
            arity(0)?;
            match mnemonic {
                "ret" => Instr::Ret,
                "syscall" => Instr::Syscall,
                _ => Instr::Halt,
            }
        }
        other => return Err(format!("unknown mnemonic `{other}`")),
    };
    Ok(Pending::Done(instr))
}
