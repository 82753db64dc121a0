// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tmebox_core::instrument::{instrument, InstrumentationConfig, Mode};
use tmebox_core::isa::Program;
use tmebox_core::overhead::{load_corpus, run_overhead};
use tmebox_core::parallel::Executor;
use tmebox_core::scenario::{run_scenario_file, ScenarioConfig};

#[derive(Parser)]
#[command(name = "tmebox-sim", version, about = "Memory-encryption sandboxing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file; exits 0 iff every expectation holds.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 6)]
        keyid_bits: u8,
        #[arg(long, default_value_t = 28)]
        mac_bits: u8,
        #[arg(long, default_value = "gs")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        phys_pages: u64,
        #[arg(long, default_value_t = 2)]
        stack_pages: u64,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the text trace here instead of standard output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Rewrite a program for confinement.
    Instrument {
        #[arg(long, default_value = "gs")]
        mode: Mode,
        /// Code region size; defaults to the smallest that fits.
        #[arg(long)]
        code_size: Option<u64>,
        /// Emit verification assertions after every confinement sequence.
        #[arg(long)]
        assert: bool,
        /// Confine memory operands only; leave indirect control flow alone.
        #[arg(long)]
        data_only: bool,
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dynamic instruction overhead of every `.s` program in a directory.
    Overhead {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000_000)]
        fuel: u64,
    },
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Cmd::Run { scenario, keyid_bits, mac_bits, mode, seed, phys_pages, stack_pages, report, trace } => {
            let cfg = ScenarioConfig { keyid_bits, mac_bits, mode, seed, phys_pages, stack_pages };
            let out = match run_scenario_file(&scenario, &cfg) {
                Ok(out) => out,
                Err(e) => bail!("{}: {e}", scenario.display()),
            };
            if let Some(p) = &report {
                fs::write(p, out.report.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            write_or_print(trace.as_ref(), &out.trace)?;
            for f in &out.report.failures {
                eprintln!("FAIL {f}");
            }
            Ok(if out.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Instrument { mode, code_size, assert, data_only, input, out, report } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let program = Program::parse(&text).with_context(|| input.display().to_string())?;
            let cfg = InstrumentationConfig {
                emit_assertions: assert,
                isolate_code: !data_only,
                code_size,
                ..InstrumentationConfig::new(mode)
            };
            let (rewritten, rep) = instrument(&program, &cfg)?;
            write_or_print(out.as_ref(), &rewritten.to_asm())?;
            if let Some(p) = &report {
                let mut value = serde_json::to_value(rep)?;
                let obj = value.as_object_mut().expect("report is an object");
                obj.insert("schema".into(), 1.into());
                obj.insert("mode".into(), mode.name().into());
                obj.insert("code_size".into(), rewritten.code_size.into());
                obj.insert("input_instructions".into(), program.len().into());
                obj.insert("output_instructions".into(), rewritten.len().into());
                fs::write(p, serde_json::to_string_pretty(&value)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Overhead { corpus, report, fuel } => {
            let programs = load_corpus(&corpus)?;
            let r = run_overhead(&programs, fuel, Executor::default())?;
            println!("{:<16} {:<4} {:<9} {:>10} {:>10} {:>8}", "program", "mode", "variant", "total", "extra", "fraction");
            for row in &r.rows {
                let variant = serde_json::to_value(row.variant)?;
                println!(
                    "{:<16} {:<4} {:<9} {:>10} {:>10} {:>8.4}",
                    row.program,
                    row.mode.name(),
                    variant.as_str().unwrap_or_default(),
                    row.total,
                    row.extra,
                    row.fraction
                );
            }
            if let Some(p) = &report {
                fs::write(p, r.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
