use clap::{Parser, Subcommand, ValueEnum};
use ehvirt_core::assemble::{describe_layout, parse_module, section_table, ProtectedModule};
use ehvirt_core::harness::suites::{run_eh_suite, run_isa_suite, run_program_suite, run_shadow_suite, SuiteReport};
use ehvirt_core::isa::REG_NAMES;
use ehvirt_core::pipeline::{leak_scan, obfuscate, run_manifest, ObfuscateOptions, ProgramManifest};
use ehvirt_core::process::{OutcomeKind, RunOutcome, RunState, DEFAULT_STEP_LIMIT};
use ehvirt_core::vmir::RuleTable;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ehvirt", version, about = "Exception-aware virtualizing obfuscator for an x86-64 subset")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Virtualize the manifest's protect list and write a container.
    Obfuscate {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        shadow_len: usize,
        #[arg(long)]
        no_eh_protect: bool,
        /// Translation rule table (text form).
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Execute a manifest, optionally with a protected module installed.
    Run {
        manifest: PathBuf,
        #[arg(long)]
        module: Option<PathBuf>,
        #[arg(long)]
        entry: Option<String>,
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = DEFAULT_STEP_LIMIT)]
        max_steps: u64,
    },
    /// Run verification suites and print a JSON report.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Case count (isa, program, shadow) or repeat count (eh).
        #[arg(long)]
        cases: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a container without decrypting bytecode or EH payloads.
    Inspect {
        module: PathBuf,
        /// Scan for genuine metadata of this manifest's protected functions.
        #[arg(long)]
        leak_check: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Isa,
    Program,
    Eh,
    Shadow,
    All,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {}", msg);
    ExitCode::from(1)
}

fn load_manifest(p: &Path) -> Result<ProgramManifest, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {}", p.display(), e))?;
    ProgramManifest::from_json(&text).map_err(|e| e.to_string())
}

fn load_module(p: &Path) -> Result<ProtectedModule, String> {
    let bytes = std::fs::read(p).map_err(|e| format!("{}: {}", p.display(), e))?;
    parse_module(&bytes).map_err(|e| e.to_string())
}

fn event_name(e: &impl std::fmt::Debug) -> String {
    let s = format!("{:?}", e);
    s.split([' ', '{', '(']).next().unwrap_or("").to_string()
}

fn cmd_obfuscate(
    manifest: &Path,
    out: &Path,
    seed: u64,
    shadow_len: usize,
    no_eh: bool,
    rules: Option<&Path>,
) -> Result<(), String> {
    let m = load_manifest(manifest)?;
    let rules = match rules {
        Some(p) => RuleTable::from_file(p)?,
        None => RuleTable::default(),
    };
    let opts = ObfuscateOptions { seed, shadow_len, eh_protect: !no_eh, rules };
    let module = obfuscate(&m, &opts).map_err(|e| e.to_string())?;
    std::fs::write(out, module.serialize()).map_err(|e| format!("{}: {}", out.display(), e))?;
    println!(
        "{}",
        json!({
            "protected": m.protect,
            "handlers": module.handlers.len(),
            "cells": module.cell_count(),
            "eh_protected": module.eh_protected(),
            "shadow_lengths": module.shadow.iter().map(|s| (s.fid(), s.codes.len())).collect::<BTreeMap<_, _>>(),
        })
    );
    Ok(())
}

fn outcome_json(out: &RunOutcome, checksum: Option<(u64, Option<u64>)>) -> serde_json::Value {
    let regs: BTreeMap<&str, String> =
        REG_NAMES.iter().zip(out.state.gpr.iter()).map(|(n, v)| (*n, format!("{:#x}", v))).collect();
    let mut events: BTreeMap<String, u64> = BTreeMap::new();
    for e in &out.audit {
        *events.entry(event_name(e)).or_default() += 1;
    }
    json!({
        "outcome": out.kind,
        "rip": format!("{:#x}", out.state.rip),
        "registers": regs,
        "flags": format!("{:#x}", out.state.flags.to_bits()),
        "checksum": checksum.map(|(a, v)| json!({"addr": format!("{:#x}", a), "value": v.map(|v| format!("{:#x}", v))})),
        "stats": out.stats,
        "audit": events,
    })
}

fn cmd_run(
    manifest: &Path,
    module: Option<&Path>,
    entry: Option<&str>,
    trace: bool,
    max_steps: u64,
) -> Result<bool, String> {
    let m = load_manifest(manifest)?;
    let module = module.map(load_module).transpose()?;
    let mut rs = RunState::new(max_steps);
    if trace {
        rs = rs.with_trace();
    }
    let (out, env) = run_manifest(&m, module, entry, rs).map_err(|e| e.to_string())?;
    if let Some(t) = &out.trace {
        for line in t {
            eprintln!("{}", line);
        }
    }
    let checksum = m.checksum_addr.map(|a| (a, env.memory.read_u64(a).ok()));
    println!("{}", serde_json::to_string_pretty(&outcome_json(&out, checksum)).unwrap());
    let ok = matches!(out.kind, OutcomeKind::NormalReturn | OutcomeKind::TailRedirect(_));
    if !ok {
        for e in out.audit.iter().rev().take(10).rev() {
            eprintln!("{:?}", e);
        }
    }
    Ok(ok)
}

fn cmd_verify(suite: Suite, cases: Option<u64>, seed: u64) -> bool {
    let mut reports: Vec<SuiteReport> = vec![];
    let want = |s: Suite| suite == s || suite == Suite::All;
    if want(Suite::Isa) {
        reports.push(run_isa_suite(seed, cases.unwrap_or(1000)));
    }
    if want(Suite::Program) {
        reports.push(run_program_suite(seed, cases.unwrap_or(200)));
    }
    if want(Suite::Eh) {
        reports.push(run_eh_suite(seed, cases.unwrap_or(10)));
    }
    if want(Suite::Shadow) {
        reports.push(run_shadow_suite(seed, cases.unwrap_or(1000) as usize));
    }
    let ok = reports.iter().all(|r| r.failed == 0);
    println!("{}", serde_json::to_string_pretty(&json!({ "passed": ok, "reports": reports })).unwrap());
    ok
}

fn cmd_inspect(path: &Path, leak: Option<&Path>) -> Result<bool, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {}", path.display(), e))?;
    let module = parse_module(&bytes).map_err(|e| e.to_string())?;
    println!("XJPM v1, flags {:#06x} (eh-protected: {})", module.flags, module.eh_protected());
    println!("key {}  bytecode nonce {:#018x}  eh nonce {:#018x}", hex::encode(module.key), module.bytecode_nonce, module.eh_nonce);
    println!("sections:");
    for (tag, off, size) in section_table(&bytes).map_err(|e| e.to_string())? {
        let note = match tag.as_str() {
            "BYTC" | "EEHP" => "  (encrypted, not rendered)",
            _ => "",
        };
        println!("  {} offset {:#x} size {:#x}{}", tag, off, size, note);
    }
    println!("handlers ({}):", module.handlers.len());
    for d in &module.handlers.entries {
        println!("  {:3} {:?}.{} [{}]", d.id, d.op, d.width, describe_layout(d));
    }
    println!("functions:");
    for f in &module.functions {
        println!(
            "  fid {} [{:#x}, {:#x}) entry {:#x} cell {} reentry {}",
            f.fid,
            f.range.start,
            f.range.end,
            f.entry_pc,
            f.entry_cell,
            f.reentry.len()
        );
    }
    println!("shadow records:");
    for s in &module.shadow {
        println!("  fid {} LSHandler {:#x} codes {:?} net {:#x}", s.fid(), s.handler, s.codes, s.net_delta);
    }
    for p in &module.plain_eh {
        println!("  fid {} genuine metadata in the clear ({} bytes)", p.fid, p.bytes.len());
    }
    let Some(mp) = leak else { return Ok(true) };
    let m = load_manifest(mp)?;
    let rep = leak_scan(&m, &module).map_err(|e| e.to_string())?;
    if rep.clean() {
        println!("leak check: no leakage ({} functions scanned)", rep.scanned);
    } else {
        println!("leak check: leakage found in {:?}; bad LSHandler in {:?}", rep.leaked, rep.bad_handlers);
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Obfuscate { manifest, out, seed, shadow_len, no_eh_protect, rules } => {
            match cmd_obfuscate(&manifest, &out, seed, shadow_len, no_eh_protect, rules.as_deref()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Cmd::Run { manifest, module, entry, trace, max_steps } => {
            match cmd_run(&manifest, module.as_deref(), entry.as_deref(), trace, max_steps) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(2),
                Err(e) => fail(e),
            }
        }
        Cmd::Verify { suite, cases, seed } => {
            if cmd_verify(suite, cases, seed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Cmd::Inspect { module, leak_check } => match cmd_inspect(&module, leak_check.as_deref()) {
            Ok(_) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
    }
}
