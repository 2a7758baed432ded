//! Acceptance criteria, one verdict line each.

use ehvirt_core::assemble::{mandatory_handlers, parse_module, ProtectedModule};
use ehvirt_core::eh::ContextRecord;
use ehvirt_core::harness::isa_cases::{gen_isa_case, MemShape};
use ehvirt_core::harness::programs::{gen_program_case, program_check, ProgramCase};
use ehvirt_core::harness::scenarios::{build_eh_scenarios, depth_chain, judge};
use ehvirt_core::harness::suites::{config_module, run_eh_suite, run_isa_suite, scenario_seed, Config};
use ehvirt_core::harness::Verdict;
use ehvirt_core::isa::{Flags, Opcode, Operand, Width};
use ehvirt_core::machine::{layout, MachineState, Memory};
use ehvirt_core::pipeline::{leak_scan, obfuscate, run_manifest, sub_seed, ObfuscateOptions, ProgramManifest};
use ehvirt_core::process::{RunState, DEFAULT_STEP_LIMIT};
use ehvirt_core::shadow::{diversity_report, gen_shadow_codes, validate_shadow, ShadowRecord};
use ehvirt_core::cfg::FunctionRange;
use ehvirt_core::vmir::RuleTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

const SEED: u64 = 0x5EED_2024;
const ISA_CASES: u64 = 100_000;
const PROGRAMS: u64 = 200;
const EH_REPEATS: u64 = 10;
const ROLLBACK_PAIRS: u64 = 10_000;
const FLIP_TRIALS: usize = 100;

struct Line {
    id: u32,
    pass: bool,
    text: String,
}

fn line(id: u32, pass: bool, text: String) -> Line {
    Line { id, pass, text }
}

fn imm_masked(i: &ehvirt_core::isa::Instruction) -> Option<u64> {
    i.operands.iter().find_map(|o| match o {
        Operand::Imm(v) => Some(match i.width {
            Width::W8 => *v as u64 & 0xFF,
            Width::W32 => *v as u64 & 0xFFFF_FFFF,
            _ => *v as u64,
        }),
        _ => None,
    })
}

fn c1_isa() -> Line {
    let t = Instant::now();
    let rep = run_isa_suite(SEED, ISA_CASES);
    let mut ops = BTreeSet::new();
    let (mut imm00, mut immff, mut imm80, mut sib8) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..ISA_CASES {
        let c = gen_isa_case(SEED, i);
        ops.insert(c.instr.opcode);
        match imm_masked(&c.instr) {
            Some(0) => imm00 += 1,
            Some(0xFF) => immff += 1,
            Some(0x8000_0000) => imm80 += 1,
            _ => {}
        }
        let has_sib8 = c.instr.operands.iter().any(|o| matches!(o, Operand::Mem(m) if m.base.is_some() && matches!(m.index, Some((_, 8))) && m.disp != 0));
        if c.mem_shape == Some(MemShape::BaseIndexDisp) && has_sib8 {
            sib8 += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = rep.cases == ISA_CASES
        && rep.failed == 0
        && ops.len() == Opcode::ALL.len()
        && imm00 > 0
        && immff > 0
        && imm80 > 0
        && sib8 > 0
        && secs < 300.0;
    let first = rep.failures.first().map(|f| format!("; first failure #{} {}: {}", f.index, f.name, f.detail)).unwrap_or_default();
    line(
        1,
        pass,
        format!(
            "{}/{} instruction cases identical, {} opcode kinds, imm 0x00/0xFF/0x80000000 cases {}/{}/{}, base+index*8+disp cases {}, {:.1}s{}",
            rep.passed, rep.cases, ops.len(), imm00, immff, imm80, sib8, secs, first
        ),
    )
}

struct Built {
    case: ProgramCase,
    module: ProtectedModule,
}

fn c2_programs() -> (Line, Vec<Built>) {
    let t = Instant::now();
    let rows: Vec<(Built, Verdict, u64)> = (0..PROGRAMS)
        .into_par_iter()
        .map(|i| {
            let case = gen_program_case(SEED, i);
            let opts = ObfuscateOptions { seed: sub_seed(SEED, &format!("program{}", i)), ..Default::default() };
            let module = obfuscate(&case.manifest, &opts).expect("program obfuscates");
            let chk = program_check(&case, &module);
            (Built { case, module }, chk.verdict, chk.stats.dispatches)
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let passed = rows.iter().filter(|r| r.1.passed()).count();
    let tables = rows.iter().filter(|r| r.0.case.jump_tables > 0).count();
    let in_range = rows.iter().all(|r| (5..=40).contains(&r.0.case.blocks));
    let virtualized = rows.iter().all(|r| r.2 > 0);
    let pass = passed as u64 == PROGRAMS && tables * 10 >= PROGRAMS as usize && in_range && virtualized && secs < 300.0;
    let first = rows
        .iter()
        .find_map(|r| match &r.1 {
            Verdict::Fail(d) => Some(format!("; program {} differs in {}", r.0.case.index, d.field)),
            _ => None,
        })
        .unwrap_or_default();
    let l = line(
        2,
        pass,
        format!(
            "{}/{} programs identical (checksum and full state), {} with jump tables, blocks within 5..=40: {}, all ran in the VM: {}, {:.1}s{}",
            passed, PROGRAMS, tables, in_range, virtualized, secs, first
        ),
    );
    (l, rows.into_iter().map(|r| r.0).collect())
}

fn c3_c10_eh() -> (Line, Line) {
    let rep = run_eh_suite(SEED, EH_REPEATS);
    let runs: Vec<ehvirt_core::harness::suites::EhRun> = serde_json::from_value(rep.details.clone()).unwrap();
    let mut combos = BTreeSet::new();
    let mut bad = BTreeSet::new();
    for r in &runs {
        combos.insert((r.scenario.clone(), r.config));
        if !r.passed {
            bad.insert((r.scenario.clone(), r.config));
        }
    }
    let scenarios: BTreeSet<&String> = runs.iter().map(|r| &r.scenario).collect();
    let pass3 = rep.failed == 0 && combos.len() == 24 && bad.is_empty() && scenarios.len() == 8 && rep.cases == 24 * EH_REPEATS;
    let first = rep.failures.first().map(|f| format!("; {}: {}", f.name, f.detail)).unwrap_or_default();
    let l3 = line(
        3,
        pass3,
        format!(
            "{}/24 scenario-configurations pass, {}/{} runs over {} repeats agree with the unprotected observables{}",
            combos.len() - bad.len(),
            rep.passed,
            rep.cases,
            EH_REPEATS,
            first
        ),
    );
    let decrypts: u64 = runs.iter().map(|r| r.decrypts).sum();
    let unbalanced = runs.iter().filter(|r| r.decrypts != r.sanitizes).count();
    let eh_without = runs.iter().filter(|r| r.config == Config::Eh && r.decrypts == 0).count();
    let stray = runs.iter().filter(|r| r.config != Config::Eh && r.decrypts + r.sanitizes > 0).count();
    let pass10 = unbalanced == 0 && eh_without == 0 && stray == 0 && decrypts > 0;
    let l10 = line(
        10,
        pass10,
        format!(
            "{} decrypt events across {} runs, runs with decrypts != sanitizes: {}, EH runs without decrypts: {}, unshadowed runs with events: {}",
            decrypts,
            runs.len(),
            unbalanced,
            eh_without,
            stray
        ),
    );
    (l3, l10)
}

fn c4_diversity() -> Line {
    let one = diversity_report(1, 1000, SEED);
    let five = diversity_report(5, 1000, SEED);
    let invalid = (0..1000u64)
        .flat_map(|i| [gen_shadow_codes(SEED.wrapping_add(i), 1), gen_shadow_codes(SEED.wrapping_add(i), 5)])
        .filter(|c| !validate_shadow(c).is_empty())
        .count();
    line(
        4,
        one.distinct_signatures == 12 && five.distinct_sequences >= 990 && invalid == 0,
        format!(
            "length 1: {} distinct type signatures (want 12); length 5: {} distinct sequences of 1000 (want >= 990); invalid sequences: {}",
            one.distinct_signatures, five.distinct_sequences, invalid
        ),
    )
}

/// EH and base modules for every scenario repeat.
fn scenario_modules() -> Vec<(ProgramManifest, Config, ProtectedModule)> {
    let scenarios = build_eh_scenarios();
    let mut out = vec![];
    for s in &scenarios {
        for r in 0..EH_REPEATS {
            for c in [Config::Base, Config::Eh] {
                let m = config_module(&s.manifest, c, scenario_seed(SEED, s, r)).unwrap().unwrap();
                out.push((s.manifest.clone(), c, m));
            }
        }
    }
    out
}

fn c5_leak(programs: &[Built], scen: &[(ProgramManifest, Config, ProtectedModule)]) -> Line {
    let (mut eh_modules, mut eh_scanned, mut eh_leaks, mut bad_handlers) = (0, 0, 0, 0);
    let (mut base_modules, mut base_scanned, mut base_found) = (0, 0, 0);
    let program_iter = programs.iter().map(|b| (&b.case.manifest, Config::Eh, &b.module));
    for (m, c, module) in program_iter.chain(scen.iter().map(|(m, c, x)| (m, *c, x))) {
        let rep = leak_scan(m, module).unwrap();
        match c {
            Config::Eh => {
                eh_modules += 1;
                eh_scanned += rep.scanned;
                eh_leaks += rep.leaked.len();
                bad_handlers += rep.bad_handlers.len();
                for s in &module.shadow {
                    if s.handler != layout::INTERCEPTOR {
                        bad_handlers += 1;
                    }
                }
            }
            _ => {
                base_modules += 1;
                base_scanned += rep.scanned;
                base_found += rep.leaked.len();
            }
        }
    }
    let pass = eh_leaks == 0 && bad_handlers == 0 && eh_scanned > 0 && base_scanned > 0 && base_found == base_scanned;
    line(
        5,
        pass,
        format!(
            "EH modules: {} ({} functions scanned), leaks {}, LSHandler != interceptor {}; base modules: {}, genuine metadata found for {}/{} functions",
            eh_modules, eh_scanned, eh_leaks, bad_handlers, base_modules, base_found, base_scanned
        ),
    )
}

fn c6_rollback() -> Line {
    let base = 0x7FFE_0000u64;
    let failures: u64 = (0..ROLLBACK_PAIRS)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut mem = Memory::new();
            mem.map(base, 0x2_0000);
            let fill: Vec<u8> = (0..0x2_0000).map(|_| rng.gen()).collect();
            mem.write(base, &fill).unwrap();
            let mut st = MachineState::new(rng.gen(), 0);
            for g in st.gpr.iter_mut() {
                *g = rng.gen();
            }
            st.set_rsp(base + 8 * rng.gen_range(0x10..0x1000u64));
            st.flags = Flags { cf: rng.gen(), pf: rng.gen(), af: rng.gen(), zf: rng.gen(), sf: rng.gen(), of: rng.gen() };
            let mut rec = ContextRecord::new(st);
            rec.frame_base = base + 8 * rng.gen_range(0..0x1000u64);
            let codes = gen_shadow_codes(rng.gen(), rng.gen_range(1..=5));
            let s = ShadowRecord::new(FunctionRange::new(1, 0x1000, 0x2000), codes, layout::INTERCEPTOR);
            match s.apply(&rec, &mem) {
                Ok(after) if s.rollback(&after, &rec) == rec => 0,
                _ => 1,
            }
        })
        .sum();
    line(6, failures == 0, format!("{} of {} (shadow, record) pairs restored field-for-field", ROLLBACK_PAIRS - failures, ROLLBACK_PAIRS))
}

fn c7_depth() -> Line {
    let patterns: [(&str, fn(usize) -> bool); 3] = [("all", |_| true), ("odd", |k| k % 2 == 1), ("none", |_| false)];
    let mut bad = vec![];
    let mut checked = 0;
    for d in 0..=7usize {
        for (name, p) in patterns {
            let s = depth_chain(d, p);
            let protected = (0..=d).filter(|k| p(*k)).count() as u64;
            let cfg = if protected == 0 { Config::Unprotected } else { Config::Eh };
            let module = config_module(&s.manifest, cfg, sub_seed(SEED, &s.name)).unwrap();
            let (out, env) = run_manifest(&s.manifest, module, None, RunState::new(DEFAULT_STEP_LIMIT)).unwrap();
            checked += 1;
            let ok = judge(&s, &out, &env).is_ok()
                && out.stats.frames_per_raise == vec![d as u64 + 1]
                && out.stats.interceptor_calls == protected;
            if !ok {
                bad.push(format!(
                    "depth {} {}: frames {:?} interceptor {} (want {})",
                    d, name, out.stats.frames_per_raise, out.stats.interceptor_calls, protected
                ));
            }
        }
    }
    line(
        7,
        bad.is_empty(),
        format!("{}/{} chains (depth 0..=7, all/odd/no frames protected) process depth+1 frames with one interceptor call per protected frame{}", checked - bad.len(), checked, bad.first().map(|b| format!("; {}", b)).unwrap_or_default()),
    )
}

fn minimal(m: &ProtectedModule) -> bool {
    let mut want: BTreeSet<u16> = m.referenced_handlers();
    for (op, w) in mandatory_handlers() {
        match m.handlers.id_of(op, w) {
            Some(id) => want.insert(id),
            None => return false,
        };
    }
    let have: BTreeSet<u16> = m.handlers.entries.iter().map(|d| d.id).collect();
    have == want
}

fn c8_format(modules: &[&ProtectedModule]) -> Line {
    let not_minimal = modules.par_iter().filter(|m| !minimal(m)).count();
    let bad_trip = modules
        .par_iter()
        .filter(|m| {
            let bytes = m.serialize();
            match parse_module(&bytes) {
                Ok(p) => p.serialize() != bytes || p != ***m,
                Err(_) => true,
            }
        })
        .count();
    let eh: Vec<&&ProtectedModule> = modules.iter().filter(|m| !m.eh_payload.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xF11F);
    let mut missed = 0;
    for t in 0..FLIP_TRIALS {
        let mut m = (**eh[rng.gen_range(0..eh.len())]).clone();
        let mask: u8 = rng.gen_range(1..=255);
        if t % 2 == 0 {
            let k = rng.gen_range(0..m.bytecode.len());
            m.bytecode[k] ^= mask;
        } else {
            let p = rng.gen_range(0..m.eh_payload.len());
            let ct = &mut m.eh_payload[p].ciphertext;
            let k = rng.gen_range(0..ct.len());
            ct[k] ^= mask;
        }
        if let Ok(parsed) = parse_module(&m.serialize()) {
            if parsed.validate().is_ok() {
                missed += 1;
            }
        }
    }
    line(
        8,
        not_minimal == 0 && bad_trip == 0 && missed == 0 && !modules.is_empty(),
        format!(
            "{} modules: non-minimal handler tables {}, round-trip mismatches {}; {}/{} single-byte ciphertext flips detected",
            modules.len(),
            not_minimal,
            bad_trip,
            FLIP_TRIALS - missed,
            FLIP_TRIALS
        ),
    )
}

fn c9_fallback() -> Line {
    let rules = RuleTable::default().with_fallback_for(Opcode::ADD);
    let rows: Vec<(bool, u64)> = (0..40u64)
        .into_par_iter()
        .map(|i| {
            let case = gen_program_case(SEED, i);
            let opts = ObfuscateOptions { seed: sub_seed(SEED, &format!("fallback{}", i)), rules: rules.clone(), ..Default::default() };
            let module = obfuscate(&case.manifest, &opts).expect("program obfuscates");
            let chk = program_check(&case, &module);
            (chk.verdict.passed(), chk.stats.fallbacks)
        })
        .collect();
    let passed = rows.iter().filter(|r| r.0).count();
    let fallbacks: u64 = rows.iter().map(|r| r.1).sum();
    line(
        9,
        passed == rows.len() && fallbacks > 0,
        format!("ADD handled by native fallback: {}/{} programs identical, {} fallback executions", passed, rows.len(), fallbacks),
    )
}

#[test]
fn acceptance_criteria() {
    let mut lines = vec![c1_isa()];
    let (l2, programs) = c2_programs();
    lines.push(l2);
    let (l3, l10) = c3_c10_eh();
    lines.push(l3);
    lines.push(c4_diversity());
    let scen = scenario_modules();
    lines.push(c5_leak(&programs, &scen));
    lines.push(c6_rollback());
    lines.push(c7_depth());
    let all: Vec<&ProtectedModule> = programs.iter().map(|b| &b.module).chain(scen.iter().map(|s| &s.2)).collect();
    lines.push(c8_format(&all));
    lines.push(c9_fallback());
    lines.push(l10);
    lines.sort_by_key(|l| l.id);
    // written past the test harness capture so the verdicts land in the log
    let mut out = std::io::stdout().lock();
    for l in &lines {
        let _ = writeln!(out, "[{}] criterion {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.text);
    }
    drop(out);
    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| format!("{}: {}", l.id, l.text)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
