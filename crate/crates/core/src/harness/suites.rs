//! Verification suites with JSON-serializable reports.

use super::isa_cases::{differential_check, gen_isa_case};
use super::programs::{gen_program_case, program_check};
use super::scenarios::{build_eh_scenarios, judge, EhScenario};
use super::{compare_runs, Verdict};
use crate::assemble::ProtectedModule;
use crate::machine::{layout, MachineEnv};
use crate::ossim::AuditEvent;
use crate::pipeline::{obfuscate, run_manifest, sub_seed, ObfuscateOptions, ProgramManifest};
use crate::process::{RunOutcome, RunState, DEFAULT_STEP_LIMIT};
use crate::shadow::{diversity_report, DiversityReport, SHADOW_TYPES};
use crate::vmir::RuleTable;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const MAX_LISTED: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Config {
    Unprotected,
    Base,
    Eh,
}

impl Config {
    pub const ALL: [Config; 3] = [Config::Unprotected, Config::Base, Config::Eh];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub index: u64,
    pub name: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub cases: u64,
    pub passed: u64,
    pub failed: u64,
    /// First few failures only.
    pub failures: Vec<CaseFailure>,
    pub details: serde_json::Value,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failed == 0 && self.cases > 0
    }

    fn collect(suite: &str, seed: u64, results: Vec<Result<(), CaseFailure>>, details: serde_json::Value) -> Self {
        let cases = results.len() as u64;
        let failures: Vec<CaseFailure> = results.into_iter().filter_map(Result::err).collect();
        SuiteReport {
            suite: suite.into(),
            seed,
            cases,
            passed: cases - failures.len() as u64,
            failed: failures.len() as u64,
            failures: failures.into_iter().take(MAX_LISTED).collect(),
            details,
        }
    }
}

fn verdict(index: u64, name: &str, v: Verdict) -> Result<(), CaseFailure> {
    match v {
        Verdict::Pass => Ok(()),
        Verdict::Fail(d) => Err(CaseFailure {
            index,
            name: name.into(),
            detail: format!("{}: expected {} got {} (dispatch {})", d.field, d.expected, d.actual, d.dispatch_index),
        }),
    }
}

/// Single-instruction differential cases.
pub fn run_isa_suite(seed: u64, count: u64) -> SuiteReport {
    let results: Vec<Result<(), CaseFailure>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let case = gen_isa_case(seed, i);
            let name = case.instr.to_string();
            let opts = ObfuscateOptions { seed: sub_seed(seed, &format!("isa{}", i)), ..Default::default() };
            match obfuscate(&case.manifest(), &opts) {
                Ok(module) => verdict(i, &name, differential_check(&case, &module)),
                Err(e) => Err(CaseFailure { index: i, name, detail: e.to_string() }),
            }
        })
        .collect();
    SuiteReport::collect("isa", seed, results, serde_json::Value::Null)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramStats {
    pub with_jump_tables: u64,
    pub min_blocks: usize,
    pub max_blocks: usize,
}

/// Whole-program differential cases.
pub fn run_program_suite(seed: u64, count: u64) -> SuiteReport {
    let rows: Vec<(Result<(), CaseFailure>, usize, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let case = gen_program_case(seed, i);
            let name = format!("program{}", i);
            let opts = ObfuscateOptions { seed: sub_seed(seed, &name), ..Default::default() };
            let res = match obfuscate(&case.manifest, &opts) {
                Ok(module) => verdict(i, &name, program_check(&case, &module).verdict),
                Err(e) => Err(CaseFailure { index: i, name, detail: e.to_string() }),
            };
            (res, case.blocks, case.jump_tables)
        })
        .collect();
    let stats = ProgramStats {
        with_jump_tables: rows.iter().filter(|r| r.2 > 0).count() as u64,
        min_blocks: rows.iter().map(|r| r.1).min().unwrap_or(0),
        max_blocks: rows.iter().map(|r| r.1).max().unwrap_or(0),
    };
    let results = rows.into_iter().map(|r| r.0).collect();
    SuiteReport::collect("program", seed, results, serde_json::to_value(stats).unwrap())
}

/// The module a configuration installs, if any.
pub fn config_module(manifest: &ProgramManifest, config: Config, seed: u64) -> Result<Option<ProtectedModule>, String> {
    if config == Config::Unprotected {
        return Ok(None);
    }
    let opts = ObfuscateOptions { seed, eh_protect: config == Config::Eh, rules: RuleTable::default(), ..Default::default() };
    obfuscate(manifest, &opts).map(Some).map_err(|e| e.to_string())
}

/// Run one scenario under a configuration.
pub fn run_config(manifest: &ProgramManifest, config: Config, seed: u64) -> Result<(RunOutcome, MachineEnv), String> {
    let module = config_module(manifest, config, seed)?;
    run_manifest(manifest, module, None, RunState::new(DEFAULT_STEP_LIMIT)).map_err(|e| e.to_string())
}

/// Seed used for one repeat of a scenario.
pub fn scenario_seed(seed: u64, s: &EhScenario, repeat: u64) -> u64 {
    sub_seed(seed, &format!("{}#{}", s.name, repeat))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EhRun {
    pub scenario: String,
    pub config: Config,
    pub repeat: u64,
    pub passed: bool,
    pub frames_per_raise: Vec<u64>,
    pub interceptor_calls: u64,
    pub decrypts: u64,
    pub sanitizes: u64,
}

/// Check one scenario under every configuration; protected runs must also
/// match the unprotected run.
pub fn check_scenario(s: &EhScenario, seed: u64, repeat: u64) -> Vec<(EhRun, Result<(), String>)> {
    let run_seed = scenario_seed(seed, s, repeat);
    let runs: Vec<(Config, Result<(RunOutcome, MachineEnv), String>)> =
        Config::ALL.iter().map(|c| (*c, run_config(&s.manifest, *c, run_seed))).collect();
    let reference = match &runs[0].1 {
        Ok(r) => Some(r),
        Err(_) => None,
    };
    let code = [(layout::CODE_BASE, layout::CODE_BASE + 0x10_0000)];
    runs.iter()
        .map(|(c, r)| {
            let res = r.as_ref().map_err(Clone::clone).and_then(|(out, env)| {
                judge(s, out, env)?;
                if let (Some((eo, ee)), true) = (reference, *c != Config::Unprotected) {
                    if let Some(d) = compare_runs((eo, ee), (out, env), &code, false) {
                        return Err(format!("differs from unprotected in {}: {} vs {}", d.field, d.expected, d.actual));
                    }
                }
                Ok(())
            });
            let count = |f: fn(&AuditEvent) -> bool| r.as_ref().map_or(0, |(o, _)| o.audit.iter().filter(|e| f(e)).count() as u64);
            let row = EhRun {
                scenario: s.name.clone(),
                config: *c,
                repeat,
                passed: res.is_ok(),
                frames_per_raise: r.as_ref().map_or(vec![], |(o, _)| o.stats.frames_per_raise.clone()),
                interceptor_calls: r.as_ref().map_or(0, |(o, _)| o.stats.interceptor_calls),
                decrypts: count(|e| matches!(e, AuditEvent::Decrypt { .. })),
                sanitizes: count(|e| matches!(e, AuditEvent::Sanitize { .. })),
            };
            (row, res)
        })
        .collect()
}

/// Every scenario under every configuration, `repeats` times.
pub fn run_eh_suite(seed: u64, repeats: u64) -> SuiteReport {
    let scenarios = build_eh_scenarios();
    let jobs: Vec<(usize, u64)> = (0..scenarios.len()).flat_map(|k| (0..repeats).map(move |r| (k, r))).collect();
    let rows: Vec<(EhRun, Result<(), String>)> = jobs
        .par_iter()
        .flat_map_iter(|(k, r)| check_scenario(&scenarios[*k], seed, *r))
        .collect();
    let results = rows
        .iter()
        .enumerate()
        .map(|(i, (row, res))| {
            res.clone().map_err(|detail| CaseFailure {
                index: i as u64,
                name: format!("{}/{:?}/{}", row.scenario, row.config, row.repeat),
                detail,
            })
        })
        .collect();
    let runs: Vec<EhRun> = rows.into_iter().map(|r| r.0).collect();
    SuiteReport::collect("eh", seed, results, serde_json::to_value(runs).unwrap())
}

/// Shadow-code diversity at lengths 1 and 5.
pub fn run_shadow_suite(seed: u64, samples: usize) -> SuiteReport {
    let one = diversity_report(1, samples.max(1000), seed);
    let five = diversity_report(5, samples, seed);
    let checks: Vec<(String, bool)> = vec![
        (format!("length 1: {} distinct types", one.distinct_signatures), one.distinct_signatures == SHADOW_TYPES),
        (
            format!("length 5: {} distinct of {}", five.distinct_sequences, samples),
            five.distinct_sequences as f64 >= 0.99 * samples as f64,
        ),
    ];
    let results = checks
        .iter()
        .enumerate()
        .map(|(i, (name, ok))| if *ok { Ok(()) } else { Err(CaseFailure { index: i as u64, name: name.clone(), detail: name.clone() }) })
        .collect();
    let reports: Vec<DiversityReport> = vec![one, five];
    SuiteReport::collect("shadow", seed, results, serde_json::to_value(reports).unwrap())
}
