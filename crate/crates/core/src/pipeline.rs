//! Program manifests and the end-to-end protection pipeline.

use crate::assemble::{assemble_module, select_handlers, ModuleError, ModuleInputs, PlainMetadata, ProtectedModule};
use crate::cfg::{recover_function, CfgError, FunctionRange, RecoveryOptions};
use crate::eh::{encode_metadata, EhError, LsData, TypeTable, UnwindCode, UnwindInfo};
use crate::machine::{layout, MachineEnv, MachineState};
use crate::process::{run_process_with, RunOutcome, RunState, Runtime};
use crate::shadow::{protect_metadata, shares_window};
use crate::vmir::{translate_function, RuleTable, TranslateError, TranslateOptions, VmirFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("{name}: {err}")]
    Cfg { name: String, err: CfgError },
    #[error("{name}: {err}")]
    Translate { name: String, err: TranslateError },
    #[error(transparent)]
    Eh(#[from] EhError),
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error("shadow draws for {0:?} keep echoing the genuine metadata")]
    ShadowCollision(Vec<u64>),
}

/// Unwind metadata as written in a manifest; the range comes from the
/// function itself and the handler is the generic one whenever LSData is present.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub codes: Vec<UnwindCode>,
    #[serde(default)]
    pub lsd: Option<LsData>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFunction {
    pub name: String,
    pub fid: u64,
    pub addr: u64,
    /// Hex-encoded machine code.
    pub code: String,
    #[serde(default)]
    pub noreturn: bool,
    #[serde(default)]
    pub meta: Option<ManifestMeta>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSegment {
    pub addr: u64,
    pub bytes: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramManifest {
    pub functions: Vec<ManifestFunction>,
    #[serde(default)]
    pub data: Vec<DataSegment>,
    /// (type id, parent id) pairs; parent 0 for roots.
    #[serde(default)]
    pub types: Vec<(u64, u64)>,
    pub entry: String,
    #[serde(default)]
    pub protect: Vec<String>,
    #[serde(default)]
    pub checksum_addr: Option<u64>,
}

impl ProgramManifest {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let m: ProgramManifest = serde_json::from_str(s).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn function(&self, name: &str) -> Result<&ManifestFunction, PipelineError> {
        self.functions.iter().find(|f| f.name == name).ok_or_else(|| PipelineError::UnknownFunction(name.into()))
    }

    pub fn code_of(f: &ManifestFunction) -> Result<Vec<u8>, PipelineError> {
        hex::decode(&f.code).map_err(|e| PipelineError::Manifest(format!("{}: {}", f.name, e)))
    }

    pub fn range_of(f: &ManifestFunction) -> Result<FunctionRange, PipelineError> {
        let n = Self::code_of(f)?.len() as u64;
        Ok(FunctionRange::new(f.fid, f.addr, f.addr + n))
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let mut spans = vec![];
        let mut ids = BTreeSet::new();
        for f in &self.functions {
            let r = Self::range_of(f)?;
            if r.start == r.end {
                return Err(PipelineError::Manifest(format!("{}: empty code", f.name)));
            }
            if !ids.insert(f.fid) {
                return Err(PipelineError::Manifest(format!("duplicate function id {}", f.fid)));
            }
            spans.push((r.start, r.end, f.name.clone()));
        }
        for d in &self.data {
            let n = hex::decode(&d.bytes).map_err(|e| PipelineError::Manifest(e.to_string()))?.len() as u64;
            spans.push((d.addr, d.addr + n, format!("data@{:#x}", d.addr)));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(PipelineError::Manifest(format!("{} overlaps {}", w[0].2, w[1].2)));
            }
        }
        self.function(&self.entry)?;
        for p in &self.protect {
            self.function(p)?;
        }
        for f in &self.functions {
            if let Some(i) = self.unwind_info(f)? {
                i.validate().map_err(|e| PipelineError::Manifest(format!("{}: {}", f.name, e)))?;
            }
        }
        Ok(())
    }

    pub fn unwind_info(&self, f: &ManifestFunction) -> Result<Option<UnwindInfo>, PipelineError> {
        let Some(m) = &f.meta else { return Ok(None) };
        Ok(Some(UnwindInfo {
            range: Self::range_of(f)?,
            codes: m.codes.clone(),
            handler: if m.lsd.is_some() { layout::GENERIC_HANDLER } else { 0 },
            lsd: m.lsd.clone(),
        }))
    }

    /// Genuine metadata of every function that has some.
    pub fn unwind_infos(&self) -> Result<Vec<UnwindInfo>, PipelineError> {
        let mut out = vec![];
        for f in &self.functions {
            out.extend(self.unwind_info(f)?);
        }
        Ok(out)
    }

    pub fn type_table(&self) -> TypeTable {
        TypeTable::new(&self.types)
    }

    /// Process image with all code and data loaded.
    pub fn load_env(&self) -> Result<MachineEnv, PipelineError> {
        let mut env = MachineEnv::with_standard_layout();
        for f in &self.functions {
            env.load_code(f.fid, f.addr, &Self::code_of(f)?);
        }
        for d in &self.data {
            env.memory.load(d.addr, &hex::decode(&d.bytes).map_err(|e| PipelineError::Manifest(e.to_string()))?);
        }
        Ok(env)
    }
}

/// Shortest stretch of genuine metadata that counts as leaked.
pub const LEAK_WINDOW: usize = 8;
const MAX_SHADOW_REDRAWS: usize = 64;

/// Deterministic sub-seed derived from the master seed and a purpose label.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Debug)]
pub struct ObfuscateOptions {
    pub seed: u64,
    pub shadow_len: usize,
    pub eh_protect: bool,
    pub rules: RuleTable,
}

impl Default for ObfuscateOptions {
    fn default() -> Self {
        ObfuscateOptions { seed: 0, shadow_len: 5, eh_protect: true, rules: RuleTable::default() }
    }
}

/// Recover and translate one function of the manifest.
pub fn translate_manifest_function(
    manifest: &ProgramManifest,
    env: &MachineEnv,
    name: &str,
    rules: &RuleTable,
) -> Result<VmirFunction, PipelineError> {
    let f = manifest.function(name)?;
    let range = ProgramManifest::range_of(f)?;
    let mut noreturn: BTreeSet<u64> = manifest.functions.iter().filter(|f| f.noreturn).map(|f| f.addr).collect();
    noreturn.extend([env.throw_entry, env.rethrow_entry]);
    let roots = f
        .meta
        .as_ref()
        .and_then(|m| m.lsd.as_ref())
        .map(|l| l.try_blocks.iter().flat_map(|t| t.catches.iter().map(|c| c.target)).collect::<BTreeSet<_>>())
        .unwrap_or_default();
    let opts = RecoveryOptions { noreturn, roots: roots.into_iter().collect() };
    let cfg = recover_function(env, &range, &opts).map_err(|err| PipelineError::Cfg { name: name.into(), err })?;
    let topts = TranslateOptions { throw_entries: [env.throw_entry, env.rethrow_entry].into() };
    translate_function(&cfg, rules, &topts).map_err(|err| PipelineError::Translate { name: name.into(), err })
}

/// recover → translate → select → lower → protect metadata → assemble.
pub fn obfuscate(manifest: &ProgramManifest, opts: &ObfuscateOptions) -> Result<ProtectedModule, PipelineError> {
    manifest.check()?;
    let env = manifest.load_env()?;
    let mut vmir = vec![];
    for name in &manifest.protect {
        vmir.push(translate_manifest_function(manifest, &env, name, &opts.rules)?);
    }
    let table = select_handlers(&vmir);

    let mut key_rng = ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, "key"));
    let key: [u8; 16] = key_rng.gen();
    let eh_nonce: u64 = key_rng.gen();
    let shadow_seed = sub_seed(opts.seed, "shadow");

    let mut genuine = vec![];
    for name in &manifest.protect {
        let f = manifest.function(name)?;
        if let Some(info) = manifest.unwind_info(f)? {
            genuine.push(info);
        }
    }
    // redraw every shadow while the file echoes any genuine serialization;
    // the echo may sit in another function's record
    let mut last = vec![];
    for draw in 0..MAX_SHADOW_REDRAWS {
        let (mut shadow, mut eh_payload, mut plain_eh) = (vec![], vec![], vec![]);
        for info in &genuine {
            let fid = info.range.fid;
            if opts.eh_protect {
                let label = if draw == 0 { fid.to_string() } else { format!("{}#{}", fid, draw) };
                let (s, p) = protect_metadata(
                    info,
                    &key,
                    eh_nonce,
                    sub_seed(shadow_seed, &label),
                    opts.shadow_len,
                    env.interceptor_entry,
                )?;
                shadow.push(s);
                eh_payload.push(p);
            } else {
                plain_eh.push(PlainMetadata { fid, bytes: encode_metadata(info) });
            }
        }
        let module = assemble_module(ModuleInputs {
            functions: &vmir,
            table: &table,
            shadow,
            eh_payload,
            plain_eh,
            eh_protected: opts.eh_protect,
            key,
            eh_nonce,
            seed: sub_seed(opts.seed, "shuffle"),
        })?;
        if !opts.eh_protect {
            return Ok(module);
        }
        let file = module.serialize();
        let leaking: Vec<u64> = genuine
            .iter()
            .filter(|i| shares_window(&encode_metadata(i), &file, LEAK_WINDOW))
            .map(|i| i.range.fid)
            .collect();
        if leaking.is_empty() {
            return Ok(module);
        }
        last = leaking;
    }
    Err(PipelineError::ShadowCollision(last))
}

/// Replace the native code of every protected function with int3 filler.
pub fn install_module(env: &mut MachineEnv, module: &ProtectedModule) {
    for f in &module.functions {
        let n = (f.range.end - f.range.start) as usize;
        env.memory.load(f.range.start, &vec![0xCC; n]);
    }
}

/// Environment and runtime for running `manifest`, optionally with `module` installed.
pub fn prepare(
    manifest: &ProgramManifest,
    module: Option<ProtectedModule>,
) -> Result<(MachineEnv, Runtime), PipelineError> {
    let mut env = manifest.load_env()?;
    if let Some(m) = &module {
        install_module(&mut env, m);
    }
    let rt = Runtime::new(module, &manifest.unwind_infos()?, manifest.type_table())?;
    Ok((env, rt))
}

/// Initial state for calling `addr`: HALT pushed as the return address.
pub fn call_state(env: &mut MachineEnv, addr: u64) -> MachineState {
    let sp = layout::INITIAL_RSP - 8;
    env.memory.write_u64(sp, layout::HALT).expect("stack is mapped");
    MachineState::new(addr, sp)
}

/// Run the manifest's entry (or `entry`) to completion.
pub fn run_manifest(
    manifest: &ProgramManifest,
    module: Option<ProtectedModule>,
    entry: Option<&str>,
    rs: RunState,
) -> Result<(RunOutcome, MachineEnv), PipelineError> {
    let (mut env, rt) = prepare(manifest, module)?;
    let addr = manifest.function(entry.unwrap_or(&manifest.entry))?.addr;
    let st = call_state(&mut env, addr);
    let out = run_process_with(&mut env, &rt, addr, &st, rs);
    Ok((out, env))
}

/// Run from an explicit initial state (rip included).
pub fn run_state(
    manifest: &ProgramManifest,
    module: Option<ProtectedModule>,
    state: &MachineState,
    rs: RunState,
) -> Result<(RunOutcome, MachineEnv), PipelineError> {
    let (mut env, rt) = prepare(manifest, module)?;
    let out = run_process_with(&mut env, &rt, state.rip, state, rs);
    Ok((out, env))
}

/// Result of scanning a serialized module for genuine metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub eh_protected: bool,
    /// Protected functions whose genuine serialization shows up in the file.
    pub leaked: Vec<String>,
    pub scanned: usize,
    /// Protected functions whose LSHandler field is not the interceptor.
    pub bad_handlers: Vec<String>,
}

impl LeakReport {
    pub fn clean(&self) -> bool {
        self.leaked.is_empty() && self.bad_handlers.is_empty()
    }
}


/// Look for any `LEAK_WINDOW`-byte stretch of each protected function's
/// genuine metadata in the serialized module.
pub fn leak_scan(manifest: &ProgramManifest, module: &ProtectedModule) -> Result<LeakReport, PipelineError> {
    let file = module.serialize();
    let mut rep = LeakReport { eh_protected: module.eh_protected(), leaked: vec![], scanned: 0, bad_handlers: vec![] };
    for name in &manifest.protect {
        let f = manifest.function(name)?;
        let Some(info) = manifest.unwind_info(f)? else { continue };
        rep.scanned += 1;
        if shares_window(&encode_metadata(&info), &file, LEAK_WINDOW) {
            rep.leaked.push(name.clone());
        }
        if module.eh_protected() && module.shadow_for(f.fid).map(|s| s.handler) != Some(layout::INTERCEPTOR) {
            rep.bad_handlers.push(name.clone());
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenarios::build_eh_scenarios;

    fn func(name: &str, fid: u64, addr: u64, code: &str) -> ManifestFunction {
        ManifestFunction { name: name.into(), fid, addr, code: code.into(), noreturn: false, meta: None }
    }

    #[test]
    fn sub_seed_separates_labels() {
        assert_eq!(sub_seed(1, "key"), sub_seed(1, "key"));
        assert_ne!(sub_seed(1, "key"), sub_seed(1, "shadow"));
        assert_ne!(sub_seed(1, "key"), sub_seed(2, "key"));
    }

    #[test]
    fn check_rejects_bad_manifests() {
        let base = layout::CODE_BASE;
        let ok = ProgramManifest {
            functions: vec![func("a", 1, base, "c3"), func("b", 2, base + 1, "c3")],
            entry: "a".into(),
            ..Default::default()
        };
        assert!(ok.check().is_ok());

        let mut overlap = ok.clone();
        overlap.functions[1].addr = base;
        assert!(matches!(overlap.check(), Err(PipelineError::Manifest(_))));

        let mut dup = ok.clone();
        dup.functions[1].fid = 1;
        assert!(matches!(dup.check(), Err(PipelineError::Manifest(_))));

        let mut data = ok.clone();
        data.data.push(DataSegment { addr: base, bytes: "00".into() });
        assert!(data.check().is_err());

        let mut entry = ok.clone();
        entry.entry = "zz".into();
        assert!(matches!(entry.check(), Err(PipelineError::UnknownFunction(_))));

        let mut bad_hex = ok;
        bad_hex.functions[0].code = "c".into();
        assert!(bad_hex.check().is_err());
    }

    #[test]
    fn protected_scenario_matches_native_and_hides_metadata() {
        let s = build_eh_scenarios().into_iter().next().unwrap();
        let module = obfuscate(&s.manifest, &ObfuscateOptions { seed: 3, ..Default::default() }).unwrap();
        assert!(module.eh_protected());
        let (native, _) = run_manifest(&s.manifest, None, None, RunState::new(1_000_000)).unwrap();
        let (prot, _) = run_manifest(&s.manifest, Some(module.clone()), None, RunState::new(1_000_000)).unwrap();
        assert_eq!(native.kind, prot.kind);
        assert_eq!(native.state.gpr, prot.state.gpr);
        assert!(prot.stats.dispatches > 0);
        assert!(leak_scan(&s.manifest, &module).unwrap().clean());

        let plain = obfuscate(&s.manifest, &ObfuscateOptions { eh_protect: false, ..Default::default() }).unwrap();
        let rep = leak_scan(&s.manifest, &plain).unwrap();
        assert!(!rep.eh_protected && rep.scanned > 0);
        assert_eq!(rep.leaked.len(), rep.scanned);
    }
}
