use ehvirt_core::assemble::{parse_module, section_table};
use ehvirt_core::shadow::shares_window;
use ehvirt_core::harness::programs::{gen_program_case, program_check};
use ehvirt_core::harness::Verdict;
use ehvirt_core::pipeline::{obfuscate, ObfuscateOptions, ProgramManifest};

#[test]
fn same_seed_same_bytes() {
    let case = gen_program_case(1, 3);
    let opts = ObfuscateOptions { seed: 77, ..Default::default() };
    let a = obfuscate(&case.manifest, &opts).unwrap().serialize();
    let b = obfuscate(&case.manifest, &opts).unwrap().serialize();
    assert_eq!(a, b);
    let c = obfuscate(&case.manifest, &ObfuscateOptions { seed: 78, ..Default::default() }).unwrap().serialize();
    assert_ne!(a, c);
}

#[test]
fn placement_does_not_change_results() {
    let case = gen_program_case(2, 0);
    let mut sums = vec![];
    for seed in [1u64, 2, 3, 99] {
        let m = obfuscate(&case.manifest, &ObfuscateOptions { seed, ..Default::default() }).unwrap();
        let chk = program_check(&case, &m);
        assert_eq!(chk.verdict, Verdict::Pass);
        sums.push(chk.checksum);
    }
    assert!(sums.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn generated_programs_are_deterministic_and_shaped() {
    for i in 0..20 {
        let a = gen_program_case(5, i);
        assert_eq!(a, gen_program_case(5, i));
        assert!((5..=40).contains(&a.blocks));
        if i % 5 == 0 {
            assert!(a.jump_tables > 0);
        }
    }
}

#[test]
fn manifest_json_round_trip() {
    let case = gen_program_case(4, 1);
    let text = case.manifest.to_json();
    assert_eq!(ProgramManifest::from_json(&text).unwrap(), case.manifest);
}

#[test]
fn serialized_module_hides_bytecode() {
    let case = gen_program_case(6, 2);
    let m = obfuscate(&case.manifest, &ObfuscateOptions::default()).unwrap();
    let bytes = m.serialize();
    assert_eq!(parse_module(&bytes).unwrap(), m);
    let plain: Vec<u8> = m.decrypt_cells().iter().flat_map(|c| c.to_bytes()).collect();
    assert!(plain.len() >= 16);
    let (_, off, size) = section_table(&bytes).unwrap().into_iter().find(|s| s.0 == "BYTC").unwrap();
    let stored = &bytes[off as usize..(off + size) as usize];
    assert_eq!(stored, &m.bytecode[..]);
    assert!(!shares_window(&plain, stored, 16));
}


