use ehvirt_core::harness::scenarios::build_eh_scenarios;
use std::path::Path;
use std::process::{Command, Output};

fn ehvirt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehvirt")).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_manifest(dir: &Path) -> String {
    let p = dir.join("s1.json");
    std::fs::write(&p, build_eh_scenarios()[0].manifest.to_json()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn obfuscate_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let m = write_manifest(d.path());
    let a = d.path().join("a.xjpm");
    let b = d.path().join("b.xjpm");
    for out in [&a, &b] {
        let o = ehvirt(&["obfuscate", &m, "-o", out.to_str().unwrap(), "--seed", "12"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn inspect_and_leak_check() {
    let d = tempfile::tempdir().unwrap();
    let m = write_manifest(d.path());
    let eh = d.path().join("eh.xjpm");
    let base = d.path().join("base.xjpm");
    assert!(ehvirt(&["obfuscate", &m, "-o", eh.to_str().unwrap()]).status.success());
    assert!(ehvirt(&["obfuscate", &m, "-o", base.to_str().unwrap(), "--no-eh-protect"]).status.success());

    let o = ehvirt(&["inspect", eh.to_str().unwrap(), "--leak-check", &m]);
    assert!(o.status.success());
    let t = text(&o);
    assert!(t.contains("LSHandler 0xf000040"), "{}", t);
    assert!(t.contains("no leakage"), "{}", t);
    assert!(t.contains("BYTC") && t.contains("encrypted, not rendered"));

    let t = text(&ehvirt(&["inspect", base.to_str().unwrap(), "--leak-check", &m]));
    assert!(t.contains("flags 0x0000"), "{}", t);
    assert!(t.contains("leakage found"), "{}", t);

    let junk = d.path().join("junk");
    std::fs::write(&junk, b"nope").unwrap();
    assert_eq!(ehvirt(&["inspect", junk.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn run_matches_unprotected() {
    let d = tempfile::tempdir().unwrap();
    let m = write_manifest(d.path());
    let x = d.path().join("m.xjpm");
    assert!(ehvirt(&["obfuscate", &m, "-o", x.to_str().unwrap()]).status.success());
    let plain = ehvirt(&["run", &m]);
    let prot = ehvirt(&["run", &m, "--module", x.to_str().unwrap()]);
    assert!(plain.status.success() && prot.status.success());
    let field = |o: &Output, k: &str| serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()[k].clone();
    for k in ["outcome", "rip", "registers", "flags"] {
        assert_eq!(field(&plain, k), field(&prot, k), "{}", k);
    }
    assert_eq!(ehvirt(&["run", &m, "--max-steps", "1"]).status.code(), Some(2));
}

#[test]
fn verify_exit_codes() {
    let o = ehvirt(&["verify", "--suite", "isa", "--cases", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let o = ehvirt(&["verify", "--suite", "shadow", "--cases", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["reports"][0]["details"][0]["distinct_signatures"], 12);
}
