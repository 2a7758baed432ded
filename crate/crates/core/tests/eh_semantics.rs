use ehvirt_core::harness::build::Frame;
use ehvirt_core::harness::scenarios::{build_eh_scenarios, build_program, judge, observe, names_of, Obj, ScenarioFn, Step, T_A, T_C, T_D};
use ehvirt_core::harness::suites::{config_module, run_config, Config};
use ehvirt_core::isa::{RBX, RSI};
use ehvirt_core::ossim::AuditEvent;
use ehvirt_core::pipeline::{leak_scan, run_manifest, ProgramManifest};
use ehvirt_core::process::{OutcomeKind, RunError, RunState};

fn frame() -> Frame {
    Frame { pushes: vec![RBX, RSI], alloc: 0x18, saves: vec![] }
}

fn program(fns: Vec<ScenarioFn>) -> ProgramManifest {
    build_program(&fns, &[]).unwrap()
}

#[test]
fn uncaught_exception_reaches_the_top_in_every_config() {
    let m = program(vec![
        ScenarioFn::new("outer", frame(), vec![Step::Obj(Obj::Plain(7)), Step::Call("inner".into())]),
        ScenarioFn::new("inner", frame(), vec![Step::Throw(T_C, 0x55)]),
    ]);
    let mut seen = vec![];
    for c in Config::ALL {
        let (out, env) = run_config(&m, c, 3).unwrap();
        match &out.kind {
            OutcomeKind::ExceptionRaised(e) => {
                assert_eq!((e.type_id, e.payload), (T_C, 0x55), "{:?}", c);
            }
            k => panic!("{:?}: {:?}", c, k),
        }
        assert!(out.audit.iter().any(|e| matches!(e, AuditEvent::Unhandled { .. })));
        seen.push(observe(&env, &names_of(&m)));
    }
    assert!(seen.iter().all(|o| o == &seen[0]));
    assert!(seen[0].catches.is_empty());
}

#[test]
fn rethrow_without_active_exception_faults() {
    let m = program(vec![ScenarioFn::new("f", frame(), vec![Step::Work(3), Step::Rethrow])]);
    for c in Config::ALL {
        let (out, _) = run_config(&m, c, 9).unwrap();
        assert_eq!(out.kind, OutcomeKind::Fault(RunError::NoActiveException), "{:?}", c);
    }
}

#[test]
fn derived_type_caught_by_base_clause() {
    let m = program(vec![ScenarioFn::new(
        "f",
        frame(),
        vec![Step::Try(vec![Step::Obj(Obj::Owning(3)), Step::Throw(T_D, 1)], vec![(T_C, vec![]), (T_A, vec![])])],
    )]);
    for c in Config::ALL {
        let (out, env) = run_config(&m, c, 1).unwrap();
        assert_eq!(out.kind, OutcomeKind::NormalReturn, "{:?}", c);
        let o = observe(&env, &names_of(&m));
        assert_eq!(o.catches, vec![("f".to_string(), 1)]);
        assert_eq!((o.counter, o.resources, o.completed), (0, 0, true));
        assert_eq!(o.destructs, vec![3]);
    }
}

#[test]
fn scenarios_hold_under_every_config() {
    for s in build_eh_scenarios() {
        for c in Config::ALL {
            let (out, env) = run_config(&s.manifest, c, 11).unwrap();
            if let Err(e) = judge(&s, &out, &env) {
                panic!("{} {:?}: {}", s.name, c, e);
            }
        }
    }
}

#[test]
fn shadowed_frames_use_the_interceptor() {
    let s = &build_eh_scenarios()[0];
    let eh = config_module(&s.manifest, Config::Eh, 5).unwrap().unwrap();
    let base = config_module(&s.manifest, Config::Base, 5).unwrap().unwrap();
    let (out, _) = run_manifest(&s.manifest, Some(eh.clone()), None, RunState::new(100_000)).unwrap();
    let shadowed = out.audit.iter().filter(|e| matches!(e, AuditEvent::FrameDispatched { shadowed: true, .. })).count();
    assert_eq!(shadowed as u64, out.stats.interceptor_calls);
    assert!(shadowed > 0);
    let (out, _) = run_manifest(&s.manifest, Some(base.clone()), None, RunState::new(100_000)).unwrap();
    assert_eq!(out.stats.interceptor_calls, 0);

    let clean = leak_scan(&s.manifest, &eh).unwrap();
    assert!(clean.clean() && clean.scanned > 0);
    let exposed = leak_scan(&s.manifest, &base).unwrap();
    assert_eq!(exposed.leaked.len(), exposed.scanned);
}

#[test]
fn step_limit_is_a_fault() {
    let s = &build_eh_scenarios()[0];
    let (out, _) = run_manifest(&s.manifest, None, None, RunState::new(3)).unwrap();
    assert_eq!(out.kind, OutcomeKind::Fault(RunError::StepLimitExceeded));
}
