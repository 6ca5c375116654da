use std::time::{Duration, Instant};

use proptest::prelude::*;

use super::*;
use crate::actions::DiscretizationSpec;
use crate::geom::Vec2;
use crate::model::UniformModel;
use crate::sim::apply_action;

fn service(with_model: bool) -> ServiceState {
    let model: Option<Arc<dyn InverseDynamics>> =
        with_model.then(|| Arc::new(UniformModel { discretization: DiscretizationSpec::default() }) as _);
    ServiceState::new(SimConfig::default(), RegistrationParams::default(), model).unwrap()
}

fn nodes(v: &Value) -> Vec<Vec2> {
    serde_json::from_value(v["nodes"].clone()).unwrap()
}

fn act(x: f64, y: f64, theta: f64, length: f64) -> ActionBody {
    ActionBody { pick: Vec2::new(x, y), theta, length }
}

fn wait_for_run(s: &Session) -> Vec<Event> {
    let t0 = Instant::now();
    loop {
        let evs = s.events_after(0);
        if evs.iter().any(|e| e.kind == EventType::RunDone) {
            return evs;
        }
        assert!(t0.elapsed() < Duration::from_secs(60), "run did not finish");
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn lifecycle_and_errors() {
    let svc = service(true);
    let id = svc.create_session()["id"].as_str().unwrap().to_string();
    assert!(svc.state(&id).is_ok());
    assert_eq!(svc.state("nope").unwrap_err().status(), 404);
    let e = svc.action(&id, act(10.0, 32.0, 0.0, 20.0)).unwrap_err();
    assert_eq!(e, ApiError::Invalid { field: Some("length".into()), message: "length must lie in [0, 15] cm".into() });
    assert_eq!(svc.action(&id, act(-3.0, 32.0, 0.0, 5.0)).unwrap_err().status(), 422);
    svc.keyframe(&id).unwrap();
    let e = svc.imitate(&id, ImitateBody::default()).unwrap_err();
    assert_eq!(e.status(), 422);
    assert!(e.body()["error"]["message"].as_str().unwrap().contains("demonstration needs ≥ 2 keyframes"));
    svc.delete_session(&id).unwrap();
    assert_eq!(svc.delete_session(&id).unwrap_err().status(), 404);
    assert_eq!(service(false).imitate("s1", ImitateBody::default()).unwrap_err().status(), 404);
}

#[test]
fn zero_length_action_keeps_the_rope() {
    let svc = service(false);
    let id = svc.create_session()["id"].as_str().unwrap().to_string();
    let before = nodes(&svc.state(&id).unwrap());
    let after = nodes(&svc.action(&id, act(30.0, 32.0, 1.0, 0.0)).unwrap());
    for (a, b) in before.iter().zip(&after) {
        assert!(a.dist(*b) < 1e-9);
    }
}

#[test]
fn run_emits_counted_ordered_events_and_blocks_actions() {
    let svc = service(true);
    let id = svc.create_session()["id"].as_str().unwrap().to_string();
    svc.keyframe(&id).unwrap();
    svc.action(&id, act(50.0, 32.0, 1.5, 10.0)).unwrap();
    svc.keyframe(&id).unwrap();
    svc.action(&id, act(30.0, 32.0, 4.7, 8.0)).unwrap();
    svc.keyframe(&id).unwrap();
    assert_eq!(svc.demo(&id).unwrap().len(), 3);
    svc.imitate(&id, ImitateBody::default()).unwrap();
    match svc.action(&id, act(30.0, 32.0, 0.0, 1.0)) {
        Err(e) => assert_eq!(e.status(), 409),
        // The run may already be over on a fast machine.
        Ok(_) => assert!(svc.session(&id).unwrap().events_after(0).iter().any(|e| e.kind == EventType::RunDone)),
    }
    let s = svc.session(&id).unwrap();
    let evs = wait_for_run(&s);
    assert!(evs.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    let run: Vec<&Event> = evs.iter().skip_while(|e| e.payload["cause"] != "run_started").skip(1).collect();
    let kinds: Vec<EventType> = run.iter().map(|e| e.kind).filter(|k| *k != EventType::State).collect();
    let p = EventType::Prediction;
    let d = EventType::StepDone;
    assert_eq!(&kinds[..5], &[p, d, p, d, EventType::RunDone]);
    for e in run.iter().filter(|e| e.kind == p) {
        let sum: f64 = e.payload["p_dist"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-5);
        assert_eq!(e.payload["p_dist"].as_array().unwrap().len(), 400);
    }
    assert_eq!(svc.state(&id).unwrap()["run_state"]["kind"], "idle");
    // Replay after an ack starts right after it.
    s.ack(3);
    assert_eq!(s.events_after(s.acked())[0].seq, 4);
}

#[test]
fn reorder_keeps_listed_keyframes() {
    let svc = service(false);
    let id = svc.create_session()["id"].as_str().unwrap().to_string();
    for _ in 0..3 {
        svc.keyframe(&id).unwrap();
    }
    let out = svc.reorder(&id, &ReorderBody { order: vec![2, 0] }).unwrap();
    assert_eq!(out["keyframe_ids"], json!([2, 0]));
    let e = svc.reorder(&id, &ReorderBody { order: vec![0, 0] }).unwrap_err();
    assert_eq!(e, ApiError::Invalid { field: Some("order[1]".into()), message: "unknown or repeated keyframe id".into() });
    assert_eq!(svc.state(&id).unwrap()["keyframe_ids"], json!([0, 2]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sessions_are_isolated(
        moves in proptest::collection::vec((any::<bool>(), 5.0..60.0f64, 5.0..60.0f64, 0.0..6.28f64, 0.0..15.0f64), 1..8),
    ) {
        let svc = service(false);
        let a = svc.create_session()["id"].as_str().unwrap().to_string();
        let b = svc.create_session()["id"].as_str().unwrap().to_string();
        let sim = SimConfig::default();
        let mut ra = crate::sim::reset_rope(&sim);
        let mut rb = ra.clone();
        for (to_a, x, y, th, l) in moves {
            let body = act(x, y, th, l);
            let (id, local) = if to_a { (&a, &mut ra) } else { (&b, &mut rb) };
            svc.action(id, body).unwrap();
            *local = apply_action(local, &body.into(), &sim).unwrap();
        }
        prop_assert_eq!(nodes(&svc.state(&a).unwrap()), ra.nodes);
        prop_assert_eq!(nodes(&svc.state(&b).unwrap()), rb.nodes);
    }
}
