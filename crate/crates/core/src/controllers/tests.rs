use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::actions::{DiscretizationSpec, LEN_MIN};
use crate::dataset::{collect_random, CollectionConfig};
use crate::model::UniformModel;
use crate::sim::{render, reset_rope, SimConfig};

fn brute_snap(p: Vec2, img: &RasterImage) -> Option<Vec2> {
    let mut best: Option<(f64, Vec2)> = None;
    for q in img.mask_points() {
        let d = q.dist_sq(p);
        if best.map_or(true, |(b, _)| d < b) {
            best = Some((d, q));
        }
    }
    best.map(|b| b.1)
}

#[test]
fn snap_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let density = rng.gen_range(0.0..0.3);
        let mut px = vec![0.0f32; w * h];
        for v in px.iter_mut() {
            if rng.gen_bool(density) {
                *v = 1.0;
            }
        }
        let img = RasterImage::from_pixels(w, h, px);
        let p = Vec2::new(rng.gen_range(-5.0..w as f64 + 5.0), rng.gen_range(-5.0..h as f64 + 5.0));
        let inside = p.x >= 0.0 && p.y >= 0.0 && (p.x as usize) < w && (p.y as usize) < h && img.mask[p.y as usize * w + p.x as usize];
        match (snap_to_rope(p, &img), brute_snap(p, &img)) {
            (Ok(got), _) if inside => assert_eq!(got, p, "case {case}"),
            (Ok(got), Some(want)) => assert_eq!(got, want, "case {case}"),
            (Err(Error::EmptyMask), None) => {}
            (got, want) => panic!("case {case}: {got:?} vs {want:?}"),
        }
    }
}

#[test]
fn snap_left_of_vertical_bar_stays_on_row() {
    let mut img = RasterImage::blank(10, 10);
    for r in 0..10 {
        img.mask[r * 10 + 6] = true;
        img.pixels[r * 10 + 6] = 1.0;
    }
    assert_eq!(snap_to_rope(Vec2::new(1.2, 3.7), &img).unwrap(), Vec2::new(6.5, 3.5));
    assert_eq!(snap_to_rope(Vec2::new(6.2, 3.7), &img).unwrap(), Vec2::new(6.2, 3.7));
    assert!(matches!(snap_to_rope(Vec2::new(1.0, 1.0), &RasterImage::blank(4, 4)), Err(Error::EmptyMask)));
}

fn scripted(sim: &SimConfig, actions: &[ActionContinuous]) -> (World, Demonstration) {
    let mut w = World::new(sim.clone()).unwrap();
    let mut keyframes = vec![w.observe()];
    let mut states = vec![w.state.clone()];
    for a in actions {
        w.step(a).unwrap();
        keyframes.push(w.observe());
        states.push(w.state.clone());
    }
    let demo = Demonstration {
        keyframes,
        states: Some(states),
        actions: Some(actions.iter().map(|a| vec![*a]).collect()),
        provenance: Provenance::Scripted { shape: "test".into(), variant: 0, seed: 0, stride: 1 },
    };
    (World::new(sim.clone()).unwrap(), demo)
}

fn three_step_script(sim: &SimConfig) -> Vec<ActionContinuous> {
    let end = reset_rope(sim).nodes.last().copied().unwrap();
    vec![
        ActionContinuous { pick: end, theta: 1.6, length: 10.0 },
        ActionContinuous { pick: end + Vec2::new(-8.0, 0.0), theta: 4.0, length: 6.0 },
        ActionContinuous { pick: end + Vec2::new(-20.0, 0.0), theta: 1.2, length: 8.0 },
    ]
}

#[test]
fn oracle_imitation_reproduces_the_demo() {
    let sim = SimConfig::default();
    let (mut world, demo) = scripted(&sim, &three_step_script(&sim));
    let oracle = ReplayOracle::new(&demo, DiscretizationSpec::default()).unwrap();
    let trace = imitate(&oracle, &mut world, &demo, &RegistrationParams::default()).unwrap();
    assert_eq!(trace.steps.len(), 3);
    assert!(trace.steps.iter().all(|s| s.error.is_none()));
    assert!(trace.final_distance().unwrap() <= 0.5, "{:?}", trace.final_distance());
}

#[test]
fn trivial_demo_runs_one_step() {
    let sim = SimConfig::default();
    let mut world = World::new(sim.clone()).unwrap();
    let cur = world.observe();
    let demo = Demonstration::new(vec![cur.clone(), cur], Provenance::HumanUi { session: "s".into() }).unwrap();
    let model = UniformModel { discretization: DiscretizationSpec::default() };
    let trace = imitate(&model, &mut world, &demo, &RegistrationParams::default()).unwrap();
    assert_eq!(trace.steps.len(), 1);
    assert!(Demonstration::new(vec![world.observe()], Provenance::HumanUi { session: "s".into() }).is_err());
}

struct Failing(DiscretizationSpec);

impl InverseDynamics for Failing {
    fn discretization(&self) -> &DiscretizationSpec {
        &self.0
    }
    fn predict(&self, _: &RasterImage, _: &RasterImage) -> Result<InverseModelOutput> {
        Err(Error::ModelMissing)
    }
}

#[test]
fn failures_keep_trace_length() {
    let sim = SimConfig::default();
    let (mut world, demo) = scripted(&sim, &three_step_script(&sim));
    let trace = imitate(&Failing(DiscretizationSpec::default()), &mut world, &demo, &RegistrationParams::default()).unwrap();
    assert_eq!(trace.steps.len(), demo.len() - 1);
    assert!(trace.steps.iter().all(|s| s.error.is_some() && s.action.is_none() && s.distance.is_some()));
}

#[test]
fn snapping_policies_pick_on_the_rope() {
    let sim = SimConfig::default();
    let (mut world, demo) = scripted(&sim, &three_step_script(&sim));
    let model = UniformModel { discretization: DiscretizationSpec::default() };
    let mut picks = Vec::new();
    let trace = imitate_with(&model, &mut world, &demo, &RegistrationParams::default(), |e| {
        if let TraceEvent::Prediction { pick_px, .. } = e {
            picks.push(pick_px);
        }
    })
    .unwrap();
    assert_eq!(picks.len(), 3);
    for (s, p) in trace.steps.iter().zip(&picks) {
        let a = s.action.unwrap();
        assert_eq!(sim.cm_to_px(a.pick), *p);
        let (c, r) = (p.x.floor() as usize, p.y.floor() as usize);
        assert!(s.observed.mask[r * s.observed.width + c]);
    }
}

#[test]
fn no_imitation_single_step_equals_imitation() {
    let sim = SimConfig::default();
    let (world, demo) = scripted(&sim, &three_step_script(&sim)[..1]);
    let model = UniformModel { discretization: DiscretizationSpec::default() };
    let reg = RegistrationParams::default();
    let a = imitate(&model, &mut world.clone(), &demo, &reg).unwrap();
    let b = baseline_no_imitation(&model, &mut world.clone(), &demo.keyframes[1], 1, &reg).unwrap();
    assert_eq!(a.steps, b.steps);
    let c = no_imitation_on_demo(&model, &mut world.clone(), &demo, &reg).unwrap();
    assert_eq!(c.steps, a.steps);
    assert!(baseline_no_imitation(&model, &mut world.clone(), &demo.keyframes[1], 0, &reg).is_err());
}

#[test]
fn hand_engineered_on_still_goal_uses_minimum_length() {
    let sim = SimConfig::default();
    let mut world = World::new(sim.clone()).unwrap();
    let cur = world.observe();
    let demo = Demonstration::new(vec![cur.clone(), cur.clone()], Provenance::HumanUi { session: "s".into() }).unwrap();
    let before = world.state.clone();
    let trace = baseline_hand_engineered(&mut world, &demo, &RegistrationParams::default()).unwrap();
    assert_eq!(trace.steps[0].action.unwrap().length, LEN_MIN);
    let moved = world.state.nodes.iter().zip(&before.nodes).map(|(a, b)| a.dist(*b)).fold(0.0, f64::max);
    assert!(moved <= LEN_MIN + 1e-9, "{moved}");
}

#[test]
fn hand_engineered_picks_translated_point() {
    let sim = SimConfig::default();
    let rope = reset_rope(&sim);
    let shifted = rope.translated(Vec2::new(0.0, 6.0));
    let demo = Demonstration::new(vec![render(&rope, &sim), render(&shifted, &sim)], Provenance::HumanUi { session: "s".into() }).unwrap();
    let mut world = World::new(sim.clone()).unwrap();
    let trace = baseline_hand_engineered(&mut world, &demo, &RegistrationParams::default()).unwrap();
    let a = trace.steps[0].action.unwrap();
    assert!((a.length - 6.0).abs() < 0.6, "{a:?}");
    assert!((a.theta - std::f64::consts::FRAC_PI_2).abs() < 0.1, "{a:?}");
    assert!(trace.steps[0].distance.unwrap().is_finite());
}

#[test]
fn nearest_neighbor_returns_stored_pair() {
    let sim = SimConfig::default();
    let disc = DiscretizationSpec::default();
    let ds = collect_random(&sim, &disc, &CollectionConfig::default(), 30, 4).unwrap();
    let idx = NearestNeighborIndex::build(&ds).unwrap();
    for t in [&ds.transitions[3], &ds.transitions[17]] {
        assert_eq!(idx.query(&t.pre_raster, &t.post_raster), (t.id, t.action_cont));
    }
    let mut doubled = ds.clone();
    doubled.extend(ds.clone()).unwrap();
    let idx2 = NearestNeighborIndex::build(&doubled).unwrap();
    let t = &ds.transitions[5];
    assert_eq!(idx2.query(&t.pre_raster, &t.post_raster).0, 5);

    let flat = RasterImage::from_pixels(64, 64, vec![0.75; 64 * 64]);
    assert!(downsample(&flat).iter().all(|&v| v == 0.75));
    assert_eq!(downsample(&flat).len(), NN_SIDE * NN_SIDE);
}

#[test]
fn nearest_neighbor_trace_has_demo_length() {
    let sim = SimConfig::default();
    let ds = collect_random(&sim, &DiscretizationSpec::default(), &CollectionConfig::default(), 20, 9).unwrap();
    let idx = NearestNeighborIndex::build(&ds).unwrap();
    let (mut world, demo) = scripted(&sim, &three_step_script(&sim));
    let trace = baseline_nearest_neighbor(&idx, &mut world, &demo, &RegistrationParams::default()).unwrap();
    assert_eq!(trace.steps.len(), 3);
    assert!(trace.steps.iter().all(|s| s.distance.unwrap().is_finite()));
}

#[test]
fn trace_and_demo_files_round_trip() {
    let sim = SimConfig::default();
    let (mut world, demo) = scripted(&sim, &three_step_script(&sim));
    let oracle = ReplayOracle::new(&demo, DiscretizationSpec::default()).unwrap();
    let trace = imitate(&oracle, &mut world, &demo, &RegistrationParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.jsonl");
    write_trace(&trace, &p).unwrap();
    assert_eq!(read_trace(&p).unwrap(), trace);
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 3);

    let dp = dir.path().join("demo.json");
    demo.save(&dp).unwrap();
    assert_eq!(Demonstration::load(&dp).unwrap(), demo);
    assert!(matches!(Demonstration::load(&dir.path().join("nope.json")), Err(Error::MissingInput(_))));
}
