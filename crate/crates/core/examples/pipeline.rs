//! Whole loop at a chosen scale: random collection, a first model, active
//! collection toward a goal buffer, retraining, then an L/S comparison.
//!
//! cargo run --release --example pipeline -- [transitions_per_policy] [epochs] [repeats]

use std::time::Instant;

use ropeweaver::actions::DiscretizationSpec;
use ropeweaver::controllers::NearestNeighborIndex;
use ropeweaver::dataset::{collect_active, collect_random, CollectionConfig, GoalBuffer};
use ropeweaver::harness::{run_experiment, ExperimentPlan, Method, Resources, ShapeName};
use ropeweaver::model::{train, InverseModelSpec, TrainHyper, TrainOutputs};
use ropeweaver::sim::SimConfig;

fn main() -> ropeweaver::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let n = args.first().copied().unwrap_or(2000);
    let epochs = args.get(1).copied().unwrap_or(4);
    let repeats = args.get(2).copied().unwrap_or(3);
    let (sim, disc, coll) = (SimConfig::default(), DiscretizationSpec::default(), CollectionConfig::default());
    let spec = InverseModelSpec::desk();
    let hyper = TrainHyper { epochs, ..Default::default() };
    let t0 = Instant::now();

    let mut data = collect_random(&sim, &disc, &coll, n, 1)?;
    println!("random: {} transitions ({:.0} s)", data.len(), t0.elapsed().as_secs_f64());
    let log = |r: &ropeweaver::model::TrainLogRow| {
        println!(
            "  epoch {} loss {:.3} val {:.3} pick {:.2} theta {:.2} len {:.2}",
            r.epoch, r.loss, r.val_loss, r.val_pick_acc, r.val_theta_acc, r.val_len_acc
        )
    };
    let (first, _) = train(&data, &spec, &hyper, &TrainOutputs::default(), log)?;
    println!("first model ({:.0} s)", t0.elapsed().as_secs_f64());

    let goals = GoalBuffer::generate(&sim, 64, 4, 2)?;
    data.extend(collect_active(&sim, &disc, &coll, Some(&first), &goals, n, 3)?)?;
    println!("active: {} transitions total ({:.0} s)", data.len(), t0.elapsed().as_secs_f64());
    let (model, _) = train(&data, &spec, &hyper, &TrainOutputs::default(), log)?;
    println!("final model ({:.0} s)", t0.elapsed().as_secs_f64());

    let index = NearestNeighborIndex::build(&data)?;
    let plan = ExperimentPlan {
        methods: vec![Method::Imitate, Method::NearestNeighbor, Method::NoImitation, Method::HandEngineered],
        shapes: vec![ShapeName::L, ShapeName::S],
        repeats,
        ..Default::default()
    };
    let report = run_experiment(&plan, &sim, &disc, &Resources { model: Some(&model), nn_index: Some(&index) })?;
    println!("{}", report.summary_markdown());
    println!("total {:.0} s", t0.elapsed().as_secs_f64());
    Ok(())
}
