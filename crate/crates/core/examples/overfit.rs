//! Memorizes 50 random transitions and reports training accuracy over time.

use std::time::Instant;

use ropeweaver::actions::DiscretizationSpec;
use ropeweaver::dataset::{collect_random, CollectionConfig};
use ropeweaver::model::{evaluate, InitScheme, InverseModel, InverseModelSpec, Trainer};

fn main() -> ropeweaver::Result<()> {
    let init = match std::env::args().nth(1).as_deref() {
        Some("small") => InitScheme::SmallNormal,
        _ => InitScheme::FanIn,
    };
    let lr: f64 = std::env::args().nth(2).map_or(1e-4, |s| s.parse().unwrap());
    let ds = collect_random(&Default::default(), &Default::default(), &CollectionConfig::default(), 50, 7)?;
    let data: Vec<_> = ds.transitions.iter().collect();
    let spec = InverseModelSpec { init, ..InverseModelSpec::desk() };
    let mut trainer = Trainer::new(InverseModel::new(spec, DiscretizationSpec::default(), 0)?, lr);
    println!("initial loss {:.4}", trainer.loss(&data)?);
    let start = Instant::now();
    for step in 1..=10_000 {
        trainer.step(&data)?;
        if step % 100 == 0 {
            let ev = evaluate(&trainer.model, &data)?;
            println!(
                "step {step:5}  pick {:.2}  theta {:.2}  len {:.2}  nll {:.3}  {:.1}s",
                ev.pick_acc, ev.theta_acc, ev.len_acc, -ev.mean_log_likelihood, start.elapsed().as_secs_f64()
            );
            if ev.pick_acc >= 0.95 && ev.theta_acc >= 0.90 {
                break;
            }
        }
    }
    Ok(())
}
