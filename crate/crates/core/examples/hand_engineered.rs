//! Follows a scripted S demonstration with the registration-based baseline
//! and saves the execution trace.

use ropeweaver::controllers::{baseline_hand_engineered, write_trace};
use ropeweaver::harness::{make_demo, Jitter, ShapeName, ShapeTarget};
use ropeweaver::registration::RegistrationParams;
use ropeweaver::sim::{SimConfig, World};

fn main() -> ropeweaver::Result<()> {
    let sim = SimConfig::default();
    let demo = make_demo(&ShapeTarget::builtin(ShapeName::S, 0, 1)?, &sim, &Jitter::none(), 0)?;
    let mut world = World::new(sim)?;
    let trace = baseline_hand_engineered(&mut world, &demo, &RegistrationParams::default())?;
    for s in &trace.steps {
        match (&s.action, s.distance) {
            (Some(a), Some(d)) => println!("step {}: pick ({:.1}, {:.1}) theta {:.2} len {:.1} -> {d:.3} px", s.step, a.pick.x, a.pick.y, a.theta, a.length),
            _ => println!("step {}: skipped ({})", s.step, s.error.as_deref().unwrap_or("no action")),
        }
    }
    let path = std::env::temp_dir().join("ropeweaver-example").join("S0.jsonl");
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    write_trace(&trace, &path)?;
    println!("trace written to {}", path.display());
    Ok(())
}
