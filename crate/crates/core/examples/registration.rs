//! Configuration distance between rope renders under translation and reshaping.

use ropeweaver::geom::Vec2;
use ropeweaver::registration::{config_distance_detailed, RegistrationParams};
use ropeweaver::sim::{apply_action, render, reset_rope, SimConfig};
use ropeweaver::actions::ActionContinuous;

fn main() -> ropeweaver::Result<()> {
    let sim = SimConfig::default();
    let reg = RegistrationParams::default();
    let base = reset_rope(&sim);
    let a = render(&base, &sim);
    for dy in [0.0, 2.0, 5.0] {
        let b = render(&base.translated(Vec2::new(0.0, dy)), &sim);
        let (d, _, _, r) = config_distance_detailed(&a, &b, &reg)?;
        println!("shift {dy} cm: distance {d:.3} px, {} annealing stages", r.stage_errors.len());
    }
    let bent = apply_action(&base, &ActionContinuous { pick: base.nodes[49], theta: 4.71, length: 12.0 }, &sim)?;
    let (d, ..) = config_distance_detailed(&a, &render(&bent, &sim), &reg)?;
    println!("free end lifted 12 cm: distance {d:.3} px");
    Ok(())
}
