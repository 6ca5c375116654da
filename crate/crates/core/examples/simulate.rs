//! Drags the rope a few times and prints the raster as ASCII art.

use ropeweaver::actions::ActionContinuous;
use ropeweaver::geom::Vec2;
use ropeweaver::sim::{crossing_count, SimConfig, World};

fn main() -> ropeweaver::Result<()> {
    let mut world = World::new(SimConfig::default())?;
    let moves = [(Vec2::new(39.0, 32.0), 4.71, 12.0), (Vec2::new(30.0, 32.0), 1.57, 8.0), (Vec2::new(20.0, 32.0), 0.6, 6.0)];
    for (pick, theta, length) in moves {
        // Picks off the rope are no-ops, so aim at the nearest node.
        let pick = world.state.nodes[world.state.nearest_node(pick)];
        world.step(&ActionContinuous { pick, theta, length })?;
        println!("after drag at ({:.1}, {:.1}): {} crossings, arc length {:.2} cm", pick.x, pick.y, crossing_count(&world.state), world.state.arc_length());
    }
    let img = world.observe();
    for row in img.pixels.chunks(img.width).filter(|r| r.iter().any(|&v| v > 0.0)) {
        let line: String = row.iter().map(|&v| if v > 0.75 { '#' } else if v > 0.0 { '+' } else { '.' }).collect();
        println!("{line}");
    }
    Ok(())
}
