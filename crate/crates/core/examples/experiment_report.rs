//! Runs a small evaluation grid with the registration baseline and exports
//! the CSV, SVG and markdown report.

use ropeweaver::harness::{export_report, run_experiment, ExperimentPlan, Method, Resources, ShapeName};

fn main() -> ropeweaver::Result<()> {
    let plan = ExperimentPlan {
        methods: vec![Method::HandEngineered],
        shapes: vec![ShapeName::L, ShapeName::S, ShapeName::W],
        repeats: 2,
        ..Default::default()
    };
    let report = run_experiment(&plan, &Default::default(), &Default::default(), &Resources::default())?;
    let dir = std::env::temp_dir().join("ropeweaver-example").join("report");
    export_report(&report, &dir)?;
    println!("{}", report.summary_markdown());
    println!("files in {}", dir.display());
    Ok(())
}
