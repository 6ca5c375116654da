//! Parses a run configuration, reports validation errors and prints the
//! resolved settings.

use ropeweaver::config::RunConfig;

fn main() {
    let good = r#"{"seed": 5, "train": {"epochs": 2}, "experiment": {"repeats": 3}}"#;
    let cfg = RunConfig::from_json(good).and_then(|c| c.validate().map(|_| c)).expect("valid config");
    println!("dataset {}", cfg.dataset_path().display());
    println!("checkpoint {}", cfg.checkpoint_path().display());
    println!("{}", cfg.to_json());

    for bad in [r#"{"train": {"lr": -1}}"#, r#"{"model": {"grid": 7}}"#, r#"{"sim": {"node_count": 50, "colour": "red"}}"#] {
        let err = RunConfig::from_json(bad).and_then(|c| c.validate());
        println!("{bad} -> {}", err.err().map_or("ok".to_string(), |e| e.to_string()));
    }
}
