//! Collects random interactions, writes them to disk and reads them back.

use ropeweaver::dataset::{collect_random, read_records, write_records, CollectionConfig};

fn main() -> ropeweaver::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(500, |s| s.parse().expect("count"));
    let ds = collect_random(&Default::default(), &Default::default(), &CollectionConfig::default(), n, 11)?;
    let dir = std::env::temp_dir().join("ropeweaver-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("random.rwd");
    write_records(&ds, &path)?;
    let back = read_records(&path)?;
    assert_eq!(back, ds);
    let mean_len = ds.transitions.iter().map(|t| t.action_cont.length).sum::<f64>() / ds.len() as f64;
    println!("{} transitions in {} ({} bytes)", back.len(), path.display(), std::fs::metadata(&path)?.len());
    println!("train/val split {}/{}, mean drag length {mean_len:.2} cm", ds.train_indices().len(), ds.val_indices().len());
    println!("{}", serde_json::to_string_pretty(&back.manifest).expect("manifest serializes"));
    Ok(())
}
