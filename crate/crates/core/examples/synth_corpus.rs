//! Build a small synthetic cover corpus and list what was written.

use coverid::synth::{build_dataset, CorpusConfig};

fn main() -> coverid::Result<()> {
    let dir = std::env::temp_dir().join("coverid_synth_example");
    let mut config = CorpusConfig::new(3, 4, 7);
    config.write_wav = true;
    let rows = build_dataset(&config, &dir)?;
    for r in &rows {
        println!(
            "{:<12} {:<10} {:?} {}",
            r.id,
            r.clique,
            r.split,
            r.feature.display()
        );
    }
    println!("manifest at {}", dir.join("manifest.jsonl").display());
    Ok(())
}
