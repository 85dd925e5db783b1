//! A few epochs of joint CE and triplet training on a tiny corpus.

use coverid::model::{ModelConfig, Preset, ResNetIbn};
use coverid::synth::{build_dataset, CorpusConfig};
use coverid::train::{train, LabeledDataset, TrainConfig};

fn main() -> coverid::Result<()> {
    let dir = fresh_dir("coverid_train_example");
    build_dataset(&CorpusConfig::new(8, 5, 1), &dir)?;
    let ds = LabeledDataset::load(dir.join("manifest.jsonl"))?;

    let model = ResNetIbn::new(ModelConfig::mini(ds.num_cliques()), 1)?;
    let mut config = TrainConfig::new(Preset::Mini, 1);
    config.epochs = 5;
    config.feature_factor = coverid::synth::SYNTH_DOWNSAMPLE;
    let outcome = train(model, &ds, &config, |m| {
        println!(
            "epoch {:>2} ce {:.4} triplet {:.4} val mAP {}",
            m.epoch,
            m.ce_loss,
            m.triplet_loss,
            m.val_map.map_or("-".into(), |v| format!("{v:.4}"))
        );
    })?;
    outcome.save(dir.join("ckpt"))?;
    println!("checkpoint in {}", dir.join("ckpt").display());
    Ok(())
}

fn fresh_dir(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(name);
    let _ = std::fs::remove_dir_all(&d);
    d
}
