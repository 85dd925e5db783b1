//! Feature-map and embedding shapes of the two presets for a few input widths.

use coverid::audio::cqt::N_BINS;
use coverid::model::{ModelConfig, ResNetIbn};
use coverid::tensor::{Mode, Tensor};

fn main() -> coverid::Result<()> {
    for (name, config) in [
        ("mini", ModelConfig::mini(10)),
        ("full", ModelConfig::full(10)),
    ] {
        let mut model = ResNetIbn::<f32>::new(config, 0)?;
        for t in [8, 80, 400] {
            let x = Tensor::from_fn(&[1, 1, N_BINS, t], |i| ((i * 37) % 101) as f32 / 101.0);
            let out = model.forward_values(x, Mode::Eval)?;
            println!(
                "{name} T={t:<4} feature map {:?}  f_c {:?}  logits {:?}",
                out.feature_map.shape(),
                out.f_c.shape(),
                out.logits.shape()
            );
        }
    }
    Ok(())
}
