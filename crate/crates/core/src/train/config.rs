use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Preset, MIN_FRAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    ClsOnly,
    TriOnly,
    /// Both losses on `f_t`; the classifier reads `f_t` (no neck).
    JointNaive,
    /// Triplet on `f_t`, cross-entropy on logits from `f_c`.
    JointBnneck,
}

impl LossMode {
    pub fn uses_ce(self) -> bool {
        self != LossMode::TriOnly
    }

    pub fn uses_triplet(self) -> bool {
        self != LossMode::ClsOnly
    }

    pub fn uses_neck(self) -> bool {
        self != LossMode::JointNaive
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    /// Accepts the short CLI names as well as the serialized ones.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cls" | "cls_only" => LossMode::ClsOnly,
            "tri" | "tri_only" => LossMode::TriOnly,
            "naive" | "joint_naive" => LossMode::JointNaive,
            "bnneck" | "joint_bnneck" => LossMode::JointBnneck,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown loss mode {other:?}"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Triplet margin.
    pub alpha: f64,
    /// Cliques per batch.
    pub p: usize,
    /// Recordings per clique in a batch.
    pub k_per_class: usize,
    pub epochs: usize,
    pub crop_len: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Time downsampling factor of the training features; queries must be
    /// extracted the same way.
    pub feature_factor: u32,
    pub log_compress: bool,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl TrainConfig {
    pub fn new(preset: Preset, seed: u64) -> Self {
        Self {
            lr: 0.0004,
            batch_size: 32,
            alpha: 0.3,
            p: 8,
            k_per_class: 4,
            epochs: 50,
            crop_len: match preset {
                Preset::Full => 400,
                Preset::Mini => 80,
            },
            seed,
            loss_mode: LossMode::JointBnneck,
            feature_factor: crate::audio::cqt::DEFAULT_DOWNSAMPLE,
            log_compress: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.p * self.k_per_class != self.batch_size {
            return bad(format!(
                "P·K = {}·{} does not equal batch size {}",
                self.p, self.k_per_class, self.batch_size
            ));
        }
        if self.p < 2 || self.k_per_class < 2 {
            return bad("triplet mining needs P ≥ 2 and K ≥ 2".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("margin {} must be positive", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.crop_len < MIN_FRAMES {
            return bad(format!("crop length {} below {MIN_FRAMES}", self.crop_len));
        }
        Ok(())
    }
}
