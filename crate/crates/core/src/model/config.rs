use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mini,
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(Preset::Mini),
            "full" => Ok(Preset::Full),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage_blocks: [usize; 4],
    pub stage_widths: [usize; 4],
    pub block_kind: BlockKind,
    /// 1-based stage indices whose blocks use the IN/BN split.
    pub ibn_stages: Vec<usize>,
    pub last_stage_stride: usize,
    pub num_classes: usize,
    pub gem_p_init: f64,
    /// Output size of the projection head; 0 disables it.
    pub embed_dim: usize,
    pub gem_split: bool,
    /// BN neck between the pooled feature and the classifier. Without it
    /// the classifier reads the pooled feature directly.
    #[serde(default = "default_true")]
    pub neck: bool,
}

fn default_true() -> bool {
    true
}

pub const GEM_P_INIT: f64 = 3.0;
pub const GEM_P_MIN: f64 = 1.0;
pub const GEM_P_MAX: f64 = 10.0;

impl ModelConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            stage_blocks: [3, 4, 6, 3],
            stage_widths: [64, 128, 256, 512],
            block_kind: BlockKind::Bottleneck,
            ibn_stages: vec![1, 2, 3],
            last_stage_stride: 1,
            num_classes,
            gem_p_init: GEM_P_INIT,
            embed_dim: 0,
            gem_split: false,
            neck: true,
        }
    }

    pub fn mini(num_classes: usize) -> Self {
        Self {
            stage_blocks: [1, 1, 1, 1],
            stage_widths: [16, 32, 64, 128],
            block_kind: BlockKind::Basic,
            ..Self::full(num_classes)
        }
    }

    pub fn preset(preset: Preset, num_classes: usize) -> Self {
        match preset {
            Preset::Mini => Self::mini(num_classes),
            Preset::Full => Self::full(num_classes),
        }
    }

    /// Channels of the final feature map (K).
    pub fn output_channels(&self) -> usize {
        self.stage_widths[3] * self.block_kind.expansion()
    }

    /// Width of the pooled feature `f_t` (2K with split pooling).
    pub fn pooled_dim(&self) -> usize {
        self.output_channels() * if self.gem_split { 2 } else { 1 }
    }

    /// Width of the retrieval embedding.
    pub fn embedding_dim(&self) -> usize {
        if self.embed_dim > 0 {
            self.embed_dim
        } else {
            self.pooled_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("model config: {msg}")));
        if self.stage_blocks.contains(&0) {
            return bad(format!(
                "every stage needs a block, got {:?}",
                self.stage_blocks
            ));
        }
        if self.stage_widths.contains(&0) {
            return bad(format!("zero stage width in {:?}", self.stage_widths));
        }
        if let Some(s) = self.ibn_stages.iter().find(|&&s| !(1..=3).contains(&s)) {
            return bad(format!("IBN stage {s} outside 1..=3"));
        }
        for &s in &self.ibn_stages {
            if !self.stage_widths[s - 1].is_multiple_of(2) {
                return bad(format!(
                    "IBN stage {s} width {} is odd",
                    self.stage_widths[s - 1]
                ));
            }
        }
        if self.last_stage_stride != 1 {
            return bad(format!(
                "last stage stride must be 1, got {}",
                self.last_stage_stride
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !(GEM_P_MIN..=GEM_P_MAX).contains(&self.gem_p_init) {
            return bad(format!("gem_p_init {} outside [1, 10]", self.gem_p_init));
        }
        Ok(())
    }

    /// (frequency, time) stride of each stage's first block.
    pub fn stage_strides(&self) -> [(usize, usize); 4] {
        let last = self.last_stage_stride;
        [(1, 1), (2, 2), (2, 1), (last, last)]
    }
}
