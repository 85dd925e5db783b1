use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::cqt::N_BINS;
use crate::error::{Error, Result};
use crate::tensor::{Mode, ParamId, ParamStore, RunningStats, Scalar, Tape, Tensor, Var};

use super::config::{BlockKind, ModelConfig, GEM_P_MAX, GEM_P_MIN};

pub const MIN_FRAMES: usize = 8;
const CLASSIFIER_INIT_STD: f64 = 0.001;

#[derive(Clone, Copy, Debug)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
enum FirstNorm {
    Bn(BnLayer),
    /// Channels `0..half` instance-normalized, the rest batch-normalized.
    Ibn {
        half: usize,
        in_gamma: ParamId,
        in_beta: ParamId,
        bn: BnLayer,
    },
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ParamId,
    norm1: FirstNorm,
    conv2: ParamId,
    bn2: BnLayer,
    /// Bottleneck expansion conv.
    conv3: Option<(ParamId, BnLayer)>,
    shortcut: Option<(ParamId, BnLayer)>,
    stride: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
enum Pooling {
    Gem(ParamId),
    Split { p_t: ParamId, p_f: ParamId },
}

/// Handles to the tape values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub feature_map: Var,
    pub f_t: Var,
    pub f_c: Var,
    /// Projected `f_c` when the head is enabled, otherwise `f_c`.
    pub embedding: Var,
    pub logits: Var,
}

/// Materialized forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T: Scalar = f32> {
    pub feature_map: Tensor<T>,
    pub f_t: Tensor<T>,
    pub f_c: Tensor<T>,
    pub embedding: Tensor<T>,
    pub logits: Tensor<T>,
}

/// ResNet-IBN feature extractor with GeM pooling, BN neck, bias-free
/// classifier and optional projection head.
#[derive(Clone, Debug)]
pub struct ResNetIbn<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    running_names: Vec<String>,
    stem_conv: ParamId,
    stem_bn: BnLayer,
    stages: Vec<Vec<Block>>,
    pooling: Pooling,
    neck: Option<BnLayer>,
    classifier: ParamId,
    projection: Option<(ParamId, ParamId)>,
}

struct Builder<'a, T: Scalar> {
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    running_names: Vec<String>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)));
        self.params.add(name, t)
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> ParamId {
        let fan_in = inp * k * k;
        self.normal(name, &[out, inp, k, k], (2.0 / fan_in as f64).sqrt())
    }

    fn affine(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let g = self
            .params
            .add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let b = self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        (g, b)
    }

    fn bn(&mut self, name: &str, c: usize) -> BnLayer {
        let (gamma, beta) = self.affine(name, c);
        self.running.push(RunningStats::new(c));
        self.running_names.push(name.to_string());
        BnLayer {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

impl<T: Scalar> ResNetIbn<T> {
    /// He-normal convolutions, unit/zero normalization affines, classifier
    /// weights N(0, 0.001²); deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            running: Vec::new(),
            running_names: Vec::new(),
            rng: &mut rng,
        };
        let w0 = config.stage_widths[0];
        let stem_conv = b.conv("stem.conv", w0, 1, 7);
        let stem_bn = b.bn("stem.bn", w0);

        let expansion = config.block_kind.expansion();
        let strides = config.stage_strides();
        let mut in_ch = w0;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let width = config.stage_widths[s];
            let out_ch = width * expansion;
            let ibn = config.ibn_stages.contains(&(s + 1));
            let mut blocks = Vec::with_capacity(config.stage_blocks[s]);
            for i in 0..config.stage_blocks[s] {
                let p = format!("stage{}.block{i}", s + 1);
                let stride = if i == 0 { strides[s] } else { (1, 1) };
                let k1 = match config.block_kind {
                    BlockKind::Basic => 3,
                    BlockKind::Bottleneck => 1,
                };
                let conv1 = b.conv(&format!("{p}.conv1"), width, in_ch, k1);
                let norm1 = if ibn {
                    let half = width / 2;
                    let (in_gamma, in_beta) = b.affine(&format!("{p}.in1"), half);
                    let bn = b.bn(&format!("{p}.bn1"), width - half);
                    FirstNorm::Ibn {
                        half,
                        in_gamma,
                        in_beta,
                        bn,
                    }
                } else {
                    FirstNorm::Bn(b.bn(&format!("{p}.bn1"), width))
                };
                let (conv2, bn2, conv3) = match config.block_kind {
                    BlockKind::Basic => {
                        let c2 = b.conv(&format!("{p}.conv2"), width, width, 3);
                        (c2, b.bn(&format!("{p}.bn2"), width), None)
                    }
                    BlockKind::Bottleneck => {
                        let c2 = b.conv(&format!("{p}.conv2"), width, width, 3);
                        let bn2 = b.bn(&format!("{p}.bn2"), width);
                        let c3 = b.conv(&format!("{p}.conv3"), out_ch, width, 1);
                        let bn3 = b.bn(&format!("{p}.bn3"), out_ch);
                        (c2, bn2, Some((c3, bn3)))
                    }
                };
                let shortcut = (stride != (1, 1) || in_ch != out_ch).then(|| {
                    let w = b.conv(&format!("{p}.shortcut.conv"), out_ch, in_ch, 1);
                    (w, b.bn(&format!("{p}.shortcut.bn"), out_ch))
                });
                blocks.push(Block {
                    conv1,
                    norm1,
                    conv2,
                    bn2,
                    conv3,
                    shortcut,
                    stride,
                });
                in_ch = out_ch;
            }
            stages.push(blocks);
        }

        let p0 = Tensor::scalar(T::lit(config.gem_p_init));
        let pooling = if config.gem_split {
            Pooling::Split {
                p_t: b.params.add("gem.p_t", p0.clone()),
                p_f: b.params.add("gem.p_f", p0),
            }
        } else {
            Pooling::Gem(b.params.add("gem.p", p0))
        };
        let pooled = config.pooled_dim();
        let neck = config.neck.then(|| b.bn("neck.bn", pooled));
        let projection = (config.embed_dim > 0).then(|| {
            let w = b.normal(
                "projection.weight",
                &[config.embed_dim, pooled],
                (1.0 / pooled as f64).sqrt(),
            );
            let bias = b
                .params
                .add("projection.bias", Tensor::zeros(&[config.embed_dim]));
            (w, bias)
        });
        let classifier = b.normal(
            "classifier.weight",
            &[config.num_classes, config.embedding_dim()],
            CLASSIFIER_INIT_STD,
        );
        let Builder {
            params,
            running,
            running_names,
            ..
        } = b;
        Ok(Self {
            config,
            params,
            running,
            running_names,
            stem_conv,
            stem_bn,
            stages,
            pooling,
            neck,
            classifier,
            projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.running_names
            .iter()
            .map(String::as_str)
            .zip(&self.running)
    }

    pub fn running_stats_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<T>)> {
        self.running_names
            .iter()
            .map(String::as_str)
            .zip(&mut self.running)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// GeM exponent(s): `[p]`, or `[p_t, p_f]` with split pooling.
    pub fn gem_exponents(&self) -> Vec<f64> {
        self.gem_ids()
            .iter()
            .map(|&id| self.params.value(id).item().to_f64())
            .collect()
    }

    fn gem_ids(&self) -> Vec<ParamId> {
        match self.pooling {
            Pooling::Gem(p) => vec![p],
            Pooling::Split { p_t, p_f } => vec![p_t, p_f],
        }
    }

    /// Keeps every GeM exponent inside [1, 10].
    pub fn clamp_gem(&mut self) {
        for id in self.gem_ids() {
            let v = &mut self.params.get_mut(id).value.data_mut()[0];
            *v = v.max(T::lit(GEM_P_MIN)).min(T::lit(GEM_P_MAX));
        }
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: Var, layer: BnLayer, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.params, layer.gamma);
        let b = tape.param(&self.params, layer.beta);
        tape.batch_norm(x, g, b, &mut self.running[layer.stats], mode)
    }

    fn first_norm(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        norm: FirstNorm,
        mode: Mode,
    ) -> Result<Var> {
        match norm {
            FirstNorm::Bn(layer) => self.bn(tape, x, layer, mode),
            FirstNorm::Ibn {
                half,
                in_gamma,
                in_beta,
                bn,
            } => {
                let (lo, hi) = tape.split_channels(x, half)?;
                let g = tape.param(&self.params, in_gamma);
                let b = tape.param(&self.params, in_beta);
                let lo = tape.instance_norm(lo, g, b)?;
                let hi = self.bn(tape, hi, bn, mode)?;
                tape.concat_channels(lo, hi)
            }
        }
    }

    fn block(&mut self, tape: &mut Tape<T>, x: Var, blk: &Block, mode: Mode) -> Result<Var> {
        // basic: 3×3 (strided) → 3×3; bottleneck: 1×1 → 3×3 (strided) → 1×1
        let (pad1, s1, s2) = match self.config.block_kind {
            BlockKind::Basic => (1, blk.stride, (1, 1)),
            BlockKind::Bottleneck => (0, (1, 1), blk.stride),
        };
        let w1 = tape.param(&self.params, blk.conv1);
        let h = tape.conv2d(x, w1, s1, (pad1, pad1))?;
        let h = self.first_norm(tape, h, blk.norm1, mode)?;
        let h = tape.relu(h);
        let w2 = tape.param(&self.params, blk.conv2);
        let h = tape.conv2d(h, w2, s2, (1, 1))?;
        let mut h = self.bn(tape, h, blk.bn2, mode)?;
        if let Some((w3, bn3)) = blk.conv3 {
            h = tape.relu(h);
            let w = tape.param(&self.params, w3);
            h = tape.conv2d(h, w, (1, 1), (0, 0))?;
            h = self.bn(tape, h, bn3, mode)?;
        }
        let identity = match blk.shortcut {
            Some((ws, bns)) => {
                let w = tape.param(&self.params, ws);
                let s = tape.conv2d(x, w, blk.stride, (0, 0))?;
                self.bn(tape, s, bns, mode)?
            }
            None => x,
        };
        let sum = tape.add(h, identity)?;
        Ok(tape.relu(sum))
    }

    /// Runs the network on `[N, 1, 84, T]`. Train mode updates BN
    /// running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardVars> {
        let (_, c, h, t) = tape.value(input).dims4()?;
        if c != 1 || h != N_BINS {
            return Err(Error::Shape(format!(
                "model input must be [N, 1, {N_BINS}, T], got {:?}",
                tape.shape(input)
            )));
        }
        if t < MIN_FRAMES {
            return Err(Error::InvalidArgument(format!(
                "input has {t} frames; at least {MIN_FRAMES} are required"
            )));
        }
        let w = tape.param(&self.params, self.stem_conv);
        let x = tape.conv2d(input, w, (2, 2), (3, 3))?;
        let x = self.bn(tape, x, self.stem_bn, mode)?;
        let x = tape.relu(x);
        let mut x = tape.max_pool2d(x, 3, (2, 2), 1)?;
        let stages = std::mem::take(&mut self.stages);
        let result = (|| {
            for blocks in &stages {
                for blk in blocks {
                    x = self.block(tape, x, blk, mode)?;
                }
            }
            Ok::<_, Error>(x)
        })();
        self.stages = stages;
        let feature_map = result?;

        let f_t = match self.pooling {
            Pooling::Gem(p) => {
                let p = tape.param(&self.params, p);
                tape.gem_pool(feature_map, p)?
            }
            Pooling::Split { p_t, p_f } => {
                let pt = tape.param(&self.params, p_t);
                let pf = tape.param(&self.params, p_f);
                tape.gem_pool_split(feature_map, pt, pf)?
            }
        };
        let f_c = match self.neck {
            Some(layer) => self.bn(tape, f_t, layer, mode)?,
            None => f_t,
        };
        let embedding = match self.projection {
            Some((w, b)) => {
                let w = tape.param(&self.params, w);
                let b = tape.param(&self.params, b);
                tape.linear(f_c, w, Some(b))?
            }
            None => f_c,
        };
        let cw = tape.param(&self.params, self.classifier);
        let logits = tape.linear(embedding, cw, None)?;
        Ok(ForwardVars {
            feature_map,
            f_t,
            f_c,
            embedding,
            logits,
        })
    }

    /// Forward pass returning owned tensors.
    pub fn forward_values(&mut self, batch: Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let v = self.forward(&mut tape, x, mode)?;
        Ok(ForwardOutput {
            feature_map: tape.value(v.feature_map).clone(),
            f_t: tape.value(v.f_t).clone(),
            f_c: tape.value(v.f_c).clone(),
            embedding: tape.value(v.embedding).clone(),
            logits: tape.value(v.logits).clone(),
        })
    }

    /// Applies the projection head to `f_c`.
    pub fn project(&self, tape: &mut Tape<T>, f_c: Var) -> Result<Var> {
        let (w, b) = self
            .projection
            .ok_or_else(|| Error::InvalidArgument("projection head is disabled".into()))?;
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        tape.linear(f_c, w, Some(b))
    }

    pub fn num_stage_blocks(&self, stage: usize) -> usize {
        self.stages[stage].len()
    }

    /// Runs a single residual block (0-based `stage` and `block`).
    pub fn block_forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        stage: usize,
        block: usize,
        mode: Mode,
    ) -> Result<Var> {
        let blk = self.stages[stage][block].clone();
        self.block(tape, x, &blk, mode)
    }

    /// Normalization applied to a block's first-convolution output.
    #[cfg(test)]
    pub(crate) fn first_norm_forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        stage: usize,
        block: usize,
        mode: Mode,
    ) -> Result<Var> {
        let norm = self.stages[stage][block].norm1;
        self.first_norm(tape, x, norm, mode)
    }

    /// Conv weights of a block: conv1, conv2, then conv3 and shortcut if present.
    #[cfg(test)]
    pub(crate) fn block_conv_ids(&self, stage: usize, block: usize) -> Vec<ParamId> {
        let b = &self.stages[stage][block];
        let mut ids = vec![b.conv1, b.conv2];
        ids.extend(b.conv3.map(|c| c.0));
        ids.extend(b.shortcut.map(|s| s.0));
        ids
    }

    #[cfg(test)]
    pub(crate) fn projection_ids(&self) -> Option<(ParamId, ParamId)> {
        self.projection
    }
}

/// Expected spatial extent of the final feature map for an 84×T input.
pub fn output_extent(frames: usize) -> (usize, usize) {
    (6, frames.div_ceil(8))
}
