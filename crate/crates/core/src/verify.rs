//! The finite-difference gradient suite behind `coverid gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::cqt::N_BINS;
use crate::error::Result;
use crate::model::{ModelConfig, ResNetIbn};
use crate::tensor::gradcheck::{check_coordinates, gradient_check, GradCheckReport, InputDist};
use crate::tensor::{Mode, RunningStats, Tape, Tensor};
use crate::train::{total_loss, LossMode};

pub const TOLERANCE: f64 = 1e-6;
const UNIFORM: InputDist = InputDist::Uniform { lo: -1.0, hi: 1.0 };
const OFF_KINK: InputDist = InputDist::AwayFromZero {
    margin: 0.1,
    max: 1.0,
};
const POSITIVE: InputDist = InputDist::Uniform { lo: 0.5, hi: 3.0 };
/// Coordinates sampled from each parameter tensor of the full model.
const MODEL_COORDS_PER_TENSOR: usize = 3;

/// Checks every differentiable op, then the joint loss of a small mini
/// model, at 64-bit precision. `inject_broken` appends an op with a
/// deliberately wrong backward pass.
pub fn gradient_suite(seed: u64, inject_broken: bool) -> Result<Vec<GradCheckReport>> {
    let tol = TOLERANCE;
    let s = seed;
    let mut out = vec![
        gradient_check(
            "conv2d",
            &[&[2, 3, 7, 8], &[4, 3, 3, 3]],
            UNIFORM,
            s,
            tol,
            |t, v| t.conv2d(v[0], v[1], (2, 1), (1, 1)),
        )?,
        gradient_check(
            "conv2d_1x1",
            &[&[2, 3, 5, 4], &[5, 3, 1, 1]],
            UNIFORM,
            s,
            tol,
            |t, v| t.conv2d(v[0], v[1], (2, 2), (0, 0)),
        )?,
    ];
    for (name, mode) in [
        ("batch_norm2d_train", Mode::Train),
        ("batch_norm2d_eval", Mode::Eval),
    ] {
        out.push(gradient_check(
            name,
            &[&[3, 2, 3, 4], &[2], &[2]],
            UNIFORM,
            s,
            tol,
            |t, v| {
                let mut stats = RunningStats::new(2);
                stats.mean = vec![0.1, -0.2];
                stats.var = vec![0.7, 1.3];
                t.batch_norm(v[0], v[1], v[2], &mut stats, mode)
            },
        )?);
    }
    out.extend([
        gradient_check(
            "batch_norm1d",
            &[&[5, 3], &[3], &[3]],
            UNIFORM,
            s,
            tol,
            |t, v| t.batch_norm(v[0], v[1], v[2], &mut RunningStats::new(3), Mode::Train),
        )?,
        gradient_check(
            "instance_norm",
            &[&[2, 3, 3, 4], &[3], &[3]],
            UNIFORM,
            s,
            tol,
            |t, v| t.instance_norm(v[0], v[1], v[2]),
        )?,
        gradient_check(
            "relu",
            &[&[4, 6]],
            OFF_KINK,
            s,
            tol,
            |t, v| Ok(t.relu(v[0])),
        )?,
        gradient_check("max_pool2d", &[&[2, 2, 6, 5]], UNIFORM, s, tol, |t, v| {
            t.max_pool2d(v[0], 3, (2, 1), 1)
        })?,
        gradient_check(
            "linear",
            &[&[3, 4], &[5, 4], &[5]],
            UNIFORM,
            s,
            tol,
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        )?,
        gradient_check(
            "softmax_cross_entropy",
            &[&[4, 6]],
            UNIFORM,
            s,
            tol,
            |t, v| t.softmax_cross_entropy(v[0], &[0, 5, 2, 2]),
        )?,
        gradient_check("gem", &[&[2, 3, 4, 5], &[1]], POSITIVE, s, tol, |t, v| {
            t.gem_pool(v[0], v[1])
        })?,
        gradient_check(
            "gem_split",
            &[&[2, 3, 4, 5], &[1], &[1]],
            POSITIVE,
            s,
            tol,
            |t, v| t.gem_pool_split(v[0], v[1], v[2]),
        )?,
        gradient_check("triplet_batch_hard", &[&[8, 5]], UNIFORM, s, tol, |t, v| {
            Ok(t.triplet_batch_hard(v[0], &[0, 0, 1, 1, 2, 2, 3, 3], 0.3)?
                .0)
        })?,
        gradient_check(
            "add_concat_slice",
            &[&[2, 4, 2, 3], &[2, 4, 2, 3]],
            UNIFORM,
            s,
            tol,
            |t, v| {
                let sum = t.add(v[0], v[1])?;
                let (a, b) = t.split_channels(sum, 1)?;
                t.concat_channels(b, a)
            },
        )?,
        model_loss_check(s)?,
    ]);
    if inject_broken {
        out.push(gradient_check(
            "broken_fixture",
            &[&[3]],
            UNIFORM,
            s,
            tol,
            |t, v| Ok(t.broken_fixture(v[0])),
        )?);
    }
    Ok(out)
}

/// Joint classification + triplet loss of a mini model on a random batch,
/// checked at a few random coordinates of every parameter tensor.
fn model_loss_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    // an unused fifth class keeps the neck-shift gradient well above the
    // finite-difference noise floor; balanced classes nearly cancel it
    let mut model = ResNetIbn::<f64>::new(ModelConfig::mini(5), seed)?;
    let batch = Tensor::from_fn(&[labels.len(), 1, N_BINS, 8], |_| rng.gen_range(0.0..1.0));

    let eval = |model: &mut ResNetIbn<f64>, backward: bool| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let out = model.forward(&mut tape, x, Mode::Train)?;
        let loss = total_loss(&mut tape, &out, &labels, LossMode::JointBnneck, 0.3)?;
        if backward {
            model.params_mut().zero_grad();
            tape.backward(loss.total, model.params_mut());
        }
        Ok((tape.value(loss.total).item(), tape.branch_signature()))
    };
    let (_, base_signature) = eval(&mut model, true)?;

    // flatten (tensor, element) pairs into coordinates
    let mut coords = Vec::new();
    let mut analytic = Vec::new();
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        let n = model.params().value(id).numel();
        for _ in 0..MODEL_COORDS_PER_TENSOR.min(n) {
            let e = rng.gen_range(0..n);
            coords.push((id, e));
            analytic.push(model.params().get(id).grad.data()[e]);
        }
    }
    check_coordinates(
        "mini_model_loss",
        &analytic,
        0..coords.len(),
        base_signature,
        TOLERANCE,
        |c, delta| {
            let (id, e) = coords[c];
            let orig = model.params().value(id).data()[e];
            model.params_mut().get_mut(id).value.data_mut()[e] = orig + delta;
            let r = eval(&mut model, false);
            model.params_mut().get_mut(id).value.data_mut()[e] = orig;
            r
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_catches_broken_op() {
        let reports = gradient_suite(0, true).unwrap();
        let (broken, rest) = reports.split_last().unwrap();
        for r in rest {
            assert!(r.passed, "{r:?}");
            assert!(r.checked > 0);
        }
        assert!(!broken.passed);
        assert_eq!(broken.name, "broken_fixture");
        let model = rest.iter().find(|r| r.name == "mini_model_loss").unwrap();
        assert!(model.checked >= 100, "{model:?}");
    }
}
