use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ResNetIbn;
use crate::retrieval::{embed_all, evaluate};
use crate::tensor::{Mode, Tape};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::{make_batch, pk_sample, LabeledDataset, Split};
use super::loss::total_loss;
use super::optim::Adam;

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce_loss: f64,
    pub triplet_loss: f64,
    pub total_loss: f64,
    /// Validation mAP; absent when the dataset has no scorable val split.
    pub val_map: Option<f64>,
    /// First GeM exponent (`p_t` with split pooling).
    pub gem_p: f64,
}

pub const LOG_HEADER: &str = "epoch,ce_loss,triplet_loss,total_loss,val_map,gem_p";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_map.map_or_else(String::new, |m| format!("{m:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{},{:.6}",
            self.epoch, self.ce_loss, self.triplet_loss, self.total_loss, val, self.gem_p
        )
    }
}

pub fn log_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Snapshot of the epoch with the highest validation mAP (earliest on
    /// ties); `None` without validation data or epochs.
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// Final checkpoint in `dir`, best one in `dir/best`, log in
    /// `dir/train_log.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.last.save(dir)?;
        if let Some(best) = &self.best {
            best.save(dir.join("best"))?;
        }
        let path = dir.join("train_log.csv");
        std::fs::write(&path, log_csv(&self.log)).map_err(|e| Error::io(&path, e))
    }
}

/// Validation mAP: val queries against all non-test recordings, self excluded.
pub fn validation_map(model: &mut ResNetIbn<f32>, dataset: &LabeledDataset) -> Result<Option<f64>> {
    let recs = dataset.recordings();
    let val = dataset.split_indices(Split::Val);
    if val.is_empty() {
        return Ok(None);
    }
    let refs: Vec<usize> = (0..recs.len())
        .filter(|&i| recs[i].split != Split::Test)
        .collect();
    let ref_store = embed_all(
        model,
        refs.iter().map(|&i| (recs[i].id.as_str(), &recs[i].cqt)),
    )?;
    let query_ids: std::collections::HashSet<&str> =
        val.iter().map(|&i| recs[i].id.as_str()).collect();
    let queries = ref_store.subset(&query_ids);
    let labels: HashMap<String, String> = refs
        .iter()
        .map(|&i| (recs[i].id.clone(), recs[i].clique.to_string()))
        .collect();
    match evaluate(&queries, &ref_store, &labels, true) {
        Ok(r) => Ok(Some(r.map)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs `config.epochs × ⌈|train| / batch⌉` optimization steps on `model`.
/// `on_epoch` sees every log row as it is produced.
pub fn train(
    model: ResNetIbn<f32>,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.config().num_classes != dataset.num_cliques() {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, dataset has {} cliques",
            model.config().num_classes,
            dataset.num_cliques()
        )));
    }
    if model.config().neck != config.loss_mode.uses_neck() {
        return Err(Error::InvalidArgument(format!(
            "loss mode {:?} does not match the model's neck setting",
            config.loss_mode
        )));
    }
    let n_train = dataset.split_indices(Split::Train).len();
    let steps = n_train.div_ceil(config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let opt = Adam::new(config.lr);
    let mut model = model;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    let snapshot = |model: &ResNetIbn<f32>, epoch, metrics: Option<EpochMetrics>| Checkpoint {
        model: model.clone(),
        train_config: config.clone(),
        epoch,
        metrics,
    };

    for epoch in 1..=config.epochs {
        let (mut ce_sum, mut tri_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let idx = pk_sample(dataset, config.p, config.k_per_class, &mut rng)?;
            let (batch, labels) = make_batch(dataset, &idx, config.crop_len, &mut rng)?;
            let mut tape = Tape::new();
            let x = tape.input(batch);
            let out = model.forward(&mut tape, x, Mode::Train)?;
            let parts = total_loss(&mut tape, &out, &labels, config.loss_mode, config.alpha)?;
            let (ce, tri, tot) = (
                tape.value(parts.ce).item() as f64,
                tape.value(parts.triplet).item() as f64,
                tape.value(parts.total).item() as f64,
            );
            if !(ce.is_finite() && tri.is_finite() && tot.is_finite()) {
                let ids: Vec<&str> = idx
                    .iter()
                    .map(|&i| dataset.recordings()[i].id.as_str())
                    .collect();
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}: ce {ce}, triplet {tri}, total {tot}; batch {ids:?}"
                )));
            }
            model.params_mut().zero_grad();
            tape.backward(parts.total, model.params_mut());
            opt.step(model.params_mut());
            model.clamp_gem();
            ce_sum += ce;
            tri_sum += tri;
            tot_sum += tot;
        }
        let n = steps.max(1) as f64;
        let row = EpochMetrics {
            epoch,
            ce_loss: ce_sum / n,
            triplet_loss: tri_sum / n,
            total_loss: tot_sum / n,
            val_map: validation_map(&mut model, dataset)?,
            gem_p: model.gem_exponents()[0],
        };
        on_epoch(&row);
        let improved = match (&best, row.val_map) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(b), Some(m)) => m > b.metrics.as_ref().and_then(|x| x.val_map).unwrap_or(-1.0),
        };
        if improved {
            best = Some(snapshot(&model, epoch, Some(row.clone())));
        }
        log.push(row);
    }
    let last = snapshot(&model, config.epochs, log.last().cloned());
    Ok(TrainOutcome { last, best, log })
}
