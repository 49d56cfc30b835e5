use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::parse_value;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::gating::gate_stats;
use crate::tensor::Tape;

use super::metrics::Metrics;
use super::model::{Batch, FusionModel};
use super::optim::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Share of the dataset held out for per-epoch evaluation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        self.optimizer().map(|_| ())
    }

    pub fn optimizer(&self) -> Result<AdamW> {
        AdamW::new(self.lr, self.weight_decay, self.beta1, self.beta2, self.eps)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One optimizer step's losses.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub l_ce: f64,
    pub l_contrast: f64,
    pub l_moe: f64,
    pub total: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "step,epoch,l_ce,l_contrast,l_moe,total,lr";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?}\n",
            r.step, r.epoch, r.l_ce, r.l_contrast, r.l_moe, r.total, r.lr
        ));
    }
    out
}

/// Aggregates for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l_ce: f64,
    pub mean_l_contrast: f64,
    pub mean_l_moe: f64,
    pub mean_total: f64,
    /// Held-out metrics, absent when nothing is held out.
    pub metrics: Option<Metrics>,
    /// Share of training samples whose top-1 expert was each expert.
    pub expert_fraction: Option<Vec<f64>>,
    /// Mean and standard deviation of every gate value seen this epoch.
    pub gate: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub epochs: Vec<EpochRecord>,
    pub split: Split,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.epochs.last().and_then(|e| e.metrics.as_ref())
    }
}

/// Seeded shuffle, then the first `round(n·val_fraction)` indices (at least
/// one when the fraction is positive) are held out.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::contract("dataset is empty"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5917);
    idx.shuffle(&mut rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 {
        n_val = n_val.max(1);
    }
    n_val = n_val.min(n - 1);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, val })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes, lowest index on ties.
pub fn predict(model: &FusionModel, samples: &[&LabeledSample], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let logits = model.predict_logits(&Batch::from_samples(chunk, true)?)?;
        out.extend(logits.data().chunks(logits.cols()).map(argmax));
    }
    Ok(out)
}

/// Metrics against the clean labels.
pub fn evaluate(model: &FusionModel, samples: &[&LabeledSample], batch_size: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let predicted = predict(model, samples, batch_size)?;
    let actual: Vec<usize> = samples.iter().map(|s| s.true_label).collect();
    Metrics::from_predictions(&predicted, &actual, model.config.num_classes)
}

/// Splits `dataset`, trains on the observed labels of the training part and
/// evaluates on the clean labels of the held-out part after every epoch.
pub fn train(model: &mut FusionModel, dataset: &[LabeledSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let split = split_indices(dataset.len(), cfg.val_fraction, cfg.seed)?;
    let train_set: Vec<&LabeledSample> = split.train.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&LabeledSample> = split.val.iter().map(|&i| &dataset[i]).collect();
    let (history, epochs) = train_on(model, &train_set, &val_set, cfg)?;
    Ok(TrainOutcome { history, epochs, split })
}

pub fn train_on(
    model: &mut FusionModel,
    train_set: &[&LabeledSample],
    val_set: &[&LabeledSample],
    cfg: &TrainConfig,
) -> Result<(Vec<HistoryRow>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let first = train_set.first().ok_or_else(|| Error::contract("training set is empty"))?;
    model.check_shapes(first.image.seq_len(), first.text.seq_len())?;
    let mut opt = cfg.optimizer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut steps_in_epoch = 0;
        let mut top1: Option<Vec<f64>> = None;
        let mut routed = 0usize;
        let (mut g_sum, mut g_sq, mut g_n) = (0.0, 0.0, 0usize);

        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let samples: Vec<&LabeledSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch = Batch::from_samples(&samples, false)?;
            model.params.zero_grads();
            let tape = Tape::new();
            let pass = model.forward(&tape, &batch).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFiniteLoss {
                    step,
                    breakdown: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            let b = pass.breakdown;
            if !b.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    breakdown: b.to_string(),
                });
            }
            pass.total.backward()?.accumulate_into(&mut model.params)?;
            opt.step(&mut model.params)?;
            model.clamp_temperature();

            history.push(HistoryRow {
                step,
                epoch,
                l_ce: b.l_ce,
                l_contrast: b.l_contrast,
                l_moe: b.l_moe,
                total: b.total,
                lr: cfg.lr,
            });
            for (s, v) in sums.iter_mut().zip([b.l_ce, b.l_contrast, b.l_moe, b.total]) {
                *s += v;
            }
            steps_in_epoch += 1;
            if let Some(stats) = &pass.routing {
                let acc = top1.get_or_insert_with(|| vec![0.0; stats.f.len()]);
                for (a, f) in acc.iter_mut().zip(&stats.f) {
                    *a += f * batch.len() as f64;
                }
                routed += batch.len();
            }
            if let Some(a) = &pass.gate {
                g_sum += a.data().iter().sum::<f64>();
                g_sq += a.data().iter().map(|v| v * v).sum::<f64>();
                g_n += a.numel();
            }
        }

        let n = steps_in_epoch.max(1) as f64;
        let metrics = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set, cfg.batch_size)?)
        };
        epochs.push(EpochRecord {
            epoch,
            mean_l_ce: sums[0] / n,
            mean_l_contrast: sums[1] / n,
            mean_l_moe: sums[2] / n,
            mean_total: sums[3] / n,
            metrics,
            expert_fraction: top1.map(|c| c.into_iter().map(|v| v / routed as f64).collect()),
            gate: (g_n > 0).then(|| {
                let mean = g_sum / g_n as f64;
                (mean, (g_sq / g_n as f64 - mean * mean).max(0.0).sqrt())
            }),
        });
    }
    Ok((history, epochs))
}

/// Mean and spread of the gate values a model assigns to `samples`.
pub fn gate_summary(model: &FusionModel, samples: &[&LabeledSample]) -> Result<Option<(f64, f64)>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let tape = Tape::new();
    let pass = model.forward(&tape, &Batch::from_samples(samples, true)?)?;
    Ok(pass.gate.as_ref().map(gate_stats))
}
