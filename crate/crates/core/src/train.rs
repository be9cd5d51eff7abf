//! Training loop, imbalance resampling and evaluation reports.

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricError, PrPoint, RocPoint};
use crate::models::{Batch, Model, ModelError};
use crate::num::{c, Scalar};
use crate::rng::{Rng, SeedStreams};
use crate::synth::{Split, WindowSet};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("cannot resample: {0}")]
    Unsatisfiable(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub neg_pos_ratio: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Draw a fresh negative subsample every epoch.
    pub refresh_resample: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 5e-6,
            neg_pos_ratio: 5,
            epochs: 100,
            batch_size: 64,
            seeds: vec![0, 1, 2],
            refresh_resample: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay < 1.0) {
            return bad("weight_decay must lie in [0, 1)");
        }
        if self.neg_pos_ratio < 1 {
            return bad("neg_pos_ratio must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Keeps every positive in `idx` and at most `ratio ×` as many negatives,
/// drawn without replacement. The result follows the order of `idx`.
pub fn resample(labels: &[usize], idx: &[usize], ratio: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| labels[i] == 1);
    if pos.is_empty() {
        return Err(TrainError::Unsatisfiable("no positive samples".into()));
    }
    let keep = (ratio * pos.len()).min(neg.len());
    let mut chosen: Vec<usize> = neg.choose_multiple(rng, keep).copied().collect();
    chosen.extend(pos);
    let rank: std::collections::HashMap<usize, usize> = idx.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    chosen.sort_by_key(|i| rank[i]);
    Ok(chosen)
}

/// Zero-mean normal draws with variance `2 / (fan_in + fan_out)`.
pub fn xavier_init<T: Scalar>(shape: &[usize], rng: &mut Rng) -> std::result::Result<Tensor<T>, TensorError> {
    let [fan_in, fan_out] = shape else {
        return Err(TensorError::Contract(format!("xavier_init needs a 2-D shape, got {shape:?}")));
    };
    if fan_in + fan_out == 0 {
        return Err(TensorError::Contract("xavier_init on an empty shape".into()));
    }
    let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| c(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Adam with decoupled weight decay: `p ← p·(1 − wd) − lr · m̂ / (√v̂ + ε)`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: T,
    pub weight_decay: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig, params: &[Tensor<T>]) -> Self {
        Self::with(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps, params)
    }

    pub fn with(lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor<T>]) -> Self {
        Self {
            lr: c(lr),
            weight_decay: c(weight_decay),
            beta1: c(beta1),
            beta2: c(beta2),
            eps: c(eps),
            t: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> std::result::Result<(), TensorError> {
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
            }
            let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
            p.update(|i, x| {
                let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *x = *x * (one - wd) - step;
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auprc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best validation score.
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn score_batches<T: Scalar>(model: &Model<T>, windows: &WindowSet, idx: &[usize], chunk: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(idx.len());
    for part in idx.chunks(chunk.max(1)) {
        let b = Batch::from_windows(windows, part, &model.config)?;
        out.extend(model.confidence(&b)?);
    }
    Ok(out)
}

fn mean_loss<T: Scalar>(model: &Model<T>, windows: &WindowSet, idx: &[usize], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for part in idx.chunks(chunk.max(1)) {
        let b = Batch::from_windows(windows, part, &model.config)?;
        let mut tape = Tape::new();
        let (loss, _, _) = model.loss(&mut tape, &b)?;
        total += tape.scalar(loss).to_f64_lossy() * part.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains `model` on the training split of `windows`; keeps the parameters
/// with the best validation AUPRC (validation loss when AUPRC is undefined).
pub fn train<T: Scalar>(mut model: Model<T>, windows: &WindowSet, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let streams = SeedStreams::new(seed).child("train");
    let mut resample_rng = streams.rng("resample");
    let mut shuffle_rng = streams.rng("shuffle");
    let labels: Vec<usize> = windows.samples.iter().map(|s| s.label).collect();
    let train_idx = windows.indices(Split::Train);
    let val_all = windows.indices(Split::Val);
    let val_idx = if val_all.iter().any(|&i| labels[i] == 1) {
        resample(&labels, &val_all, cfg.neg_pos_ratio, &mut streams.rng("val-resample"))?
    } else {
        val_all
    };
    let mut epoch_idx = resample(&labels, &train_idx, cfg.neg_pos_ratio, &mut resample_rng)?;
    let mut opt = AdamW::new(cfg, &model.params.tensors);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let chunk = 512;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.refresh_resample {
            epoch_idx = resample(&labels, &train_idx, cfg.neg_pos_ratio, &mut resample_rng)?;
        }
        let mut order = epoch_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (bi, part) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_windows(windows, part, &model.config)?;
            let mut tape = Tape::new();
            let (loss, _, bound) = model.loss(&mut tape, &batch)?;
            let value = tape.scalar(loss).to_f64_lossy();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("loss = {value}"),
                });
            }
            total += value * part.len() as f64;
            tape.backward(loss).map_err(|e| TrainError::NonFinite {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            model.params.zero_grad();
            tape.accumulate_grads(&bound.vars, &mut model.params.tensors)?;
            opt.step(&mut model.params.tensors).map_err(|e| TrainError::NonFinite {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
        }
        let train_loss = total / order.len() as f64;
        let (val_loss, val_auprc) = if val_idx.is_empty() {
            (None, None)
        } else {
            let scores = score_batches(&model, windows, &val_idx, chunk)?;
            let auprc = metrics::auprc(&scores, &windows.labels(&val_idx)).ok();
            (Some(mean_loss(&model, windows, &val_idx, chunk)?), auprc)
        };
        // Higher is better: AUPRC, else negated loss.
        let score = val_auprc.or(val_loss.map(|l| -l)).unwrap_or(-train_loss);
        log::debug!("epoch {epoch}: train loss {train_loss:.5}, val auprc {val_auprc:?}, val loss {val_loss:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auprc,
        });
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, 0),
    };
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
    })
}

/// Positive confidence for every sample in `idx`.
pub fn predict<T: Scalar>(model: &Model<T>, windows: &WindowSet, idx: &[usize]) -> Result<Vec<f64>> {
    Ok(score_batches(model, windows, idx, 512)?
        .into_iter()
        .map(|v| v.to_f64_lossy())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub auprc: f64,
    pub auroc: f64,
    pub pr_curve: Vec<PrPoint>,
    pub roc_curve: Vec<RocPoint>,
}

impl SeedEval {
    pub fn from_scores(seed: u64, scores: &[f64], labels: &[usize]) -> Result<Self> {
        Ok(Self {
            seed,
            auprc: metrics::auprc(scores, labels)?,
            auroc: metrics::auroc(scores, labels)?,
            pr_curve: metrics::pr_curve(scores, labels)?,
            roc_curve: metrics::roc_curve(scores, labels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub horizon: usize,
    pub n_samples: usize,
    pub n_positive: usize,
    pub positive_fraction: f64,
    /// Expected AUPRC of a random ranking of the evaluated samples.
    pub random_auprc: f64,
    pub mean_auprc: f64,
    pub mean_auroc: f64,
    pub std_auprc: f64,
    pub std_auroc: f64,
    pub seeds: Vec<SeedEval>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn new(model: &str, horizon: usize, labels: &[usize], seeds: Vec<SeedEval>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(TrainError::Config("report needs at least one seed".into()));
        }
        let n_positive = labels.iter().filter(|&&l| l == 1).count();
        if n_positive == 0 || n_positive == labels.len() {
            return Err(MetricError::SingleClass(usize::from(n_positive > 0)).into());
        }
        let (mean_auprc, std_auprc) = mean_std(&seeds.iter().map(|s| s.auprc).collect::<Vec<_>>());
        let (mean_auroc, std_auroc) = mean_std(&seeds.iter().map(|s| s.auroc).collect::<Vec<_>>());
        Ok(Self {
            model: model.to_string(),
            horizon,
            n_samples: labels.len(),
            n_positive,
            positive_fraction: n_positive as f64 / labels.len() as f64,
            random_auprc: metrics::random_auprc_expectation(labels.len(), n_positive),
            mean_auprc,
            mean_auroc,
            std_auprc,
            std_auroc,
            seeds,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `seed,threshold,precision,recall` rows.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("seed,threshold,precision,recall\n");
        for s in &self.seeds {
            for p in &s.pr_curve {
                out.push_str(&format!("{},{},{},{}\n", s.seed, p.threshold, p.precision, p.recall));
            }
        }
        out
    }

    /// `seed,threshold,fpr,tpr` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("seed,threshold,fpr,tpr\n");
        for s in &self.seeds {
            for p in &s.roc_curve {
                let th = p.threshold.map_or_else(|| "inf".to_string(), |t| t.to_string());
                out.push_str(&format!("{},{th},{},{}\n", s.seed, p.fpr, p.tpr));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn resample_counts() {
        let mut rng = Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..110).map(|i| usize::from(i < 10)).collect();
        let idx: Vec<usize> = (0..110).collect();
        let r = resample(&labels, &idx, 5, &mut rng).unwrap();
        assert_eq!(r.iter().filter(|&&i| labels[i] == 1).count(), 10);
        assert_eq!(r.iter().filter(|&&i| labels[i] == 0).count(), 50);
        let short: Vec<usize> = (0..30).collect();
        let r = resample(&labels, &short, 5, &mut rng).unwrap();
        assert_eq!(r, short);
        assert!(matches!(
            resample(&labels, &[20, 21], 5, &mut rng),
            Err(TrainError::Unsatisfiable(_))
        ));
    }

    #[test]
    fn resample_draws_negatives_without_replacement() {
        let labels: Vec<usize> = (0..500).map(|i| usize::from(i % 50 == 0)).collect();
        let idx: Vec<usize> = (0..500).collect();
        for seed in 0..50 {
            let r = resample(&labels, &idx, 3, &mut Rng::seed_from_u64(seed)).unwrap();
            let mut d = r.clone();
            d.dedup();
            assert_eq!(d.len(), r.len());
            assert!(r.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn xavier_variance_and_determinism() {
        let t: Tensor<f64> = xavier_init(&[1000, 1000], &mut Rng::seed_from_u64(3)).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((var / (2.0 / 2000.0) - 1.0).abs() < 0.1);
        let u: Tensor<f64> = xavier_init(&[1000, 1000], &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(t, u);
        assert!(xavier_init::<f64>(&[4], &mut Rng::seed_from_u64(3)).is_err());
    }

    fn with_grad(values: Vec<f64>, grad: Vec<f64>) -> Tensor<f64> {
        let n = values.len();
        let mut t = Tensor::new(vec![n], values).unwrap().requiring_grad();
        t.grad_mut().unwrap().copy_from_slice(&grad);
        t
    }

    #[test]
    fn zero_lr_only_applies_decay() {
        let mut p = vec![with_grad(vec![1.0, -2.0], vec![0.3, 0.7])];
        let mut opt = AdamW::with(0.0, 0.1, 0.9, 0.999, 1e-8, &p);
        opt.step(&mut p).unwrap();
        assert_eq!(p[0].data(), &[0.9, -1.8]);
    }

    #[test]
    fn tiny_lr_without_decay_barely_moves() {
        let mut p = vec![with_grad(vec![1.0, -2.0], vec![0.3, -5.0])];
        let mut opt = AdamW::with(1e-12, 0.0, 0.9, 0.999, 1e-8, &p);
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] - 1.0).abs() < 1e-9);
        assert!((p[0].data()[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn first_adam_step_is_sign_times_lr() {
        // m̂ = g and v̂ = g² after one step, so the move is lr·g/(|g| + ε).
        let mut p = vec![with_grad(vec![0.5, 0.5], vec![2.0, -0.01])];
        let mut opt = AdamW::with(0.1, 0.0, 0.9, 0.999, 1e-8, &p);
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] - 0.4).abs() < 1e-8);
        assert!((p[0].data()[1] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { weight_decay: -1.0, ..Default::default() },
            TrainConfig { neg_pos_ratio: 0, ..Default::default() },
            TrainConfig { seeds: vec![], ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn report_means_and_baseline() {
        let labels = [1, 0, 0, 0];
        let a = SeedEval::from_scores(0, &[0.9, 0.1, 0.2, 0.3], &labels).unwrap();
        let b = SeedEval::from_scores(1, &[0.1, 0.9, 0.2, 0.3], &labels).unwrap();
        let r = EvalReport::new("lstm", 1, &labels, vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(r.mean_auprc, (a.auprc + b.auprc) / 2.0);
        assert_eq!(r.positive_fraction, 0.25);
        assert!(r.pr_csv().lines().count() > 2);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
