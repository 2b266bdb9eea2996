//! Linear-softmax classifier trained by full-batch gradient descent.
//!
//! Parameters are a `classes x dim` weight matrix and a per-class bias. The
//! flattened parameter order used by gradients is row-major weights followed
//! by the bias vector.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, SeededRng};
use crate::error::{Error, Result};
use crate::model::Classifier;

/// Standard deviation of the Gaussian parameter initialization.
const INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub classes: Vec<usize>,
    pub checkpoint_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: SeededRng,
    /// Epochs (1-based) whose parameters are returned. Empty means the last epoch only.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, l2: f64, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate,
            l2,
            seed: SeededRng::new(seed),
            checkpoints: Vec::new(),
        }
    }

    pub fn with_checkpoints(mut self, checkpoints: Vec<usize>) -> Self {
        self.checkpoints = checkpoints;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config("l2 penalty must be finite and >= 0".into()));
        }
        if let Some(&bad) = self.checkpoints.iter().find(|&&c| c == 0 || c > self.epochs) {
            return Err(Error::Config(format!(
                "checkpoint epoch {bad} outside [1, {}]",
                self.epochs
            )));
        }
        Ok(())
    }

    fn checkpoint_set(&self) -> Vec<usize> {
        let mut c = if self.checkpoints.is_empty() {
            vec![self.epochs]
        } else {
            self.checkpoints.clone()
        };
        c.sort_unstable();
        c.dedup();
        c
    }
}

impl ProxyModel {
    pub fn zeros(classes: &[usize], dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; classes.len()],
            bias: vec![0.0; classes.len()],
            classes: classes.to_vec(),
            checkpoint_epoch: 0,
        }
    }

    fn initialized(classes: &[usize], dim: usize, seed: SeededRng) -> Self {
        let mut m = Self::zeros(classes, dim);
        let mut rng = seed.rng();
        let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
        for row in m.weights.iter_mut() {
            for w in row.iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn param_count(&self) -> usize {
        self.n_classes() * (self.dim() + 1)
    }

    pub fn class_index(&self, label: usize) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.weights.iter().flatten().copied().collect();
        p.extend_from_slice(&self.bias);
        p
    }

    /// Copy of this model with parameters replaced from the flat layout.
    pub fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), self.param_count());
        let dim = self.dim();
        let c = self.n_classes();
        Self {
            weights: (0..c).map(|r| params[r * dim..(r + 1) * dim].to_vec()).collect(),
            bias: params[c * dim..].to_vec(),
            classes: self.classes.clone(),
            checkpoint_epoch: self.checkpoint_epoch,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    fn label_index(&self, z: &Sample) -> Result<usize> {
        let y = z.label.ok_or(Error::UnlabeledSample(z.id))?;
        self.class_index(y)
            .ok_or_else(|| Error::DimensionMismatch(format!("label {y} of sample {} unknown to the model", z.id)))
    }

    fn check_dim(&self, z: &Sample) -> Result<()> {
        if z.features.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "sample {} has {} features, model expects {}",
                z.id,
                z.features.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl Classifier for ProxyModel {
    fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn predict(&self, x: &[f64]) -> usize {
        self.classes[argmax(&self.logits(x))]
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy `-log softmax(m, x)[y]`.
pub fn loss(m: &ProxyModel, z: &Sample) -> Result<f64> {
    m.check_dim(z)?;
    let y = m.label_index(z)?;
    let logits = m.logits(&z.features);
    Ok((log_sum_exp(&logits) - logits[y]).max(0.0))
}

/// Gradient of the per-sample cross-entropy with respect to all parameters,
/// flattened as row-major weights then bias.
pub fn per_sample_gradient(m: &ProxyModel, z: &Sample) -> Result<Vec<f64>> {
    m.check_dim(z)?;
    let y = m.label_index(z)?;
    let mut grad = vec![0.0; m.param_count()];
    accumulate_gradient(m, &z.features, y, 1.0, &mut grad);
    Ok(grad)
}

/// `grad += scale * d loss / d theta` for one sample; returns the loss.
fn accumulate_gradient(m: &ProxyModel, x: &[f64], y: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let dim = m.dim();
    let c = m.n_classes();
    let logits = m.logits(x);
    let lse = log_sum_exp(&logits);
    for r in 0..c {
        let p = (logits[r] - lse).exp();
        let delta = scale * (p - if r == y { 1.0 } else { 0.0 });
        let row = &mut grad[r * dim..(r + 1) * dim];
        for (g, v) in row.iter_mut().zip(x) {
            *g += delta * v;
        }
        grad[c * dim + r] += delta;
    }
    lse - logits[y]
}

/// Arithmetic mean of the per-sample gradients over `d`.
pub fn mean_gradient(m: &ProxyModel, d: &Dataset) -> Result<Vec<f64>> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.name().to_string()));
    }
    d.require_labeled()?;
    let mut total = vec![0.0; m.param_count()];
    for z in d.iter() {
        m.check_dim(z)?;
        let y = m.label_index(z)?;
        accumulate_gradient(m, &z.features, y, 1.0, &mut total);
    }
    let n = d.len() as f64;
    total.iter_mut().for_each(|g| *g /= n);
    Ok(total)
}

/// Largest learning rate for which full-batch descent on the regularized
/// mean cross-entropy is guaranteed not to increase the loss: `1 / L` with
/// `L = 0.5 * mean(|x|^2 + 1) + l2`, a bound on the Hessian's spectral norm
/// (the softmax Jacobian has spectral norm at most 1/2).
pub fn stable_learning_rate(d: &Dataset, l2: f64) -> f64 {
    if d.is_empty() {
        return f64::INFINITY;
    }
    let mean_sq = d
        .iter()
        .map(|s| s.features.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .sum::<f64>()
        / d.len() as f64;
    1.0 / (0.5 * mean_sq + l2)
}

/// How an extra dataset is weighted against the base data in the training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mixing {
    /// Plain mean over the union.
    #[default]
    Pooled,
    /// `(1 - share) * mean(base) + share * mean(extra)`.
    ExtraShare { share: f64 },
}

impl Mixing {
    fn validate(&self) -> Result<()> {
        match *self {
            Mixing::Pooled => Ok(()),
            Mixing::ExtraShare { share } if (0.0..=1.0).contains(&share) => Ok(()),
            Mixing::ExtraShare { share } => Err(Error::Config(format!("extra share {share} outside [0, 1]"))),
        }
    }
}

/// Rows with loss weights summing to one.
struct Batch<'a> {
    rows: Vec<(&'a [f64], usize, f64)>,
}

impl<'a> Batch<'a> {
    fn build(m: &ProxyModel, parts: &[&'a Dataset]) -> Result<Self> {
        Self::mixed(m, parts[0], parts.get(1).copied(), Mixing::Pooled)
    }

    fn mixed(m: &ProxyModel, base: &'a Dataset, extra: Option<&'a Dataset>, mixing: Mixing) -> Result<Self> {
        let extra_len = extra.map_or(0, Dataset::len);
        let total = (base.len() + extra_len).max(1) as f64;
        let (base_w, extra_w) = match mixing {
            _ if extra_len == 0 => (1.0 / base.len().max(1) as f64, 0.0),
            _ if base.is_empty() => (0.0, 1.0 / extra_len as f64),
            Mixing::Pooled => (1.0 / total, 1.0 / total),
            Mixing::ExtraShare { share } => ((1.0 - share) / base.len() as f64, share / extra_len as f64),
        };
        let mut rows = Vec::new();
        for (d, w) in std::iter::once((base, base_w)).chain(extra.map(|e| (e, extra_w))) {
            d.require_labeled()?;
            for z in d.iter() {
                m.check_dim(z)?;
                rows.push((z.features.as_slice(), m.label_index(z)?, w));
            }
        }
        Ok(Self { rows })
    }

    /// Regularized weighted loss and its gradient.
    fn loss_and_gradient(&self, m: &ProxyModel, l2: f64) -> (f64, Vec<f64>) {
        let params = m.params();
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        for &(x, y, w) in &self.rows {
            total += w * accumulate_gradient(m, x, y, w, &mut grad);
        }
        let mut reg = 0.0;
        for (g, p) in grad.iter_mut().zip(&params) {
            *g += l2 * p;
            reg += p * p;
        }
        (total + 0.5 * l2 * reg, grad)
    }

    fn loss(&self, m: &ProxyModel, l2: f64) -> f64 {
        self.loss_and_gradient(m, l2).0
    }
}

/// Runs `epochs` full-batch descent steps from `start`, snapshotting at the
/// requested epochs. Returns the snapshots and the per-epoch loss trace
/// (entry 0 is the loss before the first step).
fn descend(
    start: ProxyModel,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    epoch_offset: usize,
) -> Result<(Vec<ProxyModel>, Vec<f64>)> {
    let checkpoints = cfg.checkpoint_set();
    let mut model = start;
    let mut params = model.params();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut snapshots = Vec::with_capacity(checkpoints.len());
    for epoch in 1..=cfg.epochs {
        let (loss, grad) = batch.loss_and_gradient(&model, cfg.l2);
        if !loss.is_finite() {
            return Err(Error::DivergedTraining(epoch));
        }
        trace.push(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        model = model.with_params(&params);
        model.checkpoint_epoch = epoch_offset + epoch;
        if checkpoints.binary_search(&epoch).is_ok() {
            snapshots.push(model.clone());
        }
    }
    let last = batch.loss(&model, cfg.l2);
    if !last.is_finite() || params.iter().any(|p| !p.is_finite()) {
        return Err(Error::DivergedTraining(cfg.epochs));
    }
    trace.push(last);
    Ok((snapshots, trace))
}

fn require_two_classes(d: &Dataset) -> Result<()> {
    d.require_labeled()?;
    if d.present_classes().len() < 2 {
        return Err(Error::SingleClass(d.name().to_string()));
    }
    Ok(())
}

/// Trains from a seeded initialization; one model per checkpoint epoch, in order.
pub fn train_proxy(d: &Dataset, cfg: &TrainConfig) -> Result<Vec<ProxyModel>> {
    train_proxy_traced(d, cfg).map(|(models, _)| models)
}

/// [`train_proxy`] plus the regularized training loss before each epoch and
/// after the last one.
pub fn train_proxy_traced(d: &Dataset, cfg: &TrainConfig) -> Result<(Vec<ProxyModel>, Vec<f64>)> {
    cfg.validate()?;
    require_two_classes(d)?;
    let init = ProxyModel::initialized(d.classes(), d.dim(), cfg.seed);
    let batch = Batch::build(&init, &[d])?;
    descend(init, &batch, cfg, 0)
}

/// Continues descent from `m` on `base` together with `extra`.
pub fn finetune(m: &ProxyModel, base: &Dataset, extra: &Dataset, cfg: &TrainConfig) -> Result<ProxyModel> {
    finetune_mixed(m, base, extra, Mixing::Pooled, cfg)
}

fn check_compatible(m: &ProxyModel, d: &Dataset) -> Result<()> {
    if d.dim() != m.dim() {
        return Err(Error::DimensionMismatch(format!(
            "dataset `{}` has dim {}, model expects {}",
            d.name(),
            d.dim(),
            m.dim()
        )));
    }
    d.require_labeled()?;
    if let Some(c) = d.present_classes().into_iter().find(|&c| m.class_index(c).is_none()) {
        return Err(Error::DimensionMismatch(format!(
            "class {c} of `{}` is not in the model's label space",
            d.name()
        )));
    }
    Ok(())
}

/// [`finetune`] with an explicit weighting of `extra` against `base`.
pub fn finetune_mixed(
    m: &ProxyModel,
    base: &Dataset,
    extra: &Dataset,
    mixing: Mixing,
    cfg: &TrainConfig,
) -> Result<ProxyModel> {
    cfg.validate()?;
    mixing.validate()?;
    check_compatible(m, base)?;
    check_compatible(m, extra)?;
    let batch = Batch::mixed(m, base, Some(extra), mixing)?;
    let cfg = TrainConfig {
        checkpoints: vec![cfg.epochs],
        ..cfg.clone()
    };
    let (mut snaps, _) = descend(m.clone(), &batch, &cfg, m.checkpoint_epoch)?;
    Ok(snaps.pop().expect("final checkpoint"))
}

/// Trains from scratch on `base` and `extra` under `mixing`; label space is
/// the union of both. Returns the final-epoch model.
pub fn retrain_mixed(base: &Dataset, extra: &Dataset, mixing: Mixing, cfg: &TrainConfig) -> Result<ProxyModel> {
    cfg.validate()?;
    mixing.validate()?;
    let mut classes = base.classes().to_vec();
    classes.extend_from_slice(extra.classes());
    classes.sort_unstable();
    classes.dedup();
    let union = Dataset::concat("union", &[base, extra])?;
    require_two_classes(&union)?;
    let init = ProxyModel::initialized(&classes, base.dim(), cfg.seed);
    let batch = Batch::mixed(&init, base, Some(extra), mixing)?;
    let cfg = TrainConfig {
        checkpoints: vec![cfg.epochs],
        ..cfg.clone()
    };
    let (mut snaps, _) = descend(init, &batch, &cfg, 0)?;
    Ok(snaps.pop().expect("final checkpoint"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::evaluate;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed).rng();
        let normal = Normal::new(0.0, 0.5).unwrap();
        let samples = (0..n)
            .map(|i| {
                let y = i % 2;
                let c = if y == 0 { -2.0 } else { 2.0 };
                let f = vec![c + normal.sample(&mut rng), c + normal.sample(&mut rng)];
                Sample::new(i, f, Some(y))
            })
            .collect();
        Dataset::new("blobs", 2, samples).unwrap()
    }

    fn random_model(rng: &mut impl Rng, classes: usize, dim: usize) -> ProxyModel {
        let cls: Vec<usize> = (0..classes).collect();
        let m = ProxyModel::zeros(&cls, dim);
        let p: Vec<f64> = (0..m.param_count()).map(|_| rng.random_range(-2.0..2.0)).collect();
        m.with_params(&p)
    }

    /// Independent log-sum-exp cross-entropy.
    fn oracle_loss(m: &ProxyModel, x: &[f64], y: usize) -> f64 {
        let mut logits = Vec::new();
        for r in 0..m.n_classes() {
            let mut s = m.bias[r];
            for j in 0..x.len() {
                s += m.weights[r][j] * x[j];
            }
            logits.push(s);
        }
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let mut acc = 0.0;
        for l in &logits {
            acc += (l - mx).exp();
        }
        mx + acc.ln() - logits[y]
    }

    #[test]
    fn loss_of_confident_correct_is_zero() {
        let m = ProxyModel {
            weights: vec![vec![0.0], vec![0.0]],
            bias: vec![0.0, 800.0],
            classes: vec![0, 1],
            checkpoint_epoch: 0,
        };
        let z = Sample::new(0, vec![1.0], Some(1));
        assert!(loss(&m, &z).unwrap().abs() < 1e-12);
        let g = per_sample_gradient(&m, &z).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-9);
    }

    #[test]
    fn uniform_predictor_loss_is_ln_c() {
        for c in 2..6 {
            let cls: Vec<usize> = (0..c).collect();
            let m = ProxyModel::zeros(&cls, 3);
            let z = Sample::new(0, vec![1.0, -2.0, 0.5], Some(c - 1));
            assert!((loss(&m, &z).unwrap() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_matches_oracle() {
        let mut rng = SeededRng::new(17).rng();
        for _ in 0..50 {
            let m = random_model(&mut rng, 3, 4);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = rng.random_range(0..3);
            let z = Sample::new(0, x.clone(), Some(y));
            assert!((loss(&m, &z).unwrap() - oracle_loss(&m, &x, y)).abs() <= 1e-10);
        }
    }

    #[test]
    fn unlabeled_sample_rejected() {
        let m = ProxyModel::zeros(&[0, 1], 1);
        let z = Sample::new(3, vec![1.0], None);
        assert!(matches!(loss(&m, &z), Err(Error::UnlabeledSample(3))));
        assert!(matches!(per_sample_gradient(&m, &z), Err(Error::UnlabeledSample(3))));
    }

    #[test]
    fn identical_samples_identical_gradients() {
        let mut rng = SeededRng::new(3).rng();
        let m = random_model(&mut rng, 3, 2);
        let a = Sample::new(0, vec![0.3, -1.0], Some(2));
        let b = Sample::new(1, vec![0.3, -1.0], Some(2));
        assert_eq!(
            per_sample_gradient(&m, &a).unwrap(),
            per_sample_gradient(&m, &b).unwrap()
        );
    }

    #[test]
    fn mean_gradient_properties() {
        let mut rng = SeededRng::new(8).rng();
        let m = random_model(&mut rng, 3, 2);
        let samples: Vec<Sample> = (0..5)
            .map(|i| {
                Sample::new(
                    i,
                    vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    Some(i % 3),
                )
            })
            .collect();
        let d = Dataset::new("five", 2, samples.clone()).unwrap();
        let mean = mean_gradient(&m, &d).unwrap();
        let mut naive = vec![0.0; m.param_count()];
        for s in &samples {
            let g = per_sample_gradient(&m, s).unwrap();
            for j in 0..naive.len() {
                naive[j] += g[j];
            }
        }
        for j in 0..naive.len() {
            assert!((mean[j] - naive[j] / 5.0).abs() <= 1e-12);
        }

        let single = Dataset::new("one", 2, vec![samples[0].clone()]).unwrap();
        assert_eq!(
            mean_gradient(&m, &single).unwrap(),
            per_sample_gradient(&m, &samples[0]).unwrap()
        );

        let doubled = Dataset::concat("dd", &[&d, &d]).unwrap();
        let md = mean_gradient(&m, &doubled).unwrap();
        for j in 0..mean.len() {
            assert!((md[j] - mean[j]).abs() <= 1e-12);
        }

        assert!(matches!(
            mean_gradient(&m, &Dataset::empty("e", 2, &[0, 1, 2])),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn trains_separable_blobs() {
        let d = blobs(200, 1);
        let cfg = TrainConfig::new(200, 0.5, 1e-3, 7).with_checkpoints(vec![1, 50, 200]);
        let models = train_proxy(&d, &cfg).unwrap();
        assert_eq!(
            models.iter().map(|m| m.checkpoint_epoch).collect::<Vec<_>>(),
            vec![1, 50, 200]
        );
        assert!(evaluate(&models[2], &d).unwrap().accuracy >= 0.95);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let d = blobs(20, 2);
        let cfg = TrainConfig::new(1, 0.0, 0.0, 99);
        let m = train_proxy(&d, &cfg).unwrap().pop().unwrap();
        let init = ProxyModel::initialized(d.classes(), 2, cfg.seed);
        assert_eq!(m.params(), init.params());
    }

    #[test]
    fn single_class_rejected() {
        let samples = (0..4).map(|i| Sample::new(i, vec![i as f64], Some(1))).collect();
        let d = Dataset::new("mono", 1, samples).unwrap();
        assert!(matches!(
            train_proxy(&d, &TrainConfig::new(5, 0.1, 0.0, 0)),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn bad_checkpoints_rejected() {
        let d = blobs(10, 3);
        let cfg = TrainConfig::new(5, 0.1, 0.0, 0).with_checkpoints(vec![6]);
        assert!(matches!(train_proxy(&d, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn loss_non_increasing_under_stable_rate() {
        let d = blobs(100, 4);
        let lr = stable_learning_rate(&d, 0.01);
        let cfg = TrainConfig::new(100, lr, 0.01, 5);
        let (_, trace) = train_proxy_traced(&d, &cfg).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn divergence_detected() {
        let d = blobs(10, 5);
        let cfg = TrainConfig::new(2000, 1e200, 0.0, 0);
        assert!(matches!(train_proxy(&d, &cfg), Err(Error::DivergedTraining(_))));
    }

    #[test]
    fn finetune_noop_and_improvement() {
        let d = blobs(60, 6);
        let m = train_proxy(&d, &TrainConfig::new(30, 0.3, 0.0, 1))
            .unwrap()
            .pop()
            .unwrap();
        let empty = Dataset::empty("none", 2, &[0, 1]);
        let same = finetune(&m, &d, &empty, &TrainConfig::new(5, 0.0, 0.0, 0)).unwrap();
        assert_eq!(same.weights, m.weights);
        assert_eq!(same.bias, m.bias);

        // a sample on the wrong side of the boundary
        let odd = Sample::new(0, vec![2.0, 2.0], Some(0));
        let before = loss(&m, &odd).unwrap();
        assert!(before > 1.0);
        let copies: Vec<Sample> = (0..20).map(|i| Sample::new(i, odd.features.clone(), Some(0))).collect();
        let extra = Dataset::new("odd", 2, copies).unwrap();
        let tuned = finetune(&m, &d, &extra, &TrainConfig::new(25, 0.3, 0.0, 0)).unwrap();
        assert!(loss(&tuned, &odd).unwrap() < before);
    }

    #[test]
    fn finetune_rejects_unknown_class() {
        let d = blobs(10, 7);
        let m = train_proxy(&d, &TrainConfig::new(3, 0.1, 0.0, 1))
            .unwrap()
            .pop()
            .unwrap();
        let extra = Dataset::new("x", 2, vec![Sample::new(0, vec![0.0, 0.0], Some(5))]).unwrap();
        assert!(matches!(
            finetune(&m, &d, &extra, &TrainConfig::new(1, 0.1, 0.0, 0)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = SeededRng::new(21).rng();
        for _ in 0..100 {
            let m = random_model(&mut rng, 4, 3);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-50.0..50.0)).collect();
            let s: f64 = m.probabilities(&x).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = SeededRng::new(2).rng();
        let m = random_model(&mut rng, 3, 2);
        let back: ProxyModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mixing_reduces_to_pooled_and_base_only() {
        let base = blobs(20, 3);
        let extra = blobs(5, 4);
        let cfg = TrainConfig::new(5, 0.2, 0.01, 9);
        let m = train_proxy(&base, &TrainConfig::new(3, 0.2, 0.01, 1))
            .unwrap()
            .pop()
            .unwrap();
        let pooled = finetune(&m, &base, &extra, &cfg).unwrap();
        let share = finetune_mixed(&m, &base, &extra, Mixing::ExtraShare { share: 5.0 / 25.0 }, &cfg).unwrap();
        for (a, b) in pooled.params().iter().zip(share.params()) {
            assert!((a - b).abs() < 1e-12);
        }
        let none = finetune_mixed(&m, &base, &extra, Mixing::ExtraShare { share: 0.0 }, &cfg).unwrap();
        let empty = base.filter("none", |_| false);
        let base_only = finetune(&m, &base, &empty, &cfg).unwrap();
        for (a, b) in none.params().iter().zip(base_only.params()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(finetune_mixed(&m, &base, &extra, Mixing::ExtraShare { share: 1.5 }, &cfg).is_err());
    }

    #[test]
    fn retrain_pooled_matches_train_on_union() {
        let base = blobs(12, 5);
        let extra = blobs(6, 6);
        let cfg = TrainConfig::new(10, 0.3, 0.0, 2);
        let a = retrain_mixed(&base, &extra, Mixing::Pooled, &cfg).unwrap();
        let union = Dataset::concat("u", &[&base, &extra]).unwrap();
        let b = train_proxy(&union, &cfg).unwrap().pop().unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
