//! Optimizers, sampling, supervised and masked-patch training loops,
//! metrics and the logistic-regression baseline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GaCategory, Split};
use crate::error::Result;
use crate::geom::Icosphere;
use crate::model::{
    mpp_loss, plan_corruption, Checkpoint, CheckpointMeta, Head, Inputs, Mode, SiT, SiTConfig,
};
use crate::patching::{build_ico_patch_table, extract_sequence, PatchTable};
use crate::resample::{random_augmentation, RotationCache, SurfaceSignal};
use crate::rng::SeedStream;
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_FINETUNE_LR: f64 = 1e-4;
pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_FINETUNE_ITERATIONS: usize = 1000;
pub const VAL_EVERY: usize = 100;
pub const LOGISTIC_TOL: f64 = 1e-6;
pub const LOGISTIC_MAX_STEPS: usize = 10_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("parameter {index}: gradient has {got} entries, parameter has {expected}")]
    ShapeMismatch { index: usize, expected: usize, got: usize },
    #[error("{params} parameters but {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split {0} has no samples")]
    EmptySplit(Split),
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("{len} scores but {labels} labels")]
    LengthMismatch { len: usize, labels: usize },
    #[error("fold {0} has a single class in its train or test part")]
    DegenerateFold(usize),
    #[error("{samples} samples cannot fill {folds} folds")]
    TooFewForFolds { samples: usize, folds: usize },
    #[error("classification label {0} is not 0 or 1")]
    NotBinary(f64),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("model has {got} patches of width {width}, patch table gives {expected} of width {table_width}")]
    TableMismatch {
        expected: usize,
        got: usize,
        table_width: usize,
        width: usize,
    },
}

impl TrainError {
    pub fn code(&self) -> &'static str {
        match self {
            TrainError::InvalidConfig(_) => "invalid_config",
            TrainError::ShapeMismatch { .. } => "shape_mismatch",
            TrainError::CountMismatch { .. } => "count_mismatch",
            TrainError::EmptyDataset => "empty_dataset",
            TrainError::EmptySplit(_) => "empty_split",
            TrainError::SingleClass => "single_class",
            TrainError::LengthMismatch { .. } => "length_mismatch",
            TrainError::DegenerateFold(_) => "degenerate_fold",
            TrainError::TooFewForFolds { .. } => "too_few_for_folds",
            TrainError::NotBinary(_) => "not_binary",
            TrainError::NonFinite { .. } => "non_finite",
            TrainError::TableMismatch { .. } => "table_mismatch",
        }
    }
}

type TResult<T> = std::result::Result<T, TrainError>;

// ---- optimizers -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum,
    Adam,
}

fn check_grads(params: &[Tensor], grads: &[Vec<f64>]) -> TResult<()> {
    if params.len() != grads.len() {
        return Err(TrainError::CountMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(TrainError::ShapeMismatch {
                index: i,
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step(
    params: &[Tensor],
    grads: &[Vec<f64>],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> TResult<()> {
    check_grads(params, grads)?;
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&mut state.velocity) {
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = momentum * *vi + gi;
        }
        p.update_data(|d| d.iter_mut().zip(v.iter()).for_each(|(x, vi)| *x -= lr * vi));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Bias-corrected Adam.
pub fn adam_step(params: &[Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> TResult<()> {
    check_grads(params, grads)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update_data(|d| {
            for j in 0..d.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                d[j] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    Sgd(SgdState),
    Adam(AdamState),
}

// ---- sampling ---------------------------------------------------------------

/// Picks a non-empty gestational-age category uniformly, then a sample
/// uniformly within it.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    groups: Vec<Vec<usize>>,
    rng: SeedStream,
}

impl BalancedSampler {
    /// `members[i]` is the category of candidate `ids[i]`.
    pub fn new(ids: &[usize], members: &[GaCategory], rng: SeedStream) -> TResult<Self> {
        if ids.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let groups = GaCategory::ALL
            .iter()
            .map(|c| {
                ids.iter()
                    .zip(members)
                    .filter(|(_, m)| *m == c)
                    .map(|(&i, _)| i)
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect();
        Ok(Self { groups, rng })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        let g = &self.groups[self.rng.index(self.groups.len())];
        Some(g[self.rng.index(g.len())])
    }
}

/// Balanced or uniform sampling over a fixed candidate list.
#[derive(Debug, Clone)]
pub enum Sampler {
    Uniform { ids: Vec<usize>, rng: SeedStream },
    Balanced(BalancedSampler),
}

impl Iterator for Sampler {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        match self {
            Sampler::Uniform { ids, rng } => Some(ids[rng.index(ids.len())]),
            Sampler::Balanced(b) => b.next(),
        }
    }
}

// ---- metrics ----------------------------------------------------------------

pub fn mae(pred: &[f64], truth: &[f64]) -> TResult<f64> {
    if pred.len() != truth.len() {
        return Err(TrainError::LengthMismatch {
            len: pred.len(),
            labels: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from integer counts, so it is exact.
pub fn auc(scores: &[f64], labels: &[bool]) -> TResult<f64> {
    if scores.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            len: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U statistic
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut p, mut n) = (0u64, 0u64);
        for &k in &order[i..j] {
            if labels[k] {
                p += 1;
            } else {
                n += 1;
            }
        }
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
}

fn standardize_columns(train: &[&Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for x in train {
        for j in 0..d {
            mean[j] += x[j] / n;
        }
    }
    let mut std = vec![0.0; d];
    for x in train {
        for j in 0..d {
            std[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    let std = std.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

/// Logistic regression by full-batch gradient descent.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool]) -> (Vec<f64>, usize) {
    let d = x[0].len();
    let m = x.len() as f64;
    let mut w = vec![0.0; d + 1];
    // Hessian of the mean loss is bounded by (d + 1) / 4 for unit-variance columns.
    let lr = 4.0 / (d as f64 + 1.0);
    for step in 0..LOGISTIC_MAX_STEPS {
        let mut g = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let z = w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let r = (sigmoid(z) - if yi { 1.0 } else { 0.0 }) / m;
            for j in 0..d {
                g[j] += r * xi[j];
            }
            g[d] += r;
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < LOGISTIC_TOL {
            return (w, step);
        }
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= lr * gi);
    }
    (w, LOGISTIC_MAX_STEPS)
}

/// Stratified k-fold cross-validated AUC of a standardized logistic model.
pub fn logistic_baseline(
    features: &[Vec<f64>],
    labels: &[bool],
    folds: usize,
    rng: &mut SeedStream,
) -> TResult<BaselineReport> {
    if features.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            len: features.len(),
            labels: labels.len(),
        });
    }
    if folds < 2 || features.len() < folds {
        return Err(TrainError::TooFewForFolds {
            samples: features.len(),
            folds,
        });
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(TrainError::InvalidConfig("features must share a positive width".into()));
    }
    let mut fold_of = vec![0usize; labels.len()];
    for class in [true, false] {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut ids);
        for (r, &i) in ids.iter().enumerate() {
            fold_of[i] = r % folds;
        }
    }
    let mut fold_aucs = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let has_both = |ids: &[usize]| ids.iter().any(|&i| labels[i]) && ids.iter().any(|&i| !labels[i]);
        if !has_both(&train) || !has_both(&test) {
            return Err(TrainError::DegenerateFold(f));
        }
        let rows: Vec<&Vec<f64>> = train.iter().map(|&i| &features[i]).collect();
        let (mean, std) = standardize_columns(&rows, d);
        let z = |x: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect() };
        let xt: Vec<Vec<f64>> = train.iter().map(|&i| z(&features[i])).collect();
        let yt: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let (w, _) = fit_logistic(&xt, &yt);
        let scores: Vec<f64> = test
            .iter()
            .map(|&i| {
                let x = z(&features[i]);
                w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let yl: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        fold_aucs.push(auc(&scores, &yl)?);
    }
    let mean_auc = fold_aucs.iter().sum::<f64>() / folds as f64;
    Ok(BaselineReport { fold_aucs, mean_auc })
}

// ---- label scaling ----------------------------------------------------------

/// Affine label standardization fitted on the training labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScale {
    pub mean: f64,
    pub std: f64,
}

impl LabelScale {
    pub const IDENTITY: LabelScale = LabelScale { mean: 0.0, std: 1.0 };

    pub fn fit(labels: &[f64]) -> Self {
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn restore(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

// ---- training loops ---------------------------------------------------------

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Rotation angles in degrees; empty disables augmentation.
    pub augmentation: Vec<f64>,
    pub dropout_p: f64,
    pub balanced_sampling: bool,
    pub seed: u64,
    pub val_every: usize,
    /// Worker threads for batch assembly. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::SgdMomentum,
            learning_rate: DEFAULT_LR,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            iterations: DEFAULT_ITERATIONS,
            augmentation: Vec::new(),
            dropout_p: 0.0,
            balanced_sampling: false,
            seed: 0,
            val_every: VAL_EVERY,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TResult<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.val_every == 0 {
            return bad("val_every must be at least 1");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.augmentation.iter().any(|a| !(a.is_finite() && *a > 0.0 && *a <= 360.0)) {
            return bad("augmentation angles must lie in (0, 360]");
        }
        Ok(())
    }

    fn init_state(&self) -> OptState {
        match self.optimizer {
            Optimizer::SgdMomentum => OptState::Sgd(SgdState::default()),
            Optimizer::Adam => OptState::Adam(AdamState {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                ..AdamState::default()
            }),
        }
    }

    fn step(&self, params: &[Tensor], grads: &[Vec<f64>], state: &mut OptState) -> TResult<()> {
        match state {
            OptState::Sgd(s) => sgd_momentum_step(params, grads, s, self.learning_rate, self.momentum),
            OptState::Adam(s) => adam_step(params, grads, s, self.learning_rate),
        }
    }
}

/// One CSV log line: `step,split,metric,value`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.step, self.split, self.metric, self.value)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,split,metric,value\n");
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

/// Shared inputs of a training run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid: Icosphere,
    pub patch_order: u32,
    pub table: PatchTable,
}

impl Setup {
    pub fn new(grid_order: u32, patch_order: u32) -> Result<Self> {
        let grid = Icosphere::new(grid_order);
        let table = build_ico_patch_table(&grid, &Icosphere::new(patch_order))?;
        Ok(Self {
            grid,
            patch_order,
            table,
        })
    }

    pub fn grid_order(&self) -> u32 {
        self.grid.order
    }

    pub fn check_model(&self, config: &SiTConfig, channels: usize) -> TResult<()> {
        let width = self.table.patch_size() * channels;
        if config.num_patches != self.table.patch_count() || config.patch_dim != width {
            return Err(TrainError::TableMismatch {
                expected: self.table.patch_count(),
                got: config.num_patches,
                table_width: width,
                width: config.patch_dim,
            });
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_step: usize,
    pub best_value: f64,
    pub log: Vec<LogRow>,
}

fn assemble_tokens(
    signals: &[&SurfaceSignal],
    rngs: Vec<SeedStream>,
    cache: &RotationCache,
    table: &PatchTable,
    policy: &[f64],
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let one = |s: &SurfaceSignal, mut rng: SeedStream| -> Result<Vec<f64>> {
        let rotated;
        let sig = if policy.is_empty() {
            s
        } else {
            match random_augmentation(&mut rng, policy)? {
                Some(r) => {
                    rotated = cache.rotate_cached(s, r)?;
                    &rotated
                }
                None => s,
            }
        };
        Ok(extract_sequence(sig, table)?.to_f64())
    };
    if threads <= 1 || signals.len() < 2 {
        return signals.iter().zip(rngs).map(|(s, r)| one(s, r)).collect();
    }
    let chunk = signals.len().div_ceil(threads);
    let pairs: Vec<(&SurfaceSignal, SeedStream)> = signals.iter().copied().zip(rngs).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                let one = &one;
                scope.spawn(move || {
                    part.iter()
                        .map(|(s, r)| one(s, r.clone()))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(signals.len());
        for h in handles {
            out.extend(h.join().expect("batch worker panicked")?);
        }
        Ok(out)
    })
}

fn collect_grads(params: &[Tensor]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect()
}

fn is_better(head: Head, candidate: f64, best: f64) -> bool {
    match head {
        Head::Classification => candidate > best,
        _ => candidate < best,
    }
}

/// Everything a supervised or pretraining run reads.
pub struct Job<'a> {
    pub dataset: &'a Dataset,
    pub setup: &'a Setup,
    pub model: SiTConfig,
    pub train: TrainConfig,
    /// Initialize from this checkpoint; everything but the head is copied.
    pub init: Option<&'a Checkpoint>,
}

impl Job<'_> {
    /// The model a run starts from: seeded init, then `init` if given.
    pub fn initial_model(&self) -> Result<SiT> {
        self.build_model(&mut SeedStream::new(self.train.seed).split_named("init"))
    }

    fn build_model(&self, rng: &mut SeedStream) -> Result<SiT> {
        self.train.validate()?;
        let mut cfg = self.model.clone();
        cfg.dropout_p = self.train.dropout_p;
        self.setup.check_model(&cfg, self.dataset.manifest.channels.len())?;
        if self.dataset.manifest.grid_order != self.setup.grid_order() {
            return Err(TrainError::InvalidConfig(format!(
                "dataset grid order {} differs from setup order {}",
                self.dataset.manifest.grid_order,
                self.setup.grid_order()
            ))
            .into());
        }
        let mut model = SiT::new(cfg, rng)?;
        if let Some(ck) = self.init {
            model.load_matching(ck, |n| !n.starts_with("head."))?;
        }
        Ok(model)
    }

    fn meta(&self, model: &SiT, scale: LabelScale, step: usize) -> CheckpointMeta {
        CheckpointMeta {
            model: model.config.clone(),
            grid_order: Some(self.setup.grid_order()),
            patch_order: Some(self.setup.patch_order),
            channels: self.dataset.manifest.channels.clone(),
            label_mean: scale.mean,
            label_std: scale.std,
            step: step as u64,
        }
    }

    fn sampler(&self, ids: &[usize], rng: SeedStream) -> TResult<Sampler> {
        if ids.is_empty() {
            return Err(TrainError::EmptySplit(Split::Train));
        }
        if self.train.balanced_sampling {
            let cats: Vec<GaCategory> = ids
                .iter()
                .map(|&i| self.dataset.manifest.samples[i].ga_category)
                .collect();
            Ok(Sampler::Balanced(BalancedSampler::new(ids, &cats, rng)?))
        } else {
            Ok(Sampler::Uniform {
                ids: ids.to_vec(),
                rng,
            })
        }
    }

    fn cache(&self) -> Result<RotationCache> {
        let mut cache = RotationCache::new(self.setup.grid.clone());
        if !self.train.augmentation.is_empty() {
            cache.warm(&self.train.augmentation)?;
        }
        Ok(cache)
    }
}

fn scan_ages(dataset: &Dataset, ids: &[usize]) -> Result<Vec<f64>> {
    ids.iter()
        .map(|&i| {
            let s = &dataset.manifest.samples[i];
            s.scan_age.ok_or_else(|| {
                TrainError::InvalidConfig(format!("sample {} has no scan age for deconfounding", s.signal)).into()
            })
        })
        .collect()
}

/// Per-sample predictions in label units (weeks, or probabilities for
/// classification) for the given samples.
pub fn predict_many(
    model: &mut SiT,
    scale: LabelScale,
    dataset: &Dataset,
    table: &PatchTable,
    ids: &[usize],
) -> Result<Vec<f64>> {
    let ages = if model.config.deconfound {
        Some(model.deconfound_embed(&scan_ages(dataset, ids)?, Mode::Eval)?)
    } else {
        None
    };
    let mut rng = SeedStream::new(0);
    let mut out = Vec::with_capacity(ids.len());
    for (k, &i) in ids.iter().enumerate() {
        let seq = extract_sequence(&dataset.signals[i], table)?;
        let tokens = Tensor::new(&[seq.patch_count, seq.token_width()], seq.to_f64())?;
        let inputs = Inputs {
            corruption: None,
            age_embedding: match &ages {
                Some(a) => Some(a.slice_rows(k, k + 1)?),
                None => None,
            },
        };
        let y = model.forward(&tokens, &inputs, Mode::Eval, &mut rng)?.item();
        out.push(match model.config.head {
            Head::Classification => sigmoid(y),
            _ => scale.restore(y),
        });
    }
    Ok(out)
}

/// Prediction for one signal in label units. `scan_age` is required when
/// the model uses the scan-age embedding.
pub fn predict_signal(
    model: &mut SiT,
    scale: LabelScale,
    table: &PatchTable,
    signal: &SurfaceSignal,
    scan_age: Option<f64>,
) -> Result<f64> {
    let age_embedding = match (model.config.deconfound, scan_age) {
        (true, Some(a)) => Some(model.deconfound_embed(&[a], Mode::Eval)?),
        (true, None) => return Err(crate::model::ModelError::MissingAge.into()),
        (false, _) => None,
    };
    let seq = extract_sequence(signal, table)?;
    let tokens = Tensor::new(&[seq.patch_count, seq.token_width()], seq.to_f64())?;
    let inputs = Inputs {
        corruption: None,
        age_embedding,
    };
    let y = model.forward(&tokens, &inputs, Mode::Eval, &mut SeedStream::new(0))?.item();
    Ok(match model.config.head {
        Head::Classification => sigmoid(y),
        _ => scale.restore(y),
    })
}

fn binary_labels(dataset: &Dataset, ids: &[usize]) -> TResult<Vec<bool>> {
    ids.iter()
        .map(|&i| {
            let y = dataset.manifest.samples[i].label;
            if y == 0.0 || y == 1.0 {
                Ok(y == 1.0)
            } else {
                Err(TrainError::NotBinary(y))
            }
        })
        .collect()
}

/// Metric of a model on a set of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Mae(f64),
    Auc(f64),
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Mae(_) => "mae",
            Metric::Auc(_) => "auc",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Metric::Mae(v) | Metric::Auc(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    pub ids: Vec<usize>,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
}

fn score(model: &mut SiT, scale: LabelScale, dataset: &Dataset, table: &PatchTable, ids: &[usize]) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let predictions = predict_many(model, scale, dataset, table, ids)?;
    let labels: Vec<f64> = ids.iter().map(|&i| dataset.manifest.samples[i].label).collect();
    let metric = match model.config.head {
        Head::Regression => Metric::Mae(mae(&predictions, &labels)?),
        Head::Classification => Metric::Auc(auc(&predictions, &binary_labels(dataset, ids)?)?),
        Head::Reconstruction => {
            return Err(crate::model::ModelError::HeadMismatch {
                expected: Head::Regression,
                got: Head::Reconstruction,
            }
            .into())
        }
    };
    Ok(EvalReport {
        metric,
        ids: ids.to_vec(),
        predictions,
        labels,
    })
}

/// Evaluate a checkpoint on one split.
pub fn evaluate(dataset: &Dataset, split: Split, ckpt: &Checkpoint) -> Result<EvalReport> {
    let ids = dataset.split(split);
    if ids.is_empty() {
        return Err(TrainError::EmptySplit(split).into());
    }
    let setup = setup_for(ckpt, dataset)?;
    let mut model = SiT::from_checkpoint(ckpt)?;
    let scale = LabelScale {
        mean: ckpt.meta.label_mean,
        std: ckpt.meta.label_std,
    };
    score(&mut model, scale, dataset, &setup.table, &ids)
}

/// Rebuild the grid and patch table a checkpoint was trained with.
pub fn setup_for(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Setup> {
    let grid_order = ckpt.meta.grid_order.unwrap_or(dataset.manifest.grid_order);
    let patch_order = ckpt
        .meta
        .patch_order
        .ok_or_else(|| TrainError::InvalidConfig("checkpoint records no patch order".into()))?;
    let setup = Setup::new(grid_order, patch_order)?;
    setup.check_model(&ckpt.meta.model, ckpt.meta.channels.len().max(1))?;
    Ok(setup)
}

/// Mean-predictor MAE: predict the training-label mean for every sample.
pub fn mean_predictor_mae(dataset: &Dataset, split: Split) -> TResult<f64> {
    let train: Vec<f64> = dataset
        .split(Split::Train)
        .iter()
        .map(|&i| dataset.manifest.samples[i].label)
        .collect();
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let m = train.iter().sum::<f64>() / train.len() as f64;
    let truth: Vec<f64> = dataset
        .split(split)
        .iter()
        .map(|&i| dataset.manifest.samples[i].label)
        .collect();
    mae(&vec![m; truth.len()], &truth)
}

/// Supervised training with a regression (MSE on standardized labels) or
/// classification (binary cross-entropy) head.
pub fn train_supervised(job: &Job<'_>) -> Result<TrainOutcome> {
    let root = SeedStream::new(job.train.seed);
    let mut model = job.build_model(&mut root.split_named("init"))?;
    let head = model.config.head;
    if head == Head::Reconstruction {
        return Err(crate::model::ModelError::HeadMismatch {
            expected: Head::Regression,
            got: head,
        }
        .into());
    }
    let ds = job.dataset;
    let train_ids = ds.split(Split::Train);
    let val_ids = ds.split(Split::Val);
    if val_ids.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val).into());
    }
    let labels: Vec<f64> = train_ids.iter().map(|&i| ds.manifest.samples[i].label).collect();
    let scale = match head {
        Head::Regression => LabelScale::fit(&labels),
        _ => {
            binary_labels(ds, &train_ids)?;
            LabelScale::IDENTITY
        }
    };
    let cache = job.cache()?;
    let mut sampler = job.sampler(&train_ids, root.split_named("sampler"))?;
    let params = model.params.tensors();
    let mut state = job.train.init_state();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let b = job.train.batch_size;
    let aug = root.split_named("augment");
    let drop = root.split_named("dropout");

    for step in 1..=job.train.iterations {
        let ids: Vec<usize> = sampler.by_ref().take(b).collect();
        let signals: Vec<&SurfaceSignal> = ids.iter().map(|&i| &ds.signals[i]).collect();
        let step_aug = aug.split(step as u64);
        let rngs = (0..b).map(|j| step_aug.split(j as u64)).collect();
        let batch = assemble_tokens(&signals, rngs, &cache, &job.setup.table, &job.train.augmentation, job.train.threads)?;
        let ages = if model.config.deconfound {
            Some(model.deconfound_embed(&scan_ages(ds, &ids)?, Mode::Train)?)
        } else {
            None
        };
        let mut drng = drop.split(step as u64);
        let mut total: Option<Tensor> = None;
        for (k, tokens) in batch.into_iter().enumerate() {
            let x = Tensor::new(&[model.config.num_patches, model.config.patch_dim], tokens)?;
            let inputs = Inputs {
                corruption: None,
                age_embedding: match &ages {
                    Some(a) => Some(a.slice_rows(k, k + 1)?),
                    None => None,
                },
            };
            let y = model.forward(&x, &inputs, Mode::Train, &mut drng)?;
            let label = ds.manifest.samples[ids[k]].label;
            let loss = match head {
                Head::Regression => y.mse(&Tensor::new(&[1, 1], vec![scale.standardize(label)])?)?,
                _ => y.bce_with_logits(&Tensor::new(&[1, 1], vec![label])?)?,
            };
            total = Some(match total {
                Some(t) => t.add(&loss)?,
                None => loss,
            });
        }
        let loss = total.expect("batch is non-empty").scale(1.0 / b as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite { step }.into());
        }
        params.iter().for_each(Tensor::zero_grad);
        loss.backward();
        let grads = collect_grads(&params);
        job.train.step(&params, &grads, &mut state)?;
        log.push(LogRow {
            step,
            split: "train",
            metric: "loss",
            value,
        });
        if step % job.train.val_every == 0 || step == job.train.iterations {
            let report = score(&mut model, scale, ds, &job.setup.table, &val_ids)?;
            let v = report.metric.value();
            log.push(LogRow {
                step,
                split: "val",
                metric: report.metric.name(),
                value: v,
            });
            if best.as_ref().is_none_or(|(_, bv, _)| is_better(head, v, *bv)) {
                best = Some((step, v, model.to_checkpoint(job.meta(&model, scale, step))));
            }
        }
    }
    let (best_step, best_value, best_checkpoint) = best.expect("validated at the last step");
    Ok(TrainOutcome {
        final_checkpoint: model.to_checkpoint(job.meta(&model, scale, job.train.iterations)),
        best_checkpoint,
        best_step,
        best_value,
        log,
    })
}

/// Masked-patch-prediction pretraining. The model config must carry the
/// reconstruction head; labels are unused.
pub fn pretrain_mpp(job: &Job<'_>) -> Result<TrainOutcome> {
    let root = SeedStream::new(job.train.seed);
    let model = job.build_model(&mut root.split_named("init"))?;
    model.require_head(Head::Reconstruction)?;
    if model.config.deconfound {
        return Err(TrainError::InvalidConfig("pretraining does not use the scan-age embedding".into()).into());
    }
    let ds = job.dataset;
    let train_ids = ds.split(Split::Train);
    let val_ids = ds.split(Split::Val);
    if val_ids.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val).into());
    }
    let cache = job.cache()?;
    let mut sampler = job.sampler(&train_ids, root.split_named("sampler"))?;
    let params = model.params.tensors();
    let mut state = job.train.init_state();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let b = job.train.batch_size;
    let (n, w) = (model.config.num_patches, model.config.patch_dim);
    let aug = root.split_named("augment");
    let corrupt = root.split_named("mpp");
    let drop = root.split_named("dropout");

    let val_loss = |model: &SiT| -> Result<f64> {
        let mut total = 0.0;
        let vr = root.split_named("mpp-val");
        for (k, &i) in val_ids.iter().enumerate() {
            let seq = extract_sequence(&ds.signals[i], &job.setup.table)?;
            let target = Tensor::new(&[n, w], seq.to_f64())?;
            let plan = plan_corruption(n, &mut vr.split(k as u64))?;
            let inputs = Inputs {
                corruption: Some(&plan),
                age_embedding: None,
            };
            let recon = model.forward(&target, &inputs, Mode::Eval, &mut SeedStream::new(0))?;
            total += mpp_loss(&recon, &target, &plan.mask)?.item();
        }
        Ok(total / val_ids.len() as f64)
    };

    for step in 1..=job.train.iterations {
        let ids: Vec<usize> = sampler.by_ref().take(b).collect();
        let signals: Vec<&SurfaceSignal> = ids.iter().map(|&i| &ds.signals[i]).collect();
        let step_aug = aug.split(step as u64);
        let rngs = (0..b).map(|j| step_aug.split(j as u64)).collect();
        let batch = assemble_tokens(&signals, rngs, &cache, &job.setup.table, &job.train.augmentation, job.train.threads)?;
        let step_mpp = corrupt.split(step as u64);
        let mut drng = drop.split(step as u64);
        let mut total: Option<Tensor> = None;
        let (mut selected, mut seen) = (0usize, 0usize);
        for (k, tokens) in batch.into_iter().enumerate() {
            let target = Tensor::new(&[n, w], tokens)?;
            let plan = plan_corruption(n, &mut step_mpp.split(k as u64))?;
            selected += plan.selected();
            seen += n;
            let inputs = Inputs {
                corruption: Some(&plan),
                age_embedding: None,
            };
            let recon = model.forward(&target, &inputs, Mode::Train, &mut drng)?;
            let loss = mpp_loss(&recon, &target, &plan.mask)?;
            total = Some(match total {
                Some(t) => t.add(&loss)?,
                None => loss,
            });
        }
        let loss = total.expect("batch is non-empty").scale(1.0 / b as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite { step }.into());
        }
        params.iter().for_each(Tensor::zero_grad);
        loss.backward();
        let grads = collect_grads(&params);
        job.train.step(&params, &grads, &mut state)?;
        log.push(LogRow {
            step,
            split: "train",
            metric: "mpp_loss",
            value,
        });
        log.push(LogRow {
            step,
            split: "train",
            metric: "masked_fraction",
            value: selected as f64 / seen as f64,
        });
        if step % job.train.val_every == 0 || step == job.train.iterations {
            let v = val_loss(&model)?;
            log.push(LogRow {
                step,
                split: "val",
                metric: "mpp_loss",
                value: v,
            });
            if best.as_ref().is_none_or(|(_, bv, _)| v < *bv) {
                best = Some((step, v, model.to_checkpoint(job.meta(&model, LabelScale::IDENTITY, step))));
            }
        }
    }
    let (best_step, best_value, best_checkpoint) = best.expect("validated at the last step");
    Ok(TrainOutcome {
        final_checkpoint: model.to_checkpoint(job.meta(&model, LabelScale::IDENTITY, job.train.iterations)),
        best_checkpoint,
        best_step,
        best_value,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Tensor {
        Tensor::param(&[1], vec![x]).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let p = scalar_param(1.0);
        let mut s = SgdState::default();
        sgd_momentum_step(&[p.clone()], &[vec![2.0]], &mut s, 0.1, 0.0).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);

        let p = scalar_param(0.0);
        let mut s = SgdState::default();
        for _ in 0..2 {
            sgd_momentum_step(&[p.clone()], &[vec![1.0]], &mut s, 1.0, 0.9).unwrap();
        }
        assert!((p.item() + 2.9).abs() < 1e-12);

        let p = scalar_param(3.0);
        let mut s = SgdState::default();
        sgd_momentum_step(&[p.clone()], &[vec![0.0]], &mut s, 0.5, 0.9).unwrap();
        assert_eq!(p.item(), 3.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = scalar_param(0.0);
        let err = sgd_momentum_step(&[p.clone()], &[vec![1.0, 2.0]], &mut SgdState::default(), 0.1, 0.0);
        assert_eq!(
            err,
            Err(TrainError::ShapeMismatch {
                index: 0,
                expected: 1,
                got: 2
            })
        );
        assert!(adam_step(&[p], &[], &mut AdamState::default(), 0.1).is_err());
    }

    #[test]
    fn adam_first_step_is_lr() {
        // |dp| = lr * |g| / (|g| + eps), so the gap to lr is lr * eps / |g|
        let lr = 3e-4;
        for g in [-7.0, 10.0, 250.0] {
            let p = scalar_param(0.5);
            adam_step(&[p.clone()], &[vec![g]], &mut AdamState::default(), lr).unwrap();
            assert!(((p.item() - 0.5).abs() - lr).abs() < 1e-12, "g = {g}");
        }
        let p = scalar_param(0.5);
        adam_step(&[p.clone()], &[vec![1e-3]], &mut AdamState::default(), lr).unwrap();
        assert!(((p.item() - 0.5).abs() - lr).abs() <= lr * 1e-8 / 1e-3 * 1.01);
    }

    #[test]
    fn label_scale_round_trip() {
        let s = LabelScale::fit(&[24.0, 30.0, 41.5]);
        for y in [24.0, 41.5, 33.25] {
            assert!((s.restore(s.standardize(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), Err(TrainError::SingleClass));
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        let c = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
