//! The surface vision transformer: patch embedding, regression token,
//! positional embedding, pre-norm encoder, task heads, masked patch
//! prediction and the scan-age embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Truncated, Writer};
use crate::error::Result;
use crate::rng::SeedStream;
use crate::tensor::{BatchNormStats, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SITCKPT1";
const FORMAT_VERSION: u32 = 1;

/// Fraction of patches corrupted for masked patch prediction.
pub const MPP_CORRUPT_FRACTION: f64 = 0.5;
/// Shares of corrupted patches replaced by the mask token, swapped with
/// another patch, or kept.
pub const MPP_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

const POS_INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("head mismatch: model has {got:?}, operation needs {expected:?}")]
    HeadMismatch { expected: Head, got: Head },
    #[error("token width {got} does not match patch_dim {expected}")]
    Width { expected: usize, got: usize },
    #[error("sequence has {got} patches, model expects {expected}")]
    PatchCount { expected: usize, got: usize },
    #[error("masked patch prediction needs at least 2 patches, got {0}")]
    TooFewPatches(usize),
    #[error("mask selects no patches")]
    EmptyMask,
    #[error("scan-age embedding is disabled in this model")]
    DeconfoundDisabled,
    #[error("scan age required: model was built with deconfounding")]
    MissingAge,
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint config: {0}")]
    BadConfig(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name:?} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::InvalidConfig(_) => "invalid_config",
            ModelError::HeadMismatch { .. } => "head_mismatch",
            ModelError::Width { .. } => "width",
            ModelError::PatchCount { .. } => "patch_count",
            ModelError::TooFewPatches(_) => "too_few_patches",
            ModelError::EmptyMask => "empty_mask",
            ModelError::DeconfoundDisabled => "deconfound_disabled",
            ModelError::MissingAge => "missing_age",
            ModelError::BadMagic => "bad_magic",
            ModelError::BadVersion(_) => "bad_version",
            ModelError::Truncated => "truncated",
            ModelError::BadConfig(_) => "bad_config",
            ModelError::MissingTensor(_) => "missing_tensor",
            ModelError::TensorShape { .. } => "tensor_shape",
            ModelError::Tensor(e) => e.code(),
        }
    }
}

impl From<Truncated> for ModelError {
    fn from(_: Truncated) -> Self {
        ModelError::Truncated
    }
}

type MResult<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Regression,
    Classification,
    Reconstruction,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiTConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_size: usize,
    pub patch_dim: usize,
    pub num_patches: usize,
    pub dropout_p: f64,
    pub head: Head,
    pub deconfound: bool,
}

impl SiTConfig {
    fn preset(layers: usize, heads: usize, hidden: usize, mlp: usize, patch_dim: usize, n: usize) -> Self {
        Self {
            layers,
            heads,
            hidden,
            mlp_size: mlp,
            patch_dim,
            num_patches: n,
            dropout_p: 0.0,
            head: Head::Regression,
            deconfound: false,
        }
    }

    /// 12 layers, 3 heads, D = 192, MLP 768.
    pub fn tiny(patch_dim: usize, num_patches: usize) -> Self {
        Self::preset(12, 3, 192, 768, patch_dim, num_patches)
    }

    /// 12 layers, 6 heads, D = 384, MLP 1536.
    pub fn small(patch_dim: usize, num_patches: usize) -> Self {
        Self::preset(12, 6, 384, 1536, patch_dim, num_patches)
    }

    /// Desk-scale preset (2 layers, 2 heads, D = 64, MLP 256). Not one of
    /// the published architectures.
    pub fn micro(patch_dim: usize, num_patches: usize) -> Self {
        Self::preset(2, 2, 64, 256, patch_dim, num_patches)
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> MResult<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.patch_dim == 0 {
            return bad("layers, heads, hidden and patch_dim must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden must be divisible by heads");
        }
        if self.mlp_size < self.hidden {
            return bad("mlp_size must be at least hidden");
        }
        if self.num_patches == 0 {
            return bad("num_patches must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        Ok(())
    }

    fn head_out(&self) -> usize {
        match self.head {
            Head::Regression | Head::Classification => 1,
            Head::Reconstruction => self.patch_dim,
        }
    }
}

/// Exact number of scalar parameters, counting the mask token only for the
/// reconstruction head and the age network only when deconfounding.
pub fn param_count(config: &SiTConfig) -> usize {
    let d = config.hidden;
    let linear = |i: usize, o: usize| i * o + o;
    let embed = linear(config.patch_dim, d) + d + (config.num_patches + 1) * d;
    let block = 2 * d + 4 * linear(d, d) + 2 * d + linear(d, config.mlp_size) + linear(config.mlp_size, d);
    let head = linear(d, config.head_out());
    let mut total = embed + config.layers * block + 2 * d + head;
    if config.head == Head::Reconstruction {
        total += d;
    }
    if config.deconfound {
        total += 2 + linear(1, d) + linear(d, d);
    }
    total
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(fan_in)` for weights and biases.
    fn init(fan_in: usize, fan_out: usize, rng: &mut SeedStream) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        let b = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Tensor::param(&[fan_in, fan_out], w).unwrap(),
            bias: Tensor::param(&[fan_out], b).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> MResult<Tensor> {
        Ok(x.matmul(&self.weight)?.add(&self.bias)?)
    }

    fn push(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn init(d: usize) -> Self {
        Self {
            gain: Tensor::param(&[d], vec![1.0; d]).unwrap(),
            bias: Tensor::param(&[d], vec![0.0; d]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> MResult<Tensor> {
        Ok(x.layer_norm(&self.gain, &self.bias)?)
    }

    fn push(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Scan-age network: batch norm then `1 -> D -> D` with a ReLU.
#[derive(Debug, Clone)]
pub struct AgeEmbed {
    pub bn_gain: Tensor,
    pub bn_bias: Tensor,
    pub fc1: Linear,
    pub fc2: Linear,
}

fn trunc_normal(n: usize, std: f64, rng: &mut SeedStream) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// Trainable parameters.
#[derive(Debug, Clone)]
pub struct SiTParams {
    pub patch_embed: Linear,
    pub reg_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub head: Linear,
    pub mask_token: Option<Tensor>,
    pub age: Option<AgeEmbed>,
}

impl SiTParams {
    pub fn init(config: &SiTConfig, rng: &mut SeedStream) -> Self {
        let d = config.hidden;
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::init(d),
                q: Linear::init(d, d, rng),
                k: Linear::init(d, d, rng),
                v: Linear::init(d, d, rng),
                out: Linear::init(d, d, rng),
                ln2: LayerNorm::init(d),
                fc1: Linear::init(d, config.mlp_size, rng),
                fc2: Linear::init(config.mlp_size, d, rng),
            })
            .collect();
        let patch_embed = Linear::init(config.patch_dim, d, rng);
        let reg_token = Tensor::param(&[1, d], trunc_normal(d, POS_INIT_STD, rng)).unwrap();
        let n1 = config.num_patches + 1;
        let pos_embed = Tensor::param(&[n1, d], trunc_normal(n1 * d, POS_INIT_STD, rng)).unwrap();
        let head = Linear::init(d, config.head_out(), rng);
        let mask_token = (config.head == Head::Reconstruction)
            .then(|| Tensor::param(&[1, d], trunc_normal(d, POS_INIT_STD, rng)).unwrap());
        let age = config.deconfound.then(|| AgeEmbed {
            bn_gain: Tensor::param(&[1], vec![1.0]).unwrap(),
            bn_bias: Tensor::param(&[1], vec![0.0]).unwrap(),
            fc1: Linear::init(1, d, rng),
            fc2: Linear::init(d, d, rng),
        });
        Self {
            patch_embed,
            reg_token,
            pos_embed,
            blocks,
            final_ln: LayerNorm::init(d),
            head,
            mask_token,
            age,
        }
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.patch_embed.push("patch_embed", &mut out);
        out.push(("reg_token".into(), self.reg_token.clone()));
        out.push(("pos_embed".into(), self.pos_embed.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            b.ln1.push(&format!("{p}.ln1"), &mut out);
            b.q.push(&format!("{p}.attn.q"), &mut out);
            b.k.push(&format!("{p}.attn.k"), &mut out);
            b.v.push(&format!("{p}.attn.v"), &mut out);
            b.out.push(&format!("{p}.attn.out"), &mut out);
            b.ln2.push(&format!("{p}.ln2"), &mut out);
            b.fc1.push(&format!("{p}.ffn.fc1"), &mut out);
            b.fc2.push(&format!("{p}.ffn.fc2"), &mut out);
        }
        self.final_ln.push("final_ln", &mut out);
        self.head.push("head", &mut out);
        if let Some(m) = &self.mask_token {
            out.push(("mask_token".into(), m.clone()));
        }
        if let Some(a) = &self.age {
            out.push(("age.bn.gain".into(), a.bn_gain.clone()));
            out.push(("age.bn.bias".into(), a.bn_bias.clone()));
            a.fc1.push("age.fc1", &mut out);
            a.fc2.push("age.fc2", &mut out);
        }
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Which patches masked patch prediction corrupts and how.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionPlan {
    /// For each patch, the row of `[embeddings; mask_token]` it takes.
    pub source: Vec<usize>,
    /// True for every selected (corrupted) patch.
    pub mask: Vec<bool>,
    pub masked_count: usize,
    pub swapped_count: usize,
    pub kept_count: usize,
}

impl CorruptionPlan {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Split `total` by `shares` with largest-remainder rounding; ties go to
/// the earlier category.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Choose `round(N/2)` patches uniformly without replacement; of those, 80%
/// take the mask token, 10% another patch's embedding and 10% stay.
pub fn plan_corruption(n: usize, rng: &mut SeedStream) -> MResult<CorruptionPlan> {
    if n < 2 {
        return Err(ModelError::TooFewPatches(n));
    }
    let selected_n = (MPP_CORRUPT_FRACTION * n as f64).round() as usize;
    let counts = largest_remainder(selected_n, &MPP_SPLIT);
    let mut selected = rng.sample_distinct(n, selected_n);
    rng.shuffle(&mut selected);
    let mut source: Vec<usize> = (0..n).collect();
    let mut mask = vec![false; n];
    for (rank, &p) in selected.iter().enumerate() {
        mask[p] = true;
        if rank < counts[0] {
            source[p] = n;
        } else if rank < counts[0] + counts[1] {
            let mut j = rng.index(n - 1);
            if j >= p {
                j += 1;
            }
            source[p] = j;
        }
    }
    Ok(CorruptionPlan {
        source,
        mask,
        masked_count: counts[0],
        swapped_count: counts[1],
        kept_count: counts[2],
    })
}

/// Apply a corruption plan to `N x D` patch embeddings.
pub fn apply_corruption(tokens: &Tensor, mask_token: &Tensor, plan: &CorruptionPlan) -> MResult<Tensor> {
    let stacked = Tensor::concat_rows(&[tokens.clone(), mask_token.clone()])?;
    Ok(stacked.gather_rows(&plan.source)?)
}

/// Corrupt embedded patch tokens (before positional embedding).
pub fn mpp_corrupt(tokens: &Tensor, params: &SiTParams, rng: &mut SeedStream) -> MResult<(Tensor, Vec<bool>)> {
    let mask_token = params.mask_token.as_ref().ok_or(ModelError::HeadMismatch {
        expected: Head::Reconstruction,
        got: Head::Regression,
    })?;
    let n = tokens.shape()[0];
    let plan = plan_corruption(n, rng)?;
    let out = apply_corruption(tokens, mask_token, &plan)?;
    Ok((out, plan.mask))
}

/// Mean squared error over the masked patches only, against the original
/// flattened patch vectors.
pub fn mpp_loss(reconstruction: &Tensor, target: &Tensor, mask: &[bool]) -> MResult<Tensor> {
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let r = reconstruction.gather_rows(&idx)?;
    let t = target.gather_rows(&idx)?;
    Ok(r.mse(&t)?)
}

/// Training or evaluation behaviour of stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Per-sample forward options.
#[derive(Debug, Clone, Default)]
pub struct Inputs<'a> {
    pub corruption: Option<&'a CorruptionPlan>,
    /// `[1, D]` scan-age embedding for this sample.
    pub age_embedding: Option<Tensor>,
}

/// A model instance: configuration, parameters and batch-norm state.
#[derive(Debug, Clone)]
pub struct SiT {
    pub config: SiTConfig,
    pub params: SiTParams,
    pub age_stats: Option<BatchNormStats>,
}

impl SiT {
    pub fn new(config: SiTConfig, rng: &mut SeedStream) -> MResult<Self> {
        config.validate()?;
        let params = SiTParams::init(&config, rng);
        let age_stats = config.deconfound.then(|| BatchNormStats::new(1));
        Ok(Self {
            config,
            params,
            age_stats,
        })
    }

    /// `N x patch_dim` tokens to `(N+1) x D`: projection, optional
    /// corruption, regression token, positional embedding, optional age
    /// embedding on the patch rows, dropout.
    pub fn embed(&self, tokens: &Tensor, inputs: &Inputs<'_>, mode: Mode, rng: &mut SeedStream) -> MResult<Tensor> {
        let s = tokens.shape();
        if s.len() != 2 || s[1] != self.config.patch_dim {
            return Err(ModelError::Width {
                expected: self.config.patch_dim,
                got: *s.last().unwrap(),
            });
        }
        if s[0] != self.config.num_patches {
            return Err(ModelError::PatchCount {
                expected: self.config.num_patches,
                got: s[0],
            });
        }
        let p = &self.params;
        let mut x = p.patch_embed.forward(tokens)?;
        if let Some(plan) = inputs.corruption {
            let mask_token = p.mask_token.as_ref().ok_or(ModelError::HeadMismatch {
                expected: Head::Reconstruction,
                got: self.config.head,
            })?;
            x = apply_corruption(&x, mask_token, plan)?;
        }
        x = Tensor::concat_rows(&[p.reg_token.clone(), x])?;
        x = x.add(&p.pos_embed)?;
        match (&inputs.age_embedding, self.config.deconfound) {
            (Some(a), true) => x = x.add_to_rows(a, 1)?,
            (Some(_), false) => return Err(ModelError::DeconfoundDisabled),
            (None, true) => return Err(ModelError::MissingAge),
            (None, false) => {}
        }
        Ok(x.dropout(self.config.dropout_p, mode.is_train(), rng)?)
    }

    /// Multi-head scaled dot-product self-attention on `T x D`. Returns the
    /// output and, for inspection, each head's attention matrix.
    pub fn attention(&self, block: &Block, x: &Tensor) -> MResult<(Tensor, Vec<Tensor>)> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let qt = block.q.forward(x)?.transpose()?;
        let kt = block.k.forward(x)?.transpose()?;
        let vt = block.v.forward(x)?.transpose()?;
        let mut head_outs = Vec::with_capacity(self.config.heads);
        let mut maps = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let q = qt.slice_rows(a, b)?.transpose()?;
            let k = kt.slice_rows(a, b)?;
            let v = vt.slice_rows(a, b)?.transpose()?;
            let attn = q.matmul(&k)?.scale(scale).softmax()?;
            head_outs.push(attn.matmul(&v)?.transpose()?);
            maps.push(attn);
        }
        let merged = Tensor::concat_rows(&head_outs)?.transpose()?;
        Ok((block.out.forward(&merged)?, maps))
    }

    fn ffn(&self, block: &Block, x: &Tensor, mode: Mode, rng: &mut SeedStream) -> MResult<Tensor> {
        let p = self.config.dropout_p;
        let h = block.fc1.forward(x)?.gelu().dropout(p, mode.is_train(), rng)?;
        Ok(block.fc2.forward(&h)?.dropout(p, mode.is_train(), rng)?)
    }

    /// Pre-norm encoder blocks followed by the final layer norm.
    pub fn encode(&self, tokens: &Tensor, mode: Mode, rng: &mut SeedStream) -> MResult<Tensor> {
        let s = tokens.shape();
        if s.len() != 2 || s[1] != self.config.hidden {
            return Err(ModelError::Width {
                expected: self.config.hidden,
                got: *s.last().unwrap(),
            });
        }
        let mut x = tokens.clone();
        for block in &self.params.blocks {
            let (a, _) = self.attention(block, &block.ln1.forward(&x)?)?;
            x = x.add(&a)?;
            let f = self.ffn(block, &block.ln2.forward(&x)?, mode, rng)?;
            x = x.add(&f)?;
        }
        self.params.final_ln.forward(&x)
    }

    /// Regression/classification: `[1, 1]` from token 0. Reconstruction:
    /// `N x patch_dim` from tokens `1..=N`.
    pub fn head_forward(&self, encoded: &Tensor) -> MResult<Tensor> {
        let rows = encoded.shape()[0];
        let picked = match self.config.head {
            Head::Regression | Head::Classification => encoded.slice_rows(0, 1)?,
            Head::Reconstruction => encoded.slice_rows(1, rows)?,
        };
        self.params.head.forward(&picked)
    }

    pub fn forward(&self, tokens: &Tensor, inputs: &Inputs<'_>, mode: Mode, rng: &mut SeedStream) -> MResult<Tensor> {
        let x = self.embed(tokens, inputs, mode, rng)?;
        let enc = self.encode(&x, mode, rng)?;
        self.head_forward(&enc)
    }

    /// Scan-age embeddings for a batch of ages, `[B, D]`. Training mode
    /// updates the batch-norm running statistics.
    pub fn deconfound_embed(&mut self, ages: &[f64], mode: Mode) -> MResult<Tensor> {
        let age = self.params.age.as_ref().ok_or(ModelError::DeconfoundDisabled)?;
        let stats = self.age_stats.as_mut().ok_or(ModelError::DeconfoundDisabled)?;
        let x = Tensor::new(&[ages.len(), 1], ages.to_vec())?;
        let normed = x.batch_norm_1d(&age.bn_gain, &age.bn_bias, stats, mode.is_train())?;
        let h = age.fc1.forward(&normed)?.relu();
        age.fc2.forward(&h)
    }

    pub fn require_head(&self, head: Head) -> MResult<()> {
        if self.config.head != head {
            return Err(ModelError::HeadMismatch {
                expected: head,
                got: self.config.head,
            });
        }
        Ok(())
    }

    fn named_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.to_vec()))
            .collect();
        if let Some(s) = &self.age_stats {
            out.push(("age.bn.running_mean".into(), vec![1], s.running_mean.clone()));
            out.push(("age.bn.running_var".into(), vec![1], s.running_var.clone()));
        }
        out
    }

    /// Copy every tensor whose name exists in `ckpt` and passes `filter`.
    /// Shapes must agree. Returns the names copied.
    pub fn load_matching(&mut self, ckpt: &Checkpoint, filter: impl Fn(&str) -> bool) -> MResult<Vec<String>> {
        let mut copied = Vec::new();
        for (name, t) in self.params.named() {
            if !filter(&name) {
                continue;
            }
            if let Some(ct) = ckpt.tensor(&name) {
                if ct.shape != t.shape() {
                    return Err(ModelError::TensorShape {
                        name,
                        expected: t.shape().to_vec(),
                        got: ct.shape.clone(),
                    });
                }
                t.set_data(ct.data.clone())?;
                copied.push(name);
            }
        }
        if let Some(stats) = &mut self.age_stats {
            if let (Some(m), Some(v)) = (ckpt.tensor("age.bn.running_mean"), ckpt.tensor("age.bn.running_var")) {
                if filter("age.bn.running_mean") {
                    stats.running_mean = m.data.clone();
                    stats.running_var = v.data.clone();
                }
            }
        }
        Ok(copied)
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            meta,
            tensors: self
                .named_state()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor { name, shape, data })
                .collect(),
        }
    }

    /// Rebuild a model from a checkpoint; every tensor must be present.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> MResult<Self> {
        let mut model = SiT::new(ckpt.meta.model.clone(), &mut SeedStream::new(0))?;
        let copied = model.load_matching(ckpt, |_| true)?;
        for (name, _) in model.params.named() {
            if !copied.contains(&name) {
                return Err(ModelError::MissingTensor(name));
            }
        }
        if model.age_stats.is_some() && ckpt.tensor("age.bn.running_mean").is_none() {
            return Err(ModelError::MissingTensor("age.bn.running_mean".into()));
        }
        Ok(model)
    }
}

/// Everything besides tensors that a checkpoint records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: SiTConfig,
    pub grid_order: Option<u32>,
    pub patch_order: Option<u32>,
    pub channels: Vec<String>,
    pub label_mean: f64,
    pub label_std: f64,
    pub step: u64,
}

impl CheckpointMeta {
    pub fn bare(model: SiTConfig) -> Self {
        Self {
            model,
            grid_order: None,
            patch_order: None,
            channels: Vec::new(),
            label_mean: 0.0,
            label_std: 1.0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_string(&self.meta).expect("meta serializes");
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(json.len() as u64);
        w.bytes(json.as_bytes());
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.u16(t.name.len() as u16);
            w.bytes(t.name.as_bytes());
            w.u8(t.shape.len() as u8);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            for &x in &t.data {
                w.f64(x);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> MResult<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(|_| ModelError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::BadVersion(version));
        }
        let len = r.count(1)?;
        let json = std::str::from_utf8(r.take(len)?).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| ModelError::BadConfig(e.to_string()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| ModelError::Truncated)?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(ModelError::Truncated)?;
            r.ensure(n, 8)?;
            let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self { meta, tensors })
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&binio::read_file(path)?)?)
    }
}
