//! Toy Vision Transformer with prompt prepending.
//!
//! Tokens are rows. A block is pre-norm:
//! `z' = z + SA(LN1(z))`, `z'' = z' + FFN(LN2(z'))` with a GELU hidden layer.
//! Prompts occupy the first `n_p` rows of the block input, image tokens the
//! remaining `N_e` rows (CLS first).

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{softmax_in_place, DenseMatrix};
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    /// Patch grid (rows, cols); `N_e = rows * cols + 1`.
    pub patch_grid: (usize, usize),
    /// Values per patch fed to the patch embedding.
    pub patch_dim: usize,
    /// Output classes of the pretraining head.
    pub num_classes: usize,
    /// When false, query/key/value biases are fixed at zero.
    #[serde(default = "default_true")]
    pub attention_bias: bool,
}

fn default_true() -> bool {
    true
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("vit config: {m}")));
        if self.depth == 0 {
            return fail("depth must be at least 1");
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return fail("embed_dim and num_heads must be positive");
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail("embed_dim must be divisible by num_heads");
        }
        if self.ffn_hidden == 0 || self.patch_dim == 0 || self.num_classes == 0 {
            return fail("ffn_hidden, patch_dim and num_classes must be positive");
        }
        if self.patch_grid.0 == 0 || self.patch_grid.1 == 0 {
            return fail("patch grid must be nonempty");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    /// `N_e`, including the class token.
    pub fn token_count(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// Frozen per-block parameters. Weight matrices act on row vectors
/// (`y = x W + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
    pub w_o: DenseMatrix,
    pub b_o: Vec<f64>,
    pub w_ffn_in: DenseMatrix,
    pub b_ffn_in: Vec<f64>,
    pub w_ffn_out: DenseMatrix,
    pub b_ffn_out: Vec<f64>,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl BlockWeights {
    pub fn random(d: usize, hidden: usize, attention_bias: bool, rng: &mut impl Rng) -> Self {
        let bias = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> {
            if attention_bias {
                let normal = Normal::new(0.0, 0.02).unwrap();
                (0..n).map(|_| normal.sample(rng)).collect()
            } else {
                vec![0.0; n]
            }
        };
        Self {
            w_q: xavier_matrix(d, d, rng),
            w_k: xavier_matrix(d, d, rng),
            w_v: xavier_matrix(d, d, rng),
            b_q: bias(rng, d),
            b_k: bias(rng, d),
            b_v: bias(rng, d),
            w_o: xavier_matrix(d, d, rng),
            b_o: vec![0.0; d],
            w_ffn_in: xavier_matrix(d, hidden, rng),
            b_ffn_in: vec![0.0; hidden],
            w_ffn_out: xavier_matrix(hidden, d, rng),
            b_ffn_out: vec![0.0; d],
            ln1: LayerNorm::identity(d),
            ln2: LayerNorm::identity(d),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `(suffix, tensor)` pairs in a fixed order; vectors become single rows.
    pub fn tensors(&self) -> Vec<(&'static str, DenseMatrix)> {
        let v = |x: &[f64]| DenseMatrix::row_vector(x);
        vec![
            ("attn.w_q", self.w_q.clone()),
            ("attn.w_k", self.w_k.clone()),
            ("attn.w_v", self.w_v.clone()),
            ("attn.b_q", v(&self.b_q)),
            ("attn.b_k", v(&self.b_k)),
            ("attn.b_v", v(&self.b_v)),
            ("attn.w_o", self.w_o.clone()),
            ("attn.b_o", v(&self.b_o)),
            ("ffn.w_in", self.w_ffn_in.clone()),
            ("ffn.b_in", v(&self.b_ffn_in)),
            ("ffn.w_out", self.w_ffn_out.clone()),
            ("ffn.b_out", v(&self.b_ffn_out)),
            ("ln1.gamma", v(&self.ln1.gamma)),
            ("ln1.beta", v(&self.ln1.beta)),
            ("ln2.gamma", v(&self.ln2.gamma)),
            ("ln2.beta", v(&self.ln2.beta)),
        ]
    }
}

pub(crate) fn xavier_matrix(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> DenseMatrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
}

/// Linear classifier on the last-layer CLS representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `d x num_classes`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(d: usize, num_classes: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(d, num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &x) in features.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row(i)) {
                *o += x * w;
            }
        }
        out
    }
}

/// Pretrained transformer. Everything except `head` is frozen once built.
#[derive(Debug)]
pub struct FrozenBackbone {
    pub config: VitConfig,
    /// `patch_dim x d`.
    pub patch_embed: DenseMatrix,
    pub patch_bias: Vec<f64>,
    /// `N_e x d`.
    pub pos_embed: DenseMatrix,
    pub cls_token: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    pub head: ClassifierHead,
    forward_passes: AtomicUsize,
}

impl Clone for FrozenBackbone {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            patch_embed: self.patch_embed.clone(),
            patch_bias: self.patch_bias.clone(),
            pos_embed: self.pos_embed.clone(),
            cls_token: self.cls_token.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            forward_passes: AtomicUsize::new(self.forward_count()),
        }
    }
}

impl FrozenBackbone {
    /// Randomly initialised weights (the starting point for pretraining).
    pub fn random(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed, 0);
        let d = config.embed_dim;
        let small = Normal::new(0.0, 0.02).unwrap();
        let patch_embed = xavier_matrix(config.patch_dim, d, &mut rng);
        // Unit-norm position rows: near-empty patches then stay dominated by
        // their position instead of LayerNorm blowing up pixel noise.
        let unit = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let pos_embed = DenseMatrix::from_fn(config.token_count(), d, |_, _| unit.sample(&mut rng));
        let cls_token = (0..d).map(|_| small.sample(&mut rng)).collect();
        let blocks = (0..config.depth)
            .map(|_| BlockWeights::random(d, config.ffn_hidden, config.attention_bias, &mut rng))
            .collect();
        let head = ClassifierHead {
            weight: xavier_matrix(d, config.num_classes, &mut rng),
            bias: vec![0.0; config.num_classes],
        };
        Ok(Self::from_parts(
            config,
            patch_embed,
            vec![0.0; d],
            pos_embed,
            cls_token,
            blocks,
            head,
        ))
    }

    pub fn from_parts(
        config: VitConfig,
        patch_embed: DenseMatrix,
        patch_bias: Vec<f64>,
        pos_embed: DenseMatrix,
        cls_token: Vec<f64>,
        blocks: Vec<BlockWeights>,
        head: ClassifierHead,
    ) -> Self {
        Self {
            config,
            patch_embed,
            patch_bias,
            pos_embed,
            cls_token,
            blocks,
            head,
            forward_passes: AtomicUsize::new(0),
        }
    }

    /// Checks tensor shapes against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.embed_dim;
        let bad = |what: &str| Err(Error::shape("FrozenBackbone", what.to_string()));
        if self.patch_embed.shape() != (c.patch_dim, d) || self.patch_bias.len() != d {
            return bad("patch embedding");
        }
        if self.pos_embed.shape() != (c.token_count(), d) || self.cls_token.len() != d {
            return bad("positional embedding or class token");
        }
        if self.blocks.len() != c.depth {
            return bad("block count");
        }
        for b in &self.blocks {
            let sq = [&b.w_q, &b.w_k, &b.w_v, &b.w_o];
            if sq.iter().any(|m| m.shape() != (d, d))
                || b.w_ffn_in.shape() != (d, c.ffn_hidden)
                || b.w_ffn_out.shape() != (c.ffn_hidden, d)
            {
                return bad("block weights");
            }
        }
        if self.head.weight.rows() != d || self.head.weight.cols() != self.head.bias.len() {
            return bad("head");
        }
        Ok(())
    }

    /// Number of forward invocations since construction or the last reset.
    /// A batched capture counts once.
    pub fn forward_count(&self) -> usize {
        self.forward_passes.load(Ordering::SeqCst)
    }

    pub fn reset_forward_count(&self) {
        self.forward_passes.store(0, Ordering::SeqCst);
    }

    fn count_forward(&self) {
        self.forward_passes.fetch_add(1, Ordering::SeqCst);
    }

    /// Frozen tensors in archive order. The head is listed separately by
    /// [`FrozenBackbone::head_tensors`].
    pub fn frozen_tensors(&self) -> Vec<(String, DenseMatrix)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), self.patch_embed.clone()),
            ("patch_embed.bias".to_string(), DenseMatrix::row_vector(&self.patch_bias)),
            ("pos_embed".to_string(), self.pos_embed.clone()),
            ("cls_token".to_string(), DenseMatrix::row_vector(&self.cls_token)),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (suffix, m) in b.tensors() {
                out.push((format!("blocks.{l}.{suffix}"), m));
            }
        }
        out
    }

    pub fn head_tensors(&self) -> Vec<(String, DenseMatrix)> {
        vec![
            ("head.weight".to_string(), self.head.weight.clone()),
            ("head.bias".to_string(), DenseMatrix::row_vector(&self.head.bias)),
        ]
    }

    /// SHA-256 over every frozen tensor (names, shapes, little-endian values).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.frozen_tensors() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Prompt-free forward over a whole batch, keeping every block's token
    /// input. Counts as a single forward invocation.
    pub fn capture_batch(&self, images: &[DenseMatrix]) -> Result<BatchCapture> {
        if images.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        self.count_forward();
        let depth = self.config.depth;
        let mut block_inputs: Vec<Vec<DenseMatrix>> = vec![Vec::with_capacity(images.len()); depth];
        let mut outputs = Vec::with_capacity(images.len());
        for image in images {
            let mut z = embed(image, self)?;
            for (l, w) in self.blocks.iter().enumerate() {
                block_inputs[l].push(z.clone());
                z = block_forward(&z, w, 0, self.config.num_heads).0;
            }
            outputs.push(z);
        }
        Ok(BatchCapture {
            block_inputs,
            outputs,
        })
    }
}

/// Token activations captured by [`FrozenBackbone::capture_batch`].
#[derive(Debug, Clone)]
pub struct BatchCapture {
    /// `[layer][sample]`, each `N_e x d`; layer 0 holds `E_0`.
    pub block_inputs: Vec<Vec<DenseMatrix>>,
    /// Final-block outputs per sample.
    pub outputs: Vec<DenseMatrix>,
}

impl BatchCapture {
    pub fn embeddings(&self) -> &[DenseMatrix] {
        &self.block_inputs[0]
    }

    pub fn batch_size(&self) -> usize {
        self.outputs.len()
    }
}

/// Which initializer produced a prompt set, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "initializer", rename_all = "kebab-case")]
pub enum Provenance {
    Xavier {
        seed: u64,
    },
    SptRand {
        seed: u64,
    },
    Matching {
        k: usize,
    },
    Orthogonalizing,
    Vipamin {
        k: usize,
        lambda: f64,
        seed: u64,
        batch_digest: String,
    },
    VipaminDeep {
        k: usize,
        lambda: f64,
        seed: u64,
        batch_digest: String,
        layer: usize,
    },
    /// Prompts after training, or loaded from elsewhere.
    Trained,
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Xavier { .. } => "xavier",
            Provenance::SptRand { .. } => "spt-rand",
            Provenance::Matching { .. } => "matching",
            Provenance::Orthogonalizing => "orthogonalizing",
            Provenance::Vipamin { .. } => "vipamin",
            Provenance::VipaminDeep { .. } => "vipamin-deep",
            Provenance::Trained => "trained",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// `N_p x d`.
    pub prompts: DenseMatrix,
    pub provenance: Provenance,
    /// Block index for per-layer (deep) prompts.
    pub deep_layer: Option<usize>,
}

impl PromptSet {
    pub fn new(prompts: DenseMatrix, provenance: Provenance) -> Result<Self> {
        if prompts.rows() == 0 {
            return Err(Error::Parameter("a prompt set needs at least one prompt".into()));
        }
        if !prompts.is_finite() {
            return Err(Error::NonFinite("prompt set"));
        }
        Ok(Self {
            prompts,
            provenance,
            deep_layer: None,
        })
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.deep_layer = Some(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.prompts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.rows() == 0
    }
}

/// Maps an image (`num_patches x patch_dim`) to `E_0` (`N_e x d`).
pub fn embed(image: &DenseMatrix, backbone: &FrozenBackbone) -> Result<DenseMatrix> {
    let c = &backbone.config;
    if image.shape() != (c.num_patches(), c.patch_dim) {
        return Err(Error::shape(
            "embed",
            format!(
                "image is {}x{}, expected {}x{}",
                image.rows(),
                image.cols(),
                c.num_patches(),
                c.patch_dim
            ),
        ));
    }
    let patches = image.matmul(&backbone.patch_embed).add_row_broadcast(&backbone.patch_bias);
    let cls = DenseMatrix::row_vector(&backbone.cls_token);
    Ok(DenseMatrix::vstack(&cls, &patches).add(&backbone.pos_embed))
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: DenseMatrix,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &DenseMatrix, ln: &LayerNorm) -> (DenseMatrix, LayerNormCache) {
    let (n, d) = x.shape();
    let mut normalized = DenseMatrix::zeros(n, d);
    let mut out = DenseMatrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(r);
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            normalized[(i, j)] = xh;
            out[(i, j)] = ln.gamma[j] * xh + ln.beta[j];
        }
    }
    (out, LayerNormCache { normalized, rstd })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// The four blocks of an attention matrix split at row/column `n_p`.
#[derive(Debug, Clone)]
pub struct AttentionBlocks {
    pub s_pp: DenseMatrix,
    pub s_px: DenseMatrix,
    pub s_xp: DenseMatrix,
    pub s_xx: DenseMatrix,
}

impl AttentionBlocks {
    pub fn partition(s: &DenseMatrix, n_p: usize) -> Self {
        let n = s.rows();
        let top = s.slice_rows(0..n_p);
        let bottom = s.slice_rows(n_p..n);
        Self {
            s_pp: top.slice_cols(0..n_p),
            s_px: top.slice_cols(n_p..n),
            s_xp: bottom.slice_cols(0..n_p),
            s_xx: bottom.slice_cols(n_p..n),
        }
    }
}

/// Everything computed inside the attention sub-layer.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    /// Row-stochastic attention per head.
    pub head_attention: Vec<DenseMatrix>,
    /// Head-averaged attention.
    pub attention: DenseMatrix,
    /// Concatenated head outputs before the output projection.
    pub context: DenseMatrix,
    /// Output after the projection.
    pub output: DenseMatrix,
}

impl SelfAttention {
    pub fn blocks(&self, n_p: usize) -> AttentionBlocks {
        AttentionBlocks::partition(&self.attention, n_p)
    }
}

pub(crate) fn head_scores(q: &DenseMatrix, k: &DenseMatrix, h: usize, dh: usize) -> DenseMatrix {
    let n = q.rows();
    let scale = 1.0 / (dh as f64).sqrt();
    let cols = h * dh..(h + 1) * dh;
    let mut s = DenseMatrix::zeros(n, k.rows());
    for i in 0..n {
        let qi = &q.row(i)[cols.clone()];
        for j in 0..k.rows() {
            let kj = &k.row(j)[cols.clone()];
            s[(i, j)] = crate::linalg::dot(qi, kj) * scale;
        }
        softmax_in_place(s.row_mut(i));
    }
    s
}

/// Multi-head self-attention over `z` with per-head scaling `1/sqrt(d/h)`.
pub fn self_attention(z: &DenseMatrix, w: &BlockWeights, num_heads: usize) -> SelfAttention {
    let d = z.cols();
    let dh = d / num_heads;
    let q = z.matmul(&w.w_q).add_row_broadcast(&w.b_q);
    let k = z.matmul(&w.w_k).add_row_broadcast(&w.b_k);
    let v = z.matmul(&w.w_v).add_row_broadcast(&w.b_v);
    let n = z.rows();
    let mut context = DenseMatrix::zeros(n, d);
    let mut attention = DenseMatrix::zeros(n, n);
    let mut head_attention = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let s = head_scores(&q, &k, h, dh);
        let vh = v.slice_cols(h * dh..(h + 1) * dh);
        context.set_cols(h * dh, &s.matmul(&vh));
        attention.add_scaled(&s, 1.0 / num_heads as f64);
        head_attention.push(s);
    }
    let output = context.matmul(&w.w_o).add_row_broadcast(&w.b_o);
    SelfAttention {
        q,
        k,
        v,
        head_attention,
        attention,
        context,
        output,
    }
}

/// Fused single-pathway attention `softmax((Z W_Q + b_Q)(Z W_K + b_K)^T / sqrt(d)) (Z W_V + b_V)`,
/// without head splitting or output projection. This is the value-space
/// map the orthogonalizing initializer and projection energy work in.
pub fn value_space_attention(z: &DenseMatrix, w: &BlockWeights) -> DenseMatrix {
    let q = z.matmul(&w.w_q).add_row_broadcast(&w.b_q);
    let k = z.matmul(&w.w_k).add_row_broadcast(&w.b_k);
    let v = z.matmul(&w.w_v).add_row_broadcast(&w.b_v);
    let s = head_scores(&q, &k, 0, z.cols());
    s.matmul(&v)
}

/// A block's forward intermediates, used by diagnostics and backprop.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    pub n_p: usize,
    /// Block input before LayerNorm.
    pub input: DenseMatrix,
    pub ln1: LayerNormCache,
    /// LN1 output, the input to self-attention.
    pub attn_input: DenseMatrix,
    pub attn: SelfAttention,
    /// `input + SA(LN1(input))`.
    pub residual: DenseMatrix,
    pub ln2: LayerNormCache,
    pub ffn_input: DenseMatrix,
    pub ffn_pre: DenseMatrix,
    pub ffn_act: DenseMatrix,
    pub output: DenseMatrix,
}

impl BlockRecord {
    pub fn attention_blocks(&self) -> AttentionBlocks {
        self.attn.blocks(self.n_p)
    }

    /// Token rows of the block input (pre-LN).
    pub fn token_input(&self) -> DenseMatrix {
        self.input.slice_rows(self.n_p..self.input.rows())
    }

    /// Token rows of the SA input (post-LN).
    pub fn token_attn_input(&self) -> DenseMatrix {
        self.attn_input.slice_rows(self.n_p..self.attn_input.rows())
    }

    pub fn prompt_input(&self) -> DenseMatrix {
        self.input.slice_rows(0..self.n_p)
    }
}

pub fn block_forward(
    z: &DenseMatrix,
    w: &BlockWeights,
    n_p: usize,
    num_heads: usize,
) -> (DenseMatrix, BlockRecord) {
    let (attn_input, ln1) = layer_norm(z, &w.ln1);
    let attn = self_attention(&attn_input, w, num_heads);
    let residual = z.add(&attn.output);
    let (ffn_input, ln2) = layer_norm(&residual, &w.ln2);
    let ffn_pre = ffn_input.matmul(&w.w_ffn_in).add_row_broadcast(&w.b_ffn_in);
    let ffn_act = ffn_pre.map(gelu);
    let ffn_out = ffn_act.matmul(&w.w_ffn_out).add_row_broadcast(&w.b_ffn_out);
    let output = residual.add(&ffn_out);
    let record = BlockRecord {
        n_p,
        input: z.clone(),
        ln1,
        attn_input,
        attn,
        residual,
        ln2,
        ffn_input,
        ffn_pre,
        ffn_act,
        output: output.clone(),
    };
    (output, record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Shallow,
    Deep,
}

/// Prompts fed to [`forward`].
#[derive(Debug, Clone, Copy)]
pub enum PromptInput<'a> {
    None,
    Shallow(&'a DenseMatrix),
    /// One prompt matrix per block.
    Deep(&'a [DenseMatrix]),
}

impl PromptInput<'_> {
    pub fn n_p(&self) -> usize {
        match self {
            PromptInput::None => 0,
            PromptInput::Shallow(p) => p.rows(),
            PromptInput::Deep(ps) => ps.first().map_or(0, |p| p.rows()),
        }
    }

    pub fn mode(&self) -> PromptMode {
        match self {
            PromptInput::Deep(_) => PromptMode::Deep,
            _ => PromptMode::Shallow,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: PromptMode,
    pub n_p: usize,
    pub blocks: Vec<BlockRecord>,
    /// Last-layer CLS representation.
    pub llcr: Vec<f64>,
    pub logits: Vec<f64>,
    /// How many times block inputs had their prompt rows replaced.
    pub prompt_replacements: usize,
}

impl ForwardTrace {
    pub fn final_block(&self) -> &BlockRecord {
        self.blocks.last().expect("trace has at least one block")
    }
}

/// Runs `e0` (with optional prompts) through every block and the given head.
pub fn forward(
    backbone: &FrozenBackbone,
    head: &ClassifierHead,
    e0: &DenseMatrix,
    prompts: PromptInput<'_>,
) -> Result<ForwardTrace> {
    let c = &backbone.config;
    if e0.shape() != (c.token_count(), c.embed_dim) {
        return Err(Error::shape(
            "forward",
            format!("embeddings are {}x{}", e0.rows(), e0.cols()),
        ));
    }
    if head.weight.rows() != c.embed_dim {
        return Err(Error::shape("forward", "head input dimension"));
    }
    let n_p = prompts.n_p();
    match prompts {
        PromptInput::Shallow(p) if p.cols() != c.embed_dim => {
            return Err(Error::shape("forward", "prompt width differs from embed_dim"));
        }
        PromptInput::Deep(ps) => {
            if ps.len() != c.depth {
                return Err(Error::Parameter(format!(
                    "deep prompts for {} layers, backbone has {}",
                    ps.len(),
                    c.depth
                )));
            }
            if ps.iter().any(|p| p.rows() != n_p || p.cols() != c.embed_dim) {
                return Err(Error::Parameter(
                    "every layer's prompt must have identical N_p x d shape".into(),
                ));
            }
        }
        _ => {}
    }
    backbone.count_forward();

    let mut z = match prompts {
        PromptInput::Shallow(p) => DenseMatrix::vstack(p, e0),
        _ => e0.clone(),
    };
    let mut blocks = Vec::with_capacity(c.depth);
    let mut prompt_replacements = 0;
    for (l, w) in backbone.blocks.iter().enumerate() {
        if let PromptInput::Deep(ps) = prompts {
            let tokens = z.slice_rows(z.rows() - c.token_count()..z.rows());
            z = DenseMatrix::vstack(&ps[l], &tokens);
            prompt_replacements += 1;
        }
        let (next, record) = block_forward(&z, w, n_p, c.num_heads);
        blocks.push(record);
        z = next;
    }
    let llcr = z.row(n_p).to_vec();
    let logits = head.logits(&llcr);
    Ok(ForwardTrace {
        mode: prompts.mode(),
        n_p,
        blocks,
        llcr,
        logits,
        prompt_replacements,
    })
}

/// VPT-Shallow forward with the backbone's own head.
pub fn forward_shallow(
    prompts: &PromptSet,
    e0: &DenseMatrix,
    backbone: &FrozenBackbone,
) -> Result<(Vec<f64>, ForwardTrace)> {
    if prompts.deep_layer.is_some() {
        return Err(Error::Parameter("shallow forward given a per-layer prompt set".into()));
    }
    let trace = forward(backbone, &backbone.head, e0, PromptInput::Shallow(&prompts.prompts))?;
    Ok((trace.logits.clone(), trace))
}

/// VPT-Deep forward: block `l` sees `[P_l; X_l]`, and the prompt output rows
/// of each block are discarded.
pub fn forward_deep(
    prompt_layers: &[PromptSet],
    e0: &DenseMatrix,
    backbone: &FrozenBackbone,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let mats: Vec<DenseMatrix> = prompt_layers.iter().map(|p| p.prompts.clone()).collect();
    let trace = forward(backbone, &backbone.head, e0, PromptInput::Deep(&mats))?;
    Ok((trace.logits.clone(), trace))
}

/// Maximum absolute gap between the two sides of the prompt-induced bias
/// identity
/// `S_XP (P W_V) + S_XX (X W_V) = S_XP (P W_V) + diag(1 - S_XP 1) SA(X)`,
/// evaluated per head on the bias-free value path, with `SA(X)` recomputed
/// without prompts.
pub fn prompt_bias_identity_check(record: &BlockRecord, w: &BlockWeights, num_heads: usize) -> f64 {
    let n_p = record.n_p;
    if n_p == 0 {
        return 0.0;
    }
    let z = &record.attn_input;
    let n = z.rows();
    let d = z.cols();
    let dh = d / num_heads;
    let values = z.matmul(&w.w_v);
    let q_x = record.attn.q.slice_rows(n_p..n);
    let k_x = record.attn.k.slice_rows(n_p..n);
    let mut worst: f64 = 0.0;
    for h in 0..num_heads {
        let s = &record.attn.head_attention[h];
        let vh = values.slice_cols(h * dh..(h + 1) * dh);
        let v_p = vh.slice_rows(0..n_p);
        let v_x = vh.slice_rows(n_p..n);
        let blocks = AttentionBlocks::partition(s, n_p);

        let lhs = blocks.s_xp.matmul(&v_p).add(&blocks.s_xx.matmul(&v_x));

        let sa_x = head_scores(&q_x, &k_x, h, dh).matmul(&v_x);
        let mut rhs = blocks.s_xp.matmul(&v_p);
        let mass = blocks.s_xp.row_sums();
        for i in 0..rhs.rows() {
            let scale = 1.0 - mass[i];
            for (r, v) in rhs.row_mut(i).iter_mut().zip(sa_x.row(i)) {
                *r += scale * v;
            }
        }
        worst = worst.max(lhs.max_abs_diff(&rhs));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(depth: usize, d: usize, heads: usize) -> VitConfig {
        VitConfig {
            depth,
            embed_dim: d,
            num_heads: heads,
            ffn_hidden: 2 * d,
            patch_grid: (2, 2),
            patch_dim: 3,
            num_classes: 3,
            attention_bias: true,
        }
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config(0, 4, 2).validate().is_err());
        assert!(tiny_config(1, 5, 2).validate().is_err());
        let c = tiny_config(1, 4, 2);
        c.validate().unwrap();
        assert_eq!(c.token_count(), 5);
    }

    #[test]
    fn embed_cases() {
        let mut bb = FrozenBackbone::random(tiny_config(1, 4, 2), 0).unwrap();
        bb.pos_embed = DenseMatrix::zeros(5, 4);
        bb.patch_bias = vec![0.1, 0.2, 0.3, 0.4];
        let e = embed(&DenseMatrix::zeros(4, 3), &bb).unwrap();
        for i in 1..5 {
            assert_eq!(e.row(i), &[0.1, 0.2, 0.3, 0.4]);
        }
        assert_eq!(e.row(0), bb.cls_token.as_slice());

        // Identity-like patch embedding with zero bias and positions.
        let mut c = tiny_config(1, 3, 1);
        c.patch_dim = 3;
        let mut bb = FrozenBackbone::random(c, 1).unwrap();
        bb.patch_embed = DenseMatrix::identity(3);
        bb.patch_bias = vec![0.0; 3];
        bb.pos_embed = DenseMatrix::zeros(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_rows(&mut rng, 4, 3);
        let e = embed(&img, &bb).unwrap();
        assert_eq!(e.slice_rows(1..5), img);

        assert!(embed(&DenseMatrix::zeros(3, 3), &bb).is_err());
    }

    #[test]
    fn embed_matches_straight_line() {
        let bb = FrozenBackbone::random(tiny_config(1, 4, 2), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_rows(&mut rng, 4, 3);
        let e = embed(&img, &bb).unwrap();
        for t in 0..5 {
            for j in 0..4 {
                let expected = if t == 0 {
                    bb.cls_token[j]
                } else {
                    let mut acc = bb.patch_bias[j];
                    for p in 0..3 {
                        acc += img[(t - 1, p)] * bb.patch_embed[(p, j)];
                    }
                    acc
                } + bb.pos_embed[(t, j)];
                assert!((e[(t, j)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_without_prompts_has_empty_prompt_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = BlockWeights::random(4, 8, true, &mut rng);
        let z = random_rows(&mut rng, 5, 4);
        let sa = self_attention(&z, &w, 2);
        let b = sa.blocks(0);
        assert_eq!(b.s_pp.rows() * b.s_pp.cols(), 0);
        assert_eq!(b.s_px.rows(), 0);
        assert_eq!(b.s_xp.cols(), 0);
        assert_eq!(b.s_xx, sa.attention);
    }

    #[test]
    fn equal_rows_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = BlockWeights::random(4, 8, false, &mut rng);
        let z = DenseMatrix::from_fn(7, 4, |_, j| j as f64 * 0.3 - 0.2);
        let sa = self_attention(&z, &w, 2);
        for v in sa.attention.data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_attention_matches_hand_rolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = BlockWeights::random(2, 4, true, &mut rng);
        let z = random_rows(&mut rng, 3, 2);
        let sa = self_attention(&z, &w, 1);
        // Straight-line oracle.
        let proj = |m: &DenseMatrix, b: &[f64], i: usize| -> [f64; 2] {
            let mut out = [b[0], b[1]];
            for c in 0..2 {
                for r in 0..2 {
                    out[c] += z[(i, r)] * m[(r, c)];
                }
            }
            out
        };
        for i in 0..3 {
            let qi = proj(&w.w_q, &w.b_q, i);
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    let kj = proj(&w.w_k, &w.b_k, j);
                    (qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut ctx = [0.0; 2];
            for j in 0..3 {
                let vj = proj(&w.w_v, &w.b_v, j);
                ctx[0] += e[j] / s * vj[0];
                ctx[1] += e[j] / s * vj[1];
            }
            for c in 0..2 {
                let mut o = w.b_o[c];
                for r in 0..2 {
                    o += ctx[r] * w.w_o[(r, c)];
                }
                assert!((sa.output[(i, c)] - o).abs() < 1e-13);
                assert!((sa.context[(i, c)] - ctx[c]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn residual_identity_when_branches_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = BlockWeights::random(4, 8, true, &mut rng);
        w.w_v = DenseMatrix::zeros(4, 4);
        w.b_v = vec![0.0; 4];
        w.w_o = DenseMatrix::zeros(4, 4);
        w.w_ffn_out = DenseMatrix::zeros(8, 4);
        let z = random_rows(&mut rng, 5, 4);
        let (out, _) = block_forward(&z, &w, 0, 2);
        assert_eq!(out, z);
    }

    #[test]
    fn block_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = BlockWeights::random(4, 8, true, &mut rng);
        let z = random_rows(&mut rng, 6, 4);
        let (out, rec) = block_forward(&z, &w, 2, 2);
        let (n1, _) = layer_norm(&z, &w.ln1);
        let mid = z.add(&self_attention(&n1, &w, 2).output);
        let (n2, _) = layer_norm(&mid, &w.ln2);
        let h = n2.matmul(&w.w_ffn_in).add_row_broadcast(&w.b_ffn_in).map(gelu);
        let expected = mid.add(&h.matmul(&w.w_ffn_out).add_row_broadcast(&w.b_ffn_out));
        assert!(out.max_abs_diff(&expected) < 1e-14);
        for i in 0..6 {
            let sum: f64 = rec.attn.attention.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_prompts_only_renormalize_attention() {
        // With zero prompt rows and no value bias, the prompts contribute no
        // value mass; token outputs follow the bias identity exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = BlockWeights::random(4, 8, false, &mut rng);
        let x = random_rows(&mut rng, 5, 4);
        let z = DenseMatrix::vstack(&DenseMatrix::zeros(2, 4), &x);
        let sa = self_attention(&z, &w, 1);
        let free = self_attention(&x, &w, 1);
        let b = sa.blocks(2);
        let mass = b.s_xp.row_sums();
        let ctx_tokens = sa.context.slice_rows(2..7);
        for i in 0..5 {
            for j in 0..4 {
                let expected = (1.0 - mass[i]) * free.context[(i, j)];
                assert!((ctx_tokens[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prompt_free_forward_matches_unprompted() {
        let bb = FrozenBackbone::random(tiny_config(2, 4, 2), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e0 = embed(&random_rows(&mut rng, 4, 3), &bb).unwrap();
        let a = forward(&bb, &bb.head, &e0, PromptInput::None).unwrap();
        let empty = DenseMatrix::zeros(0, 4);
        let b = forward(&bb, &bb.head, &e0, PromptInput::Shallow(&empty)).unwrap();
        assert_eq!(a.logits, b.logits);
        // Manual chain of blocks.
        let mut z = e0.clone();
        for w in &bb.blocks {
            z = block_forward(&z, w, 0, 2).0;
        }
        assert_eq!(bb.head.logits(z.row(0)), a.logits);
    }

    #[test]
    fn deep_single_layer_equals_shallow() {
        let bb = FrozenBackbone::random(tiny_config(1, 4, 2), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e0 = embed(&random_rows(&mut rng, 4, 3), &bb).unwrap();
        let p = PromptSet::new(random_rows(&mut rng, 3, 4), Provenance::Trained).unwrap();
        let (s, _) = forward_shallow(&p, &e0, &bb).unwrap();
        let (d, trace) = forward_deep(std::slice::from_ref(&p), &e0, &bb).unwrap();
        assert_eq!(s, d);
        assert_eq!(trace.prompt_replacements, 1);
    }

    #[test]
    fn deep_replacement_count_and_shape_checks() {
        let bb = FrozenBackbone::random(tiny_config(3, 4, 2), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let e0 = embed(&random_rows(&mut rng, 4, 3), &bb).unwrap();
        let layers: Vec<PromptSet> = (0..3)
            .map(|l| {
                PromptSet::new(random_rows(&mut rng, 2, 4), Provenance::Trained)
                    .unwrap()
                    .with_layer(l)
            })
            .collect();
        let (_, trace) = forward_deep(&layers, &e0, &bb).unwrap();
        assert_eq!(trace.prompt_replacements, 3);
        for rec in &trace.blocks {
            assert_eq!(rec.output.rows(), rec.input.rows());
        }
        let mut bad = layers.clone();
        bad[1] = PromptSet::new(random_rows(&mut rng, 3, 4), Provenance::Trained).unwrap();
        assert!(forward_deep(&bad, &e0, &bb).is_err());
    }

    #[test]
    fn deep_zero_prompts_follow_identity() {
        let mut c = tiny_config(2, 4, 1);
        c.attention_bias = false;
        let bb = FrozenBackbone::random(c, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let e0 = embed(&random_rows(&mut rng, 4, 3), &bb).unwrap();
        let zeros = vec![DenseMatrix::zeros(2, 4); 2];
        let trace = forward(&bb, &bb.head, &e0, PromptInput::Deep(&zeros)).unwrap();
        for (rec, w) in trace.blocks.iter().zip(&bb.blocks) {
            assert!(prompt_bias_identity_check(rec, w, 1) < 1e-12);
        }
    }

    #[test]
    fn bias_identity_holds_multi_head_and_is_zero_without_prompts() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let w = BlockWeights::random(8, 16, true, &mut rng);
        let z = random_rows(&mut rng, 9, 8);
        let (_, rec) = block_forward(&z, &w, 3, 4);
        assert!(prompt_bias_identity_check(&rec, &w, 4) < 1e-12);
        let (_, rec0) = block_forward(&z, &w, 0, 4);
        assert_eq!(prompt_bias_identity_check(&rec0, &w, 4), 0.0);
    }

    #[test]
    fn forward_counter_and_determinism() {
        let bb = FrozenBackbone::random(tiny_config(2, 4, 2), 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let imgs: Vec<DenseMatrix> = (0..3).map(|_| random_rows(&mut rng, 4, 3)).collect();
        bb.reset_forward_count();
        let cap = bb.capture_batch(&imgs).unwrap();
        assert_eq!(bb.forward_count(), 1);
        assert_eq!(cap.block_inputs.len(), 2);
        assert_eq!(cap.embeddings().len(), 3);
        let bb2 = FrozenBackbone::random(tiny_config(2, 4, 2), 19).unwrap();
        assert_eq!(bb.digest(), bb2.digest());
        let e0 = embed(&imgs[0], &bb).unwrap();
        let a = forward(&bb, &bb.head, &e0, PromptInput::None).unwrap();
        let b = forward(&bb2, &bb2.head, &e0, PromptInput::None).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}
