//! Reverse-mode gradients for the fixed ViT architecture.
//!
//! Every function consumes the intermediates stored in a [`BlockRecord`] /
//! [`ForwardTrace`]; nothing is recomputed. Weight gradients are optional so
//! prompt tuning never materializes them.

use crate::linalg::DenseMatrix;
use crate::vit::{
    gelu_grad, BlockRecord, BlockWeights, ClassifierHead, ForwardTrace, FrozenBackbone,
    LayerNorm, LayerNormCache, PromptMode,
};

/// Zero-valued tensors with the shapes of `w`, used as a gradient buffer.
pub fn zeros_like_block(w: &BlockWeights) -> BlockWeights {
    let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
    let zv = |v: &[f64]| vec![0.0; v.len()];
    BlockWeights {
        w_q: z(&w.w_q),
        w_k: z(&w.w_k),
        w_v: z(&w.w_v),
        b_q: zv(&w.b_q),
        b_k: zv(&w.b_k),
        b_v: zv(&w.b_v),
        w_o: z(&w.w_o),
        b_o: zv(&w.b_o),
        w_ffn_in: z(&w.w_ffn_in),
        b_ffn_in: zv(&w.b_ffn_in),
        w_ffn_out: z(&w.w_ffn_out),
        b_ffn_out: zv(&w.b_ffn_out),
        ln1: LayerNorm {
            gamma: zv(&w.ln1.gamma),
            beta: zv(&w.ln1.beta),
        },
        ln2: LayerNorm {
            gamma: zv(&w.ln2.gamma),
            beta: zv(&w.ln2.beta),
        },
    }
}

fn add_column_sums(acc: &mut [f64], m: &DenseMatrix) {
    for i in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
}

fn layer_norm_backward(
    dy: &DenseMatrix,
    cache: &LayerNormCache,
    ln: &LayerNorm,
    grads: Option<&mut LayerNorm>,
) -> DenseMatrix {
    let (n, d) = dy.shape();
    let mut dx = DenseMatrix::zeros(n, d);
    let mut grads = grads;
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xhat = cache.normalized.row(i);
        let dyi = dy.row(i);
        if let Some(g) = grads.as_deref_mut() {
            for j in 0..d {
                g.gamma[j] += dyi[j] * xhat[j];
                g.beta[j] += dyi[j];
            }
        }
        for j in 0..d {
            dxhat[j] = dyi[j] * ln.gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = r * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    dx
}

/// Backpropagates `d_out` (gradient w.r.t. the block output) to the block
/// input. Weight gradients are accumulated into `grads` when given.
pub fn block_backward(
    rec: &BlockRecord,
    w: &BlockWeights,
    num_heads: usize,
    d_out: &DenseMatrix,
    mut grads: Option<&mut BlockWeights>,
) -> DenseMatrix {
    let d = w.w_q.rows();
    let dh = d / num_heads;

    // FFN branch.
    if let Some(g) = grads.as_deref_mut() {
        g.w_ffn_out.add_scaled(&rec.ffn_act.t_matmul(d_out), 1.0);
        add_column_sums(&mut g.b_ffn_out, d_out);
    }
    let mut d_hidden = d_out.matmul_t(&w.w_ffn_out);
    for (dv, &x) in d_hidden.data_mut().iter_mut().zip(rec.ffn_pre.data()) {
        *dv *= gelu_grad(x);
    }
    if let Some(g) = grads.as_deref_mut() {
        g.w_ffn_in.add_scaled(&rec.ffn_input.t_matmul(&d_hidden), 1.0);
        add_column_sums(&mut g.b_ffn_in, &d_hidden);
    }
    let d_ffn_input = d_hidden.matmul_t(&w.w_ffn_in);
    let d_ln2 = layer_norm_backward(
        &d_ffn_input,
        &rec.ln2,
        &w.ln2,
        grads.as_deref_mut().map(|g| &mut g.ln2),
    );
    let d_residual = d_out.add(&d_ln2);

    // Attention branch.
    if let Some(g) = grads.as_deref_mut() {
        g.w_o.add_scaled(&rec.attn.context.t_matmul(&d_residual), 1.0);
        add_column_sums(&mut g.b_o, &d_residual);
    }
    let d_context = d_residual.matmul_t(&w.w_o);
    let n = rec.input.rows();
    let mut dq = DenseMatrix::zeros(n, d);
    let mut dk = DenseMatrix::zeros(n, d);
    let mut dv = DenseMatrix::zeros(n, d);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..num_heads {
        let cols = h * dh..(h + 1) * dh;
        let s = &rec.attn.head_attention[h];
        let d_ctx_h = d_context.slice_cols(cols.clone());
        let v_h = rec.attn.v.slice_cols(cols.clone());
        let q_h = rec.attn.q.slice_cols(cols.clone());
        let k_h = rec.attn.k.slice_cols(cols.clone());
        let d_s = d_ctx_h.matmul_t(&v_h);
        dv.set_cols(h * dh, &s.t_matmul(&d_ctx_h));
        let mut d_logits = DenseMatrix::zeros(n, n);
        for i in 0..n {
            let srow = s.row(i);
            let drow = d_s.row(i);
            let inner: f64 = srow.iter().zip(drow).map(|(a, b)| a * b).sum();
            for (j, out) in d_logits.row_mut(i).iter_mut().enumerate() {
                *out = srow[j] * (drow[j] - inner) * scale;
            }
        }
        dq.set_cols(h * dh, &d_logits.matmul(&k_h));
        dk.set_cols(h * dh, &d_logits.t_matmul(&q_h));
    }
    if let Some(g) = grads.as_deref_mut() {
        let y = &rec.attn_input;
        g.w_q.add_scaled(&y.t_matmul(&dq), 1.0);
        g.w_k.add_scaled(&y.t_matmul(&dk), 1.0);
        g.w_v.add_scaled(&y.t_matmul(&dv), 1.0);
        add_column_sums(&mut g.b_q, &dq);
        add_column_sums(&mut g.b_k, &dk);
        add_column_sums(&mut g.b_v, &dv);
    }
    let d_attn_input = dq
        .matmul_t(&w.w_q)
        .add(&dk.matmul_t(&w.w_k))
        .add(&dv.matmul_t(&w.w_v));
    let d_ln1 = layer_norm_backward(
        &d_attn_input,
        &rec.ln1,
        &w.ln1,
        grads.as_deref_mut().map(|g| &mut g.ln1),
    );
    d_residual.add(&d_ln1)
}

/// Softmax cross-entropy for one example: `(loss, d loss / d logits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Gradients of one forward trace.
#[derive(Debug, Clone)]
pub struct TraceGrads {
    /// One matrix for shallow prompts, one per block for deep prompts,
    /// none when the trace had no prompts.
    pub prompts: Vec<DenseMatrix>,
    pub head: ClassifierHead,
    /// Gradient w.r.t. the token embeddings `E_0`.
    pub embeddings: DenseMatrix,
    /// Per-block weight gradients, when requested.
    pub blocks: Option<Vec<BlockWeights>>,
}

/// Backpropagates `d_logits` through the head and every block of `trace`.
pub fn trace_backward(
    trace: &ForwardTrace,
    backbone: &FrozenBackbone,
    head: &ClassifierHead,
    d_logits: &[f64],
    want_block_grads: bool,
) -> TraceGrads {
    let c = &backbone.config;
    let d = c.embed_dim;
    let n_p = trace.n_p;
    let n_e = c.token_count();

    let mut d_head = ClassifierHead::zeros(d, head.num_classes());
    for (i, &x) in trace.llcr.iter().enumerate() {
        for (g, dl) in d_head.weight.row_mut(i).iter_mut().zip(d_logits) {
            *g = x * dl;
        }
    }
    d_head.bias.copy_from_slice(d_logits);

    let mut d_z = DenseMatrix::zeros(n_p + n_e, d);
    for (i, o) in d_z.row_mut(n_p).iter_mut().enumerate() {
        *o = crate::linalg::dot(head.weight.row(i), d_logits);
    }

    let mut block_grads: Option<Vec<BlockWeights>> =
        want_block_grads.then(|| backbone.blocks.iter().map(zeros_like_block).collect());
    let mut prompt_grads: Vec<DenseMatrix> = Vec::new();
    for l in (0..backbone.blocks.len()).rev() {
        let g = block_grads.as_mut().map(|v| &mut v[l]);
        let d_in = block_backward(&trace.blocks[l], &backbone.blocks[l], c.num_heads, &d_z, g);
        match trace.mode {
            PromptMode::Deep if n_p > 0 => {
                prompt_grads.push(d_in.slice_rows(0..n_p));
                let mut next = DenseMatrix::zeros(n_p + n_e, d);
                for i in n_p..n_p + n_e {
                    next.row_mut(i).copy_from_slice(d_in.row(i));
                }
                d_z = next;
            }
            _ => d_z = d_in,
        }
    }
    if trace.mode == PromptMode::Deep {
        prompt_grads.reverse();
    } else if n_p > 0 {
        prompt_grads.push(d_z.slice_rows(0..n_p));
    }
    TraceGrads {
        prompts: prompt_grads,
        head: d_head,
        embeddings: d_z.slice_rows(n_p..n_p + n_e),
        blocks: block_grads,
    }
}

/// Every tensor of a block as a mutable slice, in a fixed order.
pub fn block_slices_mut(w: &mut BlockWeights) -> Vec<&mut [f64]> {
    vec![
        w.w_q.data_mut(),
        w.w_k.data_mut(),
        w.w_v.data_mut(),
        &mut w.b_q,
        &mut w.b_k,
        &mut w.b_v,
        w.w_o.data_mut(),
        &mut w.b_o,
        w.w_ffn_in.data_mut(),
        &mut w.b_ffn_in,
        w.w_ffn_out.data_mut(),
        &mut w.b_ffn_out,
        &mut w.ln1.gamma,
        &mut w.ln1.beta,
        &mut w.ln2.gamma,
        &mut w.ln2.beta,
    ]
}

/// Same order as [`block_slices_mut`].
pub fn block_slices(w: &BlockWeights) -> Vec<&[f64]> {
    vec![
        w.w_q.data(),
        w.w_k.data(),
        w.w_v.data(),
        &w.b_q,
        &w.b_k,
        &w.b_v,
        w.w_o.data(),
        &w.b_o,
        w.w_ffn_in.data(),
        &w.b_ffn_in,
        w.w_ffn_out.data(),
        &w.b_ffn_out,
        &w.ln1.gamma,
        &w.ln1.beta,
        &w.ln2.gamma,
        &w.ln2.beta,
    ]
}

/// Gradients of every backbone tensor plus its head (pretraining only).
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub patch_embed: DenseMatrix,
    pub patch_bias: Vec<f64>,
    pub pos_embed: DenseMatrix,
    pub cls_token: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    pub head: ClassifierHead,
}

impl BackboneGrads {
    pub fn zeros(backbone: &FrozenBackbone) -> Self {
        Self {
            patch_embed: DenseMatrix::zeros(backbone.patch_embed.rows(), backbone.patch_embed.cols()),
            patch_bias: vec![0.0; backbone.patch_bias.len()],
            pos_embed: DenseMatrix::zeros(backbone.pos_embed.rows(), backbone.pos_embed.cols()),
            cls_token: vec![0.0; backbone.cls_token.len()],
            blocks: backbone.blocks.iter().map(zeros_like_block).collect(),
            head: ClassifierHead::zeros(backbone.head.weight.rows(), backbone.head.num_classes()),
        }
    }

    /// Same order as [`backbone_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.patch_embed.data(),
            &self.patch_bias,
            self.pos_embed.data(),
            &self.cls_token,
        ];
        for b in &self.blocks {
            out.extend(block_slices(b));
        }
        out.push(self.head.weight.data());
        out.push(&self.head.bias);
        out
    }

    fn scale(&mut self, s: f64) {
        let mut all: Vec<&mut [f64]> = vec![
            self.patch_embed.data_mut(),
            &mut self.patch_bias,
            self.pos_embed.data_mut(),
            &mut self.cls_token,
        ];
        for b in &mut self.blocks {
            all.extend(block_slices_mut(b));
        }
        all.push(self.head.weight.data_mut());
        all.push(&mut self.head.bias);
        for t in all {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Every backbone tensor (and the head) as mutable slices.
pub fn backbone_slices_mut(backbone: &mut FrozenBackbone) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = vec![
        backbone.patch_embed.data_mut(),
        &mut backbone.patch_bias,
        backbone.pos_embed.data_mut(),
        &mut backbone.cls_token,
    ];
    for b in &mut backbone.blocks {
        out.extend(block_slices_mut(b));
    }
    out.push(backbone.head.weight.data_mut());
    out.push(&mut backbone.head.bias);
    out
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

/// Mean cross-entropy of prompt-free classification and its gradient w.r.t.
/// every backbone and head parameter. Returns `(loss, grads, correct)`.
///
/// When the backbone has no attention biases their gradients stay zero so
/// they remain exactly zero under training.
pub fn backbone_loss_and_grads(
    backbone: &FrozenBackbone,
    images: &[&DenseMatrix],
    labels: &[usize],
) -> crate::error::Result<(f64, BackboneGrads, usize)> {
    use crate::error::Error;
    use crate::vit::{embed, forward, PromptInput};
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Parameter("batch must be nonempty with one label per image".into()));
    }
    let classes = backbone.head.num_classes();
    let mut grads = BackboneGrads::zeros(backbone);
    let mut total = 0.0;
    let mut correct = 0;
    for (img, &label) in images.iter().zip(labels) {
        if label >= classes {
            return Err(Error::Parameter(format!("label {label} outside head range {classes}")));
        }
        let e0 = embed(img, backbone)?;
        let trace = forward(backbone, &backbone.head, &e0, PromptInput::None)?;
        let (loss, d_logits) = cross_entropy(&trace.logits, label);
        total += loss;
        correct += usize::from(super::argmax(&trace.logits) == label);
        let g = trace_backward(&trace, backbone, &backbone.head, &d_logits, true);
        grads.head.weight.add_scaled(&g.head.weight, 1.0);
        accumulate(&mut grads.head.bias, &g.head.bias);
        for (acc, b) in grads.blocks.iter_mut().zip(g.blocks.expect("block grads requested")) {
            for (a, v) in block_slices_mut(acc).into_iter().zip(block_slices(&b)) {
                accumulate(a, v);
            }
        }
        let d_e0 = &g.embeddings;
        grads.pos_embed.add_scaled(d_e0, 1.0);
        accumulate(&mut grads.cls_token, d_e0.row(0));
        let d_patches = d_e0.slice_rows(1..d_e0.rows());
        grads.patch_embed.add_scaled(&img.t_matmul(&d_patches), 1.0);
        accumulate(&mut grads.patch_bias, &d_patches.column_sums());
    }
    let n = images.len() as f64;
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    grads.scale(1.0 / n);
    if !backbone.config.attention_bias {
        for b in &mut grads.blocks {
            b.b_q.iter_mut().for_each(|v| *v = 0.0);
            b.b_k.iter_mut().for_each(|v| *v = 0.0);
            b.b_v.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok((loss, grads, correct))
}
