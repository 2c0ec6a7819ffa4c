//! Attention machinery: vanilla scaled-dot attention, fix-sparse attention
//! over dilated sub-grids, and noise-guided amplification attention (NAA),
//! where each image token may attend only to the keys its noise-attention
//! row ranked most dissimilar. Also hosts the feature-diffusion oracle used
//! by the verification suite.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Fwd, ParamId, ParamSet, Tape, Tensor};

/// Head/geometry settings shared by both encoder branches at one stage.
#[derive(Clone, Debug)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Top-k ratio for the noise-guided mask, in (0, 1].
    pub top_k_ratio: f64,
    /// Dilated-grid stride for fix-sparse layers.
    pub sparse_stride: usize,
}

/// Number of allowed keys per query row: ceil(ratio * n), at least 1.
/// The tiny epsilon keeps exact products like 0.1 * 30 from rounding up.
pub fn top_k_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Per-head boolean query x key mask with exactly k allowed keys per row.
#[derive(Clone, Debug)]
pub struct NoiseMask {
    allow: Vec<bool>,
    pub heads: usize,
    pub n: usize,
    pub k: usize,
}

impl NoiseMask {
    /// Build from a [heads, N, N] noise-attention tensor by marking, per
    /// query row, the k smallest attention weights (ties to the lower key
    /// index). Purely value-based: no gradient flows through the selection.
    pub fn from_noise_attention(a_noise: &Tensor, ratio: f64) -> Result<Self> {
        if a_noise.rank() != 3 || a_noise.shape()[1] != a_noise.shape()[2] {
            return Err(Error::Shape(format!(
                "noise mask: expected [heads, N, N], got {:?}",
                a_noise.shape()
            )));
        }
        if !(0.0..=1.0).contains(&ratio) || ratio == 0.0 {
            return Err(Error::Value(format!(
                "noise mask: ratio {ratio} outside (0, 1]"
            )));
        }
        let (heads, n) = (a_noise.shape()[0], a_noise.shape()[1]);
        let k = top_k_count(ratio, n);
        let mut allow = vec![false; heads * n * n];
        let data = a_noise.data();
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for h in 0..heads {
            for q in 0..n {
                let row = &data[(h * n + q) * n..(h * n + q + 1) * n];
                order.clear();
                order.extend(0..n);
                if k < n {
                    order.select_nth_unstable_by(k - 1, |&a, &b| {
                        row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b))
                    });
                }
                let out = &mut allow[(h * n + q) * n..(h * n + q + 1) * n];
                for &j in &order[..k] {
                    out[j] = true;
                }
            }
        }
        Ok(NoiseMask { allow, heads, n, k })
    }

    /// Mask allowing every key (k = N).
    pub fn all_true(heads: usize, n: usize) -> Self {
        NoiseMask {
            allow: vec![true; heads * n * n],
            heads,
            n,
            k: n,
        }
    }

    /// The [N, N] allow slice of one head.
    pub fn head(&self, h: usize) -> &[bool] {
        &self.allow[h * self.n * self.n..(h + 1) * self.n * self.n]
    }

    pub fn allowed_in_row(&self, h: usize, q: usize) -> usize {
        self.head(h)[q * self.n..(q + 1) * self.n]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

/// Single-head mask over an [N, N] attention matrix (row-stochastic input).
pub fn topk_dissimilar_mask(a_noise: &Tensor, ratio: f64) -> Result<NoiseMask> {
    if a_noise.rank() != 2 {
        return Err(Error::Shape(format!(
            "topk_dissimilar_mask: expected [N, N], got {:?}",
            a_noise.shape()
        )));
    }
    let n = a_noise.shape()[0];
    let lifted = Tensor::new(vec![1, n, a_noise.shape()[1]], a_noise.data().to_vec())?;
    NoiseMask::from_noise_attention(&lifted, ratio)
}

/// Row-stochastic attention matrix Softmax(Q K^T / sqrt(d)).
pub fn attention_matrix(tape: &mut Tape, q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = *q
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("attention_matrix: scalar q".into()))?;
    if k.shape().last() != Some(&d) {
        return Err(Error::Shape(format!(
            "attention_matrix: q {:?} and k {:?} widths differ",
            q.shape(),
            k.shape()
        )));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&logits, 1.0 / (d as f32).sqrt());
    tape.softmax_lastdim(&scaled, None)
}

/// Masked scaled-dot attention for one head: disallowed logits are dropped
/// before the softmax, so each output row is a convex combination of the
/// allowed value rows. `allow` is the head's [N, N] slice.
pub fn masked_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    allow: Option<&[bool]>,
) -> Result<Tensor> {
    let d = *q
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("masked_attention: scalar q".into()))?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&logits, 1.0 / (d as f32).sqrt());
    let attn = match allow {
        Some(a) => tape.softmax_allow_mask(&scaled, a)?,
        None => tape.softmax_lastdim(&scaled, None)?,
    };
    tape.matmul(&attn, v)
}

/// The literal reading of the masked-attention formula: softmax over the
/// full row first, then zero out disallowed entries (rows no longer sum
/// to 1). Kept behind this function for comparison experiments.
pub fn masked_attention_post_softmax(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    allow: &[bool],
) -> Result<Tensor> {
    let d = *q
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("masked_attention: scalar q".into()))?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&logits, 1.0 / (d as f32).sqrt());
    let attn = tape.softmax_lastdim(&scaled, None)?;
    let gate = Tensor::from_fn(attn.shape().to_vec(), |i| if allow[i] { 1.0 } else { 0.0 });
    let gated = tape.mul(&attn, &gate)?;
    tape.matmul(&gated, v)
}

/// Noise-guided amplification attention for one head, with the residual
/// addition of the layer input: out = residual + MaskedAttn(Q, K) V.
pub fn naa_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &NoiseMask,
    head: usize,
    residual: &Tensor,
) -> Result<Tensor> {
    if mask.k < 1 {
        return Err(Error::Value("naa_attention: mask cardinality k must be >= 1".into()));
    }
    let out = masked_attention(tape, q, k, v, Some(mask.head(head)))?;
    tape.add(residual, &out)
}

/// Group membership for a dilated-grid partition: token (r, c) of an
/// h x w grid joins group (r % stride, c % stride). Returns each group's
/// token indices (row-major within the group) followed by the inverse
/// permutation used to scatter results back.
pub fn dilated_groups(h: usize, w: usize, stride: usize) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Config(format!(
            "fix-sparse: token grid {h}x{w} not divisible by stride {stride}"
        )));
    }
    let mut groups = Vec::with_capacity(stride * stride);
    for gr in 0..stride {
        for gc in 0..stride {
            let mut idx = Vec::with_capacity((h / stride) * (w / stride));
            for r in (gr..h).step_by(stride) {
                for c in (gc..w).step_by(stride) {
                    idx.push(r * w + c);
                }
            }
            groups.push(idx);
        }
    }
    let mut inverse = vec![0usize; h * w];
    let mut pos = 0usize;
    for g in &groups {
        for &t in g {
            inverse[t] = pos;
            pos += 1;
        }
    }
    Ok((groups, inverse))
}

/// Dense self-attention run independently inside each dilated sub-grid,
/// with outputs scattered back to their original token positions.
/// Heads are column slices of `x`; q = k = v = the head's features.
pub fn fix_sparse_attention(
    tape: &mut Tape,
    x: &Tensor,
    grid: (usize, usize),
    stride: usize,
    heads: usize,
) -> Result<Tensor> {
    let (h, w) = grid;
    let n = x.shape()[0];
    if n != h * w {
        return Err(Error::Shape(format!(
            "fix-sparse: {n} tokens do not fill a {h}x{w} grid"
        )));
    }
    let dim = x.shape()[1];
    if dim % heads != 0 {
        return Err(Error::Config(format!(
            "fix-sparse: width {dim} not divisible by {heads} heads"
        )));
    }
    grouped_attention(tape, x, x, x, grid, stride, heads)
}

/// The projected-tensor form of fix-sparse attention used inside encoder
/// layers: q, k, v are [N, dim] with `heads` column slices each.
pub fn grouped_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grid: (usize, usize),
    stride: usize,
    heads: usize,
) -> Result<Tensor> {
    let (h, w) = grid;
    let (groups, inverse) = dilated_groups(h, w, stride)?;
    let dim = q.shape()[1];
    let dh = dim / heads;
    let mut group_outputs = Vec::with_capacity(groups.len());
    for idx in &groups {
        let qg = tape.gather_rows(q, idx)?;
        let kg = tape.gather_rows(k, idx)?;
        let vg = tape.gather_rows(v, idx)?;
        let mut head_outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(&qg, hd * dh, dh)?;
            let kh = tape.slice_cols(&kg, hd * dh, dh)?;
            let vh = tape.slice_cols(&vg, hd * dh, dh)?;
            head_outs.push(masked_attention(tape, &qh, &kh, &vh, None)?);
        }
        group_outputs.push(tape.concat_cols(&head_outs)?);
    }
    let stacked = tape.concat_rows(&group_outputs)?;
    tape.gather_rows(&stacked, &inverse)
}

/// Which attention pattern a multi-head layer runs.
pub enum AttnMode<'m> {
    Vanilla,
    FixSparse { grid: (usize, usize), stride: usize },
    Naa { mask: &'m NoiseMask, post_softmax: bool },
}

/// Multi-head attention with learned Q/K/V/output projections. The
/// per-head pattern (vanilla, fix-sparse or NAA) is chosen per call.
pub struct MultiHead {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHead {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "multihead {name}: width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHead {
            wq: ps.add_linear_weight(&format!("{name}.q_proj.w"), dim, dim, rng)?,
            bq: ps.add(&format!("{name}.q_proj.b"), Tensor::zeros(vec![dim]))?,
            wk: ps.add_linear_weight(&format!("{name}.k_proj.w"), dim, dim, rng)?,
            bk: ps.add(&format!("{name}.k_proj.b"), Tensor::zeros(vec![dim]))?,
            wv: ps.add_linear_weight(&format!("{name}.v_proj.w"), dim, dim, rng)?,
            bv: ps.add(&format!("{name}.v_proj.b"), Tensor::zeros(vec![dim]))?,
            wo: ps.add_linear_weight(&format!("{name}.out_proj.w"), dim, dim, rng)?,
            bo: ps.add(&format!("{name}.out_proj.b"), Tensor::zeros(vec![dim]))?,
            heads,
            dim,
        })
    }

    fn project(&self, fw: &mut Fwd, x: &Tensor, w: ParamId, b: ParamId) -> Result<Tensor> {
        let wt = fw.p(w);
        let bt = fw.p(b);
        let y = fw.tape.matmul(x, &wt)?;
        fw.tape.add_bias(&y, &bt)
    }

    /// Full multi-head pass; `export_attn` additionally returns each head's
    /// post-softmax attention matrix (used by the noise branch's last layer).
    pub fn forward(
        &self,
        fw: &mut Fwd,
        x: &Tensor,
        mode: &AttnMode,
        export_attn: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let n = x.shape()[0];
        let q = self.project(fw, x, self.wq, self.bq)?;
        let k = self.project(fw, x, self.wk, self.bk)?;
        let v = self.project(fw, x, self.wv, self.bv)?;
        let dh = self.dim / self.heads;

        let mut exported: Vec<f32> = Vec::new();
        let merged = match mode {
            AttnMode::FixSparse { grid, stride } => {
                grouped_attention(fw.tape, &q, &k, &v, *grid, *stride, self.heads)?
            }
            _ => {
                let mut head_outs = Vec::with_capacity(self.heads);
                for hd in 0..self.heads {
                    let qh = fw.tape.slice_cols(&q, hd * dh, dh)?;
                    let kh = fw.tape.slice_cols(&k, hd * dh, dh)?;
                    let vh = fw.tape.slice_cols(&v, hd * dh, dh)?;
                    let out = match mode {
                        AttnMode::Vanilla => {
                            let attn = attention_matrix(fw.tape, &qh, &kh)?;
                            if export_attn {
                                exported.extend_from_slice(attn.data());
                            }
                            fw.tape.matmul(&attn, &vh)?
                        }
                        AttnMode::Naa { mask, post_softmax } => {
                            if mask.n != n || mask.heads != self.heads {
                                return Err(Error::Shape(format!(
                                    "naa: mask [{}x{}x{}] does not fit {} tokens / {} heads",
                                    mask.heads, mask.n, mask.n, n, self.heads
                                )));
                            }
                            if *post_softmax {
                                masked_attention_post_softmax(
                                    fw.tape,
                                    &qh,
                                    &kh,
                                    &vh,
                                    mask.head(hd),
                                )?
                            } else {
                                masked_attention(fw.tape, &qh, &kh, &vh, Some(mask.head(hd)))?
                            }
                        }
                        AttnMode::FixSparse { .. } => unreachable!(),
                    };
                    head_outs.push(out);
                }
                fw.tape.concat_cols(&head_outs)?
            }
        };
        let wt = fw.p(self.wo);
        let bt = fw.p(self.bo);
        let y = fw.tape.matmul(&merged, &wt)?;
        let y = fw.tape.add_bias(&y, &bt)?;
        let attn_export = if export_attn && !exported.is_empty() {
            Some(Tensor::new(vec![self.heads, n, n], exported)?)
        } else {
            None
        };
        Ok((y, attn_export))
    }
}

// ── diffusion oracle ───────────────────────────────────────────────────

/// Token features plus the forged-token indicator used by the oracle.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    /// [N, d] features, row-major.
    pub features: Vec<f32>,
    pub dim: usize,
    pub forged: Vec<bool>,
}

/// Mixing weights of the diffusion recurrence; alpha + beta must be 1.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionOracleConfig {
    pub alpha: f32,
    pub beta: f32,
}

impl Default for DiffusionOracleConfig {
    fn default() -> Self {
        DiffusionOracleConfig {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

/// Iterates P_{l+1}(i) = alpha * P_l(i) + beta * centroid(forged features)
/// for every real token, holding forged tokens fixed. Verification fixture
/// only; the trained model never calls this.
pub fn diffusion_oracle(
    grid: &FeatureGrid,
    config: DiffusionOracleConfig,
    layers: usize,
) -> Result<FeatureGrid> {
    let n = grid.forged.len();
    let d = grid.dim;
    if grid.features.len() != n * d {
        return Err(Error::Shape(format!(
            "diffusion_oracle: {} features for {n} tokens of dim {d}",
            grid.features.len()
        )));
    }
    if !grid.forged.iter().any(|&f| f) {
        return Err(Error::Value("diffusion_oracle: forged set is empty".into()));
    }
    if (config.alpha + config.beta - 1.0).abs() > 1e-6 {
        return Err(Error::Value(format!(
            "diffusion_oracle: alpha {} + beta {} must equal 1",
            config.alpha, config.beta
        )));
    }
    let mut out = grid.clone();
    for _ in 0..layers {
        let mut centroid = vec![0.0f32; d];
        let mut count = 0usize;
        for (i, &f) in out.forged.iter().enumerate() {
            if f {
                for j in 0..d {
                    centroid[j] += out.features[i * d + j];
                }
                count += 1;
            }
        }
        for c in centroid.iter_mut() {
            *c /= count as f32;
        }
        for (i, &f) in out.forged.iter().enumerate() {
            if !f {
                for j in 0..d {
                    let p = out.features[i * d + j];
                    out.features[i * d + j] = config.alpha * p + config.beta * centroid[j];
                }
            }
        }
    }
    Ok(out)
}

/// Euclidean distance of each real token to the forged centroid.
pub fn distances_to_forged_centroid(grid: &FeatureGrid) -> Vec<f32> {
    let d = grid.dim;
    let mut centroid = vec![0.0f32; d];
    let mut count = 0usize;
    for (i, &f) in grid.forged.iter().enumerate() {
        if f {
            for j in 0..d {
                centroid[j] += grid.features[i * d + j];
            }
            count += 1;
        }
    }
    for c in centroid.iter_mut() {
        *c /= count as f32;
    }
    grid.forged
        .iter()
        .enumerate()
        .filter(|(_, &f)| !f)
        .map(|(i, _)| {
            (0..d)
                .map(|j| {
                    let dlt = grid.features[i * d + j] - centroid[j];
                    dlt * dlt
                })
                .sum::<f32>()
                .sqrt()
        })
        .collect()
}
