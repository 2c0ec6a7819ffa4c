//! The dual-branch detector: a noise-branch encoder whose last-layer
//! attention matrices drive noise-guided masks, an image-branch encoder
//! with fix-sparse attention and a masked (NAA) final layer per stage, a
//! weighted multi-scale decoder, and a light classification head.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train, EpochLog, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnMode, MultiHead, NoiseMask};
use crate::error::{Error, Result};
use crate::noise::{extract_noise, NoiseTrace};
use crate::tensor::{Binding, Fwd, ParamId, ParamSet, Tape, Tensor};

/// Stage geometry and ablation switches for the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_dims: [usize; 4],
    pub image_depths: [usize; 4],
    pub noise_dims: [usize; 4],
    pub noise_depths: [usize; 4],
    /// Heads per stage; identical across corresponding layers of both
    /// branches so noise masks can steer image attention.
    pub heads: [usize; 4],
    pub sparse_strides: [usize; 4],
    pub patch_strides: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub cls_hidden: usize,
    pub cls_kernel: usize,
    pub top_k_ratio: f64,
    /// Noise branch present at all (the "Noise" ablation component).
    pub use_noise: bool,
    /// Stage-final masked attention (the "NAA" component; needs noise).
    pub use_naa: bool,
    /// Learnable per-stage decoder scales (the "Weighted Decoder" component).
    pub weighted_decoder: bool,
    /// Literal masking variant: softmax first, then zero disallowed entries.
    pub naa_post_softmax: bool,
}

impl ModelConfig {
    /// Desk-scale default; trains in minutes on one core.
    pub fn toy_default() -> Self {
        ModelConfig {
            image_dims: [16, 32, 64, 128],
            image_depths: [1, 1, 2, 2],
            noise_dims: [8, 16, 32, 64],
            noise_depths: [1, 1, 2, 2],
            heads: [1, 2, 4, 8],
            sparse_strides: [8, 4, 2, 1],
            patch_strides: [4, 2, 2, 2],
            mlp_ratio: 2,
            decoder_dim: 64,
            cls_hidden: 32,
            cls_kernel: 3,
            top_k_ratio: 0.25,
            use_noise: true,
            use_naa: true,
            weighted_decoder: true,
            naa_post_softmax: false,
        }
    }

    /// Tiny config (all dims <= 16) for finite-difference checks on 32x32.
    pub fn minimal() -> Self {
        ModelConfig {
            image_dims: [8, 8, 16, 16],
            image_depths: [1, 1, 1, 1],
            noise_dims: [4, 8, 8, 16],
            noise_depths: [1, 1, 1, 1],
            heads: [1, 1, 2, 2],
            sparse_strides: [2, 2, 1, 1],
            patch_strides: [4, 2, 2, 2],
            mlp_ratio: 2,
            decoder_dim: 8,
            cls_hidden: 4,
            cls_kernel: 3,
            top_k_ratio: 0.25,
            use_noise: true,
            use_naa: true,
            weighted_decoder: true,
            naa_post_softmax: false,
        }
    }

    /// Apply an ablation selector: none, +noise, +noise+naa, +noise+wd, full.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let (noise, naa, wd) = match ablation {
            Ablation::None => (false, false, false),
            Ablation::Noise => (true, false, false),
            Ablation::NoiseNaa => (true, true, false),
            Ablation::NoiseWd => (true, false, true),
            Ablation::Full => (true, true, true),
        };
        self.use_noise = noise;
        self.use_naa = naa;
        self.weighted_decoder = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.image_dims[i] % self.heads[i] != 0 || self.noise_dims[i] % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: dims {}/{} not divisible by {} heads",
                    self.image_dims[i], self.noise_dims[i], self.heads[i]
                )));
            }
            if self.image_depths[i] < 1 || self.noise_depths[i] < 1 {
                return Err(Error::Config(format!("stage {i}: depths must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.top_k_ratio) || self.top_k_ratio == 0.0 {
            return Err(Error::Config(format!(
                "top_k_ratio {} outside (0, 1]",
                self.top_k_ratio
            )));
        }
        if self.use_naa && !self.use_noise {
            return Err(Error::Config(
                "NAA requires the noise branch to be enabled".into(),
            ));
        }
        if self.cls_kernel % 2 == 0 {
            return Err(Error::Config("cls_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Total downsampling factor (input sizes must divide this).
    pub fn total_stride(&self) -> usize {
        self.patch_strides.iter().product()
    }
}

/// Component-ablation selector mirroring the structure-ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    Noise,
    NoiseNaa,
    NoiseWd,
    Full,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Ablation::None,
            "+noise" => Ablation::Noise,
            "+noise+naa" => Ablation::NoiseNaa,
            "+noise+wd" => Ablation::NoiseWd,
            "full" => Ablation::Full,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other}; expected none, +noise, +noise+naa, +noise+wd, full"
                )))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Noise => "+noise",
            Ablation::NoiseNaa => "+noise+naa",
            Ablation::NoiseWd => "+noise+wd",
            Ablation::Full => "full",
        }
    }

    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::Noise,
        Ablation::NoiseNaa,
        Ablation::NoiseWd,
        Ablation::Full,
    ];
}

// ── building blocks ────────────────────────────────────────────────────

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            w: ps.add_linear_weight(&format!("{name}.w"), din, dout, rng)?,
            b: ps.add(&format!("{name}.b"), Tensor::zeros(vec![dout]))?,
        })
    }

    fn forward(&self, fw: &mut Fwd, x: &Tensor) -> Result<Tensor> {
        let w = fw.p(self.w);
        let b = fw.p(self.b);
        let y = fw.tape.matmul(x, &w)?;
        fw.tape.add_bias(&y, &b)
    }
}

struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            g: ps.add(&format!("{name}.g"), Tensor::full(vec![dim], 1.0))?,
            b: ps.add(&format!("{name}.b"), Tensor::zeros(vec![dim]))?,
        })
    }

    fn forward(&self, fw: &mut Fwd, x: &Tensor) -> Result<Tensor> {
        let g = fw.p(self.g);
        let b = fw.p(self.b);
        fw.tape.layer_norm(x, &g, &b, 1e-5)
    }
}

/// Pre-norm transformer block: x + Attn(LN(x)), then y + MLP(LN(y)).
struct Block {
    ln1: Norm,
    attn: MultiHead,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Block {
            ln1: Norm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: MultiHead::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: Norm::new(ps, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio, rng)?,
            fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim, rng)?,
        })
    }

    fn forward(
        &self,
        fw: &mut Fwd,
        x: &Tensor,
        mode: &AttnMode,
        export_attn: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let normed = self.ln1.forward(fw, x)?;
        let (attn_out, exported) = self.attn.forward(fw, &normed, mode, export_attn)?;
        let x = fw.tape.add(x, &attn_out)?;
        let normed = self.ln2.forward(fw, &x)?;
        let h = self.fc1.forward(fw, &normed)?;
        let h = fw.tape.gelu(&h);
        let h = self.fc2.forward(fw, &h)?;
        let y = fw.tape.add(&x, &h)?;
        Ok((y, exported))
    }
}

/// One encoder stage: strided linear patchify, then transformer blocks.
struct Stage {
    embed: Linear,
    embed_norm: Norm,
    blocks: Vec<Block>,
    patch_stride: usize,
    sparse_stride: usize,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        dim: usize,
        depth: usize,
        patch_stride: usize,
        heads: usize,
        sparse_stride: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed_in = in_ch * patch_stride * patch_stride;
        let mut blocks = Vec::with_capacity(depth);
        for d in 0..depth {
            blocks.push(Block::new(
                ps,
                &format!("{name}.block{d}"),
                dim,
                heads,
                mlp_ratio,
                rng,
            )?);
        }
        Ok(Stage {
            embed: Linear::new(ps, &format!("{name}.embed"), embed_in, dim, rng)?,
            embed_norm: Norm::new(ps, &format!("{name}.embed_norm"), dim)?,
            blocks,
            patch_stride,
            sparse_stride,
        })
    }
}

/// What the last block of a stage should do.
enum StageFinal<'m> {
    SameAsRest,
    Dense,
    Naa { mask: &'m NoiseMask, post_softmax: bool },
    ExportAttn,
}

/// Final-layer policy for the image branch: noise-guided masks in the full
/// model, fix-sparse when NAA is ablated, dense only as a test reference.
pub enum ImageFinalLayers<'m> {
    Masked(&'m [NoiseMask]),
    Sparse,
    Dense,
}

/// Features of one stage: [N, dim] tokens on an h x w token grid.
#[derive(Clone)]
pub struct StageOut {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
}

/// Four feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution.
pub type StagePyramid = Vec<StageOut>;

fn run_stage(
    stage: &Stage,
    fw: &mut Fwd,
    grid_in: &Tensor,
    base_vanilla: bool,
    final_spec: StageFinal,
) -> Result<(StageOut, Option<Tensor>)> {
    let (gh, gw) = (grid_in.shape()[1], grid_in.shape()[2]);
    let (h, w) = (gh / stage.patch_stride, gw / stage.patch_stride);
    let patches = fw.tape.unfold_patches(grid_in, stage.patch_stride)?;
    let embedded = stage.embed.forward(fw, &patches)?;
    let mut x = stage.embed_norm.forward(fw, &embedded)?;

    let base_mode = || {
        if base_vanilla {
            AttnMode::Vanilla
        } else {
            AttnMode::FixSparse {
                grid: (h, w),
                stride: stage.sparse_stride,
            }
        }
    };
    let mut exported = None;
    let last = stage.blocks.len() - 1;
    for (i, block) in stage.blocks.iter().enumerate() {
        if i < last {
            let (y, _) = block.forward(fw, &x, &base_mode(), false)?;
            x = y;
        } else {
            match &final_spec {
                StageFinal::SameAsRest => {
                    let (y, _) = block.forward(fw, &x, &base_mode(), false)?;
                    x = y;
                }
                StageFinal::Dense => {
                    let (y, _) = block.forward(fw, &x, &AttnMode::Vanilla, false)?;
                    x = y;
                }
                StageFinal::Naa { mask, post_softmax } => {
                    let mode = AttnMode::Naa {
                        mask,
                        post_softmax: *post_softmax,
                    };
                    let (y, _) = block.forward(fw, &x, &mode, false)?;
                    x = y;
                }
                StageFinal::ExportAttn => {
                    let (y, a) = block.forward(fw, &x, &AttnMode::Vanilla, true)?;
                    x = y;
                    exported = a;
                }
            }
        }
    }
    Ok((StageOut { tokens: x, h, w }, exported))
}

// ── the assembled model ────────────────────────────────────────────────

/// Pre-sigmoid outputs: a full-resolution mask logit map and a scalar
/// image-level logit.
pub struct ModelOutput {
    pub mask_logits: Tensor,
    pub cls_logit: Tensor,
}

pub struct NfaVit {
    pub config: ModelConfig,
    pub params: ParamSet,
    image_stages: Vec<Stage>,
    noise_stages: Vec<Stage>,
    /// Per-stage projection of noise features into the image pyramid, used
    /// only when the noise branch is on but NAA is off.
    fusion: Vec<Linear>,
    dec_proj: Vec<Linear>,
    dec_gamma: Vec<ParamId>,
    dec_fuse: Linear,
    dec_head: Linear,
    cls_conv1_w: ParamId,
    cls_conv1_b: ParamId,
    cls_norm1: Norm,
    cls_conv2_w: ParamId,
    cls_conv2_b: ParamId,
    cls_norm2: Norm,
    cls_out: Linear,
}

fn conv_weight(
    ps: &mut ParamSet,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    let fan_in = ci * k * k;
    let fan_out = co * k * k;
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let t = Tensor::from_fn(vec![co, ci, k, k], |_| rng.gen_range(-bound..bound));
    ps.add(name, t)
}

impl NfaVit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();

        let mut image_stages = Vec::with_capacity(4);
        let mut in_ch = 3usize;
        for i in 0..4 {
            image_stages.push(Stage::new(
                &mut ps,
                &format!("image_enc.stage{}", i + 1),
                in_ch,
                config.image_dims[i],
                config.image_depths[i],
                config.patch_strides[i],
                config.heads[i],
                config.sparse_strides[i],
                config.mlp_ratio,
                &mut rng,
            )?);
            in_ch = config.image_dims[i];
        }

        let mut noise_stages = Vec::new();
        let mut fusion = Vec::new();
        if config.use_noise {
            let mut in_ch = 1usize;
            for i in 0..4 {
                noise_stages.push(Stage::new(
                    &mut ps,
                    &format!("noise_enc.stage{}", i + 1),
                    in_ch,
                    config.noise_dims[i],
                    config.noise_depths[i],
                    config.patch_strides[i],
                    config.heads[i],
                    config.sparse_strides[i],
                    config.mlp_ratio,
                    &mut rng,
                )?);
                in_ch = config.noise_dims[i];
            }
            if !config.use_naa {
                for i in 0..4 {
                    fusion.push(Linear::new(
                        &mut ps,
                        &format!("fusion.stage{}", i + 1),
                        config.noise_dims[i],
                        config.image_dims[i],
                        &mut rng,
                    )?);
                }
            }
        }

        let mut dec_proj = Vec::with_capacity(4);
        let mut dec_gamma = Vec::with_capacity(4);
        for i in 0..4 {
            dec_proj.push(Linear::new(
                &mut ps,
                &format!("decoder.proj{}", i + 1),
                config.image_dims[i],
                config.decoder_dim,
                &mut rng,
            )?);
            if config.weighted_decoder {
                dec_gamma.push(ps.add(
                    &format!("decoder.gamma{}", i + 1),
                    Tensor::full(vec![1], 1.0),
                )?);
            }
        }
        let dec_fuse = Linear::new(
            &mut ps,
            "decoder.fuse",
            config.decoder_dim,
            config.decoder_dim,
            &mut rng,
        )?;
        let dec_head = Linear::new(&mut ps, "decoder.head", config.decoder_dim, 1, &mut rng)?;

        let k = config.cls_kernel;
        let c4 = config.image_dims[3];
        let ch = config.cls_hidden;
        let cls_conv1_w = conv_weight(&mut ps, "cls.conv1.w", ch, c4, k, &mut rng)?;
        let cls_conv1_b = ps.add("cls.conv1.b", Tensor::zeros(vec![ch]))?;
        let cls_norm1 = Norm::new(&mut ps, "cls.norm1", ch)?;
        let cls_conv2_w = conv_weight(&mut ps, "cls.conv2.w", ch, ch, k, &mut rng)?;
        let cls_conv2_b = ps.add("cls.conv2.b", Tensor::zeros(vec![ch]))?;
        let cls_norm2 = Norm::new(&mut ps, "cls.norm2", ch)?;
        let cls_out = Linear::new(&mut ps, "cls.out", ch, 1, &mut rng)?;

        Ok(NfaVit {
            config,
            params: ps,
            image_stages,
            noise_stages,
            fusion,
            dec_proj,
            dec_gamma,
            dec_fuse,
            dec_head,
            cls_conv1_w,
            cls_conv1_b,
            cls_norm1,
            cls_conv2_w,
            cls_conv2_b,
            cls_norm2,
            cls_out,
        })
    }

    /// Noise-branch pass: four vanilla-attention stages; the last layer of
    /// each stage also exports its post-softmax attention matrices.
    pub fn noise_encoder_forward(
        &self,
        fw: &mut Fwd,
        trace: &NoiseTrace,
    ) -> Result<(StagePyramid, Vec<Tensor>)> {
        if self.noise_stages.is_empty() {
            return Err(Error::Config(
                "noise encoder: noise branch is disabled in this configuration".into(),
            ));
        }
        let mut pyramid = Vec::with_capacity(4);
        let mut attns = Vec::with_capacity(4);
        let mut grid = trace.map.clone();
        for stage in &self.noise_stages {
            let (out, attn) = run_stage(stage, fw, &grid, true, StageFinal::ExportAttn)?;
            let a = attn.ok_or_else(|| {
                Error::Shape("noise encoder: missing exported attention".into())
            })?;
            attns.push(a);
            grid = fw.tape.tokens_to_grid(&out.tokens, out.h, out.w)?;
            pyramid.push(out);
        }
        Ok((pyramid, attns))
    }

    /// Image-branch pass: fix-sparse attention everywhere except each
    /// stage's final layer, which applies the stage's noise-guided mask.
    pub fn image_encoder_forward(
        &self,
        fw: &mut Fwd,
        image: &Tensor,
        final_layers: ImageFinalLayers,
        fusion_feats: Option<&StagePyramid>,
    ) -> Result<StagePyramid> {
        let mut pyramid = Vec::with_capacity(4);
        let mut grid = image.clone();
        for (i, stage) in self.image_stages.iter().enumerate() {
            let final_spec = match &final_layers {
                ImageFinalLayers::Masked(ms) => {
                    let mask = ms.get(i).ok_or_else(|| {
                        Error::Shape(format!("image encoder: no mask for stage {}", i + 1))
                    })?;
                    StageFinal::Naa {
                        mask,
                        post_softmax: self.config.naa_post_softmax,
                    }
                }
                ImageFinalLayers::Sparse => StageFinal::SameAsRest,
                ImageFinalLayers::Dense => StageFinal::Dense,
            };
            let (mut out, _) = run_stage(stage, fw, &grid, false, final_spec)?;
            if let Some(noise_pyr) = fusion_feats {
                let projected = self.fusion[i].forward(fw, &noise_pyr[i].tokens)?;
                out.tokens = fw.tape.add(&out.tokens, &projected)?;
            }
            grid = fw.tape.tokens_to_grid(&out.tokens, out.h, out.w)?;
            pyramid.push(out);
        }
        Ok(pyramid)
    }

    /// Weighted multi-scale decoder: project stages to a common width,
    /// upsample to 1/4 resolution, sum with per-stage scales, fuse, and
    /// upsample to full resolution mask logits.
    pub fn weighted_decoder(
        &self,
        fw: &mut Fwd,
        pyramid: &StagePyramid,
        out_hw: (usize, usize),
    ) -> Result<Tensor> {
        let (h1, w1) = (pyramid[0].h, pyramid[0].w);
        let mut sum: Option<Tensor> = None;
        for (i, stage_out) in pyramid.iter().enumerate() {
            let proj = self.dec_proj[i].forward(fw, &stage_out.tokens)?;
            let grid = fw.tape.tokens_to_grid(&proj, stage_out.h, stage_out.w)?;
            let factor = h1 / stage_out.h;
            let up = fw.tape.bilinear_upsample(&grid, factor)?;
            let scaled = if self.config.weighted_decoder {
                let gamma = fw.p(self.dec_gamma[i]);
                fw.tape.mul_scalar_t(&up, &gamma)?
            } else {
                up
            };
            sum = Some(match sum {
                None => scaled,
                Some(acc) => fw.tape.add(&acc, &scaled)?,
            });
        }
        let summed = sum.expect("four stages");
        let tokens = fw.tape.grid_to_tokens(&summed)?;
        let fused = self.dec_fuse.forward(fw, &tokens)?;
        let logits = self.dec_head.forward(fw, &fused)?;
        let grid = fw.tape.tokens_to_grid(&logits, h1, w1)?;
        let factor = out_hw.0 / h1;
        fw.tape.bilinear_upsample(&grid, factor)
    }

    /// Image-level logit from stage-4 features: two conv-norm-activation
    /// blocks, global average pooling, then a linear map to one logit.
    pub fn cls_head(&self, fw: &mut Fwd, f4: &StageOut) -> Result<Tensor> {
        let grid = fw.tape.tokens_to_grid(&f4.tokens, f4.h, f4.w)?;
        let w1 = fw.p(self.cls_conv1_w);
        let b1 = fw.p(self.cls_conv1_b);
        let c1 = fw.tape.conv2d(&grid, &w1, Some(&b1))?;
        let t1 = fw.tape.grid_to_tokens(&c1)?;
        let n1 = self.cls_norm1.forward(fw, &t1)?;
        let a1 = fw.tape.gelu(&n1);
        let g1 = fw.tape.tokens_to_grid(&a1, f4.h, f4.w)?;
        let w2 = fw.p(self.cls_conv2_w);
        let b2 = fw.p(self.cls_conv2_b);
        let c2 = fw.tape.conv2d(&g1, &w2, Some(&b2))?;
        let t2 = fw.tape.grid_to_tokens(&c2)?;
        let n2 = self.cls_norm2.forward(fw, &t2)?;
        let a2 = fw.tape.gelu(&n2);
        let pooled = fw.tape.mean_rows(&a2)?;
        let logit = self.cls_out.forward(fw, &pooled)?;
        fw.tape.reshape(&logit, vec![1])
    }

    /// Full forward pass on a fresh tape. Returns the outputs together with
    /// the tape and binding so callers can run backward.
    pub fn forward(&self, image: &Tensor) -> Result<(ModelOutput, Tape, Binding)> {
        let mut tape = Tape::new();
        let mut binding = Binding::new(&self.params);
        let output = {
            let mut fw = Fwd {
                tape: &mut tape,
                params: &self.params,
                binding: &mut binding,
            };
            self.forward_on(&mut fw, image)?
        };
        Ok((output, tape, binding))
    }

    /// Forward pass onto an existing context.
    pub fn forward_on(&self, fw: &mut Fwd, image: &Tensor) -> Result<ModelOutput> {
        self.forward_pinned(fw, image, None)
    }

    /// The noise-guided masks the model would derive for this input.
    pub fn derive_masks(&self, image: &Tensor) -> Result<Vec<NoiseMask>> {
        if !(self.config.use_noise && self.config.use_naa) {
            return Err(Error::Config(
                "derive_masks: configuration has no noise-guided masks".into(),
            ));
        }
        let mut tape = Tape::new();
        let mut binding = Binding::new(&self.params);
        let mut fw = Fwd {
            tape: &mut tape,
            params: &self.params,
            binding: &mut binding,
        };
        let trace = extract_noise(image)?;
        let (_, attns) = self.noise_encoder_forward(&mut fw, &trace)?;
        attns
            .iter()
            .map(|a| NoiseMask::from_noise_attention(&a.detach(), self.config.top_k_ratio))
            .collect()
    }

    /// Forward pass with externally pinned noise-guided masks. The mask
    /// selection is discrete (gradient-opaque), so pinning it turns the
    /// remaining computation into the differentiable function that
    /// finite-difference checks can probe.
    pub fn forward_pinned(
        &self,
        fw: &mut Fwd,
        image: &Tensor,
        pinned_masks: Option<&[NoiseMask]>,
    ) -> Result<ModelOutput> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "forward: expected [3, H, W] image, got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let stride = self.config.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!(
                "forward: input {h}x{w} not divisible by total stride {stride}"
            )));
        }

        let mut masks: Option<Vec<NoiseMask>> = None;
        let mut fusion_feats: Option<StagePyramid> = None;
        if let Some(pinned) = pinned_masks {
            if !(self.config.use_noise && self.config.use_naa) {
                return Err(Error::Config(
                    "forward_pinned: masks supplied but NAA is disabled".into(),
                ));
            }
            masks = Some(pinned.to_vec());
        } else if self.config.use_noise {
            let trace = extract_noise(image)?;
            let (noise_pyr, attns) = self.noise_encoder_forward(fw, &trace)?;
            if self.config.use_naa {
                let mut ms = Vec::with_capacity(4);
                for a in &attns {
                    ms.push(NoiseMask::from_noise_attention(
                        &a.detach(),
                        self.config.top_k_ratio,
                    )?);
                }
                masks = Some(ms);
            } else {
                fusion_feats = Some(noise_pyr);
            }
        }

        let final_layers = match &masks {
            Some(ms) => ImageFinalLayers::Masked(ms),
            None => ImageFinalLayers::Sparse,
        };
        let pyramid =
            self.image_encoder_forward(fw, image, final_layers, fusion_feats.as_ref())?;
        let mask_logits = self.weighted_decoder(fw, &pyramid, (h, w))?;
        let cls_logit = self.cls_head(fw, &pyramid[3])?;
        Ok(ModelOutput {
            mask_logits,
            cls_logit,
        })
    }

    /// Joint objective: BCE(cls logit, label) + BCE(mask logits, mask),
    /// with unit weights on both terms.
    pub fn loss(
        &self,
        tape: &mut Tape,
        output: &ModelOutput,
        label: f32,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let (h, w) = (
            output.mask_logits.shape()[1],
            output.mask_logits.shape()[2],
        );
        if mask.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "loss: mask {:?} does not match logits {h}x{w}",
                mask.shape()
            )));
        }
        let y = Tensor::new(vec![1], vec![label])?;
        let cls_loss = tape.bce_with_logits(&output.cls_logit, &y)?;
        let flat = tape.reshape(&output.mask_logits, vec![h * w])?;
        let target = Tensor::new(vec![h * w], mask.data().to_vec())?;
        let seg_loss = tape.bce_with_logits(&flat, &target)?;
        tape.add(&cls_loss, &seg_loss)
    }

    /// Inference: sigmoid probabilities (image-level, per-pixel).
    pub fn predict(&self, image: &Tensor) -> Result<(f32, Tensor)> {
        let (out, _tape, _binding) = self.forward(image)?;
        let cls_prob = sigmoid(out.cls_logit.data()[0]);
        let probs: Vec<f32> = out.mask_logits.data().iter().map(|&z| sigmoid(z)).collect();
        let shape = vec![
            out.mask_logits.shape()[1],
            out.mask_logits.shape()[2],
        ];
        Ok((cls_prob, Tensor::new(shape, probs)?))
    }
}

pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests;
