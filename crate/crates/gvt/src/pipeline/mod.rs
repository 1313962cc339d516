//! End-to-end pipeline: stand-in encoder/decoder, loss assembly, and the
//! training loop.
//!
//! The encoder is a small causal stand-in for a full video backbone: frames
//! group causally (frame 1 alone, then groups of 4), each group embeds
//! pointwise and downsamples 4x through two strided convolutions. The
//! decoder mirrors it with transposed convolutions and a final sigmoid, so
//! outputs always land in `[0, 1]`.
//!
//! One training step is a transaction: forward, backward, clipped optimizer
//! update, then codebook maintenance. The objective is
//! `L_recon + L_gsp + alpha * L_commit` — reconstruction is plain MSE, and
//! no adversarial term is implemented.

pub mod adam;
pub mod checkpoint;

pub use adam::{clip_global_norm, Adam};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionError, Init, Linear};
use crate::config::ModelConfig;
use crate::gaussian2d::{self, Gaussian2D, GaussianError};
use crate::gsp::{self, BinaryMask, GspBranch, PartitionIndices};
use crate::numerics::ops::{concat_rows, conv2d, conv2d_transpose};
use crate::numerics::{Ctx, NumericsError, ParamStore, Tensor};
use crate::rasterizer::{render_splats, render_video, RenderOptions};
use crate::stge::{activate_raw, GaussianTensors, StgeNet};
use crate::vq::{self, Codebook, QuantizedGaussianSet};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid frame count {frames}: want 4*(t-1)+1 frames")]
    BadFrameCount { frames: usize },
    #[error("clip is {got_t} steps of {h}x{w}, model expects {want_t} steps of {want_h}x{want_w}")]
    ClipShape {
        got_t: usize,
        h: usize,
        w: usize,
        want_t: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Render(#[from] GaussianError),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
}

/// Pixel video clip, `[frames, h, w, 3]` row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl VideoClip {
    pub fn new(frames: usize, h: usize, w: usize, data: Vec<f64>) -> VideoClip {
        assert_eq!(data.len(), frames * h * w * 3, "clip buffer size");
        VideoClip { frames, h, w, data }
    }

    pub fn zeros(frames: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new(frames, h, w, vec![0.0; frames * h * w * 3])
    }

    /// Latent step count under the causal grouping (frame 1 alone, then
    /// groups of 4): `frames = 4 (t - 1) + 1`.
    pub fn time_steps(&self) -> Result<usize, PipelineError> {
        if self.frames == 0 || (self.frames - 1) % 4 != 0 {
            return Err(PipelineError::BadFrameCount { frames: self.frames });
        }
        Ok((self.frames - 1) / 4 + 1)
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.h * self.w * 3;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> usize {
        self.frames * self.h * self.w
    }
}

/// Plain 2-D convolution layer over channels-last single images.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2dLayer {
        let fan_in = (kh * kw * cin) as f64;
        let fan_out = (kh * kw * cout) as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        use rand::Rng;
        store.insert(
            &format!("{name}.w"),
            vec![kh, kw, cin, cout],
            (0..kh * kw * cin * cout)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        );
        store.insert(&format!("{name}.b"), vec![cout], vec![0.0; cout]);
        Conv2dLayer {
            name: name.to_string(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        conv2d(x, &w, &b, self.stride, self.pad)
    }

    pub fn forward_transposed(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        conv2d_transpose(x, &w, &b, self.stride, self.pad)
    }
}

/// Causal-grouping encoder stand-in: pointwise group embedding, then two
/// stride-2 convolutions (4x spatial downsample).
#[derive(Clone, Debug)]
pub struct Encoder {
    embed_first: Linear,
    embed_group: Linear,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Encoder {
        let c = cfg.f_enc;
        Encoder {
            embed_first: Linear::init(store, rng, "enc.embed_first", 3, c, Init::XavierUniform),
            embed_group: Linear::init(store, rng, "enc.embed_group", 12, c, Init::XavierUniform),
            conv1: Conv2dLayer::init(store, rng, "enc.conv1", 3, 3, c, c, 2, 1),
            conv2: Conv2dLayer::init(store, rng, "enc.conv2", 3, 3, c, c, 2, 1),
        }
    }

    /// `clip [t', h', w', 3]` → latents `[t, h'/4, w'/4, f_enc]`.
    pub fn forward(&self, ctx: &Ctx, clip: &VideoClip) -> Result<Tensor, PipelineError> {
        let t = clip.time_steps()?;
        let (h, w) = (clip.h, clip.w);
        let frames = ctx
            .tape
            .constant(clip.data.clone(), vec![clip.frames, h, w, 3]);
        let mut per_step = Vec::with_capacity(t);
        for ti in 0..t {
            let embedded = if ti == 0 {
                let f0 = frames.narrow(0, 0, 1).reshape(&[h * w, 3]);
                self.embed_first.forward(ctx, &f0)
            } else {
                let group = frames
                    .narrow(0, 4 * ti - 3, 4)
                    .permute(&[1, 2, 0, 3]) // [h, w, 4, 3]
                    .reshape(&[h * w, 12]);
                self.embed_group.forward(ctx, &group)
            };
            let c = embedded.shape()[1];
            let x = embedded.reshape(&[h, w, c]).gelu();
            let x = self.conv1.forward(ctx, &x).gelu();
            let x = self.conv2.forward(ctx, &x);
            let (gh, gw, fc) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            per_step.push(x.reshape(&[1, gh, gw, fc]));
        }
        let refs: Vec<&Tensor> = per_step.iter().collect();
        Ok(concat_rows(&refs))
    }
}

/// Decoder mirror: two transposed convolutions (4x upsample), pointwise
/// frame heads, sigmoid output in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Decoder {
    deconv1: Conv2dLayer,
    deconv2: Conv2dLayer,
    head_first: Linear,
    head_group: Linear,
}

impl Decoder {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Decoder {
        let c = cfg.f_enc;
        Decoder {
            deconv1: Conv2dLayer::init(store, rng, "dec.deconv1", 4, 4, cfg.coeff_dim(), c, 2, 1),
            deconv2: Conv2dLayer::init(store, rng, "dec.deconv2", 4, 4, c, c, 2, 1),
            head_first: Linear::init(store, rng, "dec.head_first", c, 3, Init::XavierUniform),
            head_group: Linear::init(store, rng, "dec.head_group", c, 12, Init::XavierUniform),
        }
    }

    /// Rendered tokens `[t, gh, gw, d-5]` → clip tensor `[4(t-1)+1, h, w, 3]`.
    pub fn forward(&self, ctx: &Ctx, rendered: &Tensor) -> Tensor {
        let shape = rendered.shape();
        assert_eq!(shape.len(), 4, "decoder input must be [t, gh, gw, c]");
        let (t, gh, gw, cd) = (shape[0], shape[1], shape[2], shape[3]);
        let (h, w) = (gh * 4, gw * 4);
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let x = rendered.narrow(0, ti, 1).reshape(&[gh, gw, cd]);
            let x = self.deconv1.forward_transposed(ctx, &x).gelu();
            let x = self.deconv2.forward_transposed(ctx, &x).gelu();
            let c = x.shape()[2];
            let flat = x.reshape(&[h * w, c]);
            if ti == 0 {
                let f = self.head_first.forward(ctx, &flat).sigmoid();
                frames.push(f.reshape(&[1, h, w, 3]));
            } else {
                let g = self.head_group.forward(ctx, &flat).sigmoid();
                let g = g.reshape(&[h, w, 4, 3]).permute(&[2, 0, 1, 3]);
                frames.push(g);
            }
        }
        let refs: Vec<&Tensor> = frames.iter().collect();
        concat_rows(&refs)
    }
}

/// Mask source for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Learned partitioning branch with its regularizer.
    Learned,
    /// Partitioning disabled: every index dynamic, `T*K` tokens, no
    /// regularizer (the ablation baseline).
    AllDynamic,
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: MaskMode,
    /// Scale on the partitioning regularizer (0 during warmup).
    pub gsp_weight: f64,
    /// When false the decode path consumes the continuous coefficients (the
    /// straight-through relaxation); the codebook still chases them through
    /// the commitment term. Used for VQ warmup and for end-to-end gradient
    /// probes, which need a fully differentiable path.
    pub vq_enabled: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: MaskMode::Learned,
            gsp_weight: 1.0,
            vq_enabled: true,
        }
    }
}

/// Everything one forward pass produces.
pub struct Forward {
    pub gaussians: GaussianTensors,
    pub mask: BinaryMask,
    pub indices: PartitionIndices,
    pub vq_indices: Vec<usize>,
    /// Straight-through quantized coefficient rows, `[s + t*(k-s), d-5]`
    /// ordered static first, then dynamic t-major.
    pub vq_rows: Tensor,
    pub rendered: Tensor,
    pub recon: Tensor,
    pub l_recon: Tensor,
    pub l_gsp: Tensor,
    pub l_commit: Tensor,
    pub total: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub stge: StgeNet,
    pub gsp: GspBranch,
    pub codebook: Codebook,
    pub decoder: Decoder,
    refresh_rng: ChaCha8Rng,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Model {
        cfg.validate().expect("invalid model config");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&mut store, &mut rng, &cfg);
        let stge = StgeNet::init(&mut store, &mut rng, &cfg);
        let gsp = GspBranch::init(&mut store, &mut rng, &cfg);
        let codebook = Codebook::init(&mut store, &mut rng, cfg.l, cfg.coeff_dim());
        let decoder = Decoder::init(&mut store, &mut rng, &cfg);
        let refresh_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E3779B97F4A7C15);
        Model {
            cfg,
            store,
            encoder,
            stge,
            gsp,
            codebook,
            decoder,
            refresh_rng,
        }
    }

    /// Rebuild from a checkpoint: fresh architecture for the stored config,
    /// parameters overwritten with the stored blobs.
    pub fn from_checkpoint(path: &std::path::Path) -> Result<Model, checkpoint::CheckpointError> {
        let (cfg, loaded) = checkpoint::load(path)?;
        let mut model = Model::new(cfg, 0);
        for (name, entry) in loaded.iter() {
            if !model.store.contains(name) {
                return Err(checkpoint::CheckpointError::Malformed(format!(
                    "unknown parameter `{name}` for this architecture"
                )));
            }
            let slot = model.store.get_mut(name);
            if slot.shape != entry.shape {
                return Err(checkpoint::CheckpointError::Malformed(format!(
                    "parameter `{name}`: shape {:?} vs expected {:?}",
                    entry.shape, slot.shape
                )));
            }
            slot.data = entry.data.clone();
        }
        model.codebook = Codebook::attach(&model.store);
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), checkpoint::CheckpointError> {
        checkpoint::save(path, &self.cfg, &self.store)
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<usize, PipelineError> {
        let t = clip.time_steps()?;
        if t != self.cfg.t || clip.h != self.cfg.clip_h || clip.w != self.cfg.clip_w {
            return Err(PipelineError::ClipShape {
                got_t: t,
                h: clip.h,
                w: clip.w,
                want_t: self.cfg.t,
                want_h: self.cfg.clip_h,
                want_w: self.cfg.clip_w,
            });
        }
        Ok(t)
    }

    /// Full forward: encode, embed, partition, quantize, render, decode,
    /// assemble all loss parts.
    pub fn forward(&self, ctx: &Ctx, clip: &VideoClip, mode: MaskMode) -> Result<Forward, PipelineError> {
        self.forward_with(
            ctx,
            clip,
            ForwardOptions {
                mode,
                ..ForwardOptions::default()
            },
        )
    }

    pub fn forward_with(
        &self,
        ctx: &Ctx,
        clip: &VideoClip,
        opts: ForwardOptions,
    ) -> Result<Forward, PipelineError> {
        let mode = opts.mode;
        let gsp_weight = opts.gsp_weight;
        let t = self.check_clip(clip)?;
        let cfg = &self.cfg;
        let (k, cd) = (cfg.k, cfg.coeff_dim());
        let (gh, gw) = (cfg.grid_h(), cfg.grid_w());

        let z_raw = self.encoder.forward(ctx, clip)?;
        let z = self.stge.prepare_latent(ctx, &z_raw);
        let raw = self.stge.forward(ctx, &z)?;
        let mut gaussians = activate_raw(&raw);
        if cfg.geometry_ste {
            gaussians.mu = gaussians.mu.map_ste("geo_ste_pos", gaussian2d::snap_position);
            gaussians.theta = gaussians.theta.map_ste("geo_ste_theta", gaussian2d::snap_theta);
            gaussians.scales = gaussians.scales.map_ste("geo_ste_scale", gaussian2d::snap_scale);
        }

        let mask = match mode {
            MaskMode::Learned => {
                let g_init = self.stge.g_init(ctx);
                let logits = self.gsp.mask_logits(ctx, &g_init, &z, gh, gw)?;
                gsp::binarize_ste(&logits)
            }
            MaskMode::AllDynamic => BinaryMask {
                hard: ctx.tape.constant(vec![1.0; k], vec![k]),
                soft: ctx.tape.constant(vec![1.0; k], vec![k]),
            },
        };
        let indices = PartitionIndices::from_mask(&mask.hard_values());
        let s = indices.s();
        let kd = k - s;

        // coefficient rows in stream order: static (t = 1) first, dynamic
        // t-major after
        let coeff_t = |ti: usize| gaussians.coeff.narrow(0, ti, 1).reshape(&[k, cd]);
        let static_coeff = coeff_t(0).select_rows(&indices.static_idx);
        let mut parts = vec![static_coeff];
        for ti in 0..t {
            parts.push(coeff_t(ti).select_rows(&indices.dynamic_idx));
        }
        let part_refs: Vec<&Tensor> = parts.iter().collect();
        let coeff_all = concat_rows(&part_refs);
        let vq_out = vq::quantize_coeffs(ctx, &coeff_all, &self.codebook);
        let l_commit = vq::commitment_loss(&coeff_all, &vq_out.quantized);
        let decode_rows = if opts.vq_enabled {
            vq_out.straight_through.clone()
        } else {
            coeff_all.clone()
        };

        // per-step geometry assembly (static prefix shared across steps)
        let mu_t = |ti: usize| gaussians.mu.narrow(0, ti, 1).reshape(&[k, 2]);
        let th_t = |ti: usize| gaussians.theta.narrow(0, ti, 1).reshape(&[k]);
        let sc_t = |ti: usize| gaussians.scales.narrow(0, ti, 1).reshape(&[k, 2]);
        let s_mu = mu_t(0).select_rows(&indices.static_idx);
        let s_th = th_t(0).select_rows(&indices.static_idx);
        let s_sc = sc_t(0).select_rows(&indices.static_idx);
        let mut rendered_steps = Vec::with_capacity(t);
        for ti in 0..t {
            let mu = concat_rows(&[&s_mu, &mu_t(ti).select_rows(&indices.dynamic_idx)]);
            let th = concat_rows(&[&s_th, &th_t(ti).select_rows(&indices.dynamic_idx)]);
            let sc = concat_rows(&[&s_sc, &sc_t(ti).select_rows(&indices.dynamic_idx)]);
            let cf = concat_rows(&[
                &decode_rows.narrow(0, 0, s),
                &decode_rows.narrow(0, s + ti * kd, kd),
            ]);
            let grid = render_splats(&mu, &th, &sc, &cf, gh, gw);
            rendered_steps.push(grid.reshape(&[1, gh * gw, cd]));
        }
        let step_refs: Vec<&Tensor> = rendered_steps.iter().collect();
        let rendered = concat_rows(&step_refs);

        let recon = self
            .decoder
            .forward(ctx, &rendered.reshape(&[t, gh, gw, cd]));
        let target = ctx
            .tape
            .constant(clip.data.clone(), vec![clip.frames, clip.h, clip.w, 3]);
        let diff = recon.sub(&target);
        let l_recon = diff.mul(&diff).mean_all();
        let l_gsp = match mode {
            MaskMode::Learned => gsp::gsp_loss(&mask, &cfg.gsp).scale(gsp_weight),
            MaskMode::AllDynamic => ctx.tape.scalar(0.0),
        };
        let total = l_recon.add(&l_gsp).add(&l_commit.scale(cfg.alpha));

        Ok(Forward {
            gaussians,
            mask,
            indices,
            vq_indices: vq_out.indices,
            vq_rows: decode_rows,
            rendered,
            recon,
            l_recon,
            l_gsp,
            l_commit,
            total,
        })
    }

    /// Inference: run the model and extract the partitioned, quantized set
    /// in value form (continuous geometry, codebook-row coefficients).
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<QuantizedGaussianSet, PipelineError> {
        let ctx = Ctx::inference(&self.store);
        let fwd = self.forward(&ctx, clip, MaskMode::Learned)?;
        ctx.tape.forward_eval(&fwd.total)?;
        Ok(self.extract_quantized(&fwd))
    }

    /// Build the value-form set from a forward pass.
    pub fn extract_quantized(&self, fwd: &Forward) -> QuantizedGaussianSet {
        let cfg = &self.cfg;
        let (t, k, cd) = (cfg.t, cfg.k, cfg.coeff_dim());
        let idx = &fwd.indices;
        let s = idx.s();
        let kd = k - s;
        let mu = fwd.gaussians.mu.data();
        let th = fwd.gaussians.theta.data();
        let sc = fwd.gaussians.scales.data();
        let rows = fwd.vq_rows.data();
        let gauss_at = |ti: usize, ki: usize, row: usize| -> Gaussian2D {
            let g = ti * k + ki;
            Gaussian2D {
                mu: [mu[2 * g], mu[2 * g + 1]],
                theta: th[g],
                s1: sc[2 * g],
                s2: sc[2 * g + 1],
                coeff: rows[row * cd..(row + 1) * cd].to_vec(),
            }
        };
        let static_gaussians: Vec<Gaussian2D> = idx
            .static_idx
            .iter()
            .enumerate()
            .map(|(si, &ki)| gauss_at(0, ki, si))
            .collect();
        let static_codes: Vec<u32> = fwd.vq_indices[..s].iter().map(|&i| i as u32).collect();
        let mut dynamic_gaussians = Vec::with_capacity(t);
        let mut dynamic_codes = Vec::with_capacity(t);
        for ti in 0..t {
            let base = s + ti * kd;
            dynamic_gaussians.push(
                idx.dynamic_idx
                    .iter()
                    .enumerate()
                    .map(|(di, &ki)| gauss_at(ti, ki, base + di))
                    .collect::<Vec<_>>(),
            );
            dynamic_codes.push(
                fwd.vq_indices[base..base + kd]
                    .iter()
                    .map(|&i| i as u32)
                    .collect::<Vec<_>>(),
            );
        }
        QuantizedGaussianSet {
            k,
            t,
            static_indices: idx.static_idx.clone(),
            dynamic_indices: idx.dynamic_idx.clone(),
            static_gaussians,
            dynamic_gaussians,
            static_codes,
            dynamic_codes,
            grid_h: cfg.grid_h(),
            grid_w: cfg.grid_w(),
        }
    }

    /// Render a partitioned value set and decode it to pixels.
    pub fn decode_gaussians(
        &self,
        static_set: &[Gaussian2D],
        dynamic: &[Vec<Gaussian2D>],
    ) -> Result<VideoClip, PipelineError> {
        let cfg = &self.cfg;
        let (gh, gw, cd) = (cfg.grid_h(), cfg.grid_w(), cfg.coeff_dim());
        let t = dynamic.len();
        let grids = render_video(static_set, dynamic, gh, gw, cd, &RenderOptions::default())?;
        let mut data = Vec::with_capacity(t * gh * gw * cd);
        for g in &grids {
            data.extend_from_slice(&g.values);
        }
        let ctx = Ctx::inference(&self.store);
        let rendered = ctx.tape.constant(data, vec![t, gh, gw, cd]);
        let recon = self.decoder.forward(&ctx, &rendered);
        ctx.tape.forward_eval(&recon)?;
        let frames = 4 * (t - 1) + 1;
        Ok(VideoClip::new(
            frames,
            cfg.clip_h,
            cfg.clip_w,
            recon.to_vec(),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
    /// Steps before the partitioning regularizer turns on; reconstruction
    /// alone shapes the mask until then.
    pub gsp_warmup: usize,
    /// Steps before the decode path switches from continuous coefficients
    /// to their codewords; the codebook chases the coefficients throughout.
    pub vq_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            lr: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            mask_mode: MaskMode::Learned,
            gsp_warmup: 200,
            vq_warmup: 300,
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub l_recon: f64,
    pub l_gsp: f64,
    pub l_commit: f64,
    pub mean_mask: f64,
    pub s: usize,
    pub tokens: usize,
    pub psnr: f64,
}

pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub grad_clip: f64,
    pub mask_mode: MaskMode,
    pub gsp_warmup: usize,
    pub vq_warmup: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: &TrainConfig) -> Trainer {
        Trainer {
            model,
            opt: Adam::new(cfg.lr),
            grad_clip: cfg.grad_clip,
            mask_mode: cfg.mask_mode,
            gsp_warmup: cfg.gsp_warmup,
            vq_warmup: cfg.vq_warmup,
            step: 0,
        }
    }

    /// Forward + backward + clipped update + codebook maintenance.
    pub fn train_step(&mut self, clip: &VideoClip) -> Result<StepMetrics, PipelineError> {
        let step = self.step;
        let (mut grads, metrics, vq_indices, coeff_rows) = {
            let ctx = Ctx::new(&self.model.store);
            let fwd = self.model.forward_with(
                &ctx,
                clip,
                ForwardOptions {
                    mode: self.mask_mode,
                    gsp_weight: if step < self.gsp_warmup { 0.0 } else { 1.0 },
                    vq_enabled: step >= self.vq_warmup,
                },
            )?;
            ctx.tape
                .forward_eval(&fwd.total)
                .map_err(|e| PipelineError::NonFiniteLoss {
                    step,
                    detail: e.to_string(),
                })?;
            let s = fwd.indices.s();
            let metrics = StepMetrics {
                step,
                l_recon: fwd.l_recon.scalar(),
                l_gsp: fwd.l_gsp.scalar(),
                l_commit: fwd.l_commit.scalar(),
                mean_mask: fwd.mask.mean(),
                s,
                tokens: fwd.indices.token_count(self.model.cfg.t),
                psnr: crate::metrics::psnr(&fwd.recon.data(), &clip.data),
            };
            let grads = ctx.backward(&fwd.total)?;
            (grads, metrics, fwd.vq_indices, fwd.vq_rows.to_vec())
        };
        clip_global_norm(&mut grads, self.grad_clip);
        self.opt.step(&mut self.model.store, &grads);
        vq::refresh_dead_codes(
            &mut self.model.store,
            &mut self.model.codebook,
            &vq_indices,
            &coeff_rows,
            &mut self.model.refresh_rng,
        );
        self.step += 1;
        Ok(metrics)
    }

    /// Cycle clips round-robin for `steps` steps.
    pub fn train(&mut self, clips: &[VideoClip], steps: usize) -> Result<Vec<StepMetrics>, PipelineError> {
        assert!(!clips.is_empty(), "no training clips");
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            out.push(self.train_step(&clips[i % clips.len()])?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.k = 8;
        cfg.t = 2;
        cfg.d1 = 8;
        cfg.d2 = 11;
        cfg.d3 = 8;
        cfg.b = 1;
        cfg.d = 9;
        cfg.l = 16;
        cfg.f = 8;
        cfg.f_enc = 8;
        cfg.heads = 2;
        cfg.clip_h = 16;
        cfg.clip_w = 16;
        cfg.validate().unwrap();
        cfg
    }

    fn random_clip(cfg: &ModelConfig, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = cfg.frames();
        let data = (0..frames * cfg.clip_h * cfg.clip_w * 3)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        VideoClip::new(frames, cfg.clip_h, cfg.clip_w, data)
    }

    #[test]
    fn encoder_shape_17_frames_to_5_steps() {
        let mut cfg = ModelConfig::toy();
        cfg.t = 5;
        cfg.f_enc = 8;
        cfg.f = 8;
        cfg.heads = 2;
        cfg.d1 = 8;
        cfg.d2 = 11;
        cfg.d3 = 8;
        let model = Model::new(cfg.clone(), 1);
        let clip = random_clip(&cfg, 2);
        assert_eq!(clip.frames, 17);
        let ctx = Ctx::inference(&model.store);
        let z = model.encoder.forward(&ctx, &clip).unwrap();
        assert_eq!(z.shape(), &[5, 8, 8, 8]);
    }

    #[test]
    fn encoder_single_frame_gives_single_step() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 1);
        let clip = VideoClip::new(
            1,
            cfg.clip_h,
            cfg.clip_w,
            vec![0.25; cfg.clip_h * cfg.clip_w * 3],
        );
        let ctx = Ctx::inference(&model.store);
        let z = model.encoder.forward(&ctx, &clip).unwrap();
        assert_eq!(z.shape()[0], 1);
    }

    #[test]
    fn encoder_rejects_bad_frame_count() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 1);
        let clip = VideoClip::zeros(4, cfg.clip_h, cfg.clip_w);
        let ctx = Ctx::inference(&model.store);
        match model.encoder.forward(&ctx, &clip) {
            Err(PipelineError::BadFrameCount { frames }) => assert_eq!(frames, 4),
            other => panic!("expected BadFrameCount, got {other:?}"),
        }
    }

    #[test]
    fn encoder_deterministic() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 3);
        let clip = random_clip(&cfg, 5);
        let run = || {
            let ctx = Ctx::inference(&model.store);
            model.encoder.forward(&ctx, &clip).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_shape_roundtrip_and_range() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 7);
        let ctx = Ctx::inference(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rendered = ctx.tape.constant(
            (0..cfg.t * cfg.n() * cfg.coeff_dim())
                .map(|_| rng.gen_range(-3.0..3.0))
                .collect(),
            vec![cfg.t, cfg.grid_h(), cfg.grid_w(), cfg.coeff_dim()],
        );
        let out = model.decoder.forward(&ctx, &rendered);
        assert_eq!(out.shape(), &[cfg.frames(), cfg.clip_h, cfg.clip_w, 3]);
        for &v in out.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn decoder_gradient_reaches_rendered_tokens() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 11);
        let ctx = Ctx::new(&model.store);
        let rendered = ctx.tape.leaf(
            vec![0.1; cfg.t * cfg.n() * cfg.coeff_dim()],
            vec![cfg.t, cfg.grid_h(), cfg.grid_w(), cfg.coeff_dim()],
            true,
        );
        let out = model.decoder.forward(&ctx, &rendered);
        let loss = out.mul(&out).sum_all();
        let grads = ctx.tape.backward(&loss).unwrap();
        let g = grads.wrt(&rendered).unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "gradient must reach tokens");
    }

    #[test]
    fn reconstruction_loss_examples() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 13);
        let clip = random_clip(&cfg, 15);
        let ctx = Ctx::new(&model.store);
        let fwd = model.forward(&ctx, &clip, MaskMode::Learned).unwrap();
        // independent two-line oracle
        let recon = fwd.recon.data();
        let mse: f64 = recon
            .iter()
            .zip(&clip.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / clip.data.len() as f64;
        assert!((fwd.l_recon.scalar() - mse).abs() < 1e-12);
        // identical pair -> 0, unit difference -> 1
        let z = ctx.tape.constant(vec![0.0; 6], vec![6]);
        let o = ctx.tape.constant(vec![1.0; 6], vec![6]);
        let d = o.sub(&z);
        assert_eq!(d.mul(&d).mean_all().scalar(), 1.0);
        let d0 = z.sub(&z);
        assert_eq!(d0.mul(&d0).mean_all().scalar(), 0.0);
    }

    #[test]
    fn total_loss_weighted_sum() {
        // parts (0.5, 0.02, 0.1) with alpha = 0.1 -> 0.53
        let cfg = micro_cfg();
        let model = Model::new(cfg, 17);
        let ctx = Ctx::new(&model.store);
        let a = ctx.tape.scalar(0.5);
        let b = ctx.tape.scalar(0.02);
        let c = ctx.tape.scalar(0.1);
        let total = a.add(&b).add(&c.scale(model.cfg.alpha));
        assert!((total.scalar() - 0.53).abs() < 1e-12);
    }

    #[test]
    fn forward_losses_finite_and_nonnegative_at_init() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 19);
        let clip = random_clip(&cfg, 21);
        let ctx = Ctx::new(&model.store);
        let fwd = model.forward(&ctx, &clip, MaskMode::Learned).unwrap();
        ctx.tape.forward_eval(&fwd.total).unwrap();
        for v in [
            fwd.l_recon.scalar(),
            fwd.l_gsp.scalar(),
            fwd.l_commit.scalar(),
            fwd.total.scalar(),
        ] {
            assert!(v.is_finite() && v >= 0.0, "loss part {v}");
        }
        // accounting identity
        let s = fwd.indices.s();
        assert_eq!(
            fwd.indices.token_count(cfg.t),
            crate::gsp::token_count(cfg.k, cfg.t, s)
        );
    }

    #[test]
    fn all_dynamic_mode_uses_full_token_budget() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 23);
        let clip = random_clip(&cfg, 25);
        let ctx = Ctx::new(&model.store);
        let fwd = model.forward(&ctx, &clip, MaskMode::AllDynamic).unwrap();
        assert_eq!(fwd.indices.s(), 0);
        assert_eq!(fwd.indices.token_count(cfg.t), cfg.k * cfg.t);
        assert_eq!(fwd.l_gsp.scalar(), 0.0);
    }

    #[test]
    fn train_steps_are_deterministic() {
        let cfg = micro_cfg();
        let clips = vec![random_clip(&cfg, 27), random_clip(&cfg, 28)];
        let run = || {
            let model = Model::new(cfg.clone(), 29);
            let mut trainer = Trainer::new(
                model,
                &TrainConfig {
                    lr: 1e-3,
                    ..TrainConfig::default()
                },
            );
            trainer.train(&clips, 10).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "two seeded runs must be bit-identical");
    }

    #[test]
    fn training_decreases_loss_on_a_tiny_problem() {
        let cfg = micro_cfg();
        let clips = vec![random_clip(&cfg, 31)];
        let model = Model::new(cfg, 33);
        let mut trainer = Trainer::new(
            model,
            &TrainConfig {
                lr: 3e-3,
                ..TrainConfig::default()
            },
        );
        let history = trainer.train(&clips, 60).unwrap();
        let first = history[0].l_recon;
        let last = history.last().unwrap().l_recon;
        assert!(
            last < first,
            "reconstruction should improve: {first} -> {last}"
        );
    }

    #[test]
    fn encode_extracts_stream_ordered_set() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 35);
        let clip = random_clip(&cfg, 37);
        let q = model.encode_clip(&clip).unwrap();
        assert_eq!(q.k, cfg.k);
        assert_eq!(q.t, cfg.t);
        assert_eq!(q.s(), q.static_gaussians.len());
        assert_eq!(q.dynamic_gaussians.len(), cfg.t);
        assert_eq!(q.token_count(), crate::gsp::token_count(cfg.k, cfg.t, q.s()));
        for codes in q.dynamic_codes.iter().chain(std::iter::once(&q.static_codes)) {
            for &c in codes {
                assert!((c as usize) < cfg.l);
            }
        }
        // coefficients are exact codebook rows
        let entries = &model.store.get(vq::CODEBOOK_PARAM).data;
        let cd = cfg.coeff_dim();
        for (g, &code) in q.static_gaussians.iter().zip(&q.static_codes) {
            assert_eq!(g.coeff, entries[code as usize * cd..(code as usize + 1) * cd]);
        }
    }

    #[test]
    fn decode_gaussians_reconstructs_clip_shape() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone(), 39);
        let clip = random_clip(&cfg, 41);
        let q = model.encode_clip(&clip).unwrap();
        let out = model
            .decode_gaussians(&q.static_gaussians, &q.dynamic_gaussians)
            .unwrap();
        assert_eq!(out.frames, clip.frames);
        assert_eq!((out.h, out.w), (clip.h, clip.w));
        for &v in &out.data {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
