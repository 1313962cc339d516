//! Spatio-temporal Gaussian embedding: map the latent video tensor onto a
//! `T x K` set of 2D Gaussians.
//!
//! The latent grid gets a pointwise channel projection plus a learned
//! positional embedding and one STA pass. A single learnable `K x D2`
//! Gaussian matrix (and `K x D1` query matrix) is duplicated across all
//! time steps — identical Gaussians at every `t` by construction — and only
//! diverges through the residual updates of the fusion blocks; the
//! partitioning stage later exploits exactly that temporal alignment.
//! Position channels start on a jittered uniform grid so the deformable
//! reference points cover the latent grid from step one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionError, Dstf, Init, Linear, Mlp, Sta};
use crate::config::ModelConfig;
use crate::gaussian2d::{Gaussian2D, MIN_SCALE};
use crate::numerics::{Ctx, ParamStore, Tensor};

/// On-tape activated Gaussian fields for all time steps.
#[derive(Clone, Debug)]
pub struct GaussianTensors {
    /// `[t, k, 2]`, sigmoid-constrained to `(0, 1)`.
    pub mu: Tensor,
    /// `[t, k]`, wrapped into `[0, pi)`.
    pub theta: Tensor,
    /// `[t, k, 2]`, softplus + floor.
    pub scales: Tensor,
    /// `[t, k, d-5]`, unconstrained.
    pub coeff: Tensor,
}

impl GaussianTensors {
    pub fn t(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn coeff_dim(&self) -> usize {
        self.coeff.shape()[2]
    }

    /// Materialize plain per-step Gaussian values (`t` outer, `k` inner).
    pub fn to_values(&self) -> Vec<Vec<Gaussian2D>> {
        let (t, k, cd) = (self.t(), self.k(), self.coeff_dim());
        let mu = self.mu.data();
        let th = self.theta.data();
        let sc = self.scales.data();
        let cf = self.coeff.data();
        (0..t)
            .map(|ti| {
                (0..k)
                    .map(|ki| {
                        let g = ti * k + ki;
                        Gaussian2D {
                            mu: [mu[2 * g], mu[2 * g + 1]],
                            theta: th[g],
                            s1: sc[2 * g],
                            s2: sc[2 * g + 1],
                            coeff: cf[g * cd..(g + 1) * cd].to_vec(),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// `T x K` Gaussian records plus the static/dynamic index mask (filled by
/// the partitioning stage; `mask[k] = true` marks a dynamic index).
#[derive(Clone, Debug)]
pub struct GaussianVideoSet {
    pub gaussians: Vec<Vec<Gaussian2D>>,
    pub mask: Vec<bool>,
    pub static_count: usize,
}

/// The embedding network.
#[derive(Clone, Debug)]
pub struct StgeNet {
    pub input_proj: Linear,
    pub input_sta: Sta,
    pub blocks: Vec<Dstf>,
    pub head: Mlp,
    k: usize,
    t: usize,
    d2: usize,
    grid_h: usize,
    grid_w: usize,
    f: usize,
}

impl StgeNet {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> StgeNet {
        let input_proj = Linear::init(
            store,
            rng,
            "stge.input_proj",
            cfg.f_enc,
            cfg.f,
            Init::XavierUniform,
        );
        store.insert(
            "stge.pos_embed",
            vec![cfg.n(), cfg.f],
            (0..cfg.n() * cfg.f)
                .map(|_| crate::attention::standard_normal(rng) * 0.02)
                .collect(),
        );
        let input_sta = Sta::init(store, rng, "stge.input_sta", cfg.f, cfg.heads);
        init_gaussian_params(store, rng, cfg);
        let blocks = (0..cfg.b)
            .map(|bi| {
                Dstf::init(
                    store,
                    rng,
                    &format!("stge.block{bi}"),
                    cfg.d2,
                    cfg.d1,
                    cfg.f,
                    cfg.heads,
                    cfg.points,
                )
            })
            .collect();
        let head = Mlp::init(
            store,
            rng,
            "stge.head",
            cfg.d2,
            cfg.d2,
            cfg.d,
            Init::XavierUniform,
        );
        init_head_geometry_passthrough(store, cfg);
        StgeNet {
            input_proj,
            input_sta,
            blocks,
            head,
            k: cfg.k,
            t: cfg.t,
            d2: cfg.d2,
            grid_h: cfg.grid_h(),
            grid_w: cfg.grid_w(),
            f: cfg.f,
        }
    }

    /// Initial Gaussian and query tensors: the learnable `K x D` matrices
    /// duplicated `T` times, so `g_t^k = g_1^k` exactly at init.
    pub fn init_tensors(&self, ctx: &Ctx) -> (Tensor, Tensor) {
        let g0 = ctx.param("stge.g0").repeat_leading(self.t);
        let q0 = ctx.param("stge.q0").repeat_leading(self.t);
        (g0, q0)
    }

    /// `[t, h, w, f_enc]` latents → joint feature `[t, n, f]`: pointwise
    /// projection, learned positional embedding, one STA pass.
    pub fn prepare_latent(&self, ctx: &Ctx, z_raw: &Tensor) -> Tensor {
        let shape = z_raw.shape();
        assert_eq!(shape.len(), 4, "prepare_latent: want [t,h,w,f_enc]");
        let (t, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!((h, w), (self.grid_h, self.grid_w), "latent grid size mismatch");
        let z = z_raw.reshape(&[t, h * w, shape[3]]);
        let z = self.input_proj.forward(ctx, &z);
        let z = z.add_bias(&ctx.param("stge.pos_embed"));
        self.input_sta.forward(ctx, &z)
    }

    /// Run the fusion blocks and the final head: joint feature `[t, n, f]` →
    /// raw Gaussian parameters `[t, k, d]`.
    pub fn forward(&self, ctx: &Ctx, z: &Tensor) -> Result<Tensor, AttentionError> {
        let (mut g, mut q) = self.init_tensors(ctx);
        for block in &self.blocks {
            let (g2, q2) = block.forward(ctx, &g, &q, z, self.grid_h, self.grid_w)?;
            g = g2;
            q = q2;
        }
        Ok(self.head.forward(ctx, &g))
    }

    /// The initial Gaussian tensor alone (reused by the mask branch).
    pub fn g_init(&self, ctx: &Ctx) -> Tensor {
        ctx.param("stge.g0").repeat_leading(self.t)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.k, self.d2)
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        (self.grid_h, self.grid_w, self.f)
    }
}

/// Register the learnable initial matrices: `g0 [k, d2]` (position channels
/// on a jittered uniform grid, scale channels at roughly one latent cell,
/// remaining channels noise), `q0 [k, d1]`.
fn init_gaussian_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let side = (cfg.k as f64).sqrt().ceil() as usize;
    let mut g0 = vec![0.0; cfg.k * cfg.d2];
    for ki in 0..cfg.k {
        let (row, col) = (ki / side, ki % side);
        for (ch, cell) in [col, row].into_iter().enumerate() {
            let center = (cell as f64 + 0.5) / side as f64;
            let jitter = rng.gen_range(-0.5..0.5) / side as f64;
            let p = (center + jitter).clamp(1e-4, 1.0 - 1e-4);
            g0[ki * cfg.d2 + ch] = (p / (1.0 - p)).ln(); // logit
        }
        g0[ki * cfg.d2 + 2] = crate::attention::standard_normal(rng) * 0.3;
        // softplus(-2) + floor ~ 0.13: splats start near one latent cell
        // instead of the frame-sized softplus default
        for ch in 3..5 {
            g0[ki * cfg.d2 + ch] = -2.0 + crate::attention::standard_normal(rng) * 0.1;
        }
        for ch in 5..cfg.d2 {
            g0[ki * cfg.d2 + ch] = crate::attention::standard_normal(rng) * 0.3;
        }
    }
    store.insert("stge.g0", vec![cfg.k, cfg.d2], g0);
    store.insert(
        "stge.q0",
        vec![cfg.k, cfg.d1],
        (0..cfg.k * cfg.d1)
            .map(|_| crate::attention::standard_normal(rng) * 0.02)
            .collect(),
    );
}

/// Start the final head as an exact pass-through of the five geometry
/// channels: `gelu(x) - gelu(-x) = x`, so hidden pairs `(+g_i, -g_i)`
/// reproduce `g_i` at the output while every weight stays trainable.
/// Coefficient outputs keep their random init. Without this, a random head
/// collapses all activated positions toward the image center regardless of
/// the grid placement of the initial set.
fn init_head_geometry_passthrough(store: &mut ParamStore, cfg: &ModelConfig) {
    assert!(cfg.d2 >= 10, "head pass-through needs d2 >= 10");
    let hid = cfg.d2;
    {
        let w1 = store.get_mut("stge.head.fc1.w"); // [d2, hid]
        for j in 0..cfg.d2 {
            for h in 0..10 {
                w1.data[j * hid + h] = 0.0;
            }
        }
        for i in 0..5 {
            w1.data[i * hid + 2 * i] = 1.0;
            w1.data[i * hid + 2 * i + 1] = -1.0;
        }
    }
    {
        let w2 = store.get_mut("stge.head.fc2.w"); // [hid, d]
        for h in 0..hid {
            for o in 0..5 {
                w2.data[h * cfg.d + o] = 0.0;
            }
        }
        for i in 0..5 {
            w2.data[(2 * i) * cfg.d + i] = 1.0;
            w2.data[(2 * i + 1) * cfg.d + i] = -1.0;
        }
    }
}

/// Activate raw `[t, k, d]` parameters into constrained Gaussian fields.
/// Mirrors the scalar `gaussian2d::activate` on the tape.
pub fn activate_raw(raw: &Tensor) -> GaussianTensors {
    let shape = raw.shape();
    assert_eq!(shape.len(), 3, "activate_raw: want [t,k,d]");
    let (t, k, d) = (shape[0], shape[1], shape[2]);
    assert!(d >= 6);
    GaussianTensors {
        mu: raw.narrow(2, 0, 2).sigmoid(),
        theta: raw
            .narrow(2, 2, 1)
            .reshape(&[t, k])
            .wrap_periodic(std::f64::consts::PI),
        scales: raw.narrow(2, 3, 2).softplus().add_scalar(MIN_SCALE),
        coeff: raw.narrow(2, 5, d - 5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian2d::{activate, RawGaussian};
    use rand::SeedableRng;

    fn toy_net(seed: u64) -> (ParamStore, StgeNet, ModelConfig) {
        let mut cfg = ModelConfig::toy();
        cfg.k = 16;
        cfg.t = 2;
        cfg.d1 = 8;
        cfg.d2 = 11;
        cfg.d3 = 8;
        cfg.b = 2;
        cfg.d = 9;
        cfg.f = 8;
        cfg.f_enc = 6;
        cfg.heads = 2;
        cfg.clip_h = 16;
        cfg.clip_w = 16;
        cfg.validate().unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = StgeNet::init(&mut store, &mut rng, &cfg);
        (store, net, cfg)
    }

    #[test]
    fn init_tensors_duplicate_across_time() {
        let (store, net, cfg) = toy_net(1);
        let ctx = Ctx::new(&store);
        let (g, q) = net.init_tensors(&ctx);
        assert_eq!(g.shape(), &[cfg.t, cfg.k, cfg.d2]);
        assert_eq!(q.shape(), &[cfg.t, cfg.k, cfg.d1]);
        let n = cfg.k * cfg.d2;
        assert_eq!(g.data()[..n], g.data()[n..2 * n]);
        let n = cfg.k * cfg.d1;
        assert_eq!(q.data()[..n], q.data()[n..2 * n]);
    }

    #[test]
    fn grid_init_positions_k4() {
        let mut cfg = ModelConfig::toy();
        cfg.k = 4;
        cfg.d1 = 8;
        cfg.d2 = 10;
        cfg.f = 8;
        cfg.f_enc = 8;
        cfg.heads = 2;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_gaussian_params(&mut store, &mut rng, &cfg);
        let g0 = &store.get("stge.g0").data;
        let centers = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]];
        for ki in 0..4 {
            for ch in 0..2 {
                let raw = g0[ki * cfg.d2 + ch];
                let p = 1.0 / (1.0 + (-raw).exp());
                let want = centers[ki][ch];
                // jitter is at most half a cell (cell = 1/2)
                assert!(
                    (p - want).abs() <= 0.25 + 1e-9,
                    "k={ki} ch={ch}: {p} vs {want}"
                );
            }
        }
    }

    #[test]
    fn prepare_latent_identity_configuration() {
        // identity projection + zero embedding + zero-init STA => reshape only
        let mut cfg = ModelConfig::toy();
        cfg.t = 2;
        cfg.f = 8;
        cfg.f_enc = 8;
        cfg.heads = 2;
        cfg.clip_h = 16;
        cfg.clip_w = 16;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = StgeNet::init(&mut store, &mut rng, &cfg);
        let f = cfg.f;
        let eye: Vec<f64> = (0..f * f)
            .map(|i| if i / f == i % f { 1.0 } else { 0.0 })
            .collect();
        store.get_mut("stge.input_proj.w").data = eye;
        store.get_mut("stge.pos_embed").data = vec![0.0; cfg.n() * f];
        let ctx = Ctx::new(&store);
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let z_data: Vec<f64> = (0..cfg.t * cfg.n() * f).map(|_| r.gen_range(-1.0..1.0)).collect();
        let z_raw = ctx
            .tape
            .constant(z_data.clone(), vec![cfg.t, cfg.grid_h(), cfg.grid_w(), f]);
        let z = net.prepare_latent(&ctx, &z_raw);
        assert_eq!(z.shape(), &[cfg.t, cfg.n(), f]);
        assert_eq!(z.data(), &z_data[..]);
    }

    #[test]
    fn duplicate_frames_give_identical_latent_slices() {
        let (store, net, cfg) = toy_net(9);
        let ctx = Ctx::new(&store);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let frame: Vec<f64> = (0..cfg.n() * cfg.f_enc).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut z_data = frame.clone();
        z_data.extend_from_slice(&frame);
        let z_raw = ctx.tape.constant(z_data, vec![2, cfg.grid_h(), cfg.grid_w(), cfg.f_enc]);
        // projection + positional embedding are per-slot: identical frames
        // stay identical before (and after zero-init) STA
        let z = net.prepare_latent(&ctx, &z_raw);
        let n = cfg.n() * cfg.f;
        assert_eq!(z.data()[..n], z.data()[n..2 * n]);
    }

    #[test]
    fn forward_emits_t_times_k_gaussians() {
        let (store, net, cfg) = toy_net(13);
        let ctx = Ctx::new(&store);
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let z = ctx.tape.constant(
            (0..cfg.t * cfg.n() * cfg.f).map(|_| r.gen_range(-1.0..1.0)).collect(),
            vec![cfg.t, cfg.n(), cfg.f],
        );
        let raw = net.forward(&ctx, &z).unwrap();
        assert_eq!(raw.shape(), &[cfg.t, cfg.k, cfg.d]);
        assert_eq!(raw.numel() / cfg.d, cfg.t * cfg.k);
    }

    #[test]
    fn zero_init_residual_chain_reduces_to_head_of_init() {
        let (mut store, net, cfg) = toy_net(19);
        // zero every block's delta head: the Gaussians then never leave
        // their initialization and the output is head(g_init) exactly
        let delta_params: Vec<String> = store
            .iter()
            .filter(|(n, _)| n.contains(".delta.fc2."))
            .map(|(n, _)| n.clone())
            .collect();
        for n in delta_params {
            store.get_mut(&n).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let ctx = Ctx::new(&store);
        let mut r = ChaCha8Rng::seed_from_u64(23);
        let z = ctx.tape.constant(
            (0..cfg.t * cfg.n() * cfg.f).map(|_| r.gen_range(-1.0..1.0)).collect(),
            vec![cfg.t, cfg.n(), cfg.f],
        );
        let raw = net.forward(&ctx, &z).unwrap();
        let (g0, _) = net.init_tensors(&ctx);
        let want = net.head.forward(&ctx, &g0);
        assert_eq!(raw.data(), want.data());
    }

    #[test]
    fn activation_satisfies_invariants_for_random_weights() {
        for seed in 0..20 {
            let tape = crate::numerics::Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let raw = tape.constant(
                (0..2 * 6 * 9).map(|_| r.gen_range(-60.0..60.0)).collect(),
                vec![2, 6, 9],
            );
            let g = activate_raw(&raw);
            for &m in g.mu.data() {
                assert!((0.0..=1.0).contains(&m));
            }
            for &th in g.theta.data() {
                assert!((0.0..std::f64::consts::PI).contains(&th));
            }
            for &s in g.scales.data() {
                assert!(s >= MIN_SCALE);
            }
        }
    }

    #[test]
    fn tape_activation_matches_scalar_activation() {
        let tape = crate::numerics::Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(29);
        let d = 9;
        let data: Vec<f64> = (0..d).map(|_| r.gen_range(-4.0..4.0)).collect();
        let raw_t = tape.constant(data.clone(), vec![1, 1, d]);
        let g = activate_raw(&raw_t);
        let scalar = activate(&RawGaussian {
            raw_pos: [data[0], data[1]],
            raw_theta: data[2],
            raw_scales: [data[3], data[4]],
            coeff: data[5..].to_vec(),
        });
        assert!((g.mu.data()[0] - scalar.mu[0]).abs() < 1e-15);
        assert!((g.mu.data()[1] - scalar.mu[1]).abs() < 1e-15);
        assert!((g.theta.data()[0] - scalar.theta).abs() < 1e-15);
        assert!((g.scales.data()[0] - scalar.s1).abs() < 1e-15);
        assert!((g.scales.data()[1] - scalar.s2).abs() < 1e-15);
        assert_eq!(g.coeff.data(), &data[5..]);
    }
}
