//! Gaussian set partitioning: a per-index binary mask splits the `T x K`
//! set into static Gaussians (stored once, the `t = 1` record reused for
//! every step) and dynamic Gaussians (one record per step).
//!
//! The mask comes from a dedicated fusion branch (weights not shared with
//! the embedding network) followed by straight-through binarization:
//! forward uses the hard `{0, 1}` values, backward flows through the
//! sigmoid. The regularizer charges `lambda1 * mean(m)` plus a hinge above
//! the dynamic-fraction threshold `tau`, computed on the straight-through
//! values so the penalized mean is the mask actually applied. A soft value
//! of exactly 0.5 binarizes to 0 (static) — deterministic, and it biases
//! toward compression.

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionError, Dstf, Init, Mlp};
use crate::config::GspConfig;
use crate::gaussian2d::Gaussian2D;
use crate::numerics::{Ctx, ParamStore, Tensor};
use crate::stge::GaussianVideoSet;

/// Stored token count after partitioning: `S` static records plus
/// `(K - S)` dynamic records for each of `T` steps.
pub fn token_count(k: usize, t: usize, s: usize) -> usize {
    assert!(s <= k, "static count {s} exceeds {k}");
    s + (k - s) * t
}

/// Hard mask on the tape plus the soft probabilities retained for backward.
#[derive(Clone, Debug)]
pub struct BinaryMask {
    /// `{0, 1}` straight-through values, length `K`.
    pub hard: Tensor,
    /// Sigmoid probabilities in `(0, 1)`, length `K`.
    pub soft: Tensor,
}

impl BinaryMask {
    pub fn hard_values(&self) -> Vec<bool> {
        self.hard.data().iter().map(|&v| v > 0.5).collect()
    }

    pub fn dynamic_count(&self) -> usize {
        self.hard.data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn static_count(&self) -> usize {
        self.hard.numel() - self.dynamic_count()
    }

    pub fn mean(&self) -> f64 {
        self.hard.data().iter().sum::<f64>() / self.hard.numel().max(1) as f64
    }
}

/// Sigmoid + straight-through threshold. `soft > 0.5` maps to 1 (strict);
/// the gradient of the hard output w.r.t. the logits equals the sigmoid
/// derivative.
pub fn binarize_ste(logits: &Tensor) -> BinaryMask {
    let soft = logits.sigmoid();
    let hard = soft.hard_gate();
    BinaryMask { hard, soft }
}

/// `lambda1 * mean(m) + lambda2 * relu(mean(m) - tau)` on the
/// straight-through mask values.
pub fn gsp_loss(mask: &BinaryMask, cfg: &GspConfig) -> Tensor {
    let mean = mask.hard.mean_all();
    let pressure = mean.scale(cfg.lambda1);
    let hinge = mean.add_scalar(-cfg.tau).relu().scale(cfg.lambda2);
    pressure.add(&hinge)
}

/// Mask branch: one fusion pass over dedicated mask queries, reshaped to
/// `K x (T * D3)` and reduced to one logit per Gaussian index.
#[derive(Clone, Debug)]
pub struct GspBranch {
    pub dstf: Dstf,
    pub head: Mlp,
    k: usize,
    t: usize,
    d3: usize,
}

impl GspBranch {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &crate::config::ModelConfig,
    ) -> GspBranch {
        store.insert(
            "gsp.m0",
            vec![cfg.k, cfg.d3],
            (0..cfg.k * cfg.d3)
                .map(|_| crate::attention::standard_normal(rng) * 0.02)
                .collect(),
        );
        let dstf = Dstf::init(
            store,
            rng,
            "gsp.dstf",
            cfg.d2,
            cfg.d3,
            cfg.f,
            cfg.heads,
            cfg.points,
        );
        let head = Mlp::init(
            store,
            rng,
            "gsp.head",
            cfg.t * cfg.d3,
            cfg.d3,
            1,
            Init::XavierUniform,
        );
        // start every index dynamic (soft ~ 0.73): the regularizer prunes
        // toward tau while reconstruction keeps the indices that matter;
        // starting static instead would saturate the sigmoids before the
        // reconstruction path can vote
        store.get_mut("gsp.head.fc2.b").data[0] = 1.0;
        GspBranch {
            dstf,
            head,
            k: cfg.k,
            t: cfg.t,
            d3: cfg.d3,
        }
    }

    /// `g_init [t, k, d2]` (the pre-update initial Gaussians), joint latents
    /// `z [t, n, f]` → one logit per Gaussian index, length `K`.
    pub fn mask_logits(
        &self,
        ctx: &Ctx,
        g_init: &Tensor,
        z: &Tensor,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Tensor, AttentionError> {
        let m_init = ctx.param("gsp.m0").repeat_leading(self.t);
        let (_, m_out) = self.dstf.forward(ctx, g_init, &m_init, z, grid_h, grid_w)?;
        let per_index = m_out.permute(&[1, 0, 2]).reshape(&[self.k, self.t * self.d3]);
        Ok(self.head.forward(ctx, &per_index).reshape(&[self.k]))
    }
}

/// Static/dynamic index bookkeeping for one mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionIndices {
    pub static_idx: Vec<usize>,
    pub dynamic_idx: Vec<usize>,
    pub k: usize,
}

impl PartitionIndices {
    /// `mask[k] = true` marks a dynamic index.
    pub fn from_mask(mask: &[bool]) -> PartitionIndices {
        let static_idx = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let dynamic_idx = (0..mask.len()).filter(|&i| mask[i]).collect();
        PartitionIndices {
            static_idx,
            dynamic_idx,
            k: mask.len(),
        }
    }

    pub fn s(&self) -> usize {
        self.static_idx.len()
    }

    pub fn token_count(&self, t: usize) -> usize {
        token_count(self.k, t, self.s())
    }
}

/// Split a `T x K` value set: static indices keep only their `t = 1`
/// record, dynamic indices keep all `T`.
pub fn partition_values(
    gaussians: &[Vec<Gaussian2D>],
    idx: &PartitionIndices,
) -> (Vec<Gaussian2D>, Vec<Vec<Gaussian2D>>) {
    let static_set = idx
        .static_idx
        .iter()
        .map(|&k| gaussians[0][k].clone())
        .collect();
    let dynamic = gaussians
        .iter()
        .map(|step| idx.dynamic_idx.iter().map(|&k| step[k].clone()).collect())
        .collect();
    (static_set, dynamic)
}

/// Rebuild the full `T x K` ordering from a partitioned set, substituting
/// the shared static record at every step (the replacement-by-`t=1`
/// semantics the partition encodes).
pub fn reassemble(
    static_set: &[Gaussian2D],
    dynamic: &[Vec<Gaussian2D>],
    idx: &PartitionIndices,
) -> Vec<Vec<Gaussian2D>> {
    let t = dynamic.len();
    let mut out = Vec::with_capacity(t);
    for ti in 0..t {
        let mut step: Vec<Option<Gaussian2D>> = vec![None; idx.k];
        for (si, &k) in idx.static_idx.iter().enumerate() {
            step[k] = Some(static_set[si].clone());
        }
        for (di, &k) in idx.dynamic_idx.iter().enumerate() {
            step[k] = Some(dynamic[ti][di].clone());
        }
        out.push(step.into_iter().map(|g| g.expect("index covered")).collect());
    }
    out
}

/// Partition an activated value set with a computed mask.
pub fn partition_set(set: &GaussianVideoSet) -> (Vec<Gaussian2D>, Vec<Vec<Gaussian2D>>, PartitionIndices) {
    let idx = PartitionIndices::from_mask(&set.mask);
    debug_assert_eq!(idx.s(), set.static_count);
    let (st, dy) = partition_values(&set.gaussians, &idx);
    (st, dy, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::numerics::Tape;
    use rand::{Rng, SeedableRng};

    #[test]
    fn binarize_examples() {
        let tape = Tape::new();
        let logits = tape.leaf(vec![2.0, -1.0, 0.0], vec![3], true);
        let mask = binarize_ste(&logits);
        assert!((mask.soft.data()[0] - 0.8808).abs() < 1e-4);
        assert!((mask.soft.data()[1] - 0.2689).abs() < 1e-4);
        assert_eq!(mask.soft.data()[2], 0.5);
        // logit 0 => soft exactly 0.5 => static (strict > rule)
        assert_eq!(mask.hard.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ste_gradient_equals_sigmoid_derivative() {
        let tape = Tape::new();
        let logits = tape.leaf(vec![1.3, -0.4, 0.2, 3.0], vec![4], true);
        let mask = binarize_ste(&logits);
        for v in mask.hard.data() {
            assert!(*v == 0.0 || *v == 1.0);
        }
        let loss = mask.hard.sum_all();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&logits).unwrap();
        for (i, &l) in logits.data().iter().enumerate() {
            let s = 1.0 / (1.0 + (-l as f64).exp());
            assert!((g[i] - s * (1.0 - s)).abs() < 1e-12);
        }
    }

    #[test]
    fn gsp_loss_reference_values() {
        let cfg = GspConfig::default();
        let tape = Tape::new();
        let k = 8;

        let all_static = BinaryMask {
            hard: tape.constant(vec![0.0; k], vec![k]),
            soft: tape.constant(vec![0.1; k], vec![k]),
        };
        assert_eq!(gsp_loss(&all_static, &cfg).scalar(), 0.0);

        let all_dynamic = BinaryMask {
            hard: tape.constant(vec![1.0; k], vec![k]),
            soft: tape.constant(vec![0.9; k], vec![k]),
        };
        let loss = gsp_loss(&all_dynamic, &cfg).scalar();
        assert!((loss - 0.02).abs() < 1e-12, "{loss}");

        // mean(m) = tau exactly: hinge contributes 0
        let at_tau = BinaryMask {
            hard: tape.constant(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![k]),
            soft: tape.constant(vec![0.5; k], vec![k]),
        };
        let loss = gsp_loss(&at_tau, &cfg).scalar();
        assert!((loss - 0.00125).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn gsp_loss_nonnegative_and_zero_iff_empty_mask() {
        let cfg = GspConfig::default();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let hard: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let any = hard.iter().any(|&v| v > 0.0);
            let mask = BinaryMask {
                hard: tape.constant(hard, vec![16]),
                soft: tape.constant(vec![0.5; 16], vec![16]),
            };
            let loss = gsp_loss(&mask, &cfg).scalar();
            assert!(loss >= 0.0);
            assert_eq!(loss == 0.0, !any);
        }
    }

    #[test]
    fn token_count_arithmetic() {
        assert_eq!(token_count(512, 5, 0), 2560);
        assert_eq!(token_count(512, 5, 173), 1868);
        assert_eq!(token_count(512, 5, 512), 512);
        // monotone decreasing in s for t > 1
        let mut prev = usize::MAX;
        for s in (0..=512).step_by(64) {
            let c = token_count(512, 5, s);
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn partition_all_ones_and_all_zeros() {
        let g = dummy_set(3, 4);
        let all_dyn = PartitionIndices::from_mask(&[true; 4]);
        let (st, dy) = partition_values(&g, &all_dyn);
        assert!(st.is_empty());
        assert_eq!(dy.len(), 3);
        assert_eq!(dy[0].len(), 4);

        let all_static = PartitionIndices::from_mask(&[false; 4]);
        let (st, dy) = partition_values(&g, &all_static);
        assert_eq!(st.len(), 4);
        assert!(dy.iter().all(|d| d.is_empty()));
        // all-static renders identically across steps
        let grids = crate::rasterizer::render_video(
            &st,
            &dy,
            4,
            4,
            2,
            &crate::rasterizer::RenderOptions::default(),
        )
        .unwrap();
        assert_eq!(grids[0], grids[1]);
        assert_eq!(grids[0], grids[2]);
    }

    #[test]
    fn partition_reassembly_roundtrip() {
        // K=4, T=3, mask (1,0,1,0): S=2, dynamic 3x2; reassembly restores
        // the original ordering with indices 0 and 2 varying over time
        let g = dummy_set(3, 4);
        let idx = PartitionIndices::from_mask(&[true, false, true, false]);
        assert_eq!(idx.s(), 2);
        let (st, dy) = partition_values(&g, &idx);
        assert_eq!(dy.iter().map(Vec::len).sum::<usize>(), 6);
        let back = reassemble(&st, &dy, &idx);
        for ti in 0..3 {
            for k in [0usize, 2] {
                assert_eq!(back[ti][k], g[ti][k], "dynamic index preserved per t");
            }
            for k in [1usize, 3] {
                assert_eq!(back[ti][k], g[0][k], "static index pinned to t=1");
            }
        }
    }

    #[test]
    fn mask_logits_shape_zero_head_and_determinism() {
        let mut cfg = ModelConfig::toy();
        cfg.k = 8;
        cfg.t = 2;
        cfg.d1 = 8;
        cfg.d2 = 10;
        cfg.d3 = 8;
        cfg.f = 8;
        cfg.f_enc = 8;
        cfg.heads = 2;
        cfg.clip_h = 8;
        cfg.clip_w = 8;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let branch = GspBranch::init(&mut store, &mut rng, &cfg);
        store.insert(
            "g_init_stub",
            vec![cfg.k, cfg.d2],
            (0..cfg.k * cfg.d2).map(|i| i as f64 * 0.013 - 0.5).collect(),
        );
        let run = |store: &ParamStore| -> Vec<f64> {
            let ctx = Ctx::new(store);
            let g_init = ctx.param("g_init_stub").repeat_leading(cfg.t);
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let z = ctx.tape.constant(
                (0..cfg.t * cfg.n() * cfg.f).map(|_| r.gen_range(-1.0..1.0)).collect(),
                vec![cfg.t, cfg.n(), cfg.f],
            );
            let logits = branch
                .mask_logits(&ctx, &g_init, &z, cfg.grid_h(), cfg.grid_w())
                .unwrap();
            assert_eq!(logits.shape(), &[cfg.k]);
            logits.to_vec()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b, "two runs bit-identical");

        // zero-weight final head => all logits zero
        store.get_mut("gsp.head.fc2.w").data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("gsp.head.fc2.b").data.iter_mut().for_each(|v| *v = 0.0);
        let z = run(&store);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    fn dummy_set(t: usize, k: usize) -> Vec<Vec<Gaussian2D>> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..t)
            .map(|_| {
                (0..k)
                    .map(|_| Gaussian2D {
                        mu: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
                        theta: rng.gen_range(0.0..std::f64::consts::PI),
                        s1: rng.gen_range(0.05..0.3),
                        s2: rng.gen_range(0.05..0.3),
                        coeff: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    })
                    .collect()
            })
            .collect()
    }
}
