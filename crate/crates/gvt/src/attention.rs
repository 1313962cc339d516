//! Attention primitives: factorized spatio-temporal self-attention (STA),
//! bilinear grid sampling, deformable cross-attention, and the deformable
//! spatio-temporal fusion (DSTF) block that threads latent-grid information
//! into Gaussian queries anchored at their positions.
//!
//! Residual output projections (attention `wo`, MLP second layers on
//! residual paths, deformable offset/logit/output heads) are zero-initialized
//! so every block is exactly the identity at init; training moves them off
//! zero through their own gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::ops::{concat_rows, layer_norm};
use crate::numerics::{BackwardFn, Ctx, ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("shape mismatch at stage `{stage}`: {detail}")]
    Shape { stage: &'static str, detail: String },
}

/// Weight initialization for [`Linear`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    XavierUniform,
    Normal(f64),
    Zero,
}

/// Dense layer `y = x W + b` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Linear {
        let w = match init {
            Init::XavierUniform => {
                let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                (0..in_dim * out_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect()
            }
            Init::Normal(std) => (0..in_dim * out_dim)
                .map(|_| standard_normal(rng) * std)
                .collect(),
            Init::Zero => vec![0.0; in_dim * out_dim],
        };
        store.insert(&format!("{name}.w"), vec![in_dim, out_dim], w);
        store.insert(&format!("{name}.b"), vec![out_dim], vec![0.0; out_dim]);
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.matmul(&w).add_bias(&b)
    }
}

/// Box-Muller draw; two uniforms per sample keeps the stream deterministic.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-token standardization with learned affine terms.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> LayerNorm {
        store.insert(&format!("{name}.gamma"), vec![dim], vec![1.0; dim]);
        store.insert(&format!("{name}.beta"), vec![dim], vec![0.0; dim]);
        LayerNorm {
            name: name.to_string(),
            dim,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let gamma = ctx.param(&format!("{}.gamma", self.name));
        let beta = ctx.param(&format!("{}.beta", self.name));
        layer_norm(x, &gamma, &beta, LN_EPS)
    }
}

/// Two-layer MLP with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_init: Init,
    ) -> Mlp {
        Mlp {
            fc1: Linear::init(store, rng, &format!("{name}.fc1"), in_dim, hidden, Init::XavierUniform),
            fc2: Linear::init(store, rng, &format!("{name}.fc2"), hidden, out_dim, out_init),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        self.fc2.forward(ctx, &self.fc1.forward(ctx, x).gelu())
    }
}

/// Multi-head self-attention over rank-3 input `[batch, n, dim]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::init(store, rng, &format!("{name}.wq"), dim, dim, Init::XavierUniform),
            wk: Linear::init(store, rng, &format!("{name}.wk"), dim, dim, Init::XavierUniform),
            wv: Linear::init(store, rng, &format!("{name}.wv"), dim, dim, Init::XavierUniform),
            wo: Linear::init(store, rng, &format!("{name}.wo"), dim, dim, Init::Zero),
            heads,
            dim,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "attention input must be [batch, n, dim]");
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(c, self.dim);
        let dh = c / self.heads;
        let split = |t: &Tensor| {
            t.reshape(&[b, n, self.heads, dh]).permute(&[0, 2, 1, 3]) // [b,h,n,dh]
        };
        let q = split(&self.wq.forward(ctx, x));
        let k = split(&self.wk.forward(ctx, x));
        let v = split(&self.wv.forward(ctx, x));
        let scores = q.bmm(&k.transpose_last2()).scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax_last(); // rows sum to 1
        let mixed = attn.bmm(&v).permute(&[0, 2, 1, 3]).reshape(&[b, n, c]);
        self.wo.forward(ctx, &mixed)
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> TransformerBlock {
        TransformerBlock {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::init(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::init(
                store,
                rng,
                &format!("{name}.mlp"),
                dim,
                2 * dim,
                dim,
                Init::Zero,
            ),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let x = x.add(&self.attn.forward(ctx, &self.ln1.forward(ctx, x)));
        x.add(&self.mlp.forward(ctx, &self.ln2.forward(ctx, &x)))
    }
}

/// Spatio-temporal attention: self-attention over spatial slots within each
/// time step, then over time steps within each spatial slot.
#[derive(Clone, Debug)]
pub struct Sta {
    pub spatial: TransformerBlock,
    pub temporal: TransformerBlock,
}

impl Sta {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Sta {
        Sta {
            spatial: TransformerBlock::init(store, rng, &format!("{name}.spatial"), dim, heads),
            temporal: TransformerBlock::init(store, rng, &format!("{name}.temporal"), dim, heads),
        }
    }

    /// `[T, N, C] -> [T, N, C]`.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let s = self.spatial.forward(ctx, x);
        let t = self.temporal.forward(ctx, &s.permute(&[1, 0, 2]));
        t.permute(&[1, 0, 2])
    }
}

// ── bilinear sampling ────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct Cell {
    lo: usize,
    hi: usize,
    frac: f64,
    scale: f64,
}

/// Map a normalized coordinate onto the two bracketing pixel centers of a
/// `size`-wide axis, border-clamped. A point at an exact pixel center gets
/// `frac = 0` against that pixel.
fn cell(u: f64, size: usize) -> Cell {
    let xf = u * size as f64 - 0.5;
    let x0f = xf.floor();
    let frac = xf - x0f;
    let lo = (x0f as isize).clamp(0, size as isize - 1) as usize;
    let hi = (x0f as isize + 1).clamp(0, size as isize - 1) as usize;
    Cell {
        lo,
        hi,
        frac,
        scale: size as f64,
    }
}

/// Bilinear interpolation of `grid [h, w, c]` at `points [q, 2]` (normalized
/// `(x, y)` coordinates) over the 4 surrounding pixel centers; out-of-range
/// points clamp to the border, where the point gradient vanishes.
pub fn bilinear_sample(grid: &Tensor, points: &Tensor) -> Tensor {
    grid.assert_same_tape(points);
    assert_eq!(grid.shape().len(), 3, "bilinear_sample: grid must be [h,w,c]");
    let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    assert_eq!(points.shape().len(), 2);
    assert_eq!(points.shape()[1], 2, "bilinear_sample: points must be [q,2]");
    let q = points.shape()[0];
    let gv = grid.data();
    let pv = points.data();
    let mut values = vec![0.0; q * c];
    for i in 0..q {
        let cx = cell(pv[2 * i], w);
        let cy = cell(pv[2 * i + 1], h);
        let out = &mut values[i * c..(i + 1) * c];
        for ci in 0..c {
            let g00 = gv[(cy.lo * w + cx.lo) * c + ci];
            let g01 = gv[(cy.lo * w + cx.hi) * c + ci];
            let g10 = gv[(cy.hi * w + cx.lo) * c + ci];
            let g11 = gv[(cy.hi * w + cx.hi) * c + ci];
            out[ci] = (1.0 - cy.frac) * ((1.0 - cx.frac) * g00 + cx.frac * g01)
                + cy.frac * ((1.0 - cx.frac) * g10 + cx.frac * g11);
        }
    }
    let (idg, rgg) = (grid.id(), grid.requires_grad());
    let (idp, rgp) = (points.id(), points.requires_grad());
    let saved_grid = grid.value();
    let saved_pts = points.value();
    let backward: BackwardFn = Box::new(move |g, sink| {
        if rgg {
            sink.with(idg, |gp| {
                for i in 0..q {
                    let cx = cell(saved_pts[2 * i], w);
                    let cy = cell(saved_pts[2 * i + 1], h);
                    for ci in 0..c {
                        let go = g[i * c + ci];
                        gp[(cy.lo * w + cx.lo) * c + ci] += go * (1.0 - cy.frac) * (1.0 - cx.frac);
                        gp[(cy.lo * w + cx.hi) * c + ci] += go * (1.0 - cy.frac) * cx.frac;
                        gp[(cy.hi * w + cx.lo) * c + ci] += go * cy.frac * (1.0 - cx.frac);
                        gp[(cy.hi * w + cx.hi) * c + ci] += go * cy.frac * cx.frac;
                    }
                }
            });
        }
        if rgp {
            sink.with(idp, |gp| {
                for i in 0..q {
                    let cx = cell(saved_pts[2 * i], w);
                    let cy = cell(saved_pts[2 * i + 1], h);
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ci in 0..c {
                        let go = g[i * c + ci];
                        let g00 = saved_grid[(cy.lo * w + cx.lo) * c + ci];
                        let g01 = saved_grid[(cy.lo * w + cx.hi) * c + ci];
                        let g10 = saved_grid[(cy.hi * w + cx.lo) * c + ci];
                        let g11 = saved_grid[(cy.hi * w + cx.hi) * c + ci];
                        du += go * ((1.0 - cy.frac) * (g01 - g00) + cy.frac * (g11 - g10));
                        dv += go * ((1.0 - cx.frac) * (g10 - g00) + cx.frac * (g11 - g01));
                    }
                    gp[2 * i] += du * cx.scale;
                    gp[2 * i + 1] += dv * cy.scale;
                }
            });
        }
    });
    grid.tape()
        .push("bilinear_sample", vec![q, c], values, rgg || rgp, Some(backward))
}

/// Per-head variant: `values [h, w, m, dv]`, `points [m, q, 2]` →
/// `[m, q, dv]`, head `m` sampling only its own channel group.
pub fn bilinear_sample_heads(values: &Tensor, points: &Tensor) -> Tensor {
    values.assert_same_tape(points);
    assert_eq!(values.shape().len(), 4, "bilinear_sample_heads: values [h,w,m,dv]");
    let (h, w, m, dv) = (
        values.shape()[0],
        values.shape()[1],
        values.shape()[2],
        values.shape()[3],
    );
    assert_eq!(points.shape().len(), 3);
    assert_eq!(points.shape()[0], m, "bilinear_sample_heads: head count");
    assert_eq!(points.shape()[2], 2);
    let q = points.shape()[1];
    let gv = values.data();
    let pv = points.data();
    let at = |y: usize, x: usize, mi: usize, ci: usize| ((y * w + x) * m + mi) * dv + ci;
    let mut out = vec![0.0; m * q * dv];
    for mi in 0..m {
        for i in 0..q {
            let p = &pv[(mi * q + i) * 2..];
            let cx = cell(p[0], w);
            let cy = cell(p[1], h);
            for ci in 0..dv {
                let g00 = gv[at(cy.lo, cx.lo, mi, ci)];
                let g01 = gv[at(cy.lo, cx.hi, mi, ci)];
                let g10 = gv[at(cy.hi, cx.lo, mi, ci)];
                let g11 = gv[at(cy.hi, cx.hi, mi, ci)];
                out[(mi * q + i) * dv + ci] = (1.0 - cy.frac)
                    * ((1.0 - cx.frac) * g00 + cx.frac * g01)
                    + cy.frac * ((1.0 - cx.frac) * g10 + cx.frac * g11);
            }
        }
    }
    let (idg, rgg) = (values.id(), values.requires_grad());
    let (idp, rgp) = (points.id(), points.requires_grad());
    let saved_grid = values.value();
    let saved_pts = points.value();
    let backward: BackwardFn = Box::new(move |g, sink| {
        let at = |y: usize, x: usize, mi: usize, ci: usize| ((y * w + x) * m + mi) * dv + ci;
        if rgg {
            sink.with(idg, |gp| {
                for mi in 0..m {
                    for i in 0..q {
                        let p = &saved_pts[(mi * q + i) * 2..];
                        let cx = cell(p[0], w);
                        let cy = cell(p[1], h);
                        for ci in 0..dv {
                            let go = g[(mi * q + i) * dv + ci];
                            gp[at(cy.lo, cx.lo, mi, ci)] += go * (1.0 - cy.frac) * (1.0 - cx.frac);
                            gp[at(cy.lo, cx.hi, mi, ci)] += go * (1.0 - cy.frac) * cx.frac;
                            gp[at(cy.hi, cx.lo, mi, ci)] += go * cy.frac * (1.0 - cx.frac);
                            gp[at(cy.hi, cx.hi, mi, ci)] += go * cy.frac * cx.frac;
                        }
                    }
                }
            });
        }
        if rgp {
            sink.with(idp, |gp| {
                for mi in 0..m {
                    for i in 0..q {
                        let p = &saved_pts[(mi * q + i) * 2..];
                        let cx = cell(p[0], w);
                        let cy = cell(p[1], h);
                        let mut du = 0.0;
                        let mut dvv = 0.0;
                        for ci in 0..dv {
                            let go = g[(mi * q + i) * dv + ci];
                            let g00 = saved_grid[at(cy.lo, cx.lo, mi, ci)];
                            let g01 = saved_grid[at(cy.lo, cx.hi, mi, ci)];
                            let g10 = saved_grid[at(cy.hi, cx.lo, mi, ci)];
                            let g11 = saved_grid[at(cy.hi, cx.hi, mi, ci)];
                            du += go * ((1.0 - cy.frac) * (g01 - g00) + cy.frac * (g11 - g10));
                            dvv += go * ((1.0 - cx.frac) * (g10 - g00) + cx.frac * (g11 - g01));
                        }
                        gp[(mi * q + i) * 2] += du * cx.scale;
                        gp[(mi * q + i) * 2 + 1] += dvv * cy.scale;
                    }
                }
            });
        }
    });
    values.tape().push(
        "bilinear_sample_heads",
        vec![m, q, dv],
        out,
        rgg || rgp,
        Some(backward),
    )
}

// ── deformable cross-attention ───────────────────────────────────────

/// Per head and query: `P` sampling offsets and `P` attention logits are
/// linear in the query; samples are taken at `ref + offset` on the
/// value-projected grid and combined by softmax weights, concatenated over
/// heads and output-projected. Offsets are expressed in normalized
/// coordinates scaled by `1/max(h, w)` so initial samples stay near the
/// reference.
#[derive(Clone, Debug)]
pub struct DeformableCrossAttention {
    pub value_proj: Linear,
    pub offset_head: Linear,
    pub logit_head: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub points: usize,
    pub query_dim: usize,
}

impl DeformableCrossAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        query_dim: usize,
        feat_dim: usize,
        heads: usize,
        points: usize,
    ) -> DeformableCrossAttention {
        assert!(query_dim % heads == 0, "query dim {query_dim} not divisible by heads {heads}");
        let dv = query_dim / heads;
        DeformableCrossAttention {
            value_proj: Linear::init(
                store,
                rng,
                &format!("{name}.value"),
                feat_dim,
                heads * dv,
                Init::XavierUniform,
            ),
            offset_head: Linear::init(
                store,
                rng,
                &format!("{name}.offset"),
                query_dim,
                heads * points * 2,
                Init::Zero,
            ),
            logit_head: Linear::init(
                store,
                rng,
                &format!("{name}.logit"),
                query_dim,
                heads * points,
                Init::Zero,
            ),
            // the output projection gates latent content into the queries;
            // a zero start would leave the whole block content-blind until
            // the optimizer happens to open it, so it starts small instead
            // (sampling offsets above stay zero-initialized)
            out_proj: Linear::init(
                store,
                rng,
                &format!("{name}.out"),
                heads * dv,
                query_dim,
                Init::Normal(0.05),
            ),
            heads,
            points,
            query_dim,
        }
    }

    /// `query [k, d1]`, `z_grid [h, w, f]`, `refs [k, 2]` → `[k, d1]`.
    pub fn forward(&self, ctx: &Ctx, query: &Tensor, z_grid: &Tensor, refs: &Tensor) -> Tensor {
        let (m, p) = (self.heads, self.points);
        let k = query.shape()[0];
        let (h, w, f) = (z_grid.shape()[0], z_grid.shape()[1], z_grid.shape()[2]);
        let dv = self.query_dim / m;
        let values = self
            .value_proj
            .forward(ctx, &z_grid.reshape(&[h * w, f]))
            .reshape(&[h, w, m, dv]);
        let offsets = self
            .offset_head
            .forward(ctx, query)
            .reshape(&[k, m, p, 2])
            .scale(1.0 / h.max(w) as f64);
        // [k,m,p,2] -> [m,p,k,2] so refs broadcast as a trailing [k,2] block
        let pts = offsets
            .permute(&[1, 2, 0, 3])
            .add_bias(refs)
            .permute(&[0, 2, 1, 3]) // [m,k,p,2]
            .reshape(&[m, k * p, 2]);
        let samples = bilinear_sample_heads(&values, &pts)
            .reshape(&[m, k, p, dv])
            .permute(&[1, 0, 2, 3]); // [k,m,p,dv]
        let weights = self
            .logit_head
            .forward(ctx, query)
            .reshape(&[k, m, p])
            .softmax_last();
        let mixed = samples
            .scale_rows(&weights)
            .sum_axis(2) // [k,m,dv]
            .reshape(&[k, m * dv]);
        self.out_proj.forward(ctx, &mixed)
    }
}

// ── DSTF ─────────────────────────────────────────────────────────────

/// Deformable spatio-temporal fusion. One pass:
/// 1. an MLP aligns Gaussian channels onto the query width, added in;
/// 2. STA over the summed queries;
/// 3. reference points = activated positions (first two Gaussian channels);
/// 4. per-time-step deformable cross-attention against the latent grid,
///    residual;
/// 5. STA again (unshared weights) giving the updated queries;
/// 6. a zero-initialized head maps queries back to a Gaussian residual.
#[derive(Clone, Debug)]
pub struct Dstf {
    pub align: Mlp,
    pub sta_pre: Sta,
    pub deform: DeformableCrossAttention,
    pub sta_post: Sta,
    pub delta_head: Mlp,
    pub gauss_dim: usize,
    pub query_dim: usize,
    pub feat_dim: usize,
}

impl Dstf {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        gauss_dim: usize,
        query_dim: usize,
        feat_dim: usize,
        heads: usize,
        points: usize,
    ) -> Dstf {
        Dstf {
            align: Mlp::init(
                store,
                rng,
                &format!("{name}.align"),
                gauss_dim,
                query_dim,
                query_dim,
                Init::XavierUniform,
            ),
            sta_pre: Sta::init(store, rng, &format!("{name}.sta_pre"), query_dim, heads),
            deform: DeformableCrossAttention::init(
                store,
                rng,
                &format!("{name}.deform"),
                query_dim,
                feat_dim,
                heads,
                points,
            ),
            sta_post: Sta::init(store, rng, &format!("{name}.sta_post"), query_dim, heads),
            // same reasoning as the deformable output projection: the delta
            // head is how content reaches the Gaussians at all
            delta_head: Mlp::init(
                store,
                rng,
                &format!("{name}.delta"),
                query_dim,
                query_dim,
                gauss_dim,
                Init::Normal(0.05),
            ),
            gauss_dim,
            query_dim,
            feat_dim,
        }
    }

    /// `g [t, k, d_g]`, `q [t, k, d_q]`, `z [t, n, f]` with `n = h * w` →
    /// updated `(g', q')` of the same shapes.
    pub fn forward(
        &self,
        ctx: &Ctx,
        g: &Tensor,
        q: &Tensor,
        z: &Tensor,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<(Tensor, Tensor), AttentionError> {
        let shape_err = |stage: &'static str, detail: String| AttentionError::Shape { stage, detail };
        if g.shape().len() != 3 || g.shape()[2] != self.gauss_dim {
            return Err(shape_err("align", format!("gaussian tensor {:?}, want [t,k,{}]", g.shape(), self.gauss_dim)));
        }
        if q.shape().len() != 3
            || q.shape()[0] != g.shape()[0]
            || q.shape()[1] != g.shape()[1]
            || q.shape()[2] != self.query_dim
        {
            return Err(shape_err("query-sum", format!("query tensor {:?} vs gaussians {:?}", q.shape(), g.shape())));
        }
        if z.shape().len() != 3
            || z.shape()[0] != g.shape()[0]
            || z.shape()[1] != grid_h * grid_w
            || z.shape()[2] != self.feat_dim
        {
            return Err(shape_err(
                "deform",
                format!("latent tensor {:?}, want [{},{},{}]", z.shape(), g.shape()[0], grid_h * grid_w, self.feat_dim),
            ));
        }
        let (t, k) = (g.shape()[0], g.shape()[1]);
        let q1 = q.add(&self.align.forward(ctx, g));
        let q2 = self.sta_pre.forward(ctx, &q1);
        let refs = g.narrow(2, 0, 2).sigmoid(); // [t,k,2]
        let mut per_t = Vec::with_capacity(t);
        for ti in 0..t {
            let qt = q2.narrow(0, ti, 1).reshape(&[k, self.query_dim]);
            let zt = z
                .narrow(0, ti, 1)
                .reshape(&[grid_h, grid_w, self.feat_dim]);
            let rt = refs.narrow(0, ti, 1).reshape(&[k, 2]);
            let dt = qt.add(&self.deform.forward(ctx, &qt, &zt, &rt));
            per_t.push(dt.reshape(&[1, k, self.query_dim]));
        }
        let refs_t: Vec<&Tensor> = per_t.iter().collect();
        let q3 = concat_rows(&refs_t);
        let q4 = self.sta_post.forward(ctx, &q3);
        let g_out = g.add(&self.delta_head.forward(ctx, &q4));
        Ok((g_out, q4))
    }
}
