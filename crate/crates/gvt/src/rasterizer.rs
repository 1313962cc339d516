//! Radiance-weighted token rendering from 2D Gaussian sets.
//!
//! Each token at grid center `p` accumulates `sum_k exp(-1/2 d^T Sigma_k^-1 d)
//! * coeff_k` with `d = p - mu_k`, summed over every Gaussian — no culling by
//! default (an opt-in conservative radius cutoff exists behind
//! [`RenderOptions::cull_threshold`]). Static Gaussians are passed as a
//! prefix shared across time steps, so their partial sums are bit-identical
//! for every `t`.
//!
//! Rendering is data-parallel over tokens and the backward pass over
//! Gaussians; every output element is a fixed-order sequential reduction, so
//! results do not depend on thread count. `GVT_THREADS` bounds the pool.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::gaussian2d::{Gaussian2D, GaussianError, MIN_DET};
use crate::numerics::{BackwardFn, Tensor};

/// Token center in normalized coordinates, pixel-center convention.
pub fn token_center(x: usize, y: usize, w: usize, h: usize) -> [f64; 2] {
    [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]
}

/// Rendered latent token grid (row-major `h x w x channels`).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl TokenGrid {
    pub fn token(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.w + x) * self.channels;
        &self.values[base..base + self.channels]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub parallel: bool,
    /// Skip Gaussians whose weight at the token provably falls below this
    /// threshold (a conservative bounding-radius test). `None` = exact sum.
    pub cull_threshold: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            parallel: true,
            cull_threshold: None,
        }
    }
}

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Run `f` inside the render pool. `GVT_THREADS=n` (n >= 1) bounds kernel
/// parallelism; unset or invalid falls back to rayon's global default.
fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let pool = POOL.get_or_init(|| {
        std::env::var("GVT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .and_then(|n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .ok()
            })
    });
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Per-Gaussian quantities for the rotated-frame weight evaluation:
/// `q = (c dx + s dy)^2 / s1^2 + (-s dx + c dy)^2 / s2^2`.
#[derive(Clone, Copy)]
struct SplatFrame {
    cx: f64,
    cy: f64,
    sin: f64,
    cos: f64,
    e1: f64,
    e2: f64,
    s1: f64,
    s2: f64,
    cull_r2: f64,
}

impl SplatFrame {
    fn new(mu: [f64; 2], theta: f64, s1: f64, s2: f64, cull: Option<f64>) -> Result<Self, GaussianError> {
        let det = (s1 * s1) * (s2 * s2);
        if !(det >= MIN_DET) {
            return Err(GaussianError::IllConditioned { det, s1, s2 });
        }
        let (sin, cos) = theta.rem_euclid(std::f64::consts::PI).sin_cos();
        let smax = s1.max(s2);
        // w <= exp(-|d|^2 / (2 smax^2)), so |d|^2 > -2 ln(thr) smax^2 => w < thr
        let cull_r2 = match cull {
            Some(thr) if thr > 0.0 => -2.0 * thr.ln() * smax * smax,
            _ => f64::INFINITY,
        };
        Ok(SplatFrame {
            cx: mu[0],
            cy: mu[1],
            sin,
            cos,
            e1: 1.0 / (s1 * s1),
            e2: 1.0 / (s2 * s2),
            s1,
            s2,
            cull_r2,
        })
    }

    #[inline]
    fn weight(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.cx;
        let dy = py - self.cy;
        if dx * dx + dy * dy > self.cull_r2 {
            return 0.0;
        }
        let v1 = self.cos * dx + self.sin * dy;
        let v2 = -self.sin * dx + self.cos * dy;
        (-0.5 * (v1 * v1 * self.e1 + v2 * v2 * self.e2)).exp()
    }
}

/// `exp(-1/2 (p - mu)^T Sigma^-1 (p - mu))` — 1 exactly at the center,
/// in `(0, 1]` everywhere.
pub fn radiance_weight(query: [f64; 2], g: &Gaussian2D) -> Result<f64, GaussianError> {
    let cov = g.covariance()?;
    let d = [query[0] - g.mu[0], query[1] - g.mu[1]];
    let q = d[0] * (cov.sigma_inv[0][0] * d[0] + cov.sigma_inv[0][1] * d[1])
        + d[1] * (cov.sigma_inv[1][0] * d[0] + cov.sigma_inv[1][1] * d[1]);
    Ok((-0.5 * q).exp())
}

/// Render one token: exact sum over all Gaussians, no culling.
/// An empty set renders the zero vector (documented degenerate case).
pub fn render_token(
    query: [f64; 2],
    gaussians: &[Gaussian2D],
    coeff_dim: usize,
) -> Result<Vec<f64>, GaussianError> {
    let mut out = vec![0.0; coeff_dim];
    for g in gaussians {
        debug_assert_eq!(g.coeff.len(), coeff_dim);
        let w = radiance_weight(query, g)?;
        for (o, c) in out.iter_mut().zip(&g.coeff) {
            *o += w * c;
        }
    }
    Ok(out)
}

/// Render every token of an `h x w` grid for one time step.
pub fn render_grid(
    gaussians: &[Gaussian2D],
    h: usize,
    w: usize,
    coeff_dim: usize,
    opts: &RenderOptions,
) -> Result<TokenGrid, GaussianError> {
    let mut frames = Vec::with_capacity(gaussians.len());
    for g in gaussians {
        assert_eq!(g.coeff.len(), coeff_dim, "render_grid: coefficient width mismatch");
        frames.push(SplatFrame::new(g.mu, g.theta, g.s1, g.s2, opts.cull_threshold)?);
    }
    let mut values = vec![0.0; h * w * coeff_dim];
    let render_one = |i: usize, out: &mut [f64]| {
        let (y, x) = (i / w, i % w);
        let [px, py] = token_center(x, y, w, h);
        for (frame, g) in frames.iter().zip(gaussians) {
            let wt = frame.weight(px, py);
            if wt == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(&g.coeff) {
                *o += wt * c;
            }
        }
    };
    if opts.parallel {
        install(|| {
            values
                .par_chunks_mut(coeff_dim)
                .enumerate()
                .for_each(|(i, out)| render_one(i, out));
        });
    } else {
        for (i, out) in values.chunks_mut(coeff_dim).enumerate() {
            render_one(i, out);
        }
    }
    Ok(TokenGrid {
        h,
        w,
        channels: coeff_dim,
        values,
    })
}

/// Render `T` grids from a static set shared across time plus per-step
/// dynamic sets. The static Gaussians form a fixed prefix of each step's
/// sum, so their contribution is bit-identical for every `t`.
pub fn render_video(
    static_set: &[Gaussian2D],
    dynamic: &[Vec<Gaussian2D>],
    h: usize,
    w: usize,
    coeff_dim: usize,
    opts: &RenderOptions,
) -> Result<Vec<TokenGrid>, GaussianError> {
    let mut grids = Vec::with_capacity(dynamic.len());
    let mut merged: Vec<Gaussian2D> = Vec::new();
    for dyn_t in dynamic {
        merged.clear();
        merged.extend_from_slice(static_set);
        merged.extend_from_slice(dyn_t);
        grids.push(render_grid(&merged, h, w, coeff_dim, opts)?);
    }
    Ok(grids)
}

// ── tape op ──────────────────────────────────────────────────────────

/// Differentiable render of one time step's Gaussian set onto an `h x w`
/// token grid: `mu [K,2]`, `theta [K]`, `scales [K,2]`, `coeff [K,C]` →
/// `[h*w, C]`.
///
/// Gradients are analytic: `d out / d coeff_k = w_ik`, geometry gradients
/// through the rotated-frame Mahalanobis form. The backward pass is
/// parallel over Gaussians with a fixed-order reduction over tokens.
pub fn render_splats(
    mu: &Tensor,
    theta: &Tensor,
    scales: &Tensor,
    coeff: &Tensor,
    h: usize,
    w: usize,
) -> Tensor {
    mu.assert_same_tape(theta);
    mu.assert_same_tape(scales);
    mu.assert_same_tape(coeff);
    let k = mu.shape()[0];
    assert_eq!(mu.shape(), &[k, 2], "render_splats: mu shape");
    assert_eq!(theta.shape(), &[k], "render_splats: theta shape");
    assert_eq!(scales.shape(), &[k, 2], "render_splats: scales shape");
    assert_eq!(coeff.shape()[0], k, "render_splats: coeff rows");
    let c = if coeff.shape().len() == 2 { coeff.shape()[1] } else { 0 };
    let n = h * w;
    let tape = mu.tape().clone();

    let build_frames = move |mu: &[f64], theta: &[f64], scales: &[f64]| -> Result<Vec<SplatFrame>, GaussianError> {
        (0..k)
            .map(|i| {
                SplatFrame::new(
                    [mu[2 * i], mu[2 * i + 1]],
                    theta[i],
                    scales[2 * i],
                    scales[2 * i + 1],
                    None,
                )
            })
            .collect()
    };

    let frames = match build_frames(mu.data(), theta.data(), scales.data()) {
        Ok(f) => f,
        Err(e) => {
            tape.poison("render_splats", tape.len(), e.to_string());
            return tape.push("render_splats", vec![n, c], vec![0.0; n * c], false, None);
        }
    };

    let coeff_v = coeff.data();
    let mut values = vec![0.0; n * c];
    install(|| {
        values.par_chunks_mut(c.max(1)).enumerate().for_each(|(i, out)| {
            let (y, x) = (i / w, i % w);
            let [px, py] = token_center(x, y, w, h);
            for (ki, frame) in frames.iter().enumerate() {
                let wt = frame.weight(px, py);
                for ci in 0..c {
                    out[ci] += wt * coeff_v[ki * c + ci];
                }
            }
        });
    });

    let rg = mu.requires_grad()
        || theta.requires_grad()
        || scales.requires_grad()
        || coeff.requires_grad();
    let ids = [mu.id(), theta.id(), scales.id(), coeff.id()];
    let rgs = [
        mu.requires_grad(),
        theta.requires_grad(),
        scales.requires_grad(),
        coeff.requires_grad(),
    ];
    let saved_mu = mu.value();
    let saved_theta = theta.value();
    let saved_scales = scales.value();
    let saved_coeff = coeff.value();
    let backward: BackwardFn = Box::new(move |g, sink| {
        let frames = build_frames(&saved_mu, &saved_theta, &saved_scales)
            .expect("render_splats backward: forward already validated conditioning");
        // per-Gaussian scratch: [gmu_x, gmu_y, gtheta, gs1, gs2, gcoeff...]
        let stride = 5 + c;
        let mut scratch = vec![0.0; k * stride];
        let centers: Vec<[f64; 2]> = (0..n)
            .map(|i| token_center(i % w, i / w, w, h))
            .collect();
        install(|| {
            scratch
                .par_chunks_mut(stride)
                .enumerate()
                .for_each(|(ki, acc)| {
                    let f = &frames[ki];
                    let cf = &saved_coeff[ki * c..(ki + 1) * c];
                    for (i, &[px, py]) in centers.iter().enumerate() {
                        let dx = px - f.cx;
                        let dy = py - f.cy;
                        let v1 = f.cos * dx + f.sin * dy;
                        let v2 = -f.sin * dx + f.cos * dy;
                        let q = v1 * v1 * f.e1 + v2 * v2 * f.e2;
                        let wt = (-0.5 * q).exp();
                        let gi = &g[i * c..(i + 1) * c];
                        let mut u = 0.0;
                        for ci in 0..c {
                            u += gi[ci] * cf[ci];
                            acc[5 + ci] += wt * gi[ci];
                        }
                        let uw = u * wt;
                        acc[0] += uw * (v1 * f.e1 * f.cos - v2 * f.e2 * f.sin);
                        acc[1] += uw * (v1 * f.e1 * f.sin + v2 * f.e2 * f.cos);
                        acc[2] += -uw * v1 * v2 * (f.e1 - f.e2);
                        acc[3] += uw * v1 * v1 / (f.s1 * f.s1 * f.s1);
                        acc[4] += uw * v2 * v2 / (f.s2 * f.s2 * f.s2);
                    }
                });
        });
        let scratch = Arc::new(scratch);
        if rgs[0] {
            let s = Arc::clone(&scratch);
            sink.with(ids[0], |gp| {
                for ki in 0..k {
                    gp[2 * ki] += s[ki * stride];
                    gp[2 * ki + 1] += s[ki * stride + 1];
                }
            });
        }
        if rgs[1] {
            let s = Arc::clone(&scratch);
            sink.with(ids[1], |gp| {
                for ki in 0..k {
                    gp[ki] += s[ki * stride + 2];
                }
            });
        }
        if rgs[2] {
            let s = Arc::clone(&scratch);
            sink.with(ids[2], |gp| {
                for ki in 0..k {
                    gp[2 * ki] += s[ki * stride + 3];
                    gp[2 * ki + 1] += s[ki * stride + 4];
                }
            });
        }
        if rgs[3] {
            let s = Arc::clone(&scratch);
            sink.with(ids[3], |gp| {
                for ki in 0..k {
                    for ci in 0..c {
                        gp[ki * c + ci] += s[ki * stride + 5 + ci];
                    }
                }
            });
        }
    });
    tape.push("render_splats", vec![n, c], values, rg, Some(backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian2d::Gaussian2D;
    use crate::numerics::{finite_diff_check, FdOptions, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(mu: [f64; 2], theta: f64, s1: f64, s2: f64, coeff: Vec<f64>) -> Gaussian2D {
        Gaussian2D {
            mu,
            theta,
            s1,
            s2,
            coeff,
        }
    }

    fn random_gaussians(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Gaussian2D> {
        (0..k)
            .map(|_| {
                gauss(
                    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                    rng.gen_range(0.0..std::f64::consts::PI),
                    rng.gen_range(0.03..0.5),
                    rng.gen_range(0.03..0.5),
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    /// Independent scalar reference: explicit (R S)(R S)^T covariance build,
    /// adjugate 2x2 inverse, naive double loop.
    pub(crate) fn oracle_render(
        gaussians: &[Gaussian2D],
        h: usize,
        w: usize,
        dim: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; h * w * dim];
        for y in 0..h {
            for x in 0..w {
                let p = token_center(x, y, w, h);
                for g in gaussians {
                    let (sn, cs) = (g.theta.sin(), g.theta.cos());
                    let m = [[cs * g.s1, -sn * g.s2], [sn * g.s1, cs * g.s2]]; // R S
                    let sig = [
                        [
                            m[0][0] * m[0][0] + m[0][1] * m[0][1],
                            m[0][0] * m[1][0] + m[0][1] * m[1][1],
                        ],
                        [
                            m[1][0] * m[0][0] + m[1][1] * m[0][1],
                            m[1][0] * m[1][0] + m[1][1] * m[1][1],
                        ],
                    ];
                    let det = sig[0][0] * sig[1][1] - sig[0][1] * sig[1][0];
                    let inv = [
                        [sig[1][1] / det, -sig[0][1] / det],
                        [-sig[1][0] / det, sig[0][0] / det],
                    ];
                    let d = [p[0] - g.mu[0], p[1] - g.mu[1]];
                    let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1])
                        + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
                    let wt = (-0.5 * q).exp();
                    for c in 0..dim {
                        out[(y * w + x) * dim + c] += wt * g.coeff[c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn weight_is_one_at_center() {
        let g = gauss([0.3, 0.7], 0.9, 0.2, 0.05, vec![1.0]);
        assert_eq!(radiance_weight([0.3, 0.7], &g).unwrap(), 1.0);
    }

    #[test]
    fn weight_closed_form_isotropic() {
        let g = gauss([0.0, 0.0], 0.0, 1.0, 1.0, vec![1.0]);
        let w = radiance_weight([2.0, 0.0], &g).unwrap();
        assert!((w - (-2.0f64).exp()).abs() < 1e-12);
        assert!((w - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn weight_anisotropic_quadratic_form() {
        // offset (1,1), sigma = diag(4,1): q = 1/4 + 1 = 1.25
        let g = gauss([0.0, 0.0], 0.0, 2.0, 1.0, vec![1.0]);
        let w = radiance_weight([1.0, 1.0], &g).unwrap();
        assert!((w - (-0.625f64).exp()).abs() < 1e-12);
        assert!((w - 0.53526).abs() < 1e-5);
    }

    #[test]
    fn render_token_single_gaussian_at_query() {
        let g = gauss([0.5, 0.5], 0.3, 0.1, 0.2, vec![1.0; 4]);
        let out = render_token([0.5, 0.5], &[g], 4).unwrap();
        assert_eq!(out, vec![1.0; 4]);
    }

    #[test]
    fn render_token_zero_coeffs_and_empty_set() {
        let g = gauss([0.2, 0.2], 0.0, 0.1, 0.1, vec![0.0; 3]);
        assert_eq!(render_token([0.6, 0.6], &[g], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(render_token([0.6, 0.6], &[], 3).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn render_token_matches_oracle_k8() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gs = random_gaussians(&mut rng, 8, 5);
        let got = render_token(token_center(0, 0, 1, 1), &gs, 5).unwrap();
        let want = oracle_render(&gs, 1, 1, 5);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_1x1_equals_render_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gs = random_gaussians(&mut rng, 6, 3);
        let grid = render_grid(&gs, 1, 1, 3, &RenderOptions::default()).unwrap();
        let tok = render_token([0.5, 0.5], &gs, 3).unwrap();
        for (a, b) in grid.values.iter().zip(&tok) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut gs = random_gaussians(&mut rng, 10, 4);
        let a = render_grid(&gs, 4, 4, 4, &RenderOptions::default()).unwrap();
        gs.reverse();
        let b = render_grid(&gs, 4, 4, 4, &RenderOptions::default()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_4x4_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gs = random_gaussians(&mut rng, 16, 6);
        let grid = render_grid(&gs, 4, 4, 6, &RenderOptions::default()).unwrap();
        let want = oracle_render(&gs, 4, 4, 6);
        for (a, b) in grid.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn culled_render_stays_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let gs = random_gaussians(&mut rng, 64, 4);
        let exact = render_grid(&gs, 8, 8, 4, &RenderOptions::default()).unwrap();
        let culled = render_grid(
            &gs,
            8,
            8,
            4,
            &RenderOptions {
                parallel: true,
                cull_threshold: Some(1e-6),
            },
        )
        .unwrap();
        for (a, b) in exact.values.iter().zip(&culled.values) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn video_all_static_renders_identical_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let st = random_gaussians(&mut rng, 12, 4);
        let dynamic = vec![Vec::new(), Vec::new(), Vec::new()];
        let grids = render_video(&st, &dynamic, 4, 4, 4, &RenderOptions::default()).unwrap();
        assert_eq!(grids.len(), 3);
        assert_eq!(grids[0], grids[1]);
        assert_eq!(grids[1], grids[2]);
    }

    #[test]
    fn video_static_empty_single_step_reduces_to_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dyn0 = random_gaussians(&mut rng, 8, 4);
        let grids =
            render_video(&[], &[dyn0.clone()], 4, 4, 4, &RenderOptions::default()).unwrap();
        let direct = render_grid(&dyn0, 4, 4, 4, &RenderOptions::default()).unwrap();
        assert_eq!(grids[0], direct);
    }

    #[test]
    fn video_matches_duplication_oracle() {
        // S=2 static, K-S=2 dynamic, T=3: materialize all T x K Gaussians
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let st = random_gaussians(&mut rng, 2, 4);
        let dynamic: Vec<Vec<Gaussian2D>> =
            (0..3).map(|_| random_gaussians(&mut rng, 2, 4)).collect();
        let grids = render_video(&st, &dynamic, 3, 3, 4, &RenderOptions::default()).unwrap();
        for (t, grid) in grids.iter().enumerate() {
            let mut merged = st.clone();
            merged.extend_from_slice(&dynamic[t]);
            let want = oracle_render(&merged, 3, 3, 4);
            for (a, b) in grid.values.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_additive_over_gaussian_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = random_gaussians(&mut rng, 5, 3);
        let b = random_gaussians(&mut rng, 7, 3);
        let mut both = a.clone();
        both.extend_from_slice(&b);
        let ra = render_grid(&a, 4, 4, 3, &RenderOptions::default()).unwrap();
        let rb = render_grid(&b, 4, 4, 3, &RenderOptions::default()).unwrap();
        let rab = render_grid(&both, 4, 4, 3, &RenderOptions::default()).unwrap();
        for i in 0..rab.values.len() {
            assert!((rab.values[i] - (ra.values[i] + rb.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn render_linear_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gs = random_gaussians(&mut rng, 6, 3);
        let scaled: Vec<Gaussian2D> = gs
            .iter()
            .map(|g| {
                let mut g = g.clone();
                for c in &mut g.coeff {
                    *c *= 2.5;
                }
                g
            })
            .collect();
        let r1 = render_grid(&gs, 4, 4, 3, &RenderOptions::default()).unwrap();
        let r2 = render_grid(&scaled, 4, 4, 3, &RenderOptions::default()).unwrap();
        for i in 0..r1.values.len() {
            assert!((r2.values[i] - 2.5 * r1.values[i]).abs() < 1e-12);
        }
    }

    fn splat_inputs(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Vec<(Vec<f64>, Vec<usize>)> {
        let mu: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(0.1..0.9)).collect();
        let theta: Vec<f64> = (0..k)
            .map(|_| rng.gen_range(0.1..std::f64::consts::PI - 0.1))
            .collect();
        let scales: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(0.05..0.4)).collect();
        let coeff: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        vec![
            (mu, vec![k, 2]),
            (theta, vec![k]),
            (scales, vec![k, 2]),
            (coeff, vec![k, c]),
        ]
    }

    #[test]
    fn splat_op_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let gs = random_gaussians(&mut rng, 9, 4);
        let tape = Tape::new();
        let mu = tape.constant(gs.iter().flat_map(|g| g.mu).collect(), vec![9, 2]);
        let theta = tape.constant(gs.iter().map(|g| g.theta).collect(), vec![9]);
        let scales = tape.constant(gs.iter().flat_map(|g| [g.s1, g.s2]).collect(), vec![9, 2]);
        let coeff = tape.constant(gs.iter().flat_map(|g| g.coeff.clone()).collect(), vec![9, 4]);
        let out = render_splats(&mu, &theta, &scales, &coeff, 4, 4);
        let want = render_grid(&gs, 4, 4, 4, &RenderOptions::default()).unwrap();
        for (a, b) in out.data().iter().zip(&want.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn splat_gradients_trivial_cases() {
        // single Gaussian centered on the only token of a 1x1 grid:
        // d out / d coeff = 1 (weight 1), d out / d mu = 0 (stationary point)
        let tape = Tape::new();
        let mu = tape.leaf(vec![0.5, 0.5], vec![1, 2], true);
        let theta = tape.leaf(vec![0.4], vec![1], true);
        let scales = tape.leaf(vec![0.2, 0.3], vec![1, 2], true);
        let coeff = tape.leaf(vec![0.7, -0.2], vec![1, 2], true);
        let out = render_splats(&mu, &theta, &scales, &coeff, 1, 1);
        let loss = out.sum_all();
        let grads = tape.backward(&loss).unwrap();
        let gc = grads.wrt(&coeff).unwrap();
        assert!((gc[0] - 1.0).abs() < 1e-12 && (gc[1] - 1.0).abs() < 1e-12);
        let gm = grads.wrt(&mu).unwrap();
        assert!(gm[0].abs() < 1e-12 && gm[1].abs() < 1e-12);
    }

    #[test]
    fn splat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let inputs = splat_inputs(&mut rng, 8, 3);
        let report = finite_diff_check(
            &|_t: &Tape, xs: &[Tensor]| render_splats(&xs[0], &xs[1], &xs[2], &xs[3], 3, 3),
            &inputs,
            &FdOptions::default(),
        );
        assert!(
            report.pass(),
            "worst rel err {:.3e}",
            report.worst_rel_err()
        );
    }

    #[test]
    fn splat_op_poisons_on_singular_covariance() {
        let tape = Tape::new();
        let mu = tape.leaf(vec![0.5, 0.5], vec![1, 2], true);
        let theta = tape.leaf(vec![0.0], vec![1], true);
        let scales = tape.leaf(vec![1e-4, 1e-4], vec![1, 2], true);
        let coeff = tape.leaf(vec![1.0], vec![1, 1], true);
        let out = render_splats(&mu, &theta, &scales, &coeff, 2, 2);
        assert!(tape.forward_eval(&out).is_err());
    }
}
