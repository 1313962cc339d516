//! Vector quantization of coefficient vectors against a learned codebook.
//!
//! Forward replaces each coefficient vector with its Euclidean-nearest
//! codeword (ties break to the lowest index); the decoder path uses a
//! straight-through bypass so coefficient gradients skip the
//! non-differentiable lookup, while the codebook itself learns from the
//! two-sided commitment term. Codewords unused for
//! [`DEAD_CODE_WINDOW`] consecutive steps are re-seeded from recent
//! coefficient vectors to prevent collapse at toy scale.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gaussian2d::Gaussian2D;
use crate::numerics::{Ctx, ParamStore, Tensor};

pub const CODEBOOK_PARAM: &str = "vq.codebook";

/// Steps a codeword may go unused before it is re-seeded.
pub const DEAD_CODE_WINDOW: u32 = 256;

/// Inner weight of the encoder-side commitment term (VQ-VAE convention).
pub const COMMITMENT_INNER_WEIGHT: f64 = 0.25;

/// Codebook bookkeeping; the entries themselves live in the parameter store
/// under [`CODEBOOK_PARAM`] so training updates them like any weight.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub len: usize,
    pub dim: usize,
    /// Cumulative assignment counts.
    pub usage_counts: Vec<u64>,
    /// Steps since each entry was last assigned.
    pub steps_since_use: Vec<u32>,
}

impl Codebook {
    /// Register a fresh codebook: uniform entries in `[-1/sqrt(L), 1/sqrt(L)]`.
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Codebook {
        let bound = 1.0 / (len as f64).sqrt();
        store.insert(
            CODEBOOK_PARAM,
            vec![len, dim],
            (0..len * dim).map(|_| rng.gen_range(-bound..bound)).collect(),
        );
        Codebook {
            len,
            dim,
            usage_counts: vec![0; len],
            steps_since_use: vec![0; len],
        }
    }

    /// Wrap an existing parameter (checkpoint restore).
    pub fn attach(store: &ParamStore) -> Codebook {
        let e = store.get(CODEBOOK_PARAM);
        assert_eq!(e.shape.len(), 2);
        Codebook {
            len: e.shape[0],
            dim: e.shape[1],
            usage_counts: vec![0; e.shape[0]],
            steps_since_use: vec![0; e.shape[0]],
        }
    }
}

/// Euclidean nearest codeword; ties break to the lowest index.
pub fn nearest_codeword<'a>(query: &[f64], entries: &'a [f64], dim: usize) -> (usize, &'a [f64]) {
    assert_eq!(query.len(), dim);
    assert!(!entries.is_empty() && entries.len() % dim == 0);
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, row) in entries.chunks_exact(dim).enumerate() {
        let mut d2 = 0.0;
        for (q, e) in query.iter().zip(row) {
            let d = q - e;
            d2 += d * d;
        }
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    (best, &entries[best * dim..(best + 1) * dim])
}

/// Nearest-codeword index for every row of `queries [n, dim]`.
pub fn nearest_indices(queries: &[f64], entries: &[f64], dim: usize) -> Vec<usize> {
    queries
        .chunks_exact(dim)
        .map(|q| nearest_codeword(q, entries, dim).0)
        .collect()
}

/// Result of quantizing a coefficient tensor.
pub struct VqOutput {
    /// Chosen codeword per row.
    pub indices: Vec<usize>,
    /// Codebook rows `[n, dim]` — gradients reach the codebook through this.
    pub quantized: Tensor,
    /// `coeff + stopgrad(quantized - coeff)`: forward equals the codewords,
    /// backward is the identity onto `coeff`.
    pub straight_through: Tensor,
}

/// Quantize `coeff [n, dim]` against the codebook parameter.
pub fn quantize_coeffs(ctx: &Ctx, coeff: &Tensor, cb: &Codebook) -> VqOutput {
    assert_eq!(coeff.shape().len(), 2);
    assert_eq!(coeff.shape()[1], cb.dim, "coefficient width vs codebook");
    let entries = ctx.param(CODEBOOK_PARAM);
    let indices = nearest_indices(coeff.data(), entries.data(), cb.dim);
    let quantized = entries.select_rows(&indices);
    // forward must equal the codewords bit-exactly (the codec re-renders
    // from codebook rows); coeff - sg(coeff) is exactly zero, so the sum
    // carries the codeword values while backward is the identity on coeff
    let straight_through = quantized.detach().add(&coeff.sub(&coeff.detach()));
    VqOutput {
        indices,
        quantized,
        straight_through,
    }
}

/// Two-sided commitment term, mean over rows:
/// `||sg(coeff) - quantized||^2 + 0.25 ||coeff - sg(quantized)||^2`.
/// The first part pulls codewords toward the coefficients they quantize,
/// the second commits the coefficients to their codewords.
pub fn commitment_loss(coeff: &Tensor, quantized: &Tensor) -> Tensor {
    assert_eq!(coeff.shape(), quantized.shape());
    let rows = coeff.shape()[0].max(1) as f64;
    let codebook_pull = coeff.detach().sub(quantized);
    let codebook_term = codebook_pull.mul(&codebook_pull).sum_all().scale(1.0 / rows);
    let commit = coeff.sub(&quantized.detach());
    let commit_term = commit
        .mul(&commit)
        .sum_all()
        .scale(COMMITMENT_INNER_WEIGHT / rows);
    codebook_term.add(&commit_term)
}

/// Update usage counters with this step's assignments, then re-seed rows
/// dead for [`DEAD_CODE_WINDOW`] steps from random rows of `recent`
/// (`n x dim` coefficient values). Returns the refreshed row indices.
pub fn refresh_dead_codes(
    store: &mut ParamStore,
    cb: &mut Codebook,
    used: &[usize],
    recent: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    for c in cb.steps_since_use.iter_mut() {
        *c = c.saturating_add(1);
    }
    for &i in used {
        cb.usage_counts[i] += 1;
        cb.steps_since_use[i] = 0;
    }
    let n_recent = recent.len() / cb.dim;
    if n_recent == 0 {
        return Vec::new();
    }
    let mut refreshed = Vec::new();
    for i in 0..cb.len {
        if cb.steps_since_use[i] >= DEAD_CODE_WINDOW {
            let pick = rng.gen_range(0..n_recent);
            let src = &recent[pick * cb.dim..(pick + 1) * cb.dim];
            let entry = store.get_mut(CODEBOOK_PARAM);
            entry.data[i * cb.dim..(i + 1) * cb.dim].copy_from_slice(src);
            cb.steps_since_use[i] = 0;
            cb.usage_counts[i] = 0;
            refreshed.push(i);
        }
    }
    refreshed
}

/// Partitioned, coefficient-quantized Gaussian set in value form — the
/// codec's input. Geometry stays continuous here; bit quantization happens
/// at serialization.
#[derive(Clone, Debug)]
pub struct QuantizedGaussianSet {
    pub k: usize,
    pub t: usize,
    /// Indices `k` with mask 0, ascending.
    pub static_indices: Vec<usize>,
    /// Indices `k` with mask 1, ascending.
    pub dynamic_indices: Vec<usize>,
    /// `S` static records (t = 1 geometry, quantized coefficients).
    pub static_gaussians: Vec<Gaussian2D>,
    /// `T x (K - S)` dynamic records.
    pub dynamic_gaussians: Vec<Vec<Gaussian2D>>,
    /// Codeword index per static record.
    pub static_codes: Vec<u32>,
    /// Codeword index per dynamic record, `T x (K - S)`.
    pub dynamic_codes: Vec<Vec<u32>>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl QuantizedGaussianSet {
    pub fn s(&self) -> usize {
        self.static_indices.len()
    }

    pub fn token_count(&self) -> usize {
        crate::gsp::token_count(self.k, self.t, self.s())
    }
}
