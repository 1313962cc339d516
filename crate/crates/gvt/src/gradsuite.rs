//! The full gradient-verification suite: every built-in tensor op on random
//! instances, the fused rendering and sampling kernels, one deformable
//! fusion block, and the end-to-end objective on a micro configuration.
//!
//! Straight-through surrogates (mask binarization, VQ bypass) are exercised
//! on their pass-through paths; their non-differentiable jumps are excluded
//! by construction (central differences cannot measure a surrogate).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{bilinear_sample, DeformableCrossAttention, Dstf};
use crate::config::ModelConfig;
use crate::numerics::gradcheck::{finite_diff_check, run_builtin_checks, FdOptions, FdReport};
use crate::numerics::{Ctx, ParamStore, Tape, Tensor};
use crate::pipeline::{MaskMode, Model, VideoClip};
use crate::rasterizer::render_splats;

pub struct SuiteEntry {
    pub name: String,
    pub report: FdReport,
}

impl SuiteEntry {
    pub fn line(&self) -> String {
        format!(
            "{:<28} {:>5} components   worst rel err {:.3e}   {}",
            self.name,
            self.report.checked,
            self.report.worst_rel_err(),
            if self.report.pass() { "ok" } else { "FAIL" }
        )
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn splat_inputs(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Vec<(Vec<f64>, Vec<usize>)> {
    vec![
        (rand_vec(rng, 2 * k, 0.1, 0.9), vec![k, 2]),
        (
            (0..k)
                .map(|_| rng.gen_range(0.1..std::f64::consts::PI - 0.1))
                .collect(),
            vec![k],
        ),
        (rand_vec(rng, 2 * k, 0.05, 0.4), vec![k, 2]),
        (rand_vec(rng, k * c, -1.0, 1.0), vec![k, c]),
    ]
}

/// Single-Gaussian weight at one token: the fused kernel reduced to the
/// radiance weight itself (fixed unit coefficient).
fn check_radiance_weight(opts: &FdOptions) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut merged = FdReport {
        tol: opts.tol,
        ..FdReport::default()
    };
    for _ in 0..20 {
        let inputs = splat_inputs(&mut rng, 1, 1);
        let mut inputs = inputs;
        inputs[3].0 = vec![1.0];
        merged.merge(finite_diff_check(
            &|tape: &Tape, xs: &[Tensor]| {
                let coeff = tape.constant(vec![1.0], vec![1, 1]);
                render_splats(&xs[0], &xs[1], &xs[2], &coeff, 1, 1)
            },
            &inputs[..3],
            opts,
        ));
    }
    merged
}

fn check_render_token(opts: &FdOptions) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut merged = FdReport {
        tol: opts.tol,
        ..FdReport::default()
    };
    for _ in 0..10 {
        let inputs = splat_inputs(&mut rng, 8, 3);
        merged.merge(finite_diff_check(
            &|_t: &Tape, xs: &[Tensor]| render_splats(&xs[0], &xs[1], &xs[2], &xs[3], 1, 1),
            &inputs,
            opts,
        ));
    }
    merged
}

fn check_render_grid(opts: &FdOptions) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut merged = FdReport {
        tol: opts.tol,
        ..FdReport::default()
    };
    for _ in 0..5 {
        let inputs = splat_inputs(&mut rng, 8, 3);
        merged.merge(finite_diff_check(
            &|_t: &Tape, xs: &[Tensor]| render_splats(&xs[0], &xs[1], &xs[2], &xs[3], 4, 4),
            &inputs,
            opts,
        ));
    }
    merged
}

/// Grid points jittered off pixel-center cell boundaries so central
/// differences stay on one linear piece.
fn safe_points(rng: &mut ChaCha8Rng, n: usize, cells: usize, size: usize) -> Vec<f64> {
    (0..n * 2)
        .map(|_| {
            let c: f64 = rng.gen_range(0i32..cells as i32) as f64;
            (c + 0.5 + rng.gen_range(0.05..0.45)) / size as f64
        })
        .collect()
}

fn check_bilinear_sample(opts: &FdOptions) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut merged = FdReport {
        tol: opts.tol,
        ..FdReport::default()
    };
    for _ in 0..20 {
        let grid = rand_vec(&mut rng, 5 * 4 * 3, -1.0, 1.0);
        let pts = safe_points(&mut rng, 6, 3, 4);
        merged.merge(finite_diff_check(
            &|_t: &Tape, xs: &[Tensor]| bilinear_sample(&xs[0], &xs[1]),
            &[(grid, vec![5, 4, 3]), (pts, vec![6, 2])],
            opts,
        ));
    }
    merged
}

fn check_deformable(opts: &FdOptions) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut store = ParamStore::new();
    let d = 8;
    let deform = DeformableCrossAttention::init(&mut store, &mut rng, "dca", d, 6, 2, 2);
    for name in ["dca.offset.w", "dca.logit.w", "dca.out.w"] {
        let e = store.get_mut(name);
        for v in &mut e.data {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    store.get_mut("dca.offset.b").data = rand_vec(&mut rng, 2 * 2 * 2, -0.1, 0.1);
    let mut merged = FdReport {
        tol: opts.tol,
        ..FdReport::default()
    };
    for _ in 0..5 {
        let q = rand_vec(&mut rng, 4 * d, -1.0, 1.0);
        let z = rand_vec(&mut rng, 5 * 5 * 6, -1.0, 1.0);
        let refs = safe_points(&mut rng, 4, 4, 5);
        let store_ref = &store;
        let deform_ref = &deform;
        merged.merge(finite_diff_check(
            &move |tape: &Tape, xs: &[Tensor]| {
                let ctx = Ctx::on_tape(store_ref, tape.clone(), false);
                deform_ref.forward(&ctx, &xs[0], &xs[1], &xs[2])
            },
            &[(q, vec![4, d]), (z, vec![5, 5, 6]), (refs, vec![4, 2])],
            opts,
        ));
    }
    merged
}

fn check_dstf_block(opts: &FdOptions) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut store = ParamStore::new();
    let dstf = Dstf::init(&mut store, &mut rng, "dstf", 9, 8, 6, 2, 2);
    // flip the zero-initialized residual heads to random values so the block
    // is not the identity
    let zero_names: Vec<String> = store
        .iter()
        .filter(|(n, e)| n.ends_with(".w") && e.data.iter().all(|&v| v == 0.0))
        .map(|(n, _)| n.clone())
        .collect();
    for n in zero_names {
        let e = store.get_mut(&n);
        for v in &mut e.data {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    let (t, k) = (2, 4);
    let g = rand_vec(&mut rng, t * k * 9, -1.0, 1.0);
    let q = rand_vec(&mut rng, t * k * 8, -1.0, 1.0);
    let z = rand_vec(&mut rng, t * 6 * 6, -1.0, 1.0);
    let inputs = [
        (g, vec![t, k, 9]),
        (q, vec![t, k, 8]),
        (z, vec![t, 6, 6]),
    ];
    let store_ref = &store;
    let dstf_ref = &dstf;
    // both block outputs checked against the same inputs
    let mut merged = finite_diff_check(
        &|tape: &Tape, xs: &[Tensor]| {
            let ctx = Ctx::on_tape(store_ref, tape.clone(), false);
            dstf_ref
                .forward(&ctx, &xs[0], &xs[1], &xs[2], 2, 3)
                .expect("shapes valid")
                .0
        },
        &inputs,
        opts,
    );
    merged.merge(finite_diff_check(
        &|tape: &Tape, xs: &[Tensor]| {
            let ctx = Ctx::on_tape(store_ref, tape.clone(), false);
            dstf_ref
                .forward(&ctx, &xs[0], &xs[1], &xs[2], 2, 3)
                .expect("shapes valid")
                .1
        },
        &inputs,
        opts,
    ));
    merged
}

/// Micro configuration for the end-to-end objective check: T=2, K=8,
/// 8x8 latent grid, D=13.
pub fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.k = 8;
    cfg.t = 2;
    cfg.d1 = 8;
    cfg.d2 = 11;
    cfg.d3 = 8;
    cfg.b = 1;
    cfg.d = 13;
    cfg.l = 16;
    cfg.f = 8;
    cfg.f_enc = 8;
    cfg.heads = 2;
    cfg.clip_h = 32;
    cfg.clip_w = 32;
    cfg
}

/// End-to-end objective gradient on the micro config: a 32-component
/// parameter subset across four layers, params otherwise constant. The
/// mask and VQ assignments must be stable under the probe step, which the
/// fixed seed guarantees (asserted).
fn check_total_loss(opts: &FdOptions) -> FdReport {
    total_loss_check_with_seed(4242, opts).0
}

/// Exposed with a controllable seed for diagnosing marginal components.
pub fn total_loss_check_with_seed(seed: u64, opts: &FdOptions) -> (FdReport, [&'static str; 4]) {
    let cfg = micro_config();
    let model = Model::new(cfg.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let clip = VideoClip::new(
        cfg.frames(),
        cfg.clip_h,
        cfg.clip_w,
        (0..cfg.frames() * cfg.clip_h * cfg.clip_w * 3)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
    );
    // straight-through stability guard: no mask logit sits on the threshold
    {
        let ctx = Ctx::inference(&model.store);
        let fwd = model.forward(&ctx, &clip, MaskMode::Learned).unwrap();
        for &soft in fwd.mask.soft.data() {
            assert!(
                (soft - 0.5).abs() > 1e-3,
                "mask logit too close to the binarization threshold for FD"
            );
        }
    }
    // all four carry true derivatives end to end; the codebook and the mask
    // branch are deliberately excluded — their parameters train through
    // stop-gradient surrogates, so plain central differences measure a
    // different (by-design) quantity there
    let names = [
        "enc.conv1.w",
        "stge.block0.deform.value.w",
        "stge.head.fc2.w",
        "dec.deconv2.w",
    ];
    let inputs: Vec<(Vec<f64>, Vec<usize>)> = names
        .iter()
        .map(|n| {
            let e = model.store.get(n);
            (e.data.clone(), e.shape.clone())
        })
        .collect();
    let model_ref = &model;
    let clip_ref = &clip;
    let report = finite_diff_check(
        &move |tape: &Tape, xs: &[Tensor]| {
            let overrides: BTreeMap<String, Tensor> = names
                .iter()
                .zip(xs)
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect();
            let ctx = Ctx::with_overrides(&model_ref.store, tape.clone(), overrides);
            // the VQ bypass runs in its straight-through relaxation and the
            // commitment term is omitted: both carry stop-gradient
            // surrogates whose split is verified exactly in the vq tests,
            // and plain central differences of the hard path would measure
            // a different (by-design) quantity
            let fwd = model_ref
                .forward_with(
                    &ctx,
                    clip_ref,
                    crate::pipeline::ForwardOptions {
                        mode: MaskMode::Learned,
                        gsp_weight: 1.0,
                        vq_enabled: false,
                    },
                )
                .expect("micro forward");
            fwd.l_recon.add(&fwd.l_gsp)
        },
        &inputs,
        &FdOptions {
            max_components: Some(8), // 4 inputs x 8 = 32-parameter subset
            ..opts.clone()
        },
    );
    (report, names)
}

/// Run the whole suite. `trials` controls the per-op instance count for the
/// built-in registry (the contract level is 100).
pub fn run_suite(trials: usize) -> Vec<SuiteEntry> {
    let opts = FdOptions::default();
    let mut entries: Vec<SuiteEntry> = run_builtin_checks(trials, &opts)
        .into_iter()
        .map(|(name, report)| SuiteEntry {
            name: format!("op::{name}"),
            report,
        })
        .collect();
    entries.push(SuiteEntry {
        name: "radiance_weight".into(),
        report: check_radiance_weight(&opts),
    });
    entries.push(SuiteEntry {
        name: "render_token".into(),
        report: check_render_token(&opts),
    });
    entries.push(SuiteEntry {
        name: "render_grid".into(),
        report: check_render_grid(&opts),
    });
    entries.push(SuiteEntry {
        name: "bilinear_sample".into(),
        report: check_bilinear_sample(&opts),
    });
    entries.push(SuiteEntry {
        name: "deformable_cross_attention".into(),
        report: check_deformable(&opts),
    });
    entries.push(SuiteEntry {
        name: "dstf_block".into(),
        report: check_dstf_block(&opts),
    });
    entries.push(SuiteEntry {
        name: "total_loss(micro)".into(),
        report: check_total_loss(&FdOptions {
            tol: 1e-3,
            ..FdOptions::default()
        }),
    });
    entries
}
