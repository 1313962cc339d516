//! Image/video quality metrics and the training metrics CSV.

use std::io::Write;
use std::path::Path;

use crate::pipeline::{StepMetrics, VideoClip};

/// PSNR cap for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` over `[0, 1]` signals, capped at 99 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr: length mismatch");
    if a.is_empty() {
        return PSNR_CAP;
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 7;

/// Standard SSIM with a 7x7 uniform window over valid positions, computed
/// per frame and channel, then averaged.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> f64 {
    assert_eq!(
        (a.frames, a.h, a.w),
        (b.frames, b.h, b.w),
        "ssim: shape mismatch"
    );
    let win = SSIM_WINDOW.min(a.h).min(a.w);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..a.frames {
        let fa = a.frame(f);
        let fb = b.frame(f);
        for c in 0..3 {
            for y0 in 0..=(a.h - win) {
                for x0 in 0..=(a.w - win) {
                    let mut sx = 0.0;
                    let mut sy = 0.0;
                    for dy in 0..win {
                        for dx in 0..win {
                            let i = ((y0 + dy) * a.w + x0 + dx) * 3 + c;
                            sx += fa[i];
                            sy += fb[i];
                        }
                    }
                    let mx = sx / n;
                    let my = sy / n;
                    let mut vx = 0.0;
                    let mut vy = 0.0;
                    let mut cov = 0.0;
                    for dy in 0..win {
                        for dx in 0..win {
                            let i = ((y0 + dy) * a.w + x0 + dx) * 3 + c;
                            let ex = fa[i] - mx;
                            let ey = fb[i] - my;
                            vx += ex * ex;
                            vy += ey * ey;
                            cov += ex * ey;
                        }
                    }
                    vx /= n;
                    vy /= n;
                    cov /= n;
                    let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

/// Per-clip evaluation summary.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub psnr: f64,
    pub ssim: f64,
    pub token_count: usize,
    pub mean_mask: f64,
    /// Stream size when the codec ran.
    pub bits: Option<u64>,
}

/// Metrics CSV schema identifier (written as the first line).
pub const METRICS_SCHEMA: &str = "gvt-metrics-v1";
pub const METRICS_COLUMNS: &str = "step,l_recon,l_gsp,l_commit,mean_mask,s,tokens,psnr";

/// Append-only CSV writer with a versioned header row.
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<MetricsWriter> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# schema={METRICS_SCHEMA}")?;
        writeln!(file, "{METRICS_COLUMNS}")?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        writeln!(self.file, "{}", csv_row(m))
    }
}

pub fn csv_row(m: &StepMetrics) -> String {
    format!(
        "{},{:.12e},{:.12e},{:.12e},{:.6},{},{},{:.6}",
        m.step, m.l_recon, m.l_gsp, m.l_commit, m.mean_mask, m.s, m.tokens, m.psnr
    )
}
