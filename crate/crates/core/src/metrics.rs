//! Image-quality metrics and the confidence/quality correlation study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure, Result};
use crate::phantom::Image;

/// Default side of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;

/// `10·log10(range² / MSE)`; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    ensure!(a.dim() == b.dim(), "shape mismatch: {:?} vs {:?}", a.dim(), b.dim());
    ensure!(data_range > 0.0, "data_range must be positive");
    ensure!(!a.is_empty(), "empty images");
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Summed-area table with a zero border: `s[(r, c)]` sums `v[..r, ..c]`.
struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, v: impl Fn(usize, usize) -> f64) -> Self {
        let mut s = vec![0.0; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += v(r, c);
                s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
            }
        }
        Self { w: w + 1, s }
    }

    fn window(&self, r: usize, c: usize, k: usize) -> f64 {
        let at = |r: usize, c: usize| self.s[r * self.w + c];
        at(r + k, c + k) - at(r, c + k) - at(r + k, c) + at(r, c)
    }
}

/// SSIM with a `window × window` uniform window and population statistics,
/// averaged over all fully contained window positions. Stabilisers are
/// `C1 = (0.01·range)²` and `C2 = (0.03·range)²`.
pub fn ssim(a: &Image, b: &Image, window: usize, data_range: f64) -> Result<f64> {
    ensure!(a.dim() == b.dim(), "shape mismatch: {:?} vs {:?}", a.dim(), b.dim());
    ensure!(window >= 1, "window must be at least 1");
    ensure!(data_range > 0.0, "data_range must be positive");
    let (h, w) = a.dim();
    ensure!(h >= window && w >= window, "image {h}x{w} is smaller than the {window}x{window} window");
    let av = |r: usize, c: usize| a[[r, c]] as f64;
    let bv = |r: usize, c: usize| b[[r, c]] as f64;
    let sa = Integral::new(h, w, av);
    let sb = Integral::new(h, w, bv);
    let saa = Integral::new(h, w, |r, c| av(r, c) * av(r, c));
    let sbb = Integral::new(h, w, |r, c| bv(r, c) * bv(r, c));
    let sab = Integral::new(h, w, |r, c| av(r, c) * bv(r, c));
    let n = (window * window) as f64;
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    for r in 0..=h - window {
        for c in 0..=w - window {
            let ma = sa.window(r, c, window) / n;
            let mb = sb.window(r, c, window) / n;
            let va = (saa.window(r, c, window) / n - ma * ma).max(0.0);
            let vb = (sbb.window(r, c, window) / n - mb * mb).max(0.0);
            let cov = sab.window(r, c, window) / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((h - window + 1) * (w - window + 1)) as f64)
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// fewer than two points or either variable is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Paired two-sided t-test of `a - b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_two_sided: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    ensure!(a.len() == b.len(), "paired samples differ in length: {} vs {}", a.len(), b.len());
    ensure!(a.len() >= 2, "need at least two pairs");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let (t, p) = if se == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid degrees of freedom");
        // Lower tail of -|t| avoids cancellation for tiny p.
        (t, (2.0 * dist.cdf(-t.abs())).min(1.0))
    };
    Ok(PairedTest { n: d.len(), mean_diff: mean, t, p_two_sided: p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    /// Side of the square local windows.
    pub window: usize,
    pub bins: usize,
    pub windows_per_image: usize,
    /// Uniform SSIM window used inside each local window.
    pub ssim_window: usize,
    pub seed: u64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self { window: 50, bins: 20, windows_per_image: 200, ssim_window: SSIM_WINDOW, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBin {
    pub lo: f64,
    pub hi: f64,
    /// `None` for an empty bin.
    pub mean_ssim: Option<f64>,
    /// Standard error of the bin mean; `None` with fewer than two windows.
    pub se: Option<f64>,
    pub n_windows: usize,
}

impl CorrelationBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub bins: Vec<CorrelationBin>,
    /// Rank correlation of bin centers against bin means over non-empty
    /// bins; `None` when undefined.
    pub spearman: Option<f64>,
    pub empty_bins: usize,
    pub total_windows: usize,
}

impl CorrelationTable {
    /// True when the table cannot support a trend: empty bins or an
    /// undefined correlation.
    pub fn has_gaps(&self) -> bool {
        self.empty_bins > 0 || self.spearman.is_none()
    }
}

/// Samples random windows from every `(output, target, confidence)` triple,
/// pairs each window's mean confidence with its local SSIM, splits the
/// attainable range of window-mean confidence into equal bins and averages
/// SSIM per bin.
pub fn correlate_confidence(
    outputs: &[Image],
    targets: &[Image],
    confidences: &[Image],
    cfg: &CorrelationConfig,
) -> Result<CorrelationTable> {
    ensure!(!outputs.is_empty(), "no images to correlate");
    ensure!(outputs.len() == targets.len() && outputs.len() == confidences.len(), "need one target and one confidence map per output");
    ensure!(cfg.bins >= 1 && cfg.windows_per_image >= 1, "bins and windows_per_image must be positive");
    ensure!(cfg.ssim_window <= cfg.window, "SSIM window exceeds the local window");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(outputs.len() * cfg.windows_per_image);
    for ((o, t), h) in outputs.iter().zip(targets).zip(confidences) {
        ensure!(o.dim() == t.dim() && o.dim() == h.dim(), "output, target and confidence shapes differ");
        let (rows, cols) = o.dim();
        ensure!(rows >= cfg.window && cols >= cfg.window, "window {0}x{0} larger than image {rows}x{cols}", cfg.window);
        for _ in 0..cfg.windows_per_image {
            let r = rng.gen_range(0..=rows - cfg.window);
            let c = rng.gen_range(0..=cols - cfg.window);
            let sl = ndarray::s![r..r + cfg.window, c..c + cfg.window];
            let conf = h.slice(sl).iter().map(|&v| v as f64).sum::<f64>() / (cfg.window * cfg.window) as f64;
            let s = ssim(&o.slice(sl).to_owned(), &t.slice(sl).to_owned(), cfg.ssim_window, 1.0)?;
            pairs.push((conf, s));
        }
    }
    // Bin over the range of every possible window mean, so that edges do not
    // depend on which windows were drawn.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for h in confidences {
        let (rows, cols) = h.dim();
        let sum = Integral::new(rows, cols, |r, c| h[[r, c]] as f64);
        let area = (cfg.window * cfg.window) as f64;
        for r in 0..=rows - cfg.window {
            for c in 0..=cols - cfg.window {
                let m = sum.window(r, c, cfg.window) / area;
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
    }
    let width = (hi - lo) / cfg.bins as f64;
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); cfg.bins];
    for &(conf, s) in &pairs {
        let k = if width > 0.0 { (((conf - lo) / width) as usize).min(cfg.bins - 1) } else { 0 };
        sums[k].0 += s;
        sums[k].1 += s * s;
        sums[k].2 += 1;
    }
    let bins: Vec<CorrelationBin> = sums
        .iter()
        .enumerate()
        .map(|(k, &(sum, sq, n))| {
            let mean = (n > 0).then(|| sum / n as f64);
            let se = (n > 1).then(|| {
                let m = sum / n as f64;
                ((sq / n as f64 - m * m).max(0.0) * n as f64 / (n - 1) as f64 / n as f64).sqrt()
            });
            CorrelationBin { lo: lo + width * k as f64, hi: lo + width * (k + 1) as f64, mean_ssim: mean, se, n_windows: n }
        })
        .collect();
    let filled: Vec<&CorrelationBin> = bins.iter().filter(|b| b.mean_ssim.is_some()).collect();
    let centers: Vec<f64> = filled.iter().map(|b| b.center()).collect();
    let means: Vec<f64> = filled.iter().map(|b| b.mean_ssim.expect("filled")).collect();
    let spearman = if width > 0.0 { spearman(&centers, &means) } else { None };
    Ok(CorrelationTable { empty_bins: bins.len() - filled.len(), bins, spearman, total_windows: pairs.len() })
}
