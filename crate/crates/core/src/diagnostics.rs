//! Channel-correlation measurements on feature maps.
//!
//! * binned mutual information between channel pairs
//! * mean magnitude of channels (MMC) curves
//! * amplitude-weighted phase-difference histograms
//! * per-bin frequency-domain correlation `F1 conj(F2) / (|F1| |F2|)`
//! * CDF of absolute inter-channel Pearson correlation
//! * linear CKA between two representations
//! * activated-region area
//!
//! Pair accumulation always runs in sorted pair order, so every result is
//! bit-reproducible for a fixed seed and pair budget.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{decompose, forward_plane, Spectrum};
use crate::tensor::{ComplexTensor, Tensor};

pub const DEFAULT_MI_BINS: usize = 16;
pub const PHASE_HIST_BINS: usize = 64;
pub const DEFAULT_PAIR_BUDGET: usize = 512;
pub const DEFAULT_CDF_GRID: usize = 101;
pub const DEFAULT_TAU: f64 = 0.5;
pub const WEIGHT_EPS: f64 = 1e-8;
/// Bins whose amplitude is at or below this in either channel have no defined correlation.
pub const CORR_EPS: f64 = 1e-10;

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

fn binned(x: &[f64], bins: usize) -> Vec<usize> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    x.iter().map(|&v| bin_index(v, lo, hi, bins)).collect()
}

/// Plug-in entropy (nats) of `x` under equal-width binning over its own range.
pub fn binned_entropy(x: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for b in binned(x, bins) {
        counts[b] += 1;
    }
    let n = x.len() as f64;
    let mut terms: Vec<f64> = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Binned mutual information (nats) between two equally long samples.
///
/// Terms are summed in sorted order, which makes the estimate exactly
/// symmetric in its arguments.
pub fn binned_mi(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Precondition(format!(
            "MI needs equal non-empty samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Precondition(format!(
            "MI needs at least 2 bins, got {bins}"
        )));
    }
    let (bx, by) = (binned(x, bins), binned(y, bins));
    let mut joint = vec![0usize; bins * bins];
    let mut px = vec![0usize; bins];
    let mut py = vec![0usize; bins];
    for (&i, &j) in bx.iter().zip(&by) {
        joint[i * bins + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let n = x.len() as f64;
    let mut terms = Vec::new();
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            let marg = (px[i] as f64 / n) * (py[j] as f64 / n);
            terms.push(pxy * (pxy / marg).ln());
        }
    }
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}

/// Mean binned MI over all unordered channel pairs of a `c x h x w` map.
pub fn channel_mi(f: &Tensor, bins: usize) -> Result<f64> {
    let (c, _, _) = f.dims3()?;
    if c < 2 {
        return Err(Error::Precondition(
            "channel MI needs at least two channels".into(),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..c {
        for j in i + 1..c {
            total += binned_mi(f.channel(i), f.channel(j), bins)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// All unordered channel pairs when they fit the budget, otherwise a seeded
/// sample of `budget` distinct pairs; returned sorted.
pub fn sample_pairs(c: usize, budget: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = c * c.saturating_sub(1) / 2;
    let from_index = |mut k: usize| {
        let mut i = 0;
        while k >= c - 1 - i {
            k -= c - 1 - i;
            i += 1;
        }
        (i, i + 1 + k)
    };
    if total <= budget {
        return (0..total).map(from_index).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, total, budget).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(from_index).collect()
}

/// A histogram over `[lo, hi]` with uniform bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            mass: vec![0.0; bins],
        }
    }

    pub fn add(&mut self, x: f64, weight: f64) {
        let b = bin_index(x.clamp(self.lo, self.hi), self.lo, self.hi, self.mass.len());
        self.mass[b] += weight;
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Share of total mass in the first and last bins.
    pub fn edge_fractions(&self) -> (f64, f64) {
        let t = self.total();
        if t == 0.0 {
            return (0.0, 0.0);
        }
        (self.mass[0] / t, self.mass[self.mass.len() - 1] / t)
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.mass.len() as f64;
        (self.lo + b as f64 * width, self.lo + (b + 1) as f64 * width)
    }
}

/// `|rho1 - rho2|` folded onto `[0, pi]`.
pub fn folded_phase_diff(rho1: f64, rho2: f64) -> f64 {
    let d = (rho1 - rho2).abs();
    if d > PI {
        2.0 * PI - d
    } else {
        d
    }
}

pub fn phase_weight(a1: f64, a2: f64) -> f64 {
    a1 * a2 / ((a1 - a2).abs() + WEIGHT_EPS)
}

fn accumulate_phase_pair(hist: &mut Histogram, s1: &Spectrum, k1: usize, s2: &Spectrum, k2: usize) {
    let (a1, p1) = (s1.amplitude().channel(k1), s1.phase().channel(k1));
    let (a2, p2) = (s2.amplitude().channel(k2), s2.phase().channel(k2));
    for i in 0..a1.len() {
        let w = phase_weight(a1[i], a2[i]);
        if w > 0.0 {
            hist.add(folded_phase_diff(p1[i], p2[i]), w);
        }
    }
}

/// Amplitude-weighted histogram of inter-channel phase differences.
pub fn phase_diff_hist(f: &Tensor, pair_budget: usize, seed: u64) -> Result<Histogram> {
    let (c, _, _) = f.dims3()?;
    if c < 2 {
        return Err(Error::Precondition(
            "phase histogram needs at least two channels".into(),
        ));
    }
    let s = decompose(f)?;
    let mut hist = Histogram::new(0.0, PI, PHASE_HIST_BINS);
    for (i, j) in sample_pairs(c, pair_budget, seed) {
        accumulate_phase_pair(&mut hist, &s, i, &s, j);
    }
    Ok(hist)
}

/// Phase-difference histogram pairing channel `k` of `a` with channel `k` of `b`.
pub fn cross_phase_diff_hist(a: &Tensor, b: &Tensor) -> Result<Histogram> {
    b.ensure_shape(a.shape())?;
    let (c, _, _) = a.dims3()?;
    let (sa, sb) = (decompose(a)?, decompose(b)?);
    let mut hist = Histogram::new(0.0, PI, PHASE_HIST_BINS);
    for k in 0..c {
        accumulate_phase_pair(&mut hist, &sa, k, &sb, k);
    }
    Ok(hist)
}

/// Frequency-domain correlation between two channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqCorrelation {
    /// Sum of `r(m, n)` over all defined bins.
    pub sum: (f64, f64),
    /// `sum` divided by the number of defined bins.
    pub mean: (f64, f64),
    /// Per-bin `r(m, n)`; zero where undefined.
    pub map: ComplexTensor,
    pub defined: usize,
}

pub fn freq_correlation(ch1: &Tensor, ch2: &Tensor) -> Result<FreqCorrelation> {
    let (h, w) = ch1.dims2()?;
    ch2.ensure_shape(ch1.shape())?;
    let f1 = forward_plane(ch1.data(), h, w);
    let f2 = forward_plane(ch2.data(), h, w);
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    let mut defined = 0usize;
    let (mut sr, mut si) = (0.0, 0.0);
    for i in 0..h * w {
        let (a1, a2) = (f1[i].norm(), f2[i].norm());
        if a1 <= CORR_EPS || a2 <= CORR_EPS {
            continue;
        }
        let r = f1[i] * f2[i].conj() / (a1 * a2);
        re[i] = r.re;
        im[i] = r.im;
        sr += r.re;
        si += r.im;
        defined += 1;
    }
    let mean = if defined > 0 {
        (sr / defined as f64, si / defined as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(FreqCorrelation {
        sum: (sr, si),
        mean,
        map: ComplexTensor::from_parts(vec![h, w], re, im),
        defined,
    })
}

/// Per-channel mean absolute activation over a batch, sorted descending.
pub fn mmc(batch: &[Tensor]) -> Result<Vec<f64>> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Precondition("MMC needs a non-empty batch".into()))?;
    let (c, _, _) = first.dims3()?;
    let mut acc = vec![0.0; c];
    for f in batch {
        let (fc, _, _) = f.dims3()?;
        if fc != c {
            return Err(Error::shape(first.shape(), f.shape()));
        }
        for (k, a) in acc.iter_mut().enumerate() {
            *a += f.channel(k).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    // Spatial sizes may differ across the batch; normalise by total positions.
    let positions: usize = batch.iter().map(|f| f.len() / c).sum();
    let mut curve: Vec<f64> = acc.into_iter().map(|a| a / positions as f64).collect();
    curve.sort_by(|a, b| b.total_cmp(a));
    Ok(curve)
}

/// Population standard deviation of an MMC curve; 0 means perfectly flat.
pub fn mmc_flatness(curve: &[f64]) -> f64 {
    let n = curve.len() as f64;
    let mean = curve.iter().sum::<f64>() / n;
    (curve.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Empirical CDF of `|pearson|` over channel pairs, sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrCdf {
    pub grid: Vec<f64>,
    pub cdf: Vec<f64>,
    pub n_pairs: usize,
    pub excluded_channels: usize,
}

fn centred(x: &[f64]) -> (Vec<f64>, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = c.iter().map(|v| v * v).sum::<f64>();
    (c, ss)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (cx, sx) = centred(x);
    let (cy, sy) = centred(y);
    if sx == 0.0 || sy == 0.0 {
        return None;
    }
    Some(cx.iter().zip(&cy).map(|(a, b)| a * b).sum::<f64>() / (sx * sy).sqrt())
}

pub fn corr_cdf(f: &Tensor, grid: usize, pair_budget: usize, seed: u64) -> Result<CorrCdf> {
    let (c, _, _) = f.dims3()?;
    if c < 2 || grid < 2 {
        return Err(Error::Precondition(
            "correlation CDF needs c >= 2 and grid >= 2".into(),
        ));
    }
    let constant: Vec<bool> = (0..c).map(|k| centred(f.channel(k)).1 == 0.0).collect();
    let live: Vec<usize> = (0..c).filter(|&k| !constant[k]).collect();
    if live.len() < 2 {
        return Err(Error::Undefined(
            "fewer than two non-constant channels".into(),
        ));
    }
    let mut values: Vec<f64> = sample_pairs(live.len(), pair_budget, seed)
        .into_iter()
        .filter_map(|(i, j)| pearson(f.channel(live[i]), f.channel(live[j])))
        .map(|r| r.abs().min(1.0))
        .collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let points: Vec<f64> = (0..grid).map(|i| i as f64 / (grid - 1) as f64).collect();
    let cdf = points
        .iter()
        .map(|&t| values.partition_point(|&v| v <= t) as f64 / n as f64)
        .collect();
    Ok(CorrCdf {
        grid: points,
        cdf,
        n_pairs: n,
        excluded_channels: c - live.len(),
    })
}

/// Rows are spatial positions, columns are channels: `(h*w) x c`.
pub fn feature_matrix(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    let n = h * w;
    let mut out = vec![0.0; n * c];
    for k in 0..c {
        for (p, &v) in f.channel(k).iter().enumerate() {
            out[p * c + k] = v;
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

fn centre_columns(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let mut out = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    Ok((n, d, out))
}

/// Frobenius norm squared of `A^T B` for `n x da` and `n x db` row-major matrices.
fn cross_frob_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..da {
        for j in 0..db {
            let s: f64 = (0..n).map(|r| a[r * da + i] * b[r * db + j]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear CKA between two `n x d` representations sharing their rows.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (nx, dx, xc) = centre_columns(x)?;
    let (ny, dy, yc) = centre_columns(y)?;
    if nx != ny || nx < 2 {
        return Err(Error::Precondition(format!(
            "CKA needs matching n >= 2 rows, got {nx} and {ny}"
        )));
    }
    let xx = cross_frob_sq(&xc, dx, &xc, dx, nx).sqrt();
    let yy = cross_frob_sq(&yc, dy, &yc, dy, nx).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Undefined(
            "CKA of a zero-variance representation".into(),
        ));
    }
    let xy = cross_frob_sq(&yc, dy, &xc, dx, nx);
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Linear CKA between two feature maps of the same spatial size.
pub fn feature_cka(a: &Tensor, b: &Tensor) -> Result<f64> {
    linear_cka(&feature_matrix(a)?, &feature_matrix(b)?)
}

/// Fraction of positions whose channel-mean |activation| exceeds `tau` times the maximum.
pub fn activated_area(f: &Tensor, tau: f64) -> Result<f64> {
    let (c, h, w) = f.dims3()?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Precondition(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    let plane = h * w;
    let energy: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|k| f.data()[k * plane + p].abs()).sum::<f64>() / c as f64)
        .collect();
    let max = energy.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0.0);
    }
    Ok(energy.iter().filter(|&&e| e > tau * max).count() as f64 / plane as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub mi_bins: usize,
    pub pair_budget: usize,
    pub cdf_grid: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            mi_bins: DEFAULT_MI_BINS,
            pair_budget: DEFAULT_PAIR_BUDGET,
            cdf_grid: DEFAULT_CDF_GRID,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub channels: usize,
    pub mean_mi: f64,
    pub mmc_curve: Vec<f64>,
    pub mmc_flatness: f64,
    pub phase_hist: Histogram,
    pub corr_cdf: CorrCdf,
    /// Mean over sampled pairs of the summed per-bin correlation.
    pub freq_corr_sum: [f64; 2],
    /// Mean over sampled pairs of the per-bin mean correlation.
    pub freq_corr_mean: [f64; 2],
    /// CKA against the reference map, or against itself when there is none.
    pub cka: f64,
    pub activated_area: f64,
}

pub fn diagnose(
    f: &Tensor,
    reference: Option<&Tensor>,
    cfg: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    let (c, h, w) = f.dims3()?;
    let pairs = sample_pairs(c, cfg.pair_budget, cfg.seed);
    let mut sum = [0.0; 2];
    let mut mean = [0.0; 2];
    for &(i, j) in &pairs {
        let a = Tensor::from_parts(vec![h, w], f.channel(i).to_vec());
        let b = Tensor::from_parts(vec![h, w], f.channel(j).to_vec());
        let r = freq_correlation(&a, &b)?;
        sum[0] += r.sum.0;
        sum[1] += r.sum.1;
        mean[0] += r.mean.0;
        mean[1] += r.mean.1;
    }
    let np = pairs.len().max(1) as f64;
    let mmc_curve = mmc(std::slice::from_ref(f))?;
    Ok(DiagnosticsReport {
        channels: c,
        mean_mi: channel_mi(f, cfg.mi_bins)?,
        mmc_flatness: mmc_flatness(&mmc_curve),
        mmc_curve,
        phase_hist: phase_diff_hist(f, cfg.pair_budget, cfg.seed)?,
        corr_cdf: corr_cdf(f, cfg.cdf_grid, cfg.pair_budget, cfg.seed)?,
        freq_corr_sum: [sum[0] / np, sum[1] / np],
        freq_corr_mean: [mean[0] / np, mean[1] / np],
        cka: feature_cka(f, reference.unwrap_or(f))?,
        activated_area: activated_area(f, cfg.tau)?,
    })
}
