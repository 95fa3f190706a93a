//! Deterministic synthetic cross-domain few-shot segmentation benchmark.
//!
//! Images are a random smooth shape filled with a band-limited foreground
//! texture over a band-limited background texture. A domain shift is then
//! injected in the frequency domain. Features come from a fixed, seeded
//! zero-mean random filter bank (conv, ReLU, stride-4 average pool, per-channel
//! centring).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapt_episode, encode_episode, frozen_prediction, score, AdaptConfig, Encoder, Maskers,
};
use crate::diagnostics::{activated_area, channel_mi, feature_cka, DEFAULT_MI_BINS, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::seghead::{BinaryMask, Episode};
use crate::spectral::{
    band_filter, forward_plane, inverse_plane, radius_frac, recombine_unchecked, Band,
    DEFAULT_RADIUS_FRAC,
};
use crate::tensor::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_CHANNELS: usize = 32;
pub const DEFAULT_KERNEL: usize = 5;
pub const POOL_STRIDE: usize = 4;

/// A radial frequency band `[lo, hi)` (fractions of the maximal centred radius) and its variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureBand {
    pub lo: f64,
    pub hi: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub mean: f64,
    pub bands: Vec<TextureBand>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shift {
    None,
    /// Adds `sigma`-scaled random amplitude to every bin above the band cutoff.
    HighBandAmpNoise {
        sigma: f64,
    },
    /// Multiplies non-DC amplitudes below the cutoff by `1 + gain`.
    LowBandAmpBoost {
        gain: f64,
    },
    /// Adds `sigma`-scaled random phase to every bin above the cutoff.
    PhaseJitter {
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Blob,
    Bar,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub seed: u64,
    pub foreground: TextureSpec,
    pub background: TextureSpec,
    pub shift: Shift,
    pub image_size: usize,
    pub shape_family: ShapeFamily,
    /// Low/high split used by the shift, as a radius fraction.
    pub band_cutoff: f64,
}

impl DomainSpec {
    /// The unshifted domain.
    pub fn source(seed: u64) -> Self {
        Self {
            seed,
            foreground: TextureSpec {
                mean: 0.7,
                bands: vec![TextureBand {
                    lo: 0.02,
                    hi: 0.12,
                    energy: 0.1,
                }],
            },
            background: TextureSpec {
                mean: 0.3,
                bands: vec![TextureBand {
                    lo: 0.12,
                    hi: 0.24,
                    energy: 0.0025,
                }],
            },
            shift: Shift::None,
            image_size: DEFAULT_IMAGE_SIZE,
            shape_family: ShapeFamily::Blob,
            band_cutoff: DEFAULT_RADIUS_FRAC,
        }
    }

    pub fn with_shift(mut self, shift: Shift) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sigma = match self.shift {
            Shift::None => 0.0,
            Shift::HighBandAmpNoise { sigma } | Shift::PhaseJitter { sigma } => sigma,
            Shift::LowBandAmpBoost { gain } => gain,
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Precondition(format!(
                "shift strength must be >= 0, got {sigma}"
            )));
        }
        for b in self.foreground.bands.iter().chain(&self.background.bands) {
            if !(0.0 <= b.lo && b.lo < b.hi && b.hi <= 1.0 && b.energy >= 0.0) {
                return Err(Error::Precondition(format!(
                    "texture band {b:?} outside [0, 1]"
                )));
            }
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(POOL_STRIDE) {
            return Err(Error::Precondition(format!(
                "image size {} must be a positive multiple of {POOL_STRIDE}",
                self.image_size
            )));
        }
        if !(self.band_cutoff > 0.0 && self.band_cutoff < 1.0) {
            return Err(Error::Precondition("band cutoff must be in (0, 1)".into()));
        }
        Ok(())
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn std_of(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Unit-variance noise whose spectrum is confined to one radial band.
fn band_noise(rng: &mut ChaCha8Rng, size: usize, lo: f64, hi: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut spec = forward_plane(&white, size, size);
    for (i, z) in spec.iter_mut().enumerate() {
        let r = radius_frac(i / size, i % size, size, size);
        if r < lo || r >= hi {
            *z = 0.0.into();
        }
    }
    let out: Vec<f64> = inverse_plane(spec, size, size)
        .iter()
        .map(|z| z.re)
        .collect();
    let s = std_of(&out);
    if s > 0.0 {
        out.iter().map(|v| v / s).collect()
    } else {
        out
    }
}

fn render_texture(rng: &mut ChaCha8Rng, spec: &TextureSpec, size: usize) -> Vec<f64> {
    let mut out = vec![spec.mean; size * size];
    for b in &spec.bands {
        let n = band_noise(rng, size, b.lo, b.hi);
        let scale = b.energy.sqrt();
        out.iter_mut().zip(n).for_each(|(o, v)| *o += scale * v);
    }
    out
}

fn render_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, size: usize) -> Result<BinaryMask> {
    let s = size as f64;
    let cx = rng.random_range(0.35..0.65) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    match family {
        ShapeFamily::Blob => {
            let r0 = rng.random_range(0.18..0.3) * s;
            let harmonics: Vec<(f64, f64)> = (2..5)
                .map(|_| (rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
                .collect();
            BinaryMask::from_fn(size, size, |i, j| {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let theta = dy.atan2(dx);
                let wobble: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, ph))| a * ((k + 2) as f64 * theta + ph).cos())
                    .sum();
                (dx * dx + dy * dy).sqrt() < r0 * (1.0 + wobble)
            })
        }
        ShapeFamily::Bar => {
            let angle = rng.random_range(0.0..PI);
            let half_len = rng.random_range(0.25..0.4) * s;
            let half_wid = rng.random_range(0.08..0.15) * s;
            let (sin, cos) = angle.sin_cos();
            BinaryMask::from_fn(size, size, |i, j| {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let along = dx * cos + dy * sin;
                let across = -dx * sin + dy * cos;
                along.abs() < half_len && across.abs() < half_wid
            })
        }
        ShapeFamily::Ring => {
            let r_out = rng.random_range(0.22..0.35) * s;
            let r_in = r_out * rng.random_range(0.45..0.6);
            BinaryMask::from_fn(size, size, |i, j| {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let r = (dx * dx + dy * dy).sqrt();
                r < r_out && r >= r_in
            })
        }
    }
}

/// Applies the domain shift to a single-channel `size x size` image in place.
fn apply_shift(seed: u64, img: &mut [f64], size: usize, shift: Shift, cutoff: f64) {
    if shift == Shift::None {
        return;
    }
    let spec = forward_plane(img, size, size);
    let mut amp: Vec<f64> = spec.iter().map(|z| z.norm()).collect();
    let mut phase: Vec<f64> = spec.iter().map(|z| z.arg()).collect();
    let high = |i: usize| radius_frac(i / size, i % size, size, size) > cutoff;
    let partner = |i: usize| ((size - i / size) % size) * size + (size - i % size) % size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..size * size)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    match shift {
        Shift::None => {}
        Shift::HighBandAmpNoise { sigma } => {
            // Zero-mean, Hermitian-symmetric amplitude perturbation scaled so
            // that the injected energy is sigma^2 times the image variance.
            let xi: Vec<f64> = (0..raw.len())
                .map(|i| 0.5 * (raw[i] + raw[partner(i)]))
                .collect();
            let band_energy: f64 = (0..xi.len())
                .filter(|&i| high(i))
                .map(|i| xi[i] * xi[i])
                .sum();
            if band_energy > 0.0 {
                let var = std_of(img).powi(2);
                let scale = sigma * (var / band_energy).sqrt();
                for i in (0..amp.len()).filter(|&i| high(i)) {
                    amp[i] += scale * xi[i];
                }
            }
        }
        Shift::LowBandAmpBoost { gain } => {
            for i in (1..amp.len()).filter(|&i| !high(i)) {
                amp[i] *= 1.0 + gain;
            }
        }
        Shift::PhaseJitter { sigma } => {
            for i in (0..phase.len()).filter(|&i| high(i)) {
                phase[i] += sigma * 0.5 * (raw[i] - raw[partner(i)]);
            }
        }
    }
    let out = recombine_unchecked(&amp, &phase, &[1, size, size]).expect("three-dimensional shape");
    img.copy_from_slice(out.data());
}

fn render_image(rng: &mut ChaCha8Rng, spec: &DomainSpec) -> Result<(Tensor, BinaryMask)> {
    let size = spec.image_size;
    let mask = render_shape(rng, spec.shape_family, size)?;
    let fg = render_texture(rng, &spec.foreground, size);
    let bg = render_texture(rng, &spec.background, size);
    // Drawn unconditionally so shifted and clean domains render the same scenes.
    let shift_seed: u64 = rng.random();
    let mut img: Vec<f64> = mask
        .data()
        .iter()
        .zip(fg.iter().zip(&bg))
        .map(|(&m, (&f, &b))| m * f + (1.0 - m) * b)
        .collect();
    apply_shift(shift_seed, &mut img, size, spec.shift, spec.band_cutoff);
    Ok((Tensor::new(vec![1, size, size], img)?, mask))
}

/// Renders `k` supports and one query, deterministic in `(spec.seed, episode_seed)`.
pub fn gen_episode(spec: &DomainSpec, k: usize, episode_seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Precondition("K must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, episode_seed));
    let mut supports = Vec::with_capacity(k);
    for _ in 0..k {
        supports.push(render_image(&mut rng, spec)?);
    }
    let (query_image, query_mask) = render_image(&mut rng, spec)?;
    Episode::new(supports, query_image, query_mask)
}

/// Frozen zero-mean random filter bank: conv (zero padding), ReLU, average pool, channel centring.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    /// `c_out x c_in x k x k`
    pub filters: Tensor,
    pub pool: usize,
}

impl FeatureExtractor {
    pub fn new(seed: u64, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Precondition(
                "encoder needs positive dims and an odd kernel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE0C0_DE00));
        let scale = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let n = c_out * c_in * kernel * kernel;
        let mut data: Vec<f64> = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // Zero-mean kernels: the bank responds to edges and texture, not to flat intensity.
        for k in data.chunks_mut(c_in * kernel * kernel) {
            let mean = k.iter().sum::<f64>() / k.len() as f64;
            k.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(Self {
            filters: Tensor::new(vec![c_out, c_in, kernel, kernel], data)?,
            pool: POOL_STRIDE,
        })
    }

    pub fn default_for(seed: u64) -> Result<Self> {
        Self::new(seed, 1, DEFAULT_CHANNELS, DEFAULT_KERNEL)
    }

    pub fn channels(&self) -> usize {
        self.filters.shape()[0]
    }

    /// Convolution responses before the nonlinearity, `c_out x H x W`.
    pub fn pre_activation(&self, img: &Tensor) -> Result<Tensor> {
        let (c_in, h, w) = img.dims3()?;
        let s = self.filters.shape();
        let (c_out, k) = (s[0], s[2]);
        if c_in != s[1] {
            return Err(Error::Precondition(format!(
                "encoder expects {} input channels, got {c_in}",
                s[1]
            )));
        }
        let r = k / 2;
        let f = self.filters.data();
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        let plane = img.channel(ci);
                        for a in 0..k {
                            let y = i + a;
                            if y < r || y - r >= h {
                                continue;
                            }
                            for b in 0..k {
                                let x = j + b;
                                if x < r || x - r >= w {
                                    continue;
                                }
                                acc += f[((o * c_in + ci) * k + a) * k + b]
                                    * plane[(y - r) * w + (x - r)];
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = acc;
                }
            }
        }
        Ok(Tensor::from_parts(vec![c_out, h, w], out))
    }

    pub fn extract(&self, img: &Tensor) -> Result<Tensor> {
        let (_, h, w) = img.dims3()?;
        if h % self.pool != 0 || w % self.pool != 0 {
            return Err(Error::Precondition(format!(
                "image {h}x{w} is not divisible by the pool stride {}",
                self.pool
            )));
        }
        let pre = self.pre_activation(img)?;
        let c = pre.shape()[0];
        let (ph, pw) = (h / self.pool, w / self.pool);
        let area = (self.pool * self.pool) as f64;
        let mut out = vec![0.0; c * ph * pw];
        for k in 0..c {
            let src = pre.channel(k);
            let dst = &mut out[k * ph * pw..(k + 1) * ph * pw];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / self.pool) * pw + j / self.pool] += src[i * w + j].max(0.0) / area;
                }
            }
            let mean = dst.iter().sum::<f64>() / (ph * pw) as f64;
            dst.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(Tensor::from_parts(vec![c, ph, pw], out))
    }
}

impl Encoder for FeatureExtractor {
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.extract(image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub episode: u64,
    pub baseline_miou: f64,
    pub adapted_miou: f64,
    pub delta_miou: f64,
    pub mi_pre: f64,
    pub mi_post: f64,
    pub area_pre: f64,
    pub area_post: f64,
    pub cka_pre: f64,
    pub cka_post: f64,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Every support loss is at most its predecessor.
    pub loss_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub episodes: usize,
    pub mean_baseline_miou: f64,
    pub mean_adapted_miou: f64,
    pub mean_delta_miou: f64,
    pub mean_mi_pre: f64,
    pub mean_mi_post: f64,
    pub mean_area_pre: f64,
    pub mean_area_post: f64,
    pub mean_cka_pre: f64,
    pub mean_cka_post: f64,
    pub improved_episodes: usize,
    pub improved_mean_mi_pre: Option<f64>,
    pub improved_mean_mi_post: Option<f64>,
    pub monotone_loss_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub summary: BenchSummary,
    pub rows: Vec<BenchRow>,
    /// Mean sigmoid amplitude gate per frequency bin, DC-centred, `h x w`.
    #[serde(skip)]
    pub amp_gate_response: Tensor,
    #[serde(skip)]
    pub phase_gate_response: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub episodes: usize,
    pub shots: usize,
    pub jobs: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            episodes: 30,
            shots: 1,
            jobs: 1,
        }
    }
}

/// Channel-averaged sigmoid gates, moved so the DC bin sits at the centre.
fn centred_gate_response(gates: &Tensor) -> Tensor {
    let (c, h, w) = gates.dims3().expect("APM masks are three-dimensional");
    let mut out = vec![0.0; h * w];
    for k in 0..c {
        for (i, v) in gates.channel(k).iter().enumerate() {
            let (u, vv) = (i / w, i % w);
            let (su, sv) = ((u + h / 2) % h, (vv + w / 2) % w);
            out[su * w + sv] += v / c as f64;
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

fn evaluate_episode(
    target: &DomainSpec,
    encoder: &FeatureExtractor,
    cfg: &AdaptConfig,
    shots: usize,
    index: u64,
) -> Result<(BenchRow, Maskers)> {
    let ep = gen_episode(target, shots, index)?;
    let (_, trace) = adapt_episode(&ep, encoder, cfg, index)?;
    let enc = encode_episode(&ep, encoder)?;
    let stats = |m: &Maskers| -> Result<(f64, f64, f64)> {
        let q = m.query_features(&enc.query_feat)?;
        let s = m.support_features(&enc.support_feats[0], &enc.small_masks[0])?;
        Ok((
            channel_mi(&q, DEFAULT_MI_BINS)?,
            activated_area(&q, DEFAULT_TAU)?,
            feature_cka(&q, &s)?,
        ))
    };
    let (mi_pre, area_pre, cka_pre) = stats(&trace.initial)?;
    let (mi_post, area_post, cka_post) = stats(&trace.adapted)?;
    let losses = &trace.losses;
    let row = BenchRow {
        episode: index,
        baseline_miou: trace.baseline_miou,
        adapted_miou: trace.final_miou,
        delta_miou: trace.final_miou - trace.baseline_miou,
        mi_pre,
        mi_post,
        area_pre,
        area_post,
        cka_pre,
        cka_post,
        first_loss: losses[0],
        final_loss: *losses.last().unwrap(),
        loss_monotone: losses.windows(2).all(|w| w[1] <= w[0]),
    };
    Ok((row, trace.adapted))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Adapts and evaluates `opts.episodes` target episodes. Rows are assembled in
/// episode order, so the report does not depend on `opts.jobs`.
pub fn run_benchmark(
    source: &DomainSpec,
    target: &DomainSpec,
    cfg: &AdaptConfig,
    opts: &BenchOptions,
) -> Result<BenchmarkReport> {
    if opts.episodes == 0 || opts.shots == 0 || opts.jobs == 0 {
        return Err(Error::Precondition(
            "episodes, shots and jobs must be at least 1".into(),
        ));
    }
    source.validate()?;
    target.validate()?;
    cfg.validate()?;
    let encoder = FeatureExtractor::default_for(source.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Precondition(format!("cannot build thread pool: {e}")))?;
    let results: Vec<(BenchRow, Maskers)> = pool.install(|| {
        (0..opts.episodes as u64)
            .into_par_iter()
            .map(|i| evaluate_episode(target, &encoder, cfg, opts.shots, i))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut amp_acc: Option<Tensor> = None;
    let mut phase_acc: Option<Tensor> = None;
    for (_, m) in &results {
        for (acc, gates) in [
            (&mut amp_acc, m.apm.amp_gates()),
            (&mut phase_acc, m.apm.phase_gates()),
        ] {
            let r = centred_gate_response(&gates);
            match acc {
                Some(a) => a
                    .data_mut()
                    .iter_mut()
                    .zip(r.data())
                    .for_each(|(x, y)| *x += y),
                None => *acc = Some(r),
            }
        }
    }
    let n = results.len() as f64;
    let rows: Vec<BenchRow> = results.into_iter().map(|(r, _)| r).collect();
    let improved: Vec<&BenchRow> = rows
        .iter()
        .filter(|r| r.adapted_miou > r.baseline_miou)
        .collect();
    let summary = BenchSummary {
        episodes: rows.len(),
        mean_baseline_miou: mean(rows.iter().map(|r| r.baseline_miou)),
        mean_adapted_miou: mean(rows.iter().map(|r| r.adapted_miou)),
        mean_delta_miou: mean(rows.iter().map(|r| r.delta_miou)),
        mean_mi_pre: mean(rows.iter().map(|r| r.mi_pre)),
        mean_mi_post: mean(rows.iter().map(|r| r.mi_post)),
        mean_area_pre: mean(rows.iter().map(|r| r.area_pre)),
        mean_area_post: mean(rows.iter().map(|r| r.area_post)),
        mean_cka_pre: mean(rows.iter().map(|r| r.cka_pre)),
        mean_cka_post: mean(rows.iter().map(|r| r.cka_post)),
        improved_episodes: improved.len(),
        improved_mean_mi_pre: (!improved.is_empty())
            .then(|| mean(improved.iter().map(|r| r.mi_pre))),
        improved_mean_mi_post: (!improved.is_empty())
            .then(|| mean(improved.iter().map(|r| r.mi_post))),
        monotone_loss_fraction: rows.iter().filter(|r| r.loss_monotone).count() as f64
            / rows.len() as f64,
    };
    Ok(BenchmarkReport {
        summary,
        rows,
        amp_gate_response: amp_acc.expect("at least one episode").scale(1.0 / n),
        phase_gate_response: phase_acc.expect("at least one episode").scale(1.0 / n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub amp_band: Band,
    pub phase_band: Band,
    pub mean_miou: f64,
    pub per_episode: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub cutoff: f64,
    /// Mean frozen-pipeline mIoU on the unfiltered episodes.
    pub baseline_miou: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, amp: Band, phase: Band) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.amp_band == amp && r.phase_band == phase)
    }
}

fn filter_episode(ep: &Episode, amp: Band, phase: Band, cutoff: f64) -> Result<Episode> {
    let supports = ep
        .supports
        .iter()
        .map(|(img, m)| Ok((band_filter(img, amp, phase, cutoff)?, m.clone())))
        .collect::<Result<Vec<_>>>()?;
    Episode::new(
        supports,
        band_filter(&ep.query_image, amp, phase, cutoff)?,
        ep.query_mask.clone(),
    )
}

fn frozen_miou(ep: &Episode, encoder: &FeatureExtractor, cfg: &AdaptConfig) -> Result<f64> {
    let enc = encode_episode(ep, encoder)?;
    let (_, prob) = frozen_prediction(&enc, cfg)?;
    score(&prob, &ep.query_mask)
}

/// Frozen-pipeline mIoU for every (amplitude band, phase band) filter applied to
/// the input images of each target episode.
pub fn run_sweep(
    source: &DomainSpec,
    target: &DomainSpec,
    cfg: &AdaptConfig,
    opts: &BenchOptions,
    cutoff: f64,
) -> Result<SweepReport> {
    if opts.episodes == 0 || opts.shots == 0 || opts.jobs == 0 {
        return Err(Error::Precondition(
            "episodes, shots and jobs must be at least 1".into(),
        ));
    }
    source.validate()?;
    target.validate()?;
    cfg.validate()?;
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Precondition(format!(
            "cutoff must be in (0, 1), got {cutoff}"
        )));
    }
    let encoder = FeatureExtractor::default_for(source.seed)?;
    let combos: Vec<(Band, Band)> = Band::ALL
        .iter()
        .flat_map(|&a| Band::ALL.iter().map(move |&p| (a, p)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Precondition(format!("cannot build thread pool: {e}")))?;
    // One row per episode: the unfiltered score followed by the nine filtered ones.
    let table: Vec<Vec<f64>> = pool.install(|| {
        (0..opts.episodes as u64)
            .into_par_iter()
            .map(|i| {
                let ep = gen_episode(target, opts.shots, i)?;
                let mut out = vec![frozen_miou(&ep, &encoder, cfg)?];
                for &(a, p) in &combos {
                    out.push(frozen_miou(
                        &filter_episode(&ep, a, p, cutoff)?,
                        &encoder,
                        cfg,
                    )?);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = combos
        .iter()
        .enumerate()
        .map(|(j, &(amp_band, phase_band))| {
            let per_episode: Vec<f64> = table.iter().map(|r| r[j + 1]).collect();
            SweepRow {
                amp_band,
                phase_band,
                mean_miou: mean(per_episode.iter().copied()),
                per_episode,
            }
        })
        .collect();
    Ok(SweepReport {
        cutoff,
        baseline_miou: mean(table.iter().map(|r| r[0])),
        rows,
    })
}
