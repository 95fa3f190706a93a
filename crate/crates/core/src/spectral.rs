//! Per-channel 2D Fourier analysis: forward/inverse transforms, polar
//! (amplitude, phase) decomposition and radial band filtering.
//!
//! Normalization convention: the forward transform carries the `1/(h*w)`
//! factor, the inverse carries none. Under this convention the DC bin equals
//! the channel mean and `sum |f|^2 == h*w * sum |F|^2`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

/// Default low/high split, as a fraction of the maximal centered radius.
pub const DEFAULT_RADIUS_FRAC: f64 = 0.25;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

fn transpose(src: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Unnormalized in-place 2D FFT of a row-major `h x w` buffer.
pub(crate) fn fft2_in_place(buf: &mut Vec<Complex64>, h: usize, w: usize, inverse: bool) {
    if w > 1 {
        plan(w, inverse).process(buf);
    }
    if h > 1 {
        let mut cols = transpose(buf, h, w);
        plan(h, inverse).process(&mut cols);
        *buf = transpose(&cols, w, h);
    }
}

/// Whether bin `(u, v)` is its own conjugate partner.
pub(crate) fn self_conjugate(u: usize, v: usize, h: usize, w: usize) -> bool {
    (2 * u).is_multiple_of(h) && (2 * v).is_multiple_of(w)
}

/// Normalized forward transform of one real `h x w` plane.
pub(crate) fn forward_plane(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, false);
    let norm = 1.0 / (h * w) as f64;
    for (i, z) in buf.iter_mut().enumerate() {
        *z *= norm;
        // Real input: self-conjugate bins are exactly real.
        if self_conjugate(i / w, i % w, h, w) {
            z.im = 0.0;
        }
    }
    buf
}

/// Unnormalized inverse transform of one complex `h x w` plane.
pub(crate) fn inverse_plane(mut buf: Vec<Complex64>, h: usize, w: usize) -> Vec<Complex64> {
    fft2_in_place(&mut buf, h, w, true);
    buf
}

/// Principal-value phase in `(-pi, pi]`.
pub fn principal_arg(re: f64, im: f64) -> f64 {
    let a = im.atan2(re);
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Forward 2D DFT of a single `h x w` channel with the `1/(h*w)` factor.
pub fn dft2(channel: &Tensor) -> Result<ComplexTensor> {
    let (h, w) = channel.dims2()?;
    let spec = forward_plane(channel.data(), h, w);
    let (re, im) = spec.iter().map(|z| (z.re, z.im)).unzip();
    Ok(ComplexTensor::from_parts(vec![h, w], re, im))
}

/// Inverse 2D DFT (no normalization factor), keeping the imaginary part.
pub fn idft2_complex(spectrum: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = match spectrum.shape() {
        &[h, w] => (h, w),
        other => {
            return Err(Error::Precondition(format!(
                "expected an h x w spectrum, got {other:?}"
            )))
        }
    };
    let buf = spectrum
        .re()
        .iter()
        .zip(spectrum.im())
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect();
    let out = inverse_plane(buf, h, w);
    let (re, im) = out.iter().map(|z| (z.re, z.im)).unzip();
    Ok(ComplexTensor::from_parts(vec![h, w], re, im))
}

/// Inverse 2D DFT returning the real part of the reconstruction.
pub fn idft2(spectrum: &ComplexTensor) -> Result<Tensor> {
    let (shape, re, _) = idft2_complex(spectrum)?.into_parts();
    Ok(Tensor::from_parts(shape, re))
}

/// Polar form of a feature map's per-channel spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    amplitude: Tensor,
    phase: Tensor,
}

impl Spectrum {
    pub fn new(amplitude: Tensor, phase: Tensor) -> Result<Self> {
        amplitude.dims3()?;
        phase.ensure_shape(amplitude.shape())?;
        if let Some(a) = amplitude.data().iter().find(|&&a| a < 0.0) {
            return Err(Error::Invariant(format!("negative amplitude {a}")));
        }
        if let Some(p) = phase.data().iter().find(|&&p| p <= -PI || p > PI) {
            return Err(Error::Invariant(format!("phase {p} outside (-pi, pi]")));
        }
        Ok(Self { amplitude, phase })
    }

    pub fn amplitude(&self) -> &Tensor {
        &self.amplitude
    }

    pub fn phase(&self) -> &Tensor {
        &self.phase
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.amplitude, self.phase)
    }
}

/// Splits every channel of `f` into amplitude and principal phase.
pub fn decompose(f: &Tensor) -> Result<Spectrum> {
    let (c, h, w) = f.dims3()?;
    let mut amp = Vec::with_capacity(c * h * w);
    let mut pha = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for z in forward_plane(f.channel(k), h, w) {
            amp.push(z.norm());
            pha.push(principal_arg(z.re, z.im));
        }
    }
    Ok(Spectrum {
        amplitude: Tensor::from_parts(vec![c, h, w], amp),
        phase: Tensor::from_parts(vec![c, h, w], pha),
    })
}

/// Rebuilds `alpha * exp(i rho)` per channel and returns the real part of its inverse.
pub fn recombine(s: &Spectrum) -> Result<Tensor> {
    if s.amplitude.data().iter().any(|&a| a < 0.0) {
        return Err(Error::Invariant("negative amplitude in spectrum".into()));
    }
    recombine_unchecked(s.amplitude.data(), s.phase.data(), s.amplitude.shape())
}

pub(crate) fn recombine_unchecked(amp: &[f64], phase: &[f64], shape: &[usize]) -> Result<Tensor> {
    let (c, h, w) = match shape {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::Precondition(format!(
                "expected c x h x w, got {other:?}"
            )))
        }
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for k in 0..c {
        let buf = (0..plane)
            .map(|i| Complex64::from_polar(amp[k * plane + i], phase[k * plane + i]))
            .collect();
        out.extend(inverse_plane(buf, h, w).iter().map(|z| z.re));
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Frequency band selector for [`band_filter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Full,
    Low,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Full, Band::Low, Band::High];

    pub fn keeps(self, radius_frac: f64, cutoff: f64) -> bool {
        match self {
            Band::Full => true,
            Band::Low => radius_frac <= cutoff,
            Band::High => radius_frac > cutoff,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Full => "full",
            Band::Low => "low",
            Band::High => "high",
        }
    }
}

impl std::str::FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Band::Full),
            "low" => Ok(Band::Low),
            "high" => Ok(Band::High),
            other => Err(Error::Precondition(format!("unknown band {other:?}"))),
        }
    }
}

/// Distance of bin `(u, v)` from the DC bin of the centered spectrum, as a
/// fraction of the largest such distance.
pub fn radius_frac(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let centered = |k: usize, n: usize| ((k + n / 2) % n) as f64 - (n / 2) as f64;
    let du = centered(u, h);
    let dv = centered(v, w);
    let rmax = (((h / 2) * (h / 2) + (w / 2) * (w / 2)) as f64).sqrt();
    if rmax == 0.0 {
        0.0
    } else {
        (du * du + dv * dv).sqrt() / rmax
    }
}

/// Zeroes amplitude and/or phase outside the selected radial bands.
pub fn band_filter(t: &Tensor, amp_band: Band, phase_band: Band, cutoff: f64) -> Result<Tensor> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Precondition(format!(
            "radius fraction must be in (0, 1), got {cutoff}"
        )));
    }
    let (_, h, w) = t.dims3()?;
    if amp_band == Band::Full && phase_band == Band::Full {
        return Ok(t.clone());
    }
    let (mut amp, mut phase) = decompose(t)?.into_parts();
    let plane = h * w;
    for (i, (a, p)) in amp.data_mut().iter_mut().zip(phase.data_mut()).enumerate() {
        let bin = i % plane;
        let r = radius_frac(bin / w, bin % w, h, w);
        if !amp_band.keeps(r, cutoff) {
            *a = 0.0;
        }
        if !phase_band.keeps(r, cutoff) {
            *p = 0.0;
        }
    }
    recombine_unchecked(amp.data(), phase.data(), t.shape())
}
