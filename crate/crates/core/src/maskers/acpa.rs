//! Channel phase attention: a squeeze-and-excitation block driven by the
//! spatial mean of each channel's phase spectrum, producing one scalar gate
//! per channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sigmoid, AMP_EPS};
use crate::error::{Error, Result};
use crate::spectral::{forward_plane, inverse_plane, principal_arg};
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct AcpaParams {
    pub reduction: usize,
    /// `hidden x c`
    pub w_reduce: Tensor,
    pub b_reduce: Tensor,
    /// `c x hidden`
    pub w_expand: Tensor,
    pub b_expand: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcpaGrads {
    pub w_reduce: Tensor,
    pub b_reduce: Tensor,
    pub w_expand: Tensor,
    pub b_expand: Tensor,
    pub input: Tensor,
}

pub fn hidden_width(c: usize, reduction: usize) -> usize {
    (c / reduction.max(1)).max(1)
}

impl AcpaParams {
    /// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(c: usize, reduction: usize, seed: u64) -> Result<Self> {
        if c == 0 || reduction == 0 {
            return Err(Error::Precondition(format!(
                "ACPA needs positive channels and reduction, got c={c} r={reduction}"
            )));
        }
        let hidden = hidden_width(c, reduction);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let w_reduce = uniform(hidden * c, c);
        let b_reduce = uniform(hidden, c);
        let w_expand = uniform(c * hidden, hidden);
        let b_expand = uniform(c, hidden);
        Ok(Self {
            reduction,
            w_reduce: Tensor::from_parts(vec![hidden, c], w_reduce),
            b_reduce: Tensor::from_parts(vec![hidden], b_reduce),
            w_expand: Tensor::from_parts(vec![c, hidden], w_expand),
            b_expand: Tensor::from_parts(vec![c], b_expand),
        })
    }

    pub fn zeros(c: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(c, reduction);
        Ok(Self {
            reduction,
            w_reduce: Tensor::zeros(&[hidden, c])?,
            b_reduce: Tensor::zeros(&[hidden])?,
            w_expand: Tensor::zeros(&[c, hidden])?,
            b_expand: Tensor::zeros(&[c])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.b_expand.len()
    }

    pub fn hidden(&self) -> usize {
        self.b_reduce.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, hid) = (self.channels(), self.hidden());
        self.w_reduce.ensure_shape(&[hid, c])?;
        self.w_expand.ensure_shape(&[c, hid])?;
        if hid == 0 {
            return Err(Error::Invariant(
                "ACPA hidden width must be at least 1".into(),
            ));
        }
        for t in [
            &self.w_reduce,
            &self.b_reduce,
            &self.w_expand,
            &self.b_expand,
        ] {
            if !t.is_finite() {
                return Err(Error::Invariant("ACPA weights must be finite".into()));
            }
        }
        Ok(())
    }
}

struct SeTrace {
    squeeze: Vec<f64>,
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    weights: Vec<f64>,
}

fn excite(p: &AcpaParams, squeeze: Vec<f64>) -> SeTrace {
    let (c, hid) = (p.channels(), p.hidden());
    let w1 = p.w_reduce.data();
    let w2 = p.w_expand.data();
    let pre_hidden: Vec<f64> = (0..hid)
        .map(|r| p.b_reduce.data()[r] + (0..c).map(|j| w1[r * c + j] * squeeze[j]).sum::<f64>())
        .collect();
    let hidden: Vec<f64> = pre_hidden.iter().map(|&v| v.max(0.0)).collect();
    let weights = (0..c)
        .map(|j| {
            sigmoid(
                p.b_expand.data()[j] + (0..hid).map(|r| w2[j * hid + r] * hidden[r]).sum::<f64>(),
            )
        })
        .collect();
    SeTrace {
        squeeze,
        pre_hidden,
        hidden,
        weights,
    }
}

fn phase_squeeze(f: &Tensor, h: usize, w: usize) -> Vec<f64> {
    let c = f.shape()[0];
    let n = (h * w) as f64;
    (0..c)
        .map(|k| {
            forward_plane(f.channel(k), h, w)
                .iter()
                .map(|z| principal_arg(z.re, z.im))
                .sum::<f64>()
                / n
        })
        .collect()
}

fn check(f: &Tensor, p: &AcpaParams) -> Result<(usize, usize, usize)> {
    let (c, h, w) = f.dims3()?;
    if c != p.channels() {
        return Err(Error::Precondition(format!(
            "ACPA built for {} channels, feature map has {c}",
            p.channels()
        )));
    }
    Ok((c, h, w))
}

/// Per-channel phase attention weights for `f`.
pub fn acpa_weights(f: &Tensor, p: &AcpaParams) -> Result<Vec<f64>> {
    let (_, h, w) = check(f, p)?;
    Ok(excite(p, phase_squeeze(f, h, w)).weights)
}

/// Scales each channel of `f` by its phase attention weight.
pub fn acpa_forward(f: &Tensor, p: &AcpaParams) -> Result<(Tensor, Vec<f64>)> {
    let weights = acpa_weights(f, p)?;
    let mut out = f.clone();
    for (k, &wk) in weights.iter().enumerate() {
        out.channel_mut(k).iter_mut().for_each(|v| *v *= wk);
    }
    Ok((out, weights))
}

pub fn acpa_backward(f: &Tensor, p: &AcpaParams, grad_out: &Tensor) -> Result<AcpaGrads> {
    let (c, h, w) = check(f, p)?;
    grad_out.ensure_shape(f.shape())?;
    let hid = p.hidden();
    let plane = h * w;
    let n = plane as f64;
    let trace = excite(p, phase_squeeze(f, h, w));

    let mut g_in = grad_out.clone();
    let mut d_pre_out = vec![0.0; c];
    for (k, d) in d_pre_out.iter_mut().enumerate() {
        let dw: f64 = grad_out
            .channel(k)
            .iter()
            .zip(f.channel(k))
            .map(|(g, x)| g * x)
            .sum();
        let wk = trace.weights[k];
        *d = dw * wk * (1.0 - wk);
        g_in.channel_mut(k).iter_mut().for_each(|v| *v *= wk);
    }

    let w1 = p.w_reduce.data();
    let w2 = p.w_expand.data();
    let mut g_w2 = vec![0.0; c * hid];
    let mut d_hidden = vec![0.0; hid];
    for j in 0..c {
        for r in 0..hid {
            g_w2[j * hid + r] = d_pre_out[j] * trace.hidden[r];
            d_hidden[r] += w2[j * hid + r] * d_pre_out[j];
        }
    }
    let d_pre_hidden: Vec<f64> = d_hidden
        .iter()
        .zip(&trace.pre_hidden)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    let mut g_w1 = vec![0.0; hid * c];
    let mut d_squeeze = vec![0.0; c];
    for r in 0..hid {
        for j in 0..c {
            g_w1[r * c + j] = d_pre_hidden[r] * trace.squeeze[j];
            d_squeeze[j] += w1[r * c + j] * d_pre_hidden[r];
        }
    }

    // Through the phase: d arg(F) / d(Re F, Im F) = (-Im F, Re F) / |F|^2.
    for (k, &ds) in d_squeeze.iter().enumerate() {
        if ds == 0.0 {
            continue;
        }
        let d_rho = ds / n;
        let g_spec = forward_plane(f.channel(k), h, w)
            .iter()
            .map(|z| {
                let a2 = z.norm_sqr();
                if a2.sqrt() < AMP_EPS {
                    rustfft::num_complex::Complex64::new(0.0, 0.0)
                } else {
                    rustfft::num_complex::Complex64::new(-d_rho * z.im / a2, d_rho * z.re / a2)
                }
            })
            .collect();
        for (g, z) in g_in
            .channel_mut(k)
            .iter_mut()
            .zip(inverse_plane(g_spec, h, w))
        {
            *g += z.re / n;
        }
    }

    Ok(AcpaGrads {
        w_reduce: Tensor::from_parts(vec![hid, c], g_w1),
        b_reduce: Tensor::from_parts(vec![hid], d_pre_hidden),
        w_expand: Tensor::from_parts(vec![c, hid], g_w2),
        b_expand: Tensor::from_parts(vec![c], d_pre_out),
        input: g_in,
    })
}
