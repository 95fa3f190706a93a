//! Amplitude-phase masker.
//!
//! Forward: `F = FFT(f)`, `A' = sigmoid(M_a) * |F|`, `P' = sigmoid(M_p) * arg F`,
//! output `Re IFFT(A' exp(i P'))`. The single-mask variant shares one `h x w`
//! mask across channels; the multi-mask variant carries a full `c x h x w` mask.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{sigmoid, AMP_EPS};
use crate::error::{Error, Result};
use crate::spectral::{fft2_in_place, forward_plane, inverse_plane, principal_arg};
use crate::tensor::Tensor;

/// Raw logit of the literal "all ones" initialization.
pub const LITERAL_INIT_LOGIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ApmVariant {
    /// One `1 x h x w` mask shared by all channels.
    #[serde(rename = "apm-s")]
    S,
    /// A full `c x h x w` mask.
    #[serde(rename = "apm-m")]
    M,
}

impl ApmVariant {
    pub fn name(self) -> &'static str {
        match self {
            ApmVariant::S => "apm-s",
            ApmVariant::M => "apm-m",
        }
    }

    pub fn mask_shape(self, c: usize, h: usize, w: usize) -> [usize; 3] {
        match self {
            ApmVariant::S => [1, h, w],
            ApmVariant::M => [c, h, w],
        }
    }
}

impl std::str::FromStr for ApmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "apm-s" | "s" => Ok(ApmVariant::S),
            "apm-m" | "m" => Ok(ApmVariant::M),
            other => Err(Error::Precondition(format!(
                "unknown APM variant {other:?}"
            ))),
        }
    }
}

/// Learnable amplitude and phase mask logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ApmParams {
    pub variant: ApmVariant,
    pub raw_amp: Tensor,
    pub raw_phase: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApmGrads {
    pub raw_amp: Tensor,
    pub raw_phase: Tensor,
    pub input: Tensor,
}

/// Initializes both masks with raw logits of 1.0.
pub fn apm_init(variant: ApmVariant, c: usize, h: usize, w: usize) -> Result<ApmParams> {
    ApmParams::with_logit(variant, c, h, w, LITERAL_INIT_LOGIT)
}

impl ApmParams {
    pub fn with_logit(
        variant: ApmVariant,
        c: usize,
        h: usize,
        w: usize,
        logit: f64,
    ) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Precondition(format!(
                "APM dims must be positive, got {c}x{h}x{w}"
            )));
        }
        let shape = variant.mask_shape(c, h, w);
        Ok(Self {
            variant,
            raw_amp: Tensor::filled(&shape, logit)?,
            raw_phase: Tensor::filled(&shape, logit)?,
        })
    }

    pub fn from_parts(variant: ApmVariant, raw_amp: Tensor, raw_phase: Tensor) -> Result<Self> {
        let (mc, _, _) = raw_amp.dims3()?;
        raw_phase.ensure_shape(raw_amp.shape())?;
        if variant == ApmVariant::S && mc != 1 {
            return Err(Error::Precondition(format!(
                "apm-s masks must have one channel, got shape {:?}",
                raw_amp.shape()
            )));
        }
        Ok(Self {
            variant,
            raw_amp,
            raw_phase,
        })
    }

    pub fn amp_gates(&self) -> Tensor {
        self.raw_amp.map(sigmoid)
    }

    pub fn phase_gates(&self) -> Tensor {
        self.raw_phase.map(sigmoid)
    }

    fn check_input(&self, f: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = f.dims3()?;
        let expected = self.variant.mask_shape(c, h, w);
        if self.raw_amp.shape() != expected {
            return Err(Error::Precondition(format!(
                "APM mask shape {:?} does not fit feature map shape {:?}",
                self.raw_amp.shape(),
                f.shape()
            )));
        }
        Ok((c, h, w))
    }

    fn mask_index(&self, k: usize, bin: usize, plane: usize) -> usize {
        match self.variant {
            ApmVariant::S => bin,
            ApmVariant::M => k * plane + bin,
        }
    }
}

pub fn apm_forward(f: &Tensor, p: &ApmParams) -> Result<Tensor> {
    let (c, h, w) = p.check_input(f)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for k in 0..c {
        let spec = forward_plane(f.channel(k), h, w);
        let gated = spec
            .iter()
            .enumerate()
            .map(|(bin, z)| {
                let m = p.mask_index(k, bin, plane);
                let amp = sigmoid(p.raw_amp.data()[m]) * z.norm();
                let phase = sigmoid(p.raw_phase.data()[m]) * principal_arg(z.re, z.im);
                Complex64::from_polar(amp, phase)
            })
            .collect();
        out.extend(inverse_plane(gated, h, w).iter().map(|z| z.re));
    }
    Ok(Tensor::from_parts(f.shape().to_vec(), out))
}

/// Reverse-mode gradients of `apm_forward` given the upstream gradient.
pub fn apm_backward(f: &Tensor, p: &ApmParams, grad_out: &Tensor) -> Result<ApmGrads> {
    let (c, h, w) = p.check_input(f)?;
    grad_out.ensure_shape(f.shape())?;
    let plane = h * w;
    let n = plane as f64;
    let mut g_amp = vec![0.0; p.raw_amp.len()];
    let mut g_phase = vec![0.0; p.raw_phase.len()];
    let mut g_in = Vec::with_capacity(c * plane);

    for k in 0..c {
        let spec = forward_plane(f.channel(k), h, w);
        // d loss / d (Re G, Im G) for the gated spectrum G.
        let mut upstream: Vec<Complex64> = grad_out
            .channel(k)
            .iter()
            .map(|&g| Complex64::new(g, 0.0))
            .collect();
        fft2_in_place(&mut upstream, h, w, false);

        let mut g_spec = Vec::with_capacity(plane);
        for (bin, (z, up)) in spec.iter().zip(&upstream).enumerate() {
            let m = p.mask_index(k, bin, plane);
            let sa = sigmoid(p.raw_amp.data()[m]);
            let sp = sigmoid(p.raw_phase.data()[m]);
            let alpha = z.norm();
            let rho = principal_arg(z.re, z.im);
            let (sin_g, cos_g) = (sp * rho).sin_cos();
            let alpha_g = sa * alpha;

            let d_alpha_g = up.re * cos_g + up.im * sin_g;
            let d_rho_g = alpha_g * (up.im * cos_g - up.re * sin_g);

            g_amp[m] += d_alpha_g * alpha * sa * (1.0 - sa);
            g_phase[m] += d_rho_g * rho * sp * (1.0 - sp);

            let d_alpha = d_alpha_g * sa;
            let d_rho = d_rho_g * sp;
            g_spec.push(if alpha < AMP_EPS {
                Complex64::new(0.0, 0.0)
            } else {
                let a2 = alpha * alpha;
                Complex64::new(
                    d_alpha * z.re / alpha - d_rho * z.im / a2,
                    d_alpha * z.im / alpha + d_rho * z.re / a2,
                )
            });
        }
        g_in.extend(inverse_plane(g_spec, h, w).iter().map(|z| z.re / n));
    }

    Ok(ApmGrads {
        raw_amp: Tensor::from_parts(p.raw_amp.shape().to_vec(), g_amp),
        raw_phase: Tensor::from_parts(p.raw_phase.shape().to_vec(), g_phase),
        input: Tensor::from_parts(f.shape().to_vec(), g_in),
    })
}
