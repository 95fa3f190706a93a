//! Learnable frequency-domain maskers and their state files.

mod acpa;
mod apm;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use acpa::{
    acpa_backward, acpa_forward, acpa_weights, hidden_width, AcpaGrads, AcpaParams,
    DEFAULT_REDUCTION,
};
pub use apm::{
    apm_backward, apm_forward, apm_init, ApmGrads, ApmParams, ApmVariant, LITERAL_INIT_LOGIT,
};

use crate::error::{Error, Result};
use crate::seghead::BinaryMask;
use crate::tensor::Tensor;

/// Bins with amplitude below this carry no phase gradient.
pub const AMP_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zeroes support activations outside the (nearest-downsampled) mask.
pub fn mask_support(f_sup: &Tensor, m: &BinaryMask) -> Result<Tensor> {
    let (_, h, w) = f_sup.dims3()?;
    let small = m.downsample(h, w);
    Ok(apply_small_mask(f_sup, &small))
}

pub(crate) fn apply_small_mask(f: &Tensor, small: &BinaryMask) -> Tensor {
    let mut out = f.clone();
    let c = f.shape()[0];
    for k in 0..c {
        for (v, &m) in out.channel_mut(k).iter_mut().zip(small.data()) {
            *v *= m;
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskerSidecar {
    variant: ApmVariant,
    mask_shape: Vec<usize>,
    acpa: Option<AcpaSidecar>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AcpaSidecar {
    reduction_r: usize,
    channels: usize,
    hidden: usize,
}

/// Writes masker state as SMT tensors plus a `<stem>.json` sidecar.
pub fn save_maskers(
    dir: &Path,
    stem: &str,
    apm: &ApmParams,
    acpa: Option<&AcpaParams>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for g in [apm.amp_gates(), apm.phase_gates()] {
        if g.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("sigmoid gate outside [0, 1]".into()));
        }
    }
    apm.raw_amp.write(dir.join(format!("{stem}_apm_amp.smt")))?;
    apm.raw_phase
        .write(dir.join(format!("{stem}_apm_phase.smt")))?;
    let acpa_meta = match acpa {
        Some(a) => {
            a.validate()?;
            a.w_reduce
                .write(dir.join(format!("{stem}_acpa_w_reduce.smt")))?;
            a.b_reduce
                .write(dir.join(format!("{stem}_acpa_b_reduce.smt")))?;
            a.w_expand
                .write(dir.join(format!("{stem}_acpa_w_expand.smt")))?;
            a.b_expand
                .write(dir.join(format!("{stem}_acpa_b_expand.smt")))?;
            Some(AcpaSidecar {
                reduction_r: a.reduction,
                channels: a.channels(),
                hidden: a.hidden(),
            })
        }
        None => None,
    };
    let sidecar = MaskerSidecar {
        variant: apm.variant,
        mask_shape: apm.raw_amp.shape().to_vec(),
        acpa: acpa_meta,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

pub fn load_maskers(dir: &Path, stem: &str) -> Result<(ApmParams, Option<AcpaParams>)> {
    let path = dir.join(format!("{stem}.json"));
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: MaskerSidecar = serde_json::from_slice(&bytes)?;
    let raw_amp = Tensor::read(dir.join(format!("{stem}_apm_amp.smt")))?;
    let raw_phase = Tensor::read(dir.join(format!("{stem}_apm_phase.smt")))?;
    raw_amp.ensure_shape(&sidecar.mask_shape)?;
    let apm = ApmParams::from_parts(sidecar.variant, raw_amp, raw_phase)?;
    let acpa = match sidecar.acpa {
        Some(meta) => {
            let a = AcpaParams {
                reduction: meta.reduction_r,
                w_reduce: Tensor::read(dir.join(format!("{stem}_acpa_w_reduce.smt")))?,
                b_reduce: Tensor::read(dir.join(format!("{stem}_acpa_b_reduce.smt")))?,
                w_expand: Tensor::read(dir.join(format!("{stem}_acpa_w_expand.smt")))?,
                b_expand: Tensor::read(dir.join(format!("{stem}_acpa_b_expand.smt")))?,
            };
            a.validate()?;
            if a.channels() != meta.channels || a.hidden() != meta.hidden {
                return Err(Error::Integrity(
                    "ACPA tensors disagree with sidecar".into(),
                ));
            }
            Some(a)
        }
        None => None,
    };
    Ok((apm, acpa))
}
