//! Parameter-free prototype segmentation head, loss and metrics.

use crate::error::{Error, Result};
use crate::maskers::sigmoid;
use crate::tensor::Tensor;

pub const DEFAULT_TEMP: f64 = 0.1;
pub const BINARIZE_THRESHOLD: f64 = 0.5;
pub const PROB_CLAMP: f64 = 1e-7;
const COS_EPS: f64 = 1e-12;
const PROTO_EPS: f64 = 1e-8;

/// Per-pixel foreground probabilities, `h x w`.
pub type ProbMask = Tensor;

/// A `{0, 1}`-valued `H x W` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Tensor);

impl BinaryMask {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims2()?;
        if let Some(v) = data.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition(format!("mask value {v} is not binary")));
        }
        Ok(Self(data))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let data = (0..h * w)
            .map(|i| if f(i / w, i % w) { 1.0 } else { 0.0 })
            .collect();
        Self::new(Tensor::new(vec![h, w], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }

    pub fn count(&self) -> usize {
        self.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| 1.0 - v))
    }

    /// Nearest-neighbour resampling to `h x w`.
    pub fn downsample(&self, h: usize, w: usize) -> Self {
        let (src_h, src_w) = self.dims();
        Self(resize_nearest(&self.0, src_h, src_w, h, w))
    }

    pub fn from_probs(p: &ProbMask) -> Self {
        Self(p.map(|v| if v > BINARIZE_THRESHOLD { 1.0 } else { 0.0 }))
    }
}

/// Nearest-neighbour resize of a 2D tensor; sample `i` reads source `floor((i + 0.5) * src / dst)`.
pub fn resize_nearest(t: &Tensor, src_h: usize, src_w: usize, h: usize, w: usize) -> Tensor {
    let pick = |i: usize, src: usize, dst: usize| (((2 * i + 1) * src) / (2 * dst)).min(src - 1);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let si = pick(i, src_h, h);
        for j in 0..w {
            out.push(t.data()[si * src_w + pick(j, src_w, w)]);
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// One few-shot task: `K` labelled supports and a query.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub supports: Vec<(Tensor, BinaryMask)>,
    pub query_image: Tensor,
    pub query_mask: BinaryMask,
}

impl Episode {
    pub fn new(
        supports: Vec<(Tensor, BinaryMask)>,
        query_image: Tensor,
        query_mask: BinaryMask,
    ) -> Result<Self> {
        if supports.is_empty() {
            return Err(Error::Precondition(
                "an episode needs at least one support".into(),
            ));
        }
        let (_, hh, ww) = query_image.dims3()?;
        for (img, mask) in supports
            .iter()
            .map(|(i, m)| (i, m))
            .chain(std::iter::once((&query_image, &query_mask)))
        {
            let (_, h, w) = img.dims3()?;
            if (h, w) != (hh, ww) || mask.dims() != (hh, ww) {
                return Err(Error::Precondition(format!(
                    "episode images and masks must share {hh}x{ww}, found image {h}x{w} / mask {:?}",
                    mask.dims()
                )));
            }
        }
        Ok(Self {
            supports,
            query_image,
            query_mask,
        })
    }

    pub fn shots(&self) -> usize {
        self.supports.len()
    }
}

fn position(f: &Tensor, m: usize, out: &mut [f64]) {
    let (c, plane) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    for (k, o) in out.iter_mut().enumerate().take(c) {
        *o = f.data()[k * plane + m];
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + COS_EPS)
}

/// `C[m, n] = relu(cos(f_q(m), f_s(n)))`, shaped `h x w x h x w`.
pub fn cosine_affinity(f_q: &Tensor, f_s: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f_q.dims3()?;
    f_s.ensure_shape(f_q.shape())?;
    let plane = h * w;
    let mut q = vec![0.0; c];
    let mut s = vec![0.0; c];
    let mut out = Vec::with_capacity(plane * plane);
    for m in 0..plane {
        position(f_q, m, &mut q);
        for n in 0..plane {
            position(f_s, n, &mut s);
            out.push(cosine(&q, &s).max(0.0));
        }
    }
    Ok(Tensor::from_parts(vec![h, w, h, w], out))
}

fn prototype(f_s_masked: &Tensor, m_s: &BinaryMask) -> Result<(Vec<f64>, f64)> {
    let (c, h, w) = f_s_masked.dims3()?;
    let count = m_s.downsample(h, w).count();
    if count == 0 {
        return Err(Error::Degenerate(
            "support mask has no foreground at feature resolution".into(),
        ));
    }
    let denom = count as f64 + PROTO_EPS;
    let proto = (0..c)
        .map(|k| f_s_masked.channel(k).iter().sum::<f64>() / denom)
        .collect();
    Ok((proto, denom))
}

/// Foreground probability per query position from the cosine to the masked support prototype.
pub fn predict_mask(
    f_q: &Tensor,
    f_s_masked: &Tensor,
    m_s: &BinaryMask,
    temp: f64,
) -> Result<ProbMask> {
    let (c, h, w) = f_q.dims3()?;
    f_s_masked.ensure_shape(f_q.shape())?;
    if temp.is_nan() || temp <= 0.0 {
        return Err(Error::Precondition(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    let (proto, _) = prototype(f_s_masked, m_s)?;
    let mut q = vec![0.0; c];
    let out = (0..h * w)
        .map(|m| {
            position(f_q, m, &mut q);
            sigmoid(cosine(&q, &proto) / temp)
        })
        .collect();
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Gradients of `predict_mask` with respect to the query features and the masked support features.
pub fn predict_mask_backward(
    f_q: &Tensor,
    f_s_masked: &Tensor,
    m_s: &BinaryMask,
    temp: f64,
    grad_prob: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = f_q.dims3()?;
    let plane = h * w;
    grad_prob.ensure_shape(&[h, w])?;
    let (proto, denom) = prototype(f_s_masked, m_s)?;
    let p_norm = norm(&proto);

    let mut g_q = vec![0.0; c * plane];
    let mut g_proto = vec![0.0; c];
    let mut q = vec![0.0; c];
    for m in 0..plane {
        position(f_q, m, &mut q);
        let q_norm = norm(&q);
        let num = dot(&q, &proto);
        let d = q_norm * p_norm + COS_EPS;
        let prob = sigmoid(num / d / temp);
        let d_cos = grad_prob.data()[m] * prob * (1.0 - prob) / temp;
        if d_cos == 0.0 {
            continue;
        }
        let k_num = num / (d * d);
        for k in 0..c {
            let mut gq = proto[k] / d;
            if q_norm > 0.0 {
                gq -= k_num * p_norm * q[k] / q_norm;
            }
            g_q[k * plane + m] = d_cos * gq;
            let mut gp = q[k] / d;
            if p_norm > 0.0 {
                gp -= k_num * q_norm * proto[k] / p_norm;
            }
            g_proto[k] += d_cos * gp;
        }
    }
    let mut g_s = vec![0.0; c * plane];
    for k in 0..c {
        g_s[k * plane..(k + 1) * plane].fill(g_proto[k] / denom);
    }
    Ok((
        Tensor::from_parts(f_q.shape().to_vec(), g_q),
        Tensor::from_parts(f_q.shape().to_vec(), g_s),
    ))
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
pub fn bce_loss(pred: &ProbMask, target: &BinaryMask) -> Result<(f64, Tensor)> {
    pred.ensure_shape(target.tensor().shape())?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        grad.push(if pc != p {
            0.0
        } else {
            (-t / pc + (1.0 - t) / (1.0 - pc)) / n
        });
    }
    Ok((loss / n, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

/// Mean of foreground and background IoU; an empty union scores 1.
pub fn miou(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    pred.tensor().ensure_shape(target.tensor().shape())?;
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p as usize, t as usize);
        for class in 0..2 {
            let (pc, tc) = (p == class, t == class);
            inter[class] += (pc && tc) as usize;
            union[class] += (pc || tc) as usize;
        }
    }
    let iou = |c: usize| {
        if union[c] == 0 {
            1.0
        } else {
            inter[c] as f64 / union[c] as f64
        }
    };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Elementwise mean of per-support predictions.
pub fn kshot_merge(preds: &[ProbMask]) -> Result<ProbMask> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Precondition("cannot merge an empty prediction list".into()))?;
    let mut acc = first.clone();
    for p in &preds[1..] {
        p.ensure_shape(first.shape())?;
        for (a, b) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    let k = preds.len() as f64;
    Ok(acc.map(|v| v / k))
}
