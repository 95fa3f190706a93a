//! Per-episode adaptation: Adam-optimise the maskers on the support set,
//! then segment the query with the adapted maskers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskers::{
    acpa_backward, acpa_forward, apm_backward, apm_forward, apply_small_mask, AcpaParams,
    ApmParams, ApmVariant, DEFAULT_REDUCTION, LITERAL_INIT_LOGIT,
};
use crate::seghead::{
    bce_loss, kshot_merge, miou, predict_mask, predict_mask_backward, resize_nearest, BinaryMask,
    Episode, ProbMask, DEFAULT_TEMP,
};
use crate::tensor::Tensor;

pub const DEFAULT_ITERATIONS: usize = 60;
pub const DEFAULT_LR: f64 = 0.01;

/// Named per-domain learning rates.
pub fn lr_preset(name: &str) -> Option<f64> {
    match name {
        "chest" | "chest-xray" => Some(0.1),
        "fss" | "fss-1000" => Some(0.01),
        "isic" => Some(0.01),
        "deepglobe" => Some(1e-5),
        "synthetic" => Some(DEFAULT_LR),
        _ => None,
    }
}

/// Anything that deterministically maps an image to a `c x h x w` feature map.
pub trait Encoder {
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub use_acpa: bool,
    pub apm_variant: ApmVariant,
    pub seed: u64,
    /// Raw logit both APM masks start from.
    pub init_logit: f64,
    pub reduction: usize,
    pub temp: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            iterations: DEFAULT_ITERATIONS,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            use_acpa: false,
            apm_variant: ApmVariant::S,
            seed: 0,
            init_logit: LITERAL_INIT_LOGIT,
            reduction: DEFAULT_REDUCTION,
            temp: DEFAULT_TEMP,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Precondition(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!(
                "betas must lie in (0, 1), got {} / {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0 && self.temp > 0.0)
            || self.reduction == 0
            || !self.init_logit.is_finite()
        {
            return bad("eps, temp and reduction must be positive, init_logit finite".into());
        }
        Ok(())
    }
}

/// First/second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| p.map(|_| 0.0)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Precondition(format!(
            "adam got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        g.ensure_shape(p.shape())?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (theta, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// APM followed by optional ACPA: the full learnable state of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Maskers {
    pub apm: ApmParams,
    pub acpa: Option<AcpaParams>,
}

struct PathTrace {
    input: Tensor,
    acpa_in: Tensor,
    small_mask: Option<BinaryMask>,
}

impl Maskers {
    pub fn init(cfg: &AdaptConfig, c: usize, h: usize, w: usize) -> Result<Self> {
        let apm = ApmParams::with_logit(cfg.apm_variant, c, h, w, cfg.init_logit)?;
        let acpa = if cfg.use_acpa {
            Some(AcpaParams::init(c, cfg.reduction, cfg.seed ^ 0xACBA_0000)?)
        } else {
            None
        };
        Ok(Self { apm, acpa })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.apm.raw_amp, &self.apm.raw_phase];
        if let Some(a) = &self.acpa {
            v.extend([&a.w_reduce, &a.b_reduce, &a.w_expand, &a.b_expand]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.apm.raw_amp, &mut self.apm.raw_phase];
        if let Some(a) = &mut self.acpa {
            v.extend([
                &mut a.w_reduce,
                &mut a.b_reduce,
                &mut a.w_expand,
                &mut a.b_expand,
            ]);
        }
        v
    }

    fn zero_grads(&self) -> Vec<Tensor> {
        self.tensors().iter().map(|t| t.map(|_| 0.0)).collect()
    }

    fn run(&self, f: &Tensor, small_mask: Option<&BinaryMask>) -> Result<(Tensor, PathTrace)> {
        let apm_out = apm_forward(f, &self.apm)?;
        let acpa_in = match small_mask {
            Some(m) => apply_small_mask(&apm_out, m),
            None => apm_out,
        };
        let out = match &self.acpa {
            Some(a) => acpa_forward(&acpa_in, a)?.0,
            None => acpa_in.clone(),
        };
        Ok((
            out,
            PathTrace {
                input: f.clone(),
                acpa_in,
                small_mask: small_mask.cloned(),
            },
        ))
    }

    /// Query-side features: APM then ACPA.
    pub fn query_features(&self, f: &Tensor) -> Result<Tensor> {
        Ok(self.run(f, None)?.0)
    }

    /// Support-side features: APM, mask, then ACPA. `small_mask` is at feature resolution.
    pub fn support_features(&self, f: &Tensor, small_mask: &BinaryMask) -> Result<Tensor> {
        Ok(self.run(f, Some(small_mask))?.0)
    }

    fn backward(
        &self,
        trace: &PathTrace,
        grad_out: &Tensor,
        grads: &mut [Tensor],
    ) -> Result<Tensor> {
        let mut g = grad_out.clone();
        if let Some(a) = &self.acpa {
            let ag = acpa_backward(&trace.acpa_in, a, &g)?;
            for (slot, t) in
                grads[2..]
                    .iter_mut()
                    .zip([ag.w_reduce, ag.b_reduce, ag.w_expand, ag.b_expand])
            {
                add_into(slot, &t);
            }
            g = ag.input;
        }
        if let Some(m) = &trace.small_mask {
            g = apply_small_mask(&g, m);
        }
        let pg = apm_backward(&trace.input, &self.apm, &g)?;
        add_into(&mut grads[0], &pg.raw_amp);
        add_into(&mut grads[1], &pg.raw_phase);
        Ok(pg.input)
    }
}

fn add_into(acc: &mut Tensor, t: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += b;
    }
}

/// Support self-prediction loss and its gradient with respect to every masker tensor.
///
/// With one support the support predicts itself from its own prototype; with
/// more, each support is predicted from the merged leave-one-out prototypes.
pub fn support_objective(
    maskers: &Maskers,
    feats: &[Tensor],
    small_masks: &[BinaryMask],
    temp: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let k = feats.len();
    if k == 0 || small_masks.len() != k {
        return Err(Error::Precondition(
            "support features and masks must be non-empty and paired".into(),
        ));
    }
    let mut q = Vec::with_capacity(k);
    let mut s = Vec::with_capacity(k);
    for (f, m) in feats.iter().zip(small_masks) {
        q.push(maskers.run(f, None)?);
        s.push(maskers.run(f, Some(m))?);
    }
    let sources = |i: usize| -> Vec<usize> {
        if k == 1 {
            vec![0]
        } else {
            (0..k).filter(|&j| j != i).collect()
        }
    };

    let mut grads = maskers.zero_grads();
    let mut g_q: Vec<Tensor> = q.iter().map(|(t, _)| t.map(|_| 0.0)).collect();
    let mut g_s: Vec<Tensor> = s.iter().map(|(t, _)| t.map(|_| 0.0)).collect();
    let mut loss = 0.0;
    for i in 0..k {
        let src = sources(i);
        let preds = src
            .iter()
            .map(|&j| predict_mask(&q[i].0, &s[j].0, &small_masks[j], temp))
            .collect::<Result<Vec<_>>>()?;
        let merged = kshot_merge(&preds)?;
        let (l, g_pred) = bce_loss(&merged, &small_masks[i])?;
        loss += l / k as f64;
        let g_each = g_pred.scale(1.0 / (k as f64 * src.len() as f64));
        for &j in &src {
            let (gq, gs) = predict_mask_backward(&q[i].0, &s[j].0, &small_masks[j], temp, &g_each)?;
            add_into(&mut g_q[i], &gq);
            add_into(&mut g_s[j], &gs);
        }
    }
    for i in 0..k {
        maskers.backward(&q[i].1, &g_q[i], &mut grads)?;
        maskers.backward(&s[i].1, &g_s[i], &mut grads)?;
    }
    Ok((loss, grads))
}

/// Query probabilities at feature resolution, merged over all supports.
pub fn predict_query(
    maskers: &Maskers,
    support_feats: &[Tensor],
    small_masks: &[BinaryMask],
    query_feat: &Tensor,
    temp: f64,
) -> Result<ProbMask> {
    let q = maskers.query_features(query_feat)?;
    let preds = support_feats
        .iter()
        .zip(small_masks)
        .map(|(f, m)| predict_mask(&q, &maskers.support_features(f, m)?, m, temp))
        .collect::<Result<Vec<_>>>()?;
    kshot_merge(&preds)
}

/// mIoU of a feature-resolution prediction against a full-resolution label.
pub fn score(prob: &ProbMask, target: &BinaryMask) -> Result<f64> {
    let (h, w) = prob.dims2()?;
    let (big_h, big_w) = target.dims();
    let up = resize_nearest(prob, h, w, big_h, big_w);
    miou(&BinaryMask::from_probs(&up), target)
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptTrace {
    pub episode_id: u64,
    pub losses: Vec<f64>,
    pub final_miou: f64,
    pub baseline_miou: f64,
    pub lr: f64,
    pub variant: ApmVariant,
    #[serde(skip)]
    pub initial: Maskers,
    #[serde(skip)]
    pub adapted: Maskers,
    #[serde(skip)]
    pub baseline_prob: ProbMask,
}

/// Encoded episode, reused across iterations (the encoder is frozen).
pub struct EncodedEpisode {
    pub support_feats: Vec<Tensor>,
    pub small_masks: Vec<BinaryMask>,
    pub query_feat: Tensor,
}

pub fn encode_episode(ep: &Episode, encoder: &dyn Encoder) -> Result<EncodedEpisode> {
    let support_feats = ep
        .supports
        .iter()
        .map(|(img, _)| encoder.encode(img))
        .collect::<Result<Vec<_>>>()?;
    let query_feat = encoder.encode(&ep.query_image)?;
    let (_, h, w) = query_feat.dims3()?;
    let small_masks = ep
        .supports
        .iter()
        .map(|(_, m)| m.downsample(h, w))
        .collect();
    Ok(EncodedEpisode {
        support_feats,
        small_masks,
        query_feat,
    })
}

/// Query prediction of the unadapted pipeline.
pub fn frozen_prediction(enc: &EncodedEpisode, cfg: &AdaptConfig) -> Result<(Maskers, ProbMask)> {
    let (c, h, w) = enc.query_feat.dims3()?;
    let initial = Maskers::init(cfg, c, h, w)?;
    let prob = predict_query(
        &initial,
        &enc.support_feats,
        &enc.small_masks,
        &enc.query_feat,
        cfg.temp,
    )?;
    Ok((initial, prob))
}

pub fn adapt_episode(
    ep: &Episode,
    encoder: &dyn Encoder,
    cfg: &AdaptConfig,
    episode_id: u64,
) -> Result<(ProbMask, AdaptTrace)> {
    cfg.validate()?;
    let enc = encode_episode(ep, encoder)?;
    let (initial, baseline_prob) = frozen_prediction(&enc, cfg)?;

    let mut maskers = initial.clone();
    let mut state = AdamState::new(&maskers.tensors());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (loss, grads) =
            support_objective(&maskers, &enc.support_feats, &enc.small_masks, cfg.temp)?;
        losses.push(loss);
        adam_step(
            &mut maskers.tensors_mut(),
            &grads,
            &mut state,
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        )?;
    }

    let prob = predict_query(
        &maskers,
        &enc.support_feats,
        &enc.small_masks,
        &enc.query_feat,
        cfg.temp,
    )?;
    let trace = AdaptTrace {
        episode_id,
        losses,
        final_miou: score(&prob, &ep.query_mask)?,
        baseline_miou: score(&baseline_prob, &ep.query_mask)?,
        lr: cfg.lr,
        variant: cfg.apm_variant,
        initial,
        adapted: maskers,
        baseline_prob,
    };
    Ok((prob, trace))
}

/// Which part of the pipeline a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradCheckCase {
    /// APM alone under a random linear read-out.
    Apm(ApmVariant),
    /// ACPA alone under a random linear read-out.
    Acpa,
    /// APM, ACPA, prototype head and BCE on a one-shot support.
    FullChain(ApmVariant),
}

impl GradCheckCase {
    pub const ALL: [GradCheckCase; 5] = [
        GradCheckCase::Apm(ApmVariant::S),
        GradCheckCase::Apm(ApmVariant::M),
        GradCheckCase::Acpa,
        GradCheckCase::FullChain(ApmVariant::S),
        GradCheckCase::FullChain(ApmVariant::M),
    ];

    pub fn name(&self) -> String {
        match self {
            GradCheckCase::Apm(v) => v.name().to_string(),
            GradCheckCase::Acpa => "acpa".into(),
            GradCheckCase::FullChain(v) => format!("{}+acpa+head", v.name()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub case: String,
    pub seed: u64,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

type EvalFn<'a> = Box<dyn Fn(&[f64]) -> Result<f64> + 'a>;
type GradFn<'a> = Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a>;

/// A differentiable scalar objective over a flat parameter vector.
pub struct Objective<'a> {
    pub params: Vec<f64>,
    pub eval: EvalFn<'a>,
    pub grad: GradFn<'a>,
}

/// Central-difference comparison of `obj.grad` against `obj.eval`.
pub fn check_objective(obj: &Objective, step: f64, corrupt: bool) -> Result<(f64, usize, usize)> {
    let mut analytic = (obj.grad)(&obj.params)?;
    if corrupt {
        if let Some(g) = analytic.iter_mut().find(|g| g.abs() > 1e-3) {
            *g = *g * 1.5 + 0.1;
        }
    }
    let mut x = obj.params.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = (obj.eval)(&x)?;
        x[i] = orig - step;
        let down = (obj.eval)(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let e = rel_err(analytic[i], numeric);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok((worst.0, worst.1, x.len()))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

fn unflatten(template: &Maskers, flat: &[f64]) -> Maskers {
    let mut m = template.clone();
    let mut off = 0;
    for t in m.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    m
}

fn flatten(tensors: &[&Tensor]) -> Vec<f64> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Builds a random small instance for `case` and checks every gradient it
/// exposes: masker parameters, plus the input map for the single-module cases.
pub fn grad_check(
    case: GradCheckCase,
    seed: u64,
    perturb_backward: bool,
) -> Result<GradCheckReport> {
    let (c, h, w) = (3, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
    let readout = random_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
    let variant = match case {
        GradCheckCase::Apm(v) | GradCheckCase::FullChain(v) => v,
        GradCheckCase::Acpa => ApmVariant::S,
    };
    let shape = variant.mask_shape(c, h, w);
    let maskers = Maskers {
        apm: ApmParams::from_parts(
            variant,
            random_tensor(&mut rng, &shape, -1.5, 2.5),
            random_tensor(&mut rng, &shape, -1.5, 2.5),
        )?,
        acpa: Some(AcpaParams::init(c, 1, rng.random())?),
    };

    let (max_rel_err, worst_index, n_checked) = match case {
        GradCheckCase::Apm(_) => {
            let apm = maskers.apm;
            let n_mask = apm.raw_amp.len();
            let split = move |x: &[f64]| -> Result<(ApmParams, Tensor)> {
                let amp = Tensor::from_parts(shape.to_vec(), x[..n_mask].to_vec());
                let phase = Tensor::from_parts(shape.to_vec(), x[n_mask..2 * n_mask].to_vec());
                let input = Tensor::from_parts(vec![c, h, w], x[2 * n_mask..].to_vec());
                Ok((ApmParams::from_parts(variant, amp, phase)?, input))
            };
            let mut params = flatten(&[&apm.raw_amp, &apm.raw_phase]);
            params.extend_from_slice(f.data());
            let obj = Objective {
                params,
                eval: Box::new(|x| {
                    let (p, input) = split(x)?;
                    Ok(dot(&apm_forward(&input, &p)?, &readout))
                }),
                grad: Box::new(|x| {
                    let (p, input) = split(x)?;
                    let g = apm_backward(&input, &p, &readout)?;
                    Ok(flatten(&[&g.raw_amp, &g.raw_phase, &g.input]))
                }),
            };
            check_objective(&obj, FD_STEP, perturb_backward)?
        }
        GradCheckCase::Acpa => {
            let template = maskers.acpa.expect("acpa initialised above");
            let n_param: usize = [
                &template.w_reduce,
                &template.b_reduce,
                &template.w_expand,
                &template.b_expand,
            ]
            .iter()
            .map(|t| t.len())
            .sum();
            let split = |x: &[f64]| -> (AcpaParams, Tensor) {
                let mut p = template.clone();
                let mut off = 0;
                for t in [
                    &mut p.w_reduce,
                    &mut p.b_reduce,
                    &mut p.w_expand,
                    &mut p.b_expand,
                ] {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                (p, Tensor::from_parts(vec![c, h, w], x[n_param..].to_vec()))
            };
            let mut params = flatten(&[
                &template.w_reduce,
                &template.b_reduce,
                &template.w_expand,
                &template.b_expand,
            ]);
            params.extend_from_slice(f.data());
            let obj = Objective {
                params,
                eval: Box::new(|x| {
                    let (p, input) = split(x);
                    Ok(dot(&acpa_forward(&input, &p)?.0, &readout))
                }),
                grad: Box::new(|x| {
                    let (p, input) = split(x);
                    let g = acpa_backward(&input, &p, &readout)?;
                    Ok(flatten(&[
                        &g.w_reduce,
                        &g.b_reduce,
                        &g.w_expand,
                        &g.b_expand,
                        &g.input,
                    ]))
                }),
            };
            check_objective(&obj, FD_STEP, perturb_backward)?
        }
        GradCheckCase::FullChain(_) => {
            let mask = BinaryMask::from_fn(h, w, |i, j| (i + 2 * j) % 5 < 2 || (i == 2 && j == 3))?;
            // Non-negative features, as a ReLU encoder would produce.
            let feats = vec![f.map(|v| v.abs() + 0.05)];
            let masks = vec![mask];
            let template = maskers.clone();
            let obj = Objective {
                params: flatten(&maskers.tensors()),
                eval: Box::new(|x| {
                    Ok(
                        support_objective(&unflatten(&template, x), &feats, &masks, DEFAULT_TEMP)?
                            .0,
                    )
                }),
                grad: Box::new(|x| {
                    let (_, g) =
                        support_objective(&unflatten(&template, x), &feats, &masks, DEFAULT_TEMP)?;
                    Ok(flatten(&g.iter().collect::<Vec<_>>()))
                }),
            };
            check_objective(&obj, FD_STEP, perturb_backward)?
        }
    };
    Ok(GradCheckReport {
        case: case.name(),
        seed,
        n_checked,
        max_rel_err,
        worst_index,
    })
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
