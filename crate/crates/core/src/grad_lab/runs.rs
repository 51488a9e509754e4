use babelkit_numerics::{quantize, PrecisionMode, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::tasks::{concept_boxes, Head, ToyDetectionTask};
use super::{LabError, Result};
use crate::pivot_align::{AlignConfig, AlignSetup, Encoder};
use crate::seed::derive_seed;

/// Loss above which a finite run still counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub samples_per_concept: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "unit")]
    pub box_scale: f64,
    /// Fusion weight held during fine-tuning.
    #[serde(default = "unit")]
    pub alpha: f64,
    /// Keep annealing instead of holding `alpha`.
    #[serde(default)]
    pub continue_annealing: bool,
}

fn unit() -> f64 {
    1.0
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_concept == 0 {
            return Err(LabError::Config(
                "samples_per_concept must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(LabError::Config("finetune lr must be positive".into()));
        }
        if !(self.box_scale.is_finite() && self.box_scale > 0.0) {
            return Err(LabError::Config("box_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LabError::Config("alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Seeded fine-tuning problem: one box-regression task per modality on top
/// of the alignment setup.
#[derive(Clone, Debug)]
pub struct LabSetup {
    pub align: AlignSetup,
    pub finetune: FinetuneConfig,
    pub tasks: Vec<ToyDetectionTask>,
    pub boxes: Vec<[f64; 4]>,
    /// Initial head, shared by every modality.
    pub head: Head,
    pub seed: u64,
}

/// Encoder plus one head per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct DetModel {
    pub encoder: Encoder,
    pub heads: Vec<Head>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub det_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align_loss: Option<f64>,
    pub grad_norm: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Converged,
    Diverged,
    MaxSteps,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::Diverged => "diverged",
            Verdict::MaxSteps => "max-steps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run_id: String,
    pub records: Vec<TraceRecord>,
    pub verdict: Verdict,
    pub first_nonfinite_step: Option<usize>,
}

impl RunTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Largest gradient norm seen; infinite once any step overflowed.
    pub fn max_grad_norm(&self) -> f64 {
        self.records
            .iter()
            .map(|r| {
                if r.grad_norm.is_finite() {
                    r.grad_norm
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

impl LabSetup {
    /// `seed` replaces the alignment config's seed so that every stream of
    /// the run derives from one number.
    pub fn build(align: &AlignConfig, finetune: &FinetuneConfig, seed: u64) -> Result<Self> {
        finetune.validate()?;
        let mut cfg = align.clone();
        cfg.seed = seed;
        let align = AlignSetup::build(&cfg)?;
        let boxes = concept_boxes(align.vocab.len(), finetune.box_scale, derive_seed(seed, 3));
        let tasks = align
            .generators
            .iter()
            .enumerate()
            .map(|(m, g)| {
                ToyDetectionTask::generate(
                    g,
                    &align.vocab,
                    &boxes,
                    finetune.samples_per_concept,
                    derive_seed(seed, 100 + m as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Head::init(cfg.dims.d_e, derive_seed(seed, 4))?;
        Ok(Self {
            align,
            finetune: finetune.clone(),
            tasks,
            boxes,
            head,
            seed,
        })
    }

    pub fn initial_model(&self, encoder: Encoder) -> DetModel {
        DetModel {
            encoder,
            heads: vec![self.head.clone(); self.tasks.len()],
        }
    }

    pub(super) fn finetune_alpha(&self, offset: usize, t: usize) -> f64 {
        if self.finetune.continue_annealing {
            self.align.alpha(offset + t)
        } else {
            self.finetune.alpha
        }
    }
}

pub(super) struct StepValues {
    pub total: f64,
    pub det: Vec<f64>,
    align: Option<f64>,
    grads: Vec<Tensor>,
}

/// One full-batch forward/backward of `sum_m L_det + lambda * L_align`.
pub(super) fn evaluate(
    setup: &LabSetup,
    model: &DetModel,
    lambda: f64,
    alpha: f64,
    precision: PrecisionMode,
) -> Result<StepValues> {
    let mut tape = Tape::with_precision(precision);
    let ev = model.encoder.register(&mut tape, true);
    let mut leaves: Vec<Var> = ev.all().to_vec();
    let mut det_vars = Vec::with_capacity(setup.tasks.len());
    let mut means = Vec::with_capacity(setup.tasks.len());
    for (task, head) in setup.tasks.iter().zip(&model.heads) {
        let pooled = task.features(&mut tape, &model.encoder, &ev, alpha)?;
        let psi = tape.parameter(head.psi.clone());
        let beta = tape.parameter(head.beta.clone());
        leaves.push(psi);
        leaves.push(beta);
        det_vars.push(task.loss_from_features(&mut tape, pooled, psi, beta)?);
        if lambda > 0.0 {
            means.push(mean_feature(&mut tape, pooled, task.len())?);
        }
    }
    let mut total = det_vars[0];
    for &d in &det_vars[1..] {
        total = tape.add(total, d)?;
    }
    let mut align = None;
    if lambda > 0.0 {
        let a = centroid_penalty(&mut tape, &means)?;
        align = Some(tape.value(a)?.item()?);
        let weighted = tape.scale(a, lambda)?;
        total = tape.add(total, weighted)?;
    }
    let det = det_vars
        .iter()
        .map(|&v| Ok(tape.value(v)?.item()?))
        .collect::<Result<Vec<f64>>>()?;
    let total_value = tape.value(total)?.item()?;
    let grads = tape.backward(total)?;
    let grads = leaves
        .iter()
        .map(|&v| {
            grads
                .get(tape.param_id(v).expect("parameter"))
                .expect("gradient")
                .clone()
        })
        .collect();
    Ok(StepValues {
        total: total_value,
        det,
        align,
        grads,
    })
}

fn mean_feature(tape: &mut Tape, pooled: Var, n: usize) -> Result<Var> {
    let row = tape.constant(Tensor::matrix(1, n, vec![1.0 / n as f64; n])?);
    Ok(tape.matmul(row, pooled)?)
}

/// `(1/K) sum_m |mu_m - mean_k mu_k|^2`.
fn centroid_penalty(tape: &mut Tape, means: &[Var]) -> Result<Var> {
    let k = means.len() as f64;
    let mut acc = means[0];
    for &m in &means[1..] {
        acc = tape.add(acc, m)?;
    }
    let centroid = tape.scale(acc, 1.0 / k)?;
    let mut total = None;
    for &m in means {
        let d = tape.sub(m, centroid)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / k)?)
}

fn params_mut(model: &mut DetModel) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = model.encoder.params_mut().into_iter().collect();
    for h in &mut model.heads {
        out.push(&mut h.psi);
        out.push(&mut h.beta);
    }
    out
}

/// Gradient descent from `model`, quantizing the parameters after every
/// update. Stops at the first non-finite loss or gradient.
fn descend(
    setup: &LabSetup,
    mut model: DetModel,
    lambda: f64,
    precision: PrecisionMode,
    alpha_offset: usize,
    run_id: String,
) -> Result<(RunTrace, DetModel)> {
    let lr = setup.finetune.lr;
    let mut records = Vec::with_capacity(setup.finetune.steps);
    let mut first_nonfinite_step = None;
    let mut blew_up = false;
    for t in 0..setup.finetune.steps {
        let alpha = setup.finetune_alpha(alpha_offset, t);
        let v = evaluate(setup, &model, lambda, alpha, precision)?;
        let grad_norm = v
            .grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let finite = v.total.is_finite()
            && v.grads
                .iter()
                .all(|g| g.data().iter().all(|x| x.is_finite()));
        records.push(TraceRecord {
            step: t,
            loss: v.total,
            det_losses: v.det,
            align_loss: v.align,
            grad_norm,
            alpha,
        });
        if !finite {
            first_nonfinite_step = Some(t);
            break;
        }
        if v.total > DIVERGENCE_LOSS {
            blew_up = true;
            break;
        }
        for (p, g) in params_mut(&mut model).into_iter().zip(&v.grads) {
            *p = quantize(&p.zip_map(g, |w, d| w - lr * d)?, precision);
        }
    }
    let verdict = if first_nonfinite_step.is_some() || blew_up {
        Verdict::Diverged
    } else {
        match (records.first(), records.last()) {
            (Some(a), Some(b)) if b.loss <= a.loss => Verdict::Converged,
            _ => Verdict::MaxSteps,
        }
    };
    Ok((
        RunTrace {
            run_id,
            records,
            verdict,
            first_nonfinite_step,
        },
        model,
    ))
}

pub(crate) fn precision_label(p: PrecisionMode) -> String {
    if p == PrecisionMode::EXACT {
        "exact".into()
    } else if p == PrecisionMode::FP16 {
        "fp16".into()
    } else if p == PrecisionMode::BF16 {
        "bf16".into()
    } else {
        format!("m{}e{}", p.mantissa_bits, p.exponent_max)
    }
}

/// Joint fine-tuning from a random encoder on `sum_m L_det + lambda * L_align`,
/// with `L_align` the centroid-matching penalty on mean pooled features.
pub fn run_late_alignment(
    setup: &LabSetup,
    lambda: f64,
    precision: PrecisionMode,
) -> Result<(RunTrace, DetModel)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LabError::Config(format!(
            "lambda {lambda} must be finite and >= 0"
        )));
    }
    let model = setup.initial_model(setup.align.initial_encoder()?);
    let id = format!(
        "late-l{lambda}-{}-s{}",
        precision_label(precision),
        setup.seed
    );
    descend(setup, model, lambda, precision, 0, id)
}

/// Pivot alignment for `pretrain_steps` in exact arithmetic, then
/// detection-only fine-tuning under `precision`. Returns the stage-two trace.
pub fn run_two_stage(
    setup: &LabSetup,
    pretrain_steps: usize,
    precision: PrecisionMode,
) -> Result<(RunTrace, DetModel)> {
    let (encoder, _) = setup
        .align
        .train(setup.align.initial_encoder()?, pretrain_steps)?;
    let id = format!(
        "two-stage-p{pretrain_steps}-{}-s{}",
        precision_label(precision),
        setup.seed
    );
    descend(
        setup,
        setup.initial_model(encoder),
        0.0,
        precision,
        pretrain_steps,
        id,
    )
}
