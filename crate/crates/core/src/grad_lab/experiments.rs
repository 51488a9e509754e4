use std::path::Path;

use babelkit_numerics::{PrecisionMode, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hessian::{Conditioning, ConditioningConfig};
use super::report::{per_modality_gradients, GradientReport};
use super::runs::{
    evaluate, run_late_alignment, run_two_stage, FinetuneConfig, LabSetup, RunTrace, Verdict,
};
use super::tasks::{DetectionLoss, ModalityLoss};
use super::{LabError, Result};
use crate::pivot_align::{AlignConfig, Encoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub lambdas: Vec<f64>,
    /// Precision names: `exact`, `fp16`, `bf16`.
    pub precisions: Vec<String>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradLabConfig {
    /// Stage-one setup; `align.steps` is the pretraining length.
    pub align: AlignConfig,
    pub finetune: FinetuneConfig,
    pub stability: StabilityConfig,
    pub conditioning: ConditioningConfig,
    pub coherence_seeds: Vec<u64>,
}

impl GradLabConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.finetune.validate()?;
        self.conditioning.spec.validate()?;
        for p in &self.stability.precisions {
            precision_by_name(p)?;
        }
        if self
            .stability
            .lambdas
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(LabError::Config("lambdas must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Same config with every seed list replaced by `[seed]`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.align.seed = seed;
        c.stability.seeds = vec![seed];
        c
    }
}

pub(crate) fn precision_by_name(name: &str) -> Result<PrecisionMode> {
    PrecisionMode::by_name(name)
        .ok_or_else(|| LabError::Config(format!("unknown precision `{name}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "kebab-case")]
pub enum Regime {
    Late { lambda: f64 },
    TwoStage { pretrain_steps: usize },
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Late { .. } => "late",
            Regime::TwoStage { .. } => "two-stage",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressCell {
    pub regime: Regime,
    pub precision: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub run_id: String,
    pub regime: String,
    pub lambda: f64,
    pub precision: String,
    pub seed: u64,
    pub verdict: Verdict,
    pub first_nonfinite_step: Option<usize>,
    pub max_grad_norm: f64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    pub fn find(
        &self,
        regime: &str,
        lambda: f64,
        precision: &str,
        seed: u64,
    ) -> Option<&StabilityRow> {
        self.rows.iter().find(|r| {
            r.regime == regime && r.lambda == lambda && r.precision == precision && r.seed == seed
        })
    }

    pub fn diverged(&self) -> impl Iterator<Item = &StabilityRow> {
        self.rows.iter().filter(|r| r.verdict == Verdict::Diverged)
    }
}

/// Cells of the stress sweep: every late-alignment lambda plus the
/// two-stage run, under every precision, for every seed.
pub fn stress_cells(config: &GradLabConfig) -> Vec<StressCell> {
    let mut regimes: Vec<Regime> = config
        .stability
        .lambdas
        .iter()
        .map(|&lambda| Regime::Late { lambda })
        .collect();
    regimes.push(Regime::TwoStage {
        pretrain_steps: config.align.steps,
    });
    let mut cells = Vec::new();
    for &seed in &config.stability.seeds {
        for r in &regimes {
            for p in &config.stability.precisions {
                cells.push(StressCell {
                    regime: *r,
                    precision: p.clone(),
                    seed,
                });
            }
        }
    }
    cells
}

fn run_cell(setup: &LabSetup, cell: &StressCell) -> Result<RunTrace> {
    let p = precision_by_name(&cell.precision)?;
    let (trace, _) = match cell.regime {
        Regime::Late { lambda } => run_late_alignment(setup, lambda, p)?,
        Regime::TwoStage { pretrain_steps } => run_two_stage(setup, pretrain_steps, p)?,
    };
    Ok(trace)
}

/// Run every cell in parallel. Rows and traces come back in cell order.
pub fn amp_stress(config: &GradLabConfig) -> Result<(StabilityTable, Vec<RunTrace>)> {
    config.validate()?;
    let setups: Vec<(u64, LabSetup)> = config
        .stability
        .seeds
        .par_iter()
        .map(|&s| Ok((s, LabSetup::build(&config.align, &config.finetune, s)?)))
        .collect::<Result<_>>()?;
    let cells = stress_cells(config);
    let traces: Vec<RunTrace> = cells
        .par_iter()
        .map(|c| {
            let setup = &setups
                .iter()
                .find(|(s, _)| *s == c.seed)
                .expect("seed built")
                .1;
            run_cell(setup, c)
        })
        .collect::<Result<_>>()?;
    let rows = cells
        .iter()
        .zip(&traces)
        .map(|(c, t)| StabilityRow {
            run_id: t.run_id.clone(),
            regime: c.regime.label().into(),
            lambda: match c.regime {
                Regime::Late { lambda } => lambda,
                Regime::TwoStage { .. } => 0.0,
            },
            precision: c.precision.clone(),
            seed: c.seed,
            verdict: t.verdict,
            first_nonfinite_step: t.first_nonfinite_step,
            max_grad_norm: t.max_grad_norm(),
            steps: t.records.len(),
            initial_loss: t.initial_loss().unwrap_or(f64::NAN),
            final_loss: t.final_loss().unwrap_or(f64::NAN),
        })
        .collect();
    Ok((StabilityTable { rows }, traces))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialLosses {
    pub seed: u64,
    /// `sum L_det + lambda L_align` at the random initialization.
    pub late_total: f64,
    /// `sum L_det` alone at the random initialization.
    pub late_detection: f64,
    /// `sum L_det` from the aligned encoder.
    pub two_stage: f64,
}

/// Exact-precision starting losses of both regimes for one seed.
pub fn initial_losses(config: &GradLabConfig, lambda: f64, seed: u64) -> Result<InitialLosses> {
    let setup = LabSetup::build(&config.align, &config.finetune, seed)?;
    let steps = config.align.steps;
    let random = setup.initial_model(setup.align.initial_encoder()?);
    let late = evaluate(
        &setup,
        &random,
        lambda,
        setup.finetune_alpha(0, 0),
        PrecisionMode::EXACT,
    )?;
    let (aligned, _) = setup.align.train(setup.align.initial_encoder()?, steps)?;
    let staged = evaluate(
        &setup,
        &setup.initial_model(aligned),
        0.0,
        setup.finetune_alpha(steps, 0),
        PrecisionMode::EXACT,
    )?;
    Ok(InitialLosses {
        seed,
        late_total: late.total,
        late_detection: late.det.iter().sum(),
        two_stage: staged.total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSeed {
    pub seed: u64,
    pub pre_alignment_mean_cosine: f64,
    pub post_alignment_mean_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceResult {
    pub seeds: Vec<CoherenceSeed>,
    pub pre_alignment_mean_cosine: f64,
    pub post_alignment_mean_cosine: f64,
}

impl CoherenceResult {
    pub fn improved_every_seed(&self) -> bool {
        self.seeds
            .iter()
            .all(|s| s.post_alignment_mean_cosine > s.pre_alignment_mean_cosine)
    }
}

fn detection_report(setup: &LabSetup, encoder: &Encoder, alpha: f64) -> Result<GradientReport> {
    let losses: Vec<DetectionLoss> = setup
        .tasks
        .iter()
        .map(|task| DetectionLoss {
            task,
            encoder,
            head: &setup.head,
            alpha,
        })
        .collect();
    let refs: Vec<&dyn ModalityLoss> = losses.iter().map(|l| l as &dyn ModalityLoss).collect();
    let shared: Vec<Tensor> = encoder.params().into_iter().cloned().collect();
    per_modality_gradients(&shared, &refs)
}

/// Per-modality detection gradients over the encoder for one seed, at the
/// random initialization and after `align.steps` of pivot alignment.
pub fn detection_gradient_reports(
    align: &AlignConfig,
    finetune: &FinetuneConfig,
    seed: u64,
) -> Result<(GradientReport, GradientReport)> {
    let setup = LabSetup::build(align, finetune, seed)?;
    let initial = setup.align.initial_encoder()?;
    let pre = detection_report(&setup, &initial, setup.finetune_alpha(0, 0))?;
    let (aligned, _) = setup.align.train(initial, align.steps)?;
    let post = detection_report(&setup, &aligned, setup.finetune_alpha(align.steps, 0))?;
    Ok((pre, post))
}

/// Mean pairwise cosine of per-modality detection gradients at the random
/// initialization and after `align.steps` of pivot alignment, per seed.
pub fn proposition3_experiment(
    align: &AlignConfig,
    finetune: &FinetuneConfig,
    seeds: &[u64],
) -> Result<CoherenceResult> {
    if align.modalities.len() < 2 {
        return Err(LabError::NoPairs);
    }
    if seeds.len() < 3 {
        return Err(LabError::Config("at least 3 seeds are required".into()));
    }
    let per_seed: Vec<CoherenceSeed> = seeds
        .par_iter()
        .map(|&seed| {
            let (pre, post) = detection_gradient_reports(align, finetune, seed)?;
            Ok(CoherenceSeed {
                seed,
                pre_alignment_mean_cosine: pre.mean_pairwise_cosine()?,
                post_alignment_mean_cosine: post.mean_pairwise_cosine()?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_seed.len() as f64;
    Ok(CoherenceResult {
        pre_alignment_mean_cosine: per_seed
            .iter()
            .map(|s| s.pre_alignment_mean_cosine)
            .sum::<f64>()
            / n,
        post_alignment_mean_cosine: per_seed
            .iter()
            .map(|s| s.post_alignment_mean_cosine)
            .sum::<f64>()
            / n,
        seeds: per_seed,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| LabError::Write(e.to_string()))
}

fn wr(e: csv::Error) -> LabError {
    LabError::Write(e.to_string())
}

pub fn write_stability_csv(path: &Path, table: &StabilityTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "run_id",
        "regime",
        "lambda",
        "precision",
        "seed",
        "verdict",
        "first_nonfinite_step",
        "max_grad_norm",
        "steps",
        "initial_loss",
        "final_loss",
    ])
    .map_err(wr)?;
    for r in &table.rows {
        w.write_record([
            r.run_id.clone(),
            r.regime.clone(),
            r.lambda.to_string(),
            r.precision.clone(),
            r.seed.to_string(),
            r.verdict.as_str().to_string(),
            r.first_nonfinite_step
                .map(|s| s.to_string())
                .unwrap_or_default(),
            r.max_grad_norm.to_string(),
            r.steps.to_string(),
            r.initial_loss.to_string(),
            r.final_loss.to_string(),
        ])
        .map_err(wr)?;
    }
    w.flush().map_err(|e| LabError::Write(e.to_string()))
}

pub fn write_trace_csv(path: &Path, trace: &RunTrace) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "loss", "grad_norm", "alpha"])
        .map_err(wr)?;
    for r in &trace.records {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            r.alpha.to_string(),
        ])
        .map_err(wr)?;
    }
    w.flush().map_err(|e| LabError::Write(e.to_string()))
}

/// All runs in one long table: `run_id, step, loss, grad_norm, alpha`.
pub fn write_trajectories_csv(path: &Path, traces: &[RunTrace]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["run_id", "step", "loss", "grad_norm", "alpha"])
        .map_err(wr)?;
    for t in traces {
        for r in &t.records {
            w.write_record([
                t.run_id.clone(),
                r.step.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                r.alpha.to_string(),
            ])
            .map_err(wr)?;
        }
    }
    w.flush().map_err(|e| LabError::Write(e.to_string()))
}

pub fn write_conditioning_csv(path: &Path, sweep: &[Conditioning]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["lambda", "kappa", "lambda_max", "lambda_min"])
        .map_err(wr)?;
    for c in sweep {
        w.write_record([
            c.lambda.to_string(),
            c.kappa.to_string(),
            c.lambda_max.to_string(),
            c.lambda_min.to_string(),
        ])
        .map_err(wr)?;
    }
    w.flush().map_err(|e| LabError::Write(e.to_string()))
}
