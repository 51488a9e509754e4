use babelkit_numerics::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::encoder::{images_tensor, Encoder, EncoderVars};
use super::generator::{generate_sample, ModalitySpec, SyntheticModalityGenerator};
use super::pivot::{teacher_forcing, LanguagePivot, PivotVars};
use super::vocab::{ConceptVocabulary, InstructionSample};
use super::{AlignError, Result};
use crate::lvsa::{AnnealSchedule, SelectedSet, DEFAULT_TAU};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d_z: usize,
    pub d_x: usize,
    pub n_z: usize,
    pub d_e: usize,
    pub vocab_size: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_z: 4,
            d_x: 16,
            n_z: 2,
            d_e: 8,
            vocab_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvsaConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_tau")]
    pub tau: AnnealSchedule,
    /// Over the encoder's 2-level pyramid; must contain level 2.
    #[serde(default = "both_levels")]
    pub selected: SelectedSet,
}

fn yes() -> bool {
    true
}
fn default_tau() -> AnnealSchedule {
    AnnealSchedule::new(DEFAULT_TAU).expect("positive")
}
fn both_levels() -> SelectedSet {
    SelectedSet::all(2)
}

impl Default for LvsaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: default_tau(),
            selected: both_levels(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PivotConfig {
    pub anchor_scale: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for PivotConfig {
    fn default() -> Self {
        Self {
            anchor_scale: 3.0,
            steps: 300,
            lr: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    #[serde(default)]
    pub dims: Dims,
    pub concepts: Vec<String>,
    pub modalities: Vec<ModalitySpec>,
    pub steps: usize,
    /// Samples per step, cycling through (modality, concept) pairs.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub lvsa: LvsaConfig,
    #[serde(default)]
    pub pivot: PivotConfig,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AlignError::Config(m.into()));
        if self.modalities.len() < 2 {
            return bad("at least 2 modalities are required");
        }
        if self.concepts.len() < 2 {
            return bad("at least 2 concepts are required");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.dims.d_z > self.dims.d_x {
            return bad("d_z must not exceed d_x");
        }
        Ok(())
    }
}

/// Everything fixed before training: vocabulary, generators, frozen pivot.
#[derive(Clone, Debug)]
pub struct AlignSetup {
    pub vocab: ConceptVocabulary,
    pub generators: Vec<SyntheticModalityGenerator>,
    pub pivot: LanguagePivot,
    pub anchors: Vec<Vec<f64>>,
    pub config: AlignConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignStep {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub setup: AlignSetup,
    pub initial: Encoder,
    pub encoder: Encoder,
    pub trace: Vec<AlignStep>,
    /// Fusion weight reached at the end of training.
    pub final_alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Number of response tokens summed over.
    pub terms: usize,
}

impl AlignSetup {
    pub fn build(config: &AlignConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dims;
        let vocab =
            ConceptVocabulary::new(config.concepts.clone(), d.vocab_size, d.d_z, config.seed)?;
        let generators = SyntheticModalityGenerator::from_specs(&config.modalities, d.d_x, d.d_z)?;
        let (pivot, anchors) = LanguagePivot::calibrate(
            &vocab,
            d.d_e,
            config.pivot.anchor_scale,
            config.pivot.steps,
            config.pivot.lr,
            derive_seed(config.seed, 1),
        )?;
        Ok(Self {
            vocab,
            generators,
            pivot,
            anchors,
            config: config.clone(),
        })
    }

    pub fn initial_encoder(&self) -> Result<Encoder> {
        let d = self.config.dims;
        let fusion = self
            .config
            .lvsa
            .enabled
            .then(|| self.config.lvsa.selected.clone());
        Encoder::init(
            d.d_x,
            d.n_z,
            d.d_e,
            fusion,
            derive_seed(self.config.seed, 2),
        )
    }

    pub fn generator(&self, modality: &str) -> Result<&SyntheticModalityGenerator> {
        self.generators
            .iter()
            .find(|g| g.modality == modality)
            .ok_or_else(|| AlignError::UnknownModality(modality.to_string()))
    }

    pub fn alpha(&self, step: usize) -> f64 {
        if self.config.lvsa.enabled {
            self.config.lvsa.tau.alpha(step as u64)
        } else {
            0.0
        }
    }

    /// Training batch of step `t`.
    pub fn batch(&self, t: usize) -> Result<Vec<InstructionSample>> {
        let (k, c) = (self.generators.len(), self.vocab.len());
        let b = self.config.batch;
        (0..b)
            .map(|i| {
                let slot = t * b + i;
                let pair = slot % (k * c);
                let gen = &self.generators[pair / c];
                generate_sample(
                    gen,
                    &self.vocab,
                    &self.vocab.concepts()[pair % c],
                    derive_seed(self.config.seed, 1000 + slot as u64),
                )
            })
            .collect()
    }

    /// Noiseless sample used as a consistency probe.
    pub fn probe(&self, modality: &str, concept: usize) -> Result<InstructionSample> {
        let g = self.generator(modality)?;
        let mut s = generate_sample(g, &self.vocab, &self.vocab.concepts()[concept], 0)?;
        s.image = g.render(self.vocab.latent(concept));
        Ok(s)
    }

    /// Gradient descent on the mean per-sample alignment loss.
    pub fn train(&self, mut encoder: Encoder, steps: usize) -> Result<(Encoder, Vec<AlignStep>)> {
        let mut trace = Vec::with_capacity(steps);
        let lr = self.config.lr;
        for t in 0..steps {
            let alpha = self.alpha(t);
            let samples = self.batch(t)?;
            let mut tape = Tape::new();
            let evars = encoder.register(&mut tape, true);
            let pvars = self.pivot.register(&mut tape);
            let (sum, _) = alignment_loss_on_tape(
                &mut tape,
                &encoder,
                &evars,
                &self.pivot,
                &pvars,
                &samples,
                alpha,
            )?;
            let loss = tape.scale(sum, 1.0 / samples.len() as f64)?;
            let value = tape.value(loss)?.item()?;
            if !value.is_finite() {
                return Err(AlignError::NonFinite(t));
            }
            let grads = tape.backward(loss)?;
            for (param, var) in encoder.params_mut().into_iter().zip(evars.all()) {
                let g = grads
                    .get(tape.param_id(var).expect("parameter"))
                    .expect("gradient");
                *param = param.zip_map(g, |w, d| w - lr * d)?;
            }
            trace.push(AlignStep {
                step: t,
                loss: value,
                alpha,
            });
        }
        Ok((encoder, trace))
    }
}

/// Record the summed response-token NLL of `samples` on `tape`.
pub fn alignment_loss_on_tape(
    tape: &mut Tape,
    encoder: &Encoder,
    evars: &EncoderVars,
    pivot: &LanguagePivot,
    pvars: &PivotVars,
    samples: &[InstructionSample],
    alpha: f64,
) -> Result<(Var, usize)> {
    if samples.is_empty() {
        return Err(AlignError::Config("empty batch".into()));
    }
    let v = pivot.vocab_size();
    let (inputs, targets, owner) = teacher_forcing(samples, v)?;
    let images: Vec<Vec<f64>> = samples.iter().map(|s| s.image.clone()).collect();
    let x = tape.constant(images_tensor(&images, encoder.dx)?);
    let z = encoder.forward(tape, evars, x, alpha)?;
    // each response row reads the mean of its own sample's visual tokens
    let nz = encoder.nz;
    let cols = samples.len() * nz;
    let mut select = vec![0.0; owner.len() * cols];
    for (r, &s) in owner.iter().enumerate() {
        for k in 0..nz {
            select[r * cols + s * nz + k] = 1.0 / nz as f64;
        }
    }
    let select = tape.constant(Tensor::matrix(owner.len(), cols, select)?);
    let ctx = tape.matmul(select, z)?;
    let inputs = tape.constant(inputs);
    let logits = pivot.logits(tape, pvars, inputs, ctx)?;
    let p = tape.softmax(logits)?;
    let lp = tape.log(p)?;
    let picked = tape.gather(lp, &targets)?;
    let total = tape.sum(picked)?;
    Ok((tape.scale(total, -1.0)?, targets.len()))
}

/// `-sum_j log P(r_j | q, r_<j, E(x))` over the response tokens of `samples`.
pub fn alignment_loss(
    encoder: &Encoder,
    pivot: &LanguagePivot,
    samples: &[InstructionSample],
    alpha: f64,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let evars = encoder.register(&mut tape, false);
    let pvars = pivot.register(&mut tape);
    let (loss, terms) =
        alignment_loss_on_tape(&mut tape, encoder, &evars, pivot, &pvars, samples, alpha)?;
    Ok(LossValue {
        loss: tape.value(loss)?.item()?,
        terms,
    })
}

/// Teacher-forced next-token distributions, one per response position.
pub fn next_token_distributions(
    encoder: &Encoder,
    pivot: &LanguagePivot,
    sample: &InstructionSample,
    alpha: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let evars = encoder.register(&mut tape, false);
    let pvars = pivot.register(&mut tape);
    let (inputs, targets, _) = teacher_forcing(std::slice::from_ref(sample), pivot.vocab_size())?;
    let x = tape.constant(images_tensor(
        std::slice::from_ref(&sample.image),
        encoder.dx,
    )?);
    let z = encoder.forward(&mut tape, &evars, x, alpha)?;
    let rows = targets.len();
    let select = tape.constant(Tensor::matrix(
        rows,
        encoder.nz,
        vec![1.0 / encoder.nz as f64; rows * encoder.nz],
    )?);
    let ctx = tape.matmul(select, z)?;
    let inputs = tape.constant(inputs);
    let logits = pivot.logits(&mut tape, &pvars, inputs, ctx)?;
    let p = tape.softmax(logits)?;
    let v = pivot.vocab_size();
    Ok(tape
        .value(p)?
        .data()
        .chunks(v)
        .map(<[f64]>::to_vec)
        .collect())
}

const KL_EPS: f64 = 1e-12;

fn smoothed(p: &[f64]) -> Vec<f64> {
    let z = 1.0 + KL_EPS * p.len() as f64;
    p.iter().map(|x| (x + KL_EPS) / z).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Symmetric KL between the pivot's response distributions given the two
/// modalities' noiseless renderings of `concept`, averaged over positions.
/// Probabilities are smoothed by 1e-12 before taking logs.
pub fn cross_modal_consistency(
    setup: &AlignSetup,
    encoder: &Encoder,
    concept: &str,
    modalities: (&str, &str),
    alpha: f64,
) -> Result<f64> {
    let c = setup.vocab.index_of(concept)?;
    let pi =
        next_token_distributions(encoder, &setup.pivot, &setup.probe(modalities.0, c)?, alpha)?;
    let pj =
        next_token_distributions(encoder, &setup.pivot, &setup.probe(modalities.1, c)?, alpha)?;
    let total: f64 = pi
        .iter()
        .zip(&pj)
        .map(|(a, b)| {
            let (a, b) = (smoothed(a), smoothed(b));
            kl(&a, &b) + kl(&b, &a)
        })
        .sum();
    Ok(total / pi.len() as f64)
}

/// Stage-one training from a config: build the setup, initialize the
/// encoder and run `steps` of gradient descent.
pub fn pretrain_align(config: &AlignConfig) -> Result<Pretrained> {
    let setup = AlignSetup::build(config)?;
    let initial = setup.initial_encoder()?;
    let (encoder, trace) = setup.train(initial.clone(), config.steps)?;
    let final_alpha = setup.alpha(config.steps);
    Ok(Pretrained {
        setup,
        initial,
        encoder,
        trace,
        final_alpha,
    })
}
