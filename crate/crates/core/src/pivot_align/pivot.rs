use babelkit_numerics::{Tape, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{ConceptVocabulary, InstructionSample};
use super::{AlignError, Result};
use crate::seed::stream_rng;

/// Frozen bigram-with-context decoder.
///
/// The input at a response position is the previous token's embedding plus
/// the mean instruction embedding plus the pooled visual context; logits are
/// an affine readout of that sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguagePivot {
    pub embedding: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct PivotVars {
    pub embedding: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl PivotVars {
    pub fn all(&self) -> [Var; 3] {
        [self.embedding, self.w_out, self.b_out]
    }
}

impl LanguagePivot {
    pub fn new(embedding: Tensor, w_out: Tensor, b_out: Tensor) -> Result<Self> {
        let (es, ws, bs) = (embedding.shape(), w_out.shape(), b_out.shape());
        let ok = es.len() == 2
            && ws.len() == 2
            && bs.len() == 1
            && ws[0] == es[1]
            && ws[1] == es[0]
            && bs[0] == es[0];
        if !ok {
            return Err(AlignError::Config(format!(
                "pivot shapes embedding {es:?}, w_out {ws:?}, b_out {bs:?} are inconsistent"
            )));
        }
        Ok(Self {
            embedding,
            w_out,
            b_out,
        })
    }

    /// All-zero decoder: every next-token distribution is uniform.
    pub fn uniform(vocab_size: usize, de: usize) -> Self {
        Self {
            embedding: Tensor::zeros(&[vocab_size, de]),
            w_out: Tensor::zeros(&[de, vocab_size]),
            b_out: Tensor::zeros(&[vocab_size]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.embedding.shape()[1]
    }

    /// Registers the decoder as frozen leaves.
    pub fn register(&self, tape: &mut Tape) -> PivotVars {
        PivotVars {
            embedding: tape.frozen(self.embedding.clone()),
            w_out: tape.frozen(self.w_out.clone()),
            b_out: tape.frozen(self.b_out.clone()),
        }
    }

    /// Logits `(R, V)` for input rows `(R, V)` and contexts `(R, d_e)`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        vars: &PivotVars,
        inputs: Var,
        context: Var,
    ) -> Result<Var> {
        let h = tape.matmul(inputs, vars.embedding)?;
        let h = tape.add(h, context)?;
        let l = tape.matmul(h, vars.w_out)?;
        Ok(tape.add(l, vars.b_out)?)
    }

    /// Fit the decoder on token-only sequences: concept `c`'s response must
    /// be predictable from the anchor context `anchors[c]`. The result is the
    /// decoder's fixed prior and is never updated afterwards.
    pub fn calibrate(
        vocab: &ConceptVocabulary,
        de: usize,
        anchor_scale: f64,
        steps: usize,
        lr: f64,
        seed: u64,
    ) -> Result<(Self, Vec<Vec<f64>>)> {
        let v = vocab.vocab_size();
        let mut rng = stream_rng(seed, 0x9170);
        let mut gauss = |n: usize, sd: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    sd * g
                })
                .collect()
        };
        let anchors: Vec<Vec<f64>> = (0..vocab.len())
            .map(|_| {
                let a = gauss(de, 1.0);
                let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                a.into_iter().map(|x| anchor_scale * x / n).collect()
            })
            .collect();
        let mut pivot = Self {
            embedding: Tensor::matrix(v, de, gauss(v * de, 0.1))?,
            w_out: Tensor::matrix(de, v, gauss(de * v, 0.1))?,
            b_out: Tensor::zeros(&[v]),
        };
        let samples: Vec<InstructionSample> = (0..vocab.len())
            .map(|c| InstructionSample {
                image: Vec::new(),
                instruction: super::vocab::INSTRUCTION.to_vec(),
                response: vocab.tokens(c),
                modality: String::new(),
                concept: c,
            })
            .collect();
        let (inputs, targets, rows) = teacher_forcing(&samples, v)?;
        let ctx: Vec<f64> = rows
            .iter()
            .flat_map(|&s| anchors[s].iter().copied())
            .collect();
        let ctx = Tensor::matrix(targets.len(), de, ctx)?;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let vars = PivotVars {
                embedding: tape.parameter(pivot.embedding.clone()),
                w_out: tape.parameter(pivot.w_out.clone()),
                b_out: tape.parameter(pivot.b_out.clone()),
            };
            let x = tape.constant(inputs.clone());
            let c = tape.constant(ctx.clone());
            let logits = pivot.logits(&mut tape, &vars, x, c)?;
            let p = tape.softmax(logits)?;
            let lp = tape.log(p)?;
            let picked = tape.gather(lp, &targets)?;
            let m = tape.mean(picked)?;
            let loss = tape.scale(m, -1.0)?;
            let g = tape.backward(loss)?;
            let step = |t: &mut Tensor, var: Var| -> Result<()> {
                let grad = g
                    .get(tape.param_id(var).expect("parameter"))
                    .expect("gradient");
                *t = t.zip_map(grad, |w, d| w - lr * d)?;
                Ok(())
            };
            step(&mut pivot.embedding, vars.embedding)?;
            step(&mut pivot.w_out, vars.w_out)?;
            step(&mut pivot.b_out, vars.b_out)?;
        }
        Ok((pivot, anchors))
    }
}

/// Teacher-forced decoder inputs for every response position of `samples`:
/// input rows `(R, V)`, target tokens, and the sample index of each row.
pub(crate) fn teacher_forcing(
    samples: &[InstructionSample],
    vocab: usize,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        for &t in sample.instruction.iter().chain(&sample.response) {
            if t >= vocab {
                return Err(AlignError::TokenOutOfRange { token: t, vocab });
            }
        }
        if sample.instruction.is_empty() {
            return Err(AlignError::Config("empty instruction".into()));
        }
        let mut prompt = vec![0.0; vocab];
        for &q in &sample.instruction {
            prompt[q] += 1.0 / sample.instruction.len() as f64;
        }
        let mut prev = *sample.instruction.last().expect("non-empty");
        for &r in &sample.response {
            let mut row = prompt.clone();
            row[prev] += 1.0;
            data.extend(row);
            targets.push(r);
            owner.push(s);
            prev = r;
        }
    }
    let rows = targets.len();
    Ok((Tensor::matrix(rows, vocab, data)?, targets, owner))
}
