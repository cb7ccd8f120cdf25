//! Training objectives over model outputs.
//!
//! The returned total is the quantity minimized by every parameter. Domain
//! losses enter it with a positive sign; the gradient reversal layers in front
//! of the domain classifiers turn that into maximization for the feature
//! generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, StageOutput};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Binary domain label: source 0, target 1.
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Which domains the attentive entropy term is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyScope {
    Source,
    Target,
    #[default]
    Both,
}

impl EntropyScope {
    fn covers(self, domain: Domain) -> bool {
        match self {
            EntropyScope::Both => true,
            EntropyScope::Source => domain == Domain::Source,
            EntropyScope::Target => domain == Domain::Target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Smoothing weight.
    pub alpha: f64,
    pub beta_l: f64,
    pub beta_g: f64,
    /// Attentive entropy weight.
    pub mu: f64,
    pub tmse_clamp: f64,
    pub entropy_scope: EntropyScope,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.15,
            beta_l: 1.0,
            beta_g: 1.0,
            mu: 1e-4,
            tmse_clamp: 4.0,
            entropy_scope: EntropyScope::Both,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let errs: Vec<String> = [
            ("alpha", self.alpha),
            ("beta_l", self.beta_l),
            ("beta_g", self.beta_g),
            ("mu", self.mu),
            ("tmse_clamp", self.tmse_clamp),
        ]
        .iter()
        .filter(|(_, v)| !(*v >= 0.0 && v.is_finite()))
        .map(|(n, v)| format!("loss weight {n} must be finite and nonnegative, got {v}"))
        .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Every adaptation weight zeroed.
    pub fn without_adaptation(&self) -> Self {
        LossWeights {
            beta_l: 0.0,
            beta_g: 0.0,
            mu: 0.0,
            ..self.clone()
        }
    }
}

/// Scalar values of each objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub prediction: f64,
    pub local_domain: f64,
    pub global_domain: f64,
    pub attentive_entropy: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.prediction += other.prediction;
        self.local_domain += other.local_domain;
        self.global_domain += other.global_domain;
        self.attentive_entropy += other.attentive_entropy;
    }

    pub fn scaled(&self, factor: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * factor,
            prediction: self.prediction * factor,
            local_domain: self.local_domain * factor,
            global_domain: self.global_domain * factor,
            attentive_entropy: self.attentive_entropy * factor,
        }
    }

    /// `prediction + β_l·local + β_g·global + μ·attentive`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.prediction + w.beta_l * self.local_domain + w.beta_g * self.global_domain + w.mu * self.attentive_entropy
    }
}

/// Tape handles of each term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub prediction: Var,
    pub local_domain: Var,
    pub global_domain: Var,
    pub attentive_entropy: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            total: v(self.total),
            prediction: v(self.prediction),
            local_domain: v(self.local_domain),
            global_domain: v(self.global_domain),
            attentive_entropy: v(self.attentive_entropy),
        }
    }
}

/// Mean frame cross-entropy of `frame_logits` (`T x C`) against `labels`.
pub fn classification_loss(tape: &mut Tape, frame_logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(frame_logits, labels)
}

/// Truncated MSE between the log-probabilities of adjacent frames.
pub fn smoothing_loss(tape: &mut Tape, frame_log_probs: Var, clamp: f64) -> Result<Var> {
    if tape.shape(frame_log_probs)[0] == 0 {
        return Err(Error::EmptySequence("smoothing_loss"));
    }
    tape.truncated_mse(frame_log_probs, clamp)
}

/// `classification + alpha · smoothing` for one stage.
pub fn prediction_loss(tape: &mut Tape, output: &StageOutput, labels: &[usize], alpha: f64, clamp: f64) -> Result<Var> {
    let cls = classification_loss(tape, output.frame_logits, labels)?;
    let smooth = smoothing_loss(tape, output.frame_log_probs, clamp)?;
    let weighted = tape.scale(smooth, alpha);
    tape.add(cls, weighted)
}

/// Mean per-frame binary cross-entropy of the `T x 2` domain logits.
pub fn local_domain_loss(tape: &mut Tape, d_hat_logits: Var, domain: Domain) -> Result<Var> {
    let t = tape.shape(d_hat_logits)[0];
    tape.cross_entropy(d_hat_logits, &vec![domain.label(); t])
}

/// Binary cross-entropy of the video-level domain logits (shape `[2]`).
pub fn global_domain_loss(tape: &mut Tape, video_logits: Var, domain: Domain) -> Result<Var> {
    let row = tape.reshape(video_logits, vec![1, 2])?;
    tape.cross_entropy(row, &[domain.label()])
}

/// `(1/T) Σ_j (1 + H(d_j)) · H(y_j)`.
pub fn attentive_entropy_loss(tape: &mut Tape, d_hat_probs: Var, y_hat_probs: Var) -> Result<Var> {
    if tape.shape(d_hat_probs)[0] != tape.shape(y_hat_probs)[0] {
        return Err(Error::Dimension {
            op: "attentive_entropy_loss",
            left: tape.shape(d_hat_probs).to_vec(),
            right: tape.shape(y_hat_probs).to_vec(),
        });
    }
    let hd = tape.entropy_rows(d_hat_probs)?;
    let hy = tape.entropy_rows(y_hat_probs)?;
    let attn = tape.affine(hd, 1.0, 1.0);
    let weighted = tape.mul(attn, hy)?;
    Ok(tape.mean(weighted))
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut iter = terms.iter();
    let Some(&first) = iter.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    iter.try_fold(first, |acc, &t| tape.add(acc, t))
}

/// Full objective for one video. Source videos must carry labels; target
/// videos must not.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &[StageOutput],
    labels: Option<&[usize]>,
    domain: Domain,
    weights: &LossWeights,
    mode: Mode,
) -> Result<LossTerms> {
    let mut prediction = Vec::new();
    match (domain, labels) {
        (Domain::Source, Some(labels)) => {
            for out in outputs {
                prediction.push(prediction_loss(tape, out, labels, weights.alpha, weights.tmse_clamp)?);
            }
        }
        (Domain::Source, None) => {
            return Err(Error::contract("source videos require frame labels"));
        }
        (Domain::Target, Some(_)) => {
            return Err(Error::contract("target labels must not reach the training objective"));
        }
        (Domain::Target, None) => {}
    }
    let mut local = Vec::new();
    let mut global = Vec::new();
    let mut entropy = Vec::new();
    if mode.uses_domain() {
        for out in outputs {
            if let Some(l) = out.local_domain_logits {
                local.push(local_domain_loss(tape, l, domain)?);
            }
            if let Some(g) = out.video_domain_logits {
                global.push(global_domain_loss(tape, g, domain)?);
            }
            if mode.uses_attention() && weights.entropy_scope.covers(domain) {
                if let Some(d) = out.local_domain_probs {
                    entropy.push(attentive_entropy_loss(tape, d, out.frame_probs)?);
                }
            }
        }
    }
    let prediction = sum_all(tape, &prediction)?;
    let local_domain = sum_all(tape, &local)?;
    let global_domain = sum_all(tape, &global)?;
    let attentive_entropy = sum_all(tape, &entropy)?;

    let mut parts = vec![prediction];
    for (term, w) in [
        (local_domain, weights.beta_l),
        (global_domain, weights.beta_g),
        (attentive_entropy, weights.mu),
    ] {
        if tape.requires_grad(term) || tape.value(term).item() != 0.0 {
            parts.push(tape.scale(term, w));
        }
    }
    let total = sum_all(tape, &parts)?;
    Ok(LossTerms {
        total,
        prediction,
        local_domain,
        global_domain,
        attentive_entropy,
    })
}
