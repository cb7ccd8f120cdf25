//! Multi-stage temporal convolutional network with adversarial domain heads.
//!
//! Every stage maps its input to frame features with a 1x1 projection and a
//! stack of dilated residual layers, then classifies each frame. Stages listed
//! in [`ModelConfig::da_stages`] additionally carry a frame-level (local) and
//! a video-level (global) domain classifier, each behind a gradient reversal
//! layer. The global classifier sees the features pooled with domain
//! attention weights `w_j = 1 - H(d_j)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which adaptation branches participate in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Source only: plain multi-stage TCN.
    Baseline,
    /// Frame-level adversarial alignment.
    LocalDa,
    /// Local + video-level alignment with uniform temporal pooling.
    MixedDaNoAttention,
    /// Local + global alignment with domain attention and attentive entropy.
    MixedDa,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::LocalDa, Mode::MixedDaNoAttention, Mode::MixedDa];

    pub fn uses_domain(self) -> bool {
        self != Mode::Baseline
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Mode::MixedDaNoAttention | Mode::MixedDa)
    }

    pub fn uses_attention(self) -> bool {
        self == Mode::MixedDa
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::LocalDa => "local_da",
            Mode::MixedDaNoAttention => "mixed_da_no_attention",
            Mode::MixedDa => "mixed_da",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "Source only",
            Mode::LocalDa => "DA (L)",
            Mode::MixedDaNoAttention => "DA (L + G)",
            Mode::MixedDa => "DA (L + G + A)",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub num_filters: usize,
    pub kernel_size: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// 1-based indices of stages that carry domain classifiers.
    pub da_stages: Vec<usize>,
    pub domain_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_stages: 4,
            layers_per_stage: 10,
            num_filters: 64,
            kernel_size: 3,
            input_dim: 2048,
            num_classes: 11,
            da_stages: vec![2, 3],
            domain_hidden_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_stages == 0 {
            errs.push("num_stages must be at least 1".to_string());
        }
        for (name, v) in [
            ("layers_per_stage", self.layers_per_stage),
            ("num_filters", self.num_filters),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("domain_hidden_dim", self.domain_hidden_dim),
            ("kernel_size", self.kernel_size),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            errs.push(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        for &s in &self.da_stages {
            if s == 0 || s > self.num_stages {
                errs.push(format!("da_stages entry {s} outside 1..={}", self.num_stages));
            }
        }
        if self.layers_per_stage >= 63 {
            errs.push("layers_per_stage too large for dilation 2^l".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Whether 0-based stage `index` carries domain classifiers.
    pub fn is_da_stage(&self, index: usize) -> bool {
        self.da_stages.contains(&(index + 1))
    }
}

/// Affine map. For convolutions `weight` is `k x C_in x C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DilatedLayer<P> {
    pub dilation: usize,
    pub conv: Dense<P>,
    pub pointwise: Dense<P>,
}

/// Two-layer perceptron ending in a 2-way domain output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<P> {
    pub hidden: Dense<P>,
    pub output: Dense<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainHeads<P> {
    pub local: Mlp<P>,
    pub global: Mlp<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<P> {
    pub input: Dense<P>,
    pub layers: Vec<DilatedLayer<P>>,
    pub classifier: Dense<P>,
    pub domain: Option<DomainHeads<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<P> {
    pub stages: Vec<Stage<P>>,
}

impl<P> Dense<P> {
    fn map<Q>(&self, path: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Dense<Q> {
        Dense {
            weight: f(&format!("{path}.weight"), &self.weight),
            bias: f(&format!("{path}.bias"), &self.bias),
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a P>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<P> Mlp<P> {
    fn map<Q>(&self, path: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Mlp<Q> {
        Mlp {
            hidden: self.hidden.map(&format!("{path}.hidden"), f),
            output: self.output.map(&format!("{path}.output"), f),
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a P>) {
        self.hidden.collect(out);
        self.output.collect(out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.hidden.collect_mut(out);
        self.output.collect_mut(out);
    }
}

/// Number of tensors in one stage's domain heads.
const DOMAIN_TENSORS: usize = 8;

impl<P> Stage<P> {
    fn map<Q>(&self, path: &str, include_domain: bool, f: &mut impl FnMut(&str, &P) -> Q) -> Stage<Q> {
        Stage {
            input: self.input.map(&format!("{path}.input"), f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| DilatedLayer {
                    dilation: layer.dilation,
                    conv: layer.conv.map(&format!("{path}.layer{l}.conv"), f),
                    pointwise: layer.pointwise.map(&format!("{path}.layer{l}.pointwise"), f),
                })
                .collect(),
            classifier: self.classifier.map(&format!("{path}.classifier"), f),
            domain: self.domain.as_ref().filter(|_| include_domain).map(|d| DomainHeads {
                local: d.local.map(&format!("{path}.local_domain"), f),
                global: d.global.map(&format!("{path}.global_domain"), f),
            }),
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a P>) {
        self.input.collect(out);
        for layer in &self.layers {
            layer.conv.collect(out);
            layer.pointwise.collect(out);
        }
        self.classifier.collect(out);
        if let Some(d) = &self.domain {
            d.local.collect(out);
            d.global.collect(out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.input.collect_mut(out);
        for layer in &mut self.layers {
            layer.conv.collect_mut(out);
            layer.pointwise.collect_mut(out);
        }
        self.classifier.collect_mut(out);
        if let Some(d) = &mut self.domain {
            d.local.collect_mut(out);
            d.global.collect_mut(out);
        }
    }
}

impl<P> Network<P> {
    /// Applies `f` to every parameter with its dotted name. Domain heads are
    /// dropped from the result when `include_domain` is false.
    pub fn map<Q>(&self, include_domain: bool, mut f: impl FnMut(&str, &P) -> Q) -> Network<Q> {
        Network {
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(s, st)| st.map(&format!("stage{}", s + 1), include_domain, &mut f))
                .collect(),
        }
    }

    /// Parameters in canonical order.
    pub fn tensors(&self) -> Vec<&P> {
        let mut out = Vec::new();
        for s in &self.stages {
            s.collect(&mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            s.collect_mut(&mut out);
        }
        out
    }

    /// Canonical-order parameter names.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(true, |n, _| names.push(n.to_string()));
        names
    }

    pub fn has_domain_heads(&self) -> bool {
        self.stages.iter().any(|s| s.domain.is_some())
    }
}

/// All learnable weights, plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub network: Network<Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
    .expect("shape")
}

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, out: usize) -> Dense<Tensor> {
    Dense {
        weight: uniform(rng, &[fan_in, out], fan_in),
        bias: Tensor::zeros(&[out]),
    }
}

/// Initializes parameters deterministically from `seed`: weights uniform in
/// `±1 / sqrt(fan_in)`, biases zero. Domain heads draw from a separate
/// stream, so the remaining weights do not depend on `da_stages`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut domain_rng = ChaCha8Rng::seed_from_u64(seed);
    domain_rng.set_stream(1);
    let f = config.num_filters;
    let k = config.kernel_size;
    let h = config.domain_hidden_dim;
    let stages = (0..config.num_stages)
        .map(|s| {
            let in_dim = if s == 0 { config.input_dim } else { config.num_classes };
            let input = dense(&mut rng, in_dim, f);
            let layers = (0..config.layers_per_stage)
                .map(|l| DilatedLayer {
                    dilation: 1 << l,
                    conv: Dense {
                        weight: uniform(&mut rng, &[k, f, f], k * f),
                        bias: Tensor::zeros(&[f]),
                    },
                    pointwise: dense(&mut rng, f, f),
                })
                .collect();
            let classifier = dense(&mut rng, f, config.num_classes);
            let domain = config.is_da_stage(s).then(|| DomainHeads {
                local: Mlp {
                    hidden: dense(&mut domain_rng, f, h),
                    output: dense(&mut domain_rng, h, 2),
                },
                global: Mlp {
                    hidden: dense(&mut domain_rng, f, h),
                    output: dense(&mut domain_rng, h, 2),
                },
            });
            Stage {
                input,
                layers,
                classifier,
                domain,
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        network: Network { stages },
    })
}

impl ModelParams {
    /// Records every parameter as a differentiable leaf. Domain heads are
    /// skipped entirely when `include_domain` is false.
    pub fn bind(&self, tape: &mut Tape, include_domain: bool) -> Network<Var> {
        self.network.map(include_domain, |_, t| tape.param(t.clone()))
    }

    /// Gradients of the bound parameters in canonical order of the full
    /// network; `None` for anything unbound or off the loss path.
    pub fn gradients(&self, bound: &Network<Var>, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        let mut out = Vec::new();
        for (full, b) in self.network.stages.iter().zip(&bound.stages) {
            let mut vars = Vec::new();
            b.collect(&mut vars);
            out.extend(vars.iter().map(|&&v| tape.grad_data(v).map(<[f64]>::to_vec)));
            if full.domain.is_some() && b.domain.is_none() {
                out.extend(std::iter::repeat_n(None, DOMAIN_TENSORS));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.network.tensors().iter().map(|t| t.len()).sum()
    }

    /// Runs the network without recording gradients and returns the final
    /// stage's frame probabilities (`T x C`).
    pub fn final_probs(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.network.map(false, |_, t| tape.constant(t.clone()));
        let x = tape.constant(features.clone());
        let outputs = model_forward(
            &mut tape,
            &net,
            &self.config,
            x,
            GrlCoefficients::default(),
            Mode::Baseline,
        )?;
        let last = outputs.last().expect("at least one stage");
        Ok(tape.value(last.frame_probs).clone())
    }
}

/// Gradient reversal coefficients for the two adversarial branches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GrlCoefficients {
    pub local: f64,
    pub global: f64,
}

impl GrlCoefficients {
    pub fn shared(lambda: f64) -> Self {
        GrlCoefficients {
            local: lambda,
            global: lambda,
        }
    }
}

/// Tape handles produced by one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub features: Var,
    pub frame_logits: Var,
    pub frame_probs: Var,
    pub frame_log_probs: Var,
    pub local_domain_logits: Option<Var>,
    pub local_domain_probs: Option<Var>,
    pub video_domain_logits: Option<Var>,
    pub attention_weights: Option<Var>,
    pub pooled_feature: Option<Var>,
}

/// Projection, dilated residual layers `x + W₂·relu(conv(x))`, frame
/// classifier. Domain fields are left empty.
pub fn stage_forward(tape: &mut Tape, stage: &Stage<Var>, input: Var) -> Result<StageOutput> {
    let mut x = tape.linear(input, stage.input.weight, stage.input.bias)?;
    for layer in &stage.layers {
        let c = tape.dilated_conv1d(x, layer.conv.weight, layer.conv.bias, layer.dilation)?;
        let a = tape.relu(c);
        let p = tape.linear(a, layer.pointwise.weight, layer.pointwise.bias)?;
        x = tape.add(x, p)?;
    }
    let frame_logits = tape.linear(x, stage.classifier.weight, stage.classifier.bias)?;
    let frame_probs = tape.softmax_rows(frame_logits)?;
    let frame_log_probs = tape.log_softmax_rows(frame_logits)?;
    Ok(StageOutput {
        features: x,
        frame_logits,
        frame_probs,
        frame_log_probs,
        local_domain_logits: None,
        local_domain_probs: None,
        video_domain_logits: None,
        attention_weights: None,
        pooled_feature: None,
    })
}

fn mlp_forward(tape: &mut Tape, mlp: &Mlp<Var>, x: Var) -> Result<Var> {
    let h = tape.linear(x, mlp.hidden.weight, mlp.hidden.bias)?;
    let a = tape.relu(h);
    tape.linear(a, mlp.output.weight, mlp.output.bias)
}

/// Per-frame domain logits (`T x 2`) behind a gradient reversal layer.
pub fn local_domain_forward(tape: &mut Tape, head: &Mlp<Var>, features: Var, lambda: f64) -> Result<Var> {
    let r = tape.grl(features, lambda)?;
    mlp_forward(tape, head, r)
}

/// `w_j = 1 - H(d_j)` for each row of the `T x 2` domain probabilities.
pub fn attention_weights(tape: &mut Tape, d_hat_probs: Var) -> Result<Var> {
    let v = tape.value(d_hat_probs);
    let Some((_, c)) = v.dims2() else {
        return Err(Error::Dimension {
            op: "attention_weights",
            left: v.shape().to_vec(),
            right: vec![],
        });
    };
    for (j, row) in v.data().chunks_exact(c).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::contract(format!(
                "domain prediction at frame {j} is not a distribution (sum {s})"
            )));
        }
    }
    let h = tape.entropy_rows(d_hat_probs)?;
    Ok(tape.affine(h, -1.0, 1.0))
}

/// Domain attentive temporal pooling: `h = (1/T) Σ_j (w_j + 1) f_j`.
/// Returns `(h, w)`.
pub fn datp(tape: &mut Tape, features: Var, d_hat_probs: Var) -> Result<(Var, Var)> {
    if tape.shape(features)[0] == 0 {
        return Err(Error::EmptySequence("datp"));
    }
    let w = attention_weights(tape, d_hat_probs)?;
    let w_total = tape.affine(w, 1.0, 1.0);
    let h = tape.weighted_temporal_pool(features, w_total)?;
    Ok((h, w))
}

/// Video-level domain logits (shape `[2]`) behind a gradient reversal layer.
pub fn global_domain_forward(tape: &mut Tape, head: &Mlp<Var>, pooled: Var, lambda: f64) -> Result<Var> {
    let r = tape.grl(pooled, lambda)?;
    let d = tape.shape(r)[0];
    let row = tape.reshape(r, vec![1, d])?;
    let logits = mlp_forward(tape, head, row)?;
    tape.reshape(logits, vec![2])
}

/// Runs every stage; stage `n > 1` consumes the frame probabilities of stage
/// `n - 1`. Domain branches run only on stages with domain heads, as `mode`
/// dictates.
pub fn model_forward(
    tape: &mut Tape,
    net: &Network<Var>,
    config: &ModelConfig,
    features: Var,
    lambda: GrlCoefficients,
    mode: Mode,
) -> Result<Vec<StageOutput>> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != config.input_dim {
        return Err(Error::Dimension {
            op: "model_forward",
            left: shape,
            right: vec![config.input_dim],
        });
    }
    if shape[0] == 0 {
        return Err(Error::EmptySequence("model_forward"));
    }
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(net.stages.len());
    for stage in &net.stages {
        let input = outputs.last().map_or(features, |o| o.frame_probs);
        let mut out = stage_forward(tape, stage, input)?;
        if let (true, Some(heads)) = (mode.uses_domain(), &stage.domain) {
            let logits = local_domain_forward(tape, &heads.local, out.features, lambda.local)?;
            let probs = tape.softmax_rows(logits)?;
            out.local_domain_logits = Some(logits);
            out.local_domain_probs = Some(probs);
            if mode.uses_global() {
                let pooled = if mode.uses_attention() {
                    let (h, w) = datp(tape, out.features, probs)?;
                    out.attention_weights = Some(w);
                    h
                } else {
                    let ones = tape.constant(Tensor::filled(&[shape[0]], 1.0));
                    tape.weighted_temporal_pool(out.features, ones)?
                };
                out.pooled_feature = Some(pooled);
                out.video_domain_logits = Some(global_domain_forward(tape, &heads.global, pooled, lambda.global)?);
            }
        }
        outputs.push(out);
    }
    Ok(outputs)
}
