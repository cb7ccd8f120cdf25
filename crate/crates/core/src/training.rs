//! Adversarial training loop, optimizer, prediction and ablations.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_iterator, LabeledDataset, TargetDataset};
use crate::error::{Error, Result};
use crate::losses::{total_loss, Domain, LossBreakdown, LossWeights};
use crate::metrics::{MetricOptions, MetricsReport, Scores};
use crate::model::{build_model, model_forward, GrlCoefficients, Mode, ModelConfig, ModelParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `2 / (1 + exp(-gamma p)) - 1`.
pub fn schedule_lambda(progress: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::contract(format!(
            "schedule progress must lie in [0, 1], got {progress}"
        )));
    }
    Ok(2.0 / (1.0 + (-gamma * progress).exp()) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { config, step: 0, m, v }
    }

    pub fn for_params(config: AdamConfig, params: &ModelParams) -> Self {
        Self::new(config, params.network.tensors().iter().map(|t| t.len()))
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Tensors whose gradient is `None` are left alone, moments
    /// included.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam state holds {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.len() != p.len() || p.len() != self.m[i].len() {
                    return Err(Error::contract(format!(
                        "tensor {i}: parameter has {} values, gradient {}, state {}",
                        p.len(),
                        g.len(),
                        self.m[i].len()
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule_gamma: f64,
    /// Separate schedule steepness for the global reversal layer; shares
    /// `schedule_gamma` when unset.
    pub global_schedule_gamma: Option<f64>,
    pub seed: u64,
    /// Evaluate every this many epochs (the last epoch always); 0 disables.
    pub eval_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::MixedDa,
            epochs: 50,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule_gamma: 10.0,
            global_schedule_gamma: None,
            seed: 0,
            eval_every: 1,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            errs.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        for (name, g) in [
            ("schedule_gamma", Some(self.schedule_gamma)),
            ("global_schedule_gamma", self.global_schedule_gamma),
        ] {
            if let Some(g) = g {
                if !(g.is_finite() && g >= 0.0) {
                    errs.push(format!("{name} must be non-negative, got {g}"));
                }
            }
        }
        if let Err(Error::Config(e)) = self.loss.validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn lambdas(&self, progress: f64) -> Result<GrlCoefficients> {
        Ok(GrlCoefficients {
            local: schedule_lambda(progress, self.schedule_gamma)?,
            global: schedule_lambda(progress, self.global_schedule_gamma.unwrap_or(self.schedule_gamma))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Local reversal coefficient at the epoch's last step.
    pub lambda: f64,
    /// Per-step means of the summed source and target objectives.
    pub losses: LossBreakdown,
    pub source: Option<Scores>,
    pub target: Option<Scores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Labels from the final stage: per-frame argmax, ties to the lowest id.
pub fn predict(params: &ModelParams, features: &Tensor) -> Result<Vec<usize>> {
    let probs = params.final_probs(features)?;
    let (t, c) = probs.dims2().expect("matrix");
    Ok((0..t).map(|r| argmax(&probs.data()[r * c..(r + 1) * c])).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_source(params: &ModelParams, data: &LabeledDataset, opts: &MetricOptions) -> Result<MetricsReport> {
    data.evaluate(|f| predict(params, f), opts)
}

pub fn evaluate_target(
    params: &ModelParams,
    data: &TargetDataset,
    opts: &MetricOptions,
) -> Result<Option<MetricsReport>> {
    data.evaluate(|f| predict(params, f), opts)
}

fn check_inputs(
    params: &ModelParams,
    source: &LabeledDataset,
    target: &TargetDataset,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let mc = &params.config;
    if cfg.mode.uses_domain() && !params.network.has_domain_heads() {
        return Err(Error::config(format!(
            "mode {} needs domain heads but da_stages is empty",
            cfg.mode
        )));
    }
    for (what, d) in [("source", source.feature_dim()), ("target", target.feature_dim())] {
        if d != mc.input_dim {
            return Err(Error::Dimension {
                op: if what == "source" {
                    "train source features"
                } else {
                    "train target features"
                },
                left: vec![d],
                right: vec![mc.input_dim],
            });
        }
    }
    if source.class_map.len() != mc.num_classes {
        return Err(Error::config(format!(
            "model has {} classes but the source class map has {}",
            mc.num_classes,
            source.class_map.len()
        )));
    }
    Ok(())
}

/// One optimization step on a (source, target) pair. The target video is
/// skipped entirely in baseline mode.
#[allow(clippy::too_many_arguments)]
fn train_step(
    tape: &mut Tape,
    params: &mut ModelParams,
    adam: &mut Adam,
    cfg: &TrainConfig,
    lambda: GrlCoefficients,
    source: (&Tensor, &[usize]),
    target: &Tensor,
    step: usize,
) -> Result<LossBreakdown> {
    tape.reset();
    let uses_domain = cfg.mode.uses_domain();
    let net = params.bind(tape, uses_domain);
    let xs = tape.constant(source.0.clone());
    let out = model_forward(tape, &net, &params.config, xs, lambda, cfg.mode)?;
    let src = total_loss(tape, &out, Some(source.1), Domain::Source, &cfg.loss, cfg.mode)?;
    let mut values = src.values(tape);
    let mut objective = src.total;
    if uses_domain {
        let xt = tape.constant(target.clone());
        let out = model_forward(tape, &net, &params.config, xt, lambda, cfg.mode)?;
        let tgt = total_loss(tape, &out, None, Domain::Target, &cfg.loss, cfg.mode)?;
        values.add(&tgt.values(tape));
        objective = tape.add(objective, tgt.total)?;
    }
    if !tape.value(objective).item().is_finite() {
        return Err(Error::NonFinite { step });
    }
    tape.backward(objective)?;
    let grads = params.gradients(&net, tape);
    if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { step });
    }
    adam.step(&mut params.network.tensors_mut(), &grads)?;
    Ok(values)
}

/// Trains `params` in place, calling `on_epoch` after each epoch.
pub fn train_with<F>(
    params: &mut ModelParams,
    source: &LabeledDataset,
    target: &TargetDataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    F: FnMut(&EpochRecord),
{
    check_inputs(params, source, target, cfg)?;
    let total_steps = cfg.epochs * source.len();
    let mut adam = Adam::for_params(cfg.adam(), params);
    let mut tape = Tape::new();
    let mut history = TrainHistory::default();
    let opts = MetricOptions::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = LossBreakdown::default();
        let mut lambda = GrlCoefficients::default();
        let items = epoch_iterator(source, target, cfg.seed, epoch)?;
        for item in &items {
            lambda = cfg.lambdas(step as f64 / total_steps as f64)?;
            let s = &source.videos[item.source];
            let t = &target.videos()[item.target];
            let losses = train_step(
                &mut tape,
                params,
                &mut adam,
                cfg,
                lambda,
                (&s.features, &s.labels),
                &t.features,
                step,
            )?;
            sum.add(&losses);
            step += 1;
        }
        let evaluate = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let (src_scores, tgt_scores) = if evaluate {
            (
                Some(evaluate_source(params, source, &opts)?.corpus),
                evaluate_target(params, target, &opts)?.map(|r| r.corpus),
            )
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch,
            lambda: lambda.local,
            losses: sum.scaled(1.0 / items.len() as f64),
            source: src_scores,
            target: tgt_scores,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

pub fn train(
    mut params: ModelParams,
    source: &LabeledDataset,
    target: &TargetDataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let history = train_with(&mut params, source, target, cfg, |_| {})?;
    Ok((params, history))
}

/// The standard stage-selection sweep.
pub fn default_stage_sweep() -> Vec<Vec<usize>> {
    vec![vec![1], vec![2], vec![3], vec![4], vec![1, 2], vec![2, 3], vec![3, 4]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub modes: Vec<Mode>,
    /// Stage selections trained in `sweep_mode`; empty skips the sweep.
    pub stage_sweep: Vec<Vec<usize>>,
    pub sweep_mode: Mode,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modes: Mode::ALL.to_vec(),
            stage_sweep: Vec::new(),
            sweep_mode: Mode::LocalDa,
            seeds: vec![0],
        }
    }
}

/// One cell of an ablation: what was trained and how it scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: Mode,
    pub da_stages: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub label: String,
    #[serde(flatten)]
    pub run: AblationRun,
    pub source: Scores,
    pub target: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub fn ablation_runs(base: &ModelConfig, cfg: &AblationConfig) -> Vec<(String, String, AblationRun)> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            let stages = if mode.uses_domain() {
                base.da_stages.clone()
            } else {
                Vec::new()
            };
            runs.push((
                "modes".to_string(),
                mode.label().to_string(),
                AblationRun {
                    mode,
                    da_stages: stages,
                    seed,
                },
            ));
        }
        for stages in &cfg.stage_sweep {
            let label = stages.iter().map(|s| format!("S{s}")).collect::<Vec<_>>().join("+");
            runs.push((
                "stages".to_string(),
                label,
                AblationRun {
                    mode: cfg.sweep_mode,
                    da_stages: stages.clone(),
                    seed,
                },
            ));
        }
    }
    runs
}

/// Trains and scores one ablation cell from scratch.
pub fn run_single(
    source: &LabeledDataset,
    target: &TargetDataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    run: &AblationRun,
) -> Result<(Scores, MetricsReport)> {
    let model = ModelConfig {
        da_stages: run.da_stages.clone(),
        ..model.clone()
    };
    let cfg = TrainConfig {
        mode: run.mode,
        seed: run.seed,
        eval_every: 0,
        ..train_cfg.clone()
    };
    let params = build_model(&model, run.seed)?;
    let (params, _) = train(params, source, target, &cfg)?;
    let opts = MetricOptions::default();
    let src = evaluate_source(&params, source, &opts)?.corpus;
    let tgt = evaluate_target(&params, target, &opts)?
        .ok_or_else(|| Error::contract("ablation needs held-out target labels for scoring"))?;
    Ok((src, tgt))
}

/// Trains every ablation cell with up to `jobs` runs in parallel. Rows come
/// back in a fixed order regardless of `jobs`.
pub fn run_ablation(
    source: &LabeledDataset,
    target: &TargetDataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    cfg: &AblationConfig,
    jobs: usize,
) -> Result<AblationReport> {
    let runs = ablation_runs(model, cfg);
    let jobs = jobs.clamp(1, runs.len().max(1));
    let mut results: Vec<Option<Result<(Scores, MetricsReport)>>> = (0..runs.len()).map(|_| None).collect();
    for (chunk_runs, chunk_out) in runs.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_runs
                .iter()
                .map(|(_, _, run)| s.spawn(move || run_single(source, target, model, train_cfg, run)))
                .collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("ablation worker panicked"));
            }
        });
    }
    let rows = runs
        .into_iter()
        .zip(results)
        .map(|((group, label, run), res)| {
            let (source, target) = res.expect("every run finished")?;
            Ok(AblationRow {
                group,
                label,
                run,
                source,
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
