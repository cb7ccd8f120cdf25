//! The finite-difference verification suite: every differentiable op, every
//! loss composed with its producer, and the full adversarial model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::losses::{
    attentive_entropy_loss, classification_loss, global_domain_loss, local_domain_loss, smoothing_loss, total_loss,
    Domain, LossWeights,
};
use crate::model::{
    attention_weights, build_model, datp, global_domain_forward, local_domain_forward, model_forward, GrlCoefficients,
    Mode, ModelConfig, Network,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteSize {
    Small,
    Full,
}

impl std::str::FromStr for SuiteSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(SuiteSize::Small),
            "full" => Ok(SuiteSize::Full),
            other => Err(format!("unknown suite size {other:?} (expected SMALL or FULL)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub size: SuiteSize,
    pub tolerance: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub grl_sign_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            size: SuiteSize::Small,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            grl_sign_fault: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpResult {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
    pub kink_fallbacks: usize,
    /// Analytic and numeric derivative at the worst element.
    pub worst: (f64, f64),
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub size: SuiteSize,
    pub tolerance: f64,
    pub seconds: f64,
    pub results: Vec<OpResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect()
    }
}

struct Dims {
    t: usize,
    d: usize,
    c: usize,
    k: usize,
    model: ModelConfig,
}

fn dims(size: SuiteSize) -> Dims {
    match size {
        SuiteSize::Small => Dims {
            t: 8,
            d: 4,
            c: 3,
            k: 3,
            model: ModelConfig {
                num_stages: 2,
                layers_per_stage: 2,
                num_filters: 4,
                kernel_size: 3,
                input_dim: 4,
                num_classes: 3,
                da_stages: vec![2],
                domain_hidden_dim: 4,
            },
        },
        SuiteSize::Full => Dims {
            t: 16,
            d: 6,
            c: 4,
            k: 5,
            model: ModelConfig {
                num_stages: 3,
                layers_per_stage: 3,
                num_filters: 6,
                kernel_size: 3,
                input_dim: 6,
                num_classes: 4,
                da_stages: vec![2, 3],
                domain_hidden_dim: 5,
            },
        },
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

/// `sum(x ⊙ r)` for a fixed random `r`, so every output element matters
/// with a different weight.
fn project(tape: &mut Tape, x: Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

struct Runner {
    opts: SuiteOptions,
    results: Vec<OpResult>,
}

impl Runner {
    fn base(&self) -> GradCheck {
        GradCheck::new().inject_grl_sign_fault(self.opts.grl_sign_fault)
    }

    fn record(&mut self, name: &str, reports: &[GradCheckReport]) {
        let worst = reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one report");
        let max = worst.max_rel_error;
        self.results.push(OpResult {
            name: name.to_string(),
            max_rel_error: max,
            elements: reports.iter().map(|r| r.elements_checked).sum(),
            kink_fallbacks: reports.iter().map(|r| r.kink_fallbacks).sum(),
            worst: (worst.analytic_at_worst, worst.numeric_at_worst),
            passed: max < self.opts.tolerance,
        });
    }

    fn check<F>(&mut self, name: &str, check: GradCheck, f: F, inputs: &[Tensor]) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = check.run(f, inputs)?;
        self.record(name, &[report]);
        Ok(())
    }
}

/// Runs every check. Never fails on tolerance; inspect the report.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let Dims { t, d, c, k, model } = dims(opts.size);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut run = Runner {
        opts: opts.clone(),
        results: Vec::new(),
    };
    let labels: Vec<usize> = (0..t).map(|i| (i * c / t + i % 2) % c).collect();

    let (x, w, b) = (
        random(&mut rng, &[t, d], 1.0),
        random(&mut rng, &[d, c], 1.0),
        random(&mut rng, &[c], 1.0),
    );
    let r = random(&mut rng, &[t, c], 1.0);
    run.check(
        "linear",
        run.base(),
        |tp, v| {
            let y = tp.linear(v[0], v[1], v[2])?;
            project(tp, y, &r)
        },
        &[x.clone(), w, b],
    )?;

    let mut conv_reports = Vec::new();
    for dilation in [1, 2, 4, 8] {
        let kern = random(&mut rng, &[k, d, c], 1.0);
        let bias = random(&mut rng, &[c], 1.0);
        let f = |tp: &mut Tape, v: &[Var]| {
            let y = tp.dilated_conv1d(v[0], v[1], v[2], dilation)?;
            project(tp, y, &r)
        };
        conv_reports.push(run.base().run(f, &[x.clone(), kern, bias])?);
    }
    run.record("dilated_conv1d", &conv_reports);

    let rx = random(&mut rng, &[t, d], 1.0);
    run.check(
        "relu",
        run.base(),
        |tp, v| {
            let y = tp.relu(v[0]);
            project(tp, y, &rx)
        },
        std::slice::from_ref(&x),
    )?;

    let y2 = random(&mut rng, &[t, d], 1.0);
    run.check(
        "add",
        run.base(),
        |tp, v| {
            let s = tp.add(v[0], v[1])?;
            let q = tp.mul(s, s)?;
            project(tp, q, &rx)
        },
        &[x.clone(), y2.clone()],
    )?;
    run.check(
        "mul",
        run.base(),
        |tp, v| {
            let m = tp.mul(v[0], v[1])?;
            project(tp, m, &rx)
        },
        &[x.clone(), y2],
    )?;
    run.check(
        "affine",
        run.base(),
        |tp, v| {
            let a = tp.affine(v[0], -1.7, 0.3);
            let q = tp.mul(a, a)?;
            project(tp, q, &rx)
        },
        std::slice::from_ref(&x),
    )?;

    let logits = random(&mut rng, &[t, c], 2.0);
    run.check(
        "softmax_rows",
        run.base(),
        |tp, v| {
            let p = tp.softmax_rows(v[0])?;
            project(tp, p, &r)
        },
        std::slice::from_ref(&logits),
    )?;
    run.check(
        "log_softmax_rows",
        run.base(),
        |tp, v| {
            let p = tp.log_softmax_rows(v[0])?;
            project(tp, p, &r)
        },
        std::slice::from_ref(&logits),
    )?;

    let mut grl_reports = Vec::new();
    for lambda in [0.5, 1.0] {
        let f = |tp: &mut Tape, v: &[Var]| {
            let g = tp.grl(v[0], lambda)?;
            let q = tp.mul(g, g)?;
            project(tp, q, &rx)
        };
        // the analytic pass reverses, the function itself does not
        grl_reports.push(run.base().numeric_scale(-lambda).run(f, std::slice::from_ref(&x))?);
    }
    run.record("grl", &grl_reports);

    let weights = random(&mut rng, &[t], 1.0);
    let rd = random(&mut rng, &[d], 1.0);
    run.check(
        "weighted_temporal_pool",
        run.base(),
        |tp, v| {
            let h = tp.weighted_temporal_pool(v[0], v[1])?;
            project(tp, h, &rd)
        },
        &[x.clone(), weights],
    )?;

    let rt = random(&mut rng, &[t], 1.0);
    run.check(
        "entropy_rows",
        run.base(),
        |tp, v| {
            let p = tp.softmax_rows(v[0])?;
            let h = tp.entropy_rows(p)?;
            project(tp, h, &rt)
        },
        std::slice::from_ref(&logits),
    )?;
    run.check(
        "sum",
        run.base(),
        |tp, v| {
            let q = tp.mul(v[0], v[0])?;
            Ok(tp.sum(q))
        },
        std::slice::from_ref(&x),
    )?;
    run.check(
        "mean",
        run.base(),
        |tp, v| {
            let q = tp.mul(v[0], v[0])?;
            Ok(tp.mean(q))
        },
        std::slice::from_ref(&x),
    )?;
    let rflat = random(&mut rng, &[t * d], 1.0);
    run.check(
        "reshape",
        run.base(),
        |tp, v| {
            let q = tp.mul(v[0], v[0])?;
            let flat = tp.reshape(q, vec![t * d])?;
            project(tp, flat, &rflat)
        },
        std::slice::from_ref(&x),
    )?;
    run.check(
        "cross_entropy",
        run.base(),
        |tp, v| tp.cross_entropy(v[0], &labels),
        std::slice::from_ref(&logits),
    )?;
    // a tight clamp so some frame differences exceed it without saturating the softmax
    let wide = random(&mut rng, &[t, c], 3.0);
    run.check(
        "truncated_mse",
        run.base(),
        |tp, v| {
            let lp = tp.log_softmax_rows(v[0])?;
            tp.truncated_mse(lp, 1.5)
        },
        &[wide],
    )?;

    // losses composed with their producers
    run.check(
        "classification_loss",
        run.base(),
        |tp, v| classification_loss(tp, v[0], &labels),
        std::slice::from_ref(&logits),
    )?;
    run.check(
        "smoothing_loss",
        run.base(),
        |tp, v| {
            let lp = tp.log_softmax_rows(v[0])?;
            smoothing_loss(tp, lp, 4.0)
        },
        std::slice::from_ref(&logits),
    )?;

    let f = model.num_filters;
    let h = model.domain_hidden_dim;
    let feats = random(&mut rng, &[t, f], 1.0);
    let head = [
        random(&mut rng, &[f, h], 1.0),
        random(&mut rng, &[h], 0.5),
        random(&mut rng, &[h, 2], 1.0),
        random(&mut rng, &[2], 0.5),
    ];
    let head_net = |v: &[Var]| crate::model::Mlp {
        hidden: crate::model::Dense {
            weight: v[1],
            bias: v[2],
        },
        output: crate::model::Dense {
            weight: v[3],
            bias: v[4],
        },
    };
    let mut head_inputs = vec![feats.clone()];
    head_inputs.extend(head.iter().cloned());
    let lambda = 0.7;

    run.check(
        "local_domain_loss",
        run.base().gradient_reversal(false),
        |tp, v| {
            let logits = local_domain_forward(tp, &head_net(v), v[0], lambda)?;
            local_domain_loss(tp, logits, Domain::Target)
        },
        &head_inputs,
    )?;

    let d_logits = random(&mut rng, &[t, 2], 2.0);
    run.check(
        "attention_weights",
        run.base(),
        |tp, v| {
            let p = tp.softmax_rows(v[0])?;
            let w = attention_weights(tp, p)?;
            project(tp, w, &rt)
        },
        std::slice::from_ref(&d_logits),
    )?;

    let mut datp_inputs = head_inputs.clone();
    datp_inputs.push(d_logits.clone());
    run.check(
        "datp+global_domain_loss",
        run.base().gradient_reversal(false),
        |tp, v| {
            let p = tp.softmax_rows(v[5])?;
            let (pooled, _) = datp(tp, v[0], p)?;
            let logits = global_domain_forward(tp, &head_net(v), pooled, lambda)?;
            global_domain_loss(tp, logits, Domain::Source)
        },
        &datp_inputs,
    )?;

    run.check(
        "attentive_entropy_loss",
        run.base(),
        |tp, v| {
            let dp = tp.softmax_rows(v[0])?;
            let yp = tp.softmax_rows(v[1])?;
            attentive_entropy_loss(tp, dp, yp)
        },
        &[d_logits, logits],
    )?;

    // the full adversarial model on one source and one target video
    let params = build_model(&model, opts.seed ^ 0x5eed)?;
    // jittered away from the zero-bias initialization, whose symmetry can
    // leave a head at a stationary point where differences see only roundoff
    let inputs: Vec<Tensor> = params
        .network
        .tensors()
        .into_iter()
        .map(|p| {
            let noise = random(&mut rng, p.shape(), 0.5);
            let data = p.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::new(p.shape().to_vec(), data).expect("shape")
        })
        .collect();
    let src = random(&mut rng, &[t, d], 1.0);
    let tgt = random(&mut rng, &[t, d], 1.0);
    let weights = LossWeights {
        mu: 0.5,
        ..LossWeights::default()
    };
    let forward = |tp: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut it = v.iter();
        let net: Network<Var> = params.network.map(true, |_, _| *it.next().expect("one var per tensor"));
        let lam = GrlCoefficients::shared(lambda);
        let xs = tp.constant(src.clone());
        let out = model_forward(tp, &net, &model, xs, lam, Mode::MixedDa)?;
        let ls = total_loss(tp, &out, Some(&labels), Domain::Source, &weights, Mode::MixedDa)?;
        let xt = tp.constant(tgt.clone());
        let out = model_forward(tp, &net, &model, xt, lam, Mode::MixedDa)?;
        let lt = total_loss(tp, &out, None, Domain::Target, &weights, Mode::MixedDa)?;
        tp.add(ls.total, lt.total)
    };
    run.check("model.mixed_da", run.base().gradient_reversal(false), forward, &inputs)?;

    // with reversal on, only the global heads reach the loss without crossing
    // a reversal layer (local heads feed the attention behind the global one)
    let names = params.network.names();
    let heads: Vec<usize> = (0..names.len())
        .filter(|&i| names[i].contains("global_domain."))
        .collect();
    run.check(
        "model.mixed_da.global_heads",
        run.base().subset(heads),
        forward,
        &inputs,
    )?;

    Ok(SuiteReport {
        size: opts.size,
        tolerance: opts.tolerance,
        seconds: start.elapsed().as_secs_f64(),
        results: run.results,
    })
}
