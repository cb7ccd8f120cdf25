use mtda_core::losses::{attentive_entropy_loss, total_loss, Domain, EntropyScope, LossWeights};
use mtda_core::model::{attention_weights, build_model, datp, model_forward, GrlCoefficients, Mode, ModelConfig};
use mtda_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_probs(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0f64..6.0).exp()).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        })
        .collect()
}

fn entropy_loop(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

#[test]
fn attention_pooling_and_entropy_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let t = rng.random_range(1..30);
        let f = rng.random_range(1..8);
        let c = rng.random_range(2..6);
        let d_hat = random_probs(&mut rng, t, 2);
        let y_hat = random_probs(&mut rng, t, c);
        let feats: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..f).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();

        let mut tape = Tape::new();
        let dv = tape.constant(Tensor::from_rows(&d_hat).unwrap());
        let yv = tape.constant(Tensor::from_rows(&y_hat).unwrap());
        let fv = tape.constant(Tensor::from_rows(&feats).unwrap());
        let w = attention_weights(&mut tape, dv).unwrap();
        let (h, _) = datp(&mut tape, fv, dv).unwrap();
        let ae = attentive_entropy_loss(&mut tape, dv, yv).unwrap();

        let mut pooled = vec![0.0; f];
        let mut ae_loop = 0.0;
        for j in 0..t {
            let wj = 1.0 - entropy_loop(&d_hat[j]);
            assert!((tape.value(w).data()[j] - wj).abs() < 1e-10, "case {case}");
            for k in 0..f {
                pooled[k] += (wj + 1.0) * feats[j][k];
            }
            ae_loop += (1.0 + entropy_loop(&d_hat[j])) * entropy_loop(&y_hat[j]);
        }
        for k in 0..f {
            assert!(
                (tape.value(h).data()[k] - pooled[k] / t as f64).abs() < 1e-10,
                "case {case}"
            );
        }
        assert!(
            (tape.value(ae).item() - ae_loop / t as f64).abs() < 1e-10,
            "case {case}"
        );
    }
}

#[test]
fn total_is_recombination_of_parts() {
    let config = ModelConfig {
        num_stages: 3,
        layers_per_stage: 2,
        num_filters: 5,
        kernel_size: 3,
        input_dim: 4,
        num_classes: 3,
        da_stages: vec![2, 3],
        domain_hidden_dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let params = build_model(&config, case).unwrap();
        let t = rng.random_range(1..20);
        let x = Tensor::new(vec![t, 4], (0..t * 4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
        let weights = LossWeights {
            alpha: rng.random_range(0.0..1.0),
            beta_l: rng.random_range(0.0..2.0),
            beta_g: rng.random_range(0.0..2.0),
            mu: rng.random_range(0.0..1.0),
            tmse_clamp: rng.random_range(0.5..6.0),
            entropy_scope: [EntropyScope::Source, EntropyScope::Target, EntropyScope::Both][case as usize % 3],
        };
        let mode = Mode::ALL[case as usize % 4];
        let domain = if case % 2 == 0 { Domain::Source } else { Domain::Target };
        let mut tape = Tape::new();
        let net = params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let lam = GrlCoefficients::shared(rng.random_range(0.0..1.0));
        let out = model_forward(&mut tape, &net, &config, xv, lam, mode).unwrap();
        let lbl = (domain == Domain::Source).then_some(labels.as_slice());
        let terms = total_loss(&mut tape, &out, lbl, domain, &weights, mode).unwrap();
        let parts = terms.values(&tape);
        let direct = parts.prediction
            + weights.beta_l * parts.local_domain
            + weights.beta_g * parts.global_domain
            + weights.mu * parts.attentive_entropy;
        assert!(
            (parts.total - direct).abs() <= 1e-9 * direct.abs().max(1e-300),
            "case {case}: {} vs {direct}",
            parts.total
        );
        assert!((parts.recombine(&weights) - parts.total).abs() <= 1e-9 * parts.total.abs());
        assert!(parts.total >= 0.0 && parts.total.is_finite());
    }
}
