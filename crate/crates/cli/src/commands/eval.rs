use std::path::Path;

use mtda_core::checkpoint::load_checkpoint;
use mtda_core::metrics::{evaluate_corpus, EvalItem, MetricOptions};
use mtda_core::training::predict;
use mtda_core::{Domain, LabeledDataset, MetricsReport};
use serde::Serialize;

use crate::config::SeedSource;
use crate::failure::{CliResult, Failure};
use crate::manifest::{create_dir, write_json, ManifestBuilder};
use crate::report::metrics_table;

pub const METRICS_FILE: &str = "metrics.json";

/// What to score the ground truth against.
pub enum Predictor<'a> {
    Checkpoint(&'a Path),
    /// Ground truth scored against itself.
    Identity,
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    checkpoint: Option<String>,
    data: String,
    split: &'a str,
    identity_predictor: bool,
}

pub fn evaluate(predictor: &Predictor, data: &LabeledDataset) -> CliResult<MetricsReport> {
    let opts = MetricOptions::default();
    match predictor {
        Predictor::Identity => {
            let items: Vec<EvalItem> = data
                .videos
                .iter()
                .map(|v| (v.id.as_str(), v.labels.as_slice(), v.labels.as_slice()))
                .collect();
            Ok(evaluate_corpus(&items, &opts)?)
        }
        Predictor::Checkpoint(dir) => {
            let params = load_checkpoint(dir)?;
            let model = &params.config;
            if model.input_dim != data.feature_dim() {
                return Err(Failure::input(format!(
                    "checkpoint {} expects feature dim {} but data has feature dim {}",
                    dir.display(),
                    model.input_dim,
                    data.feature_dim()
                )));
            }
            if model.num_classes != data.class_map.len() {
                return Err(Failure::input(format!(
                    "checkpoint {} predicts {} classes but the data mapping has {}",
                    dir.display(),
                    model.num_classes,
                    data.class_map.len()
                )));
            }
            Ok(data.evaluate(|x| predict(&params, x), &opts)?)
        }
    }
}

pub fn run(predictor: Predictor, data: &Path, split: &str, out: Option<&Path>) -> CliResult<()> {
    let settings = EvalSettings {
        checkpoint: match &predictor {
            Predictor::Checkpoint(p) => Some(p.display().to_string()),
            Predictor::Identity => None,
        },
        data: data.display().to_string(),
        split,
        identity_predictor: matches!(predictor, Predictor::Identity),
    };
    let mut manifest = ManifestBuilder::start("eval", &settings, None, SeedSource::Config);
    if let Predictor::Checkpoint(p) = &predictor {
        manifest.input(p)?;
    }
    manifest.input(data)?;
    let dataset = LabeledDataset::load(data, split, Domain::Target)?;
    let report = evaluate(&predictor, &dataset)?;
    match out {
        None => println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize")),
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join(METRICS_FILE);
            write_json(&path, &report)?;
            manifest.output(&path);
            manifest.finish(dir)?;
            print!("{}", metrics_table(split, &report));
        }
    }
    Ok(())
}
