use std::path::Path;

use mtda_core::checkpoint::save_checkpoint;
use mtda_core::metrics::MetricOptions;
use mtda_core::training::{evaluate_source, evaluate_target, train_with, EpochRecord};
use mtda_core::{build_model, MetricsReport, Mode};
use serde::Serialize;

use super::load_domains;
use crate::config::RunConfig;
use crate::failure::{CliResult, Failure};
use crate::manifest::{create_dir, tree_digest, write_json, ManifestBuilder, MANIFEST_FILE};
use crate::report::metrics_table;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Serialize)]
struct FinalReports {
    source: MetricsReport,
    target: Option<MetricsReport>,
}

#[derive(Serialize)]
struct HistoryDocument<'a> {
    manifest: &'a str,
    mode: Mode,
    seed: u64,
    checkpoint_sha256: String,
    epochs: &'a [EpochRecord],
    #[serde(rename = "final")]
    final_reports: FinalReports,
}

fn epoch_line(r: &EpochRecord, total: usize) -> String {
    let l = &r.losses;
    let mut line = format!(
        "epoch {:>4}/{total} lambda {:.4} loss {:.5} pred {:.5} local {:.5} global {:.5} entropy {:.5}",
        r.epoch + 1,
        r.lambda,
        l.total,
        l.prediction,
        l.local_domain,
        l.global_domain,
        l.attentive_entropy
    );
    if let Some(s) = &r.source {
        line += &format!(" src acc {:.2}", s.acc);
    }
    if let Some(t) = &r.target {
        line += &format!(" tgt acc {:.2}", t.acc);
    }
    line
}

pub fn run(config_path: &Path, data: &Path, out: &Path, split: &str) -> CliResult<()> {
    let mut cfg = RunConfig::load(config_path)?;
    let seed_source = cfg.apply_env()?;
    cfg.train.validate()?;
    let mut manifest = ManifestBuilder::start("train", &cfg, Some(cfg.train.seed), seed_source);
    manifest.input(config_path)?;
    manifest.input(data)?;

    let (source, target) = load_domains(data, split)?;
    if source.feature_dim() != target.feature_dim() {
        return Err(Failure::input(format!(
            "source features have dim {} but target features have dim {}",
            source.feature_dim(),
            target.feature_dim()
        )));
    }
    let model = cfg.model.for_data(source.feature_dim(), source.class_map.len());
    let mut params = build_model(&model, cfg.train.seed)?;
    let epochs = cfg.train.epochs;
    let history = train_with(&mut params, &source, &target, &cfg.train, |r| {
        println!("{}", epoch_line(r, epochs))
    })?;

    let opts = MetricOptions::default();
    let final_reports = FinalReports {
        source: evaluate_source(&params, &source, &opts)?,
        target: evaluate_target(&params, &target, &opts)?,
    };
    print!("{}", metrics_table("source", &final_reports.source));
    if let Some(t) = &final_reports.target {
        print!("{}", metrics_table("target", t));
    }

    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt, &params)?;
    let checkpoint_sha256 = tree_digest(&ckpt)?;
    println!("checkpoint {} sha256 {checkpoint_sha256}", ckpt.display());
    manifest.output(&ckpt);
    let hist_path = out.join(HISTORY_FILE);
    write_json(
        &hist_path,
        &HistoryDocument {
            manifest: MANIFEST_FILE,
            mode: cfg.train.mode,
            seed: cfg.train.seed,
            checkpoint_sha256,
            epochs: &history.epochs,
            final_reports,
        },
    )?;
    manifest.output(&hist_path);
    manifest.finish(out)?;
    Ok(())
}
