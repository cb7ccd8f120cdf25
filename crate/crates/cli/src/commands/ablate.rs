use std::collections::BTreeMap;
use std::path::Path;

use mtda_core::training::{run_ablation, AblationRow};
use serde::Serialize;

use super::load_domains;
use crate::config::RunConfig;
use crate::failure::CliResult;
use crate::manifest::{create_dir, write_json, ManifestBuilder, MANIFEST_FILE};
use crate::report::{scores_header, scores_row};

pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Serialize)]
struct RowDocument<'a> {
    #[serde(flatten)]
    row: &'a AblationRow,
    manifest: &'a str,
}

#[derive(Serialize)]
struct AblationDocument<'a> {
    manifest: &'a str,
    rows: Vec<RowDocument<'a>>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<6} {:<width$} {:<8} {:>5} {:>7}  target {}\n",
        "group",
        "label",
        "stages",
        "seed",
        "src acc",
        scores_header()
    );
    for r in rows {
        let stages = r
            .run
            .da_stages
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out += &format!(
            "{:<6} {:<width$} {:<8} {:>5} {:>7.2}         {}\n",
            r.group,
            r.label,
            if stages.is_empty() { "-".to_string() } else { stages },
            r.run.seed,
            r.source.acc,
            scores_row(&r.target.corpus)
        );
    }
    let mut by_label: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.group.clone(), r.label.clone());
        if !by_label.contains_key(&key) {
            order.push(key.clone());
        }
        by_label.entry(key).or_default().push(r.target.corpus.acc);
    }
    if by_label.values().any(|v| v.len() > 1) {
        out += "median target acc over seeds\n";
        for key in order {
            let accs = by_label.get_mut(&key).expect("key recorded");
            out += &format!("{:<6} {:<width$} {:>7.2}\n", key.0, key.1, median(accs));
        }
    }
    out
}

pub fn run(config_path: &Path, data: &Path, out: &Path, split: &str, jobs: usize) -> CliResult<()> {
    let mut cfg = RunConfig::load(config_path)?;
    let seed_source = cfg.apply_env()?;
    cfg.train.validate()?;
    let seed = (cfg.ablation.seeds.len() == 1).then(|| cfg.ablation.seeds[0]);
    let mut manifest = ManifestBuilder::start("ablate", &cfg, seed, seed_source);
    manifest.input(config_path)?;
    manifest.input(data)?;
    let (source, target) = load_domains(data, split)?;
    let model = cfg.model.for_data(source.feature_dim(), source.class_map.len());
    let report = run_ablation(&source, &target, &model, &cfg.train, &cfg.ablation, jobs)?;
    print!("{}", table(&report.rows));

    create_dir(out)?;
    let path = out.join(ABLATION_FILE);
    let doc = AblationDocument {
        manifest: MANIFEST_FILE,
        rows: report
            .rows
            .iter()
            .map(|row| RowDocument {
                row,
                manifest: MANIFEST_FILE,
            })
            .collect(),
    };
    write_json(&path, &doc)?;
    manifest.output(&path);
    manifest.finish(out)?;
    Ok(())
}
