use std::path::Path;

use mtda_core::data::generate_synthetic;

use super::{SOURCE_DIR, TARGET_DIR};
use crate::config::RunConfig;
use crate::failure::CliResult;
use crate::manifest::{create_dir, ManifestBuilder};

pub const SPLIT: &str = "all";

pub fn run(config_path: &Path, out: &Path) -> CliResult<()> {
    let mut cfg = RunConfig::load(config_path)?;
    let seed_source = cfg.apply_env()?;
    let mut manifest = ManifestBuilder::start("generate", &cfg.synthetic, Some(cfg.synthetic.seed), seed_source);
    manifest.input(config_path)?;
    let (source, target) = generate_synthetic(&cfg.synthetic)?;
    create_dir(out)?;
    for (name, data) in [(SOURCE_DIR, &source), (TARGET_DIR, &target)] {
        let dir = out.join(name);
        data.save(&dir, SPLIT)?;
        manifest.output(&dir);
        println!(
            "{name}: {} videos, {} frames, {} features, {} classes -> {}",
            data.len(),
            data.num_frames(),
            data.feature_dim(),
            data.class_map.len(),
            dir.display()
        );
    }
    manifest.finish(out)?;
    Ok(())
}
