pub mod ablate;
pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod train;

use std::path::Path;

use mtda_core::data::{load_features, load_split, ClassMap, DatasetLayout};
use mtda_core::{Domain, LabeledDataset, TargetDataset};

use crate::failure::CliResult;

pub const SOURCE_DIR: &str = "source";
pub const TARGET_DIR: &str = "target";

/// Loads the target domain, keeping labels for evaluation when present.
pub fn load_target(root: &Path, split: &str) -> CliResult<TargetDataset> {
    let layout = DatasetLayout::new(root);
    if root.join("groundTruth").is_dir() {
        return Ok(LabeledDataset::load(root, split, Domain::Target)?.into_target());
    }
    let class_map = ClassMap::load(&layout.mapping())?;
    let videos = load_split(&layout.split(split))?
        .iter()
        .map(|id| load_features(&layout.features(id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TargetDataset::unlabeled(class_map, videos)?)
}

/// Source and target domains under a generated data directory.
pub fn load_domains(data: &Path, split: &str) -> CliResult<(LabeledDataset, TargetDataset)> {
    let source = LabeledDataset::load(&data.join(SOURCE_DIR), split, Domain::Source)?;
    let target = load_target(&data.join(TARGET_DIR), split)?;
    Ok((source, target))
}
