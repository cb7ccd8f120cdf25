//! Feature and label files, datasets, epoch pairing and the synthetic
//! cross-domain generator.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::metrics::{evaluate_corpus, MetricOptions, MetricsReport};
use crate::tensor::Tensor;

pub const MTDF_MAGIC: &[u8; 4] = b"MTDF";
pub const MTDF_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Encodes a `rows x cols` matrix into the binary container. Values are
/// stored as 32-bit floats.
pub fn encode_mtdf(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<u8>> {
    if rows * cols != data.len() {
        return Err(Error::Dimension {
            op: "encode_mtdf",
            left: vec![rows, cols],
            right: vec![data.len()],
        });
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::contract(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(MTDF_MAGIC);
    out.extend_from_slice(&MTDF_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(rows)?.to_le_bytes());
    out.extend_from_slice(&dim(cols)?.to_le_bytes());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes the binary container into a `T x D` tensor. `path` is used only
/// for error messages.
pub fn decode_mtdf(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MTDF_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != MTDF_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(8, format!("dimensions {t}x{d} overflow")))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        return Err(fail(
            HEADER_LEN + actual.min(expected),
            format!("payload for {t}x{d} needs {expected} bytes, found {actual}"),
        ));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
        }
        data.push(f64::from(v));
    }
    Tensor::new(vec![t, d], data)
}

pub fn write_mtdf(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let bytes = encode_mtdf(rows, cols, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mtdf(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mtdf(&bytes, path)
}

/// Per-frame features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `T x D`.
    pub features: Tensor,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

fn video_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a feature file; the video id is the file stem.
pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let features = read_mtdf(path)?;
    if features.shape()[0] == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: "feature file has zero frames".into(),
        });
    }
    Ok(FeatureSequence {
        video_id: video_id_of(path),
        features,
    })
}

pub fn save_features(path: &Path, features: &Tensor) -> Result<()> {
    let (t, d) = features
        .dims2()
        .ok_or_else(|| Error::contract("features must be a matrix"))?;
    write_mtdf(path, t, d, features.data())
}

/// Imports whitespace-separated text features, one frame per line.
pub fn load_text_features(path: &Path) -> Result<FeatureSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(i + 1, format!("invalid value {tok:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    i + 1,
                    format!("expected {} values, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptySequence("load_text_features"));
    }
    Ok(FeatureSequence {
        video_id: video_id_of(path),
        features: Tensor::from_rows(&rows)?,
    })
}

/// Bidirectional table between action names and dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl ClassMap {
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut map = ClassMap::default();
        for name in names {
            let name = name.into();
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid class name {name:?}")));
            }
            if map.ids.insert(name.clone(), map.names.len()).is_some() {
                return Err(Error::Data(format!("duplicate class name {name:?}")));
            }
            map.names.push(name);
        }
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Parses `<id> <name>` lines; ids must be dense from 0.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut parts = line.split_whitespace();
            let (Some(id), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(format!("expected \"<id> <name>\", found {line:?}")));
            };
            let id: usize = id.parse().map_err(|_| parse_err(format!("invalid id {id:?}")))?;
            if id != entries.len() {
                return Err(parse_err(format!("expected id {}, found {id}", entries.len())));
            }
            entries.push(name.to_string());
        }
        ClassMap::from_names(entries).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i} {n}\n"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    pub video_id: String,
    pub labels: Vec<usize>,
}

pub fn parse_labels(text: &str, class_map: &ClassMap, path: &Path) -> Result<Vec<usize>> {
    let labels = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let name = line.trim();
            class_map.id(name).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("unknown class name {name:?}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.is_empty() {
        return Err(Error::EmptySequence("load_labels"));
    }
    Ok(labels)
}

pub fn load_labels(path: &Path, class_map: &ClassMap) -> Result<LabelSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(LabelSequence {
        video_id: video_id_of(path),
        labels: parse_labels(&text, class_map, path)?,
    })
}

pub fn labels_to_text(labels: &[usize], class_map: &ClassMap) -> Result<String> {
    let mut out = String::new();
    for (t, &l) in labels.iter().enumerate() {
        let name = class_map.name(l).ok_or_else(|| {
            Error::Data(format!(
                "frame {t}: label {l} not in class map of size {}",
                class_map.len()
            ))
        })?;
        out.push_str(name);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptySequence("load_split"));
    }
    Ok(ids)
}

/// Directory layout of a dataset root.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn features(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.mtdf"))
    }

    pub fn labels(&self, id: &str) -> PathBuf {
        self.root.join("groundTruth").join(format!("{id}.txt"))
    }

    pub fn mapping(&self) -> PathBuf {
        self.root.join("mapping.txt")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("splits").join(format!("{name}.txt"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub id: String,
    /// `T x D`.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledVideo {
    pub fn new(id: impl Into<String>, features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let id = id.into();
        let (t, _) = features
            .dims2()
            .ok_or_else(|| Error::Data(format!("{id}: features must be a T x D matrix")))?;
        if t == 0 {
            return Err(Error::EmptySequence("video"));
        }
        if t != labels.len() {
            return Err(Error::Data(format!(
                "{id}: {t} feature frames but {} labels",
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Data(format!("{id}: non-finite feature values")));
        }
        Ok(LabeledVideo { id, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Videos with frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub domain: Domain,
    pub class_map: ClassMap,
    pub videos: Vec<LabeledVideo>,
}

fn check_videos<'a>(
    class_map: &ClassMap,
    videos: impl Iterator<Item = (&'a str, &'a Tensor, Option<&'a [usize]>)>,
) -> Result<()> {
    let mut dim = None;
    let mut count = 0;
    for (id, features, labels) in videos {
        count += 1;
        let d = features.shape()[1];
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Dimension {
                    op: "dataset feature width",
                    left: vec![expected],
                    right: vec![d],
                })
            }
            _ => {}
        }
        if let Some(labels) = labels {
            if let Some((t, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_map.len()) {
                return Err(Error::Data(format!(
                    "{id} frame {t}: label {l} outside [0, {})",
                    class_map.len()
                )));
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptySequence("dataset"));
    }
    Ok(())
}

impl LabeledDataset {
    pub fn new(domain: Domain, class_map: ClassMap, videos: Vec<LabeledVideo>) -> Result<Self> {
        check_videos(
            &class_map,
            videos
                .iter()
                .map(|v| (v.id.as_str(), &v.features, Some(v.labels.as_slice()))),
        )?;
        Ok(LabeledDataset {
            domain,
            class_map,
            videos,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos[0].features.shape()[1]
    }

    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(LabeledVideo::len).sum()
    }

    /// Loads the videos listed in split `split` under `root`.
    pub fn load(root: &Path, split: &str, domain: Domain) -> Result<Self> {
        let layout = DatasetLayout::new(root);
        let class_map = ClassMap::load(&layout.mapping())?;
        let ids = load_split(&layout.split(split))?;
        let videos = ids
            .iter()
            .map(|id| {
                let f = load_features(&layout.features(id))?;
                let l = load_labels(&layout.labels(id), &class_map)?;
                LabeledVideo::new(id.clone(), f.features, l.labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(domain, class_map, videos)
    }

    /// Writes features, labels, class map and split `split` under `root`.
    pub fn save(&self, root: &Path, split: &str) -> Result<()> {
        let layout = DatasetLayout::new(root);
        for dir in ["features", "groundTruth", "splits"] {
            let d = root.join(dir);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let write = |path: PathBuf, text: String| fs::write(&path, text).map_err(|e| Error::io(&path, e));
        write(layout.mapping(), self.class_map.to_text())?;
        let mut split_text = String::new();
        for v in &self.videos {
            save_features(&layout.features(&v.id), &v.features)?;
            write(layout.labels(&v.id), labels_to_text(&v.labels, &self.class_map)?)?;
            split_text.push_str(&v.id);
            split_text.push('\n');
        }
        write(layout.split(split), split_text)
    }

    /// Scores `predict` against the stored labels.
    pub fn evaluate<F>(&self, predict: F, opts: &MetricOptions) -> Result<MetricsReport>
    where
        F: FnMut(&Tensor) -> Result<Vec<usize>>,
    {
        evaluate_labeled(&self.videos, predict, opts)
    }

    /// Turns this dataset into training-time target data: labels stay
    /// reachable only through [`TargetDataset::evaluate`].
    pub fn into_target(self) -> TargetDataset {
        TargetDataset {
            class_map: self.class_map,
            videos: self
                .videos
                .iter()
                .map(|v| FeatureSequence {
                    video_id: v.id.clone(),
                    features: v.features.clone(),
                })
                .collect(),
            held_out: Some(self.videos.into_iter().map(|v| v.labels).collect()),
        }
    }
}

fn evaluate_labeled<F>(videos: &[LabeledVideo], mut predict: F, opts: &MetricOptions) -> Result<MetricsReport>
where
    F: FnMut(&Tensor) -> Result<Vec<usize>>,
{
    let preds = videos
        .iter()
        .map(|v| predict(&v.features))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = videos
        .iter()
        .zip(&preds)
        .map(|(v, p)| (v.id.as_str(), p.as_slice(), v.labels.as_slice()))
        .collect();
    evaluate_corpus(&items, opts)
}

/// Unlabeled training data for the target domain, optionally with held-out
/// labels. The labels can only be used to score a predictor; no accessor
/// hands them out.
#[derive(Clone, Debug)]
pub struct TargetDataset {
    class_map: ClassMap,
    videos: Vec<FeatureSequence>,
    held_out: Option<Vec<Vec<usize>>>,
}

impl TargetDataset {
    pub fn unlabeled(class_map: ClassMap, videos: Vec<FeatureSequence>) -> Result<Self> {
        check_videos(
            &class_map,
            videos.iter().map(|v| (v.video_id.as_str(), &v.features, None)),
        )?;
        Ok(TargetDataset {
            class_map,
            videos,
            held_out: None,
        })
    }

    pub fn videos(&self) -> &[FeatureSequence] {
        &self.videos
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos[0].dim()
    }

    pub fn has_held_out_labels(&self) -> bool {
        self.held_out.is_some()
    }

    /// Scores `predict` against the held-out labels, if any.
    pub fn evaluate<F>(&self, mut predict: F, opts: &MetricOptions) -> Result<Option<MetricsReport>>
    where
        F: FnMut(&Tensor) -> Result<Vec<usize>>,
    {
        let Some(labels) = &self.held_out else {
            return Ok(None);
        };
        let preds = self
            .videos
            .iter()
            .map(|v| predict(&v.features))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = self
            .videos
            .iter()
            .zip(&preds)
            .zip(labels)
            .map(|((v, p), l)| (v.video_id.as_str(), p.as_slice(), l.as_slice()))
            .collect();
        evaluate_corpus(&items, opts).map(Some)
    }
}

/// One training step's pair of video indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainItem {
    pub source: usize,
    pub target: usize,
}

const EPOCH_STREAM_BASE: u64 = 1 << 32;

/// Every source index once in shuffled order, each paired with a target
/// index drawn uniformly with replacement. Deterministic in `(seed, epoch)`.
pub fn epoch_pairs(num_source: usize, num_target: usize, seed: u64, epoch: usize) -> Result<Vec<TrainItem>> {
    if num_source == 0 || num_target == 0 {
        return Err(Error::contract("epoch pairing needs non-empty source and target sets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM_BASE + epoch as u64);
    let mut order: Vec<usize> = (0..num_source).collect();
    order.shuffle(&mut rng);
    Ok(order
        .into_iter()
        .map(|source| TrainItem {
            source,
            target: rng.random_range(0..num_target),
        })
        .collect())
}

pub fn epoch_iterator(
    source: &LabeledDataset,
    target: &TargetDataset,
    seed: u64,
    epoch: usize,
) -> Result<Vec<TrainItem>> {
    epoch_pairs(source.len(), target.len(), seed, epoch)
}

/// Shift applied to the target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Length of the translation applied to every target class mean.
    pub feature_mean_shift: f64,
    /// Rotation of target means in the plane of the first two feature axes.
    pub feature_rotation_angle: f64,
    /// Multiplier on target segment durations.
    pub duration_scale: f64,
    /// Extra Gaussian noise on target frames.
    pub noise_std: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            feature_mean_shift: 0.0,
            feature_rotation_angle: 0.0,
            duration_scale: 1.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub videos_per_domain: usize,
    pub mean_segments_per_video: usize,
    /// Inclusive `[min, max]` segment length in frames: one range shared by
    /// all classes, or one per class.
    pub duration_range: Vec<[usize; 2]>,
    /// Optional `C x C` transition weights; the diagonal is ignored.
    pub transition_weights: Option<Vec<Vec<f64>>>,
    /// Distance of each class mean from the origin.
    pub class_separation: f64,
    /// Gaussian frame noise in both domains.
    pub noise_std: f64,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            feature_dim: 8,
            videos_per_domain: 20,
            mean_segments_per_video: 6,
            duration_range: vec![[10, 30]],
            transition_weights: None,
            class_separation: 3.0,
            noise_std: 1.0,
            domain_shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let c = self.num_classes;
        if c < 2 {
            errs.push(format!("num_classes must be at least 2, got {c}"));
        }
        if self.feature_dim < c.max(2) {
            errs.push(format!(
                "feature_dim must be at least max(num_classes, 2), got {}",
                self.feature_dim
            ));
        }
        if self.videos_per_domain == 0 {
            errs.push("videos_per_domain must be positive".into());
        }
        if self.mean_segments_per_video == 0 {
            errs.push("mean_segments_per_video must be positive".into());
        }
        if self.duration_range.len() != 1 && self.duration_range.len() != c {
            errs.push(format!(
                "duration_range must hold 1 or {c} ranges, got {}",
                self.duration_range.len()
            ));
        }
        for (i, [lo, hi]) in self.duration_range.iter().enumerate() {
            if *lo < 1 || lo > hi {
                errs.push(format!(
                    "duration_range[{i}] = [{lo}, {hi}] must satisfy 1 <= min <= max"
                ));
            }
        }
        if let Some(w) = &self.transition_weights {
            let square = w.len() == c && w.iter().all(|r| r.len() == c);
            if !square {
                errs.push(format!("transition_weights must be {c} x {c}"));
            } else {
                for (i, row) in w.iter().enumerate() {
                    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        errs.push(format!("transition_weights row {i} has negative or non-finite entries"));
                    } else if row.iter().enumerate().all(|(j, v)| j == i || *v == 0.0) {
                        errs.push(format!("transition_weights row {i} has no off-diagonal mass"));
                    }
                }
            }
        }
        let positive = [
            ("class_separation", self.class_separation),
            ("domain_shift.duration_scale", self.domain_shift.duration_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("noise_std", self.noise_std),
            ("domain_shift.noise_std", self.domain_shift.noise_std),
            ("domain_shift.feature_mean_shift", self.domain_shift.feature_mean_shift),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.domain_shift.feature_rotation_angle.is_finite() {
            errs.push("domain_shift.feature_rotation_angle must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("action_{c}")).collect()
    }

    fn range(&self, class: usize) -> [usize; 2] {
        if self.duration_range.len() == 1 {
            self.duration_range[0]
        } else {
            self.duration_range[class]
        }
    }

    /// Class means in a domain: source means are `separation * e_c`.
    pub fn class_means(&self, domain: Domain) -> Vec<Vec<f64>> {
        let d = self.feature_dim;
        let mut means: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|c| {
                let mut m = vec![0.0; d];
                m[c] = self.class_separation;
                m
            })
            .collect();
        if domain == Domain::Target {
            let (s, co) = self.domain_shift.feature_rotation_angle.sin_cos();
            let u = self.shift_direction();
            for m in &mut means {
                let (x, y) = (m[0], m[1]);
                m[0] = co * x - s * y;
                m[1] = s * x + co * y;
                for (v, ui) in m.iter_mut().zip(&u) {
                    *v += self.domain_shift.feature_mean_shift * ui;
                }
            }
        }
        means
    }

    /// Unit direction of the target mean shift, fixed by the seed.
    pub fn shift_direction(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let v: Vec<f64> = (0..self.feature_dim).map(|_| normal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }
}

fn sample_labels(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, duration_scale: f64) -> Vec<usize> {
    let c = cfg.num_classes;
    let m = cfg.mean_segments_per_video;
    let lo = m.div_ceil(2).max(1);
    let hi = (3 * m / 2).max(lo);
    let segments = rng.random_range(lo..=hi);
    let mut labels = Vec::new();
    let mut class = rng.random_range(0..c);
    for s in 0..segments {
        if s > 0 {
            class = match &cfg.transition_weights {
                Some(w) => {
                    let row: Vec<f64> = (0..c).map(|j| if j == class { 0.0 } else { w[class][j] }).collect();
                    let total: f64 = row.iter().sum();
                    let mut u = rng.random_range(0.0..total);
                    let mut next = c - 1;
                    for (j, &wj) in row.iter().enumerate() {
                        if u < wj {
                            next = j;
                            break;
                        }
                        u -= wj;
                    }
                    if next == class {
                        // floating-point spill past the last positive weight
                        next = (0..c).rev().find(|&j| row[j] > 0.0).expect("off-diagonal mass");
                    }
                    next
                }
                None => {
                    let k = rng.random_range(0..c - 1);
                    if k >= class {
                        k + 1
                    } else {
                        k
                    }
                }
            };
        }
        let [dmin, dmax] = cfg.range(class);
        let base = rng.random_range(dmin..=dmax);
        let len = ((base as f64 * duration_scale).round() as usize).max(1);
        labels.extend(std::iter::repeat_n(class, len));
    }
    labels
}

fn generate_domain(cfg: &SyntheticConfig, domain: Domain) -> Result<LabeledDataset> {
    let (stream, prefix, scale, extra_noise) = match domain {
        Domain::Source => (0, "src", 1.0, 0.0),
        Domain::Target => (1, "tgt", cfg.domain_shift.duration_scale, cfg.domain_shift.noise_std),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let means = cfg.class_means(domain);
    let std = (cfg.noise_std * cfg.noise_std + extra_noise * extra_noise).sqrt();
    let noise = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let d = cfg.feature_dim;
    let videos = (0..cfg.videos_per_domain)
        .map(|i| {
            let labels = sample_labels(cfg, &mut rng, scale);
            let mut data = Vec::with_capacity(labels.len() * d);
            for &l in &labels {
                for &m in &means[l] {
                    // rounded through f32 so files round-trip exactly
                    data.push(f64::from((m + noise.sample(&mut rng)) as f32));
                }
            }
            let features = Tensor::new(vec![labels.len(), d], data)?;
            LabeledVideo::new(format!("{prefix}_{i:03}"), features, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(domain, ClassMap::from_names(cfg.class_names())?, videos)
}

/// Draws a labeled source domain and a shifted target domain (whose labels
/// are kept for evaluation).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    Ok((
        generate_domain(cfg, Domain::Source)?,
        generate_domain(cfg, Domain::Target)?,
    ))
}
