//! Frame accuracy, segmental edit score and segmental F1@k.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU thresholds (percent) reported for F1.
pub const F1_THRESHOLDS: [f64; 3] = [10.0, 25.0, 50.0];

/// A maximal run of one label: frames `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

pub fn segments_from_labels(labels: &[usize]) -> Result<Vec<Segment>> {
    if labels.is_empty() {
        return Err(Error::EmptySequence("segments_from_labels"));
    }
    let mut segs = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            segs.push(Segment {
                label: labels[start],
                start,
                end: t,
            });
            start = t;
        }
    }
    Ok(segs)
}

pub fn expand_segments(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

fn check_lengths(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "prediction has {} frames but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::EmptySequence("metrics"));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Labels excluded from segment-level metrics (e.g. background).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub ignore_labels: Vec<usize>,
}

impl MetricOptions {
    fn segments(&self, labels: &[usize]) -> Result<Vec<Segment>> {
        Ok(segments_from_labels(labels)?
            .into_iter()
            .filter(|s| !self.ignore_labels.contains(&s.label))
            .collect())
    }
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    edit_score_with(pred, gt, &MetricOptions::default())
}

/// `100 · (1 - D / max(|P|, |G|))` over the collapsed segment-label strings.
pub fn edit_score_with(pred: &[usize], gt: &[usize], opts: &MetricOptions) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySequence("edit_score"));
    }
    let p: Vec<usize> = opts.segments(pred)?.iter().map(|s| s.label).collect();
    let g: Vec<usize> = opts.segments(gt)?.iter().map(|s| s.label).collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * (1.0 - levenshtein(&p, &g) as f64 / longest as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl F1Counts {
    pub fn add(&mut self, o: &F1Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        100.0 * Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        100.0 * Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Greedy matching in prediction order: each predicted segment takes its
/// best-IoU same-label ground-truth segment, and counts as a true positive
/// if that IoU reaches `k`% and the segment is still unmatched.
pub fn f1_counts(pred: &[usize], gt: &[usize], k: f64, opts: &MetricOptions) -> Result<F1Counts> {
    check_lengths(pred, gt)?;
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::contract(format!("F1 threshold must lie in (0, 100], got {k}")));
    }
    let threshold = k / 100.0;
    let p = opts.segments(pred)?;
    let g = opts.segments(gt)?;
    let mut matched = vec![false; g.len()];
    let mut counts = F1Counts::default();
    for seg in &p {
        let best = g
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == seg.label)
            .map(|(i, s)| (i, seg.iou(s)))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        match best {
            Some((i, iou)) if iou >= threshold && !matched[i] => {
                matched[i] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = matched.iter().filter(|m| !**m).count();
    Ok(counts)
}

pub fn f1_at_k(pred: &[usize], gt: &[usize], k: f64) -> Result<F1Score> {
    f1_at_k_with(pred, gt, k, &MetricOptions::default())
}

pub fn f1_at_k_with(pred: &[usize], gt: &[usize], k: f64, opts: &MetricOptions) -> Result<F1Score> {
    let c = f1_counts(pred, gt, k, opts)?;
    Ok(F1Score {
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
    })
}

/// The five headline numbers, all in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scores {
    pub acc: f64,
    pub edit: f64,
    #[serde(rename = "f1.10")]
    pub f1_10: f64,
    #[serde(rename = "f1.25")]
    pub f1_25: f64,
    #[serde(rename = "f1.50")]
    pub f1_50: f64,
}

impl Scores {
    pub fn f1(&self) -> [f64; 3] {
        [self.f1_10, self.f1_25, self.f1_50]
    }

    fn from_parts(acc: f64, edit: f64, f1: [f64; 3]) -> Self {
        Scores {
            acc,
            edit,
            f1_10: f1[0],
            f1_25: f1[1],
            f1_50: f1[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Per-video values and their unweighted means (the non-pooled variant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerVideo {
    pub videos: Vec<VideoScores>,
    pub mean: Scores,
}

/// Corpus metrics. Top-level values are canonical: frame accuracy over pooled
/// frames, edit averaged over videos, F1 from pooled TP/FP/FN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub corpus: Scores,
    pub per_video: PerVideo,
}

/// One evaluated video: `(video_id, prediction, ground truth)`.
pub type EvalItem<'a> = (&'a str, &'a [usize], &'a [usize]);

pub fn evaluate_corpus(videos: &[EvalItem<'_>], opts: &MetricOptions) -> Result<MetricsReport> {
    if videos.is_empty() {
        return Err(Error::contract("evaluate_corpus needs at least one video"));
    }
    let mut hits = 0usize;
    let mut frames = 0usize;
    let mut pooled = [F1Counts::default(); 3];
    let mut per = Vec::with_capacity(videos.len());
    for &(id, pred, gt) in videos {
        check_lengths(pred, gt)?;
        hits += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        frames += gt.len();
        let mut f1 = [0.0; 3];
        for (i, &k) in F1_THRESHOLDS.iter().enumerate() {
            let c = f1_counts(pred, gt, k, opts)?;
            pooled[i].add(&c);
            f1[i] = c.f1();
        }
        per.push(VideoScores {
            video_id: id.to_string(),
            scores: Scores::from_parts(frame_accuracy(pred, gt)?, edit_score_with(pred, gt, opts)?, f1),
        });
    }
    let n = per.len() as f64;
    let mean_of = |f: &dyn Fn(&Scores) -> f64| per.iter().map(|v| f(&v.scores)).sum::<f64>() / n;
    let mean = Scores::from_parts(
        mean_of(&|s| s.acc),
        mean_of(&|s| s.edit),
        [mean_of(&|s| s.f1_10), mean_of(&|s| s.f1_25), mean_of(&|s| s.f1_50)],
    );
    let corpus = Scores::from_parts(
        100.0 * hits as f64 / frames as f64,
        mean.edit,
        [pooled[0].f1(), pooled[1].f1(), pooled[2].f1()],
    );
    Ok(MetricsReport {
        corpus,
        per_video: PerVideo { videos: per, mean },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;

    #[test]
    fn segments_of_simple_sequences() {
        assert_eq!(
            segments_from_labels(&[A, A, B]).unwrap(),
            vec![
                Segment {
                    label: A,
                    start: 0,
                    end: 2
                },
                Segment {
                    label: B,
                    start: 2,
                    end: 3
                }
            ]
        );
        assert_eq!(
            segments_from_labels(&[C; 9]).unwrap(),
            vec![Segment {
                label: C,
                start: 0,
                end: 9
            }]
        );
        assert!(matches!(segments_from_labels(&[]), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn frame_accuracy_cases() {
        let gt = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
        assert_eq!(frame_accuracy(&gt, &gt).unwrap(), 100.0);
        let off: Vec<usize> = gt.iter().map(|v| v + 1).collect();
        assert_eq!(frame_accuracy(&off, &gt).unwrap(), 0.0);
        let half = [0, 1, 2, 3, 4, 0, 0, 0, 0, 0];
        assert_eq!(frame_accuracy(&half, &gt).unwrap(), 50.0);
        assert!(matches!(frame_accuracy(&[0], &[0, 0]), Err(Error::Data(_))));
    }

    #[test]
    fn edit_score_worked_example() {
        let gt = [A, A, B, C, C, B];
        let pred = [A, C, C, B, B, B];
        assert_eq!(levenshtein(&[A, C, B], &[A, B, C, B]), 1);
        assert_eq!(edit_score(&pred, &gt).unwrap(), 75.0);
        assert_eq!(edit_score(&gt, &gt).unwrap(), 100.0);
    }

    #[test]
    fn f1_worked_examples() {
        let bg = 9;
        let opts = MetricOptions {
            ignore_labels: vec![bg],
        };
        let gt = [A; 10];
        let mut pred = [bg; 10];
        pred[..5].fill(A);
        let s = f1_at_k_with(&pred, &gt, 50.0, &opts).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (100.0, 100.0, 100.0));
        // a slightly stricter threshold rejects IoU 0.5
        assert_eq!(f1_at_k_with(&pred, &gt, 51.0, &opts).unwrap().f1, 0.0);

        let mut gt2 = vec![A; 10];
        gt2.extend([B; 10]);
        let mut pred2 = vec![bg; 20];
        pred2[..5].fill(A);
        let s = f1_at_k_with(&pred2, &gt2, 50.0, &opts).unwrap();
        assert_eq!(s.precision, 100.0);
        assert_eq!(s.recall, 50.0);
        assert!((s.f1 - 200.0 / 3.0).abs() < 1e-12);

        for k in F1_THRESHOLDS {
            assert_eq!(f1_at_k(&gt2, &gt2, k).unwrap().f1, 100.0);
        }
        assert!(f1_at_k(&gt2, &gt2, 0.0).is_err());
        assert!(f1_at_k(&gt2, &gt2, 100.5).is_err());
    }

    #[test]
    fn duplicate_matches_count_as_false_positives() {
        // two predicted A segments both best-match the single ground-truth A
        let gt = [A, A, A, A, A, A, B, B];
        let pred = [A, A, A, B, A, A, A, B];
        let c = f1_counts(&pred, &gt, 10.0, &MetricOptions::default()).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 2, 0));
    }

    #[test]
    fn corpus_single_and_identical() {
        let gt = vec![A, A, B, B, B, C];
        let pred = vec![A, B, B, B, C, C];
        let one = evaluate_corpus(&[("v", &pred, &gt)], &MetricOptions::default()).unwrap();
        assert_eq!(one.corpus, one.per_video.videos[0].scores);
        assert_eq!(one.corpus, one.per_video.mean);

        let both = evaluate_corpus(&[("a", &gt, &gt), ("b", &gt, &gt)], &MetricOptions::default()).unwrap();
        assert_eq!(both.corpus, Scores::from_parts(100.0, 100.0, [100.0; 3]));
        assert!(evaluate_corpus(&[], &MetricOptions::default()).is_err());
    }

    #[test]
    fn pooled_f1_differs_from_video_average() {
        // video 1: many segments all correct; video 2: one segment, missed
        let gt1: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let gt2 = vec![A; 20];
        let pred2 = vec![B; 20];
        let r = evaluate_corpus(
            &[("many", &gt1, &gt1), ("one", &pred2, &gt2)],
            &MetricOptions::default(),
        )
        .unwrap();
        // pooled: tp=20, fp=1, fn=1 → F1 = 20/21
        assert!((r.corpus.f1_50 - 100.0 * 20.0 / 21.0).abs() < 1e-9);
        assert_eq!(r.per_video.mean.f1_50, 50.0);
    }

    #[test]
    fn report_schema_keys() {
        let gt = vec![A, B];
        let r = evaluate_corpus(&[("v", &gt, &gt)], &MetricOptions::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["acc", "edit", "f1.10", "f1.25", "f1.50", "per_video"]);
        let back: MetricsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    fn labels() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..4, 1..60)
    }

    proptest! {
        #[test]
        fn segments_round_trip(l in labels()) {
            let segs = segments_from_labels(&l).unwrap();
            prop_assert_eq!(expand_segments(&segs), l);
            for w in segs.windows(2) {
                prop_assert!(w[0].end == w[1].start && w[0].label != w[1].label);
            }
        }

        #[test]
        fn metrics_bounded_and_upsampling_invariant(pair in (1usize..50).prop_flat_map(|n| {
            (prop::collection::vec(0usize..3, n), prop::collection::vec(0usize..3, n), 2usize..4)
        })) {
            let (p, g, m) = pair;
            let up = |v: &[usize]| v.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect::<Vec<_>>();
            let opts = MetricOptions::default();
            let a = evaluate_corpus(&[("x", &p, &g)], &opts).unwrap();
            let b = evaluate_corpus(&[("x", &up(&p), &up(&g))], &opts).unwrap();
            prop_assert_eq!(a.corpus, b.corpus);
            for v in [a.corpus.acc, a.corpus.edit, a.corpus.f1_10, a.corpus.f1_25, a.corpus.f1_50] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
            prop_assert!(a.corpus.f1_10 >= a.corpus.f1_25 && a.corpus.f1_25 >= a.corpus.f1_50);
        }
    }
}
