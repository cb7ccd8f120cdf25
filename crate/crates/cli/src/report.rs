//! Plain-text tables for standard output.

use mtda_core::{MetricsReport, Scores};

pub fn scores_header() -> String {
    format!(
        "{:>7} {:>7} {:>7} {:>7} {:>7}",
        "acc", "edit", "f1@10", "f1@25", "f1@50"
    )
}

pub fn scores_row(s: &Scores) -> String {
    format!(
        "{:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
        s.acc, s.edit, s.f1_10, s.f1_25, s.f1_50
    )
}

/// Corpus line plus one line per video.
pub fn metrics_table(title: &str, report: &MetricsReport) -> String {
    let width = report
        .per_video
        .videos
        .iter()
        .map(|v| v.video_id.len())
        .max()
        .unwrap_or(0)
        .max(title.len())
        .max(8);
    let mut out = format!("{:<width$} {}\n", title, scores_header());
    out += &format!("{:<width$} {}\n", "corpus", scores_row(&report.corpus));
    out += &format!("{:<width$} {}\n", "mean", scores_row(&report.per_video.mean));
    for v in &report.per_video.videos {
        out += &format!("{:<width$} {}\n", v.video_id, scores_row(&v.scores));
    }
    out
}
