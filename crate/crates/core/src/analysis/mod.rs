//! Metrics, segment extraction, duration and transition statistics,
//! embedding clustering, and the data-curation report.

pub mod ami;
pub mod embed;
pub mod gmm;
pub mod linalg;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::Serialize;

use crate::dataio::{FrameLabels, BACKGROUND_ID};

// ---------------------------------------------------------------------------
// Frame-level metrics

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub frames: usize,
    pub per_class: Vec<ClassMetrics>,
}

/// Frame-wise accuracy and macro-averaged precision/recall/F1 over valid
/// frames. Classes absent from both prediction and truth are excluded from
/// the macro means; absent denominators score 0. The background class
/// participates like any other unless `include_background` is false.
pub fn frame_metrics(
    pred: &[u32],
    truth: &[u32],
    valid: &[bool],
    num_classes: usize,
    include_background: bool,
) -> FrameMetrics {
    assert_eq!(pred.len(), truth.len());
    assert_eq!(pred.len(), valid.len());
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut n = 0usize;
    let mut correct = 0usize;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let (p, t) = (pred[i] as usize, truth[i] as usize);
        confusion[t][p] += 1;
        n += 1;
        if p == t {
            correct += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        if !include_background && c as u32 == BACKGROUND_ID {
            continue;
        }
        let tp = confusion[c][c];
        let fp: usize = (0..num_classes).filter(|t| *t != c).map(|t| confusion[t][c]).sum();
        let fn_: usize = (0..num_classes).filter(|p| *p != c).map(|p| confusion[c][p]).sum();
        let support = tp + fn_;
        if support == 0 && fp == 0 {
            continue; // absent from truth and prediction
        }
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        macro_p += precision;
        macro_r += recall;
        macro_f += f1;
        counted += 1;
        per_class.push(ClassMetrics {
            class_id: c as u32,
            support,
            precision,
            recall,
            f1,
        });
    }
    let denom = counted.max(1) as f64;
    FrameMetrics {
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
        f1_macro: macro_f / denom,
        precision_macro: macro_p / denom,
        recall_macro: macro_r / denom,
        frames: n,
        per_class,
    }
}

// ---------------------------------------------------------------------------
// Segments

/// One syllable segment as a half-open frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub label: u32,
    pub onset_frame: usize,
    pub offset_frame: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.offset_frame - self.onset_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentSequence {
    pub segments: Vec<Segment>,
}

/// Run-length decode frame labels into syllable segments (background
/// dropped); runs shorter than `min_len_frames` are discarded.
pub fn segments_from_frames(labels: &FrameLabels, min_len_frames: usize) -> SegmentSequence {
    let mut segments = Vec::new();
    let mut run_start = 0usize;
    let lab = &labels.labels;
    for t in 1..=lab.len() {
        if t == lab.len() || lab[t] != lab[run_start] {
            let label = lab[run_start];
            if label != labels.background_id && t - run_start >= min_len_frames.max(1) {
                segments.push(Segment {
                    label,
                    onset_frame: run_start,
                    offset_frame: t,
                });
            }
            run_start = t;
        }
    }
    SegmentSequence { segments }
}

// ---------------------------------------------------------------------------
// Durations

#[derive(Debug, Clone, Serialize)]
pub struct DurationStats {
    pub durations_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub iqr_ms: f64,
}

/// Durations (ms) of segments with the given label (all syllables when
/// `label` is None), plus summary statistics.
pub fn duration_distribution(
    seqs: &[SegmentSequence],
    label: Option<u32>,
    hop_s: f64,
) -> DurationStats {
    let mut d: Vec<f64> = seqs
        .iter()
        .flat_map(|s| s.segments.iter())
        .filter(|s| label.map(|l| s.label == l).unwrap_or(true))
        .map(|s| s.len() as f64 * hop_s * 1000.0)
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = d.len();
    let quantile = |q: f64| -> f64 {
        if n == 0 {
            return 0.0;
        }
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        d[lo] * (1.0 - frac) + d[hi] * frac
    };
    DurationStats {
        mean_ms: if n > 0 { d.iter().sum::<f64>() / n as f64 } else { 0.0 },
        median_ms: quantile(0.5),
        iqr_ms: quantile(0.75) - quantile(0.25),
        durations_ms: d,
    }
}

/// Equal-width histogram over the value range.
pub fn histogram(values: &[f64], n_bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / n_bins as f64).max(1e-12);
    let mut bins = vec![0usize; n_bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        bins[b] += 1;
    }
    bins.iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, *c))
        .collect()
}

/// Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut xs: Vec<f64> = a.iter().chain(b.iter()).cloned().collect();
    xs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut sa: Vec<f64> = a.to_vec();
    let mut sb: Vec<f64> = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let cdf = |sorted: &[f64], x: f64| -> f64 {
        let mut count = 0;
        for v in sorted {
            if *v <= x {
                count += 1;
            } else {
                break;
            }
        }
        count as f64 / sorted.len() as f64
    };
    let mut w = 0.0;
    for win in xs.windows(2) {
        let dx = win[1] - win[0];
        if dx <= 0.0 {
            continue;
        }
        w += (cdf(&sa, win[0]) - cdf(&sb, win[0])).abs() * dx;
    }
    w
}

// ---------------------------------------------------------------------------
// Transitions

#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    /// Counts over syllable labels (background excluded); index = label - 1.
    pub counts: Array2<u64>,
}

impl TransitionMatrix {
    /// Row-normalized probabilities; all-zero rows stay zero.
    pub fn probabilities(&self) -> Array2<f64> {
        let (r, c) = self.counts.dim();
        let mut p = Array2::<f64>::zeros((r, c));
        for i in 0..r {
            let total: u64 = self.counts.row(i).sum();
            if total == 0 {
                continue;
            }
            for j in 0..c {
                p[[i, j]] = self.counts[[i, j]] as f64 / total as f64;
            }
        }
        p
    }
}

/// Bigram transitions between consecutive syllable segments within each
/// sequence (one sequence per recording; no cross-recording transitions).
/// With `break_gap_frames` set, consecutive segments separated by more than
/// that many background frames do not count as a transition.
pub fn transition_matrix(
    seqs: &[SegmentSequence],
    num_classes: usize,
    break_gap_frames: Option<usize>,
) -> TransitionMatrix {
    let c = num_classes.saturating_sub(1).max(1);
    let mut counts = Array2::<u64>::zeros((c, c));
    for seq in seqs {
        for w in seq.segments.windows(2) {
            if let Some(th) = break_gap_frames {
                let gap = w[1].onset_frame.saturating_sub(w[0].offset_frame);
                if gap > th {
                    continue;
                }
            }
            let from = (w[0].label - 1) as usize;
            let to = (w[1].label - 1) as usize;
            if from < c && to < c {
                counts[[from, to]] += 1;
            }
        }
    }
    TransitionMatrix { counts }
}

// ---------------------------------------------------------------------------
// Majority-vote relabeling and curation

/// Map each cluster to its modal true label (ties to the smallest label id)
/// and return the relabeled sequence plus the mapping.
pub fn relabel_majority(cluster_ids: &[u32], true_labels: &[u32]) -> (Vec<u32>, BTreeMap<u32, u32>) {
    assert_eq!(cluster_ids.len(), true_labels.len());
    let mut votes: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (c, t) in cluster_ids.iter().zip(true_labels.iter()) {
        *votes.entry(*c).or_default().entry(*t).or_insert(0) += 1;
    }
    let mapping: BTreeMap<u32, u32> = votes
        .into_iter()
        .map(|(c, tally)| {
            // BTreeMap iteration is ordered by label, so on ties the smaller
            // label id wins by strict comparison.
            let mut best_label = 0;
            let mut best_count = 0usize;
            for (label, count) in tally {
                if count > best_count {
                    best_count = count;
                    best_label = label;
                }
            }
            (c, best_label)
        })
        .collect();
    let relabeled = cluster_ids.iter().map(|c| mapping[c]).collect();
    (relabeled, mapping)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub cluster_id: u32,
    pub population: usize,
    /// Exemplar recordings ranked by member count (top 5).
    pub top_recordings: Vec<(String, usize)>,
    pub rare: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurationReport {
    pub total_syllables: usize,
    pub clusters: Vec<ClusterSummary>,
}

/// Per-cluster population and exemplar recordings; clusters holding less
/// than 1% of all syllables are flagged as rare.
pub fn curation_report(rec_ids: &[String], cluster_ids: &[u32]) -> CurationReport {
    assert_eq!(rec_ids.len(), cluster_ids.len());
    let total = cluster_ids.len();
    let clusters: BTreeSet<u32> = cluster_ids.iter().copied().collect();
    let mut summaries = Vec::new();
    for c in clusters {
        let mut by_rec: BTreeMap<&String, usize> = BTreeMap::new();
        let mut population = 0usize;
        for (r, cl) in rec_ids.iter().zip(cluster_ids.iter()) {
            if *cl == c {
                *by_rec.entry(r).or_insert(0) += 1;
                population += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> =
            by_rec.into_iter().map(|(r, n)| (r.clone(), n)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(5);
        summaries.push(ClusterSummary {
            cluster_id: c,
            population,
            top_recordings: ranked,
            rare: (population as f64) < 0.01 * total as f64,
        });
    }
    CurationReport {
        total_syllables: total,
        clusters: summaries,
    }
}

impl CurationReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Curation report\n\n");
        out.push_str(&format!("Total syllables: {}\n\n", self.total_syllables));
        out.push_str("| cluster | population | rare | top recordings |\n");
        out.push_str("|---------|------------|------|----------------|\n");
        for c in &self.clusters {
            let recs = c
                .top_recordings
                .iter()
                .map(|(r, n)| format!("{r} ({n})"))
                .collect::<Vec<_>>()
                .join(", ");
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                c.cluster_id,
                c.population,
                if c.rare { "yes" } else { "" },
                recs
            ));
        }
        out
    }
}
