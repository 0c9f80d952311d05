//! Recordings, annotations, frame labels, dataset splits, and batch assembly.
//!
//! Annotations are one CSV per recording (`onset_s,offset_s,label`, same
//! basename as the WAV). Background is class 0 internally; syllable classes
//! are 1..C-1. Padded frames carry the background id with `valid = false`;
//! losses and metrics ignore invalid frames.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, AugmentConfig, SpectrogramConfig};
use crate::error::{Error, Result};

pub const BACKGROUND_ID: u32 = 0;
pub const PAPER_SAMPLE_RATE: u32 = 44_100;

/// A mono waveform with its sample rate.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Recording {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Data(format!("recording {} has no samples", self.id)));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "recording {} contains non-finite samples",
                self.id
            )));
        }
        Ok(())
    }
}

/// One annotated syllable interval, half-open `[onset_s, offset_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalAnnotation {
    pub onset_s: f64,
    pub offset_s: f64,
    pub label: u32,
}

/// Per-frame labels over the full recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub labels: Vec<u32>,
    pub background_id: u32,
}

/// A recording plus its (possibly empty) annotation and derived frame labels.
#[derive(Debug, Clone)]
pub struct AnnotatedRecording {
    pub recording: Recording,
    pub annotations: Vec<IntervalAnnotation>,
    pub frame_labels: FrameLabels,
}

impl AnnotatedRecording {
    pub fn new(
        recording: Recording,
        annotations: Vec<IntervalAnnotation>,
        spec: &SpectrogramConfig,
    ) -> Result<Self> {
        recording.validate()?;
        validate_intervals(&annotations, recording.duration_s())?;
        let t_len = spec.num_frames(recording.samples.len());
        let frame_labels =
            frames_from_intervals(&annotations, t_len, spec.hop_s(recording.sample_rate))?;
        Ok(AnnotatedRecording {
            recording,
            annotations,
            frame_labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.recording.id
    }

    /// Distinct syllable classes occurring in this recording.
    pub fn classes(&self) -> BTreeSet<u32> {
        self.annotations.iter().map(|a| a.label).collect()
    }
}

/// Dataset split manifest for one bird.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub bird_id: String,
    pub num_classes: usize,
    pub few_shot_ids: Vec<String>,
    pub plus1_ids: Vec<String>,
    pub plus2_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitSpec {
    pub fn validate(&self, corpus: &[AnnotatedRecording]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self
            .few_shot_ids
            .iter()
            .chain(&self.plus1_ids)
            .chain(&self.plus2_ids)
            .chain(&self.test_ids)
        {
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("split lists overlap on {id}")));
            }
        }
        // Every syllable class must occur in the few-shot subset.
        let mut covered = BTreeSet::new();
        for rec in corpus {
            if self.few_shot_ids.contains(&rec.recording.id) {
                covered.extend(rec.classes());
            }
        }
        let all: BTreeSet<u32> = corpus.iter().flat_map(|r| r.classes()).collect();
        if covered != all {
            return Err(Error::Data(format!(
                "few-shot split misses classes: {:?}",
                all.difference(&covered).collect::<Vec<_>>()
            )));
        }
        if self.num_classes != (all.iter().max().copied().unwrap_or(0) as usize + 1) {
            return Err(Error::Data(format!(
                "num_classes {} does not match corpus (max label {:?})",
                self.num_classes,
                all.iter().max()
            )));
        }
        Ok(())
    }

    /// Train ids for a given training size tier (0 = few-shot, 1 = +1, 2 = +2).
    pub fn train_ids(&self, tier: usize) -> Vec<String> {
        let mut ids = self.few_shot_ids.clone();
        if tier >= 1 {
            ids.extend(self.plus1_ids.clone());
        }
        if tier >= 2 {
            ids.extend(self.plus2_ids.clone());
        }
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("split serialize: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("split parse: {e}")))
    }
}

/// A batch of spectrograms with optional labels and a validity mask.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (B, T, F) in [0, 1].
    pub x: Array3<f64>,
    /// (B, T) labels; background on padded frames.
    pub y: Option<Array2<u32>>,
    /// (B, T); false on zero-padded frames.
    pub valid: Array2<bool>,
    pub meta: Vec<BatchItemMeta>,
}

#[derive(Debug, Clone)]
pub struct BatchItemMeta {
    pub rec_id: String,
    pub crop_start_sample: usize,
    /// First padded sample index within the crop, if any padding happened.
    pub pad_start: Option<usize>,
}

impl Batch {
    pub fn num_valid_frames(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

// ---------------------------------------------------------------------------
// WAV I/O

/// Load a PCM WAV as a mono waveform at its native rate. Multi-channel input
/// is averaged down to mono.
pub fn load_recording(path: &Path) -> Result<Recording> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.into(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let mut samples: Vec<f64> = Vec::new();
    match spec.sample_format {
        hound::SampleFormat::Int => {
            let denom = (1i64 << (spec.bits_per_sample - 1)) as f64;
            let mut acc = 0.0;
            for (i, s) in reader.into_samples::<i32>().enumerate() {
                let s = s.map_err(|e| Error::Wav {
                    path: path.into(),
                    message: e.to_string(),
                })?;
                acc += s as f64 / denom;
                if (i + 1) % channels == 0 {
                    samples.push(acc / channels as f64);
                    acc = 0.0;
                }
            }
        }
        hound::SampleFormat::Float => {
            let mut acc = 0.0;
            for (i, s) in reader.into_samples::<f32>().enumerate() {
                let s = s.map_err(|e| Error::Wav {
                    path: path.into(),
                    message: e.to_string(),
                })?;
                acc += s as f64;
                if (i + 1) % channels == 0 {
                    samples.push(acc / channels as f64);
                    acc = 0.0;
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Wav {
            path: path.into(),
            message: "zero-length audio".into(),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rec = Recording {
        id,
        samples,
        sample_rate: spec.sample_rate,
    };
    rec.validate()?;
    Ok(rec)
}

/// Write a mono waveform as 16-bit PCM. Values are clamped to [-1, 1].
pub fn write_wav_16bit(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.into(),
        message: e.to_string(),
    })?;
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Wav {
            path: path.into(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.into(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Annotations

fn validate_intervals(intervals: &[IntervalAnnotation], duration_s: f64) -> Result<()> {
    let mut prev_end = 0.0;
    for (i, iv) in intervals.iter().enumerate() {
        if !(iv.onset_s >= 0.0 && iv.onset_s < iv.offset_s && iv.offset_s <= duration_s + 1e-9) {
            return Err(Error::Data(format!(
                "interval {i} [{}, {}) out of range (duration {duration_s})",
                iv.onset_s, iv.offset_s
            )));
        }
        if iv.onset_s < prev_end {
            return Err(Error::Data(format!(
                "interval {i} overlaps or is unsorted at {}",
                iv.onset_s
            )));
        }
        if iv.label == BACKGROUND_ID {
            return Err(Error::Data(format!(
                "interval {i} uses the reserved background label"
            )));
        }
        prev_end = iv.offset_s;
    }
    Ok(())
}

/// Read `onset_s,offset_s,label` rows.
pub fn load_annotations(path: &Path) -> Result<Vec<IntervalAnnotation>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Annotation {
        path: path.into(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for row in reader.deserialize::<IntervalAnnotation>() {
        out.push(row.map_err(|e| Error::Annotation {
            path: path.into(),
            message: e.to_string(),
        })?);
    }
    out.sort_by(|a, b| a.onset_s.partial_cmp(&b.onset_s).unwrap());
    Ok(out)
}

pub fn write_annotations(path: &Path, intervals: &[IntervalAnnotation]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Annotation {
        path: path.into(),
        message: e.to_string(),
    })?;
    for iv in intervals {
        writer.serialize(iv).map_err(|e| Error::Annotation {
            path: path.into(),
            message: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Frame labels from intervals: frame `t` (center time `t * hop_s`) takes the
/// label of the interval containing its center, else background.
pub fn frames_from_intervals(
    intervals: &[IntervalAnnotation],
    t_len: usize,
    hop_s: f64,
) -> Result<FrameLabels> {
    // Overlap/order validation against an unbounded duration: callers that
    // know the true duration validate separately.
    let mut prev_end = 0.0;
    for iv in intervals {
        if iv.onset_s < prev_end {
            return Err(Error::Data("overlapping intervals".into()));
        }
        prev_end = iv.offset_s;
    }
    let mut labels = vec![BACKGROUND_ID; t_len];
    let mut k = 0usize;
    for (t, lab) in labels.iter_mut().enumerate() {
        let center = t as f64 * hop_s;
        while k < intervals.len() && intervals[k].offset_s <= center {
            k += 1;
        }
        if k < intervals.len() && intervals[k].onset_s <= center && center < intervals[k].offset_s {
            *lab = intervals[k].label;
        }
    }
    Ok(FrameLabels {
        labels,
        background_id: BACKGROUND_ID,
    })
}

// ---------------------------------------------------------------------------
// Corpus loading and splits

/// Load all WAV recordings (and sibling annotation CSVs, when present) under
/// a directory, sorted by id.
pub fn load_corpus(
    data_dir: &Path,
    spec: &SpectrogramConfig,
    allow_any_rate: bool,
) -> Result<Vec<AnnotatedRecording>> {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(data_dir)
        .map_err(|e| Error::io(data_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::Data(format!(
            "no .wav files under {}",
            data_dir.display()
        )));
    }
    let mut corpus = Vec::with_capacity(wavs.len());
    for wav in wavs {
        let rec = load_recording(&wav)?;
        if rec.sample_rate != PAPER_SAMPLE_RATE && !allow_any_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {} != {} (use allow_any_rate to override)",
                rec.id, rec.sample_rate, PAPER_SAMPLE_RATE
            )));
        }
        let csv = wav.with_extension("csv");
        let annotations = if csv.exists() {
            load_annotations(&csv)?
        } else {
            Vec::new()
        };
        corpus.push(AnnotatedRecording::new(rec, annotations, spec)?);
    }
    Ok(corpus)
}

pub fn corpus_num_classes(corpus: &[AnnotatedRecording]) -> usize {
    corpus
        .iter()
        .flat_map(|r| r.classes())
        .max()
        .map(|m| m as usize + 1)
        .unwrap_or(1)
}

/// Greedy set cover: repeatedly pick the recording covering the most
/// uncovered classes; ties broken by shorter duration, then lexicographic id.
pub fn few_shot_select(corpus: &[AnnotatedRecording]) -> Result<Vec<String>> {
    let all: BTreeSet<u32> = corpus.iter().flat_map(|r| r.classes()).collect();
    if all.is_empty() {
        return Err(Error::Data("corpus has no annotated syllables".into()));
    }
    let mut uncovered = all;
    let mut chosen: Vec<String> = Vec::new();
    let mut used = vec![false; corpus.len()];
    while !uncovered.is_empty() {
        let mut best: Option<(usize, usize, f64)> = None; // (idx, gain, duration)
        for (i, rec) in corpus.iter().enumerate() {
            if used[i] {
                continue;
            }
            let gain = rec.classes().intersection(&uncovered).count();
            if gain == 0 {
                continue;
            }
            let dur = rec.recording.duration_s();
            let better = match best {
                None => true,
                Some((bi, bg, bd)) => {
                    gain > bg
                        || (gain == bg && dur < bd)
                        || (gain == bg
                            && (dur - bd).abs() < f64::EPSILON
                            && corpus[i].recording.id < corpus[bi].recording.id)
                }
            };
            if better {
                best = Some((i, gain, dur));
            }
        }
        let (idx, _, _) = best.ok_or_else(|| {
            Error::Data(format!(
                "classes {:?} absent from remaining corpus",
                uncovered
            ))
        })?;
        used[idx] = true;
        for c in corpus[idx].classes() {
            uncovered.remove(&c);
        }
        chosen.push(corpus[idx].recording.id.clone());
    }
    Ok(chosen)
}

/// Build a full split: greedy few-shot cover, then `plus1_n` and `plus2_n`
/// additional train recordings drawn from a seeded shuffle of the remainder;
/// everything else is test.
pub fn build_split(
    corpus: &[AnnotatedRecording],
    bird_id: &str,
    plus1_n: usize,
    plus2_n: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<SplitSpec> {
    let few = few_shot_select(corpus)?;
    let mut rest: Vec<String> = corpus
        .iter()
        .map(|r| r.recording.id.clone())
        .filter(|id| !few.contains(id))
        .collect();
    // Fisher-Yates with the provided rng.
    for i in (1..rest.len()).rev() {
        let j = rng.gen_range(0..=i);
        rest.swap(i, j);
    }
    let plus1: Vec<String> = rest.iter().take(plus1_n).cloned().collect();
    let plus2: Vec<String> = rest.iter().skip(plus1_n).take(plus2_n).cloned().collect();
    let test: Vec<String> = rest.iter().skip(plus1_n + plus2_n).cloned().collect();
    let split = SplitSpec {
        bird_id: bird_id.to_string(),
        num_classes: corpus_num_classes(corpus),
        few_shot_ids: few,
        plus1_ids: plus1,
        plus2_ids: plus2,
        test_ids: test,
    };
    split.validate(corpus)?;
    Ok(split)
}

// ---------------------------------------------------------------------------
// Cropping and batching

/// Result of cropping/padding one recording to a fixed window.
#[derive(Debug, Clone)]
pub struct Crop {
    pub wave: Vec<f64>,
    /// First padded sample index, if the recording was shorter than the window.
    pub pad_start: Option<usize>,
    /// Crop offset into the source recording, in samples (hop-aligned).
    pub start_sample: usize,
}

/// Crop a window of `window_s` seconds (uniform hop-aligned start) or pad
/// with trailing zeros when the recording is shorter.
pub fn crop_or_pad(
    rec: &Recording,
    window_s: f64,
    hop: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Crop {
    let win = (window_s * rec.sample_rate as f64).round() as usize;
    let len = rec.samples.len();
    if len >= win {
        // Hop-aligned so cropped frame labels align with full-recording frames.
        let max_start_hops = (len - win) / hop;
        let start = hop * rng.gen_range(0..=max_start_hops);
        Crop {
            wave: rec.samples[start..start + win].to_vec(),
            pad_start: None,
            start_sample: start,
        }
    } else {
        let mut wave = rec.samples.clone();
        wave.resize(win, 0.0);
        Crop {
            wave,
            pad_start: Some(len),
            start_sample: 0,
        }
    }
}

/// Which augmentations to apply when building a batch.
pub struct BatchAugment<'a> {
    pub config: &'a AugmentConfig,
}

/// Assemble a batch of spectrograms from whole recordings cropped to a
/// common window. `window_s = None` processes full-length recordings
/// (inference path; all items must then share one length).
pub fn make_batch(
    recs: &[&AnnotatedRecording],
    window_s: Option<f64>,
    with_labels: bool,
    spec: &SpectrogramConfig,
    augment: Option<&BatchAugment>,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Batch> {
    if recs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let sr = recs[0].recording.sample_rate;
    if recs.iter().any(|r| r.recording.sample_rate != sr) {
        return Err(Error::Data("mixed sample rates in one batch".into()));
    }
    if window_s.is_none() && recs.len() > 1 {
        let len0 = recs[0].recording.samples.len();
        if recs.iter().any(|r| r.recording.samples.len() != len0) {
            return Err(Error::Data(
                "full-length batching requires equal-length recordings".into(),
            ));
        }
    }

    let mut spectrograms = Vec::with_capacity(recs.len());
    let mut metas = Vec::with_capacity(recs.len());
    let mut labels_rows: Vec<Vec<u32>> = Vec::new();
    let mut valid_rows: Vec<Vec<bool>> = Vec::new();

    for rec in recs {
        let crop = match window_s {
            Some(w) => crop_or_pad(&rec.recording, w, spec.hop, rng),
            None => Crop {
                wave: rec.recording.samples.clone(),
                pad_start: None,
                start_sample: 0,
            },
        };
        let mut wave = crop.wave.clone();
        if let Some(aug) = augment {
            dsp::augment_waveform(&mut wave, aug.config, rng);
        }
        let mut sg = dsp::compute_spectrogram(&wave, spec)?;
        if let Some(aug) = augment {
            dsp::augment_spectrogram(&mut sg, aug.config, spec, sr, rng);
        }
        let t_len = sg.dim().0;

        let valid: Vec<bool> = match crop.pad_start {
            None => vec![true; t_len],
            Some(p) => (0..t_len).map(|t| t * spec.hop < p).collect(),
        };
        if with_labels {
            let frame_offset = crop.start_sample / spec.hop;
            let full = &rec.frame_labels.labels;
            let row: Vec<u32> = (0..t_len)
                .map(|t| {
                    full.get(frame_offset + t)
                        .copied()
                        .unwrap_or(BACKGROUND_ID)
                })
                .collect();
            labels_rows.push(row);
        }
        valid_rows.push(valid);
        metas.push(BatchItemMeta {
            rec_id: rec.recording.id.clone(),
            crop_start_sample: crop.start_sample,
            pad_start: crop.pad_start,
        });
        spectrograms.push(sg);
    }

    let t_len = spectrograms[0].dim().0;
    if spectrograms.iter().any(|s| s.dim().0 != t_len) {
        return Err(Error::Shape("inconsistent frame counts in batch".into()));
    }
    let f_len = spec.freq_bins;
    let b = recs.len();
    let mut x = Array3::<f64>::zeros((b, t_len, f_len));
    for (i, sg) in spectrograms.into_iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), i).assign(&sg);
    }
    let mut valid = Array2::<bool>::from_elem((b, t_len), true);
    for (i, row) in valid_rows.into_iter().enumerate() {
        for (t, v) in row.into_iter().enumerate() {
            valid[[i, t]] = v;
        }
    }
    let y = if with_labels {
        let mut arr = Array2::<u32>::zeros((b, t_len));
        for (i, row) in labels_rows.into_iter().enumerate() {
            for (t, v) in row.into_iter().enumerate() {
                arr[[i, t]] = v;
            }
        }
        Some(arr)
    } else {
        None
    };

    Ok(Batch {
        x,
        y,
        valid,
        meta: metas,
    })
}
