//! Synthetic birdsong corpus generator.
//!
//! Songs are sampled from a Markov grammar over harmonic-stack syllable
//! templates (AM/FM plus an attack/release envelope), separated by short
//! gaps, with low-level background noise. Annotations are exact by
//! construction, which makes the corpus usable as ground truth for every
//! training and analysis path at desk scale.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    build_split, write_annotations, write_wav_16bit, AnnotatedRecording, IntervalAnnotation,
    Recording, SplitSpec, PAPER_SAMPLE_RATE,
};
use crate::dsp::SpectrogramConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyllableTemplate {
    pub label: u32,
    pub f0_hz: f64,
    pub harmonics: usize,
    /// Duration mean/std in milliseconds.
    pub duration_ms: (f64, f64),
    /// Amplitude-modulation rate in Hz (0 = none).
    pub am_rate_hz: f64,
    /// Linear frequency sweep across the syllable, in Hz (signed).
    pub fm_span_hz: f64,
}

impl SyllableTemplate {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.f0_hz * self.harmonics as f64 >= nyquist {
            return Err(Error::Config(format!(
                "template {}: harmonics reach past Nyquist",
                self.label
            )));
        }
        if self.duration_ms.0 <= 20.0 {
            return Err(Error::Config(format!(
                "template {}: mean duration must exceed 20 ms",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    /// Row-stochastic transition matrix over syllable classes; index i maps
    /// to label i+1.
    pub transition: Vec<Vec<f64>>,
    /// Song-initial distribution over classes.
    pub initial: Vec<f64>,
    /// Inter-syllable gap mean/std in milliseconds.
    pub gap_ms: (f64, f64),
    /// Syllables per song, inclusive range.
    pub song_len: (usize, usize),
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.transition.len();
        if self.initial.len() != c {
            return Err(Error::Config("grammar initial/transition size mismatch".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Config("grammar transition matrix not square".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::Config(format!(
                    "grammar transition row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        let isum: f64 = self.initial.iter().sum();
        if (isum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("grammar initial distribution must sum to 1".into()));
        }
        if self.song_len.0 == 0 || self.song_len.0 > self.song_len.1 {
            return Err(Error::Config("invalid song length range".into()));
        }
        Ok(())
    }

    pub fn transition_matrix(&self) -> Array2<f64> {
        let c = self.transition.len();
        Array2::from_shape_fn((c, c), |(i, j)| self.transition[i][j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_recordings: usize,
    pub classes: usize,
    pub sample_rate: u32,
    /// Recording length range in seconds (silence-padded around songs).
    pub rec_len_s: (f64, f64),
    /// Background white-noise RMS.
    pub noise_rms: f64,
    /// Additional train recordings past the few-shot cover, per tier.
    pub plus1_n: usize,
    pub plus2_n: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_recordings: 40,
            classes: 8,
            sample_rate: PAPER_SAMPLE_RATE,
            rec_len_s: (5.0, 15.0),
            noise_rms: 0.004,
            plus1_n: 6,
            plus2_n: 6,
        }
    }
}

/// Template bank for the default desk corpus: distinct fundamentals with two
/// confusable pairs that differ only in modulation, plus one long low rare
/// syllable (label = classes).
pub fn default_templates(classes: usize) -> Vec<SyllableTemplate> {
    let base = [
        (2000.0, 3, (90.0, 15.0), 0.0, 0.0),
        (3200.0, 2, (70.0, 12.0), 25.0, 0.0),
        (2000.0, 3, (90.0, 15.0), 0.0, 800.0),
        (4500.0, 4, (120.0, 20.0), 0.0, -600.0),
        (1200.0, 5, (150.0, 25.0), 15.0, 0.0),
        (3200.0, 2, (70.0, 12.0), 0.0, 0.0),
        (5500.0, 2, (60.0, 10.0), 40.0, 400.0),
        (800.0, 6, (180.0, 30.0), 10.0, -300.0),
    ];
    (0..classes)
        .map(|i| {
            let (f0, h, dur, am, fm) = base[i % base.len()];
            // Past the bank size, shift fundamentals to stay distinct.
            let f0 = f0 * (1.0 + 0.13 * (i / base.len()) as f64);
            SyllableTemplate {
                label: (i + 1) as u32,
                f0_hz: f0,
                harmonics: h,
                duration_ms: dur,
                am_rate_hz: am,
                fm_span_hz: fm,
            }
        })
        .collect()
}

/// Block-structured grammar: three sub-repertoires with rare cross-block
/// jumps; the last class is reachable only from the last block with low
/// probability, planting a rare class.
pub fn default_grammar(classes: usize) -> GrammarSpec {
    assert!(classes >= 4, "default grammar needs at least 4 classes");
    let c = classes;
    let rare = c - 1; // 0-based index of the rare class
    let block_of = |i: usize| -> usize {
        if i == rare {
            2
        } else {
            (3 * i) / (c - 1) // 0, 1, or 2
        }
    };
    let mut t = vec![vec![0.0; c]; c];
    for i in 0..c {
        let bi = block_of(i);
        let mut row = vec![0.0; c];
        if i == rare {
            // Rare class returns to its block's common members.
            for (j, r) in row.iter_mut().enumerate() {
                if j != rare && block_of(j) == bi {
                    *r = 1.0;
                }
            }
        } else {
            for (j, r) in row.iter_mut().enumerate() {
                if j == rare {
                    // Only the penultimate class leads to the rare one.
                    if i == rare - 1 {
                        *r = 0.05;
                    }
                } else if block_of(j) == bi {
                    *r = if j == i { 0.5 } else { 2.0 };
                } else {
                    *r = 0.05; // rare cross-block leak
                }
            }
        }
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
        t[i] = row;
    }
    // Songs start at the first member of each block.
    let mut initial = vec![0.0; c];
    let mut seen_blocks = BTreeSet::new();
    for i in 0..c {
        if i != rare && seen_blocks.insert(block_of(i)) {
            initial[i] = 1.0;
        }
    }
    let isum: f64 = initial.iter().sum();
    for v in initial.iter_mut() {
        *v /= isum;
    }
    GrammarSpec {
        transition: t,
        initial,
        gap_ms: (70.0, 20.0),
        song_len: (10, 24),
    }
}

fn sample_categorical(probs: &[f64], rng: &mut (impl Rng + ?Sized)) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_gauss(mean: f64, std: f64, rng: &mut (impl Rng + ?Sized)) -> f64 {
    mean + std * rng.sample::<f64, _>(StandardNormal)
}

/// Render one syllable waveform: harmonic stack with linear FM, optional AM,
/// and a raised-cosine attack/release envelope.
fn render_syllable(
    tpl: &SyllableTemplate,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut (impl Rng + ?Sized),
) -> Vec<f64> {
    let n = (duration_s * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let edge = (0.005 * sr) as usize; // 5 ms attack/release
    let amp_jitter = 1.0 + 0.15 * (rng.gen::<f64>() - 0.5);
    let mut out = vec![0.0; n];
    let harm_norm: f64 = (1..=tpl.harmonics).map(|h| 1.0 / h as f64).sum();
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let frac = t / duration_s;
        // Frequency sweeps f0 +- fm_span/2 across the syllable; phase is the
        // integral of the instantaneous frequency.
        let phase0 = tpl.f0_hz * t + tpl.fm_span_hz * t * (frac - 1.0) / 2.0;
        let mut s = 0.0;
        for h in 1..=tpl.harmonics {
            s += (2.0 * std::f64::consts::PI * h as f64 * phase0).sin() / h as f64;
        }
        s /= harm_norm;
        let mut env = 1.0;
        if i < edge {
            env *= 0.5 * (1.0 - (std::f64::consts::PI * (edge - i) as f64 / edge as f64).cos());
        }
        if n - 1 - i < edge {
            env *= 0.5
                * (1.0 - (std::f64::consts::PI * (edge - (n - 1 - i)) as f64 / edge as f64).cos());
        }
        if tpl.am_rate_hz > 0.0 {
            env *= 0.7 + 0.3 * (2.0 * std::f64::consts::PI * tpl.am_rate_hz * t).cos();
        }
        *o = 0.45 * amp_jitter * env * s;
    }
    out
}

/// Sample a label chain from the grammar.
fn sample_chain(grammar: &GrammarSpec, rng: &mut (impl Rng + ?Sized)) -> Vec<usize> {
    let len = rng.gen_range(grammar.song_len.0..=grammar.song_len.1);
    let mut chain = Vec::with_capacity(len);
    let mut state = sample_categorical(&grammar.initial, rng);
    chain.push(state);
    for _ in 1..len {
        state = sample_categorical(&grammar.transition[state], rng);
        chain.push(state);
    }
    chain
}

/// Generate one annotated recording containing one or more songs.
pub fn gen_song(
    id: &str,
    templates: &[SyllableTemplate],
    grammar: &GrammarSpec,
    cfg: &SynthConfig,
    spec: &SpectrogramConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AnnotatedRecording> {
    gen_song_with_chain(id, templates, grammar, cfg, spec, None, rng)
}

fn gen_song_with_chain(
    id: &str,
    templates: &[SyllableTemplate],
    grammar: &GrammarSpec,
    cfg: &SynthConfig,
    spec: &SpectrogramConfig,
    forced_chain: Option<&[usize]>,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AnnotatedRecording> {
    grammar.validate()?;
    for t in templates {
        t.validate(cfg.sample_rate)?;
    }
    let sr = cfg.sample_rate as f64;
    let target_len_s = rng.gen_range(cfg.rec_len_s.0..cfg.rec_len_s.1);
    let mut samples: Vec<f64> = Vec::with_capacity((target_len_s * sr) as usize);
    let mut annotations = Vec::new();

    let lead = rng.gen_range(0.3..0.8);
    samples.resize((lead * sr) as usize, 0.0);

    let mut first_song = true;
    while first_song || samples.len() as f64 / sr < target_len_s - 3.0 {
        let chain = match (first_song, forced_chain) {
            (true, Some(c)) => c.to_vec(),
            _ => sample_chain(grammar, rng),
        };
        first_song = false;
        for (k, class_idx) in chain.iter().enumerate() {
            let tpl = &templates[*class_idx];
            let dur_ms = sample_gauss(tpl.duration_ms.0, tpl.duration_ms.1, rng)
                .max(25.0);
            let dur_s = dur_ms / 1000.0;
            let onset_s = samples.len() as f64 / sr;
            let syl = render_syllable(tpl, dur_s, cfg.sample_rate, rng);
            samples.extend_from_slice(&syl);
            annotations.push(IntervalAnnotation {
                onset_s,
                offset_s: samples.len() as f64 / sr,
                label: tpl.label,
            });
            if k + 1 < chain.len() {
                let gap_ms = sample_gauss(grammar.gap_ms.0, grammar.gap_ms.1, rng).max(20.0);
                samples.resize(samples.len() + (gap_ms / 1000.0 * sr) as usize, 0.0);
            }
        }
        // Inter-song silence, long enough for gap-aware chain breaking.
        let pause = rng.gen_range(0.8..1.6);
        samples.resize(samples.len() + (pause * sr) as usize, 0.0);
    }
    let trail = rng.gen_range(0.2..0.6);
    samples.resize(samples.len() + (trail * sr) as usize, 0.0);

    for v in samples.iter_mut() {
        *v += cfg.noise_rms * rng.sample::<f64, _>(StandardNormal);
    }
    let peak = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 1.0 {
        for v in samples.iter_mut() {
            *v /= peak * 1.01;
        }
    }

    AnnotatedRecording::new(
        Recording {
            id: id.to_string(),
            samples,
            sample_rate: cfg.sample_rate,
        },
        annotations,
        spec,
    )
}

/// Generate the full corpus plus its split. Guarantees every class occurs at
/// least once by forcing missing classes into the final recordings.
pub fn gen_corpus(
    cfg: &SynthConfig,
    spec: &SpectrogramConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(Vec<AnnotatedRecording>, SplitSpec)> {
    let templates = default_templates(cfg.classes);
    let grammar = default_grammar(cfg.classes);
    let mut corpus = Vec::with_capacity(cfg.n_recordings);
    for i in 0..cfg.n_recordings {
        let id = format!("syn{i:03}");
        corpus.push(gen_song(&id, &templates, &grammar, cfg, spec, rng)?);
    }
    // Coverage repair: force any absent class into the tail recordings.
    let present: BTreeSet<u32> = corpus.iter().flat_map(|r| r.classes()).collect();
    let missing: Vec<usize> = (0..cfg.classes)
        .filter(|i| !present.contains(&((i + 1) as u32)))
        .collect();
    for (k, class_idx) in missing.into_iter().enumerate() {
        let slot = cfg.n_recordings - 1 - k;
        let mut chain = sample_chain(&grammar, rng);
        let pos = chain.len() / 2;
        chain[pos] = class_idx;
        let id = format!("syn{slot:03}");
        corpus[slot] =
            gen_song_with_chain(&id, &templates, &grammar, cfg, spec, Some(&chain), rng)?;
    }
    let split = build_split(&corpus, "synth", cfg.plus1_n, cfg.plus2_n, rng)?;
    Ok((corpus, split))
}

/// Write WAVs, annotation CSVs, and the split manifest to a directory.
pub fn write_corpus(
    dir: &Path,
    corpus: &[AnnotatedRecording],
    split: &SplitSpec,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for rec in corpus {
        let wav = dir.join(format!("{}.wav", rec.recording.id));
        write_wav_16bit(&wav, &rec.recording.samples, rec.recording.sample_rate)?;
        let csv = dir.join(format!("{}.csv", rec.recording.id));
        write_annotations(&csv, &rec.annotations)?;
    }
    split.save(&dir.join("split.json"))
}

/// Empirical bigram transition counts from annotations, breaking chains at
/// gaps longer than `break_gap_ms`. Used as the generator-side oracle.
pub fn empirical_transitions(
    corpus: &[AnnotatedRecording],
    classes: usize,
    break_gap_ms: f64,
) -> Array2<f64> {
    let mut counts = Array2::<f64>::zeros((classes, classes));
    for rec in corpus {
        for w in rec.annotations.windows(2) {
            let gap_ms = (w[1].onset_s - w[0].offset_s) * 1000.0;
            if gap_ms > break_gap_ms {
                continue;
            }
            counts[[(w[0].label - 1) as usize, (w[1].label - 1) as usize]] += 1.0;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{few_shot_select, frames_from_intervals};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_recordings: 12,
            rec_len_s: (4.0, 8.0),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = small_cfg();
        let spec = SpectrogramConfig::default();
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gen_song("s", &default_templates(8), &default_grammar(8), &cfg, &spec, &mut rng)
                .unwrap()
        };
        let a = gen(5);
        let b = gen(5);
        assert_eq!(a.recording.samples, b.recording.samples);
        assert_eq!(a.annotations, b.annotations);
        let c = gen(6);
        assert_ne!(a.recording.samples, c.recording.samples);
    }

    #[test]
    fn intervals_sane_and_within_duration() {
        let cfg = small_cfg();
        let spec = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rec = gen_song("s", &default_templates(8), &default_grammar(8), &cfg, &spec, &mut rng)
            .unwrap();
        let dur = rec.recording.duration_s();
        let mut prev = 0.0;
        assert!(!rec.annotations.is_empty());
        for iv in &rec.annotations {
            assert!(iv.onset_s >= prev);
            assert!(iv.onset_s < iv.offset_s);
            assert!(iv.offset_s <= dur);
            prev = iv.offset_s;
        }
    }

    #[test]
    fn every_syllable_recovered_by_frame_labels() {
        let cfg = small_cfg();
        let spec = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rec = gen_song("s", &default_templates(8), &default_grammar(8), &cfg, &spec, &mut rng)
            .unwrap();
        let t_len = spec.num_frames(rec.recording.samples.len());
        let fl = frames_from_intervals(&rec.annotations, t_len, spec.hop_s(44_100)).unwrap();
        for iv in &rec.annotations {
            let has_frame = fl
                .labels
                .iter()
                .enumerate()
                .any(|(t, l)| {
                    *l == iv.label && {
                        let c = t as f64 * spec.hop_s(44_100);
                        iv.onset_s <= c && c < iv.offset_s
                    }
                });
            assert!(has_frame, "syllable at {} lost", iv.onset_s);
        }
    }

    #[test]
    fn audio_peak_bounded_and_rate_correct() {
        let cfg = small_cfg();
        let spec = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = gen_song("s", &default_templates(8), &default_grammar(8), &cfg, &spec, &mut rng)
            .unwrap();
        assert_eq!(rec.recording.sample_rate, 44_100);
        assert!(rec
            .recording
            .samples
            .iter()
            .all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn spectral_peaks_at_template_harmonics() {
        // Pure template without FM; check the strongest bins line up with
        // the harmonic stack within one bin.
        let tpl = SyllableTemplate {
            label: 1,
            f0_hz: 2000.0,
            harmonics: 3,
            duration_ms: (200.0, 0.0),
            am_rate_hz: 0.0,
            fm_span_hz: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wave = render_syllable(&tpl, 0.2, 44_100, &mut rng);
        let spec = SpectrogramConfig::default();
        let sg = crate::dsp::compute_spectrogram(&wave, &spec).unwrap();
        let bin_hz = spec.bin_hz(44_100);
        let mid = sg.dim().0 / 2;
        let row = sg.row(mid);
        for h in 1..=3usize {
            let expect = (2000.0 * h as f64 / bin_hz).round() as usize;
            // local maximum within +-1 bin of the harmonic
            let local_best = (expect.saturating_sub(2)..=expect + 2)
                .max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap())
                .unwrap();
            assert!(
                (local_best as i64 - expect as i64).abs() <= 1,
                "harmonic {h}: bin {local_best} vs {expect}"
            );
            // and it should actually carry energy
            assert!(row[expect] > 0.5, "harmonic {h} weak: {}", row[expect]);
        }
    }

    #[test]
    fn corpus_covers_all_classes_and_plants_rare_one() {
        let cfg = SynthConfig::default();
        let spec = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (corpus, split) = gen_corpus(&cfg, &spec, &mut rng).unwrap();
        assert_eq!(corpus.len(), 40);
        split.validate(&corpus).unwrap();
        let few = few_shot_select(&corpus).unwrap();
        assert_eq!(few, split.few_shot_ids);

        // Token bookkeeping: the planted rare class stays under ~1%.
        let mut counts = vec![0usize; cfg.classes + 1];
        for r in &corpus {
            for a in &r.annotations {
                counts[a.label as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let rare = counts[cfg.classes];
        assert!(rare >= 1, "rare class absent");
        assert!(
            (rare as f64) / (total as f64) <= 0.015,
            "rare fraction {} of {total}",
            rare
        );
        // All other classes well represented.
        for (c, n) in counts.iter().enumerate().skip(1) {
            assert!(*n >= 1, "class {c} missing");
        }
    }

    #[test]
    fn empirical_bigrams_match_grammar() {
        let cfg = SynthConfig {
            n_recordings: 60,
            ..SynthConfig::default()
        };
        let spec = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (corpus, _) = gen_corpus(&cfg, &spec, &mut rng).unwrap();
        let grammar = default_grammar(cfg.classes);
        let counts = empirical_transitions(&corpus, cfg.classes, 500.0);
        let truth = grammar.transition_matrix();
        let mut checked = 0;
        for i in 0..cfg.classes {
            let row_n: f64 = counts.row(i).sum();
            if row_n < 30.0 {
                continue;
            }
            checked += 1;
            let tv: f64 = (0..cfg.classes)
                .map(|j| (counts[[i, j]] / row_n - truth[[i, j]]).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.1, "row {i}: tv {tv}");
        }
        assert!(checked >= 4, "only {checked} rows had enough observations");
    }

    #[test]
    fn corpus_write_round_trip() {
        let cfg = SynthConfig {
            n_recordings: 4,
            rec_len_s: (4.0, 6.0),
            ..SynthConfig::default()
        };
        let spec = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (corpus, split) = gen_corpus(&cfg, &spec, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus, &split).unwrap();
        let loaded = crate::dataio::load_corpus(dir.path(), &spec, false).unwrap();
        assert_eq!(loaded.len(), corpus.len());
        for (a, b) in loaded.iter().zip(corpus.iter()) {
            assert_eq!(a.recording.id, b.recording.id);
            assert_eq!(a.annotations.len(), b.annotations.len());
            // 16-bit quantization only.
            let max_err = a
                .recording
                .samples
                .iter()
                .zip(b.recording.samples.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-4);
        }
        let split2 = SplitSpec::load(&dir.path().join("split.json")).unwrap();
        assert_eq!(split, split2);
    }
}
