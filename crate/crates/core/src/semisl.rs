//! Semi-supervised post-training: the EMA teacher pseudo-labels the bird's
//! unlabeled recordings on clean crops; the student matches those labels on
//! augmented views wherever the teacher is confident, alongside the ordinary
//! supervised loss on labeled data.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{crop_or_pad, make_batch, AnnotatedRecording, BatchAugment};
use crate::dsp::{self, AugmentConfig, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::model::{ema_decay_schedule, ema_update, ResMlpRnn};
use crate::nn::{softmax_frames, AdamW, GradBuf, LrSchedule};
use crate::ssl_osc::{CE_EPS, EmaSchedule};
use crate::supervised::frame_ce_with_grad;

/// Denominator convention for the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMean {
    /// Average over frames passing the confidence gate (default).
    Gated,
    /// Average over all valid frames (scales the loss by the pass rate).
    AllValid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_window_s: f64,
    pub weight_decay: f64,
    pub lr: LrSchedule,
    pub confidence_threshold: f64,
    pub ema: EmaSchedule,
    pub consistency_mean: ConsistencyMean,
    /// Weights for (labeled CE, consistency); the published recipe combines
    /// them with unit weights.
    pub loss_weights: (f64, f64),
}

impl Default for SemiPlan {
    fn default() -> Self {
        SemiPlan {
            epochs: 30,
            batch_size: 8,
            crop_window_s: 10.0,
            weight_decay: 1e-3,
            lr: LrSchedule {
                start: 1e-7,
                peak: 1e-4,
                end: 1e-7,
                warmup_epochs: 3,
                constant_epochs: 0,
            },
            confidence_threshold: 0.95,
            ema: EmaSchedule {
                start: 0.995,
                end: 0.99998,
                ramp_fraction: 0.25,
            },
            consistency_mean: ConsistencyMean::Gated,
            loss_weights: (1.0, 1.0),
        }
    }
}

impl SemiPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config(
                "confidence threshold must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Teacher predictions on clean input: per-frame hard labels and their
/// probabilities.
pub fn pseudo_label(
    teacher: &ResMlpRnn,
    x_clean: &Array3<f64>,
) -> Result<(Array2<u32>, Array2<f64>)> {
    let (z, _) = teacher.forward(x_clean, false, None)?;
    let p = softmax_frames(&z, 1.0);
    let (b, t_len, c) = p.dim();
    let mut labels = Array2::<u32>::zeros((b, t_len));
    let mut conf = Array2::<f64>::zeros((b, t_len));
    for bi in 0..b {
        for t in 0..t_len {
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for j in 0..c {
                if p[[bi, t, j]] > best_p {
                    best_p = p[[bi, t, j]];
                    best = j;
                }
            }
            labels[[bi, t]] = best as u32;
            conf[[bi, t]] = best_p;
        }
    }
    Ok((labels, conf))
}

/// Consistency cross-entropy over frames with teacher confidence **above**
/// the threshold (and valid). Returns 0 when no frame qualifies.
pub fn consistency_loss(
    p_student: &Array3<f64>,
    pseudo: &Array2<u32>,
    confidence: &Array2<f64>,
    threshold: f64,
    valid: &Array2<bool>,
    mean: ConsistencyMean,
) -> f64 {
    let (b, t_len, _) = p_student.dim();
    let mut loss = 0.0;
    let mut gated = 0usize;
    let mut n_valid = 0usize;
    for bi in 0..b {
        for t in 0..t_len {
            if !valid[[bi, t]] {
                continue;
            }
            n_valid += 1;
            if confidence[[bi, t]] <= threshold {
                continue;
            }
            gated += 1;
            loss -= (p_student[[bi, t, pseudo[[bi, t]] as usize]] + CE_EPS).ln();
        }
    }
    let denom = match mean {
        ConsistencyMean::Gated => gated,
        ConsistencyMean::AllValid => n_valid,
    };
    if gated == 0 || denom == 0 {
        return 0.0;
    }
    loss / denom as f64
}

/// Consistency loss plus gradient wrt student logits.
pub fn consistency_with_grad(
    z_student: &Array3<f64>,
    pseudo: &Array2<u32>,
    confidence: &Array2<f64>,
    threshold: f64,
    valid: &Array2<bool>,
    mean: ConsistencyMean,
) -> (f64, Array3<f64>) {
    let p = softmax_frames(z_student, 1.0);
    let loss = consistency_loss(&p, pseudo, confidence, threshold, valid, mean);
    let (b, t_len, c) = p.dim();
    let mut g = Array3::<f64>::zeros((b, t_len, c));
    let gated = valid
        .indexed_iter()
        .filter(|((bi, t), v)| **v && confidence[[*bi, *t]] > threshold)
        .count();
    if gated == 0 {
        return (0.0, g);
    }
    let denom = match mean {
        ConsistencyMean::Gated => gated,
        ConsistencyMean::AllValid => valid.iter().filter(|v| **v).count(),
    } as f64;
    for bi in 0..b {
        for t in 0..t_len {
            if !valid[[bi, t]] || confidence[[bi, t]] <= threshold {
                continue;
            }
            let label = pseudo[[bi, t]] as usize;
            let py = p[[bi, t, label]];
            let w = py / (py + CE_EPS);
            for j in 0..c {
                let indicator = if j == label { 1.0 } else { 0.0 };
                g[[bi, t, j]] = w * (p[[bi, t, j]] - indicator) / denom;
            }
        }
    }
    (loss, g)
}

/// Clean/augmented view pair over the same crops of unlabeled recordings.
pub struct SemiViews {
    pub clean: Array3<f64>,
    pub augmented: Array3<f64>,
    pub valid: Array2<bool>,
}

pub fn build_semi_views(
    recs: &[&AnnotatedRecording],
    window_s: f64,
    spec: &SpectrogramConfig,
    aug_base: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<SemiViews> {
    if recs.is_empty() {
        return Err(Error::Data("empty unlabeled batch".into()));
    }
    let aug = AugmentConfig {
        gain: true,
        color: true,
        bernoulli: true,
        tfmask: false,
        ..aug_base.clone()
    };
    let sr = recs[0].recording.sample_rate;
    let mut cleans = Vec::with_capacity(recs.len());
    let mut augs = Vec::with_capacity(recs.len());
    let mut valid_rows = Vec::with_capacity(recs.len());
    for rec in recs {
        let crop = crop_or_pad(&rec.recording, window_s, spec.hop, rng);
        let clean = dsp::compute_spectrogram(&crop.wave, spec)?;
        let mut wave = crop.wave.clone();
        dsp::augment_waveform(&mut wave, &aug, rng);
        let mut sg = dsp::compute_spectrogram(&wave, spec)?;
        dsp::augment_spectrogram(&mut sg, &aug, spec, sr, rng);
        let t_len = clean.dim().0;
        let valid: Vec<bool> = match crop.pad_start {
            None => vec![true; t_len],
            Some(p) => (0..t_len).map(|t| t * spec.hop < p).collect(),
        };
        cleans.push(clean);
        augs.push(sg);
        valid_rows.push(valid);
    }
    let t_len = cleans[0].dim().0;
    let b = recs.len();
    let mut clean = Array3::<f64>::zeros((b, t_len, spec.freq_bins));
    let mut augmented = Array3::<f64>::zeros((b, t_len, spec.freq_bins));
    let mut valid = Array2::<bool>::from_elem((b, t_len), true);
    for i in 0..b {
        clean.index_axis_mut(Axis(0), i).assign(&cleans[i]);
        augmented.index_axis_mut(Axis(0), i).assign(&augs[i]);
        for (t, v) in valid_rows[i].iter().enumerate() {
            valid[[i, t]] = *v;
        }
    }
    Ok(SemiViews {
        clean,
        augmented,
        valid,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SemiEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub labeled_ce: f64,
    pub consistency: f64,
    /// Fraction of unlabeled frames passing the confidence gate.
    pub gate_pass_rate: f64,
}

/// Post-train a supervised checkpoint. Per step: one labeled batch (CE) and
/// one unlabeled batch (gated consistency), summed with the configured
/// weights; the teacher starts as an exact copy of the student and follows
/// by EMA with the ramped decay.
#[allow(clippy::too_many_arguments)]
pub fn posttrain(
    corpus: &[AnnotatedRecording],
    labeled_ids: &[String],
    unlabeled_ids: &[String],
    start: &ResMlpRnn,
    plan: &SemiPlan,
    spec: &SpectrogramConfig,
    aug: &AugmentConfig,
    rng: &mut impl Rng,
    mut on_epoch: Option<&mut dyn FnMut(&SemiEpochLog, &ResMlpRnn)>,
) -> Result<(ResMlpRnn, Vec<SemiEpochLog>)> {
    plan.validate()?;
    if unlabeled_ids.is_empty() {
        return Err(Error::Data("empty unlabeled set".into()));
    }
    let lookup = |ids: &[String]| -> Result<Vec<&AnnotatedRecording>> {
        ids.iter()
            .map(|id| {
                corpus
                    .iter()
                    .find(|r| r.recording.id == *id)
                    .ok_or_else(|| Error::Data(format!("recording {id} not in corpus")))
            })
            .collect()
    };
    let labeled = lookup(labeled_ids)?;
    let unlabeled = lookup(unlabeled_ids)?;
    if labeled.is_empty() {
        return Err(Error::Data("empty labeled set".into()));
    }

    let mut student = start.clone();
    let mut teacher = student.clone();
    let mut opt = AdamW::new(&student.params, plan.weight_decay);

    let batches_per_epoch = labeled.len().div_ceil(plan.batch_size);
    let total_steps = (plan.epochs * batches_per_epoch) as u64;
    let mut step = 0u64;
    let mut unlabeled_order: Vec<usize> = Vec::new();
    let mut unlabeled_pos = 0usize;

    let mut logs = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let lr = plan.lr.lr(epoch, plan.epochs);
        let order = crate::ssl_mae::shuffled_indices(labeled.len(), rng);
        let mut ce_sum = 0.0;
        let mut cons_sum = 0.0;
        let mut gate_pass = 0.0;
        let mut lambda = plan.ema.start;
        let mut batches = 0;
        for chunk in order.chunks(plan.batch_size) {
            // Labeled branch (augmented input, ordinary CE).
            let recs: Vec<&AnnotatedRecording> = chunk.iter().map(|i| labeled[*i]).collect();
            let augment = BatchAugment { config: aug };
            let lb = make_batch(
                &recs,
                Some(plan.crop_window_s),
                true,
                spec,
                Some(&augment),
                rng,
            )?;
            let (z_l, tr_l) = student.forward(&lb.x, true, Some(rng))?;
            let (ce, mut g_l) = frame_ce_with_grad(&z_l, lb.y.as_ref().unwrap(), &lb.valid)?;

            // Unlabeled branch: teacher on clean crops, student on augmented.
            let mut ub_refs: Vec<&AnnotatedRecording> = Vec::with_capacity(plan.batch_size);
            for _ in 0..plan.batch_size.min(unlabeled.len()) {
                if unlabeled_pos >= unlabeled_order.len() {
                    unlabeled_order = crate::ssl_mae::shuffled_indices(unlabeled.len(), rng);
                    unlabeled_pos = 0;
                }
                ub_refs.push(unlabeled[unlabeled_order[unlabeled_pos]]);
                unlabeled_pos += 1;
            }
            let views = build_semi_views(&ub_refs, plan.crop_window_s, spec, aug, rng)?;
            let (pseudo, conf) = pseudo_label(&teacher, &views.clean)?;
            let (z_u, tr_u) = student.forward(&views.augmented, true, Some(rng))?;
            let (cons, mut g_u) = consistency_with_grad(
                &z_u,
                &pseudo,
                &conf,
                plan.confidence_threshold,
                &views.valid,
                plan.consistency_mean,
            );
            if !(ce.is_finite() && cons.is_finite()) {
                return Err(Error::Train(format!(
                    "post-training loss diverged at epoch {epoch}"
                )));
            }

            let (w_ce, w_u) = plan.loss_weights;
            g_l.mapv_inplace(|v| v * w_ce);
            g_u.mapv_inplace(|v| v * w_u);
            let mut grads = GradBuf::zeros_like(&student.params);
            student.backward(&lb.x, &tr_l, &g_l, &mut grads);
            student.backward(&views.augmented, &tr_u, &g_u, &mut grads);
            opt.step(&mut student.params, &grads, lr);

            lambda = ema_decay_schedule(
                step,
                total_steps,
                plan.ema.start,
                plan.ema.end,
                plan.ema.ramp_fraction,
            )?;
            ema_update(&mut teacher, &student, lambda)?;

            let n_valid = views.valid.iter().filter(|v| **v).count();
            let n_pass = views
                .valid
                .indexed_iter()
                .filter(|((bi, t), v)| **v && conf[[*bi, *t]] > plan.confidence_threshold)
                .count();
            gate_pass += n_pass as f64 / n_valid.max(1) as f64;
            ce_sum += ce;
            cons_sum += cons;
            step += 1;
            batches += 1;
        }
        let log = SemiEpochLog {
            epoch,
            lr,
            lambda,
            labeled_ce: ce_sum / batches as f64,
            consistency: cons_sum / batches as f64,
            gate_pass_rate: gate_pass / batches as f64,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&log, &student);
        }
        logs.push(log);
    }
    Ok((student, logs))
}
