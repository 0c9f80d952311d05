//! Supervised syllable detection: per-frame cross-entropy finetuning and
//! the linear-probing protocol (frozen backbone, no augmentation).

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{make_batch, AnnotatedRecording, BatchAugment, FrameLabels, Recording};
use crate::dsp::{AugmentConfig, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, HeadSpec, ModelConfig, ResMlpRnn};
use crate::nn::{softmax_frames, AdamW, GradBuf, LrSchedule};
use crate::ssl_osc::CE_EPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_window_s: f64,
    pub weight_decay: f64,
    pub lr: LrSchedule,
    pub augment: bool,
    /// Linear probing: train only the classifier head. Forces augmentation off.
    pub freeze_backbone: bool,
}

impl Default for SupervisedPlan {
    fn default() -> Self {
        SupervisedPlan {
            epochs: 300,
            batch_size: 8,
            crop_window_s: 10.0,
            weight_decay: 1e-3,
            lr: LrSchedule {
                start: 1e-6,
                peak: 1e-3,
                end: 1e-6,
                warmup_epochs: 30,
                constant_epochs: 0,
            },
            augment: true,
            freeze_backbone: false,
        }
    }
}

/// Mean negative log-likelihood over valid frames, from probabilities.
pub fn frame_ce(p: &Array3<f64>, y: &Array2<u32>, valid: &Array2<bool>) -> Result<f64> {
    let (b, t_len, c) = p.dim();
    if y.dim() != (b, t_len) || valid.dim() != (b, t_len) {
        return Err(Error::Shape("frame_ce: label/mask shape mismatch".into()));
    }
    let mut loss = 0.0;
    let mut n = 0usize;
    for bi in 0..b {
        for t in 0..t_len {
            if !valid[[bi, t]] {
                continue;
            }
            let label = y[[bi, t]] as usize;
            if label >= c {
                return Err(Error::Data(format!(
                    "label {label} out of range for {c} classes"
                )));
            }
            loss -= (p[[bi, t, label]] + CE_EPS).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("frame_ce: no valid frames".into()));
    }
    Ok(loss / n as f64)
}

/// Loss and gradient wrt logits, chaining through softmax (tau = 1) and the
/// epsilon guard.
pub fn frame_ce_with_grad(
    z: &Array3<f64>,
    y: &Array2<u32>,
    valid: &Array2<bool>,
) -> Result<(f64, Array3<f64>)> {
    let p = softmax_frames(z, 1.0);
    let loss = frame_ce(&p, y, valid)?;
    let (b, t_len, c) = p.dim();
    let n = valid.iter().filter(|v| **v).count() as f64;
    let mut g = Array3::<f64>::zeros((b, t_len, c));
    for bi in 0..b {
        for t in 0..t_len {
            if !valid[[bi, t]] {
                continue;
            }
            let label = y[[bi, t]] as usize;
            let py = p[[bi, t, label]];
            let w = py / (py + CE_EPS);
            for j in 0..c {
                let indicator = if j == label { 1.0 } else { 0.0 };
                g[[bi, t, j]] = w * (p[[bi, t, j]] - indicator) / n;
            }
        }
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, Serialize)]
pub struct SupervisedEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Train (or linearly probe) a classifier on the given recording ids.
/// `init` supplies a pretrained model whose backbone is copied in; the
/// classifier head is always freshly initialized.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    corpus: &[AnnotatedRecording],
    train_ids: &[String],
    num_classes: usize,
    model_cfg: &ModelConfig,
    plan: &SupervisedPlan,
    init: Option<&ResMlpRnn>,
    spec: &SpectrogramConfig,
    aug: &AugmentConfig,
    rng: &mut impl Rng,
    mut on_epoch: Option<&mut dyn FnMut(&SupervisedEpochLog, &ResMlpRnn)>,
) -> Result<(ResMlpRnn, Vec<SupervisedEpochLog>)> {
    let train: Vec<&AnnotatedRecording> = train_ids
        .iter()
        .map(|id| {
            corpus
                .iter()
                .find(|r| r.recording.id == *id)
                .ok_or_else(|| Error::Data(format!("train id {id} not in corpus")))
        })
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let max_label = train
        .iter()
        .flat_map(|r| r.frame_labels.labels.iter())
        .max()
        .copied()
        .unwrap_or(0);
    if max_label as usize >= num_classes {
        return Err(Error::Data(format!(
            "corpus label {max_label} exceeds classifier width {num_classes}"
        )));
    }

    let mut cfg = model_cfg.clone();
    cfg.head = HeadSpec::Classifier {
        classes: num_classes,
    };
    let mut model = build_model(&cfg, rng)?;
    if let Some(ssl) = init {
        model.load_backbone_from(ssl)?;
    }
    let mut opt = if plan.freeze_backbone {
        AdamW::with_trainable(&model.params, plan.weight_decay, |n| n.starts_with("head."))
    } else {
        AdamW::new(&model.params, plan.weight_decay)
    };
    // Probing trains only the linear classifier, without data augmentation.
    let augment_on = plan.augment && !plan.freeze_backbone;

    let mut logs = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let lr = plan.lr.lr(epoch, plan.epochs);
        let order = crate::ssl_mae::shuffled_indices(train.len(), rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(plan.batch_size) {
            let recs: Vec<&AnnotatedRecording> = chunk.iter().map(|i| train[*i]).collect();
            let augment = BatchAugment { config: aug };
            let batch = make_batch(
                &recs,
                Some(plan.crop_window_s),
                true,
                spec,
                if augment_on { Some(&augment) } else { None },
                rng,
            )?;
            let y = batch.y.as_ref().unwrap();
            let (z, trace) = model.forward(&batch.x, true, Some(rng))?;
            let (loss, g_z) = frame_ce_with_grad(&z, y, &batch.valid)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "supervised loss diverged at epoch {epoch}"
                )));
            }
            let mut grads = GradBuf::zeros_like(&model.params);
            model.backward(&batch.x, &trace, &g_z, &mut grads);
            opt.step(&mut model.params, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let log = SupervisedEpochLog {
            epoch,
            lr,
            loss: epoch_loss / batches.max(1) as f64,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&log, &model);
        }
        logs.push(log);
    }
    Ok((model, logs))
}

/// Full-length inference on one recording: per-frame argmax labels plus the
/// class probabilities (T, C).
pub fn predict_full(
    model: &ResMlpRnn,
    rec: &Recording,
    spec: &SpectrogramConfig,
) -> Result<(FrameLabels, Array2<f64>)> {
    let sg = crate::dsp::compute_spectrogram(&rec.samples, spec)?;
    let (t_len, f_len) = sg.dim();
    let mut x = Array3::<f64>::zeros((1, t_len, f_len));
    x.index_axis_mut(ndarray::Axis(0), 0).assign(&sg);
    let (z, _) = model.forward(&x, false, None)?;
    let p = softmax_frames(&z, 1.0);
    let c = p.dim().2;
    let mut labels = Vec::with_capacity(t_len);
    let mut probs = Array2::<f64>::zeros((t_len, c));
    for t in 0..t_len {
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for j in 0..c {
            probs[[t, j]] = p[[0, t, j]];
            if p[[0, t, j]] > best_p {
                best_p = p[[0, t, j]];
                best = j;
            }
        }
        labels.push(best as u32);
    }
    Ok((
        FrameLabels {
            labels,
            background_id: crate::dataio::BACKGROUND_ID,
        },
        probs,
    ))
}
