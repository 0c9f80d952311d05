//! Masked-prediction pretraining on spectrograms.
//!
//! Views are built by augmenting the cropped waveform (gain + color noise)
//! and zeroing one contiguous frame run per 200-frame block. The model
//! reconstructs the clean spectrogram of the same crop; the loss is the mean
//! squared error over valid frames and all bins.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{crop_or_pad, AnnotatedRecording, BatchItemMeta};
use crate::dsp::{self, AugmentConfig, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, HeadSpec, ModelConfig, ResMlpRnn};
use crate::nn::{AdamW, GradBuf, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeMaskSpec {
    /// Frames per masking block.
    pub block_len: usize,
    /// The run start is drawn from the first `start_range` frames of a block.
    pub start_range: usize,
    /// Inclusive run-length range in frames.
    pub mask_len: (usize, usize),
}

impl Default for MaeMaskSpec {
    fn default() -> Self {
        MaeMaskSpec {
            block_len: 200,
            start_range: 100,
            mask_len: (50, 200),
        }
    }
}

/// One masked run draw: (block start, offset within block, pre-clipping length).
pub type MaskDraw = (usize, usize, usize);

#[derive(Debug, Clone)]
pub struct MaskedView {
    pub x: Array3<f64>,
    /// True on zeroed frames.
    pub mask: Array2<bool>,
    /// Raw draws per (item, block), before clipping at block/spectrogram end.
    pub draws: Vec<Vec<MaskDraw>>,
}

/// Zero one contiguous frame run per 200-frame block of every item.
pub fn make_masked_view(
    x: &Array3<f64>,
    spec: &MaeMaskSpec,
    rng: &mut (impl Rng + ?Sized),
) -> MaskedView {
    let (b, t_len, _f) = x.dim();
    let mut out = x.clone();
    let mut mask = Array2::<bool>::from_elem((b, t_len), false);
    let mut draws = Vec::with_capacity(b);
    for bi in 0..b {
        let mut item_draws = Vec::new();
        let mut block_start = 0;
        while block_start < t_len {
            let s0 = rng.gen_range(0..spec.start_range);
            let len = rng.gen_range(spec.mask_len.0..=spec.mask_len.1);
            item_draws.push((block_start, s0, len));
            let from = (block_start + s0).min(t_len);
            let to = (block_start + s0 + len).min(t_len);
            if from < to {
                out.slice_mut(s![bi, from..to, ..]).fill(0.0);
                for t in from..to {
                    mask[[bi, t]] = true;
                }
            }
            block_start += spec.block_len;
        }
        draws.push(item_draws);
    }
    MaskedView {
        x: out,
        mask,
        draws,
    }
}

/// Mean squared error over valid frames and all bins (masked and unmasked
/// frames both contribute).
pub fn mae_loss(z: &Array3<f64>, x: &Array3<f64>, valid: &Array2<bool>) -> Result<f64> {
    Ok(mae_loss_with_grad(z, x, valid)?.0)
}

/// Loss plus its gradient wrt the prediction `z`.
pub fn mae_loss_with_grad(
    z: &Array3<f64>,
    x: &Array3<f64>,
    valid: &Array2<bool>,
) -> Result<(f64, Array3<f64>)> {
    if z.dim() != x.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            z.dim(),
            x.dim()
        )));
    }
    let (b, t_len, f_len) = z.dim();
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Err(Error::Data("mae loss: no valid frames".into()));
    }
    let denom = (n_valid * f_len) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((b, t_len, f_len));
    for bi in 0..b {
        for t in 0..t_len {
            if !valid[[bi, t]] {
                continue;
            }
            for fi in 0..f_len {
                let d = z[[bi, t, fi]] - x[[bi, t, fi]];
                loss += d * d;
                grad[[bi, t, fi]] = 2.0 * d / denom;
            }
        }
    }
    Ok((loss / denom, grad))
}

/// One training batch for masked prediction.
pub struct MaeBatch {
    pub clean: Array3<f64>,
    pub view: MaskedView,
    pub valid: Array2<bool>,
    pub meta: Vec<BatchItemMeta>,
}

/// Crop each recording once, then derive the clean target and the augmented,
/// masked input from the same crop.
pub fn build_mae_batch(
    recs: &[&AnnotatedRecording],
    window_s: f64,
    spec: &SpectrogramConfig,
    aug: &AugmentConfig,
    mask_spec: &MaeMaskSpec,
    rng: &mut (impl Rng + ?Sized),
) -> Result<MaeBatch> {
    if recs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut cleans = Vec::with_capacity(recs.len());
    let mut augs = Vec::with_capacity(recs.len());
    let mut valid_rows = Vec::with_capacity(recs.len());
    let mut metas = Vec::with_capacity(recs.len());
    for rec in recs {
        let crop = crop_or_pad(&rec.recording, window_s, spec.hop, rng);
        let clean = dsp::compute_spectrogram(&crop.wave, spec)?;
        let mut wave = crop.wave.clone();
        dsp::augment_waveform(&mut wave, aug, rng);
        let augmented = dsp::compute_spectrogram(&wave, spec)?;
        let t_len = clean.dim().0;
        let valid: Vec<bool> = match crop.pad_start {
            None => vec![true; t_len],
            Some(p) => (0..t_len).map(|t| t * spec.hop < p).collect(),
        };
        metas.push(BatchItemMeta {
            rec_id: rec.recording.id.clone(),
            crop_start_sample: crop.start_sample,
            pad_start: crop.pad_start,
        });
        cleans.push(clean);
        augs.push(augmented);
        valid_rows.push(valid);
    }
    let t_len = cleans[0].dim().0;
    let f_len = spec.freq_bins;
    let b = recs.len();
    let mut clean = Array3::<f64>::zeros((b, t_len, f_len));
    let mut augmented = Array3::<f64>::zeros((b, t_len, f_len));
    let mut valid = Array2::<bool>::from_elem((b, t_len), true);
    for i in 0..b {
        clean.index_axis_mut(Axis(0), i).assign(&cleans[i]);
        augmented.index_axis_mut(Axis(0), i).assign(&augs[i]);
        for (t, v) in valid_rows[i].iter().enumerate() {
            valid[[i, t]] = *v;
        }
    }
    let view = make_masked_view(&augmented, mask_spec, rng);
    Ok(MaeBatch {
        clean,
        view,
        valid,
        meta: metas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaePlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_window_s: f64,
    pub lr: LrSchedule,
    pub mask: MaeMaskSpec,
}

impl Default for MaePlan {
    fn default() -> Self {
        MaePlan {
            epochs: 200,
            batch_size: 16,
            crop_window_s: 3.0,
            lr: LrSchedule {
                start: 1e-5,
                peak: 1e-3,
                end: 1e-5,
                warmup_epochs: 20,
                constant_epochs: 10,
            },
            mask: MaeMaskSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MaeEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Pretrain a masked-prediction model on the pooled unlabeled corpus with
/// the Adam optimizer. Augmentation: gain + color noise.
pub fn pretrain_mae(
    corpus: &[AnnotatedRecording],
    model_cfg: &ModelConfig,
    plan: &MaePlan,
    spec: &SpectrogramConfig,
    aug_base: &AugmentConfig,
    rng: &mut impl Rng,
    mut on_epoch: Option<&mut dyn FnMut(&MaeEpochLog, &ResMlpRnn)>,
) -> Result<(ResMlpRnn, Vec<MaeEpochLog>)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let mut cfg = model_cfg.clone();
    cfg.head = HeadSpec::MaskedPrediction;
    let mut model = build_model(&cfg, rng)?;
    let mut opt = AdamW::new(&model.params, 0.0);
    let aug = AugmentConfig {
        gain: true,
        color: true,
        bernoulli: false,
        tfmask: false,
        ..aug_base.clone()
    };

    let mut logs = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let lr = plan.lr.lr(epoch, plan.epochs);
        let order = shuffled_indices(corpus.len(), rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(plan.batch_size) {
            let recs: Vec<&AnnotatedRecording> = chunk.iter().map(|i| &corpus[*i]).collect();
            let batch = build_mae_batch(&recs, plan.crop_window_s, spec, &aug, &plan.mask, rng)?;
            let (z, trace) = model.forward(&batch.view.x, true, Some(rng))?;
            let (loss, g_z) = mae_loss_with_grad(&z, &batch.clean, &batch.valid)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "masked-prediction loss diverged at epoch {epoch} (loss {loss})"
                )));
            }
            let mut grads = GradBuf::zeros_like(&model.params);
            model.backward(&batch.view.x, &trace, &g_z, &mut grads);
            opt.step(&mut model.params, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let log = MaeEpochLog {
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

pub(crate) fn shuffled_indices(n: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_block_mask_respects_ranges() {
        let spec = MaeMaskSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let x = Array3::<f64>::ones((1, 200, 4));
            let view = make_masked_view(&x, &spec, &mut rng);
            assert_eq!(view.draws[0].len(), 1);
            let (b0, s0, len) = view.draws[0][0];
            assert_eq!(b0, 0);
            assert!(s0 < 100);
            assert!((50..=200).contains(&len));
            // Exactly one contiguous run.
            let flags: Vec<bool> = (0..200).map(|t| view.mask[[0, t]]).collect();
            let first = flags.iter().position(|v| *v).unwrap();
            let last = flags.iter().rposition(|v| *v).unwrap();
            assert!(flags[first..=last].iter().all(|v| *v));
            assert_eq!(first, s0);
            assert_eq!(last - first + 1, len.min(200 - s0));
        }
    }

    #[test]
    fn long_input_has_one_run_per_block() {
        let spec = MaeMaskSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::<f64>::ones((1, 2068, 4));
        let view = make_masked_view(&x, &spec, &mut rng);
        // ceil(2068/200) = 11 blocks, the last one partial.
        assert_eq!(view.draws[0].len(), 11);
        // At least the ten full blocks carry masked frames.
        for (block_start, s0, len) in view.draws[0].iter().take(10) {
            let from = block_start + s0;
            let to = (from + len).min(2068);
            assert!(to > from);
            assert!(view.mask[[0, from]]);
        }
    }

    #[test]
    fn masked_frames_zero_unmasked_untouched() {
        let spec = MaeMaskSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_simple_fn((2, 450, 8), || rng.gen::<f64>() + 0.5);
        let view = make_masked_view(&x, &spec, &mut rng);
        for b in 0..2 {
            for t in 0..450 {
                for f in 0..8 {
                    if view.mask[[b, t]] {
                        assert_eq!(view.x[[b, t, f]], 0.0);
                    } else {
                        assert_eq!(view.x[[b, t, f]], x[[b, t, f]]);
                    }
                }
            }
        }
    }

    /// Expected masked fraction per 200-frame block is E[min(L, 200-s)]/200.
    #[test]
    fn masked_fraction_matches_monte_carlo_expectation() {
        let spec = MaeMaskSpec::default();
        // Exact expectation by enumeration over (s, L).
        let mut acc = 0.0;
        for s in 0..100 {
            for l in 50..=200usize {
                acc += (l.min(200 - s)) as f64;
            }
        }
        let expect = acc / (100.0 * 151.0) / 200.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut frac_sum = 0.0;
        let mut frac_sq = 0.0;
        for _ in 0..n {
            let x = Array3::<f64>::ones((1, 200, 1));
            let view = make_masked_view(&x, &spec, &mut rng);
            let f = view.mask.iter().filter(|v| **v).count() as f64 / 200.0;
            frac_sum += f;
            frac_sq += f * f;
        }
        let mean = frac_sum / n as f64;
        let var = frac_sq / n as f64 - mean * mean;
        let sigma = (var / n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * sigma.max(1e-6),
            "mean {mean} vs expected {expect} (sigma {sigma})"
        );
    }

    #[test]
    fn loss_zero_and_constant_offset() {
        let x = Array3::from_shape_simple_fn((2, 5, 3), || 0.4);
        let valid = Array2::from_elem((2, 5), true);
        assert_eq!(mae_loss(&x, &x, &valid).unwrap(), 0.0);
        let z = &x + 1.0;
        let l = mae_loss(&z, &x, &valid).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_loop_oracle_and_masks_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array3::from_shape_simple_fn((2, 7, 3), || rng.gen::<f64>());
        let x = Array3::from_shape_simple_fn((2, 7, 3), || rng.gen::<f64>());
        let mut valid = Array2::from_elem((2, 7), true);
        valid[[0, 6]] = false;
        valid[[1, 5]] = false;
        valid[[1, 6]] = false;
        let l = mae_loss(&z, &x, &valid).unwrap();
        // brute-force triple loop
        let mut sum = 0.0;
        let mut count = 0;
        for b in 0..2 {
            for t in 0..7 {
                if !valid[[b, t]] {
                    continue;
                }
                count += 1;
                for f in 0..3 {
                    let d = z[[b, t, f]] - x[[b, t, f]];
                    sum += d * d;
                }
            }
        }
        let want = sum / (count * 3) as f64;
        assert!((l - want).abs() < 1e-14);

        // Loss invariant under batch permutation (swap the two items).
        let mut zp = z.clone();
        let (z0, z1) = (
            z.index_axis(Axis(0), 0).to_owned(),
            z.index_axis(Axis(0), 1).to_owned(),
        );
        zp.index_axis_mut(Axis(0), 0).assign(&z1);
        zp.index_axis_mut(Axis(0), 1).assign(&z0);
        let mut xp = x.clone();
        let (x0, x1) = (
            x.index_axis(Axis(0), 0).to_owned(),
            x.index_axis(Axis(0), 1).to_owned(),
        );
        xp.index_axis_mut(Axis(0), 0).assign(&x1);
        xp.index_axis_mut(Axis(0), 1).assign(&x0);
        let mut vp = valid.clone();
        for t in 0..7 {
            vp[[0, t]] = valid[[1, t]];
            vp[[1, t]] = valid[[0, t]];
        }
        let lp = mae_loss(&zp, &xp, &vp).unwrap();
        assert!((l - lp).abs() < 1e-15);
    }

    #[test]
    fn no_valid_frames_is_an_error() {
        let z = Array3::<f64>::zeros((1, 4, 2));
        let valid = Array2::from_elem((1, 4), false);
        assert!(mae_loss(&z, &z, &valid).is_err());
    }
}
