//! Syllable embedding extraction and the clustering pipeline:
//! backbone features -> temporal pooling -> PCA -> append duration ->
//! per-feature standardization -> GMM -> AMI against true labels.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ami::adjusted_mutual_information;
use super::gmm::{fit_gmm, GmmConfig};
use super::linalg::{standardize_columns, Pca};
use crate::dataio::AnnotatedRecording;
use crate::dsp::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::model::ResMlpRnn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

/// One embedded syllable with its provenance and final feature vector
/// (PCA components plus the duration feature, standardized).
#[derive(Debug, Clone, Serialize)]
pub struct SyllableEmbedding {
    pub rec_id: String,
    pub index_in_recording: usize,
    pub true_label: u32,
    pub duration_s: f64,
    pub features: Vec<f64>,
}

/// Extract one pooled backbone feature vector per annotated syllable.
fn raw_syllable_features(
    model: &ResMlpRnn,
    corpus: &[AnnotatedRecording],
    spec: &SpectrogramConfig,
    pooling: Pooling,
) -> Result<(Vec<SyllableEmbedding>, Array2<f64>)> {
    let mut meta = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in corpus {
        let sr = rec.recording.sample_rate as f64;
        for (i, iv) in rec.annotations.iter().enumerate() {
            let a = (iv.onset_s * sr).round() as usize;
            let b = ((iv.offset_s * sr).round() as usize).min(rec.recording.samples.len());
            if b <= a {
                return Err(Error::Analysis(format!(
                    "syllable {} of {} has no samples",
                    i, rec.recording.id
                )));
            }
            let sg = crate::dsp::compute_spectrogram(&rec.recording.samples[a..b], spec)?;
            let (t_len, f_len) = sg.dim();
            let mut x = Array3::<f64>::zeros((1, t_len, f_len));
            x.index_axis_mut(Axis(0), 0).assign(&sg);
            let feats = model.forward_backbone(&x)?;
            let d = feats.dim().2;
            let mut pooled = vec![0.0; d];
            match pooling {
                Pooling::Mean => {
                    for t in 0..t_len {
                        for j in 0..d {
                            pooled[j] += feats[[0, t, j]];
                        }
                    }
                    for p in pooled.iter_mut() {
                        *p /= t_len as f64;
                    }
                }
                Pooling::Max => {
                    pooled.fill(f64::NEG_INFINITY);
                    for t in 0..t_len {
                        for j in 0..d {
                            pooled[j] = pooled[j].max(feats[[0, t, j]]);
                        }
                    }
                }
            }
            meta.push(SyllableEmbedding {
                rec_id: rec.recording.id.clone(),
                index_in_recording: i,
                true_label: iv.label,
                duration_s: iv.offset_s - iv.onset_s,
                features: Vec::new(),
            });
            rows.push(pooled);
        }
    }
    if rows.is_empty() {
        return Err(Error::Analysis("no annotated syllables to embed".into()));
    }
    let d = rows[0].len();
    let mut mat = Array2::<f64>::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            mat[[i, j]] = *v;
        }
    }
    Ok((meta, mat))
}

/// Full embedding pipeline. `pca_components` is clamped to the backbone
/// width; the returned feature vectors have `pca_components + 1` entries.
pub fn embed_syllables(
    model: &ResMlpRnn,
    corpus: &[AnnotatedRecording],
    spec: &SpectrogramConfig,
    pooling: Pooling,
    pca_components: usize,
) -> Result<Vec<SyllableEmbedding>> {
    let (mut meta, raw) = raw_syllable_features(model, corpus, spec, pooling)?;
    let pca = Pca::fit(&raw, pca_components)?;
    let reduced = pca.transform(&raw);
    let (n, k) = reduced.dim();
    let mut full = Array2::<f64>::zeros((n, k + 1));
    for i in 0..n {
        for j in 0..k {
            full[[i, j]] = reduced[[i, j]];
        }
        full[[i, k]] = meta[i].duration_s;
    }
    standardize_columns(&mut full);
    for (i, m) in meta.iter_mut().enumerate() {
        m.features = full.row(i).to_vec();
    }
    Ok(meta)
}

/// GMM clustering of embedded syllables (full covariances, best of
/// `restarts` by log-likelihood) plus AMI against the true labels.
pub fn cluster_embeddings(
    records: &[SyllableEmbedding],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, f64)> {
    if records.is_empty() {
        return Err(Error::Analysis("no embeddings to cluster".into()));
    }
    if k > records.len() {
        return Err(Error::Analysis(format!(
            "cannot form {k} clusters from {} syllables",
            records.len()
        )));
    }
    let d = records[0].features.len();
    let mut x = Array2::<f64>::zeros((records.len(), d));
    for (i, r) in records.iter().enumerate() {
        for (j, v) in r.features.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    let cfg = GmmConfig {
        components: k,
        restarts: 5,
        max_iters: 200,
        covariance_reg: 1e-6,
        tol: 1e-7,
    };
    let gmm = fit_gmm(&x, &cfg, rng)?;
    let assignments = gmm.predict(&x, cfg.covariance_reg)?;
    let truth: Vec<u32> = records.iter().map(|r| r.true_label).collect();
    let ami = adjusted_mutual_information(&assignments, &truth);
    Ok((assignments, ami))
}
