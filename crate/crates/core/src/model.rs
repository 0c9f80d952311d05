//! Res-MLP-RNN backbone with task heads, plus the EMA teacher update.
//!
//! The backbone stacks two MLP-RNN blocks (LayerNorm, linear projection with
//! SiLU, bi-directional LSTM, linear projection back to the hidden width,
//! dropout) and adds the first block's output to the second block's output.
//! Heads are per-frame: spectrogram reconstruction, prototype logits for
//! online clustering, or a linear classifier.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    silu, silu_backward, BiLstm, BiLstmTrace, Dropout, GradBuf, LayerNorm, LayerNormCache, Linear,
    ParamArena, ParamId,
};

/// Task head selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Per-frame reconstruction of all frequency bins.
    MaskedPrediction,
    /// Linear projection followed by logits against K learnable prototypes.
    Clustering { k: usize },
    /// Per-frame linear classifier over C classes (background included).
    Classifier { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_bins: usize,
    pub hidden: usize,
    pub lstm_hidden: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    /// Residual tap points, 1-based block indices: output of `residual_from`
    /// is added to the output of `residual_to`.
    pub residual_from: usize,
    pub residual_to: usize,
    pub normalize_prototypes: bool,
    pub head: HeadSpec,
}

impl ModelConfig {
    /// The published configuration: 256 bins into a 512-wide trunk, two blocks.
    pub fn paper(head: HeadSpec) -> Self {
        ModelConfig {
            input_bins: 256,
            hidden: 512,
            lstm_hidden: 512,
            num_blocks: 2,
            dropout: 0.1,
            residual_from: 1,
            residual_to: 2,
            normalize_prototypes: false,
            head,
        }
    }

    /// Same topology at a reduced width, for CPU-scale runs and tests.
    pub fn desk(hidden: usize, head: HeadSpec) -> Self {
        ModelConfig {
            hidden,
            lstm_hidden: hidden,
            ..ModelConfig::paper(head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_bins == 0 || self.hidden == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.num_blocks < 2 {
            return Err(Error::Config("num_blocks must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".into()));
        }
        if self.residual_from >= self.residual_to || self.residual_to > self.num_blocks
            || self.residual_from == 0
        {
            return Err(Error::Config(format!(
                "invalid residual taps {} -> {}",
                self.residual_from, self.residual_to
            )));
        }
        match self.head {
            HeadSpec::Clustering { k } if k < 2 => {
                Err(Error::Config("clustering head needs k >= 2".into()))
            }
            HeadSpec::Classifier { classes } if classes < 2 => {
                Err(Error::Config("classifier head needs >= 2 classes".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadSpec::MaskedPrediction => self.input_bins,
            HeadSpec::Clustering { k } => k,
            HeadSpec::Classifier { classes } => classes,
        }
    }

    /// True when the backbones (everything but the head) are interchangeable.
    pub fn backbone_compatible(&self, other: &ModelConfig) -> bool {
        self.input_bins == other.input_bins
            && self.hidden == other.hidden
            && self.lstm_hidden == other.lstm_hidden
            && self.num_blocks == other.num_blocks
            && self.residual_from == other.residual_from
            && self.residual_to == other.residual_to
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln: LayerNorm,
    fc_in: Linear,
    lstm: BiLstm,
    proj: Linear,
    drop: Dropout,
}

#[derive(Debug, Clone)]
enum Head {
    Masked(Linear),
    Cluster {
        proj: Linear,
        prototypes: ParamId,
        normalize: bool,
    },
    Classifier(Linear),
}

/// Model parameters plus the layer handles into the arena.
#[derive(Debug, Clone)]
pub struct ResMlpRnn {
    pub config: ModelConfig,
    pub params: ParamArena,
    blocks: Vec<Block>,
    head: Head,
}

struct BlockTrace {
    ln_cache: LayerNormCache,
    ln_out: Array3<f64>,
    fc_pre: Array3<f64>,
    act: Array3<f64>,
    lstm_trace: BiLstmTrace,
    lstm_out: Array3<f64>,
    drop_mask: Option<Array3<f64>>,
}

enum HeadTrace {
    Simple,
    Cluster { proj_out: Array3<f64> },
}

/// Activation cache from a forward pass, consumed by [`ResMlpRnn::backward`].
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    head: HeadTrace,
    pub backbone_out: Array3<f64>,
}

/// Build a model with freshly initialized parameters.
pub fn build_model(config: &ModelConfig, rng: &mut impl Rng) -> Result<ResMlpRnn> {
    config.validate()?;
    let mut arena = ParamArena::new();
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        let in_dim = if i == 0 {
            config.input_bins
        } else {
            config.hidden
        };
        let tag = format!("backbone.block{}", i + 1);
        let ln = LayerNorm::new(&mut arena, &format!("{tag}.ln"), in_dim);
        let fc_in = Linear::new(&mut arena, &format!("{tag}.fc_in"), in_dim, config.hidden);
        let lstm = BiLstm::new(
            &mut arena,
            &format!("{tag}.lstm"),
            config.hidden,
            config.lstm_hidden,
        );
        let proj = Linear::new(
            &mut arena,
            &format!("{tag}.proj"),
            2 * config.lstm_hidden,
            config.hidden,
        );
        blocks.push(Block {
            ln,
            fc_in,
            lstm,
            proj,
            drop: Dropout::new(config.dropout),
        });
    }
    let head = match config.head {
        HeadSpec::MaskedPrediction => Head::Masked(Linear::new(
            &mut arena,
            "head.recon",
            config.hidden,
            config.input_bins,
        )),
        HeadSpec::Classifier { classes } => Head::Classifier(Linear::new(
            &mut arena,
            "head.classifier",
            config.hidden,
            classes,
        )),
        HeadSpec::Clustering { k } => {
            let proj = Linear::new(&mut arena, "head.proj", config.hidden, config.hidden);
            let prototypes = arena.alloc("head.prototypes", &[k, config.hidden]);
            Head::Cluster {
                proj,
                prototypes,
                normalize: config.normalize_prototypes,
            }
        }
    };

    for b in &blocks {
        b.ln.init(&mut arena);
        b.fc_in.init(&mut arena, rng);
        b.lstm.init(&mut arena, rng);
        b.proj.init(&mut arena, rng);
    }
    match &head {
        Head::Masked(l) | Head::Classifier(l) => l.init(&mut arena, rng),
        Head::Cluster {
            proj, prototypes, ..
        } => {
            proj.init(&mut arena, rng);
            crate::nn::init_fan_in_uniform(&mut arena, *prototypes, config.hidden, rng);
        }
    }

    Ok(ResMlpRnn {
        config: config.clone(),
        params: arena,
        blocks,
        head,
    })
}

impl ResMlpRnn {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Fresh model with the same layout; parameter values are meant to be
    /// overwritten by the caller (checkpoint loading).
    pub fn like(config: &ModelConfig) -> Result<ResMlpRnn> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        build_model(config, &mut rng)
    }

    /// Full forward pass. `train` enables dropout (requires `rng`).
    pub fn forward(
        &self,
        x: &Array3<f64>,
        train: bool,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Array3<f64>, ForwardTrace)> {
        let (_, _, f) = x.dim();
        if f != self.config.input_bins {
            return Err(Error::Shape(format!(
                "input has {} bins, model expects {}",
                f, self.config.input_bins
            )));
        }
        if train && rng.is_none() {
            return Err(Error::Config("training forward needs an rng".into()));
        }
        let mut fallback = rand_chacha::ChaCha8Rng::seed_from_u64(0);

        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        let mut block_outs: Vec<Array3<f64>> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (ln_out, ln_cache) = block.ln.forward(&self.params, &cur);
            let fc_pre = block.fc_in.forward(&self.params, &ln_out);
            let act = silu(&fc_pre);
            let (lstm_out, lstm_trace) = block.lstm.forward(&self.params, &act);
            let proj_out = block.proj.forward(&self.params, &lstm_out);
            let r: &mut dyn rand::RngCore = match rng.as_deref_mut() {
                Some(r) => r,
                None => &mut fallback,
            };
            let (mut out, drop_mask) = block.drop.forward(&proj_out, train, r);
            if i + 1 == self.config.residual_to {
                out += &block_outs[self.config.residual_from - 1];
            }
            traces.push(BlockTrace {
                ln_cache,
                ln_out,
                fc_pre,
                act,
                lstm_trace,
                lstm_out,
                drop_mask,
            });
            block_outs.push(out.clone());
            cur = out;
        }
        let backbone_out = cur;

        let (y, head_trace) = match &self.head {
            Head::Masked(l) | Head::Classifier(l) => {
                (l.forward(&self.params, &backbone_out), HeadTrace::Simple)
            }
            Head::Cluster {
                proj,
                prototypes,
                normalize,
            } => {
                let h = proj.forward(&self.params, &backbone_out);
                let logits = self.prototype_logits(&h, *prototypes, *normalize);
                (logits, HeadTrace::Cluster { proj_out: h })
            }
        };
        Ok((
            y,
            ForwardTrace {
                blocks: traces,
                head: head_trace,
                backbone_out,
            },
        ))
    }

    /// Backbone features only (eval mode), for embedding extraction.
    pub fn forward_backbone(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (_, trace) = self.forward(x, false, None)?;
        Ok(trace.backbone_out)
    }

    fn prototype_logits(
        &self,
        h: &Array3<f64>,
        prototypes: ParamId,
        normalize: bool,
    ) -> Array3<f64> {
        let p = self.params.view2(prototypes);
        if !normalize {
            return crate::nn::seq_linear(h, &p, None);
        }
        let hn = l2_normalize_rows3(h);
        let pn = l2_normalize_rows2(&p.to_owned());
        crate::nn::seq_linear(&hn, &pn.view(), None)
    }

    /// Backward pass; accumulates parameter gradients into `grads` and
    /// returns the gradient wrt the input spectrogram.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        trace: &ForwardTrace,
        g_out: &Array3<f64>,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let _ = x;
        let mut g = match (&self.head, &trace.head) {
            (Head::Masked(l), _) | (Head::Classifier(l), _) => {
                l.backward(&self.params, &trace.backbone_out, g_out, grads)
            }
            (
                Head::Cluster {
                    proj,
                    prototypes,
                    normalize,
                },
                HeadTrace::Cluster { proj_out },
            ) => {
                let gh = self.prototype_backward(proj_out, *prototypes, *normalize, g_out, grads);
                proj.backward(&self.params, &trace.backbone_out, &gh, grads)
            }
            _ => unreachable!("head trace mismatch"),
        };

        // `g` holds the gradient wrt the output of the block being visited.
        let mut pending_residual: Option<Array3<f64>> = None;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            if i + 1 == self.config.residual_to {
                pending_residual = Some(g.clone());
            }
            if i + 1 == self.config.residual_from {
                if let Some(p) = pending_residual.take() {
                    g += &p;
                }
            }
            let tr = &trace.blocks[i];
            let g_proj_out = block.drop.backward(&g, tr.drop_mask.as_ref());
            let g_lstm_out = block
                .proj
                .backward(&self.params, &tr.lstm_out, &g_proj_out, grads);
            let g_act = block
                .lstm
                .backward(&self.params, &tr.act, &tr.lstm_trace, &g_lstm_out, grads);
            let g_fc_pre = silu_backward(&tr.fc_pre, &g_act);
            let g_ln_out = block
                .fc_in
                .backward(&self.params, &tr.ln_out, &g_fc_pre, grads);
            g = block
                .ln
                .backward(&self.params, &tr.ln_cache, &g_ln_out, grads);
        }
        g
    }

    fn prototype_backward(
        &self,
        h: &Array3<f64>,
        prototypes: ParamId,
        normalize: bool,
        g_logits: &Array3<f64>,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let (b, t, d) = h.dim();
        let p = self.params.view2(prototypes).to_owned();
        if !normalize {
            let g2 = crate::nn::flatten_bt(g_logits);
            let h2 = crate::nn::flatten_bt(h);
            {
                let mut gp = grads.view2_mut(&self.params, prototypes);
                gp += &g2.t().dot(&h2);
            }
            let gh = g2.dot(&p);
            return gh.into_shape((b, t, d)).unwrap().to_owned();
        }
        // Normalized route: logits = hn . pn^T with per-row L2 normalization.
        let hn = l2_normalize_rows3(h);
        let pn = l2_normalize_rows2(&p);
        let g2 = crate::nn::flatten_bt(g_logits);
        let hn2 = crate::nn::flatten_bt(&hn);
        let gpn = g2.t().dot(&hn2);
        {
            let mut gp = grads.view2_mut(&self.params, prototypes);
            for k in 0..p.shape()[0] {
                let row = p.row(k);
                let norm = row.dot(&row).sqrt().max(1e-12);
                let pn_row = pn.row(k);
                let g_row = gpn.row(k);
                let dot = pn_row.dot(&g_row);
                for j in 0..d {
                    gp[[k, j]] += (g_row[j] - pn_row[j] * dot) / norm;
                }
            }
        }
        let ghn2 = g2.dot(&pn);
        let h2 = crate::nn::flatten_bt(h);
        let mut gh = Array2::<f64>::zeros((b * t, d));
        for r in 0..b * t {
            let row = h2.row(r);
            let norm = row.dot(&row).sqrt().max(1e-12);
            let hn_row = hn2.row(r);
            let g_row = ghn2.row(r);
            let dot = hn_row.dot(&g_row);
            for j in 0..d {
                gh[[r, j]] = (g_row[j] - hn_row[j] * dot) / norm;
            }
        }
        gh.into_shape((b, t, d)).unwrap().to_owned()
    }

    /// Copy backbone parameters (by name) from another model. Head entries
    /// are left untouched. Fails loudly on any missing name or shape mismatch.
    pub fn load_backbone_from(&mut self, other: &ResMlpRnn) -> Result<()> {
        if !self.config.backbone_compatible(&other.config) {
            return Err(Error::Checkpoint(
                "backbone configs are incompatible".into(),
            ));
        }
        for e in other.params.entries().to_vec() {
            if !e.name.starts_with("backbone.") {
                continue;
            }
            let dst = self.params.find(&e.name).ok_or_else(|| {
                Error::Checkpoint(format!("backbone parameter {} missing in target", e.name))
            })?;
            if self.params.entry(dst).shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    self.params.entry(dst).shape,
                    e.shape
                )));
            }
            let src = other.params.find(&e.name).unwrap();
            let vals: Vec<f64> = other.params.slice(src).to_vec();
            self.params.slice_mut(dst).copy_from_slice(&vals);
        }
        Ok(())
    }
}

/// EMA teacher update (per parameter):
/// `teacher = decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &mut ResMlpRnn, student: &ResMlpRnn, decay: f64) -> Result<()> {
    if teacher.params.len() != student.params.len() {
        return Err(Error::Shape(
            "teacher/student parameter count differs".into(),
        ));
    }
    teacher.params.ema_update(&student.params, decay);
    Ok(())
}

/// Decay-factor schedule: linear ramp from `start` to `end` over the first
/// `ramp_fraction` of training, constant afterwards.
pub fn ema_decay_schedule(
    step: u64,
    total_steps: u64,
    start: f64,
    end: f64,
    ramp_fraction: f64,
) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Train(format!(
            "ema schedule: step {step} beyond total {total_steps}"
        )));
    }
    let ramp_steps = (total_steps as f64 * ramp_fraction).round();
    if ramp_steps <= 0.0 {
        return Ok(end);
    }
    let f = (step as f64 / ramp_steps).min(1.0);
    Ok(start + (end - start) * f)
}

fn l2_normalize_rows3(x: &Array3<f64>) -> Array3<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    y
}

fn l2_normalize_rows2(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    y
}
