//! Minimal feed-forward/recurrent network machinery with hand-written
//! backpropagation in f64.
//!
//! Parameters live in a flat [`ParamArena`] so that optimizers, EMA updates,
//! checkpointing, and finite-difference checks all operate on one contiguous
//! buffer. Layers hold [`ParamId`] handles into the arena.

mod layers;
mod lstm;
mod optim;
mod prob;

pub use layers::{sigmoid, silu, silu_backward, Dropout, LayerNorm, LayerNormCache, Linear};
pub use lstm::{BiLstm, BiLstmTrace};
pub use optim::{AdamW, LrSchedule};
pub use prob::{softmax_backward_frames, softmax_frames, softmax_rows};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

/// Handle to one named parameter tensor inside a [`ParamArena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat storage for all parameters of one model.
///
/// Entry order is the allocation order, which is deterministic for a given
/// model config; a teacher arena is a plain clone of the student arena.
#[derive(Debug, Clone)]
pub struct ParamArena {
    data: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamArena {
    pub fn new() -> Self {
        ParamArena {
            data: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn alloc(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        self.data.resize(offset + len, 0.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            shape: shape.to_vec(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = self.entries[id.0].clone();
        &mut self.data[e.offset..e.offset + e.len()]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        let e = &self.entries[id.0];
        debug_assert_eq!(e.shape.len(), 1);
        ArrayView1::from_shape(e.shape[0], self.slice(id)).unwrap()
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        debug_assert_eq!(e.shape.len(), 2);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(id)).unwrap()
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let e = self.entries[id.0].clone();
        let s = &mut self.data[e.offset..e.offset + e.len()];
        ArrayViewMut1::from_shape(e.shape[0], s).unwrap()
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let e = self.entries[id.0].clone();
        let s = &mut self.data[e.offset..e.offset + e.len()];
        ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), s).unwrap()
    }

    /// Look up an entry index by exact name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// In-place EMA update: `self = decay * self + (1 - decay) * student`.
    ///
    /// Arenas must have identical layouts (teacher is a clone of the student
    /// at initialization).
    pub fn ema_update(&mut self, student: &ParamArena, decay: f64) {
        assert_eq!(
            self.data.len(),
            student.data.len(),
            "ema: arena layouts differ"
        );
        for (t, s) in self.data.iter_mut().zip(student.data.iter()) {
            *t = decay * *t + (1.0 - decay) * *s;
        }
    }

    /// All values finite?
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Default for ParamArena {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffer mirroring a [`ParamArena`] layout.
#[derive(Debug, Clone)]
pub struct GradBuf {
    data: Vec<f64>,
}

impl GradBuf {
    pub fn zeros_like(arena: &ParamArena) -> Self {
        GradBuf {
            data: vec![0.0; arena.len()],
        }
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slice(&self, arena: &ParamArena, id: ParamId) -> &[f64] {
        let e = arena.entry(id);
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn view2_mut(&mut self, arena: &ParamArena, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let e = arena.entry(id).clone();
        let s = &mut self.data[e.offset..e.offset + e.len()];
        ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), s).unwrap()
    }

    pub fn view1_mut(&mut self, arena: &ParamArena, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let e = arena.entry(id).clone();
        let s = &mut self.data[e.offset..e.offset + e.len()];
        ArrayViewMut1::from_shape(e.shape[0], s).unwrap()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// L2 norm of the gradient of one parameter tensor.
    pub fn param_norm(&self, arena: &ParamArena, id: ParamId) -> f64 {
        self.slice(arena, id)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Uniform fan-in init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_fan_in_uniform(arena: &mut ParamArena, id: ParamId, fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in arena.slice_mut(id) {
        *v = rng.gen_range(-bound..bound);
    }
}

pub fn init_constant(arena: &mut ParamArena, id: ParamId, value: f64) {
    for v in arena.slice_mut(id) {
        *v = value;
    }
}

/// Orthogonal init for square recurrent blocks via Householder QR of a
/// Gaussian matrix. Applied per gate block for LSTM `w_hh`.
pub fn orthogonal_square(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    use rand_distr::StandardNormal;
    let mut a = Array2::<f64>::zeros((n, n));
    for v in a.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    // Householder QR; orthogonal factor accumulated explicitly.
    let mut q = Array2::<f64>::eye(n);
    let mut r = a;
    for k in 0..n {
        let mut x = Array1::<f64>::zeros(n - k);
        for i in k..n {
            x[i - k] = r[[i, k]];
        }
        let alpha = -x[0].signum() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if alpha.abs() < 1e-300 {
            continue;
        }
        let mut v = x;
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|u| u * u).sum();
        if vnorm2 < 1e-300 {
            continue;
        }
        // r = (I - 2 v v^T / v^T v) r ; q = q (I - 2 v v^T / v^T v)
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * r[[i, j]]).sum();
            let scale = 2.0 * dot / vnorm2;
            for i in k..n {
                r[[i, j]] -= scale * v[i - k];
            }
        }
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| q[[i, j]] * v[j - k]).sum();
            let scale = 2.0 * dot / vnorm2;
            for j in k..n {
                q[[i, j]] -= scale * v[j - k];
            }
        }
        let _ = alpha;
    }
    // Sign-fix columns so the factorization is unique given the input.
    for j in 0..n {
        if r[[j, j]] < 0.0 {
            for i in 0..n {
                q[[i, j]] = -q[[i, j]];
            }
        }
    }
    q
}

/// Reshape a (B, T, D) activation to ((B*T), D) without copying.
pub fn flatten_bt(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (b, t, d) = x.dim();
    x.view().into_shape((b * t, d)).expect("standard layout")
}

/// Matrix product of a (B, T, In) sequence with a (Out, In) weight, giving
/// (B, T, Out).
pub fn seq_linear(x: &Array3<f64>, w: &ArrayView2<f64>, bias: Option<&ArrayView1<f64>>) -> Array3<f64> {
    let (b, t, in_dim) = x.dim();
    let out = w.shape()[0];
    let owned;
    let x2 = match x.as_slice() {
        Some(s) => ArrayView2::from_shape((b * t, in_dim), s).unwrap(),
        None => {
            owned = x.as_standard_layout().to_owned();
            ArrayView2::from_shape((b * t, in_dim), owned.as_slice().unwrap()).unwrap()
        }
    };
    let mut y2 = x2.dot(&w.t());
    if let Some(bias) = bias {
        y2 += bias;
    }
    y2.into_shape((b, t, out)).unwrap().to_owned()
}
