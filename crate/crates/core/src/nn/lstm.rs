//! Bi-directional LSTM with explicit backpropagation through time.
//!
//! Gate layout follows the (input, forget, cell, output) convention; each
//! direction owns `w_ih` (4H, In), `w_hh` (4H, H) and a single bias (4H).

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use super::layers::sigmoid;
use super::{flatten_bt, init_fan_in_uniform, orthogonal_square, GradBuf, ParamArena, ParamId};

#[derive(Debug, Clone)]
struct LstmDirection {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Per-direction activation cache for BPTT.
pub struct DirectionTrace {
    /// Activated gates (B, T, 4H): sigmoid(i), sigmoid(f), tanh(g), sigmoid(o).
    gates: Array3<f64>,
    /// Cell states (B, T, H).
    c: Array3<f64>,
    /// tanh of cell states (B, T, H).
    tanh_c: Array3<f64>,
    /// Hidden states (B, T, H).
    h: Array3<f64>,
}

pub struct BiLstmTrace {
    fwd: DirectionTrace,
    bwd: DirectionTrace,
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: LstmDirection,
    bwd: LstmDirection,
    pub in_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(arena: &mut ParamArena, name: &str, in_dim: usize, hidden: usize) -> Self {
        let dir = |tag: &str, arena: &mut ParamArena| LstmDirection {
            w_ih: arena.alloc(&format!("{name}.{tag}.w_ih"), &[4 * hidden, in_dim]),
            w_hh: arena.alloc(&format!("{name}.{tag}.w_hh"), &[4 * hidden, hidden]),
            b: arena.alloc(&format!("{name}.{tag}.bias"), &[4 * hidden]),
        };
        let fwd = dir("fwd", arena);
        let bwd = dir("bwd", arena);
        BiLstm {
            fwd,
            bwd,
            in_dim,
            hidden,
        }
    }

    /// Fan-in uniform for input weights, per-gate orthogonal for recurrent
    /// weights, zero bias with forget gate at 1.
    pub fn init(&self, arena: &mut ParamArena, rng: &mut impl Rng) {
        let h = self.hidden;
        for dir in [&self.fwd, &self.bwd] {
            init_fan_in_uniform(arena, dir.w_ih, self.in_dim, rng);
            for gate in 0..4 {
                let q = orthogonal_square(h, rng);
                let mut w = arena.view2_mut(dir.w_hh);
                let mut block = w.slice_mut(s![gate * h..(gate + 1) * h, ..]);
                block.assign(&q);
            }
            let mut b = arena.view1_mut(dir.b);
            b.fill(0.0);
            for i in h..2 * h {
                b[i] = 1.0;
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Forward pass. Output is (B, T, 2H) with forward/backward hidden states
    /// concatenated per frame. The trace is only needed for `backward`.
    pub fn forward(&self, arena: &ParamArena, x: &Array3<f64>) -> (Array3<f64>, BiLstmTrace) {
        let fwd = self.run_direction(arena, &self.fwd, x, false);
        let bwd = self.run_direction(arena, &self.bwd, x, true);
        let (b, t, _) = x.dim();
        let mut y = Array3::<f64>::zeros((b, t, 2 * self.hidden));
        y.slice_mut(s![.., .., ..self.hidden]).assign(&fwd.h);
        y.slice_mut(s![.., .., self.hidden..]).assign(&bwd.h);
        (y, BiLstmTrace { fwd, bwd })
    }

    fn run_direction(
        &self,
        arena: &ParamArena,
        dir: &LstmDirection,
        x: &Array3<f64>,
        reverse: bool,
    ) -> DirectionTrace {
        let (bsz, t_len, _) = x.dim();
        let h_dim = self.hidden;
        let w_ih = arena.view2(dir.w_ih);
        let w_hh = arena.view2(dir.w_hh);
        let bias = arena.view1(dir.b);

        // Input contribution for all steps at once.
        let pre = super::seq_linear(x, &w_ih, Some(&bias));

        let mut gates = Array3::<f64>::zeros((bsz, t_len, 4 * h_dim));
        let mut c_all = Array3::<f64>::zeros((bsz, t_len, h_dim));
        let mut tanh_all = Array3::<f64>::zeros((bsz, t_len, h_dim));
        let mut h_all = Array3::<f64>::zeros((bsz, t_len, h_dim));

        let mut h_prev = Array2::<f64>::zeros((bsz, h_dim));
        let mut c_prev = Array2::<f64>::zeros((bsz, h_dim));
        let w_hh_t = w_hh.t();

        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let mut g = pre.slice(s![.., t, ..]).to_owned();
            g += &h_prev.dot(&w_hh_t);
            let mut h_t = Array2::<f64>::zeros((bsz, h_dim));
            let mut c_t = Array2::<f64>::zeros((bsz, h_dim));
            for b in 0..bsz {
                for j in 0..h_dim {
                    let i_g = sigmoid(g[[b, j]]);
                    let f_g = sigmoid(g[[b, h_dim + j]]);
                    let g_g = g[[b, 2 * h_dim + j]].tanh();
                    let o_g = sigmoid(g[[b, 3 * h_dim + j]]);
                    let c = f_g * c_prev[[b, j]] + i_g * g_g;
                    let tc = c.tanh();
                    g[[b, j]] = i_g;
                    g[[b, h_dim + j]] = f_g;
                    g[[b, 2 * h_dim + j]] = g_g;
                    g[[b, 3 * h_dim + j]] = o_g;
                    c_t[[b, j]] = c;
                    tanh_all[[b, t, j]] = tc;
                    h_t[[b, j]] = o_g * tc;
                }
            }
            gates.slice_mut(s![.., t, ..]).assign(&g);
            c_all.slice_mut(s![.., t, ..]).assign(&c_t);
            h_all.slice_mut(s![.., t, ..]).assign(&h_t);
            h_prev = h_t;
            c_prev = c_t;
        }

        DirectionTrace {
            gates,
            c: c_all,
            tanh_c: tanh_all,
            h: h_all,
        }
    }

    /// BPTT. Returns the gradient wrt the layer input.
    pub fn backward(
        &self,
        arena: &ParamArena,
        x: &Array3<f64>,
        trace: &BiLstmTrace,
        gy: &Array3<f64>,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let gy_fwd = gy.slice(s![.., .., ..self.hidden]).to_owned();
        let gy_bwd = gy.slice(s![.., .., self.hidden..]).to_owned();
        let gx_f = self.backward_direction(arena, &self.fwd, x, &trace.fwd, &gy_fwd, false, grads);
        let gx_b = self.backward_direction(arena, &self.bwd, x, &trace.bwd, &gy_bwd, true, grads);
        gx_f + gx_b
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_direction(
        &self,
        arena: &ParamArena,
        dir: &LstmDirection,
        x: &Array3<f64>,
        trace: &DirectionTrace,
        gy: &Array3<f64>,
        reverse: bool,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let (bsz, t_len, _) = x.dim();
        let h_dim = self.hidden;
        let w_hh = arena.view2(dir.w_hh);
        let w_ih = arena.view2(dir.w_ih);

        let mut dgates = Array3::<f64>::zeros((bsz, t_len, 4 * h_dim));
        let mut dh_next = Array2::<f64>::zeros((bsz, h_dim));
        let mut dc_next = Array2::<f64>::zeros((bsz, h_dim));

        // Reverse of the processing order.
        for step in (0..t_len).rev() {
            let t = if reverse { t_len - 1 - step } else { step };
            let prev_t: Option<usize> = if step == 0 {
                None
            } else if reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let mut dg_t = Array2::<f64>::zeros((bsz, 4 * h_dim));
            for b in 0..bsz {
                for j in 0..h_dim {
                    let i_g = trace.gates[[b, t, j]];
                    let f_g = trace.gates[[b, t, h_dim + j]];
                    let g_g = trace.gates[[b, t, 2 * h_dim + j]];
                    let o_g = trace.gates[[b, t, 3 * h_dim + j]];
                    let tc = trace.tanh_c[[b, t, j]];
                    let c_prev = match prev_t {
                        Some(pt) => trace.c[[b, pt, j]],
                        None => 0.0,
                    };
                    let dh = gy[[b, t, j]] + dh_next[[b, j]];
                    let mut dc = dc_next[[b, j]] + dh * o_g * (1.0 - tc * tc);
                    let do_pre = dh * tc * o_g * (1.0 - o_g);
                    let di_pre = dc * g_g * i_g * (1.0 - i_g);
                    let df_pre = dc * c_prev * f_g * (1.0 - f_g);
                    let dg_pre = dc * i_g * (1.0 - g_g * g_g);
                    dc *= f_g;
                    dc_next[[b, j]] = dc;
                    dg_t[[b, j]] = di_pre;
                    dg_t[[b, h_dim + j]] = df_pre;
                    dg_t[[b, 2 * h_dim + j]] = dg_pre;
                    dg_t[[b, 3 * h_dim + j]] = do_pre;
                }
            }
            dh_next = dg_t.dot(&w_hh);
            dgates.slice_mut(s![.., t, ..]).assign(&dg_t);
        }

        // Parameter gradients in one batched product each.
        let dg2 = flatten_bt(&dgates);
        let x2 = flatten_bt(x);
        {
            let mut g = grads.view2_mut(arena, dir.w_ih);
            g += &dg2.t().dot(&x2);
        }
        {
            // Hidden states shifted one step back along the processing order.
            let mut h_prev = Array3::<f64>::zeros((bsz, t_len, h_dim));
            for step in 1..t_len {
                let t = if reverse { t_len - 1 - step } else { step };
                let pt = if reverse { t + 1 } else { t - 1 };
                let src = trace.h.slice(s![.., pt, ..]).to_owned();
                h_prev.slice_mut(s![.., t, ..]).assign(&src);
            }
            let hp2 = flatten_bt(&h_prev);
            let mut g = grads.view2_mut(arena, dir.w_hh);
            g += &dg2.t().dot(&hp2);
        }
        {
            let mut g = grads.view1_mut(arena, dir.b);
            g += &dg2.sum_axis(Axis(0));
        }

        let gx2 = dg2.dot(&w_ih);
        gx2.into_shape((bsz, t_len, self.in_dim))
            .unwrap()
            .to_owned()
    }
}
