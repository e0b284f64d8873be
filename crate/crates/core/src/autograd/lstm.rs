//! Fused single-direction LSTM over a batch of sequences.

use std::rc::Rc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Ix2};

use super::ops::view2;
use super::Var;

/// Parameters of one LSTM direction, gate order input, forget, cell, output.
#[derive(Clone, Copy)]
pub struct LstmWeights<'t> {
    /// `[4H, I]`
    pub input: Var<'t>,
    /// `[4H, H]`
    pub recurrent: Var<'t>,
    /// `[4H]`
    pub bias: Var<'t>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    /// Runs an LSTM over `[N, T, I]` sequences and returns `[N, T, H]` hidden
    /// states. With `reverse` the recurrence runs from the last step to the
    /// first; outputs stay aligned with their input positions.
    pub fn lstm(self, weights: LstmWeights<'t>, reverse: bool) -> Var<'t> {
        let x = self.value();
        let (w_ih, w_hh, b) = (weights.input.value(), weights.recurrent.value(), weights.bias.value());
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 3, "lstm expects [N, T, I]");
        let (n, steps, fan_in) = (shape[0], shape[1], shape[2]);
        let w_ih2 = w_ih.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let w_hh2 = w_hh.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let hidden = w_hh2.ncols();
        let g4 = 4 * hidden;
        assert_eq!(w_ih2.dim(), (g4, fan_in), "lstm: input weight shape");
        assert_eq!(w_hh2.nrows(), g4, "lstm: recurrent weight shape");

        // Input projection for all steps at once: [N*T, 4H].
        let mut proj = view2(&x, fan_in).dot(&w_ih2.t());
        for mut row in proj.rows_mut() {
            row += &b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        let proj = proj.into_shape_with_order((n, steps, g4)).unwrap();

        // Per processing step: activated gates, cell state, tanh(cell), hidden.
        let mut gates = Array3::<f64>::zeros((steps, n, g4));
        let mut cells = Array3::<f64>::zeros((steps, n, hidden));
        let mut hiddens = Array3::<f64>::zeros((steps, n, hidden));
        let mut out = Array3::<f64>::zeros((n, steps, hidden));
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };

        let mut h_prev = Array2::<f64>::zeros((n, hidden));
        let mut c_prev = Array2::<f64>::zeros((n, hidden));
        for (k, &t) in order.iter().enumerate() {
            let mut pre = h_prev.dot(&w_hh2.t());
            pre += &proj.index_axis(Axis(1), t);
            let mut gk = gates.index_axis_mut(Axis(0), k);
            let mut ck = cells.index_axis_mut(Axis(0), k);
            let mut hk = hiddens.index_axis_mut(Axis(0), k);
            for r in 0..n {
                let p = pre.row(r);
                let mut gr = gk.row_mut(r);
                for j in 0..hidden {
                    let i_g = sigmoid(p[j]);
                    let f_g = sigmoid(p[hidden + j]);
                    let c_g = p[2 * hidden + j].tanh();
                    let o_g = sigmoid(p[3 * hidden + j]);
                    gr[j] = i_g;
                    gr[hidden + j] = f_g;
                    gr[2 * hidden + j] = c_g;
                    gr[3 * hidden + j] = o_g;
                    let c = f_g * c_prev[[r, j]] + i_g * c_g;
                    ck[[r, j]] = c;
                    hk[[r, j]] = o_g * c.tanh();
                }
            }
            out.slice_mut(s![.., t, ..]).assign(&hk);
            h_prev.assign(&hk);
            c_prev.assign(&ck);
        }

        let (ix, iw, iu, ib) = (self.id, weights.input.id, weights.recurrent.id, weights.bias.id);
        let xs = Rc::clone(&x);
        self.tape.push(out.into_dyn(), &[self, weights.input, weights.recurrent, weights.bias], move |g, grads| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut d_pre = Array3::<f64>::zeros((n, steps, g4));
            let mut d_whh = Array2::<f64>::zeros((g4, hidden));
            let mut dh_next = Array2::<f64>::zeros((n, hidden));
            let mut dc_next = Array2::<f64>::zeros((n, hidden));
            let zeros = Array2::<f64>::zeros((n, hidden));
            for k in (0..steps).rev() {
                let t = order[k];
                let gk = gates.index_axis(Axis(0), k);
                let ck = cells.index_axis(Axis(0), k);
                let (c_before, h_before): (ArrayView2<f64>, ArrayView2<f64>) = if k == 0 {
                    (zeros.view(), zeros.view())
                } else {
                    (cells.index_axis(Axis(0), k - 1), hiddens.index_axis(Axis(0), k - 1))
                };
                let gt = g3.index_axis(Axis(1), t);
                let mut dk = d_pre.index_axis_mut(Axis(1), t);
                for r in 0..n {
                    for j in 0..hidden {
                        let i_g = gk[[r, j]];
                        let f_g = gk[[r, hidden + j]];
                        let c_g = gk[[r, 2 * hidden + j]];
                        let o_g = gk[[r, 3 * hidden + j]];
                        let tc = ck[[r, j]].tanh();
                        let dh = gt[[r, j]] + dh_next[[r, j]];
                        let d_o = dh * tc;
                        let dc = dh * o_g * (1.0 - tc * tc) + dc_next[[r, j]];
                        let d_i = dc * c_g;
                        let d_cg = dc * i_g;
                        let d_f = dc * c_before[[r, j]];
                        dc_next[[r, j]] = dc * f_g;
                        dk[[r, j]] = d_i * i_g * (1.0 - i_g);
                        dk[[r, hidden + j]] = d_f * f_g * (1.0 - f_g);
                        dk[[r, 2 * hidden + j]] = d_cg * (1.0 - c_g * c_g);
                        dk[[r, 3 * hidden + j]] = d_o * o_g * (1.0 - o_g);
                    }
                }
                let dk = d_pre.index_axis(Axis(1), t);
                dh_next = dk.dot(&w_hh2);
                ndarray::linalg::general_mat_mul(1.0, &dk.t(), &h_before, 1.0, &mut d_whh);
            }
            let d2 = d_pre.into_shape_with_order((n * steps, g4)).unwrap();
            grads.accumulate_with(ix, || {
                d2.dot(&w_ih2).into_shape_with_order((n, steps, fan_in)).unwrap().into_dyn()
            });
            grads.accumulate_with(iw, || d2.t().dot(&view2(&xs, fan_in)).into_dyn());
            grads.accumulate(iu, d_whh.into_dyn());
            grads.accumulate_with(ib, || d2.sum_axis(Axis(0)).into_dyn());
        })
    }
}

/// Reference LSTM step-by-step without batching, for tests.
#[cfg(test)]
pub(crate) fn reference_lstm(
    x: &super::Array,
    w_ih: &super::Array,
    w_hh: &super::Array,
    b: &super::Array,
    reverse: bool,
) -> super::Array {
    let (n, steps, _) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hidden = w_hh.shape()[1];
    let mut out = ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, steps, hidden]));
    for r in 0..n {
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let ts: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in ts {
            let mut pre = vec![0.0; 4 * hidden];
            for (q, p) in pre.iter_mut().enumerate() {
                *p = b[[q]];
                for i in 0..x.shape()[2] {
                    *p += w_ih[[q, i]] * x[[r, t, i]];
                }
                for j in 0..hidden {
                    *p += w_hh[[q, j]] * h[j];
                }
            }
            for j in 0..hidden {
                let ig = sigmoid(pre[j]);
                let fg = sigmoid(pre[hidden + j]);
                let cg = pre[2 * hidden + j].tanh();
                let og = sigmoid(pre[3 * hidden + j]);
                c[j] = fg * c[j] + ig * cg;
                h[j] = og * c[j].tanh();
                out[[r, t, j]] = h[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::testing::grad_check;
    use super::super::{Array, Tape};
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64, scale: f64) -> Array {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
    }

    fn params() -> (Array, Array, Array) {
        (random(&[12, 2], 1, 0.8), random(&[12, 3], 2, 0.8), random(&[12], 3, 0.3))
    }

    #[test]
    fn matches_reference_both_directions() {
        let x = random(&[2, 5, 2], 4, 1.0);
        let (wi, wh, b) = params();
        for reverse in [false, true] {
            let tape = Tape::new();
            let w = LstmWeights {
                input: tape.constant(wi.clone()),
                recurrent: tape.constant(wh.clone()),
                bias: tape.constant(b.clone()),
            };
            let y = tape.constant(x.clone()).lstm(w, reverse).value();
            let r = reference_lstm(&x, &wi, &wh, &b, reverse);
            let diff = (&*y - &r).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-12, "reverse={reverse} diff={diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[2, 4, 2], 5, 1.0);
        let (wi, wh, b) = params();
        let proj = random(&[2, 4, 3], 6, 1.0);
        for reverse in [false, true] {
            let (wi2, wh2, b2, p2) = (wi.clone(), wh.clone(), b.clone(), proj.clone());
            let err = grad_check(&x, move |v| {
                let t = v.tape();
                let w = LstmWeights {
                    input: t.constant(wi2.clone()),
                    recurrent: t.constant(wh2.clone()),
                    bias: t.constant(b2.clone()),
                };
                v.lstm(w, reverse).mul(t.constant(p2.clone())).sum()
            });
            assert!(err < 1e-6, "input grad err {err}");

            let (x2, wi2, b2, p2) = (x.clone(), wi.clone(), b.clone(), proj.clone());
            let err = grad_check(&wh, move |v| {
                let t = v.tape();
                let w = LstmWeights { input: t.constant(wi2.clone()), recurrent: v, bias: t.constant(b2.clone()) };
                t.constant(x2.clone()).lstm(w, reverse).mul(t.constant(p2.clone())).sum()
            });
            assert!(err < 1e-6, "recurrent grad err {err}");

            let (x2, wh2, b2, p2) = (x.clone(), wh.clone(), b.clone(), proj.clone());
            let err = grad_check(&wi, move |v| {
                let t = v.tape();
                let w = LstmWeights { input: v, recurrent: t.constant(wh2.clone()), bias: t.constant(b2.clone()) };
                t.constant(x2.clone()).lstm(w, reverse).mul(t.constant(p2.clone())).sum()
            });
            assert!(err < 1e-6, "input weight grad err {err}");

            let (x2, wi2, wh2, p2) = (x.clone(), wi.clone(), wh.clone(), proj.clone());
            let err = grad_check(&b, move |v| {
                let t = v.tape();
                let w = LstmWeights { input: t.constant(wi2.clone()), recurrent: t.constant(wh2.clone()), bias: v };
                t.constant(x2.clone()).lstm(w, reverse).mul(t.constant(p2.clone())).sum()
            });
            assert!(err < 1e-6, "bias grad err {err}");
        }
    }
}
