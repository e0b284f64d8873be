//! Primitive differentiable operations.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn};

use super::{standard, Array, Var};

pub(crate) fn view2(a: &Array, cols: usize) -> ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((a.len() / cols.max(1), cols))
        .expect("standard layout")
}

pub(crate) fn view2_mut(a: &mut Array, cols: usize) -> ArrayViewMut2<'_, f64> {
    let rows = a.len() / cols.max(1);
    a.view_mut()
        .into_shape_with_order((rows, cols))
        .expect("standard layout")
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

impl<'t> Var<'t> {
    fn unary<F, G>(self, forward: F, derivative: G) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = x.mapv(forward);
        let (ix, xs, ys) = (self.id, Rc::clone(&x), Rc::new(y.clone()));
        self.tape.push(y, &[self], move |g, grads| {
            let mut gx = g.clone();
            ndarray::Zip::from(&mut gx)
                .and(&*xs)
                .and(&*ys)
                .for_each(|gx, &x, &y| *gx *= derivative(x, y));
            grads.accumulate(ix, gx);
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let y = &*a + &*b;
        let (ia, ib) = (self.id, other.id);
        self.tape.push(y, &[self, other], move |g, grads| {
            grads.accumulate_with(ia, || g.clone());
            grads.accumulate_with(ib, || g.clone());
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let y = &*a - &*b;
        let (ia, ib) = (self.id, other.id);
        self.tape.push(y, &[self, other], move |g, grads| {
            grads.accumulate_with(ia, || g.clone());
            grads.accumulate_with(ib, || -g);
        })
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let y = &*a * &*b;
        let (ia, ib) = (self.id, other.id);
        self.tape.push(y, &[self, other], move |g, grads| {
            grads.accumulate_with(ia, || g * &*b);
            grads.accumulate_with(ib, || g * &*a);
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = &*self.value() * c;
        let ix = self.id;
        self.tape
            .push(y, &[self], move |g, grads| grads.accumulate(ix, g * c))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let c = last_dim(x.shape());
        assert_eq!(b.shape(), &[c], "add_bias: bias must match last axis");
        let mut y = (*x).clone();
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in view2_mut(&mut y, c).rows_mut() {
            row += &b1;
        }
        let (ix, ib) = (self.id, bias.id);
        self.tape.push(y, &[self, bias], move |g, grads| {
            grads.accumulate_with(ix, || g.clone());
            grads.accumulate_with(ib, || view2(g, c).sum_axis(Axis(0)).into_dyn());
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| if x < 0.0 { 0.0 } else { x }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Parametric ReLU with a single learned slope.
    pub fn prelu(self, slope: Var<'t>) -> Var<'t> {
        let x = self.value();
        let a = slope.item();
        let y = x.mapv(|v| if v >= 0.0 { v } else { a * v });
        let (ix, ia) = (self.id, slope.id);
        self.tape.push(y, &[self, slope], move |g, grads| {
            grads.accumulate_with(ix, || {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&*x).for_each(|gx, &v| {
                    if v < 0.0 {
                        *gx *= a
                    }
                });
                gx
            });
            grads.accumulate_with(ia, || {
                let s: f64 = g
                    .iter()
                    .zip(x.iter())
                    .filter(|(_, &v)| v < 0.0)
                    .map(|(g, v)| g * v)
                    .sum();
                ArrayD::from_elem(IxDyn(&[1]), s)
            });
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let c = last_dim(x.shape());
        let mut y = (*x).clone();
        for mut row in view2_mut(&mut y, c).rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        let ys = Rc::new(y.clone());
        let ix = self.id;
        self.tape.push(y, &[self], move |g, grads| {
            let mut gx = g.clone();
            for (mut gr, yr) in view2_mut(&mut gx, c)
                .rows_mut()
                .into_iter()
                .zip(view2(&ys, c).rows())
            {
                let dot = gr.dot(&yr);
                gr.zip_mut_with(&yr, |gv, &yv| *gv = yv * (*gv - dot));
            }
            grads.accumulate(ix, gx);
        })
    }

    /// Sum of all elements as a zero-dimensional variable.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let y = ArrayD::from_elem(IxDyn(&[]), x.sum());
        let (ix, dim) = (self.id, x.raw_dim());
        self.tape.push(y, &[self], move |g, grads| {
            let gv = g.iter().next().copied().unwrap_or_default();
            grads.accumulate(ix, ArrayD::from_elem(dim.clone(), gv));
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.raw_dim();
        let y = (*x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ix = self.id;
        self.tape.push(y, &[self], move |g, grads| {
            grads.accumulate_with(ix, || {
                g.clone()
                    .into_shape_with_order(old.clone())
                    .expect("reshape backward")
            })
        })
    }

    /// Reorders axes; `axes[i]` names the input axis that becomes axis `i`.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let y = standard((*x).clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let ix = self.id;
        self.tape.push(y, &[self], move |g, grads| {
            grads.accumulate_with(ix, || standard(g.clone().permuted_axes(IxDyn(&inverse))))
        })
    }

    /// Concatenates along the last axis.
    pub fn concat_last(parts: &[Var<'t>]) -> Var<'t> {
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let axis = Axis(values[0].ndim() - 1);
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = standard(ndarray::concatenate(axis, &views).expect("concat_last: shape mismatch"));
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis.0]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].tape.push(y, parts, move |g, grads| {
            let mut start = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                grads.accumulate_with(id, || {
                    standard(
                        g.slice_axis(axis, ndarray::Slice::from(start..start + w))
                            .to_owned(),
                    )
                });
                start += w;
            }
        })
    }

    /// `x · Wᵀ` over the last axis of `x`, with `W` shaped `[out, in]`.
    pub fn matmul_t(self, weight: Var<'t>) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let mut shape = x.shape().to_vec();
        let fan_in = last_dim(&shape);
        let w2 = w.view().into_dimensionality::<Ix2>().expect("weight must be 2-D");
        assert_eq!(w2.ncols(), fan_in, "matmul_t: input width mismatch");
        let out = w2.nrows();
        let x2 = view2(&x, fan_in);
        *shape.last_mut().unwrap() = out;
        let y = x2.dot(&w2.t()).into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        let (ix, iw) = (self.id, weight.id);
        let xs = Rc::clone(&x);
        self.tape.push(y, &[self, weight], move |g, grads| {
            let g2 = view2(g, out);
            let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
            grads.accumulate_with(ix, || {
                g2.dot(&w2).into_dyn().into_shape_with_order(xs.raw_dim()).unwrap()
            });
            grads.accumulate_with(iw, || g2.t().dot(&view2(&xs, fan_in)).into_dyn());
        })
    }

    /// Affine map over the last axis.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let y = self.matmul_t(weight);
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    /// Batched matrix product of `[B, m, k]` with `[B, k, n]`, or with
    /// `[B, n, k]` when `transpose_rhs` is set.
    pub fn bmm(self, rhs: Var<'t>, transpose_rhs: bool) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: need matching [B, _, _]");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs { sb[1] } else { sb[2] };
        assert_eq!(if transpose_rhs { sb[2] } else { sb[1] }, k, "bmm: inner dimension mismatch");
        let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut y = ndarray::Array3::<f64>::zeros((batch, m, n));
        for i in 0..batch {
            let bi = b3.index_axis(Axis(0), i);
            let rhs_i = if transpose_rhs { bi.t() } else { bi };
            general_mat_mul(1.0, &a3.index_axis(Axis(0), i), &rhs_i, 0.0, &mut y.index_axis_mut(Axis(0), i));
        }
        let (ia, ib) = (self.id, rhs.id);
        self.tape.push(y.into_dyn(), &[self, rhs], move |g, grads| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            grads.accumulate_with(ia, || {
                let mut ga = ndarray::Array3::<f64>::zeros((batch, m, k));
                for i in 0..batch {
                    let gi = g3.index_axis(Axis(0), i);
                    let bi = b3.index_axis(Axis(0), i);
                    // C = A·B -> dA = G·Bᵀ ; C = A·Bᵀ -> dA = G·B
                    let rhs_i = if transpose_rhs { bi } else { bi.t() };
                    general_mat_mul(1.0, &gi, &rhs_i, 0.0, &mut ga.index_axis_mut(Axis(0), i));
                }
                ga.into_dyn()
            });
            grads.accumulate_with(ib, || {
                let mut gb = ndarray::Array3::<f64>::zeros(b3.raw_dim());
                for i in 0..batch {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = a3.index_axis(Axis(0), i);
                    let mut out = gb.index_axis_mut(Axis(0), i);
                    if transpose_rhs {
                        // dB = Gᵀ·A
                        general_mat_mul(1.0, &gi.t(), &ai, 0.0, &mut out);
                    } else {
                        // dB = Aᵀ·G
                        general_mat_mul(1.0, &ai.t(), &gi, 0.0, &mut out);
                    }
                }
                gb.into_dyn()
            });
        })
    }
}
