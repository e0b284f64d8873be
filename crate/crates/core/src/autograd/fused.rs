//! Fused operations with hand-written backward passes: normalisation,
//! framing/overlap-add, chunking, temporal resampling and the scale-invariant
//! SDR used as training objective.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::{Array, Var};

/// Number of frames produced when framing `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// How many frames of `[frames, win]` at stride `hop` cover each output sample.
pub(crate) fn overlap_counts(frames: usize, win: usize, hop: usize, out_len: usize) -> Vec<f64> {
    let mut counts = vec![0.0; out_len];
    for l in 0..frames {
        for j in 0..win {
            if let Some(c) = counts.get_mut(l * hop + j) {
                *c += 1.0;
            }
        }
    }
    counts
}

/// Chunk layout for segmentation with window `k` and hop `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub frames: usize,
    pub chunk: usize,
    pub chunks: usize,
    pub pad: usize,
}

impl ChunkLayout {
    pub fn new(frames: usize, chunk: usize) -> Self {
        assert!(chunk >= 2 && chunk % 2 == 0, "chunk length must be even and >= 2");
        let hop = chunk / 2;
        let chunks = frames.saturating_sub(chunk).div_ceil(hop) + 1;
        let padded = (chunks - 1) * hop + chunk;
        Self {
            frames,
            chunk,
            chunks,
            pad: padded - frames,
        }
    }

    pub fn hop(&self) -> usize {
        self.chunk / 2
    }

    /// Number of chunk positions covering each (unpadded) frame.
    pub fn coverage(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.frames];
        for p in 0..self.chunks {
            for k in 0..self.chunk {
                if let Some(c) = counts.get_mut(p * self.hop() + k) {
                    *c += 1.0;
                }
            }
        }
        counts
    }
}

fn slice(a: &Array) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

impl<'t> Var<'t> {
    /// Normalises each batch item over all its non-batch elements (one group)
    /// and applies a per-channel affine map on the last axis.
    pub fn group_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let shape = x.shape().to_vec();
        let batch = shape[0];
        let c = *shape.last().unwrap();
        let per = x.len() / batch.max(1);
        let mut y = Array::zeros(x.raw_dim());
        let mut xhat = Array::zeros(x.raw_dim());
        let mut inv_std = vec![0.0; batch];
        {
            let (xs, ys, hs) = (slice(&x), slice_mut(&mut y), slice_mut(&mut xhat));
            let (gs, bs) = (slice(&gv), slice(&bv));
            for b in 0..batch {
                let seg = &xs[b * per..(b + 1) * per];
                let mean = seg.iter().sum::<f64>() / per as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[b] = istd;
                for i in 0..per {
                    let h = (seg[i] - mean) * istd;
                    hs[b * per + i] = h;
                    ys[b * per + i] = h * gs[i % c] + bs[i % c];
                }
            }
        }
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        self.tape.push(y, &[self, gamma, beta], move |g, grads| {
            let (gs_, hs) = (slice(g), slice(&xhat));
            let gam = slice(&gv);
            if grads.wants(ig) || grads.wants(ib) {
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..gs_.len() {
                    dg[i % c] += gs_[i] * hs[i];
                    db[i % c] += gs_[i];
                }
                grads.accumulate(ig, Array::from_shape_vec(IxDyn(&[c]), dg).unwrap());
                grads.accumulate(ib, Array::from_shape_vec(IxDyn(&[c]), db).unwrap());
            }
            grads.accumulate_with(ix, || {
                let mut gx = Array::zeros(IxDyn(&shape));
                let out = slice_mut(&mut gx);
                for b in 0..batch {
                    let r = b * per..(b + 1) * per;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in r.clone() {
                        let gh = gs_[i] * gam[i % c];
                        m1 += gh;
                        m2 += gh * hs[i];
                    }
                    m1 /= per as f64;
                    m2 /= per as f64;
                    for i in r {
                        let gh = gs_[i] * gam[i % c];
                        out[i] = inv_std[b] * (gh - m1 - hs[i] * m2);
                    }
                }
                gx
            });
        })
    }

    /// Per-channel normalisation over every position of `[.., C]`. Uses the
    /// batch statistics unless fixed `(mean, var)` are supplied. Returns the
    /// output and the statistics that were applied.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        fixed: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let c = *x.shape().last().unwrap();
        let rows = x.len() / c;
        let xs = slice(&x);
        let (mean, var) = match fixed {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, v) in xs.iter().enumerate() {
                    mean[i % c] += v;
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for (i, v) in xs.iter().enumerate() {
                    var[i % c] += (v - mean[i % c]).powi(2);
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
        };
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Array::zeros(x.raw_dim());
        let mut y = Array::zeros(x.raw_dim());
        {
            let (hs, ys) = (slice_mut(&mut xhat), slice_mut(&mut y));
            let (gs, bs) = (slice(&gv), slice(&bv));
            for (i, v) in xs.iter().enumerate() {
                let h = (v - mean[i % c]) * inv[i % c];
                hs[i] = h;
                ys[i] = h * gs[i % c] + bs[i % c];
            }
        }
        let batch_stats = fixed.is_none();
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        let inv_c = inv.clone();
        let out = self.tape.push(y, &[self, gamma, beta], move |g, grads| {
            let (gs_, hs, gam) = (slice(g), slice(&xhat), slice(&gv));
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for i in 0..gs_.len() {
                dg[i % c] += gs_[i] * hs[i];
                db[i % c] += gs_[i];
            }
            grads.accumulate_with(ix, || {
                let mut gx = Array::zeros(g.raw_dim());
                let out = slice_mut(&mut gx);
                for i in 0..gs_.len() {
                    let ch = i % c;
                    out[i] = if batch_stats {
                        gam[ch] * inv_c[ch] * (gs_[i] - db[ch] / rows as f64 - hs[i] * dg[ch] / rows as f64)
                    } else {
                        gam[ch] * inv_c[ch] * gs_[i]
                    };
                }
                gx
            });
            grads.accumulate(ig, Array::from_shape_vec(IxDyn(&[c]), dg).unwrap());
            grads.accumulate(ib, Array::from_shape_vec(IxDyn(&[c]), db).unwrap());
        });
        (out, mean, var)
    }

    /// Depthwise temporal convolution of `[B, T, C]` with `[C, k]` kernels
    /// (odd `k`), edge-replicated padding and a per-channel bias.
    pub fn depthwise_conv(self, kernel: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let (kv, bv) = (kernel.value(), bias.value());
        let (batch, steps, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = kv.shape()[1];
        assert!(k % 2 == 1 && kv.shape()[0] == c, "depthwise_conv: kernel must be [C, odd]");
        let half = (k / 2) as isize;
        let src = move |t: usize, j: usize| -> usize {
            (t as isize + j as isize - half).clamp(0, steps as isize - 1) as usize
        };
        let mut y = Array::zeros(x.raw_dim());
        {
            let (xs, ys, ks, bs) = (slice(&x), slice_mut(&mut y), slice(&kv), slice(&bv));
            for b in 0..batch {
                for t in 0..steps {
                    for ch in 0..c {
                        let mut acc = bs[ch];
                        for j in 0..k {
                            acc += ks[ch * k + j] * xs[(b * steps + src(t, j)) * c + ch];
                        }
                        ys[(b * steps + t) * c + ch] = acc;
                    }
                }
            }
        }
        let (ix, ik, ib) = (self.id, kernel.id, bias.id);
        self.tape.push(y, &[self, kernel, bias], move |g, grads| {
            let (gs_, xs, ks) = (slice(g), slice(&x), slice(&kv));
            let mut gx = vec![0.0; xs.len()];
            let mut gk = vec![0.0; ks.len()];
            let mut gb = vec![0.0; c];
            for b in 0..batch {
                for t in 0..steps {
                    for ch in 0..c {
                        let gv = gs_[(b * steps + t) * c + ch];
                        gb[ch] += gv;
                        for j in 0..k {
                            let xi = (b * steps + src(t, j)) * c + ch;
                            gk[ch * k + j] += gv * xs[xi];
                            gx[xi] += gv * ks[ch * k + j];
                        }
                    }
                }
            }
            grads.accumulate(ix, Array::from_shape_vec(x.raw_dim(), gx).unwrap());
            grads.accumulate(ik, Array::from_shape_vec(kv.raw_dim(), gk).unwrap());
            grads.accumulate(ib, Array::from_shape_vec(IxDyn(&[c]), gb).unwrap());
        })
    }

    /// Slices `[B, T]` into `[B, L, win]` frames at stride `hop`.
    pub fn frame(self, win: usize, hop: usize) -> Var<'t> {
        let x = self.value();
        let (batch, len) = (x.shape()[0], x.shape()[1]);
        let frames = frame_count(len, win, hop);
        assert!(frames > 0, "frame: signal shorter than one window");
        let xs = slice(&x);
        let mut y = Array::zeros(IxDyn(&[batch, frames, win]));
        {
            let ys = slice_mut(&mut y);
            for b in 0..batch {
                for l in 0..frames {
                    let dst = (b * frames + l) * win;
                    let src = b * len + l * hop;
                    ys[dst..dst + win].copy_from_slice(&xs[src..src + win]);
                }
            }
        }
        let ix = self.id;
        self.tape.push(y, &[self], move |g, grads| {
            grads.accumulate_with(ix, || overlap_add_raw(g, hop, len, None))
        })
    }

    /// Sums `[B, L, win]` frames at stride `hop` into `[B, out_len]`. With
    /// `normalize`, each sample is divided by the number of frames covering it.
    pub fn overlap_add(self, hop: usize, out_len: usize, normalize: bool) -> Var<'t> {
        let f = self.value();
        let (frames, win) = (f.shape()[1], f.shape()[2]);
        let counts = normalize.then(|| {
            overlap_counts(frames, win, hop, out_len)
                .into_iter()
                .map(|c| if c > 0.0 { 1.0 / c } else { 0.0 })
                .collect::<Vec<_>>()
        });
        let y = overlap_add_raw(&f, hop, out_len, counts.as_deref());
        let ix = self.id;
        let batch = f.shape()[0];
        self.tape.push(y, &[self], move |g, grads| {
            grads.accumulate_with(ix, || {
                let gs_ = slice(g);
                let mut gf = Array::zeros(IxDyn(&[batch, frames, win]));
                let out = slice_mut(&mut gf);
                for b in 0..batch {
                    for l in 0..frames {
                        for j in 0..win {
                            let t = l * hop + j;
                            if t < out_len {
                                let w = counts.as_ref().map_or(1.0, |c| c[t]);
                                out[(b * frames + l) * win + j] = gs_[b * out_len + t] * w;
                            }
                        }
                    }
                }
                gf
            })
        })
    }

    /// Splits `[B, L, D]` into overlapping chunks `[B, P, K, D]` with hop
    /// `K / 2`, zero-padding the tail.
    pub fn segment(self, chunk: usize) -> (Var<'t>, ChunkLayout) {
        let x = self.value();
        let (batch, frames, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let layout = ChunkLayout::new(frames, chunk);
        let (p_n, hop) = (layout.chunks, layout.hop());
        let xs = slice(&x);
        let mut y = Array::zeros(IxDyn(&[batch, p_n, chunk, d]));
        {
            let ys = slice_mut(&mut y);
            for b in 0..batch {
                for p in 0..p_n {
                    for k in 0..chunk {
                        let t = p * hop + k;
                        if t < frames {
                            let dst = ((b * p_n + p) * chunk + k) * d;
                            let src = (b * frames + t) * d;
                            ys[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                        }
                    }
                }
            }
        }
        let ix = self.id;
        let out = self.tape.push(y, &[self], move |g, grads| {
            grads.accumulate_with(ix, || chunk_sum(g, layout, batch, d, None))
        });
        (out, layout)
    }

    /// Inverse of [`Var::segment`]: overlap-adds chunks and divides every
    /// frame by its chunk coverage, dropping the padding.
    pub fn aggregate(self, layout: ChunkLayout) -> Var<'t> {
        let c = self.value();
        let (batch, d) = (c.shape()[0], c.shape()[3]);
        assert_eq!(c.shape()[1], layout.chunks, "aggregate: chunk count mismatch");
        assert_eq!(c.shape()[2], layout.chunk, "aggregate: chunk length mismatch");
        let inv: Vec<f64> = layout.coverage().into_iter().map(|v| 1.0 / v).collect();
        let y = chunk_sum(&c, layout, batch, d, Some(&inv));
        let ix = self.id;
        self.tape.push(y, &[self], move |g, grads| {
            grads.accumulate_with(ix, || {
                let gs_ = slice(g);
                let (p_n, k_n, hop) = (layout.chunks, layout.chunk, layout.hop());
                let mut gc = Array::zeros(IxDyn(&[batch, p_n, k_n, d]));
                let out = slice_mut(&mut gc);
                for b in 0..batch {
                    for p in 0..p_n {
                        for k in 0..k_n {
                            let t = p * hop + k;
                            if t < layout.frames {
                                let dst = ((b * p_n + p) * k_n + k) * d;
                                let src = (b * layout.frames + t) * d;
                                for i in 0..d {
                                    out[dst + i] = gs_[src + i] * inv[t];
                                }
                            }
                        }
                    }
                }
                gc
            })
        })
    }

    /// Resamples `[B, F, C]` along time to `[B, L, C]`, where output frame `j`
    /// is `Σ w · x[src]` over `taps[j]`.
    pub fn resample_time(self, taps: Vec<Vec<(usize, f64)>>) -> Var<'t> {
        let x = self.value();
        let (batch, frames, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out_len = taps.len();
        let xs = slice(&x);
        let mut y = Array::zeros(IxDyn(&[batch, out_len, c]));
        {
            let ys = slice_mut(&mut y);
            for b in 0..batch {
                for (j, tap) in taps.iter().enumerate() {
                    for &(src, w) in tap {
                        assert!(src < frames, "resample_time: tap out of range");
                        for ch in 0..c {
                            ys[(b * out_len + j) * c + ch] += w * xs[(b * frames + src) * c + ch];
                        }
                    }
                }
            }
        }
        let ix = self.id;
        self.tape.push(y, &[self], move |g, grads| {
            grads.accumulate_with(ix, || {
                let gs_ = slice(g);
                let mut gx = Array::zeros(IxDyn(&[batch, frames, c]));
                let out = slice_mut(&mut gx);
                for b in 0..batch {
                    for (j, tap) in taps.iter().enumerate() {
                        for &(src, w) in tap {
                            for ch in 0..c {
                                out[(b * frames + src) * c + ch] += w * gs_[(b * out_len + j) * c + ch];
                            }
                        }
                    }
                }
                gx
            })
        })
    }

    /// Scale-invariant SDR in dB of each row of `[B, T]` estimates against
    /// fixed references. Returns `[B]`.
    pub fn si_sdr(self, reference: &Array, eps: f64) -> Var<'t> {
        let est = self.value();
        assert_eq!(est.shape(), reference.shape(), "si_sdr: shape mismatch");
        let (batch, len) = (est.shape()[0], est.shape()[1]);
        let (es, rs) = (slice(&est), slice(reference));
        let mut out = vec![0.0; batch];
        let mut parts = Vec::with_capacity(batch);
        for b in 0..batch {
            let p = SiSdrParts::new(&es[b * len..(b + 1) * len], &rs[b * len..(b + 1) * len], eps);
            out[b] = p.value();
            parts.push(p);
        }
        let reference = Rc::new(reference.clone());
        let ix = self.id;
        self.tape.push(Array::from_shape_vec(IxDyn(&[batch]), out).unwrap(), &[self], move |g, grads| {
            let (es, rs) = (slice(&est), slice(&reference));
            let mut gx = vec![0.0; es.len()];
            let k = 10.0 / std::f64::consts::LN_10;
            for (b, p) in parts.iter().enumerate() {
                let gb = g[[b]] * k;
                for i in 0..len {
                    let (e, r) = (es[b * len + i], rs[b * len + i]);
                    let res = e - p.alpha * r;
                    let d_num = 2.0 * p.alpha * p.ref_energy * r / p.ref_norm;
                    let d_den = 2.0 * res - 2.0 * p.res_dot_ref * r / p.ref_norm;
                    gx[b * len + i] = gb * (d_num / p.num - d_den / p.den);
                }
            }
            grads.accumulate(ix, Array::from_shape_vec(IxDyn(&[batch, len]), gx).unwrap());
        })
    }

    /// Cosine similarity between matching rows (last axis) of two arrays.
    /// The denominator is `‖a‖·‖b‖ + eps`.
    pub fn cosine(self, other: Var<'t>, eps: f64) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "cosine: shape mismatch");
        let c = *a.shape().last().unwrap();
        let rows = a.len() / c;
        let (as_, bs) = (slice(&a), slice(&b));
        let mut stats = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ar, br) = (&as_[r * c..(r + 1) * c], &bs[r * c..(r + 1) * c]);
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = br.iter().map(|x| x * x).sum::<f64>().sqrt();
            let den = na * nb + eps;
            out.push(dot / den);
            stats.push((dot, na, nb, den));
        }
        let mut shape = a.shape().to_vec();
        shape.pop();
        let (ia, ib) = (self.id, other.id);
        self.tape.push(Array::from_shape_vec(IxDyn(&shape), out).unwrap(), &[self, other], move |g, grads| {
            let gs_ = slice(g);
            let (as_, bs) = (slice(&a), slice(&b));
            let grad_for = |x: &[f64], y: &[f64], flip: bool| {
                let mut gx = vec![0.0; x.len()];
                for r in 0..rows {
                    let (dot, na, nb, den) = stats[r];
                    let (nx, ny) = if flip { (nb, na) } else { (na, nb) };
                    for i in 0..c {
                        let xi = x[r * c + i];
                        let unit = if nx > 0.0 { xi / nx } else { 0.0 };
                        let d = y[r * c + i] / den - dot * ny * unit / (den * den);
                        gx[r * c + i] = gs_[r] * d;
                    }
                }
                Array::from_shape_vec(a.raw_dim(), gx).unwrap()
            };
            grads.accumulate_with(ia, || grad_for(as_, bs, false));
            grads.accumulate_with(ib, || grad_for(bs, as_, true));
        })
    }
}

fn overlap_add_raw(f: &Array, hop: usize, out_len: usize, weights: Option<&[f64]>) -> Array {
    let (batch, frames, win) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let fs = slice(f);
    let mut y = Array::zeros(IxDyn(&[batch, out_len]));
    let ys = slice_mut(&mut y);
    for b in 0..batch {
        for l in 0..frames {
            for j in 0..win {
                let t = l * hop + j;
                if t < out_len {
                    ys[b * out_len + t] += fs[(b * frames + l) * win + j];
                }
            }
        }
    }
    if let Some(w) = weights {
        for b in 0..batch {
            for t in 0..out_len {
                ys[b * out_len + t] *= w[t];
            }
        }
    }
    y
}

/// Overlap-adds `[B, P, K, D]` chunks into `[B, L, D]`, optionally weighting
/// each frame.
fn chunk_sum(c: &Array, layout: ChunkLayout, batch: usize, d: usize, weights: Option<&[f64]>) -> Array {
    let cs = slice(c);
    let (p_n, k_n, hop, frames) = (layout.chunks, layout.chunk, layout.hop(), layout.frames);
    let mut y = ArrayD::zeros(IxDyn(&[batch, frames, d]));
    let ys = slice_mut(&mut y);
    for b in 0..batch {
        for p in 0..p_n {
            for k in 0..k_n {
                let t = p * hop + k;
                if t < frames {
                    let src = ((b * p_n + p) * k_n + k) * d;
                    let dst = (b * frames + t) * d;
                    for i in 0..d {
                        ys[dst + i] += cs[src + i];
                    }
                }
            }
        }
        if let Some(w) = weights {
            for t in 0..frames {
                for i in 0..d {
                    ys[(b * frames + t) * d + i] *= w[t];
                }
            }
        }
    }
    y
}

/// Intermediate quantities of the ε-stabilised SI-SDR of one signal pair.
pub(crate) struct SiSdrParts {
    alpha: f64,
    ref_energy: f64,
    ref_norm: f64,
    res_dot_ref: f64,
    num: f64,
    den: f64,
}

impl SiSdrParts {
    pub(crate) fn new(est: &[f64], reference: &[f64], eps: f64) -> Self {
        let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
        let ref_norm = ref_energy + eps;
        let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
        let alpha = dot / ref_norm;
        let mut res_energy = 0.0;
        let mut res_dot_ref = 0.0;
        for (e, r) in est.iter().zip(reference) {
            let res = e - alpha * r;
            res_energy += res * res;
            res_dot_ref += res * r;
        }
        Self {
            alpha,
            ref_energy,
            ref_norm,
            res_dot_ref,
            num: alpha * alpha * ref_energy + eps,
            den: res_energy + eps,
        }
    }

    pub(crate) fn value(&self) -> f64 {
        10.0 * (self.num / self.den).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::grad_check;
    use super::super::Tape;
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn weights(shape: &[usize], seed: u64) -> Array {
        random(shape, seed + 1000)
    }

    #[test]
    fn group_norm_gradients() {
        let x = random(&[2, 3, 4], 1);
        let gamma = random(&[4], 2);
        let beta = random(&[4], 3);
        let w = weights(&[2, 3, 4], 4);
        let (g2, b2, w2) = (gamma.clone(), beta.clone(), w.clone());
        assert!(grad_check(&x, move |v| {
            let t = v.tape();
            v.group_norm(t.constant(g2.clone()), t.constant(b2.clone()), 1e-8).mul(t.constant(w2.clone())).sum()
        }) < 1e-6);
        let (x2, b2, w2) = (x.clone(), beta.clone(), w.clone());
        assert!(grad_check(&gamma, move |v| {
            let t = v.tape();
            t.constant(x2.clone()).group_norm(v, t.constant(b2.clone()), 1e-8).mul(t.constant(w2.clone())).sum()
        }) < 1e-6);
    }

    #[test]
    fn group_norm_output_is_normalised() {
        let tape = Tape::new();
        let x = tape.constant(random(&[2, 5, 3], 5));
        let y = x.group_norm(tape.constant(Array::ones(IxDyn(&[3]))), tape.constant(Array::zeros(IxDyn(&[3]))), 0.0);
        let v = y.value();
        for b in 0..2 {
            let s = v.index_axis(ndarray::Axis(0), b);
            assert!(s.mean().unwrap().abs() < 1e-12);
            assert!((s.mapv(|x| x * x).mean().unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_gradients_train_and_eval() {
        let x = random(&[2, 4, 3], 6);
        let w = weights(&[2, 4, 3], 7);
        let gamma = random(&[3], 8);
        let beta = random(&[3], 9);
        for fixed in [false, true] {
            let (g2, b2, w2) = (gamma.clone(), beta.clone(), w.clone());
            let err = grad_check(&x, move |v| {
                let t = v.tape();
                let stats = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
                let f = fixed.then_some((stats.0.as_slice(), stats.1.as_slice()));
                v.batch_norm(t.constant(g2.clone()), t.constant(b2.clone()), f, 1e-5).0.mul(t.constant(w2.clone())).sum()
            });
            assert!(err < 1e-6, "fixed={fixed} err={err}");
        }
    }

    #[test]
    fn depthwise_conv_gradients_and_constant_input() {
        let x = random(&[2, 5, 3], 10);
        let k = random(&[3, 3], 11);
        let b = random(&[3], 12);
        let w = weights(&[2, 5, 3], 13);
        let (k2, b2, w2) = (k.clone(), b.clone(), w.clone());
        assert!(grad_check(&x, move |v| {
            let t = v.tape();
            v.depthwise_conv(t.constant(k2.clone()), t.constant(b2.clone())).mul(t.constant(w2.clone())).sum()
        }) < 1e-7);
        let (x2, b2, w2) = (x.clone(), b.clone(), w.clone());
        assert!(grad_check(&k, move |v| {
            let t = v.tape();
            t.constant(x2.clone()).depthwise_conv(v, t.constant(b2.clone())).mul(t.constant(w2.clone())).sum()
        }) < 1e-7);

        // constant over time stays constant with edge replication
        let tape = Tape::new();
        let mut c = Array::zeros(IxDyn(&[1, 6, 3]));
        for t in 0..6 {
            for ch in 0..3 {
                c[[0, t, ch]] = ch as f64 + 0.5;
            }
        }
        let y = tape.constant(c).depthwise_conv(tape.constant(k), tape.constant(b)).value();
        for t in 1..6 {
            for ch in 0..3 {
                assert_eq!(y[[0, t, ch]], y[[0, 0, ch]]);
            }
        }
    }

    #[test]
    fn frame_and_overlap_add_are_adjoint() {
        let x = random(&[2, 20], 14);
        let f = random(&[2, 4, 8], 15);
        let tape = Tape::new();
        let fx = tape.constant(x.clone()).frame(8, 4).value();
        let of = tape.constant(f.clone()).overlap_add(4, 20, false).value();
        let lhs: f64 = fx.iter().zip(f.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(of.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let w = weights(&[2, 20], 16);
        assert!(grad_check(&f, move |v| v.overlap_add(4, 20, true).mul(v.tape().constant(w.clone())).sum()) < 1e-7);
        let w = weights(&[2, 4, 8], 17);
        assert!(grad_check(&x, move |v| v.frame(8, 4).mul(v.tape().constant(w.clone())).sum()) < 1e-7);
    }

    #[test]
    fn normalised_overlap_add_inverts_framing() {
        let x = random(&[1, 19], 18);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).frame(4, 2).overlap_add(2, 19, true).value();
        // the last sample is not covered by any frame
        for t in 0..18 {
            assert!((y[[0, t]] - x[[0, t]]).abs() < 1e-12);
        }
        assert_eq!(y[[0, 18]], 0.0);
    }

    #[test]
    fn segment_aggregate_gradients() {
        let x = random(&[2, 7, 3], 19);
        let w = weights(&[2, 3, 4, 3], 20);
        assert!(grad_check(&x, move |v| v.segment(4).0.mul(v.tape().constant(w.clone())).sum()) < 1e-7);
        let c = random(&[2, 3, 4, 3], 21);
        let layout = ChunkLayout::new(7, 4);
        let w = weights(&[2, 7, 3], 22);
        assert!(grad_check(&c, move |v| v.aggregate(layout).mul(v.tape().constant(w.clone())).sum()) < 1e-7);
    }

    #[test]
    fn resample_gradients() {
        let x = random(&[1, 3, 2], 23);
        let taps = vec![vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)], vec![(2, 1.0)]];
        let w = weights(&[1, 4, 2], 24);
        assert!(grad_check(&x, move |v| v.resample_time(taps.clone()).mul(v.tape().constant(w.clone())).sum()) < 1e-7);
    }

    #[test]
    fn si_sdr_gradient_matches_finite_differences() {
        let est = random(&[2, 16], 25);
        let reference = random(&[2, 16], 26);
        let err = grad_check(&est, move |v| v.si_sdr(&reference, 1e-12).sum());
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn cosine_gradients() {
        let a = random(&[3, 4], 27);
        let b = random(&[3, 4], 28);
        let b2 = b.clone();
        assert!(grad_check(&a, move |v| v.cosine(v.tape().constant(b2.clone()), 1e-8).sum()) < 1e-6);
        let a2 = a.clone();
        assert!(grad_check(&b, move |v| v.tape().constant(a2.clone()).cosine(v, 1e-8).sum()) < 1e-6);
    }
}
