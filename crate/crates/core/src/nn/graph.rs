//! A small reverse-mode tape over batched `(n, c, h, w)` activations.
//!
//! Only the operations the denoiser needs are provided. Per-sample work is
//! spread with [`crate::par::map_indexed`]; parameter gradients are reduced
//! over samples in index order so results do not depend on scheduling.

use crate::error::{bail, Result};
use crate::par::{self, Execution};

use super::params::{Gradients, ParamId, ParamStore};

/// Batched activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: ParamId,
        k: usize,
        stride: usize,
    },
    GroupNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    Concat(Var, Var),
    Upsample(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
}

/// Forward computation record.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    exec: Execution,
    recording: bool,
}

fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let pad = k as isize / 2;
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let pad = k as isize / 2;
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore, exec: Execution, recording: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            exec,
            recording,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, shape: Shape, value: Vec<f64>) -> Result<Var> {
        if shape.len() != value.len() {
            bail!(Shape, "input shape {:?} holds {} values, got {}", shape, shape.len(), value.len());
        }
        Ok(self.push(shape, value, Op::Input))
    }

    /// Same-padded convolution; weight `(cout, cin, k, k)`, bias `(cout)`.
    pub fn conv(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        let wshape = &self.store.get(w).shape;
        let (cout, cin, k) = (wshape[0], wshape[1], wshape[2]);
        if cin != xs.c {
            bail!(Shape, "conv {} expects {} channels, got {}", self.store.get(w).name, cin, xs.c);
        }
        let (ho, wo) = (conv_out(xs.h, k, stride), conv_out(xs.w, k, stride));
        let out = Shape::new(xs.n, cout, ho, wo);
        let wv = self.store.value(w);
        let bv = self.store.value(b);
        let xv = &self.nodes[x.0].value;
        let kk = cin * k * k;
        let p = ho * wo;
        let direct = k == 1 && stride == 1;
        let per: Vec<Vec<f64>> = par::map_indexed(self.exec, xs.n, |s| {
            let xsamp = &xv[s * xs.sample_len()..(s + 1) * xs.sample_len()];
            let mut y = vec![0.0; cout * p];
            for (co, row) in y.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[co]);
            }
            if direct {
                gemm(cout, kk, p, wv, (kk, 1), xsamp, (p, 1), 1.0, &mut y);
            } else {
                let mut cols = vec![0.0; kk * p];
                im2col(xsamp, cin, xs.h, xs.w, k, stride, ho, wo, &mut cols);
                gemm(cout, kk, p, wv, (kk, 1), &cols, (p, 1), 1.0, &mut y);
            }
            y
        });
        Ok(self.push(out, per.concat(), Op::Conv { x, w, b, k, stride }))
    }

    pub fn group_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        if groups == 0 || s.c % groups != 0 {
            bail!(Shape, "{} channels not divisible into {} groups", s.c, groups);
        }
        let cg = s.c / groups;
        let m = cg * s.plane();
        let g = self.store.value(gamma);
        let b = self.store.value(beta);
        let xv = &self.nodes[x.0].value;
        let mut xhat = vec![0.0; s.len()];
        let mut rstd = vec![0.0; s.n * groups];
        let mut y = vec![0.0; s.len()];
        for n in 0..s.n {
            for gi in 0..groups {
                let off = n * s.sample_len() + gi * m;
                let seg = &xv[off..off + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
                let r = 1.0 / (var + 1e-5).sqrt();
                rstd[n * groups + gi] = r;
                for (j, v) in seg.iter().enumerate() {
                    let c = gi * cg + j / s.plane();
                    let xh = (v - mean) * r;
                    xhat[off + j] = xh;
                    y[off + j] = g[c] * xh + b[c];
                }
            }
        }
        Ok(self.push(
            s,
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let y = self.nodes[x.0].value.iter().map(|v| silu(*v)).collect();
        self.push(s, y, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if s != self.shape(b) {
            bail!(Shape, "add {:?} + {:?}", s, self.shape(b));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(p, q)| p + q).collect();
        Ok(self.push(s, y, Op::Add(a, b)))
    }

    /// Broadcast-adds a `(n, c, 1, 1)` vector over the spatial plane.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.shape(x);
        let vs = self.shape(v);
        if vs != Shape::new(s.n, s.c, 1, 1) {
            bail!(Shape, "channel bias {:?} does not fit {:?}", vs, s);
        }
        let vv = self.value(v);
        let y = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, a)| a + vv[i / s.plane()])
            .collect();
        Ok(self.push(s, y, Op::AddChannel { x, v }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            bail!(Shape, "concat {:?} with {:?}", sa, sb);
        }
        let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut y = Vec::with_capacity(out.len());
        for n in 0..sa.n {
            y.extend_from_slice(&self.value(a)[n * sa.sample_len()..(n + 1) * sa.sample_len()]);
            y.extend_from_slice(&self.value(b)[n * sb.sample_len()..(n + 1) * sb.sample_len()]);
        }
        Ok(self.push(out, y, Op::Concat(a, b)))
    }

    /// Nearest ×2 upsampling cropped to `(h, w)`.
    pub fn upsample_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if h > 2 * s.h || w > 2 * s.w {
            bail!(Shape, "cannot upsample {:?} to {}x{}", s, h, w);
        }
        let out = Shape::new(s.n, s.c, h, w);
        let xv = self.value(x);
        let mut y = vec![0.0; out.len()];
        for nc in 0..s.n * s.c {
            for i in 0..h {
                for j in 0..w {
                    y[(nc * h + i) * w + j] = xv[(nc * s.h + (i / 2).min(s.h - 1)) * s.w + (j / 2).min(s.w - 1)];
                }
            }
        }
        Ok(self.push(out, y, Op::Upsample(x)))
    }

    /// Single-head dot-product attention over spatial positions; `q`, `k`
    /// and `v` are `(n, c, h, w)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = self.shape(q);
        if self.shape(k) != s || self.shape(v) != s {
            bail!(Shape, "attention operands differ in shape");
        }
        let p = s.plane();
        let scale = 1.0 / (s.c as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; s.n * p * p];
        let mut y = vec![0.0; s.len()];
        for n in 0..s.n {
            let off = n * s.sample_len();
            let a = &mut probs[n * p * p..(n + 1) * p * p];
            // scores[i, j] = Σ_c q[c, i] k[c, j]
            gemm(p, s.c, p, &qv[off..], (1, p), &kv[off..], (p, 1), 0.0, a);
            for row in a.chunks_mut(p) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v * scale));
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r * scale - mx).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
            }
            // y[c, i] = Σ_j v[c, j] a[i, j]
            gemm(s.c, p, p, &vv[off..], (p, 1), a, (1, p), 0.0, &mut y[off..off + s.sample_len()]);
        }
        Ok(self.push(s, y, Op::Attention { q, k, v, probs }))
    }

    /// Back-propagates `seed` (gradient of the loss w.r.t. `out`).
    pub fn backward(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        if !self.recording {
            bail!(Invalid, "backward on a tape that did not record its forward pass");
        }
        if seed.len() != self.shape(out).len() {
            bail!(Shape, "seed has {} values for output {:?}", seed.len(), self.shape(out));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        let mut pgrads: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];

        fn acc(slot: &mut Option<Vec<f64>>, add: &[f64]) {
            match slot {
                Some(g) => g.iter_mut().zip(add).for_each(|(a, b)| *a += b),
                None => *slot = Some(add.to_vec()),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let s = node.shape;
            match &node.op {
                Op::Input => {}
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = gy.iter().zip(xv).map(|(g, v)| g * silu_grad(*v)).collect();
                    acc(&mut grads[x.0], &gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], &gy);
                    acc(&mut grads[b.0], &gy);
                }
                Op::AddChannel { x, v } => {
                    acc(&mut grads[x.0], &gy);
                    let gv: Vec<f64> = gy.chunks(s.plane()).map(|c| c.iter().sum()).collect();
                    acc(&mut grads[v.0], &gv);
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let mut ga = Vec::with_capacity(sa.len());
                    let mut gb = Vec::with_capacity(sb.len());
                    for chunk in gy.chunks(s.sample_len()) {
                        ga.extend_from_slice(&chunk[..sa.sample_len()]);
                        gb.extend_from_slice(&chunk[sa.sample_len()..]);
                    }
                    acc(&mut grads[a.0], &ga);
                    acc(&mut grads[b.0], &gb);
                }
                Op::Upsample(x) => {
                    let xs = self.shape(*x);
                    let mut gx = vec![0.0; xs.len()];
                    for nc in 0..s.n * s.c {
                        for i in 0..s.h {
                            for j in 0..s.w {
                                gx[(nc * xs.h + (i / 2).min(xs.h - 1)) * xs.w + (j / 2).min(xs.w - 1)] +=
                                    gy[(nc * s.h + i) * s.w + j];
                            }
                        }
                    }
                    acc(&mut grads[x.0], &gx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let g = self.store.value(*gamma);
                    let cg = s.c / groups;
                    let m = cg * s.plane();
                    let mut dgamma = vec![0.0; s.c];
                    let mut dbeta = vec![0.0; s.c];
                    let mut gx = vec![0.0; s.len()];
                    for n in 0..s.n {
                        for gi in 0..*groups {
                            let off = n * s.sample_len() + gi * m;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..m {
                                let c = gi * cg + j / s.plane();
                                let d = gy[off + j];
                                dgamma[c] += d * xhat[off + j];
                                dbeta[c] += d;
                                let dxh = d * g[c];
                                sum_d += dxh;
                                sum_dx += dxh * xhat[off + j];
                            }
                            let r = rstd[n * groups + gi];
                            let (md, mdx) = (sum_d / m as f64, sum_dx / m as f64);
                            for j in 0..m {
                                let c = gi * cg + j / s.plane();
                                let dxh = gy[off + j] * g[c];
                                gx[off + j] = r * (dxh - md - xhat[off + j] * mdx);
                            }
                        }
                    }
                    acc(&mut pgrads[*gamma], &dgamma);
                    acc(&mut pgrads[*beta], &dbeta);
                    acc(&mut grads[x.0], &gx);
                }
                Op::Conv { x, w, b, k, stride } => {
                    let xs = self.shape(*x);
                    let (k, stride) = (*k, *stride);
                    let wv = self.store.value(*w);
                    let xv = self.value(*x);
                    let cout = s.c;
                    let kk = xs.c * k * k;
                    let p = s.plane();
                    let direct = k == 1 && stride == 1;
                    let per: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(self.exec, s.n, |n| {
                        let gys = &gy[n * s.sample_len()..(n + 1) * s.sample_len()];
                        let xsamp = &xv[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                        let mut dw = vec![0.0; cout * kk];
                        let mut dx = vec![0.0; xs.sample_len()];
                        if direct {
                            gemm(cout, p, kk, gys, (p, 1), xsamp, (1, p), 0.0, &mut dw);
                            gemm(kk, cout, p, wv, (1, kk), gys, (p, 1), 0.0, &mut dx);
                        } else {
                            let mut cols = vec![0.0; kk * p];
                            im2col(xsamp, xs.c, xs.h, xs.w, k, stride, s.h, s.w, &mut cols);
                            gemm(cout, p, kk, gys, (p, 1), &cols, (1, p), 0.0, &mut dw);
                            let mut dcols = vec![0.0; kk * p];
                            gemm(kk, cout, p, wv, (1, kk), gys, (p, 1), 0.0, &mut dcols);
                            col2im(&dcols, xs.c, xs.h, xs.w, k, stride, s.h, s.w, &mut dx);
                        }
                        (dw, dx)
                    });
                    let mut dw = vec![0.0; cout * kk];
                    let mut db = vec![0.0; cout];
                    let mut gx = Vec::with_capacity(xs.len());
                    for (n, (dwn, dxn)) in per.iter().enumerate() {
                        dw.iter_mut().zip(dwn).for_each(|(a, b)| *a += b);
                        gx.extend_from_slice(dxn);
                        let gys = &gy[n * s.sample_len()..(n + 1) * s.sample_len()];
                        for (co, row) in gys.chunks(p).enumerate() {
                            db[co] += row.iter().sum::<f64>();
                        }
                    }
                    acc(&mut pgrads[*w], &dw);
                    acc(&mut pgrads[*b], &db);
                    acc(&mut grads[x.0], &gx);
                }
                Op::Attention { q, k, v, probs } => {
                    let p = s.plane();
                    let scale = 1.0 / (s.c as f64).sqrt();
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = vec![0.0; s.len()];
                    let mut gk = vec![0.0; s.len()];
                    let mut gv = vec![0.0; s.len()];
                    for n in 0..s.n {
                        let off = n * s.sample_len();
                        let sl = s.sample_len();
                        let a = &probs[n * p * p..(n + 1) * p * p];
                        let gys = &gy[off..off + sl];
                        // gv[c, j] = Σ_i gy[c, i] a[i, j]
                        gemm(s.c, p, p, gys, (p, 1), a, (p, 1), 0.0, &mut gv[off..off + sl]);
                        // ga[i, j] = Σ_c gy[c, i] v[c, j]
                        let mut ga = vec![0.0; p * p];
                        gemm(p, s.c, p, gys, (1, p), &vv[off..], (p, 1), 0.0, &mut ga);
                        // softmax backward, then the score scale
                        for (arow, grow) in a.chunks(p).zip(ga.chunks_mut(p)) {
                            let dot: f64 = arow.iter().zip(grow.iter()).map(|(x, y)| x * y).sum();
                            for (g, x) in grow.iter_mut().zip(arow) {
                                *g = x * (*g - dot) * scale;
                            }
                        }
                        // gq[c, i] = Σ_j k[c, j] gs[i, j];  gk[c, j] = Σ_i q[c, i] gs[i, j]
                        gemm(s.c, p, p, &kv[off..], (p, 1), &ga, (1, p), 0.0, &mut gq[off..off + sl]);
                        gemm(s.c, p, p, &qv[off..], (p, 1), &ga, (p, 1), 0.0, &mut gk[off..off + sl]);
                    }
                    acc(&mut grads[q.0], &gq);
                    acc(&mut grads[k.0], &gk);
                    acc(&mut grads[v.0], &gv);
                }
            }
        }
        Ok(Gradients(pgrads))
    }
}
