//! Reverse-mode differentiation over coarse tensor operations.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints.

use crate::error::{Error, Result};
use crate::netgraph::kernels::{self, ConvShape, NormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        stats: NormStats<T>,
    },
    Silu(Var),
    Film {
        x: Var,
        scale_shift: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Channels {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        labels: Vec<usize>,
    },
    AffinePerSample {
        x: Var,
        scale: Vec<T>,
    },
    WeightedSqErr {
        pred: Var,
        target: Tensor<T>,
        weights: Vec<T>,
    },
    SumSq(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Adjoints<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adjoints<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients flow into.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::shape(&[cout, cin, k, k], self.value(w).shape()));
        }
        if let Some(b) = b {
            self.value(b).expect_shape(&[cout])?;
        }
        let s = ConvShape {
            batch,
            cin,
            cout,
            h,
            w: wd,
            k,
        };
        let out = kernels::conv2d_forward(
            s,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_vec(&[batch, cout, h, wd], out)?,
            Op::Conv2d { x, w, b },
            rg,
        ))
    }

    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(&[c], &[groups]));
        }
        self.value(gain).expect_shape(&[c])?;
        self.value(bias).expect_shape(&[c])?;
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            (b, c, h * w),
            groups,
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_vec(&[b, c, h, w], y)?,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * kernels::sigmoid(v));
        let rg = self.rg(x);
        self.push(y, Op::Silu(x), rg)
    }

    /// `x * (1 + scale) + shift`, with `scale_shift = [B, 2C]` broadcast over space.
    pub fn film(&mut self, x: Var, scale_shift: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.value(scale_shift).expect_shape(&[b, 2 * c])?;
        let hw = h * w;
        let ss = self.value(scale_shift).data();
        let mut y = self.value(x).data().to_vec();
        for n in 0..b {
            for ch in 0..c {
                let (sc, sh) = (T::one() + ss[n * 2 * c + ch], ss[n * 2 * c + c + ch]);
                for v in &mut y[(n * c + ch) * hw..(n * c + ch + 1) * hw] {
                    *v = *v * sc + sh;
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale_shift);
        Ok(self.push(Tensor::from_vec(&[b, c, h, w], y)?, Op::Film { x, scale_shift }, rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidResolution {
                resolution: h.max(w),
                reason: "odd extent cannot be pooled by 2".into(),
            });
        }
        let y = kernels::avg_pool2_forward(self.value(x).data(), b * c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, c, h / 2, w / 2], y)?, Op::AvgPool2(x), rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let y = kernels::upsample2_forward(self.value(x).data(), b * c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, c, 2 * h, 2 * w], y)?, Op::Upsample2(x), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = Tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Concat(a, b), rg))
    }

    pub fn channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = self.value(x).channels(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Channels { x, start }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// `x [B, in] -> x W^T + b` with `W [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[batch, fin], &[fout, win]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape(&[0, 0], &xs));
        };
        if fin != win {
            return Err(Error::shape(&[fout, fin], &ws));
        }
        self.value(b).expect_shape(&[fout])?;
        let mut y = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin,
            1,
            self.value(w).data(),
            1,
            fin,
            T::one(),
            &mut y,
            fout,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[batch, fout], y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn embedding(&mut self, table: Var, labels: &[usize]) -> Result<Var> {
        let ts = self.value(table).shape().to_vec();
        let &[rows, dim] = ts.as_slice() else {
            return Err(Error::shape(&[0, 0], &ts));
        };
        let mut y = Vec::with_capacity(labels.len() * dim);
        for &l in labels {
            if l >= rows {
                return Err(Error::Label {
                    label: l,
                    num_classes: rows,
                });
            }
            y.extend_from_slice(&self.value(table).data()[l * dim..(l + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_vec(&[labels.len(), dim], y)?,
            Op::Embedding {
                table,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// `scale[b] * x[b] + offset[b]` with constant per-sample scales and constant offset.
    pub fn affine_per_sample(&mut self, x: Var, scale: &[T], offset: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_shape(offset.shape())?;
        let b = *xv.shape().first().unwrap_or(&0);
        if scale.len() != b {
            return Err(Error::shape(&[b], &[scale.len()]));
        }
        let inner = xv.numel() / b.max(1);
        let mut y = offset.clone();
        for (n, &a) in scale.iter().enumerate() {
            let range = n * inner..(n + 1) * inner;
            for (o, &v) in y.data_mut()[range.clone()].iter_mut().zip(&xv.data()[range]) {
                *o += a * v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            y,
            Op::AffinePerSample {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// `(1/B) sum_b weights[b] * ||pred[b] - target[b]||^2`.
    pub fn weighted_sq_err(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_shape(target.shape())?;
        let b = *pv.shape().first().unwrap_or(&0);
        if weights.len() != b || b == 0 {
            return Err(Error::shape(&[b], &[weights.len()]));
        }
        let inner = pv.numel() / b;
        let mut total = T::zero();
        for (n, &wt) in weights.iter().enumerate() {
            let r = n * inner..(n + 1) * inner;
            let s: T = pv.data()[r.clone()]
                .iter()
                .zip(&target.data()[r])
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum();
            total += wt * s;
        }
        let loss = total / T::of(b as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedSqErr {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_sq();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSq(x), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Adjoints<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(&[], self.value(output).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                // leaf adjoints are kept for the caller
                grads[idx] = Some(g);
                continue;
            }
            let mut emit = |v: Var, t: Tensor<T>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], t);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (batch, cin, h, wd) = xv.dims4()?;
                    let (cout, _, k, _) = wv.dims4()?;
                    let s = ConvShape {
                        batch,
                        cin,
                        cout,
                        h,
                        w: wd,
                        k,
                    };
                    let (dx, dw, db) =
                        kernels::conv2d_backward(s, xv.data(), wv.data(), g.data(), self.rg(*x), self.rg(*w));
                    if let Some(dx) = dx {
                        emit(*x, Tensor::from_vec(xv.shape(), dx)?);
                    }
                    emit(*w, Tensor::from_vec(wv.shape(), dw)?);
                    if let Some(b) = b {
                        emit(*b, Tensor::from_vec(&[cout], db)?);
                    }
                }
                Op::GroupNorm {
                    x,
                    gain,
                    bias,
                    groups,
                    stats,
                } => {
                    let xv = self.value(*x);
                    let (b, c, h, w) = xv.dims4()?;
                    let (dx, dgain, dbias) = kernels::group_norm_backward(
                        xv.data(),
                        g.data(),
                        (b, c, h * w),
                        *groups,
                        self.value(*gain).data(),
                        stats,
                    );
                    emit(*x, Tensor::from_vec(xv.shape(), dx)?);
                    emit(*gain, Tensor::from_vec(&[c], dgain)?);
                    emit(*bias, Tensor::from_vec(&[c], dbias)?);
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&g, |v, gv| {
                        let s = kernels::sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })?;
                    emit(*x, dx);
                }
                Op::Film { x, scale_shift } => {
                    let xv = self.value(*x);
                    let (b, c, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let ss = self.value(*scale_shift).data();
                    let mut dx = g.clone();
                    let mut dss = vec![T::zero(); b * 2 * c];
                    for n in 0..b {
                        for ch in 0..c {
                            let sc = T::one() + ss[n * 2 * c + ch];
                            let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                            let mut dscale = T::zero();
                            let mut dshift = T::zero();
                            for (i, gi) in r.clone().zip(&g.data()[r.clone()]) {
                                dscale += *gi * xv.data()[i];
                                dshift += *gi;
                                dx.data_mut()[i] = *gi * sc;
                            }
                            dss[n * 2 * c + ch] = dscale;
                            dss[n * 2 * c + c + ch] = dshift;
                        }
                    }
                    emit(*x, dx);
                    emit(*scale_shift, Tensor::from_vec(&[b, 2 * c], dss)?);
                }
                Op::AvgPool2(x) => {
                    let (b, c, h, w) = self.value(*x).dims4()?;
                    let dx = kernels::avg_pool2_backward(g.data(), b * c, h, w);
                    emit(*x, Tensor::from_vec(&[b, c, h, w], dx)?);
                }
                Op::Upsample2(x) => {
                    let (b, c, h, w) = self.value(*x).dims4()?;
                    let dx = kernels::upsample2_backward(g.data(), b * c, h, w);
                    emit(*x, Tensor::from_vec(&[b, c, h, w], dx)?);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).shape()[1];
                    let ctot = g.shape()[1];
                    emit(*a, g.channels(0, ca)?);
                    emit(*b, g.channels(ca, ctot)?);
                }
                Op::Channels { x, start } => {
                    let (b, c, h, w) = self.value(*x).dims4()?;
                    let width = g.shape()[1];
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[b, c, h, w]);
                    for n in 0..b {
                        let dst = (n * c + start) * hw;
                        dx.data_mut()[dst..dst + width * hw]
                            .copy_from_slice(&g.data()[n * width * hw..(n + 1) * width * hw]);
                    }
                    emit(*x, dx);
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (batch, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    if self.rg(*x) {
                        let mut dx = vec![T::zero(); batch * fin];
                        T::gemm(
                            batch,
                            fout,
                            fin,
                            T::one(),
                            g.data(),
                            fout,
                            1,
                            wv.data(),
                            fin,
                            1,
                            T::zero(),
                            &mut dx,
                            fin,
                            1,
                        );
                        emit(*x, Tensor::from_vec(&[batch, fin], dx)?);
                    }
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(
                        fout,
                        batch,
                        fin,
                        T::one(),
                        g.data(),
                        1,
                        fout,
                        xv.data(),
                        fin,
                        1,
                        T::zero(),
                        &mut dw,
                        fin,
                        1,
                    );
                    emit(*w, Tensor::from_vec(&[fout, fin], dw)?);
                    let mut db = vec![T::zero(); fout];
                    for n in 0..batch {
                        for (d, &gv) in db.iter_mut().zip(&g.data()[n * fout..(n + 1) * fout]) {
                            *d += gv;
                        }
                    }
                    emit(*b, Tensor::from_vec(&[fout], db)?);
                }
                Op::Embedding { table, labels } => {
                    let ts = self.value(*table).shape();
                    let dim = ts[1];
                    let mut dt = Tensor::zeros(ts);
                    for (n, &l) in labels.iter().enumerate() {
                        for (d, &gv) in dt.data_mut()[l * dim..(l + 1) * dim]
                            .iter_mut()
                            .zip(&g.data()[n * dim..(n + 1) * dim])
                        {
                            *d += gv;
                        }
                    }
                    emit(*table, dt);
                }
                Op::AffinePerSample { x, scale } => {
                    let b = scale.len();
                    let inner = g.numel() / b.max(1);
                    let mut dx = g.clone();
                    for (n, &a) in scale.iter().enumerate() {
                        for v in &mut dx.data_mut()[n * inner..(n + 1) * inner] {
                            *v *= a;
                        }
                    }
                    emit(*x, dx);
                }
                Op::WeightedSqErr { pred, target, weights } => {
                    let pv = self.value(*pred);
                    let b = weights.len();
                    let inner = pv.numel() / b;
                    let g0 = g.data()[0] * T::of(2.0) / T::of(b as f64);
                    let mut dp = pv.clone();
                    for (n, &wt) in weights.iter().enumerate() {
                        let r = n * inner..(n + 1) * inner;
                        for (d, &t) in dp.data_mut()[r.clone()].iter_mut().zip(&target.data()[r]) {
                            *d = g0 * wt * (*d - t);
                        }
                    }
                    emit(*pred, dp);
                }
                Op::SumSq(x) => {
                    let g0 = g.data()[0] * T::of(2.0);
                    emit(*x, self.value(*x).map(|v| g0 * v));
                }
            }
        }
        Ok(Adjoints { grads })
    }
}
