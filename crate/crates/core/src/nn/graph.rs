//! Reverse-mode autodiff over a per-sample computation tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward
//! pass. Every op appends a node; [`Graph::backward`] walks the tape in
//! reverse and accumulates parameter gradients into a [`Grads`] buffer.

use super::kernels::{col2im_add, conv_out_dim, gemm, im2col};
use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Silu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    /// `x * (1 + m[..C]) + m[C..]`, broadcast over space.
    Film {
        x: Var,
        m: Var,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    /// Mean of table rows.
    EmbedBag {
        table: Var,
        rows: Vec<usize>,
    },
}

struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-param node without value"),
        }
    }

    fn push(&mut self, value: Option<Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Some(t), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id))
    }

    /// 2D convolution with square kernel `[Cout, Cin, k, k]`, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::shape(format!("conv weight {:?}", ws)));
        };
        if wcin != cin || k != k2 || self.value(b).len() != cout {
            return Err(Error::shape(format!(
                "conv weight {:?} incompatible with input channels {cin}",
                ws
            )));
        }
        let pad = k / 2;
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let ckk = cin * k * k;
        let mut cols = vec![0.0; ckk * ho * wo];
        im2col(self.value(x).data(), cin, h, wd, k, stride, pad, ho, wo, &mut cols);
        let mut out = vec![0.0; cout * ho * wo];
        gemm(
            cout,
            ckk,
            ho * wo,
            self.value(w).data(),
            (ckk, 1),
            &cols,
            (ho * wo, 1),
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for (co, row) in out.chunks_mut(ho * wo).enumerate() {
            for o in row {
                *o += bias[co];
            }
        }
        let t = Tensor::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(Some(t), Op::Conv2d { x, w, b, stride }))
    }

    /// `W x + b` for `W: [m, n]`, `x: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w).shape();
        let [m, n] = ws[..] else {
            return Err(Error::shape(format!("linear weight {:?}", ws)));
        };
        if xs.len() != n || self.value(b).len() != m {
            return Err(Error::shape(format!(
                "linear weight {:?} vs input len {}",
                ws,
                xs.len()
            )));
        }
        let wv = self.value(w).data();
        let xv = xs.data();
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv[i * n..(i + 1) * n];
                bv[i] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let t = Tensor::from_vec(&[m], out)?;
        Ok(self.push(Some(t), Op::Linear { x, w, b }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(Some(t), Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Some(t), Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(Some(t), Op::Scale(a, s))
    }

    /// Elementwise mean of two equally shaped nodes.
    pub fn mean2(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.add(a, b)?;
        Ok(self.scale(s, 0.5))
    }

    pub fn film(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let mv = self.value(m).data();
        if mv.len() != 2 * c {
            return Err(Error::shape(format!(
                "film modulation len {} for {c} channels",
                mv.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            let (g, s) = (1.0 + mv[ch], mv[c + ch]);
            for v in plane {
                *v = *v * g + s;
            }
        }
        let t = Tensor::from_vec(&[c, h, w], out)?;
        Ok(self.push(Some(t), Op::Film { x, m }))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[c, h2, w2], out)?;
        Ok(self.push(Some(t), Op::Upsample2x(x)))
    }

    /// Concatenation along the leading axis (channels for `[C, H, W]`).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape(format!("concat {:?} with {:?}", sa, sb)));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Some(t), Op::Concat(a, b)))
    }

    pub fn embed_bag(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        let ts = self.value(table).shape();
        let [n_rows, dim] = ts[..] else {
            return Err(Error::shape(format!("embedding table {:?}", ts)));
        };
        if rows.is_empty() || rows.iter().any(|&r| r >= n_rows) {
            return Err(Error::shape("embedding rows empty or out of range"));
        }
        let tv = self.value(table).data();
        let mut out = vec![0.0; dim];
        for &r in &rows {
            for (o, v) in out.iter_mut().zip(&tv[r * dim..(r + 1) * dim]) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::from_vec(&[dim], out)?;
        Ok(self.push(Some(t), Op::EmbedBag { table, rows }))
    }

    /// Back-propagates `seeds` (d loss / d node) and returns parameter gradients.
    pub fn backward(&self, seeds: &[(Var, &Tensor)]) -> Result<Grads> {
        let mut grads = self.params.zeros_like();
        self.backward_into(seeds, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(&self, seeds: &[(Var, &Tensor)], out: &mut Grads) -> Result<()> {
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            self.value(*v).ensure_same_shape(seed, "backward seed")?;
            accumulate(&mut g[v.0], (*seed).clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = g[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => out.get_mut(*id).add_assign(&dy),
                Op::Conv2d { x, w, b, stride } => {
                    let (dx, dw, db) = self.conv2d_backward(*x, *w, *stride, &dy)?;
                    accumulate(&mut g[x.0], dx);
                    accumulate(&mut g[w.0], dw);
                    accumulate(&mut g[b.0], db);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x).data();
                    let wt = self.value(*w);
                    let n = xv.len();
                    let mut dw = vec![0.0; wt.len()];
                    let mut dx = vec![0.0; n];
                    for (i, &d) in dy.data().iter().enumerate() {
                        let row = &wt.data()[i * n..(i + 1) * n];
                        for j in 0..n {
                            dw[i * n + j] = d * xv[j];
                            dx[j] += d * row[j];
                        }
                    }
                    accumulate(&mut g[x.0], Tensor::from_vec(&[n], dx)?);
                    accumulate(&mut g[w.0], Tensor::from_vec(wt.shape(), dw)?);
                    accumulate(&mut g[b.0], dy);
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&dy, |v, d| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        d * (s + v * s * (1.0 - s))
                    })?;
                    accumulate(&mut g[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[a.0], dy.clone());
                    accumulate(&mut g[b.0], dy);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut g[a.0], dy.map(|d| d * s));
                }
                Op::Film { x, m } => {
                    let xt = self.value(*x);
                    let (c, h, w) = xt.dims3()?;
                    let mv = self.value(*m).data();
                    let mut dx = dy.data().to_vec();
                    let mut dm = vec![0.0; 2 * c];
                    for ch in 0..c {
                        let range = ch * h * w..(ch + 1) * h * w;
                        let gain = 1.0 + mv[ch];
                        let (mut dg, mut ds) = (0.0, 0.0);
                        for (d, xv) in dx[range.clone()].iter_mut().zip(&xt.data()[range]) {
                            dg += *d * xv;
                            ds += *d;
                            *d *= gain;
                        }
                        dm[ch] = dg;
                        dm[c + ch] = ds;
                    }
                    accumulate(&mut g[x.0], Tensor::from_vec(&[c, h, w], dx)?);
                    accumulate(&mut g[m.0], Tensor::from_vec(&[2 * c], dm)?);
                }
                Op::Upsample2x(x) => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let (h2, w2) = (2 * h, 2 * w);
                    let dyv = dy.data();
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dx[(ch * h + y / 2) * w + xx / 2] += dyv[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                    accumulate(&mut g[x.0], Tensor::from_vec(&[c, h, w], dx)?);
                }
                Op::Concat(a, b) => {
                    let sa = self.value(*a).shape().to_vec();
                    let sb = self.value(*b).shape().to_vec();
                    let na = self.value(*a).len();
                    let data = dy.into_data();
                    accumulate(&mut g[a.0], Tensor::from_vec(&sa, data[..na].to_vec())?);
                    accumulate(&mut g[b.0], Tensor::from_vec(&sb, data[na..].to_vec())?);
                }
                Op::EmbedBag { table, rows } => {
                    let ts = self.value(*table).shape().to_vec();
                    let dim = ts[1];
                    let inv = 1.0 / rows.len() as f64;
                    let mut dt = vec![0.0; ts[0] * dim];
                    for &r in rows {
                        for (o, d) in dt[r * dim..(r + 1) * dim].iter_mut().zip(dy.data()) {
                            *o += d * inv;
                        }
                    }
                    accumulate(&mut g[table.0], Tensor::from_vec(&ts, dt)?);
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(&self, x: Var, w: Var, stride: usize, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (cin, h, wd) = xt.dims3()?;
        let (cout, ho, wo) = dy.dims3()?;
        let k = wt.shape()[2];
        let pad = k / 2;
        let ckk = cin * k * k;
        let hw = ho * wo;
        let mut cols = vec![0.0; ckk * hw];
        im2col(xt.data(), cin, h, wd, k, stride, pad, ho, wo, &mut cols);

        // dW = dY · colsᵀ
        let mut dw = vec![0.0; cout * ckk];
        gemm(cout, hw, ckk, dy.data(), (hw, 1), &cols, (1, hw), 0.0, &mut dw);
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0; ckk * hw];
        gemm(ckk, cout, hw, wt.data(), (1, ckk), dy.data(), (hw, 1), 0.0, &mut dcols);
        let mut dx = vec![0.0; cin * h * wd];
        col2im_add(&dcols, cin, h, wd, k, stride, pad, ho, wo, &mut dx);

        let db: Vec<f64> = dy.data().chunks(hw).map(|row| row.iter().sum()).collect();
        Ok((
            Tensor::from_vec(&[cin, h, wd], dx)?,
            Tensor::from_vec(wt.shape(), dw)?,
            Tensor::from_vec(&[cout], db)?,
        ))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
