//! Reverse-mode autodiff over a per-sample tape.
//!
//! A [`Graph`] borrows the parameter store, records every operation of one
//! forward pass, and accumulates parameter gradients on [`Graph::backward`].
//! Each parameter enters the tape once no matter how many layers use it.

use std::collections::HashMap;

use super::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    ChannelGate {
        x: Var,
        gate: Var,
    },
    Scale(Var, f64),
    Reparam {
        mu: Var,
        log_var: Var,
        eps: Tensor,
    },
    /// Scalar with caller-supplied local gradients `d value / d input`.
    Objective {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn spatial_check(t: &Tensor, what: &'static str) -> Result<()> {
    if t.is_spatial() {
        Ok(())
    } else {
        Err(Error::invalid(
            "tensor",
            format!("{what} needs a [c, x, y, z] tensor, got {:?}", t.shape()),
        ))
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn conv(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x);
        spatial_check(xs, "conv")?;
        let ws = self.store.get(weight).shape().to_vec();
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        if xs.channels() != cin {
            return Err(Error::ShapeMismatch {
                what: "conv input channels",
                left: vec![xs.channels()],
                right: vec![cin],
            });
        }
        let geom = ConvGeom::new(cin, cout, k, stride, pad, xs.spatial())
            .ok_or_else(|| Error::invalid("input", format!("kernel {k} does not fit input {:?}", xs.spatial())))?;
        let w = self.param(weight);
        let b = bias.map(|b| self.param(b));
        let mut out = vec![0.0; cout * geom.out_voxels()];
        conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let o = geom.out_dims;
        let t = Tensor::new(vec![cout, o[0], o[1], o[2]], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// Per-channel standardisation over the spatial axes, without affine terms.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let mut t = self.value(x).clone();
        let n = t.voxels();
        let mut inv_std = Vec::with_capacity(t.channels());
        for ch in t.data_mut().chunks_mut(n) {
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            ch.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(t, Op::InstanceNorm { x, inv_std })
    }

    /// 2×2×2 max pooling, stride 2. Every spatial axis must be even.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let (c, [nx, ny, nz]) = pool_dims(xs)?;
        let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
        let mut out = Vec::with_capacity(c * hx * hy * hz);
        let mut argmax = Vec::with_capacity(out.capacity());
        let data = xs.data();
        for ch in 0..c {
            let base = ch * nx * ny * nz;
            for z in 0..hz {
                for y in 0..hy {
                    for xx in 0..hx {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = base + (2 * xx + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                    if data[i] > best {
                                        best = data[i];
                                        arg = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(arg as u32);
                    }
                }
            }
        }
        let t = Tensor::new(vec![c, hx, hy, hz], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// 2×2×2 average pooling, stride 2.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = avg_pool2(self.value(x))?;
        Ok(self.push(t, Op::AvgPool(x)))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        spatial_check(xs, "upsample")?;
        let c = xs.channels();
        let [nx, ny, nz] = xs.spatial();
        let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
        let mut out = vec![0.0; c * ux * uy * uz];
        let data = xs.data();
        for ch in 0..c {
            for z in 0..uz {
                for y in 0..uy {
                    let src = ch * nx * ny * nz + nx * (y / 2 + ny * (z / 2));
                    let dst = ch * ux * uy * uz + ux * (y + uy * z);
                    for xx in 0..ux {
                        out[dst + xx] = data[src + xx / 2];
                    }
                }
            }
        }
        let t = Tensor::new(vec![c, ux, uy, uz], out)?;
        Ok(self.push(t, Op::Upsample(x)))
    }

    /// Channel concatenation of same-sized feature maps.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        spatial_check(first, "concat")?;
        let dims = first.spatial();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.spatial() != dims {
                return Err(Error::ShapeMismatch {
                    what: "concat operands",
                    left: dims.to_vec(),
                    right: t.spatial().to_vec(),
                });
            }
            channels += t.channels();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![channels, dims[0], dims[1], dims[2]], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                what: "add operands",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut t = ta.clone();
        t.add_assign(tb);
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// `out[c, v] = x[c, v] * gate[0, v]`.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gate));
        if tg.channels() != 1 || tx.spatial() != tg.spatial() {
            return Err(Error::ShapeMismatch {
                what: "gate vs features",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let v = tx.voxels();
        let g = tg.data();
        let mut t = tx.clone();
        for (i, val) in t.data_mut().iter_mut().enumerate() {
            *val *= g[i % v];
        }
        Ok(self.push(t, Op::ChannelGate { x, gate }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    /// `mu + exp(log_var / 2) ⊙ eps`.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, eps: Tensor) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(log_var));
        if m.shape() != l.shape() || m.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                what: "reparameterisation operands",
                left: m.shape().to_vec(),
                right: l.shape().to_vec(),
            });
        }
        let data = m
            .data()
            .iter()
            .zip(l.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
            .collect();
        let t = Tensor::new(m.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Reparam { mu, log_var, eps }))
    }

    /// Records a scalar objective computed outside the tape together with its
    /// gradients with respect to each input.
    pub fn objective(&mut self, value: f64, inputs: &[Var], grads: Vec<Tensor>) -> Result<Var> {
        for (&i, g) in inputs.iter().zip(&grads) {
            if self.value(i).shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    what: "objective gradient",
                    left: self.value(i).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Objective {
                inputs: inputs.to_vec(),
                grads,
            },
        ))
    }

    /// `Σ weight · scalar`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(t, w)| w * self.value(t).data()[0]).sum();
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()))
    }

    /// Back-propagates `seed · d root` and adds the parameter gradients into `grads`.
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Grads) {
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut root_grad = Tensor::zeros(self.nodes[root.0].value.shape());
        root_grad.fill(seed);
        adj[root.0] = Some(root_grad);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Conv { x, w, b, geom } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = b.map(|b| vec![0.0; self.nodes[b.0].value.len()]);
                    let mut dx = needs_grad(&self.nodes, *x).then(|| vec![0.0; xv.len()]);
                    conv3d_backward(
                        geom,
                        xv.data(),
                        wv.data(),
                        g.data(),
                        dx.as_deref_mut(),
                        &mut dw,
                        db.as_deref_mut(),
                    );
                    accumulate(&mut adj, *w, Tensor::new(wv.shape().to_vec(), dw).expect("sized"));
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut adj, *b, Tensor::new(vec![db.len()], db).expect("sized"));
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut adj, *x, Tensor::new(xv.shape().to_vec(), dx).expect("sized"));
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.data();
                    let mut d = g;
                    d.data_mut().iter_mut().zip(y).for_each(|(d, &y)| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut adj, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let mut d = g;
                    d.data_mut().iter_mut().zip(y).for_each(|(d, &y)| *d *= y * (1.0 - y));
                    accumulate(&mut adj, *x, d);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = node.value.data();
                    let n = node.value.voxels();
                    let mut d = g;
                    for ((dc, yc), &inv) in d.data_mut().chunks_mut(n).zip(y.chunks(n)).zip(inv_std) {
                        let mean_d = dc.iter().sum::<f64>() / n as f64;
                        let mean_dy = dc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        dc.iter_mut()
                            .zip(yc)
                            .for_each(|(dv, &yv)| *dv = inv * (*dv - mean_d - yv * mean_dy));
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::MaxPool { x, argmax } => {
                    let mut d = Tensor::zeros(self.nodes[x.0].value.shape());
                    let dd = d.data_mut();
                    for (&a, &gv) in argmax.iter().zip(g.data()) {
                        dd[a as usize] += gv;
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::AvgPool(x) => {
                    let xs = self.nodes[x.0].value.shape();
                    let mut d = Tensor::zeros(xs);
                    let (nx, ny, nz) = (xs[1], xs[2], xs[3]);
                    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
                    let gd = g.data();
                    let dd = d.data_mut();
                    for ch in 0..xs[0] {
                        for z in 0..nz {
                            for y in 0..ny {
                                for xx in 0..nx {
                                    let o = ch * hx * hy * hz + xx / 2 + hx * (y / 2 + hy * (z / 2));
                                    dd[ch * nx * ny * nz + xx + nx * (y + ny * z)] = gd[o] / 8.0;
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::Upsample(x) => {
                    let xs = self.nodes[x.0].value.shape();
                    let mut d = Tensor::zeros(xs);
                    let (nx, ny, nz) = (xs[1], xs[2], xs[3]);
                    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
                    let gd = g.data();
                    let dd = d.data_mut();
                    for ch in 0..xs[0] {
                        for z in 0..uz {
                            for y in 0..uy {
                                let dst = ch * nx * ny * nz + nx * (y / 2 + ny * (z / 2));
                                let src = ch * ux * uy * uz + ux * (y + uy * z);
                                for xx in 0..ux {
                                    dd[dst + xx / 2] += gd[src + xx];
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape();
                        let n = self.nodes[p.0].value.len();
                        let d = Tensor::new(shape.to_vec(), g.data()[offset..offset + n].to_vec()).expect("sized");
                        offset += n;
                        accumulate(&mut adj, *p, d);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::ChannelGate { x, gate } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gate.0].value;
                    let v = xv.voxels();
                    let mut dx = g.clone();
                    let mut dgate = Tensor::zeros(gv.shape());
                    {
                        let dg = dgate.data_mut();
                        let (gd, xd, gatev) = (g.data(), xv.data(), gv.data());
                        for (i, d) in dx.data_mut().iter_mut().enumerate() {
                            *d *= gatev[i % v];
                            dg[i % v] += gd[i] * xd[i];
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gate, dgate);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut adj, *x, g.map(|v| v * f));
                }
                Op::Reparam { mu, log_var, eps } => {
                    let lv = self.nodes[log_var.0].value.data();
                    let mut dlv = g.clone();
                    dlv.data_mut()
                        .iter_mut()
                        .zip(lv)
                        .zip(eps.data())
                        .for_each(|((d, &l), &e)| *d *= 0.5 * (0.5 * l).exp() * e);
                    accumulate(&mut adj, *mu, g);
                    accumulate(&mut adj, *log_var, dlv);
                }
                Op::Objective { inputs, grads: local } => {
                    let s = g.data()[0];
                    for (&inp, lg) in inputs.iter().zip(local) {
                        accumulate(&mut adj, inp, lg.map(|v| v * s));
                    }
                }
                Op::WeightedSum(terms) => {
                    let s = g.data()[0];
                    for &(t, w) in terms {
                        accumulate(&mut adj, t, Tensor::scalar(s * w));
                    }
                }
            }
        }
    }
}

fn needs_grad(nodes: &[Node], v: Var) -> bool {
    !matches!(nodes[v.0].op, Op::Input)
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn pool_dims(t: &Tensor) -> Result<(usize, [usize; 3])> {
    spatial_check(t, "pool")?;
    let dims = t.spatial();
    for (axis, &extent) in dims.iter().enumerate() {
        if extent % 2 != 0 {
            return Err(Error::NotDivisible {
                axis,
                extent,
                factor: 2,
            });
        }
    }
    Ok((t.channels(), dims))
}

/// 2×2×2 mean pooling outside the tape.
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    let (c, [nx, ny, nz]) = pool_dims(t)?;
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let mut out = vec![0.0; c * hx * hy * hz];
    let data = t.data();
    for ch in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out[ch * hx * hy * hz + x / 2 + hx * (y / 2 + hy * (z / 2))] +=
                        data[ch * nx * ny * nz + x + nx * (y + ny * z)] / 8.0;
                }
            }
        }
    }
    Tensor::new(vec![c, hx, hy, hz], out)
}
