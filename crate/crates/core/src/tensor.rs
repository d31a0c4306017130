//! Reverse-mode autodiff over `ndarray` arrays.
//!
//! The engine is deliberately small: single-sample CHW tensors, f64 values,
//! a flat tape, and exactly the operations the warping and generation models
//! need. Scalars are arrays of shape `[1]`. Parameters live outside the tape
//! in a [`crate::nn::ParamStore`]; a tape references them by slot id and the
//! backward pass returns gradients keyed by those slots.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Val(usize);

pub struct Conv2dMeta {
    pub stride: usize,
    pub pad: usize,
    pub kh: usize,
    pub kw: usize,
}

enum Op {
    Const,
    Param { slot: usize },
    Add { a: Val, b: Val },
    Sub { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Scale { a: Val, c: f64 },
    AddScalar { a: Val },
    LeakyRelu { a: Val, slope: f64 },
    Sigmoid { a: Val },
    Conv2d { x: Val, w: Val, b: Val, meta: Conv2dMeta },
    ResizeBilinear { x: Val },
    AvgPool2 { x: Val },
    Concat { parts: Vec<Val> },
    FlowSample { src: Val, flow: Val },
    Correlation { a: Val, b: Val, radius: usize },
    MulMask { x: Val, mask: Arc<ArrayD<f64>> },
    MulBcast { x: Val, m: Val },
    Softmax { logits: Val },
    MeanAll { a: Val },
    SumAll { a: Val },
    Relu { a: Val },
    L1Masked { pred: Val, target: Arc<ArrayD<f64>>, weight: Option<Arc<ArrayD<f64>>>, denom: f64 },
    SoftmaxCe { logits: Val, labels: Arc<Vec<usize>> },
    CharbonnierSecond { flow: Val, eps: f64, alpha: f64 },
    WSum { terms: Vec<(Val, f64)> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    pub by_slot: BTreeMap<usize, ArrayD<f64>>,
}

impl Grads {
    pub fn global_norm(&self) -> f64 {
        self.by_slot
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).unwrap()
}

fn chw(a: &ArrayD<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected CHW tensor, got shape {:?}", s);
    (s[0], s[1], s[2])
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, v: Val) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Val) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a[[0]]
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Val {
        self.nodes.push(Node { value, op });
        Val(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Val {
        self.push(value, Op::Const)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Val {
        self.push(scalar(v), Op::Const)
    }

    pub fn param(&mut self, slot: usize, value: ArrayD<f64>) -> Val {
        self.push(value, Op::Param { slot })
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Val, c: f64) -> Val {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar { a })
    }

    pub fn leaky_relu(&mut self, a: Val, slope: f64) -> Val {
        let v = self.nodes[a.0].value.mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu { a, slope })
    }

    pub fn relu(&mut self, a: Val) -> Val {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid { a })
    }

    /// 2-d convolution on a CHW tensor. Weights are `[co, ci, kh, kw]`,
    /// bias `[co]`. Output dims use floor arithmetic.
    pub fn conv2d(&mut self, x: Val, w: Val, b: Val, stride: usize, pad: usize) -> Val {
        let (kh, kw) = {
            let ws = self.nodes[w.0].value.shape();
            (ws[2], ws[3])
        };
        let v = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        self.push(v, Op::Conv2d { x, w, b, meta: Conv2dMeta { stride, pad, kh, kw } })
    }

    /// Bilinear resize of a CHW tensor to the given dims. Sample positions
    /// are origin-anchored: `src = dst * (src_dim / dst_dim)`, clamped.
    pub fn resize_bilinear(&mut self, x: Val, h_out: usize, w_out: usize) -> Val {
        let v = resize_bilinear_forward(&self.nodes[x.0].value, h_out, w_out);
        self.push(v, Op::ResizeBilinear { x })
    }

    /// 2x2 average pooling with floor dims.
    pub fn avg_pool2(&mut self, x: Val) -> Val {
        let v = avg_pool2_forward(&self.nodes[x.0].value);
        self.push(v, Op::AvgPool2 { x })
    }

    pub fn concat(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty());
        let (_, h, w) = chw(&self.nodes[parts[0].0].value);
        let c_total: usize = parts.iter().map(|p| chw(&self.nodes[p.0].value).0).sum();
        let mut out = ArrayD::zeros(IxDyn(&[c_total, h, w]));
        {
            let o = out.as_slice_mut().unwrap();
            let mut off = 0;
            for p in parts {
                let a = &self.nodes[p.0].value;
                let (c, ph, pw) = chw(a);
                assert_eq!((ph, pw), (h, w), "concat dims mismatch");
                let s = a.as_slice().unwrap();
                o[off..off + c * h * w].copy_from_slice(s);
                off += c * h * w;
            }
        }
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    /// Backward warping by a dense flow field. `src` is `[C,H,W]`, `flow`
    /// `[2,H,W]` with channel 0 = dx (columns), channel 1 = dy (rows);
    /// `out(p) = src(p + flow(p))` with border clamp.
    pub fn flow_sample(&mut self, src: Val, flow: Val) -> Val {
        let v = flow_sample_forward(&self.nodes[src.0].value, &self.nodes[flow.0].value);
        self.push(v, Op::FlowSample { src, flow })
    }

    /// Local correlation cost volume. Entry `(p, d)` is the channel mean of
    /// `a(p) * b(p + d)` for displacements `|dx|,|dy| <= radius`. Out-of-bounds
    /// positions in `b` contribute zero. Output has `(2r+1)^2` channels,
    /// indexed row-major over `(dy, dx)`.
    pub fn correlation(&mut self, a: Val, b: Val, radius: usize) -> Val {
        let v = correlation_forward(&self.nodes[a.0].value, &self.nodes[b.0].value, radius);
        self.push(v, Op::Correlation { a, b, radius })
    }

    /// Multiply a CHW tensor by a constant `[1,H,W]` mask, broadcast over
    /// channels. The mask is a constant: no gradient flows through it.
    pub fn mul_mask(&mut self, x: Val, mask: Arc<ArrayD<f64>>) -> Val {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = chw(xv);
        assert_eq!(mask.shape(), &[1, h, w], "mask dims mismatch");
        let mut out = xv.clone();
        {
            let o = out.as_slice_mut().unwrap();
            let m = mask.as_slice().unwrap();
            for ci in 0..c {
                for i in 0..h * w {
                    o[ci * h * w + i] *= m[i];
                }
            }
        }
        self.push(out, Op::MulMask { x, mask })
    }

    /// Multiply a CHW tensor by a single-channel tensor, broadcast over
    /// channels. Both sides are graph nodes and both receive gradients.
    pub fn mul_bcast(&mut self, x: Val, m: Val) -> Val {
        let (c, h, w) = chw(&self.nodes[x.0].value);
        assert_eq!(self.nodes[m.0].value.shape(), &[1, h, w], "broadcast dims mismatch");
        let mut out = self.nodes[x.0].value.clone();
        {
            let ms = self.nodes[m.0].value.as_slice().unwrap().to_vec();
            let o = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for i in 0..h * w {
                    o[ci * h * w + i] *= ms[i];
                }
            }
        }
        self.push(out, Op::MulBcast { x, m })
    }

    /// Channelwise softmax per pixel, numerically stabilized.
    pub fn softmax(&mut self, logits: Val) -> Val {
        let l = &self.nodes[logits.0].value;
        let (k, h, w) = chw(l);
        let ls = l.as_slice().unwrap();
        let hw = h * w;
        let mut out = vec![0.0; k * hw];
        for i in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(ls[c * hw + i]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (ls[c * hw + i] - m).exp();
                out[c * hw + i] = e;
                z += e;
            }
            for c in 0..k {
                out[c * hw + i] /= z;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[k, h, w]), out).unwrap();
        self.push(out, Op::Softmax { logits })
    }

    pub fn mean_all(&mut self, a: Val) -> Val {
        let v = self.nodes[a.0].value.iter().sum::<f64>() / self.nodes[a.0].value.len() as f64;
        self.push(scalar(v), Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        let v = self.nodes[a.0].value.iter().sum::<f64>();
        self.push(scalar(v), Op::SumAll { a })
    }

    /// Mean absolute difference against a constant target, weighted by an
    /// optional constant `[1,H,W]` mask broadcast over channels. The mean is
    /// taken over included elements only; an all-zero mask yields 0.
    pub fn l1_masked(
        &mut self,
        pred: Val,
        target: Arc<ArrayD<f64>>,
        weight: Option<Arc<ArrayD<f64>>>,
    ) -> Val {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.shape(), target.shape(), "l1 target dims mismatch");
        let (c, h, w) = chw(p);
        let ps = p.as_slice().unwrap();
        let ts = target.as_slice().unwrap();
        let (num, denom) = match &weight {
            Some(m) => {
                assert_eq!(m.shape(), &[1, h, w], "l1 weight dims mismatch");
                let ms = m.as_slice().unwrap();
                let mut num = 0.0;
                for ci in 0..c {
                    let off = ci * h * w;
                    for i in 0..h * w {
                        num += (ps[off + i] - ts[off + i]).abs() * ms[i];
                    }
                }
                (num, ms.iter().sum::<f64>() * c as f64)
            }
            None => {
                let num: f64 = ps.iter().zip(ts.iter()).map(|(a, b)| (a - b).abs()).sum();
                (num, (c * h * w) as f64)
            }
        };
        let v = if denom > 0.0 { num / denom } else { 0.0 };
        self.push(scalar(v), Op::L1Masked { pred, target, weight, denom })
    }

    /// Pixel-mean cross entropy of logits `[K,H,W]` against integer labels
    /// (length `H*W`, each in `0..K`), with a numerically stable log-softmax.
    pub fn softmax_ce(&mut self, logits: Val, labels: Arc<Vec<usize>>) -> Val {
        let l = &self.nodes[logits.0].value;
        let (k, h, w) = chw(l);
        assert_eq!(labels.len(), h * w, "label count mismatch");
        let ls = l.as_slice().unwrap();
        let hw = h * w;
        let mut total = 0.0;
        for i in 0..hw {
            debug_assert!(labels[i] < k);
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(ls[c * hw + i]);
            }
            let mut lse = 0.0;
            for c in 0..k {
                lse += (ls[c * hw + i] - m).exp();
            }
            let lse = m + lse.ln();
            total += lse - ls[labels[i] * hw + i];
        }
        self.push(scalar(total / hw as f64), Op::SoftmaxCe { logits, labels })
    }

    /// Second-order smoothness of a `[2,H,W]` flow: generalized Charbonnier
    /// `(d^2 + eps^2)^alpha` of second differences along horizontal, vertical
    /// and both diagonal directions, averaged over interior pixels, both
    /// channels and all four directions.
    pub fn charbonnier_second(&mut self, flow: Val, eps: f64, alpha: f64) -> Val {
        let v = charbonnier_second_forward(&self.nodes[flow.0].value, eps, alpha);
        self.push(scalar(v), Op::CharbonnierSecond { flow, eps, alpha })
    }

    /// Weighted sum of scalar terms.
    pub fn wsum(&mut self, terms: &[(Val, f64)]) -> Val {
        let mut v = 0.0;
        for (t, w) in terms {
            v += self.scalar_value(*t) * w;
        }
        self.push(scalar(v), Op::WSum { terms: terms.to_vec() })
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter slot that participated in the graph.
    pub fn backward(&mut self, loss: Val) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));
        let mut out = Grads { by_slot: BTreeMap::new() };

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param { slot } => {
                    out.by_slot
                        .entry(*slot)
                        .and_modify(|acc| *acc += &g)
                        .or_insert(g);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.mapv(|x| -x));
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, a, g.mapv(|x| x * c));
                }
                Op::AddScalar { a } => {
                    let a = *a;
                    accumulate(&mut grads, a, g);
                }
                Op::LeakyRelu { a, slope } => {
                    let (a, slope) = (*a, *slope);
                    let mut ga = g;
                    {
                        let x = self.nodes[a.0].value.as_slice().unwrap();
                        let gs = ga.as_slice_mut().unwrap();
                        for (gi, xi) in gs.iter_mut().zip(x.iter()) {
                            if *xi < 0.0 {
                                *gi *= slope;
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let mut ga = g;
                    {
                        let x = self.nodes[a.0].value.as_slice().unwrap();
                        let gs = ga.as_slice_mut().unwrap();
                        for (gi, xi) in gs.iter_mut().zip(x.iter()) {
                            if *xi < 0.0 {
                                *gi = 0.0;
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let ga = &g * &y.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads, a, ga);
                }
                Op::Conv2d { x, w, b, meta } => {
                    let (x, w, b) = (*x, *w, *b);
                    let meta = Conv2dMeta { ..*meta };
                    let (gx, gw, gb) = conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        &meta,
                    );
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, w, gw);
                    accumulate(&mut grads, b, gb);
                }
                Op::ResizeBilinear { x } => {
                    let x = *x;
                    let gx = resize_bilinear_backward(&self.nodes[x.0].value, &g);
                    accumulate(&mut grads, x, gx);
                }
                Op::AvgPool2 { x } => {
                    let x = *x;
                    let gx = avg_pool2_backward(&self.nodes[x.0].value, &g);
                    accumulate(&mut grads, x, gx);
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let gs = g.as_slice().unwrap();
                    let mut off = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        let len: usize = shape.iter().product();
                        let gp = ArrayD::from_shape_vec(IxDyn(&shape), gs[off..off + len].to_vec())
                            .unwrap();
                        off += len;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::FlowSample { src, flow } => {
                    let (src, flow) = (*src, *flow);
                    let (gsrc, gflow) = flow_sample_backward(
                        &self.nodes[src.0].value,
                        &self.nodes[flow.0].value,
                        &g,
                    );
                    accumulate(&mut grads, src, gsrc);
                    accumulate(&mut grads, flow, gflow);
                }
                Op::Correlation { a, b, radius } => {
                    let (a, b, radius) = (*a, *b, *radius);
                    let (ga, gb) = correlation_backward(
                        &self.nodes[a.0].value,
                        &self.nodes[b.0].value,
                        radius,
                        &g,
                    );
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MulMask { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let (c, h, w) = chw(&self.nodes[x.0].value);
                    let mut gx = g;
                    {
                        let gs = gx.as_slice_mut().unwrap();
                        let m = mask.as_slice().unwrap();
                        for ci in 0..c {
                            for i in 0..h * w {
                                gs[ci * h * w + i] *= m[i];
                            }
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::MulBcast { x, m } => {
                    let (x, m) = (*x, *m);
                    let (c, h, w) = chw(&self.nodes[x.0].value);
                    let hw = h * w;
                    let xs = self.nodes[x.0].value.as_slice().unwrap();
                    let ms = self.nodes[m.0].value.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut gx = vec![0.0; c * hw];
                    let mut gm = vec![0.0; hw];
                    for ci in 0..c {
                        for i in 0..hw {
                            gx[ci * hw + i] = gs[ci * hw + i] * ms[i];
                            gm[i] += gs[ci * hw + i] * xs[ci * hw + i];
                        }
                    }
                    accumulate(
                        &mut grads,
                        x,
                        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gx).unwrap(),
                    );
                    accumulate(
                        &mut grads,
                        m,
                        ArrayD::from_shape_vec(IxDyn(&[1, h, w]), gm).unwrap(),
                    );
                }
                Op::Softmax { logits } => {
                    let logits = *logits;
                    let p = &self.nodes[i].value;
                    let (k, h, w) = chw(p);
                    let hw = h * w;
                    let ps = p.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut gl = vec![0.0; k * hw];
                    for i in 0..hw {
                        let mut dot = 0.0;
                        for c in 0..k {
                            dot += gs[c * hw + i] * ps[c * hw + i];
                        }
                        for c in 0..k {
                            gl[c * hw + i] = ps[c * hw + i] * (gs[c * hw + i] - dot);
                        }
                    }
                    accumulate(
                        &mut grads,
                        logits,
                        ArrayD::from_shape_vec(IxDyn(&[k, h, w]), gl).unwrap(),
                    );
                }
                Op::MeanAll { a } => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len() as f64;
                    let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g[[0]] / n);
                    accumulate(&mut grads, a, ga);
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g[[0]]);
                    accumulate(&mut grads, a, ga);
                }
                Op::L1Masked { pred, target, weight, denom } => {
                    let pred = *pred;
                    let denom = *denom;
                    if denom <= 0.0 {
                        continue;
                    }
                    let target = target.clone();
                    let weight = weight.clone();
                    let scale = g[[0]] / denom;
                    let p = &self.nodes[pred.0].value;
                    let (c, h, w) = chw(p);
                    let ps = p.as_slice().unwrap();
                    let ts = target.as_slice().unwrap();
                    let mut gp = ArrayD::zeros(p.raw_dim());
                    {
                        let gs = gp.as_slice_mut().unwrap();
                        match &weight {
                            Some(m) => {
                                let ms = m.as_slice().unwrap();
                                for ci in 0..c {
                                    let off = ci * h * w;
                                    for i in 0..h * w {
                                        let d = ps[off + i] - ts[off + i];
                                        gs[off + i] = scale * ms[i] * sign(d);
                                    }
                                }
                            }
                            None => {
                                for i in 0..c * h * w {
                                    gs[i] = scale * sign(ps[i] - ts[i]);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, pred, gp);
                }
                Op::SoftmaxCe { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let l = &self.nodes[logits.0].value;
                    let (k, h, w) = chw(l);
                    let hw = h * w;
                    let ls = l.as_slice().unwrap();
                    let scale = g[[0]] / hw as f64;
                    let mut gl = ArrayD::zeros(l.raw_dim());
                    {
                        let gs = gl.as_slice_mut().unwrap();
                        for i in 0..hw {
                            let mut m = f64::NEG_INFINITY;
                            for c in 0..k {
                                m = m.max(ls[c * hw + i]);
                            }
                            let mut z = 0.0;
                            for c in 0..k {
                                z += (ls[c * hw + i] - m).exp();
                            }
                            for c in 0..k {
                                let p = (ls[c * hw + i] - m).exp() / z;
                                let y = if labels[i] == c { 1.0 } else { 0.0 };
                                gs[c * hw + i] = scale * (p - y);
                            }
                        }
                    }
                    accumulate(&mut grads, logits, gl);
                }
                Op::CharbonnierSecond { flow, eps, alpha } => {
                    let (flow, eps, alpha) = (*flow, *eps, *alpha);
                    let gf =
                        charbonnier_second_backward(&self.nodes[flow.0].value, eps, alpha, g[[0]]);
                    accumulate(&mut grads, flow, gf);
                }
                Op::WSum { terms } => {
                    let terms = terms.clone();
                    for (t, wgt) in terms {
                        accumulate(&mut grads, t, scalar(g[[0]] * wgt));
                    }
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], v: Val, g: ArrayD<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    (ho, wo)
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * ho * wo];
    let hw_o = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw_o;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = iy as usize * w;
                    let crow = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[crow + ox] = xc[xrow + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; c * h * w];
    let hw_o = ho * wo;
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw_o;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = iy as usize * w;
                    let crow = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xc[xrow + ix as usize] += dcols[crow + ox];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (c, h, wd) = chw(x);
    let ws = w.shape();
    let (co, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(ci, c, "conv2d channel mismatch");
    let (ho, wo) = conv2d_out_dims(h, wd, kh, kw, stride, pad);
    let cols = im2col(x.as_slice().unwrap(), c, h, wd, kh, kw, stride, pad, ho, wo);
    let cols = ndarray::Array2::from_shape_vec((c * kh * kw, ho * wo), cols).unwrap();
    let w2 = w
        .view()
        .into_shape_with_order((co, c * kh * kw))
        .unwrap();
    let mut out = w2.dot(&cols);
    let bs = b.as_slice().unwrap();
    for (mut row, bv) in out.outer_iter_mut().zip(bs.iter()) {
        row += *bv;
    }
    out.into_shape_with_order(IxDyn(&[co, ho, wo])).unwrap()
}

fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    meta: &Conv2dMeta,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (c, h, wd) = chw(x);
    let ws = w.shape();
    let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (_, ho, wo) = chw(gout);
    let cols = im2col(x.as_slice().unwrap(), c, h, wd, kh, kw, meta.stride, meta.pad, ho, wo);
    let cols = ndarray::Array2::from_shape_vec((c * kh * kw, ho * wo), cols).unwrap();
    let g2 = gout
        .view()
        .into_shape_with_order((co, ho * wo))
        .unwrap();
    let gw = g2.dot(&cols.t());
    let gb: Vec<f64> = g2.outer_iter().map(|r| r.sum()).collect();
    let w2 = w
        .view()
        .into_shape_with_order((co, c * kh * kw))
        .unwrap();
    let dcols = w2.t().dot(&g2);
    let dx = col2im(
        dcols.as_slice().unwrap(),
        c,
        h,
        wd,
        kh,
        kw,
        meta.stride,
        meta.pad,
        ho,
        wo,
    );
    (
        ArrayD::from_shape_vec(IxDyn(&[c, h, wd]), dx).unwrap(),
        gw.into_shape_with_order(IxDyn(&[co, c, kh, kw])).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[co]), gb).unwrap(),
    )
}

/// Linear interpolation weights for an origin-anchored resize: source
/// position `dst * (src/dst)`, clamped to the valid range.
fn resize_axis(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = (i as f64 * ratio).min((src - 1) as f64).max(0.0);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_bilinear_forward(x: &ArrayD<f64>, h_out: usize, w_out: usize) -> ArrayD<f64> {
    let (c, h, w) = chw(x);
    let ys = resize_axis(h_out, h);
    let xs = resize_axis(w_out, w);
    let xin = x.as_slice().unwrap();
    let mut out = vec![0.0; c * h_out * w_out];
    for ci in 0..c {
        let src = &xin[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h_out * w_out..(ci + 1) * h_out * w_out];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                dst[oy * w_out + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, h_out, w_out]), out).unwrap()
}

fn resize_bilinear_backward(x: &ArrayD<f64>, gout: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = chw(x);
    let (_, h_out, w_out) = chw(gout);
    let ys = resize_axis(h_out, h);
    let xs = resize_axis(w_out, w);
    let gs = gout.as_slice().unwrap();
    let mut gx = vec![0.0; c * h * w];
    for ci in 0..c {
        let dst = &gs[ci * h_out * w_out..(ci + 1) * h_out * w_out];
        let src = &mut gx[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = dst[oy * w_out + ox];
                src[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                src[y0 * w + x1] += g * (1.0 - fy) * fx;
                src[y1 * w + x0] += g * fy * (1.0 - fx);
                src[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gx).unwrap()
}

pub(crate) fn avg_pool2_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = chw(x);
    let (ho, wo) = (h / 2, w / 2);
    assert!(ho >= 1 && wo >= 1, "avg_pool2 on dims {}x{}", h, w);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let src = &xs[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, ho, wo]), out).unwrap()
}

fn avg_pool2_backward(x: &ArrayD<f64>, gout: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = chw(x);
    let (_, ho, wo) = chw(gout);
    let gs = gout.as_slice().unwrap();
    let mut gx = vec![0.0; c * h * w];
    for ci in 0..c {
        let dst = &gs[ci * ho * wo..(ci + 1) * ho * wo];
        let src = &mut gx[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * dst[oy * wo + ox];
                let i = 2 * oy * w + 2 * ox;
                src[i] += g;
                src[i + 1] += g;
                src[i + w] += g;
                src[i + w + 1] += g;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gx).unwrap()
}

pub(crate) fn flow_sample_forward(src: &ArrayD<f64>, flow: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = chw(src);
    let fs = flow.shape();
    assert_eq!(fs, &[2, h, w], "flow dims mismatch");
    let s = src.as_slice().unwrap();
    let f = flow.as_slice().unwrap();
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + f[i]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + f[hw + i]).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ci in 0..c {
                let sc = &s[ci * hw..(ci + 1) * hw];
                let v = (1.0 - fy) * ((1.0 - fx) * sc[y0 * w + x0] + fx * sc[y0 * w + x1])
                    + fy * ((1.0 - fx) * sc[y1 * w + x0] + fx * sc[y1 * w + x1]);
                out[ci * hw + i] = v;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
}

fn flow_sample_backward(
    src: &ArrayD<f64>,
    flow: &ArrayD<f64>,
    gout: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (c, h, w) = chw(src);
    let s = src.as_slice().unwrap();
    let f = flow.as_slice().unwrap();
    let g = gout.as_slice().unwrap();
    let hw = h * w;
    let mut gsrc = vec![0.0; c * hw];
    let mut gflow = vec![0.0; 2 * hw];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rx = x as f64 + f[i];
            let ry = y as f64 + f[hw + i];
            let sx = rx.clamp(0.0, (w - 1) as f64);
            let sy = ry.clamp(0.0, (h - 1) as f64);
            let x_active = rx > 0.0 && rx < (w - 1) as f64;
            let y_active = ry > 0.0 && ry < (h - 1) as f64;
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let mut dfx = 0.0;
            let mut dfy = 0.0;
            for ci in 0..c {
                let go = g[ci * hw + i];
                if go == 0.0 {
                    continue;
                }
                let sc = &s[ci * hw..(ci + 1) * hw];
                let gc = &mut gsrc[ci * hw..(ci + 1) * hw];
                gc[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                gc[y0 * w + x1] += go * (1.0 - fy) * fx;
                gc[y1 * w + x0] += go * fy * (1.0 - fx);
                gc[y1 * w + x1] += go * fy * fx;
                dfx += go
                    * ((1.0 - fy) * (sc[y0 * w + x1] - sc[y0 * w + x0])
                        + fy * (sc[y1 * w + x1] - sc[y1 * w + x0]));
                dfy += go
                    * ((1.0 - fx) * (sc[y1 * w + x0] - sc[y0 * w + x0])
                        + fx * (sc[y1 * w + x1] - sc[y0 * w + x1]));
            }
            if x_active {
                gflow[i] = dfx;
            }
            if y_active {
                gflow[hw + i] = dfy;
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gsrc).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[2, h, w]), gflow).unwrap(),
    )
}

pub(crate) fn correlation_forward(a: &ArrayD<f64>, b: &ArrayD<f64>, radius: usize) -> ArrayD<f64> {
    let (c, h, w) = chw(a);
    assert_eq!(b.shape(), &[c, h, w], "correlation dims mismatch");
    let d = 2 * radius + 1;
    let asl = a.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let hw = h * w;
    let inv_c = 1.0 / c as f64;
    let mut out = vec![0.0; d * d * hw];
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let ch = ((dy + r) as usize * d) + (dx + r) as usize;
            let dst = &mut out[ch * hw..(ch + 1) * hw];
            for y in 0..h as isize {
                let by = y + dy;
                if by < 0 || by >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let bx = x + dx;
                    if bx < 0 || bx >= w as isize {
                        continue;
                    }
                    let ia = (y * w as isize + x) as usize;
                    let ib = (by * w as isize + bx) as usize;
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += asl[ci * hw + ia] * bsl[ci * hw + ib];
                    }
                    dst[ia] = acc * inv_c;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[d * d, h, w]), out).unwrap()
}

fn correlation_backward(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    radius: usize,
    gout: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (c, h, w) = chw(a);
    let d = 2 * radius + 1;
    let asl = a.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let g = gout.as_slice().unwrap();
    let hw = h * w;
    let inv_c = 1.0 / c as f64;
    let mut ga = vec![0.0; c * hw];
    let mut gb = vec![0.0; c * hw];
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let ch = ((dy + r) as usize * d) + (dx + r) as usize;
            let gch = &g[ch * hw..(ch + 1) * hw];
            for y in 0..h as isize {
                let by = y + dy;
                if by < 0 || by >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let bx = x + dx;
                    if bx < 0 || bx >= w as isize {
                        continue;
                    }
                    let ia = (y * w as isize + x) as usize;
                    let ib = (by * w as isize + bx) as usize;
                    let go = gch[ia] * inv_c;
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        ga[ci * hw + ia] += go * bsl[ci * hw + ib];
                        gb[ci * hw + ib] += go * asl[ci * hw + ia];
                    }
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), ga).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gb).unwrap(),
    )
}

const SECOND_ORDER_DIRS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

fn charbonnier_second_forward(flow: &ArrayD<f64>, eps: f64, alpha: f64) -> f64 {
    let (c, h, w) = chw(flow);
    assert_eq!(c, 2, "second-order smoothness expects a [2,H,W] flow");
    if h < 3 || w < 3 {
        return 0.0;
    }
    let f = flow.as_slice().unwrap();
    let hw = h * w;
    let e2 = eps * eps;
    let mut total = 0.0;
    for ci in 0..2 {
        let fc = &f[ci * hw..(ci + 1) * hw];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                for (dy, dx) in SECOND_ORDER_DIRS {
                    let p = ((y as isize + dy) * w as isize + x as isize + dx) as usize;
                    let m = ((y as isize - dy) * w as isize + x as isize - dx) as usize;
                    let dd = fc[m] + fc[p] - 2.0 * fc[i];
                    total += (dd * dd + e2).powf(alpha);
                }
            }
        }
    }
    total / (2.0 * 4.0 * ((h - 2) * (w - 2)) as f64)
}

fn charbonnier_second_backward(
    flow: &ArrayD<f64>,
    eps: f64,
    alpha: f64,
    gscale: f64,
) -> ArrayD<f64> {
    let (_, h, w) = chw(flow);
    let mut gf = ArrayD::zeros(flow.raw_dim());
    if h < 3 || w < 3 {
        return gf;
    }
    let f = flow.as_slice().unwrap();
    let hw = h * w;
    let e2 = eps * eps;
    let norm = gscale / (2.0 * 4.0 * ((h - 2) * (w - 2)) as f64);
    let gs = gf.as_slice_mut().unwrap();
    for ci in 0..2 {
        let fc = &f[ci * hw..(ci + 1) * hw];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                for (dy, dx) in SECOND_ORDER_DIRS {
                    let p = ((y as isize + dy) * w as isize + x as isize + dx) as usize;
                    let m = ((y as isize - dy) * w as isize + x as isize - dx) as usize;
                    let dd = fc[m] + fc[p] - 2.0 * fc[i];
                    let dterm = norm * alpha * (dd * dd + e2).powf(alpha - 1.0) * 2.0 * dd;
                    gs[ci * hw + m] += dterm;
                    gs[ci * hw + p] += dterm;
                    gs[ci * hw + i] -= 2.0 * dterm;
                }
            }
        }
    }
    gf
}
