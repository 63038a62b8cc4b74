use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied inside the logarithm of entropy terms.
pub const ENTROPY_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Reshape(Var),
    Relu(Var),
    MatMul(Var, Var),
    Conv3x3 { x: Var, w: Var },
    Conv1x1 { x: Var, kernel: Var },
    AvgPool2x2(Var),
    AvgPoolSpatial(Var),
    MaxPoolSpatial { x: Var, argmax: Vec<usize> },
    Softmax(Var),
    SpatialSoftmax(Var),
    Entropy { p: Var, floor: f64 },
    CrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations in evaluation order for a single reverse pass.
///
/// A tape is built fresh for each forward pass. Node inputs always precede the
/// node itself, so a reverse sweep over the node list is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not depend on any tracked leaf.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros when `v` received none.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g).expect("gradient shape"))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in xs.iter_mut() {
        *v /= z;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}

fn entropy_of(p: &[f64], floor: f64) -> f64 {
    -p.iter().map(|&v| v * v.max(floor).ln()).sum::<f64>()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Gradients are produced only for leaves created
    /// with `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("sub", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.value(a).map(|v| v * alpha);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, alpha), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Squared L2 norm of all elements.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v < 0.0 { 0.0 } else { v });
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// 3×3 convolution, stride 1, zero "same" padding, no bias.
    /// `x` is `[Ci, H, W]`, `w` is `[Co, Ci, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::dim("conv3x3", sx, sw));
        }
        let (ci, h, wd, co) = (sx[0], sx[1], sx[2], sw[0]);
        let padded = pad1(tx.data(), ci, h, wd);
        let pw = wd + 2;
        let mut out = vec![0.0; co * h * wd];
        let wdat = tw.data();
        for o in 0..co {
            let plane = &mut out[o * h * wd..(o + 1) * h * wd];
            for c in 0..ci {
                let src = &padded[c * (h + 2) * pw..(c + 1) * (h + 2) * pw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wdat[((o * ci + c) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let s = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + wd];
                            let d = &mut plane[y * wd..(y + 1) * wd];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![co, h, wd], out)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv3x3 { x, w }, ng))
    }

    /// Pointwise convolution: `out[k,h,w] = Σ_c x[c,h,w]·kernel[c,k]`.
    pub fn conv1x1(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sx[0] {
            return Err(Error::dim("conv1x1", sx, sk));
        }
        let (c, hw, k) = (sx[0], sx[1] * sx[2], sk[1]);
        let mut out = vec![0.0; k * hw];
        let (dx, dk) = (tx.data(), tk.data());
        for ch in 0..c {
            let src = &dx[ch * hw..(ch + 1) * hw];
            for a in 0..k {
                let kv = dk[ch * k + a];
                for (o, &s) in out[a * hw..(a + 1) * hw].iter_mut().zip(src) {
                    *o += kv * s;
                }
            }
        }
        let out = Tensor::new(vec![k, sx[1], sx[2]], out)?;
        let ng = self.needs(x) || self.needs(kernel);
        Ok(self.push(out, Op::Conv1x1 { x, kernel }, ng))
    }

    /// 2× spatial downsample by averaging non-overlapping 2×2 blocks.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::contract(
                "avg_pool2x2",
                format!("expected [C, even H, even W], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = tx.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::AvgPool2x2(x), ng))
    }

    /// Mean over the spatial axes: `[C, H, W] -> [C]`.
    pub fn avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(Error::contract("avg_pool_spatial", format!("expected [C,H,W], got {s:?}")));
        }
        let hw = s[1] * s[2];
        let out: Vec<f64> = tx
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![s[0]], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::AvgPoolSpatial(x), ng))
    }

    /// Max over the spatial axes: `[K, H, W] -> [K]`. Ties go to the first
    /// cell in row-major order.
    pub fn max_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(Error::contract("max_pool_spatial", format!("expected [K,H,W], got {s:?}")));
        }
        let hw = s[1] * s[2];
        let mut vals = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for slice in tx.data().chunks(hw) {
            let (idx, v) = argmax_first(slice);
            vals.push(v);
            argmax.push(idx);
        }
        let out = Tensor::new(vec![s[0]], vals)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxPoolSpatial { x, argmax }, ng))
    }

    /// Softmax over a 1-D tensor, max-subtracted for stability.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 1 {
            return Err(Error::contract("softmax", format!("expected 1-D, got {:?}", t.shape())));
        }
        let mut data = t.data().to_vec();
        softmax_in_place(&mut data);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(logits);
        Ok(self.push(out, Op::Softmax(logits), ng))
    }

    /// Softmax over the cells of each leading-axis slice of a `[K, H, W]` tensor.
    pub fn spatial_softmax(&mut self, maps: Var) -> Result<Var> {
        let t = self.value(maps);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::contract("spatial_softmax", format!("expected [K,H,W], got {s:?}")));
        }
        let hw = s[1] * s[2];
        let mut data = t.data().to_vec();
        data.chunks_mut(hw).for_each(softmax_in_place);
        let out = Tensor::new(s.to_vec(), data)?;
        let ng = self.needs(maps);
        Ok(self.push(out, Op::SpatialSoftmax(maps), ng))
    }

    /// Shannon entropy `−Σ p·ln(max(p, floor))` of a distribution.
    ///
    /// A 1-D input must lie on the simplex. A `[K, ...]` input is treated as K
    /// independent distributions (each slice on the simplex) and the entropies
    /// are summed.
    pub fn entropy(&mut self, p: Var, floor: f64) -> Result<Var> {
        let t = self.value(p);
        let groups = if t.ndim() == 1 { 1 } else { t.shape()[0] };
        let width = t.len() / groups;
        let mut total = 0.0;
        for (g, slice) in t.data().chunks(width).enumerate() {
            let mass: f64 = slice.iter().sum();
            if (mass - 1.0).abs() > SIMPLEX_TOL || slice.iter().any(|&v| v < -SIMPLEX_TOL) {
                return Err(Error::contract(
                    "entropy",
                    format!("slice {g} is not a distribution (sum {mass})"),
                ));
            }
            total += entropy_of(slice, floor);
        }
        let ng = self.needs(p);
        Ok(self.push(Tensor::scalar(total), Op::Entropy { p, floor }, ng))
    }

    /// Cross-entropy `−Σ_i target_i · log softmax(logits)_i`; a hard label is a
    /// one-hot target.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 1 || t.len() != target.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[target.len()]));
        }
        let d = t.data();
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss: f64 = target
            .iter()
            .zip(d)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, v)| w * (lse - v))
            .sum();
        let probs = d.iter().map(|v| (v - lse).exp()).collect();
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    accumulate_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Scale(a, alpha) => {
                if self.needs(*a) {
                    accumulate_owned(&mut grads[a.0], g.iter().map(|v| v * alpha).collect());
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    accumulate_owned(&mut grads[a.0], vec![g[0]; self.value(*a).len()]);
                }
            }
            Op::SumSquares(a) => {
                if self.needs(*a) {
                    let d = self.value(*a).data().iter().map(|v| 2.0 * v * g[0]).collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let d = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (da, db) = (ta.data(), tb.data());
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] =
                                grow.iter().zip(&db[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = da[i * k + p];
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::Conv3x3 { x, w } => self.conv3x3_backward(*x, *w, g, grads),
            Op::Conv1x1 { x, kernel } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (c, hw, k) = (tx.shape()[0], tx.shape()[1] * tx.shape()[2], tk.shape()[1]);
                let (dx, dk) = (tx.data(), tk.data());
                if self.needs(*x) {
                    let mut gx = vec![0.0; c * hw];
                    for ch in 0..c {
                        let dst = &mut gx[ch * hw..(ch + 1) * hw];
                        for a in 0..k {
                            let kv = dk[ch * k + a];
                            for (o, gv) in dst.iter_mut().zip(&g[a * hw..(a + 1) * hw]) {
                                *o += kv * gv;
                            }
                        }
                    }
                    accumulate_owned(&mut grads[x.0], gx);
                }
                if self.needs(*kernel) {
                    let mut gk = vec![0.0; c * k];
                    for ch in 0..c {
                        let src = &dx[ch * hw..(ch + 1) * hw];
                        for a in 0..k {
                            gk[ch * k + a] =
                                src.iter().zip(&g[a * hw..(a + 1) * hw]).map(|(p, q)| p * q).sum();
                        }
                    }
                    accumulate_owned(&mut grads[kernel.0], gk);
                }
            }
            Op::AvgPool2x2(x) => {
                if self.needs(*x) {
                    let s = self.value(*x).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let q = 0.25 * g[(ch * oh + y) * ow + xx];
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                gx[base] += q;
                                gx[base + 1] += q;
                                gx[base + w] += q;
                                gx[base + w + 1] += q;
                            }
                        }
                    }
                    accumulate_owned(&mut grads[x.0], gx);
                }
            }
            Op::AvgPoolSpatial(x) => {
                if self.needs(*x) {
                    let s = self.value(*x).shape();
                    let hw = s[1] * s[2];
                    let inv = 1.0 / hw as f64;
                    let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect();
                    accumulate_owned(&mut grads[x.0], gx);
                }
            }
            Op::MaxPoolSpatial { x, argmax } => {
                if self.needs(*x) {
                    let s = self.value(*x).shape();
                    let hw = s[1] * s[2];
                    let mut gx = vec![0.0; s[0] * hw];
                    for (k, (&idx, &gv)) in argmax.iter().zip(g).enumerate() {
                        gx[k * hw + idx] = gv;
                    }
                    accumulate_owned(&mut grads[x.0], gx);
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    softmax_backward(y, g, &mut gx);
                    accumulate_owned(&mut grads[x.0], gx);
                }
            }
            Op::SpatialSoftmax(x) => {
                if self.needs(*x) {
                    let s = node.value.shape();
                    let hw = s[1] * s[2];
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for ((ys, gs), os) in y.chunks(hw).zip(g.chunks(hw)).zip(gx.chunks_mut(hw)) {
                        softmax_backward(ys, gs, os);
                    }
                    accumulate_owned(&mut grads[x.0], gx);
                }
            }
            Op::Entropy { p, floor } => {
                if self.needs(*p) {
                    let gx = self
                        .value(*p)
                        .data()
                        .iter()
                        .map(|&v| {
                            let d = if v > *floor { -(v.ln() + 1.0) } else { -floor.ln() };
                            d * g[0]
                        })
                        .collect();
                    accumulate_owned(&mut grads[p.0], gx);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if self.needs(*logits) {
                    let mass: f64 = target.iter().sum();
                    let gx = probs
                        .iter()
                        .zip(target)
                        .map(|(p, t)| (p * mass - t) * g[0])
                        .collect();
                    accumulate_owned(&mut grads[logits.0], gx);
                }
            }
        }
    }

    fn conv3x3_backward(&self, x: Var, w: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let co = tw.shape()[0];
        let pw = wd + 2;
        let plane = (h + 2) * pw;
        let wdat = tw.data();
        if self.needs(x) {
            let mut gpad = vec![0.0; ci * plane];
            for o in 0..co {
                let gplane = &g[o * h * wd..(o + 1) * h * wd];
                for c in 0..ci {
                    let dst = &mut gpad[c * plane..(c + 1) * plane];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = wdat[((o * ci + c) * 3 + ky) * 3 + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in 0..h {
                                let d = &mut dst[(y + ky) * pw + kx..(y + ky) * pw + kx + wd];
                                for (dv, &gv) in d.iter_mut().zip(&gplane[y * wd..(y + 1) * wd]) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            let mut gx = vec![0.0; ci * h * wd];
            for c in 0..ci {
                for y in 0..h {
                    let src = &gpad[c * plane + (y + 1) * pw + 1..c * plane + (y + 1) * pw + 1 + wd];
                    gx[(c * h + y) * wd..(c * h + y + 1) * wd].copy_from_slice(src);
                }
            }
            accumulate_owned(&mut grads[x.0], gx);
        }
        if self.needs(w) {
            let padded = pad1(tx.data(), ci, h, wd);
            let mut gw = vec![0.0; co * ci * 9];
            for o in 0..co {
                let gplane = &g[o * h * wd..(o + 1) * h * wd];
                for c in 0..ci {
                    let src = &padded[c * plane..(c + 1) * plane];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut acc = 0.0;
                            for y in 0..h {
                                let s = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + wd];
                                acc += s
                                    .iter()
                                    .zip(&gplane[y * wd..(y + 1) * wd])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            gw[((o * ci + c) * 3 + ky) * 3 + kx] = acc;
                        }
                    }
                }
            }
            accumulate_owned(&mut grads[w.0], gw);
        }
    }
}

fn pad1(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        for y in 0..h {
            let dst = ch * plane + (y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&data[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    out
}

/// Index and value of the maximum, first occurrence on ties.
pub(crate) fn argmax_first(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
