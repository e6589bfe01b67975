//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Every forward operation appends a node holding its output value and, when
//! any input requires a gradient, whatever it needs to replay its adjoint.
//! [`Tape::backward`] consumes the tape and walks it once in reverse.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    ChannelMean { x: Var, rows: Vec<usize> },
    ChannelVar { x: Var, rows: Vec<usize>, mean: Vec<T> },
    Relu { x: Var },
    Tanh { x: Var },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, k: usize },
    Reshape { x: Var },
    Gather { table: Var, idx: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Sum { a: Var },
    SqDist { x: Var, target: Vec<T> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Kl { student: Var, teacher_probs: Vec<T>, student_probs: Vec<T> },
    FakeQuant { x: Var, inside: Vec<bool> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-channel layout helper: `(n, c, s)` for `[N, C, ...]` tensors.
fn ncs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("expected [N, C, ...], got {shape:?}"));
    }
    let s = shape[2..].iter().product();
    Ok((shape[0], shape[1], s))
}

fn log_softmax_rows<T: Real>(z: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    for (row, orow) in z.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().copied().fold(row[0], T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: value.with_requires_grad(false), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Current value of `v`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.clone(), Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// `y = x·wᵀ + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return shape_err(format!("dense: x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); batch * out];
        matmul_bt_acc(self.value(x).data(), self.value(w).data(), &mut y, batch, inp, out);
        let bias = self.value(b).data();
        for row in y.chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![batch, out], y)?, Op::Dense { x, w, b }, rg))
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return shape_err(format!("conv2d: x {xs:?}, w {ws:?}, stride {stride}"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        if kh > hp || kw > wp || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return shape_err(format!("conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not tile {h}x{wd}"));
        }
        let geom =
            ConvGeom { n, c, h, w: wd, o, kh, kw, ho: (hp - kh) / stride + 1, wo: (wp - kw) / stride + 1, stride, pad };
        let (k, p) = (geom.k(), geom.p());
        let xv = self.value(x).data();
        let mut cols = vec![T::zero(); n * k * p];
        for s in 0..n {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols[s * k * p..(s + 1) * k * p]);
        }
        let wv = self.value(w).data();
        let mut y = vec![T::zero(); n * o * p];
        for s in 0..n {
            matmul_acc(wv, &cols[s * k * p..(s + 1) * k * p], &mut y[s * o * p..(s + 1) * o * p], o, k, p);
        }
        let rg = self.rg(x) || self.rg(w);
        let out = Tensor::new(vec![n, o, geom.ho, geom.wo], y)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols: if rg { cols } else { Vec::new() } }, rg))
    }

    /// Batch normalization over `N×spatial` per channel.
    ///
    /// With `running = None` the batch's own biased statistics normalize the
    /// input; otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[T], &[T])>, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = ncs(&shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batch_norm: {} channels, gamma {:?}, beta {:?}",
                c,
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if n * s == 0 {
            return Err(Error::EmptyBatch);
        }
        let xv = self.value(x).data();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err("batch_norm: running statistics length");
                }
                (m.to_vec(), v.to_vec())
            }
            None => channel_moments(xv, n, c, s, &(0..n).collect::<Vec<_>>()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    y[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: running.is_none() };
        Ok(self.push(Tensor::new(shape, y)?, op, rg))
    }

    /// Per-channel mean over the listed samples and all spatial positions.
    pub fn channel_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(x))?;
        check_rows(rows, n)?;
        let (mean, _) = channel_moments(self.value(x).data(), n, c, s, rows);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c], mean)?, Op::ChannelMean { x, rows: rows.to_vec() }, rg))
    }

    /// Per-channel biased variance over the listed samples and all spatial positions.
    pub fn channel_var(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(x))?;
        check_rows(rows, n)?;
        let (mean, var) = channel_moments(self.value(x).data(), n, c, s, rows);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c], var)?, Op::ChannelVar { x, rows: rows.to_vec(), mean }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(T::zero())).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.tanh()).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return shape_err(format!("avg_pool {k} on {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x).data();
        let norm = T::one() / T::of((k * k) as f64);
        let mut y = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for iy in 0..h {
                for ix in 0..w {
                    y[plane * ho * wo + (iy / k) * wo + ix / k] += xv[plane * h * w + iy * w + ix] * norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], y)?, Op::AvgPool { x, k }, rg))
    }

    /// Nearest-neighbour `k×` upsampling.
    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 {
            return shape_err(format!("upsample {k} on {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * k, w * k);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    y[plane * ho * wo + oy * wo + ox] = xv[plane * h * w + (oy / k) * w + ox / k];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], y)?, Op::Upsample { x, k }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Rows `idx` of `table[V, D]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err(format!("gather from {s:?}"));
        }
        let t = self.value(table).select_rows(idx)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    /// Adds scalar vars; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        };
        iter.try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `‖x − target‖²` with a constant target.
    pub fn sq_dist(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if self.value(x).numel() != target.len() {
            return shape_err(format!("sq_dist: {:?} vs target of length {}", self.shape(x), target.len()));
        }
        let total = self.value(x).data().iter().zip(target).map(|(&a, &t)| (a - t) * (a - t)).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::SqDist { x, target: target.to_vec() }, rg))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!("cross entropy: logits {s:?}, {} labels", labels.len()));
        }
        let (b, k) = (s[0], s[1]);
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let logp = log_softmax_rows(self.value(logits).data(), k);
        let loss = labels.iter().enumerate().map(|(i, &l)| -logp[i * k + l]).sum::<T>() / T::of(b as f64);
        let probs = logp.iter().map(|&v| v.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Mean over the batch of `KL(softmax(teacher) ‖ softmax(student))`.
    /// No gradient flows into `teacher`.
    pub fn kl_divergence(&mut self, student: Var, teacher: Var) -> Result<Var> {
        self.same_shape(student, teacher, "kl_divergence")?;
        let s = self.shape(student).to_vec();
        if s.len() != 2 {
            return shape_err(format!("kl_divergence on {s:?}"));
        }
        let (b, k) = (s[0], s[1]);
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let lt = log_softmax_rows(self.value(teacher).data(), k);
        let ls = log_softmax_rows(self.value(student).data(), k);
        let mut total = T::zero();
        for (a, c) in lt.iter().zip(&ls) {
            let p = a.exp();
            if p > T::zero() {
                total += p * (*a - *c);
            }
        }
        let loss = (total / T::of(b as f64)).max(T::zero());
        let rg = self.rg(student);
        let op = Op::Kl {
            student,
            teacher_probs: lt.iter().map(|&v| v.exp()).collect(),
            student_probs: ls.iter().map(|&v| v.exp()).collect(),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Quantize-dequantize with a clipped straight-through gradient.
    ///
    /// `bounds` holds `(lower, upper, scale)` per channel along the leading
    /// axis (a single entry applies to the whole tensor). When `residual` is
    /// given the forward value is `clip(x) + residual` instead, which keeps
    /// the quantization error fixed while the clip stays live. Returns the
    /// output together with the residual `fq(x) − clip(x)` of this call.
    pub fn fake_quant(&mut self, x: Var, bounds: &[(T, T, T)], residual: Option<&[T]>) -> Result<(Var, Vec<T>)> {
        let xt = self.value(x);
        let numel = xt.numel();
        if bounds.is_empty() || !numel.is_multiple_of(bounds.len()) {
            return shape_err(format!("fake_quant: {} channels for {:?}", bounds.len(), xt.shape()));
        }
        if let Some(r) = residual {
            if r.len() != numel {
                return shape_err("fake_quant: residual length");
            }
        }
        let per = numel / bounds.len();
        let mut out = Vec::with_capacity(numel);
        let mut inside = Vec::with_capacity(numel);
        let mut res = Vec::with_capacity(numel);
        for (i, &v) in xt.data().iter().enumerate() {
            let (l, u, s) = bounds[i / per];
            let clipped = v.max(l).min(u);
            let fq = (clipped / s).round() * s;
            res.push(fq - clipped);
            out.push(match residual {
                Some(r) => clipped + r[i],
                None => fq,
            });
            inside.push(v >= l && v <= u);
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok((self.push(out, Op::FakeQuant { x, inside }, rg), res))
    }

    /// Replays the tape in reverse from the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, &sizes);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], sizes: &[usize]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); sizes[$v.0]])
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                if want(*x) {
                    matmul_acc(g, val(*w), acc!(x), batch, out, inp);
                }
                if want(*w) {
                    matmul_at_acc(g, val(*x), acc!(w), out, batch, inp);
                }
                if want(*b) {
                    let db = acc!(b);
                    for row in g.chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (k, p, o) = (geom.k(), geom.p(), geom.o);
                if want(*w) {
                    let dw = acc!(w);
                    for s in 0..geom.n {
                        matmul_bt_acc(&g[s * o * p..(s + 1) * o * p], &cols[s * k * p..(s + 1) * k * p], dw, o, p, k);
                    }
                }
                if want(*x) {
                    let wv = val(*w);
                    let plane = geom.c * geom.h * geom.w;
                    let mut dcols = vec![T::zero(); k * p];
                    let dx = acc!(x);
                    for s in 0..geom.n {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        matmul_at_acc(wv, &g[s * o * p..(s + 1) * o * p], &mut dcols, k, o, p);
                        col2im(&dcols, geom, &mut dx[s * plane..(s + 1) * plane]);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, s) = ncs(self.shape(*x)).expect("recorded shape");
                let gv = val(*gamma);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut dxhat_sum = vec![T::zero(); c];
                let mut dxhat_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            dg[ch] += g[j] * xhat[j];
                            db[ch] += g[j];
                            let dxh = g[j] * gv[ch];
                            dxhat_sum[ch] += dxh;
                            dxhat_xhat[ch] += dxh * xhat[j];
                        }
                    }
                }
                if want(*x) {
                    let m = T::of((n * s) as f64);
                    let dx = acc!(x);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            for j in base..base + s {
                                let dxh = g[j] * gv[ch];
                                dx[j] += if *batch_stats {
                                    inv_std[ch] / m * (m * dxh - dxhat_sum[ch] - xhat[j] * dxhat_xhat[ch])
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                }
                if want(*gamma) {
                    add_into(acc!(gamma), &dg);
                }
                if want(*beta) {
                    add_into(acc!(beta), &db);
                }
            }
            Op::ChannelMean { x, rows } => {
                let (_, c, s) = ncs(self.shape(*x)).expect("recorded shape");
                let m = T::of((rows.len() * s) as f64);
                let dx = acc!(x);
                for &r in rows {
                    for ch in 0..c {
                        let base = (r * c + ch) * s;
                        let d = g[ch] / m;
                        dx[base..base + s].iter_mut().for_each(|v| *v += d);
                    }
                }
            }
            Op::ChannelVar { x, rows, mean } => {
                let (_, c, s) = ncs(self.shape(*x)).expect("recorded shape");
                let m = T::of((rows.len() * s) as f64);
                let xv = val(*x);
                let two = T::of(2.0);
                let dx = acc!(x);
                for &r in rows {
                    for ch in 0..c {
                        let base = (r * c + ch) * s;
                        for j in base..base + s {
                            dx[j] += g[ch] * two * (xv[j] - mean[ch]) / m;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let y = node.value.data();
                let dx = acc!(x);
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let dx = acc!(x);
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * (T::one() - yv * yv);
                }
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(*x);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let norm = T::one() / T::of((k * k) as f64);
                let dx = acc!(x);
                for plane in 0..n * c {
                    for iy in 0..h {
                        for ix in 0..w {
                            dx[plane * h * w + iy * w + ix] += g[plane * ho * wo + (iy / k) * wo + ix / k] * norm;
                        }
                    }
                }
            }
            Op::Upsample { x, k } => {
                let s = self.shape(*x);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h * k, w * k);
                let dx = acc!(x);
                for plane in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[plane * h * w + (oy / k) * w + ox / k] += g[plane * ho * wo + oy * wo + ox];
                        }
                    }
                }
            }
            Op::Reshape { x } => add_into(acc!(x), g),
            Op::Gather { table, idx } => {
                let d = self.shape(*table)[1];
                let dt = acc!(table);
                for (row, &r) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[r * d + j] += g[row * d + j];
                    }
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    add_into(acc!(a), g);
                }
                if want(*b) {
                    add_into(acc!(b), g);
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let bv = val(*b);
                    let da = acc!(a);
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if want(*b) {
                    let av = val(*a);
                    let db = acc!(b);
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale { a, c } => {
                let da = acc!(a);
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * *c;
                }
            }
            Op::Sum { a } => {
                let da = acc!(a);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SqDist { x, target } => {
                let xv = val(*x);
                let two = T::of(2.0);
                let dx = acc!(x);
                for ((d, &a), &t) in dx.iter_mut().zip(xv).zip(target) {
                    *d += g[0] * two * (a - t);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let dz = acc!(logits);
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        dz[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
            Op::Kl { student, teacher_probs, student_probs } => {
                let b = self.shape(*student)[0];
                let scale = g[0] / T::of(b as f64);
                let dz = acc!(student);
                for ((d, &ps), &pt) in dz.iter_mut().zip(student_probs).zip(teacher_probs) {
                    *d += scale * (ps - pt);
                }
            }
            Op::FakeQuant { x, inside } => {
                let dx = acc!(x);
                for ((d, &gv), &ok) in dx.iter_mut().zip(g).zip(inside) {
                    if ok {
                        *d += gv;
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_rows(rows: &[usize], n: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return shape_err(format!("sample {r} out of range for batch of {n}"));
    }
    Ok(())
}

/// Per-channel mean and biased variance over `rows` and spatial positions.
pub(crate) fn channel_moments<T: Real>(x: &[T], _n: usize, c: usize, s: usize, rows: &[usize]) -> (Vec<T>, Vec<T>) {
    let m = T::of((rows.len() * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for &r in rows {
        for ch in 0..c {
            let base = (r * c + ch) * s;
            mean[ch] += x[base..base + s].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for &r in rows {
        for ch in 0..c {
            let base = (r * c + ch) * s;
            var[ch] += x[base..base + s].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(ch * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(ch * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. the leaf `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Like [`Gradients::get`] but yields zeros for unreached leaves.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0]);

        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let w = tape.constant(t(&[1, 2], &[-7.0, 3.5]));
        let b = tape.constant(t(&[1], &[5.0]));
        let y = tape.dense(z, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn dense_rejects_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.dense(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);

        let img = Tensor::from_fn(&[2, 1, 4, 4], |i| i as f64 * 0.5 - 3.0);
        let x = tape.constant(img.clone());
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), img.data());
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, 2, 0).is_err());
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn relu_and_tanh() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::new(vec![2], vec![0.0, 50.0]).unwrap());
        let y = tape.tanh(z);
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!(tape.value(y).data()[1] <= 1.0);
        let z = tape.constant(Tensor::new(vec![1], vec![5.0]).unwrap());
        let y = tape.tanh(z);
        assert!(tape.value(y).data()[0] < 1.0 && tape.value(y).data()[0] > -1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let z = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.3133).abs() < 1e-4);

        let mut prev = f64::INFINITY;
        for big in [1.0, 5.0, 20.0, 200.0] {
            let z = tape.constant(t(&[1, 3], &[big, 0.0, 0.0]));
            let ce = tape_ce(&mut tape, z, 0);
            let l = tape.value(ce).item();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-12);

        let z = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(tape.softmax_cross_entropy(z, &[2]), Err(Error::Label { label: 2, classes: 2 })));
    }

    fn tape_ce(tape: &mut Tape<f64>, z: Var, label: usize) -> Var {
        tape.softmax_cross_entropy(z, &[label]).unwrap()
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]));
        let b = tape.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]));
        let l = tape.kl_divergence(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let student = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let teacher = tape.constant(t(&[1, 2], &[2f64.ln(), 0.0]));
        let l = tape.kl_divergence(student, teacher).unwrap();
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.0566).abs() < 1e-4);

        let c = tape.constant(t(&[1, 3], &[0.0; 3]));
        assert!(tape.kl_divergence(student, c).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::full(&[2], 1.0));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn kl_gradient_skips_teacher() {
        let mut tape = Tape::<f64>::new();
        let s = tape.param(&t(&[1, 2], &[0.0, 1.0]));
        let te = tape.param(&t(&[1, 2], &[1.0, 0.0]));
        let l = tape.kl_divergence(s, te).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(s).is_some());
        assert!(g.get(te).is_none());
    }

    #[test]
    fn batch_norm_biased_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let m = tape.channel_mean(x, &[0, 1]).unwrap();
        let v = tape.channel_var(x, &[0, 1]).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        assert_eq!(tape.value(v).data(), &[1.0]);
        assert!(matches!(tape.channel_mean(x, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn fake_quant_straight_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[3], &[1.4, 5.0, 2.0]));
        let (y, res) = tape.fake_quant(x, &[(0.0, 3.0, 1.0)], None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0]);
        assert!((res[0] + 0.4).abs() < 1e-12);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 1.0]);
    }
}
