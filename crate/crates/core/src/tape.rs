//! Dense 64-bit tensors and define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! replays the recorded operations in reverse and accumulates gradients into
//! the leaves that were created with `requires_grad = true`. Tapes are cheap
//! and meant to be rebuilt per forward pass; attacks build one per step.
//!
//! All reductions accumulate sequentially left-to-right so repeated runs are
//! bit-identical.

use crate::error::Error;

/// Dense n-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
}

/// Forward values plus grad-requirement flags, visible to backward rules.
pub(crate) struct TapeCore {
    nodes: Vec<Node>,
    needs: Vec<bool>,
}

impl TapeCore {
    fn data(&self, id: usize) -> &[f64] {
        &self.nodes[id].data
    }

    fn shape(&self, id: usize) -> &[usize] {
        &self.nodes[id].shape
    }
}

/// Per-node gradient buffers used during one backward sweep.
pub(crate) struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    fn slot(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.0[id].get_or_insert_with(|| vec![0.0; len])
    }
}

type BackFn = Box<dyn Fn(&TapeCore, &[f64], &mut Grads)>;

/// Wengert list: forward values in recording order plus one backward rule
/// per non-leaf node.
pub struct Tape {
    core: TapeCore,
    backs: Vec<Option<BackFn>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn debug_assert_finite(data: &[f64], op: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {op}"
    );
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            core: TapeCore { nodes: Vec::new(), needs: Vec::new() },
            backs: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        needs: bool,
        back: Option<BackFn>,
    ) -> Var {
        let id = self.core.nodes.len();
        self.core.nodes.push(Node { data, shape });
        self.core.needs.push(needs);
        self.backs.push(if needs { back } else { None });
        self.leaf_grads.push(None);
        Var(id)
    }

    /// Record an input tensor. Gradients accumulate into it across
    /// backward calls when `requires_grad` is true.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        debug_assert_finite(&t.data, "leaf");
        self.push(t.data.clone(), t.shape.clone(), requires_grad, None)
    }

    pub fn leaf_owned(&mut self, t: Tensor, requires_grad: bool) -> Var {
        debug_assert_finite(&t.data, "leaf");
        self.push(t.data, t.shape, requires_grad, None)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.core.data(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.core.shape(v.0)
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.core.shape(v.0).to_vec(), self.core.data(v.0).to_vec())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.core.shape(v.0).to_vec(), g.clone()))
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate:
    /// calling twice doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<(), Error> {
        if self.core.data(loss.0).len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.core.shape(loss.0).to_vec() });
        }
        let mut grads = Grads(Vec::new());
        grads.0.resize_with(self.core.nodes.len(), || None);
        grads.slot(loss.0, 1)[0] = 1.0;

        let backs = std::mem::take(&mut self.backs);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads.0[id].take() else { continue };
            if !self.core.needs[id] {
                continue;
            }
            match &backs[id] {
                Some(f) => f(&self.core, &g, &mut grads),
                None => {
                    // leaf: fold into the persistent accumulator
                    let slot = self.leaf_grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, gv) in slot.iter_mut().zip(&g) {
                        *s += gv;
                    }
                }
            }
        }
        self.backs = backs;
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Var, Error> {
        if self.core.shape(a.0) != self.core.shape(b.0) {
            return Err(Error::DimMismatch {
                op,
                left: self.core.shape(a.0).to_vec(),
                right: self.core.shape(b.0).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .core
            .data(a.0)
            .iter()
            .zip(self.core.data(b.0))
            .map(|(&x, &y)| f(x, y))
            .collect();
        debug_assert_finite(&out, op);
        let shape = self.core.shape(a.0).to_vec();
        let needs = self.core.needs[a.0] || self.core.needs[b.0];
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(
            out,
            shape,
            needs,
            Some(Box::new(move |core, g, grads| {
                let n = g.len();
                if core.needs[ai] {
                    let (xs, ys) = (core.data(ai).to_vec(), core.data(bi).to_vec());
                    let slot = grads.slot(ai, n);
                    for i in 0..n {
                        slot[i] += df(xs[i], ys[i], g[i]).0;
                    }
                }
                if core.needs[bi] {
                    let (xs, ys) = (core.data(ai).to_vec(), core.data(bi).to_vec());
                    let slot = grads.slot(bi, n);
                    for i in 0..n {
                        slot[i] += df(xs[i], ys[i], g[i]).1;
                    }
                }
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.core.data(a.0).iter().map(|&x| x * c).collect();
        debug_assert_finite(&out, "scale");
        let shape = self.core.shape(a.0).to_vec();
        let needs = self.core.needs[a.0];
        let ai = a.0;
        self.push(
            out,
            shape,
            needs,
            Some(Box::new(move |core, g, grads| {
                if core.needs[ai] {
                    let slot = grads.slot(ai, g.len());
                    for i in 0..g.len() {
                        slot[i] += g[i] * c;
                    }
                }
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.core.data(x.0).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.core.shape(x.0).to_vec();
        let needs = self.core.needs[x.0];
        let xi = x.0;
        self.push(
            out,
            shape,
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let xs = core.data(xi);
                let slot = grads.slot(xi, xs.len());
                for i in 0..xs.len() {
                    // subgradient at exactly 0 is 0
                    if xs[i] > 0.0 {
                        slot[i] += g[i];
                    }
                }
            })),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.core.data(x.0).iter().map(|&v| v * v).collect();
        debug_assert_finite(&out, "square");
        let shape = self.core.shape(x.0).to_vec();
        let needs = self.core.needs[x.0];
        let xi = x.0;
        self.push(
            out,
            shape,
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let xs = core.data(xi);
                let slot = grads.slot(xi, xs.len());
                for i in 0..xs.len() {
                    slot[i] += 2.0 * xs[i] * g[i];
                }
            })),
        )
    }

    /// `1/sqrt(x + eps)` elementwise.
    pub fn rsqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let out: Vec<f64> = self.core.data(x.0).iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        debug_assert_finite(&out, "rsqrt_eps");
        let shape = self.core.shape(x.0).to_vec();
        let needs = self.core.needs[x.0];
        let (xi, oi) = (x.0, self.core.nodes.len());
        self.push(
            out,
            shape,
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let ov = core.data(oi).to_vec();
                let slot = grads.slot(xi, ov.len());
                for i in 0..ov.len() {
                    slot[i] += -0.5 * ov[i] * ov[i] * ov[i] * g[i];
                }
            })),
        )
    }

    // ---- linear algebra ----

    /// `a[m,k] x b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        let (ash, bsh) = (self.core.shape(a.0), self.core.shape(b.0));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::DimMismatch { op: "matmul", left: ash.to_vec(), right: bsh.to_vec() });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let (ad, bd) = (self.core.data(a.0), self.core.data(b.0));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        debug_assert_finite(&out, "matmul");
        let needs = self.core.needs[a.0] || self.core.needs[b.0];
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(
            out,
            vec![m, n],
            needs,
            Some(Box::new(move |core, g, grads| {
                let (ad, bd) = (core.data(ai).to_vec(), core.data(bi).to_vec());
                if core.needs[ai] {
                    // da = g . b^T
                    let slot = grads.slot(ai, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            slot[i * k + p] += acc;
                        }
                    }
                }
                if core.needs[bi] {
                    // db = a^T . g
                    let slot = grads.slot(bi, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let brow = &mut slot[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                }
            })),
        ))
    }

    /// Row-broadcast bias add: `x[n,d] + b[d]`.
    pub fn dense_bias_add(&mut self, x: Var, b: Var) -> Result<Var, Error> {
        let (xsh, bsh) = (self.core.shape(x.0), self.core.shape(b.0));
        if xsh.len() != 2 || bsh.len() != 1 || xsh[1] != bsh[0] {
            return Err(Error::DimMismatch {
                op: "dense_bias_add",
                left: xsh.to_vec(),
                right: bsh.to_vec(),
            });
        }
        let (n, d) = (xsh[0], xsh[1]);
        let (xd, bd) = (self.core.data(x.0), self.core.data(b.0));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xd[i * d + j] + bd[j];
            }
        }
        debug_assert_finite(&out, "dense_bias_add");
        let needs = self.core.needs[x.0] || self.core.needs[b.0];
        let (xi, bi) = (x.0, b.0);
        Ok(self.push(
            out,
            vec![n, d],
            needs,
            Some(Box::new(move |core, g, grads| {
                if core.needs[xi] {
                    let slot = grads.slot(xi, n * d);
                    for i in 0..n * d {
                        slot[i] += g[i];
                    }
                }
                if core.needs[bi] {
                    let slot = grads.slot(bi, d);
                    for i in 0..n {
                        for j in 0..d {
                            slot[j] += g[i * d + j];
                        }
                    }
                }
            })),
        ))
    }

    /// 2-d cross-correlation with zero padding.
    /// `x[n,c,h,w] * k[o,c,kh,kw] -> [n,o,h',w']`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, Error> {
        let (xsh, ksh) = (self.core.shape(x.0).to_vec(), self.core.shape(kernel.0).to_vec());
        if xsh.len() != 4 || ksh.len() != 4 || xsh[1] != ksh[1] {
            return Err(Error::DimMismatch { op: "conv2d", left: xsh, right: ksh });
        }
        let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (o, _, kh, kw) = (ksh[0], ksh[1], ksh[2], ksh[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::DimMismatch { op: "conv2d (kernel larger than padded input)", left: xsh, right: ksh });
        }
        assert!(stride >= 1, "conv2d stride must be positive");
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let xd = self.core.data(x.0);
        let kd = self.core.data(kernel.0);
        let mut out = vec![0.0; n * o * oh * ow];
        conv2d_forward(xd, kd, &mut out, ConvDims { n, c, h, w, o, kh, kw, oh, ow, stride, padding });
        debug_assert_finite(&out, "conv2d");
        let needs = self.core.needs[x.0] || self.core.needs[kernel.0];
        let (xi, ki) = (x.0, kernel.0);
        let dims = ConvDims { n, c, h, w, o, kh, kw, oh, ow, stride, padding };
        Ok(self.push(
            out,
            vec![n, o, oh, ow],
            needs,
            Some(Box::new(move |core, g, grads| {
                if core.needs[xi] {
                    let kd = core.data(ki).to_vec();
                    let slot = grads.slot(xi, dims.n * dims.c * dims.h * dims.w);
                    conv2d_backward_dx(&kd, g, slot, dims);
                }
                if core.needs[ki] {
                    let xd = core.data(xi).to_vec();
                    let slot = grads.slot(ki, dims.o * dims.c * dims.kh * dims.kw);
                    conv2d_backward_dk(&xd, g, slot, dims);
                }
            })),
        ))
    }

    /// Per-channel bias add on `[n,c,spatial...]`.
    pub fn channel_bias_add(&mut self, x: Var, b: Var) -> Result<Var, Error> {
        self.channel_affine("channel_bias_add", x, b, |x, s| x + s, |_, _| (1.0, 1.0))
    }

    /// Per-channel subtract: `x - m[c]` broadcast over batch and spatial axes.
    pub fn sub_channel(&mut self, x: Var, m: Var) -> Result<Var, Error> {
        self.channel_affine("sub_channel", x, m, |x, s| x - s, |_, _| (1.0, -1.0))
    }

    /// Per-channel multiply: `x * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var, Error> {
        let (xsh, ssh) = (self.core.shape(x.0).to_vec(), self.core.shape(s.0).to_vec());
        let (n, c, sp) = Self::split_channels("mul_channel", &xsh, &ssh)?;
        let (xd, sd) = (self.core.data(x.0), self.core.data(s.0));
        let mut out = vec![0.0; n * c * sp];
        for bn in 0..n {
            for ch in 0..c {
                let sv = sd[ch];
                let base = (bn * c + ch) * sp;
                for i in 0..sp {
                    out[base + i] = xd[base + i] * sv;
                }
            }
        }
        debug_assert_finite(&out, "mul_channel");
        let needs = self.core.needs[x.0] || self.core.needs[s.0];
        let (xi, si) = (x.0, s.0);
        Ok(self.push(
            out,
            xsh,
            needs,
            Some(Box::new(move |core, g, grads| {
                if core.needs[xi] {
                    let sd = core.data(si).to_vec();
                    let slot = grads.slot(xi, n * c * sp);
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * sp;
                            for i in 0..sp {
                                slot[base + i] += g[base + i] * sd[ch];
                            }
                        }
                    }
                }
                if core.needs[si] {
                    let xd = core.data(xi).to_vec();
                    let slot = grads.slot(si, c);
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * sp;
                            let mut acc = 0.0;
                            for i in 0..sp {
                                acc += g[base + i] * xd[base + i];
                            }
                            slot[ch] += acc;
                        }
                    }
                }
            })),
        ))
    }

    fn channel_affine(
        &mut self,
        op: &'static str,
        x: Var,
        p: Var,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Var, Error> {
        let (xsh, psh) = (self.core.shape(x.0).to_vec(), self.core.shape(p.0).to_vec());
        let (n, c, sp) = Self::split_channels(op, &xsh, &psh)?;
        let (xd, pd) = (self.core.data(x.0), self.core.data(p.0));
        let mut out = vec![0.0; n * c * sp];
        for bn in 0..n {
            for ch in 0..c {
                let pv = pd[ch];
                let base = (bn * c + ch) * sp;
                for i in 0..sp {
                    out[base + i] = f(xd[base + i], pv);
                }
            }
        }
        debug_assert_finite(&out, op);
        let needs = self.core.needs[x.0] || self.core.needs[p.0];
        let (xi, pi) = (x.0, p.0);
        Ok(self.push(
            out,
            xsh,
            needs,
            Some(Box::new(move |core, g, grads| {
                let (dx, dp) = df(0.0, 0.0);
                if core.needs[xi] {
                    let slot = grads.slot(xi, n * c * sp);
                    for i in 0..n * c * sp {
                        slot[i] += g[i] * dx;
                    }
                }
                if core.needs[pi] {
                    let slot = grads.slot(pi, c);
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * sp;
                            let mut acc = 0.0;
                            for i in 0..sp {
                                acc += g[base + i];
                            }
                            slot[ch] += acc * dp;
                        }
                    }
                }
            })),
        ))
    }

    fn split_channels(
        op: &'static str,
        xsh: &[usize],
        psh: &[usize],
    ) -> Result<(usize, usize, usize), Error> {
        if xsh.len() < 2 || psh.len() != 1 || xsh[1] != psh[0] {
            return Err(Error::DimMismatch { op, left: xsh.to_vec(), right: psh.to_vec() });
        }
        Ok((xsh[0], xsh[1], xsh[2..].iter().product::<usize>().max(1)))
    }

    /// Mean over all non-channel axes of `[n,c,spatial...] -> [c]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var, Error> {
        let xsh = self.core.shape(x.0).to_vec();
        if xsh.len() < 2 {
            return Err(Error::DimMismatch { op: "channel_mean", left: xsh, right: vec![] });
        }
        let (n, c) = (xsh[0], xsh[1]);
        let sp = xsh[2..].iter().product::<usize>().max(1);
        let count = (n * sp) as f64;
        let xd = self.core.data(x.0);
        let mut out = vec![0.0; c];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * sp;
                let mut acc = 0.0;
                for i in 0..sp {
                    acc += xd[base + i];
                }
                out[ch] += acc;
            }
        }
        for v in &mut out {
            *v /= count;
        }
        debug_assert_finite(&out, "channel_mean");
        let needs = self.core.needs[x.0];
        let xi = x.0;
        Ok(self.push(
            out,
            vec![c],
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let slot = grads.slot(xi, n * c * sp);
                for bn in 0..n {
                    for ch in 0..c {
                        let gv = g[ch] / count;
                        let base = (bn * c + ch) * sp;
                        for i in 0..sp {
                            slot[base + i] += gv;
                        }
                    }
                }
            })),
        ))
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, Error> {
        let xsh = self.core.shape(x.0).to_vec();
        if xsh.len() != 4 {
            return Err(Error::DimMismatch { op: "maxpool2", left: xsh, right: vec![] });
        }
        let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.core.data(x.0);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for bc in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut besti = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (bc * h + 2 * y + dy) * w + 2 * xo + dx;
                            // strict > keeps the first max on ties
                            if xd[idx] > best {
                                best = xd[idx];
                                besti = idx;
                            }
                        }
                    }
                    let oidx = (bc * oh + y) * ow + xo;
                    out[oidx] = best;
                    argmax[oidx] = besti;
                }
            }
        }
        let needs = self.core.needs[x.0];
        let xi = x.0;
        Ok(self.push(
            out,
            vec![n, c, oh, ow],
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let slot = grads.slot(xi, n * c * h * w);
                for (oidx, &src) in argmax.iter().enumerate() {
                    slot[src] += g[oidx];
                }
            })),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, Error> {
        let xsh = self.core.shape(x.0).to_vec();
        if shape.iter().product::<usize>() != self.core.data(x.0).len() {
            return Err(Error::DimMismatch { op: "reshape", left: xsh, right: shape });
        }
        let out = self.core.data(x.0).to_vec();
        let needs = self.core.needs[x.0];
        let xi = x.0;
        Ok(self.push(
            out,
            shape,
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let slot = grads.slot(xi, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i];
                }
            })),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0;
        for &v in self.core.data(x.0) {
            acc += v;
        }
        let needs = self.core.needs[x.0];
        let xi = x.0;
        let len = self.core.data(x.0).len();
        self.push(
            vec![acc],
            vec![],
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let slot = grads.slot(xi, len);
                for s in slot.iter_mut() {
                    *s += g[0];
                }
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.core.data(x.0).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax of `[n,C]`, numerically stabilized.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, Error> {
        let xsh = self.core.shape(x.0).to_vec();
        if xsh.len() != 2 {
            return Err(Error::DimMismatch { op: "softmax_rows", left: xsh, right: vec![] });
        }
        let (n, c) = (xsh[0], xsh[1]);
        let xd = self.core.data(x.0);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        debug_assert_finite(&out, "softmax_rows");
        let needs = self.core.needs[x.0];
        let (xi, oi) = (x.0, self.core.nodes.len());
        Ok(self.push(
            out,
            vec![n, c],
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let p = core.data(oi).to_vec();
                let slot = grads.slot(xi, n * c);
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * p[i * c + j];
                    }
                    for j in 0..c {
                        slot[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
                    }
                }
            })),
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, Error> {
        let lsh = self.core.shape(logits.0).to_vec();
        if lsh.len() != 2 || lsh[0] != labels.len() {
            return Err(Error::DimMismatch {
                op: "softmax_cross_entropy",
                left: lsh,
                right: vec![labels.len()],
            });
        }
        let (n, c) = (lsh[0], lsh[1]);
        for &y in labels {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
        }
        let xd = self.core.data(logits.0);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        loss /= n as f64;
        debug_assert!(loss.is_finite(), "non-finite cross entropy");
        let needs = self.core.needs[logits.0];
        let xi = logits.0;
        let labels = labels.to_vec();
        Ok(self.push(
            vec![loss],
            vec![],
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let slot = grads.slot(xi, n * c);
                let inv = g[0] / n as f64;
                for i in 0..n {
                    for j in 0..c {
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        slot[i * c + j] += inv * (probs[i * c + j] - onehot);
                    }
                }
            })),
        ))
    }

    /// Per-sample scalar multiply: `out[i,..] = x[i,..] * w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var, Error> {
        let (xsh, wsh) = (self.core.shape(x.0).to_vec(), self.core.shape(w.0).to_vec());
        if xsh.is_empty() || wsh.len() != 1 || xsh[0] != wsh[0] {
            return Err(Error::DimMismatch { op: "mul_rows", left: xsh, right: wsh });
        }
        let n = xsh[0];
        let sp = xsh[1..].iter().product::<usize>().max(1);
        let (xd, wd) = (self.core.data(x.0), self.core.data(w.0));
        let mut out = vec![0.0; n * sp];
        for i in 0..n {
            for j in 0..sp {
                out[i * sp + j] = xd[i * sp + j] * wd[i];
            }
        }
        debug_assert_finite(&out, "mul_rows");
        let needs = self.core.needs[x.0] || self.core.needs[w.0];
        let (xi, wi) = (x.0, w.0);
        Ok(self.push(
            out,
            xsh,
            needs,
            Some(Box::new(move |core, g, grads| {
                if core.needs[xi] {
                    let wd = core.data(wi).to_vec();
                    let slot = grads.slot(xi, n * sp);
                    for i in 0..n {
                        for j in 0..sp {
                            slot[i * sp + j] += g[i * sp + j] * wd[i];
                        }
                    }
                }
                if core.needs[wi] {
                    let xd = core.data(xi).to_vec();
                    let slot = grads.slot(wi, n);
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..sp {
                            acc += g[i * sp + j] * xd[i * sp + j];
                        }
                        slot[i] += acc;
                    }
                }
            })),
        ))
    }

    /// Column `k` of `[n,C] -> [n]`.
    pub fn select_col(&mut self, x: Var, k: usize) -> Result<Var, Error> {
        let xsh = self.core.shape(x.0).to_vec();
        if xsh.len() != 2 || k >= xsh[1] {
            return Err(Error::DimMismatch { op: "select_col", left: xsh, right: vec![k] });
        }
        let (n, c) = (xsh[0], xsh[1]);
        let xd = self.core.data(x.0);
        let out: Vec<f64> = (0..n).map(|i| xd[i * c + k]).collect();
        let needs = self.core.needs[x.0];
        let xi = x.0;
        Ok(self.push(
            out,
            vec![n],
            needs,
            Some(Box::new(move |core, g, grads| {
                if !core.needs[xi] {
                    return;
                }
                let slot = grads.slot(xi, n * c);
                for i in 0..n {
                    slot[i * c + k] += g[i];
                }
            })),
        ))
    }

    /// Per-sample row selection across same-shaped candidates:
    /// `out[i,..] = options[pick[i]][i,..]`.
    pub fn gather_rows(&mut self, options: &[Var], pick: &[usize]) -> Result<Var, Error> {
        let first = options.first().ok_or_else(|| Error::usage("gather_rows: no options"))?;
        let shape = self.core.shape(first.0).to_vec();
        let n = shape[0];
        if pick.len() != n {
            return Err(Error::DimMismatch { op: "gather_rows", left: shape, right: vec![pick.len()] });
        }
        for opt in options {
            if self.core.shape(opt.0) != shape.as_slice() {
                return Err(Error::DimMismatch {
                    op: "gather_rows",
                    left: shape,
                    right: self.core.shape(opt.0).to_vec(),
                });
            }
        }
        for &p in pick {
            if p >= options.len() {
                return Err(Error::BranchOutOfRange { index: p, count: options.len() });
            }
        }
        let sp = shape[1..].iter().product::<usize>().max(1);
        let mut out = vec![0.0; n * sp];
        for i in 0..n {
            let src = self.core.data(options[pick[i]].0);
            out[i * sp..(i + 1) * sp].copy_from_slice(&src[i * sp..(i + 1) * sp]);
        }
        let needs = options.iter().any(|o| self.core.needs[o.0]);
        let ids: Vec<usize> = options.iter().map(|o| o.0).collect();
        let pick = pick.to_vec();
        Ok(self.push(
            out,
            shape,
            needs,
            Some(Box::new(move |core, g, grads| {
                for (i, &p) in pick.iter().enumerate() {
                    let id = ids[p];
                    if !core.needs[id] {
                        continue;
                    }
                    let len = core.data(id).len();
                    let slot = grads.slot(id, len);
                    for j in 0..sp {
                        slot[i * sp + j] += g[i * sp + j];
                    }
                }
            })),
        ))
    }

    /// Copy a value onto the tape as a gradient-stopping leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let data = self.core.data(x.0).to_vec();
        let shape = self.core.shape(x.0).to_vec();
        self.push(data, shape, false, None)
    }
}

/// Dimensions of one conv2d application.
#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvDims {
    /// Valid output-column range [xo0, xo1) for one kernel column, and the
    /// input column xo0 maps to.
    fn xo_range(&self, kx: usize) -> (usize, usize, usize) {
        let xo0 = if self.padding > kx {
            (self.padding - kx).div_ceil(self.stride)
        } else {
            0
        };
        let xo1 = if self.w + self.padding > kx {
            self.ow.min((self.w - 1 + self.padding - kx) / self.stride + 1)
        } else {
            0
        };
        let ix0 = xo0 * self.stride + kx - self.padding;
        (xo0, xo1.max(xo0), ix0)
    }

    fn row(&self, y: usize, ky: usize) -> Option<usize> {
        let iy = (y * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && iy < self.h as isize).then_some(iy as usize)
    }
}

fn conv2d_forward(xd: &[f64], kd: &[f64], out: &mut [f64], d: ConvDims) {
    for bn in 0..d.n {
        for oc in 0..d.o {
            for y in 0..d.oh {
                let orow = ((bn * d.o + oc) * d.oh + y) * d.ow;
                for ky in 0..d.kh {
                    let Some(iy) = d.row(y, ky) else { continue };
                    for ic in 0..d.c {
                        let xrow = ((bn * d.c + ic) * d.h + iy) * d.w;
                        let krow = ((oc * d.c + ic) * d.kh + ky) * d.kw;
                        for kx in 0..d.kw {
                            let kval = kd[krow + kx];
                            if kval == 0.0 {
                                continue;
                            }
                            let (xo0, xo1, ix0) = d.xo_range(kx);
                            if d.stride == 1 {
                                let os = &mut out[orow + xo0..orow + xo1];
                                let xs = &xd[xrow + ix0..xrow + ix0 + (xo1 - xo0)];
                                for (a, b) in os.iter_mut().zip(xs) {
                                    *a += kval * b;
                                }
                            } else {
                                for (j, xo) in (xo0..xo1).enumerate() {
                                    out[orow + xo] += kval * xd[xrow + ix0 + j * d.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_dx(kd: &[f64], g: &[f64], slot: &mut [f64], d: ConvDims) {
    for bn in 0..d.n {
        for oc in 0..d.o {
            for y in 0..d.oh {
                let orow = ((bn * d.o + oc) * d.oh + y) * d.ow;
                for ky in 0..d.kh {
                    let Some(iy) = d.row(y, ky) else { continue };
                    for ic in 0..d.c {
                        let xrow = ((bn * d.c + ic) * d.h + iy) * d.w;
                        let krow = ((oc * d.c + ic) * d.kh + ky) * d.kw;
                        for kx in 0..d.kw {
                            let kval = kd[krow + kx];
                            if kval == 0.0 {
                                continue;
                            }
                            let (xo0, xo1, ix0) = d.xo_range(kx);
                            if d.stride == 1 {
                                let xs = &mut slot[xrow + ix0..xrow + ix0 + (xo1 - xo0)];
                                let gs = &g[orow + xo0..orow + xo1];
                                for (a, b) in xs.iter_mut().zip(gs) {
                                    *a += kval * b;
                                }
                            } else {
                                for (j, xo) in (xo0..xo1).enumerate() {
                                    slot[xrow + ix0 + j * d.stride] += kval * g[orow + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_dk(xd: &[f64], g: &[f64], slot: &mut [f64], d: ConvDims) {
    for bn in 0..d.n {
        for oc in 0..d.o {
            for y in 0..d.oh {
                let orow = ((bn * d.o + oc) * d.oh + y) * d.ow;
                for ky in 0..d.kh {
                    let Some(iy) = d.row(y, ky) else { continue };
                    for ic in 0..d.c {
                        let xrow = ((bn * d.c + ic) * d.h + iy) * d.w;
                        let krow = ((oc * d.c + ic) * d.kh + ky) * d.kw;
                        for kx in 0..d.kw {
                            let (xo0, xo1, ix0) = d.xo_range(kx);
                            let mut acc = 0.0;
                            if d.stride == 1 {
                                let xs = &xd[xrow + ix0..xrow + ix0 + (xo1 - xo0)];
                                let gs = &g[orow + xo0..orow + xo1];
                                for (a, b) in xs.iter().zip(gs) {
                                    acc += a * b;
                                }
                            } else {
                                for (j, xo) in (xo0..xo1).enumerate() {
                                    acc += xd[xrow + ix0 + j * d.stride] * g[orow + xo];
                                }
                            }
                            slot[krow + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}
