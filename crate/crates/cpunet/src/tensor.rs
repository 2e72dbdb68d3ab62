//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] replays the
//! recording in reverse and accumulates adjoints. Parameters live outside
//! the tape in a [`ParamStore`] so one model can be driven through many
//! tapes (one per training step); leaf nodes remember which parameter they
//! were copied from and [`Tape::write_param_grads`] routes gradients back.
//!
//! There is no batch dimension; batching is a loop in the harness.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{CpError, Result};

/// Identity of a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub usize);

/// Identity of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// A trainable tensor with its SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub momentum: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Owns every parameter of a model. Names are unique; insertion order is
/// deterministic given a deterministic construction path, which makes the
/// parameter census and checkpoints reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CpError::Config(format!("duplicate parameter name: {name}")));
        }
        if numel(&shape) != values.len() {
            return Err(CpError::Dim(format!(
                "parameter {name}: shape {:?} does not hold {} values",
                shape,
                values.len()
            )));
        }
        let n = values.len();
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            shape,
            values,
            grad: vec![0.0; n],
            momentum: vec![0.0; n],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn add_kaiming<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let values = (0..numel(&shape))
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, shape, values)
    }

    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, v: f64) -> Result<ParamId> {
        let n = numel(&shape);
        self.add(name, shape, vec![v; n])
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// (name, shape, count) for every parameter, in construction order.
    pub fn census(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.values.len()))
            .collect()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Relu,
    Softplus,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        // tanh approximation of GELU; the derivative below matches it.
        Unary::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Unary::Relu => x.max(0.0),
        Unary::Softplus => {
            // numerically stable log(1 + e^x)
            if x > 30.0 {
                x
            } else {
                x.exp().ln_1p()
            }
        }
    }
}

fn unary_derivative(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        Unary::Sigmoid => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 - s)
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Softplus => 1.0 / (1.0 + (-x).exp()),
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Tid,
        k: Tid,
        stride: usize,
        padding: usize,
    },
    Gap {
        x: Tid,
    },
    Add {
        a: Tid,
        b: Tid,
    },
    Mul {
        a: Tid,
        b: Tid,
    },
    /// x:[c,h,w] scaled per channel by s:[c,1,1].
    BcastMulChan {
        x: Tid,
        s: Tid,
    },
    /// x:[c,h,w] offset per channel by b:[c,1,1].
    BcastAddChan {
        x: Tid,
        b: Tid,
    },
    /// x:[c,h,w] scaled per spatial position by m:[1,h,w].
    BcastMulSpace {
        x: Tid,
        m: Tid,
    },
    Unary {
        x: Tid,
        kind: Unary,
    },
    MatMul {
        a: Tid,
        b: Tid,
    },
    Scale {
        x: Tid,
        c: f64,
    },
    AddConst {
        x: Tid,
    },
    Sum {
        x: Tid,
    },
    Reshape {
        x: Tid,
    },
    GroupShift {
        x: Tid,
        groups: usize,
        step: usize,
        cyclic: bool,
    },
    Upsample2x {
        x: Tid,
    },
    Bce {
        pred: Tid,
        target: Vec<f64>,
    },
    Dice {
        pred: Tid,
        target: Vec<f64>,
        eps: f64,
    },
    KlAlign {
        mu_a: Tid,
        sigma_a: Tid,
        mu_b: Tid,
        sigma_b: Tid,
        grad_b: bool,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Records one forward pass; replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // parameters already materialized on this tape, so a batch sharing one
    // tape copies each parameter once instead of once per sample
    param_cache: std::collections::HashMap<usize, Tid>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, param: Option<ParamId>) -> Tid {
        let n = values.len();
        debug_assert_eq!(numel(&shape), n);
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            op,
            param,
        });
        Tid(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tid) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn grad(&self, t: Tid) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn scalar(&self, t: Tid) -> f64 {
        debug_assert_eq!(self.nodes[t.0].values.len(), 1);
        self.nodes[t.0].values[0]
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    // ---- node constructors -------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Tid> {
        if numel(&shape) != values.len() {
            return Err(CpError::Dim(format!(
                "leaf: shape {:?} does not hold {} values",
                shape,
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf, None))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tid {
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], Op::Leaf, None)
    }

    /// Copies a parameter's current values onto the tape as a leaf. After
    /// `backward`, `write_param_grads` adds the leaf's gradient back into
    /// the parameter. Repeated requests for the same parameter return the
    /// same node; do not mutate the store while a tape references it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tid {
        if let Some(&t) = self.param_cache.get(&id.0) {
            return t;
        }
        let p = store.get(id);
        let t = self.push(p.shape.clone(), p.values.clone(), Op::Leaf, Some(id));
        self.param_cache.insert(id.0, t);
        t
    }

    pub fn conv2d(&mut self, x: Tid, k: Tid, stride: usize, padding: usize) -> Result<Tid> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(CpError::Dim(format!(
                "conv2d: expected x rank 3 and kernel rank 4, got {xs:?} and {ks:?}"
            )));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if ci != kci {
            return Err(CpError::Dim(format!(
                "conv2d: input has {ci} channels but kernel expects {kci}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(CpError::Config(format!(
                "conv2d: kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(CpError::Config(format!("conv2d: stride must be 1 or 2, got {stride}")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(CpError::Dim(format!(
                "conv2d: padded input {h}+2*{padding} smaller than kernel {kh}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;

        let xv = &self.nodes[x.0].values;
        let kv = &self.nodes[k.0].values;
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for ic in 0..ci {
                let kbase = (oc * ci + ic) * kh * kw;
                let xbase = ic * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xv[xbase + iy as usize * w + ix as usize]
                                    * kv[kbase + ky * kw + kx];
                            }
                        }
                        out[(oc * ho + oy) * wo + ox] += acc;
                    }
                }
            }
        }
        Ok(self.push(
            vec![co, ho, wo],
            out,
            Op::Conv2d { x, k, stride, padding },
            None,
        ))
    }

    /// Global average pooling: [c,h,w] -> [c,1,1].
    pub fn gap(&mut self, x: Tid) -> Result<Tid> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(CpError::Dim(format!("gap: expected rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let xv = &self.nodes[x.0].values;
        let out: Vec<f64> = (0..c)
            .map(|ch| xv[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(vec![c, 1, 1], out, Op::Gap { x }, None))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        if self.shape(a) != self.shape(b) {
            return Err(CpError::Dim(format!(
                "add: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, None))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        if self.shape(a) != self.shape(b) {
            return Err(CpError::Dim(format!(
                "mul: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, None))
    }

    fn check_chan_bcast(&self, x: Tid, s: Tid, what: &str) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let ss = self.shape(s);
        if xs.len() != 3 || ss != [xs[0], 1, 1] {
            return Err(CpError::Dim(format!(
                "{what}: cannot broadcast {ss:?} against {xs:?}"
            )));
        }
        Ok((xs[0], xs[1], xs[2]))
    }

    /// x:[c,h,w] * s:[c,1,1], broadcast over the spatial axes.
    pub fn broadcast_mul(&mut self, x: Tid, s: Tid) -> Result<Tid> {
        let (c, h, w) = self.check_chan_bcast(x, s, "broadcast_mul")?;
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let sv = self.nodes[s.0].values[ch];
            for p in 0..hw {
                out[ch * hw + p] = self.nodes[x.0].values[ch * hw + p] * sv;
            }
        }
        Ok(self.push(vec![c, h, w], out, Op::BcastMulChan { x, s }, None))
    }

    /// x:[c,h,w] + b:[c,1,1], the per-channel bias add.
    pub fn broadcast_add(&mut self, x: Tid, b: Tid) -> Result<Tid> {
        let (c, h, w) = self.check_chan_bcast(x, b, "broadcast_add")?;
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let bv = self.nodes[b.0].values[ch];
            for p in 0..hw {
                out[ch * hw + p] = self.nodes[x.0].values[ch * hw + p] + bv;
            }
        }
        Ok(self.push(vec![c, h, w], out, Op::BcastAddChan { x, b }, None))
    }

    /// x:[c,h,w] * m:[1,h,w], one spatial map shared by every channel.
    pub fn broadcast_mul_spatial(&mut self, x: Tid, m: Tid) -> Result<Tid> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        if xs.len() != 3 || ms != [1, xs[1], xs[2]] {
            return Err(CpError::Dim(format!(
                "broadcast_mul_spatial: cannot broadcast {ms:?} against {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = self.nodes[x.0].values[ch * hw + p] * self.nodes[m.0].values[p];
            }
        }
        Ok(self.push(vec![c, h, w], out, Op::BcastMulSpace { x, m }, None))
    }

    pub fn unary(&mut self, kind: Unary, x: Tid) -> Tid {
        let out: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| unary_forward(kind, v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Unary { x, kind }, None)
    }

    pub fn gelu(&mut self, x: Tid) -> Tid {
        self.unary(Unary::Gelu, x)
    }
    pub fn sigmoid(&mut self, x: Tid) -> Tid {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Tid) -> Tid {
        self.unary(Unary::Relu, x)
    }
    pub fn softplus(&mut self, x: Tid) -> Tid {
        self.unary(Unary::Softplus, x)
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CpError::Dim(format!("matmul: shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_rm(
            m,
            k,
            n,
            &self.nodes[a.0].values,
            false,
            &self.nodes[b.0].values,
            false,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, None))
    }

    pub fn scale(&mut self, x: Tid, c: f64) -> Tid {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c }, None)
    }

    pub fn add_const(&mut self, x: Tid, c: f64) -> Tid {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddConst { x }, None)
    }

    /// Sum of all entries, as a [1] scalar.
    pub fn sum(&mut self, x: Tid) -> Tid {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, None)
    }

    pub fn mean(&mut self, x: Tid) -> Tid {
        let n = self.nodes[x.0].values.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Tid, shape: Vec<usize>) -> Result<Tid> {
        if numel(&shape) != self.nodes[x.0].values.len() {
            return Err(CpError::Dim(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let out = self.nodes[x.0].values.clone();
        Ok(self.push(shape, out, Op::Reshape { x }, None))
    }

    /// Splits channels into `groups` equal groups; group 0 stays put, group i
    /// is translated by i*step rows/columns with vacated cells zero-filled
    /// (out[r][c] = in[r+i*step][c+i*step]), or wrapped when `cyclic`.
    pub fn group_shift(&mut self, x: Tid, groups: usize, step: usize, cyclic: bool) -> Result<Tid> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(CpError::Dim(format!("group_shift: expected rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if groups == 0 || c % groups != 0 {
            return Err(CpError::Config(format!(
                "group_shift: {c} channels not divisible into {groups} groups"
            )));
        }
        let max_shift = step * (groups - 1);
        if groups > 1 && max_shift >= h.min(w) {
            return Err(CpError::Config(format!(
                "group_shift: shift {max_shift} exceeds grid {h}x{w}"
            )));
        }
        let per = c / groups;
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let s = (ch / per) * step;
            let base = ch * h * w;
            for r in 0..h {
                for col in 0..w {
                    let v = if cyclic {
                        xv[base + ((r + s) % h) * w + (col + s) % w]
                    } else if r + s < h && col + s < w {
                        xv[base + (r + s) * w + col + s]
                    } else {
                        0.0
                    };
                    out[base + r * w + col] = v;
                }
            }
        }
        Ok(self.push(
            vec![c, h, w],
            out,
            Op::GroupShift { x, groups, step, cyclic },
            None,
        ))
    }

    /// Nearest-neighbor 2x upsampling: [c,h,w] -> [c,2h,2w].
    pub fn upsample2x(&mut self, x: Tid) -> Result<Tid> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(CpError::Dim(format!("upsample2x: expected rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xcol in 0..wo {
                    out[(ch * ho + y) * wo + xcol] = xv[(ch * h + y / 2) * w + xcol / 2];
                }
            }
        }
        Ok(self.push(vec![c, ho, wo], out, Op::Upsample2x { x }, None))
    }

    /// Mean binary cross entropy against a constant target, with
    /// predictions clamped to [1e-7, 1-1e-7].
    pub fn bce_loss(&mut self, pred: Tid, target: &[f64]) -> Result<Tid> {
        if self.nodes[pred.0].values.len() != target.len() {
            return Err(CpError::Dim(format!(
                "bce_loss: {} predictions vs {} targets",
                self.nodes[pred.0].values.len(),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let mut loss = 0.0;
        for (&p, &t) in self.nodes[pred.0].values.iter().zip(target) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        loss /= n;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            None,
        ))
    }

    /// Smooth Dice loss 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps).
    pub fn dice_loss(&mut self, pred: Tid, target: &[f64], eps: f64) -> Result<Tid> {
        if self.nodes[pred.0].values.len() != target.len() {
            return Err(CpError::Dim(format!(
                "dice_loss: {} predictions vs {} targets",
                self.nodes[pred.0].values.len(),
                target.len()
            )));
        }
        let pv = &self.nodes[pred.0].values;
        let inter: f64 = pv.iter().zip(target).map(|(p, t)| p * t).sum();
        let sp: f64 = pv.iter().sum();
        let st: f64 = target.iter().sum();
        let loss = 1.0 - (2.0 * inter + eps) / (sp + st + eps);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Dice {
                pred,
                target: target.to_vec(),
                eps,
            },
            None,
        ))
    }

    /// Mean over coordinates of log(sB/sA) + (sA^2 + (mA-mB)^2)/(2 sB^2) - 1/2.
    /// Gradients always reach bank A; bank B only when `grad_b`.
    pub fn kl_align(
        &mut self,
        mu_a: Tid,
        sigma_a: Tid,
        mu_b: Tid,
        sigma_b: Tid,
        grad_b: bool,
    ) -> Result<Tid> {
        let n = self.nodes[mu_a.0].values.len();
        for t in [sigma_a, mu_b, sigma_b] {
            if self.nodes[t.0].values.len() != n {
                return Err(CpError::Dim("kl_align: bank shapes differ".into()));
            }
        }
        for (name, t) in [("sigma_a", sigma_a), ("sigma_b", sigma_b)] {
            if self.nodes[t.0].values.iter().any(|&s| s <= 0.0) {
                return Err(CpError::Numeric(format!("kl_align: non-positive {name}")));
            }
        }
        let mut acc = 0.0;
        for i in 0..n {
            let ma = self.nodes[mu_a.0].values[i];
            let sa = self.nodes[sigma_a.0].values[i];
            let mb = self.nodes[mu_b.0].values[i];
            let sb = self.nodes[sigma_b.0].values[i];
            let d = ma - mb;
            acc += (sb / sa).ln() + (sa * sa + d * d) / (2.0 * sb * sb) - 0.5;
        }
        let loss = acc / n as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::KlAlign {
                mu_a,
                sigma_a,
                mu_b,
                sigma_b,
                grad_b,
            },
            None,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients accumulate additively, so
    /// repeated calls without `zero_grads` sum their contributions.
    pub fn backward(&mut self, loss: Tid) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(CpError::Dim(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            // Matrix products accumulate straight into the input grads: the
            // spatial linear maps are by far the largest nodes on the tape
            // and the generic path's per-op temporaries dominate memory
            // traffic. `gemm_rm` adds into `out`, so taking the grad buffer,
            // multiplying into it, and putting it back is exact.
            if let Op::MatMul { a, b } = &self.nodes[i].op {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // dA += g . B^T
                let mut da = std::mem::take(&mut self.nodes[a.0].grad);
                gemm_rm(m, n, k, &self.nodes[i].grad, false, &self.nodes[b.0].values, true, &mut da);
                self.nodes[a.0].grad = da;
                // dB += A^T . g
                let mut db = std::mem::take(&mut self.nodes[b.0].grad);
                gemm_rm(k, m, n, &self.nodes[a.0].values, true, &self.nodes[i].grad, false, &mut db);
                self.nodes[b.0].grad = db;
                continue;
            }
            let contribs = self.node_adjoints(i);
            for (tid, delta) in contribs {
                let g = &mut self.nodes[tid.0].grad;
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
        }
        Ok(())
    }

    /// Adds every parameter leaf's gradient into its parameter.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Some(pid) = node.param {
                let p = store.get_mut(pid);
                for (pg, ng) in p.grad.iter_mut().zip(&node.grad) {
                    *pg += ng;
                }
            }
        }
    }

    fn node_adjoints(&self, i: usize) -> Vec<(Tid, Vec<f64>)> {
        let node = &self.nodes[i];
        let g = &node.grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, stride, padding } => {
                let xs = &self.nodes[x.0].shape;
                let ks = &self.nodes[k.0].shape;
                let (ci, h, w) = (xs[0], xs[1], xs[2]);
                let (co, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let xv = &self.nodes[x.0].values;
                let kv = &self.nodes[k.0].values;
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for oc in 0..co {
                    for ic in 0..ci {
                        let kbase = (oc * ci + ic) * kh * kw;
                        let xbase = ic * h * w;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[(oc * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * w + ix as usize;
                                        dx[xi] += go * kv[kbase + ky * kw + kx];
                                        dk[kbase + ky * kw + kx] += go * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx), (*k, dk)]
            }
            Op::Gap { x } => {
                let xs = &self.nodes[x.0].shape;
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let hw = h * w;
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    let gv = g[ch] / hw as f64;
                    for p in 0..hw {
                        dx[ch * hw + p] = gv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                let da: Vec<f64> = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::BcastMulChan { x, s } => {
                let xs = &self.nodes[x.0].shape;
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let xv = &self.nodes[x.0].values;
                let sv = &self.nodes[s.0].values;
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..hw {
                        let gi = g[ch * hw + p];
                        dx[ch * hw + p] = gi * sv[ch];
                        ds[ch] += gi * xv[ch * hw + p];
                    }
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::BcastAddChan { x, b } => {
                let xs = &self.nodes[x.0].shape;
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..hw {
                        db[ch] += g[ch * hw + p];
                    }
                }
                vec![(*x, g.clone()), (*b, db)]
            }
            Op::BcastMulSpace { x, m } => {
                let xs = &self.nodes[x.0].shape;
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let xv = &self.nodes[x.0].values;
                let mv = &self.nodes[m.0].values;
                let mut dx = vec![0.0; xv.len()];
                let mut dm = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        let gi = g[ch * hw + p];
                        dx[ch * hw + p] = gi * mv[p];
                        dm[p] += gi * xv[ch * hw + p];
                    }
                }
                vec![(*x, dx), (*m, dm)]
            }
            Op::Unary { x, kind } => {
                let xv = &self.nodes[x.0].values;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| gi * unary_derivative(*kind, v))
                    .collect();
                vec![(*x, dx)]
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                // dA = g . B^T ; dB = A^T . g
                gemm_rm(m, n, k, g, false, &self.nodes[b.0].values, true, &mut da);
                gemm_rm(k, m, n, &self.nodes[a.0].values, true, g, false, &mut db);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                vec![(*x, dx)]
            }
            Op::AddConst { x } => vec![(*x, g.clone())],
            Op::Sum { x } => {
                let n = self.nodes[x.0].values.len();
                vec![(*x, vec![g[0]; n])]
            }
            Op::Reshape { x } => vec![(*x, g.clone())],
            Op::GroupShift {
                x,
                groups,
                step,
                cyclic,
            } => {
                let xs = &self.nodes[x.0].shape;
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let per = c / groups;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let s = (ch / per) * step;
                    let base = ch * h * w;
                    for r in 0..h {
                        for col in 0..w {
                            let gi = g[base + r * w + col];
                            if gi == 0.0 {
                                continue;
                            }
                            if *cyclic {
                                dx[base + ((r + s) % h) * w + (col + s) % w] += gi;
                            } else if r + s < h && col + s < w {
                                dx[base + (r + s) * w + col + s] += gi;
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Upsample2x { x } => {
                let xs = &self.nodes[x.0].shape;
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xcol in 0..wo {
                            dx[(ch * h + y / 2) * w + xcol / 2] += g[(ch * ho + y) * wo + xcol];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Bce { pred, target } => {
                let n = target.len() as f64;
                let pv = &self.nodes[pred.0].values;
                let dp: Vec<f64> = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        // clamped region has zero derivative
                        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            g[0] * (p - t) / (p * (1.0 - p)) / n
                        }
                    })
                    .collect();
                vec![(*pred, dp)]
            }
            Op::Dice { pred, target, eps } => {
                let pv = &self.nodes[pred.0].values;
                let inter: f64 = pv.iter().zip(target).map(|(p, t)| p * t).sum();
                let sp: f64 = pv.iter().sum();
                let st: f64 = target.iter().sum();
                let denom = sp + st + eps;
                let num = 2.0 * inter + eps;
                let dp: Vec<f64> = target
                    .iter()
                    .map(|&t| g[0] * -(2.0 * t * denom - num) / (denom * denom))
                    .collect();
                vec![(*pred, dp)]
            }
            Op::KlAlign {
                mu_a,
                sigma_a,
                mu_b,
                sigma_b,
                grad_b,
            } => {
                let n = self.nodes[mu_a.0].values.len();
                let inv_n = g[0] / n as f64;
                let mut dma = vec![0.0; n];
                let mut dsa = vec![0.0; n];
                let mut dmb = vec![0.0; n];
                let mut dsb = vec![0.0; n];
                for i in 0..n {
                    let ma = self.nodes[mu_a.0].values[i];
                    let sa = self.nodes[sigma_a.0].values[i];
                    let mb = self.nodes[mu_b.0].values[i];
                    let sb = self.nodes[sigma_b.0].values[i];
                    let d = ma - mb;
                    let sb2 = sb * sb;
                    dma[i] = inv_n * d / sb2;
                    dsa[i] = inv_n * (-1.0 / sa + sa / sb2);
                    if *grad_b {
                        dmb[i] = inv_n * -d / sb2;
                        dsb[i] = inv_n * (1.0 / sb - (sa * sa + d * d) / (sb2 * sb));
                    }
                }
                let mut out = vec![(*mu_a, dma), (*sigma_a, dsa)];
                if *grad_b {
                    out.push((*mu_b, dmb));
                    out.push((*sigma_b, dsb));
                }
                out
            }
        }
    }
}

/// Row-major GEMM on flat slices: out[m,n] += op(a) . op(b) where `ta`/`tb`
/// reinterpret a stored [k,m] / [n,k] buffer as its transpose.
fn gemm_rm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(t: &mut Tape, shape: &[usize], v: &[f64]) -> Tid {
        t.leaf(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_3x3() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 3, 3], &[1.0; 9]);
        let k = leaf(&mut t, &[1, 1, 3, 3], &[1.0; 9]);
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let v = t.value(y);
        assert_eq!(v[4], 9.0); // center
        assert_eq!(v[0], 4.0); // corner
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = leaf(&mut t, &[1, 1, 1, 1], &[1.0]);
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_stride2_shape() {
        let mut t = Tape::new();
        let x = t.zeros(vec![1, 8, 8]);
        let k = t.zeros(vec![1, 1, 3, 3]);
        let y = t.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 4]);
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.zeros(vec![2, 4, 4]);
        let k = t.zeros(vec![1, 3, 3, 3]);
        assert!(matches!(t.conv2d(x, k, 1, 1), Err(CpError::Dim(_))));
    }

    #[test]
    fn gap_mean_and_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = t.gap(x).unwrap();
        assert_eq!(t.value(y), &[2.5]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[0.25; 4]);
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[2], &[3.0, 4.0]);
        let y = t.add(a, b).unwrap();
        assert_eq!(t.value(y), &[4.0, 6.0]);

        let x = leaf(&mut t, &[2, 2, 2], &[1.0; 8]);
        let ones = leaf(&mut t, &[2, 1, 1], &[1.0, 1.0]);
        let z = t.broadcast_mul(x, ones).unwrap();
        assert_eq!(t.value(z), &[1.0; 8]);
    }

    #[test]
    fn mul_by_zero_annihilates_gradient() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], &[5.0, -3.0]);
        let z = leaf(&mut t, &[2], &[0.0, 0.0]);
        let y = t.mul(a, z).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), &[0.0, 0.0]);
        assert_eq!(t.grad(z), &[5.0, -3.0]);
    }

    #[test]
    fn activation_spot_values() {
        assert_eq!(unary_forward(Unary::Sigmoid, 0.0), 0.5);
        assert_eq!(unary_forward(Unary::Gelu, 0.0), 0.0);
        for x in [-20.0, -1.0, 0.0, 1.0, 20.0] {
            assert!(unary_forward(Unary::Softplus, x) > 0.0);
        }
    }

    #[test]
    fn matmul_cases() {
        let mut t = Tape::new();
        let eye = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = leaf(&mut t, &[2, 1], &[7.0, -2.0]);
        let y = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(y), &[7.0, -2.0]);

        let a = leaf(&mut t, &[1, 2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[2, 1], &[3.0, 4.0]);
        let y2 = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y2), &[11.0]);

        let z = t.zeros(vec![2, 2]);
        let y3 = t.matmul(z, v).unwrap();
        assert_eq!(t.value(y3), &[0.0, 0.0]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut store = ParamStore::new();
        let pid = store.add("p", vec![2], vec![1.0, 2.0]).unwrap();

        let mut t = Tape::new();
        let p = t.param(&store, pid);
        let s = t.sum(p);
        t.backward(s).unwrap();
        t.write_param_grads(&mut store);
        assert_eq!(store.get(pid).grad, vec![1.0, 1.0]);

        store.zero_grads();
        let mut t = Tape::new();
        let p = t.param(&store, pid);
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.write_param_grads(&mut store);
        assert_eq!(store.get(pid).grad, vec![2.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut store = ParamStore::new();
        let used = store.add("used", vec![1], vec![3.0]).unwrap();
        let unused = store.add("unused", vec![1], vec![5.0]).unwrap();
        let mut t = Tape::new();
        let p = t.param(&store, used);
        let _ = t.param(&store, unused);
        let s = t.sum(p);
        t.backward(s).unwrap();
        t.write_param_grads(&mut store);
        assert_eq!(store.get(unused).grad, vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.zeros(vec![2, 2]);
        assert!(matches!(t.backward(x), Err(CpError::Dim(_))));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x + x => dy/dx = 2
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], &[3.0]);
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), &[2.0]);
    }

    #[test]
    fn tape_replay_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.add_kaiming("k", vec![2, 1, 3, 3], 9, &mut rng).unwrap();
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |store: &ParamStore| {
            let mut t = Tape::new();
            let xi = t.leaf(vec![1, 4, 4], x.clone()).unwrap();
            let k = t.param(store, store.find("k").unwrap());
            let y = t.conv2d(xi, k, 1, 1).unwrap();
            let y = t.gelu(y);
            let s = t.sum(y);
            t.backward(s).unwrap();
            let mut s2 = store.clone();
            s2.zero_grads();
            t.write_param_grads(&mut s2);
            (t.scalar(s), s2.get(s2.find("k").unwrap()).grad.clone())
        };
        let (v1, g1) = run(&store);
        let (v2, g2) = run(&store);
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn group_shift_hand_example() {
        let mut t = Tape::new();
        let mut vals = vec![0.0; 18];
        for (i, v) in vals[9..].iter_mut().enumerate() {
            *v = (i + 1) as f64;
        }
        let x = t.leaf(vec![2, 3, 3], vals).unwrap();
        let y = t.group_shift(x, 2, 1, false).unwrap();
        let v = t.value(y);
        // first group fixed
        assert_eq!(&v[..9], &[0.0; 9]);
        // second group shifted with zero fill
        assert_eq!(&v[9..], &[5.0, 6.0, 0.0, 8.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn group_shift_single_group_is_identity() {
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let x = t.leaf(vec![2, 4, 4], vals.clone()).unwrap();
        let y = t.group_shift(x, 1, 1, false).unwrap();
        assert_eq!(t.value(y), vals.as_slice());
    }

    #[test]
    fn group_shift_rejects_bad_config() {
        let mut t = Tape::new();
        let x = t.zeros(vec![3, 4, 4]);
        assert!(t.group_shift(x, 2, 1, false).is_err());
        let x2 = t.zeros(vec![4, 4, 4]);
        assert!(t.group_shift(x2, 4, 2, false).is_err());
    }

    #[test]
    fn upsample_and_adjoint() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 1, 2], &[1.0, 2.0]);
        let y = t.upsample2x(x).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 4]);
        assert_eq!(t.value(y), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[4.0, 4.0]);
    }
}
