use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sqrt,
    Abs,
    Acos,
    Square,
    Clamp(f64, f64),
}

const LOG_FLOOR: f64 = 1e-12;
const EXP_CEIL: f64 = 700.0;

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.min(EXP_CEIL).exp(),
            Unary::Log => x.max(LOG_FLOOR).ln(),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Sqrt => x.max(0.0).sqrt(),
            Unary::Abs => x.abs(),
            Unary::Acos => x.clamp(-1.0, 1.0).acos(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// Derivative at input `x` with forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => {
                if x < EXP_CEIL {
                    y
                } else {
                    0.0
                }
            }
            Unary::Log => {
                if x > LOG_FLOOR {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sqrt => 0.5 / y.max(1e-12),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Acos => {
                if x.abs() < 1.0 {
                    -1.0 / (1.0 - x * x).max(1e-24).sqrt()
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
            Binary::Min => "minimum",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
            Binary::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
            Binary::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partial derivatives (d/da, d/db).
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
            Binary::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Binary::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Softmax(Var, usize),
    SumTo(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations.
///
/// Confined to one thread; values are plain [`Tensor`]s and may be extracted
/// and sent elsewhere.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb)
            .ok_or_else(|| TensorError::mismatch(kind.name(), sa, sb))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if sa == sb {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect()
        } else {
            let ma = kernels::broadcast_map(&out_shape, sa);
            let mb = kernels::broadcast_map(&out_shape, sb);
            let (da, db) = (va.data(), vb.data());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| kind.apply(da[i], db[j]))
                .collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary(kind, a, b), rg))
    }

    /// Broadcasting element-wise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    /// Element-wise product with a constant mask (broadcast allowed).
    pub fn masked_mul(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let m = self.constant(mask.clone());
        self.mul(x, m)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::MulScalar(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let v = self.value(a).map(|x| kind.forward(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Unary(kind, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// `exp(min(x, 700))`.
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    /// `acos` of the input clamped to [-1, 1].
    pub fn acos(&mut self, a: Var) -> Var {
        self.unary(Unary::Acos, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Matrix product of 2-D operands: (m×k)·(k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Batched matrix product of 3-D operands: (B×m×k)·(B×k×n).
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::mismatch("bmm", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![bt, m, n], out), Op::Bmm(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.shape(a).len();
        if d0 >= nd || d1 >= nd {
            return Err(TensorError::invalid(
                "transpose",
                format!("axes ({d0}, {d1}) for rank {nd}"),
            ));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat(&vals, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Narrow(a, axis, start), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(a).len() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {} for shape {:?}", axis, self.shape(a)),
            ));
        }
        let v = kernels::softmax(self.value(a), axis);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Softmax(a, axis), rg))
    }

    /// Sums over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut target = shape.clone();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(TensorError::invalid(
                    "sum_axes",
                    format!("axis {} for shape {:?}", ax, shape),
                ));
            }
            target[ax] = 1;
        }
        let data = kernels::reduce_to(self.value(a).data(), &shape, &target);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(target, data), Op::SumTo(a), rg))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let count: usize = axes.iter().filter_map(|&ax| shape.get(ax)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.mul_scalar(s, 1.0 / count.max(1) as f64))
    }

    /// Sum of every element, as a shape-[1] tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::SumTo(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// 2-D convolution over `x` (N×C×H×W) with `w` (O×C/groups×kh×kw).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        if groups == 0 || sx[1] % groups != 0 || sw[0] % groups != 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "groups {} must divide input channels {} and output channels {}",
                    groups, sx[1], sw[0]
                ),
            ));
        }
        if sw[1] * groups != sx[1] {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if sx[2] + 2 * padding < kh || sx[3] + 2 * padding < kw {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::mismatch("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            ho: (sx[2] + 2 * padding - kh) / stride + 1,
            wo: (sx[3] + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![geom.n, geom.o, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Reverse sweep from the single-element `root`.
    ///
    /// Every node is visited once, in exact reverse order of recording.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be a single element, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                        .map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d))
                })
                .collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                if sa == sb {
                    let mut ga = wa.then(|| vec![0.0; g.len()]);
                    let mut gb = wb.then(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        let (pa, pb) = kind.partials(va.data()[i], vb.data()[i]);
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = g[i] * pa;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = g[i] * pb;
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(grads, *a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(grads, *b, gb);
                    }
                } else {
                    let ma = kernels::broadcast_map(out_shape, sa);
                    let mb = kernels::broadcast_map(out_shape, sb);
                    let mut ga = wa.then(|| vec![0.0; va.numel()]);
                    let mut gb = wb.then(|| vec![0.0; vb.numel()]);
                    for i in 0..g.len() {
                        let (pa, pb) = kind.partials(va.data()[ma[i]], vb.data()[mb[i]]);
                        if let Some(ga) = ga.as_mut() {
                            ga[ma[i]] += g[i] * pa;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[mb[i]] += g[i] * pb;
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(grads, *a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::MulScalar(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let ga = (0..g.len())
                    .map(|i| g[i] * kind.derivative(x[i], y[i]))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, vb.data(), true, 0.0, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), true, g, false, 0.0, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bt, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; bt * m * k];
                    for i in 0..bt {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            true,
                            0.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bt * k * n];
                    for i in 0..bt {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            0.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, perm) => {
                let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
                let back = kernels::permute(&gt, &kernels::inverse_perm(perm));
                accumulate(grads, *a, back.into_data());
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
                        accumulate(grads, p, kernels::narrow(&gt, *axis, start, len).into_data());
                    }
                    start += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let in_shape = self.shape(*a);
                let len = out_shape[*axis];
                accumulate(
                    grads,
                    *a,
                    kernels::narrow_backward(g, in_shape, *axis, *start, len),
                );
            }
            Op::Softmax(a, axis) => {
                accumulate(grads, *a, kernels::softmax_backward(&node.value, g, *axis));
            }
            Op::SumTo(a) => {
                let in_shape = self.shape(*a);
                let ga = if g.len() == 1 {
                    vec![g[0]; in_shape.iter().product()]
                } else {
                    let map = kernels::broadcast_map(in_shape, out_shape);
                    map.iter().map(|&j| g[j]).collect()
                };
                accumulate(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
