//! Parameter storage, the per-step graph that binds parameters onto a tape,
//! and the small set of layers the model is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{grad_check, GradCheckReport, Result, Tape, Tensor, TensorError, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Which part of the model a parameter belongs to; freezing works per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Unmixing,
    Prompt,
    Head,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Unmixing => "unmixing",
            ParamGroup::Prompt => "prompt",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "backbone" => ParamGroup::Backbone,
            "unmixing" => ParamGroup::Unmixing,
            "prompt" => ParamGroup::Prompt,
            "head" => ParamGroup::Head,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name.into(), value, group, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name.into(), value, group, false)
    }

    fn push(&mut self, name: String, value: Tensor, group: ParamGroup, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(TensorError::mismatch("param set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total trainable scalar count in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Parameter gradients and batch-norm statistic updates from one step.
#[derive(Debug, Default)]
pub struct StepGrads {
    pub grads: Vec<(ParamId, Tensor)>,
    pub buffer_updates: Vec<(ParamId, Tensor)>,
}

impl StepGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// A tape plus the parameter bindings for one forward/backward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    frozen: Vec<ParamGroup>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            frozen: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn with_frozen(mut self, groups: &[ParamGroup]) -> Self {
        self.frozen = groups.to_vec();
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Binds a parameter onto the tape, once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let rg = e.trainable && !self.frozen.contains(&e.group);
        let v = self.tape.leaf(e.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// Binds a parameter to an existing tape variable instead of its stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn record_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Runs the reverse sweep from `loss` and collects parameter gradients.
    /// Parameters the loss does not reach get no entry.
    pub fn finish(self, loss: Var) -> Result<StepGrads> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = grads.take(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        Ok(StepGrads {
            grads: out,
            buffer_updates: self.buffer_updates,
        })
    }

    /// Drops the tape, keeping only batch-norm statistic updates.
    pub fn into_buffer_updates(self) -> Vec<(ParamId, Tensor)> {
        self.buffer_updates
    }
}

/// [`grad_check`] over graph inputs and a chosen set of parameters. The
/// closure receives the input variables; the listed parameters are checked
/// alongside them, reported after the inputs in `worst`.
pub fn param_grad_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    inputs: &[Tensor],
    train: bool,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|&id| store.get(id).clone()));
    let n_in = inputs.len();
    grad_check(
        |t, vars| {
            let mut g = Graph::new(store, train);
            std::mem::swap(&mut g.tape, t);
            for (k, &id) in params.iter().enumerate() {
                g.bind(id, vars[n_in + k]);
            }
            let out = f(&mut g, &vars[..n_in]);
            std::mem::swap(&mut g.tape, t);
            out
        },
        &all,
        eps,
    )
}

/// Uniform initializer helper around a deterministic RNG.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.uniform(&[in_dim, out_dim], bound), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.uniform(&[out_dim], bound), group));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]), group);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(TensorError::mismatch("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = g.tape.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(self.weight);
        let mut y = g.tape.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.tape.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.tape.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: 0,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, spec: ConvSpec, group: ParamGroup) -> Self {
        assert!(
            spec.groups > 0 && spec.in_ch % spec.groups == 0 && spec.out_ch % spec.groups == 0,
            "{name}: groups {} must divide {} and {}",
            spec.groups,
            spec.in_ch,
            spec.out_ch
        );
        let cg = spec.in_ch / spec.groups;
        let fan_in = cg * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(&[spec.out_ch, cg, spec.kernel, spec.kernel], bound),
            group,
        );
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), init.uniform(&[spec.out_ch], bound), group));
        Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        layer_norm(&mut g.tape, x, gamma, beta, LN_EPS)
    }
}

/// Normalizes over the last axis, then applies per-feature scale and shift.
pub fn layer_norm(t: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let last = t.shape(x).len() - 1;
    let mu = t.mean_axes(x, &[last])?;
    let xc = t.sub(x, mu)?;
    let sq = t.square(xc);
    let var = t.mean_axes(sq, &[last])?;
    let var = t.add_scalar(var, eps);
    let sd = t.sqrt(var);
    let xn = t.div(xc, sd)?;
    let y = t.mul(xn, gamma)?;
    t.add(y, beta)
}

/// Per-channel batch normalization over N×C×H×W.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]), group),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]), group),
            channels,
        }
    }

    /// Batch statistics in training mode with batch > 1; running statistics
    /// otherwise.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(TensorError::mismatch("batch_norm", &shape, &[self.channels]));
        }
        let c = self.channels;
        let gamma = g.param(self.gamma);
        let gamma = g.tape.reshape(gamma, &[1, c, 1, 1])?;
        let beta = g.param(self.beta);
        let beta = g.tape.reshape(beta, &[1, c, 1, 1])?;
        if g.is_train() && shape[0] > 1 {
            let mu = g.tape.mean_axes(x, &[0, 2, 3])?;
            let xc = g.tape.sub(x, mu)?;
            let sq = g.tape.square(xc);
            let var = g.tape.mean_axes(sq, &[0, 2, 3])?;
            let count = (shape[0] * shape[2] * shape[3]) as f64;
            let (old_m, old_v) = (
                g.store().get(self.running_mean).clone(),
                g.store().get(self.running_var).clone(),
            );
            let bm = g.value(mu).data().to_vec();
            let bv = g.value(var).data().to_vec();
            let unbias = count / (count - 1.0);
            let new_m = Tensor::from_fn(&[c], |i| (1.0 - BN_MOMENTUM) * old_m.data()[i] + BN_MOMENTUM * bm[i]);
            let new_v = Tensor::from_fn(&[c], |i| {
                (1.0 - BN_MOMENTUM) * old_v.data()[i] + BN_MOMENTUM * bv[i] * unbias
            });
            g.record_buffer(self.running_mean, new_m);
            g.record_buffer(self.running_var, new_v);
            let var = g.tape.add_scalar(var, BN_EPS);
            let sd = g.tape.sqrt(var);
            let xn = g.tape.div(xc, sd)?;
            let y = g.tape.mul(xn, gamma)?;
            g.tape.add(y, beta)
        } else {
            let rm = g.store().get(self.running_mean).reshape(&[1, c, 1, 1])?;
            let rv = g.store().get(self.running_var).reshape(&[1, c, 1, 1])?;
            let inv_sd = rv.map(|v| 1.0 / (v + BN_EPS).sqrt());
            let rm = g.constant(rm);
            let inv_sd = g.constant(inv_sd);
            let xc = g.tape.sub(x, rm)?;
            let xn = g.tape.mul(xc, inv_sd)?;
            let y = g.tape.mul(xn, gamma)?;
            g.tape.add(y, beta)
        }
    }
}

/// `x·σ(1.702x)`, a sigmoid-composed GELU approximation.
pub fn gelu(t: &mut Tape, x: Var) -> Result<Var> {
    let s = t.mul_scalar(x, 1.702);
    let s = t.sigmoid(s);
    t.mul(x, s)
}

/// softmax(q·kᵀ/√d)·v over batched B×T×d operands. Returns (output, weights).
pub fn scaled_dot_attention(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *t.shape(q).last().unwrap_or(&1);
    let kt = t.transpose(k, 1, 2)?;
    let scores = t.bmm(q, kt)?;
    let scores = t.mul_scalar(scores, 1.0 / (d as f64).sqrt());
    let probs = t.softmax(scores, 2)?;
    let out = t.bmm(probs, v)?;
    Ok((out, probs))
}

/// N×T×D tokens → N×D×h×w grid (T = h·w, row-major cells).
pub fn tokens_to_grid(t: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(TensorError::mismatch("tokens_to_grid", &s, &[h * w]));
    }
    let p = t.permute(x, &[0, 2, 1])?;
    t.reshape(p, &[s[0], s[2], h, w])
}

/// N×D×h×w grid → N×(h·w)×D tokens.
pub fn grid_to_tokens(t: &mut Tape, x: Var) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 4 {
        return Err(TensorError::invalid("grid_to_tokens", format!("expected rank 4, got {:?}", s)));
    }
    let r = t.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    t.permute(r, &[0, 2, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_batchnorm_with_identity_stats_is_near_identity() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3, ParamGroup::Head);
        let mut g = Graph::new(&store, false);
        let xt = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 10.0);
        let x = g.constant(xt.clone());
        let y = bn.forward(&mut g, x).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in g.value(y).data().iter().zip(xt.data()) {
            assert!((a - b * scale).abs() < 1e-15);
            assert!((a - b).abs() <= b.abs() * 1e-5);
        }
    }

    #[test]
    fn batch_of_one_uses_running_stats_even_in_training() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2, ParamGroup::Head);
        let xt = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let mut g_train = Graph::new(&store, true);
        let x = g_train.constant(xt.clone());
        let a = bn.forward(&mut g_train, x).unwrap();
        let mut g_eval = Graph::new(&store, false);
        let x2 = g_eval.constant(xt);
        let b = bn.forward(&mut g_eval, x2).unwrap();
        assert!(g_train.value(a).bit_eq(g_eval.value(b)));
        assert!(g_train.into_buffer_updates().is_empty());
    }

    #[test]
    fn training_batchnorm_normalizes_and_updates_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2, ParamGroup::Head);
        let mut g = Graph::new(&store, true);
        let x = g.constant(Tensor::from_fn(&[4, 2, 3, 3], |i| ((i * 37) % 11) as f64));
        let y = bn.forward(&mut g, x).unwrap();
        let yv = g.value(y).clone();
        for c in 0..2 {
            let mut vals = Vec::new();
            for n in 0..4 {
                vals.extend_from_slice(&yv.data()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
        }
        let ups = g.into_buffer_updates();
        assert_eq!(ups.len(), 2);
    }

    #[test]
    fn linear_applies_to_last_axis() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, &mut Init { rng: &mut rng }, "l", 4, 3, true, ParamGroup::Head);
        let mut g = Graph::new(&store, false);
        let x = g.constant(Tensor::zeros(&[2, 5, 4]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 5, 3]);
        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(lin.forward(&mut g, bad).is_err());
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0), ParamGroup::Backbone);
        let b = store.add("b", Tensor::scalar(3.0), ParamGroup::Head);
        let mut g = Graph::new(&store, true).with_frozen(&[ParamGroup::Backbone]);
        let va = g.param(a);
        let vb = g.param(b);
        let y = g.tape.mul(va, vb).unwrap();
        let grads = g.finish(y).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }
}
