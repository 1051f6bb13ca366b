//! Autoencoder unmixing, reconstruction losses and abundance decomposition.
//!
//! Cubes are `N×n×H×W` (bands on axis 1), abundances `N×r×H×W`. The encoder
//! ends in a softmax over endmembers so every pixel lies on the probability
//! simplex; the decoder is a bias-free linear map whose weight is the
//! softplus-activated endmember matrix `M` (`n×r`), so `x̂ = M·a` per pixel.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv2d, ConvSpec, Graph, Init, Linear, ParamGroup, ParamId, ParamStore, LEAKY_SLOPE};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::wavelets::{haar1d_channels, ChannelBranches};

/// Channels per material branch.
pub const BRANCH_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Per-pixel MLP.
    Mlp,
    /// 3×3 convolutions, same widths.
    Conv,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::Conv => "conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlp" => Some(EncoderKind::Mlp),
            "conv" => Some(EncoderKind::Conv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnmixConfig {
    pub bands: usize,
    pub endmembers: usize,
    pub hidden: Vec<usize>,
    pub encoder: EncoderKind,
}

impl UnmixConfig {
    pub fn new(bands: usize, endmembers: usize) -> Self {
        UnmixConfig {
            bands,
            endmembers,
            hidden: vec![32, 16],
            encoder: EncoderKind::Mlp,
        }
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Mlp(Vec<Linear>),
    Conv(Vec<Conv2d>),
}

#[derive(Clone, Debug)]
pub struct UnmixNet {
    pub config: UnmixConfig,
    encoder: Encoder,
    /// Raw decoder weight `n×r`; `M = softplus(raw)`.
    pub decoder_raw: ParamId,
}

impl UnmixNet {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, config: UnmixConfig) -> Self {
        let g = ParamGroup::Unmixing;
        let mut widths = vec![config.bands];
        widths.extend_from_slice(&config.hidden);
        widths.push(config.endmembers);
        let encoder = match config.encoder {
            EncoderKind::Mlp => Encoder::Mlp(
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Linear::new(store, init, &format!("{name}.enc.{i}"), w[0], w[1], true, g))
                    .collect(),
            ),
            EncoderKind::Conv => Encoder::Conv(
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        Conv2d::new(store, init, &format!("{name}.enc.{i}"), ConvSpec::new(w[0], w[1], 3).padding(1), g)
                    })
                    .collect(),
            ),
        };
        // Positive random spectra around 0.5 reflectance.
        let raw = init
            .uniform(&[config.bands, config.endmembers], 0.5)
            .map(|v| softplus_inv(0.5 + v * 0.8));
        let decoder_raw = store.add(format!("{name}.dec.raw"), raw, g);
        UnmixNet {
            config,
            encoder,
            decoder_raw,
        }
    }

    /// Parameter ids of the encoder's final layer (weight, bias).
    pub fn final_layer(&self) -> (ParamId, Option<ParamId>) {
        match &self.encoder {
            Encoder::Mlp(l) => (l.last().unwrap().weight, l.last().unwrap().bias),
            Encoder::Conv(l) => (l.last().unwrap().weight, l.last().unwrap().bias),
        }
    }

    /// Softplus-activated endmember matrix `n×r`.
    pub fn endmembers(&self, store: &ParamStore) -> Tensor {
        store.get(self.decoder_raw).map(softplus)
    }

    /// Sets the decoder so that its activated matrix equals `m` (entries > 0).
    pub fn set_endmembers(&self, store: &mut ParamStore, m: &Tensor) -> Result<()> {
        store.set(self.decoder_raw, m.map(softplus_inv))
    }

    /// Cube `N×n×H×W` → abundances `N×r×H×W`.
    pub fn encode(&self, g: &mut Graph, cube: Var) -> Result<Var> {
        let s = g.tape.shape(cube).to_vec();
        if s.len() != 4 || s[1] != self.config.bands {
            return Err(TensorError::mismatch("encode", &s, &[self.config.bands]));
        }
        match &self.encoder {
            Encoder::Mlp(layers) => {
                let mut h = g.tape.permute(cube, &[0, 2, 3, 1])?;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(g, h)?;
                    if i + 1 < layers.len() {
                        h = g.tape.leaky_relu(h, LEAKY_SLOPE);
                    }
                }
                let a = g.tape.softmax(h, 3)?;
                g.tape.permute(a, &[0, 3, 1, 2])
            }
            Encoder::Conv(layers) => {
                let mut h = cube;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(g, h)?;
                    if i + 1 < layers.len() {
                        h = g.tape.leaky_relu(h, LEAKY_SLOPE);
                    }
                }
                g.tape.softmax(h, 1)
            }
        }
    }

    /// Abundances `N×r×H×W` → reconstruction `N×n×H×W`.
    pub fn decode(&self, g: &mut Graph, abundances: Var) -> Result<Var> {
        let s = g.tape.shape(abundances).to_vec();
        if s.len() != 4 || s[1] != self.config.endmembers {
            return Err(TensorError::mismatch("decode", &s, &[self.config.endmembers]));
        }
        let raw = g.param(self.decoder_raw);
        let m = g.tape.softplus(raw);
        mix(&mut g.tape, m, abundances)
    }
}

/// Linear mixture `x = M·a` per pixel, `M: n×r`, `a: N×r×H×W`.
pub fn mix(t: &mut Tape, m: Var, abundances: Var) -> Result<Var> {
    let s = t.shape(abundances).to_vec();
    let ms = t.shape(m).to_vec();
    if s.len() != 4 || ms.len() != 2 || ms[1] != s[1] {
        return Err(TensorError::mismatch("mix", &ms, &s));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let pix = t.permute(abundances, &[0, 2, 3, 1])?;
    let pix = t.reshape(pix, &[n * h * w, s[1]])?;
    let mt = t.transpose(m, 0, 1)?;
    let x = t.matmul(pix, mt)?;
    let x = t.reshape(x, &[n, h, w, ms[0]])?;
    t.permute(x, &[0, 3, 1, 2])
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-9);
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp()).ln_1p()
    }
}

fn selection(t: &Tape, x: Var, mask: Option<&Tensor>) -> Result<(Tensor, usize)> {
    let s = t.shape(x);
    let pix_shape = [s[0], 1, s[2], s[3]];
    match mask {
        None => {
            let n = s[0] * s[2] * s[3];
            Ok((Tensor::ones(&pix_shape), n))
        }
        Some(m) => {
            if m.shape() != pix_shape {
                return Err(TensorError::mismatch("loss mask", m.shape(), &pix_shape));
            }
            let count = m.data().iter().filter(|&&v| v != 0.0).count();
            Ok((m.clone(), count))
        }
    }
}

fn check_pair(t: &Tape, op: &'static str, xhat: Var, x: Var) -> Result<()> {
    let (a, b) = (t.shape(xhat), t.shape(x));
    if a != b || a.len() != 4 {
        return Err(TensorError::mismatch(op, a, b));
    }
    Ok(())
}

/// Mean spectral angle (radians) over selected pixels of `N×n×H×W` cubes.
/// Pixels where either spectrum has zero norm contribute 0.
pub fn sad_loss(t: &mut Tape, xhat: Var, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    check_pair(t, "sad_loss", xhat, x)?;
    let (sel, count) = selection(t, x, mask)?;
    if count == 0 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let (xh, xv) = match mask {
        Some(m) => (t.masked_mul(xhat, m)?, t.masked_mul(x, m)?),
        None => (xhat, x),
    };
    let prod = t.mul(xh, xv)?;
    let dot = t.sum_axes(prod, &[1])?;
    let sq_h = t.square(xh);
    let sq_x = t.square(xv);
    let nh2 = t.sum_axes(sq_h, &[1])?;
    let nx2 = t.sum_axes(sq_x, &[1])?;
    let nh = t.sqrt(nh2);
    let nx = t.sqrt(nx2);
    let valid = Tensor::from_fn(t.shape(nh), |i| {
        let ok = t.value(nh).data()[i] > 0.0 && t.value(nx).data()[i] > 0.0 && sel.data()[i] != 0.0;
        if ok {
            1.0
        } else {
            0.0
        }
    });
    let den = t.mul(nh, nx)?;
    let offset = t.constant(valid.map(|v| 1.0 - v));
    let den = t.add(den, offset)?;
    let cos = t.div(dot, den)?;
    let cos = t.clamp(cos, -1.0, 1.0);
    let angle = t.acos(cos);
    let angle = t.masked_mul(angle, &valid)?;
    let total = t.sum(angle);
    Ok(t.mul_scalar(total, 1.0 / count as f64))
}

/// Mean squared difference over selected entries (all bands of selected pixels).
pub fn mse_loss(t: &mut Tape, xhat: Var, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    check_pair(t, "mse_loss", xhat, x)?;
    let (_, count) = selection(t, x, mask)?;
    if count == 0 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let bands = t.shape(x)[1];
    let d = t.sub(xhat, x)?;
    let d = match mask {
        Some(m) => t.masked_mul(d, m)?,
        None => d,
    };
    let sq = t.square(d);
    let total = t.sum(sq);
    Ok(t.mul_scalar(total, 1.0 / (count * bands) as f64))
}

/// SAD + MSE.
pub fn reconstruction_loss(t: &mut Tape, xhat: Var, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    let s = sad_loss(t, xhat, x, mask)?;
    let m = mse_loss(t, xhat, x, mask)?;
    t.add(s, m)
}

/// How abundance channels are split into the two material branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmdVariant {
    /// 1×1 adaptor to 2c channels, then channel-wise Haar.
    AdaptorHaar,
    /// Haar directly on the abundances (requires r = 2c).
    Haar,
    /// Adaptor, then first c / last c channels.
    AdaptorSplit,
    /// First c / last c abundance channels (requires r = 2c).
    Split,
}

impl AmdVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AmdVariant::AdaptorHaar => "adaptor_haar",
            AmdVariant::Haar => "haar",
            AmdVariant::AdaptorSplit => "adaptor_split",
            AmdVariant::Split => "split",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "adaptor_haar" => AmdVariant::AdaptorHaar,
            "haar" => AmdVariant::Haar,
            "adaptor_split" => AmdVariant::AdaptorSplit,
            "split" => AmdVariant::Split,
            _ => return None,
        })
    }

    fn has_adaptor(self) -> bool {
        matches!(self, AmdVariant::AdaptorHaar | AmdVariant::AdaptorSplit)
    }
}

/// Abundance-map decomposition: channel adaptor plus branch split.
#[derive(Clone, Debug)]
pub struct Amd {
    pub variant: AmdVariant,
    pub adaptor: Option<Conv2d>,
    in_channels: usize,
}

impl Amd {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        variant: AmdVariant,
    ) -> std::result::Result<Self, TensorError> {
        if !variant.has_adaptor() && in_channels != 2 * BRANCH_CHANNELS {
            return Err(TensorError::invalid(
                "amd",
                format!(
                    "variant {} needs {} input channels, got {}",
                    variant.as_str(),
                    2 * BRANCH_CHANNELS,
                    in_channels
                ),
            ));
        }
        let adaptor = variant.has_adaptor().then(|| {
            Conv2d::new(
                store,
                init,
                &format!("{name}.adaptor"),
                ConvSpec::new(in_channels, 2 * BRANCH_CHANNELS, 1),
                ParamGroup::Prompt,
            )
        });
        Ok(Amd {
            variant,
            adaptor,
            in_channels,
        })
    }

    /// `A → A_p`, 2c channels, spatial shape preserved.
    pub fn adapt(&self, g: &mut Graph, a: Var) -> Result<Var> {
        let s = g.tape.shape(a).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(TensorError::mismatch("amd_adapt", &s, &[self.in_channels]));
        }
        match &self.adaptor {
            Some(conv) => conv.forward(g, a),
            None => Ok(a),
        }
    }

    pub fn decompose(&self, t: &mut Tape, adapted: Var) -> Result<ChannelBranches> {
        match self.variant {
            AmdVariant::AdaptorHaar | AmdVariant::Haar => haar1d_channels(t, adapted),
            AmdVariant::AdaptorSplit | AmdVariant::Split => {
                let c = t.shape(adapted)[1];
                if c % 2 != 0 {
                    return Err(TensorError::invalid("amd_split", format!("odd channel count {c}")));
                }
                Ok(ChannelBranches {
                    low: t.narrow(adapted, 1, 0, c / 2)?,
                    high: t.narrow(adapted, 1, c / 2, c / 2)?,
                })
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, a: Var) -> Result<ChannelBranches> {
        let ap = self.adapt(g, a)?;
        self.decompose(&mut g.tape, ap)
    }
}

/// Spectral angle between two spectra in radians.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

fn column(m: &Tensor, k: usize) -> Vec<f64> {
    let (n, r) = (m.shape()[0], m.shape()[1]);
    (0..n).map(|b| m.data()[b * r + k]).collect()
}

/// Assignment of estimated to true endmembers minimizing mean SAD, by
/// exhaustive search over permutations (r ≤ 9).
#[derive(Clone, Debug, PartialEq)]
pub struct EndmemberMatch {
    /// `perm[k]` = estimated column matched to true column `k`.
    pub perm: Vec<usize>,
    pub sads: Vec<f64>,
    pub mean_sad: f64,
}

pub fn match_endmembers(estimated: &Tensor, truth: &Tensor) -> Result<EndmemberMatch> {
    if estimated.shape() != truth.shape() || truth.ndim() != 2 {
        return Err(TensorError::mismatch("match_endmembers", estimated.shape(), truth.shape()));
    }
    let r = truth.shape()[1];
    if r > 9 {
        return Err(TensorError::invalid("match_endmembers", format!("r = {r} too large for exhaustive matching")));
    }
    let cost: Vec<Vec<f64>> = (0..r)
        .map(|k| {
            let t = column(truth, k);
            (0..r).map(|j| spectral_angle(&column(estimated, j), &t)).collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..r).collect();
    permutations(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(k, &j)| cost[k][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p.to_vec()));
        }
    });
    let (total, perm) = best.unwrap();
    Ok(EndmemberMatch {
        sads: perm.iter().enumerate().map(|(k, &j)| cost[k][j]).collect(),
        mean_sad: total / r as f64,
        perm,
    })
}

fn permutations(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Picks `r` mutually dissimilar pixel spectra from a `n×H×W` cube by
/// farthest-point selection in spectral angle, starting from the brightest.
pub fn farthest_pixels(cube: &Tensor, r: usize) -> Tensor {
    let (n, h, w) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
    let p = h * w;
    let spec = |i: usize| -> Vec<f64> { (0..n).map(|b| cube.data()[b * p + i]).collect() };
    let first = (0..p)
        .max_by(|&a, &b| {
            let na: f64 = spec(a).iter().map(|v| v * v).sum();
            let nb: f64 = spec(b).iter().map(|v| v * v).sum();
            na.total_cmp(&nb)
        })
        .unwrap_or(0);
    let mut chosen = vec![first];
    let mut min_angle: Vec<f64> = (0..p).map(|i| spectral_angle(&spec(i), &spec(first))).collect();
    while chosen.len() < r {
        let next = (0..p).max_by(|&a, &b| min_angle[a].total_cmp(&min_angle[b])).unwrap();
        chosen.push(next);
        let s = spec(next);
        for (i, m) in min_angle.iter_mut().enumerate() {
            *m = m.min(spectral_angle(&spec(i), &s));
        }
    }
    let mut out = vec![0.0; n * r];
    for (k, &i) in chosen.iter().enumerate() {
        for b in 0..n {
            out[b * r + k] = cube.data()[b * p + i].max(1e-4);
        }
    }
    Tensor::from_parts(vec![n, r], out)
}

/// Trains `net` alone on one `n×H×W` cube with the SAD + MSE objective.
/// For the first `hold_decoder` steps the endmembers stay at their current
/// values and only the encoder learns. Returns the loss per step.
pub fn fit_unmixing(
    net: &UnmixNet,
    store: &mut ParamStore,
    cube: &Tensor,
    steps: usize,
    hold_decoder: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let (n, h, w) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
    let x = cube.reshape(&[1, n, h, w])?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
        store,
    );
    let held = store.get(net.decoder_raw).clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::new(store, true);
        let xv = g.constant(x.clone());
        let a = net.encode(&mut g, xv)?;
        let xh = net.decode(&mut g, a)?;
        let loss = reconstruction_loss(&mut g.tape, xh, xv, None)?;
        losses.push(g.value(loss).item());
        let grads = g.finish(loss)?;
        opt.step(store, &grads, lr);
        if step < hold_decoder {
            store.set(net.decoder_raw, held.clone())?;
        }
    }
    Ok(losses)
}

/// Abundances `r×H×W` for one cube, evaluated without training state.
pub fn infer_abundances(net: &UnmixNet, store: &ParamStore, cube: &Tensor) -> Result<Tensor> {
    let (n, h, w) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
    let mut g = Graph::new(store, false);
    let x = g.constant(cube.reshape(&[1, n, h, w])?);
    let a = net.encode(&mut g, x)?;
    g.value(a).reshape(&[net.config.endmembers, h, w])
}

pub fn new_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
