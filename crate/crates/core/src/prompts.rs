//! Material prompts: patch embedding of the two abundance branches, wavelet
//! prompt blocks that condition each branch on backbone features, and the
//! fusion bottleneck whose output is added to the backbone tokens.
//!
//! A WMP block takes a branch prompt grid and the backbone grid of the same
//! region, splits both into Haar subbands, fuses LL by cross-attention
//! (prompt as query) and each high-frequency subband by a grouped
//! convolution over the channel concatenation, then resynthesizes.

use crate::nn::{
    grid_to_tokens, scaled_dot_attention, tokens_to_grid, BatchNorm2d, Conv2d, ConvSpec, Graph, Init, LayerNorm,
    Linear, ParamGroup, ParamStore, LEAKY_SLOPE,
};
use crate::tensor::{Result, Tape, TensorError, Var};
use crate::wavelets::{haar2d, ihaar2d, Subbands2D};

const G: ParamGroup = ParamGroup::Prompt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuserKind {
    CrossAttention,
    GroupConv,
    /// Returns the prompt subband unchanged.
    Identity,
}

/// Which fuser handles each subband, in LL, HL, LH, HH order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperatorAssignment(pub [FuserKind; 4]);

impl OperatorAssignment {
    pub const DEFAULT: Self = OperatorAssignment([
        FuserKind::CrossAttention,
        FuserKind::GroupConv,
        FuserKind::GroupConv,
        FuserKind::GroupConv,
    ]);
    pub const SWAPPED: Self = OperatorAssignment([
        FuserKind::GroupConv,
        FuserKind::CrossAttention,
        FuserKind::CrossAttention,
        FuserKind::CrossAttention,
    ]);
    pub const ALL_ATTENTION: Self = OperatorAssignment([FuserKind::CrossAttention; 4]);
    pub const ALL_CONV: Self = OperatorAssignment([FuserKind::GroupConv; 4]);
    pub const IDENTITY: Self = OperatorAssignment([FuserKind::Identity; 4]);

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "default" => Self::DEFAULT,
            "swapped" => Self::SWAPPED,
            "all_attention" => Self::ALL_ATTENTION,
            "all_conv" => Self::ALL_CONV,
            "identity" => Self::IDENTITY,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match *self {
            Self::DEFAULT => "default",
            Self::SWAPPED => "swapped",
            Self::ALL_ATTENTION => "all_attention",
            Self::ALL_CONV => "all_conv",
            Self::IDENTITY => "identity",
            _ => "custom",
        }
    }
}

/// How the two branch prompts are merged into one token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionStrategy {
    Fpfm,
    /// `P_L + P_H`, no parameters.
    Addition,
    /// Zero-initialized 1×1 convolution over `[P_L ‖ P_H]`.
    Conv,
    /// `P_L` tokens attend to `P_H` tokens; zero-initialized output projection.
    Attention,
}

impl FusionStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fpfm" => FusionStrategy::Fpfm,
            "addition" => FusionStrategy::Addition,
            "conv" => FusionStrategy::Conv,
            "attention" => FusionStrategy::Attention,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Fpfm => "fpfm",
            FusionStrategy::Addition => "addition",
            FusionStrategy::Conv => "conv",
            FusionStrategy::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    pub dim: usize,
    pub branch_channels: usize,
    pub patch: usize,
    pub hf_width: usize,
    pub hf_groups: usize,
    pub fpfm_latent: usize,
    pub operators: OperatorAssignment,
    pub fusion: FusionStrategy,
}

impl PromptConfig {
    pub fn new(dim: usize) -> Self {
        PromptConfig {
            dim,
            branch_channels: 3,
            patch: 8,
            hf_width: dim / 2,
            hf_groups: 4,
            fpfm_latent: dim / 2,
            operators: OperatorAssignment::DEFAULT,
            fusion: FusionStrategy::Fpfm,
        }
    }
}

/// One patch embedding per branch, shared by template and search crops.
#[derive(Clone, Debug)]
pub struct MaterialPatchEmbed {
    pub low: Conv2d,
    pub high: Conv2d,
    channels: usize,
}

/// Branch prompt grids for one region, `N×D×h×w` each.
#[derive(Clone, Copy, Debug)]
pub struct BranchGrids {
    pub low: Var,
    pub high: Var,
}

impl MaterialPatchEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &PromptConfig) -> Self {
        let spec = ConvSpec::new(cfg.branch_channels, cfg.dim, cfg.patch).stride(cfg.patch);
        MaterialPatchEmbed {
            low: Conv2d::new(store, init, "prompt.embed.low", spec.clone(), G),
            high: Conv2d::new(store, init, "prompt.embed.high", spec, G),
            channels: cfg.branch_channels,
        }
    }

    /// `M_L`, `M_H` crops `N×c×H×W` → branch grids `N×D×H/p×W/p`.
    pub fn forward(&self, g: &mut Graph, low: Var, high: Var) -> Result<BranchGrids> {
        for v in [low, high] {
            let s = g.tape.shape(v);
            if s.len() != 4 || s[1] != self.channels {
                return Err(TensorError::mismatch("material_patch_embed", s, &[self.channels]));
            }
        }
        Ok(BranchGrids {
            low: self.low.forward(g, low)?,
            high: self.high.forward(g, high)?,
        })
    }
}

/// Single-head cross-attention, prompt tokens as queries, followed by a
/// residual add and layer norm.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm: LayerNorm,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        CrossAttention {
            q: Linear::new(store, init, &format!("{name}.q"), d, d, true, G),
            k: Linear::new(store, init, &format!("{name}.k"), d, d, true, G),
            v: Linear::new(store, init, &format!("{name}.v"), d, d, true, G),
            o: Linear::new(store, init, &format!("{name}.o"), d, d, true, G),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, G),
        }
    }

    fn forward(&self, g: &mut Graph, prompt: Var, feature: Var) -> Result<Var> {
        let s = g.tape.shape(prompt).to_vec();
        let p = grid_to_tokens(&mut g.tape, prompt)?;
        let f = grid_to_tokens(&mut g.tape, feature)?;
        let q = self.q.forward(g, p)?;
        let k = self.k.forward(g, f)?;
        let v = self.v.forward(g, f)?;
        let (a, _) = scaled_dot_attention(&mut g.tape, q, k, v)?;
        let a = self.o.forward(g, a)?;
        let y = g.tape.add(p, a)?;
        let y = self.norm.forward(g, y)?;
        tokens_to_grid(&mut g.tape, y, s[2], s[3])
    }
}

/// `[H_i ‖ P_i]` → 1×1 → grouped 3×3 + BN + LeakyReLU → 1×1.
#[derive(Clone, Debug)]
pub struct GroupConvFuser {
    pub input: Conv2d,
    pub group: Conv2d,
    pub bn: BatchNorm2d,
    pub output: Conv2d,
}

impl GroupConvFuser {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &PromptConfig) -> Self {
        let (d, w) = (cfg.dim, cfg.hf_width);
        GroupConvFuser {
            input: Conv2d::new(store, init, &format!("{name}.in"), ConvSpec::new(2 * d, w, 1), G),
            group: Conv2d::new(
                store,
                init,
                &format!("{name}.gconv"),
                ConvSpec::new(w, w, 3).padding(1).groups(cfg.hf_groups),
                G,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), w, G),
            output: Conv2d::new(store, init, &format!("{name}.out"), ConvSpec::new(w, d, 1), G),
        }
    }

    fn forward(&self, g: &mut Graph, prompt: Var, feature: Var) -> Result<Var> {
        let x = g.tape.concat(&[feature, prompt], 1)?;
        let x = self.input.forward(g, x)?;
        let x = self.group.forward(g, x)?;
        let x = self.bn.forward(g, x)?;
        let x = g.tape.leaky_relu(x, LEAKY_SLOPE);
        self.output.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub enum Fuser {
    Attention(CrossAttention),
    Conv(GroupConvFuser),
    Identity,
}

impl Fuser {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, kind: FuserKind, cfg: &PromptConfig) -> Self {
        match kind {
            FuserKind::CrossAttention => Fuser::Attention(CrossAttention::new(store, init, name, cfg.dim)),
            FuserKind::GroupConv => Fuser::Conv(GroupConvFuser::new(store, init, name, cfg)),
            FuserKind::Identity => Fuser::Identity,
        }
    }

    fn forward(&self, g: &mut Graph, prompt: Var, feature: Var) -> Result<Var> {
        match self {
            Fuser::Attention(a) => a.forward(g, prompt, feature),
            Fuser::Conv(c) => c.forward(g, prompt, feature),
            Fuser::Identity => Ok(prompt),
        }
    }
}

const SUBBANDS: [&str; 4] = ["ll", "hl", "lh", "hh"];

#[derive(Clone, Debug)]
pub struct WmpBlock {
    /// LL, HL, LH, HH.
    pub fusers: Vec<Fuser>,
}

impl WmpBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &PromptConfig) -> Self {
        WmpBlock {
            fusers: (0..4)
                .map(|i| Fuser::new(store, init, &format!("{name}.{}", SUBBANDS[i]), cfg.operators.0[i], cfg))
                .collect(),
        }
    }

    /// Prompt grid and backbone grid `N×D×h×w` (h, w even) → new prompt grid.
    pub fn forward(&self, g: &mut Graph, prompt: Var, feature: Var) -> Result<Var> {
        let (ps, fs) = (g.tape.shape(prompt).to_vec(), g.tape.shape(feature).to_vec());
        if ps != fs || ps.len() != 4 {
            return Err(TensorError::mismatch("wmp_block", &ps, &fs));
        }
        let p = haar2d(&mut g.tape, prompt)?;
        let f = haar2d(&mut g.tape, feature)?;
        let (p, f) = (p.as_array(), f.as_array());
        let mut fused = [*p[0]; 4];
        for i in 0..4 {
            fused[i] = self.fusers[i].forward(g, *p[i], *f[i])?;
        }
        ihaar2d(
            &mut g.tape,
            Subbands2D {
                ll: fused[0],
                hl: fused[1],
                lh: fused[2],
                hh: fused[3],
            },
        )
    }
}

/// Bottleneck fusion of the two branch prompts.
#[derive(Clone, Debug)]
pub struct Fpfm {
    pub down: Linear,
    pub middle: Linear,
    pub up: Linear,
}

impl Fpfm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &PromptConfig) -> Self {
        let (d, l) = (cfg.dim, cfg.fpfm_latent);
        Fpfm {
            down: Linear::new(store, init, &format!("{name}.down"), 2 * d, l, true, G),
            middle: Linear::new(store, init, &format!("{name}.middle"), l, l, true, G),
            up: Linear::zeroed(store, &format!("{name}.up"), l, d, G),
        }
    }

    /// Token sequences `N×T×D` for both branches → fused `N×T×D`.
    pub fn forward(&self, g: &mut Graph, low: Var, high: Var) -> Result<Var> {
        let x = g.tape.concat(&[low, high], 2)?;
        let z0 = self.down.forward(g, x)?;
        let z0 = g.tape.leaky_relu(z0, LEAKY_SLOPE);
        let m = self.middle.forward(g, z0)?;
        let z1 = g.tape.add(m, z0)?;
        let z1 = g.tape.leaky_relu(z1, LEAKY_SLOPE);
        self.up.forward(g, z1)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Fpfm(Fpfm),
    Addition,
    Conv(Linear),
    Attention { q: Linear, k: Linear, v: Linear, o: Linear },
}

impl Fusion {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &PromptConfig) -> Self {
        match cfg.fusion {
            FusionStrategy::Fpfm => Fusion::Fpfm(Fpfm::new(store, init, name, cfg)),
            FusionStrategy::Addition => Fusion::Addition,
            FusionStrategy::Conv => Fusion::Conv(Linear::zeroed(store, &format!("{name}.conv"), 2 * cfg.dim, cfg.dim, G)),
            FusionStrategy::Attention => {
                let d = cfg.dim;
                Fusion::Attention {
                    q: Linear::new(store, init, &format!("{name}.attn.q"), d, d, true, G),
                    k: Linear::new(store, init, &format!("{name}.attn.k"), d, d, true, G),
                    v: Linear::new(store, init, &format!("{name}.attn.v"), d, d, true, G),
                    o: Linear::zeroed(store, &format!("{name}.attn.o"), d, d, G),
                }
            }
        }
    }

    fn tokens(&self, g: &mut Graph, low: Var, high: Var) -> Result<Var> {
        match self {
            Fusion::Fpfm(f) => f.forward(g, low, high),
            Fusion::Addition => g.tape.add(low, high),
            Fusion::Conv(l) => {
                let x = g.tape.concat(&[low, high], 2)?;
                l.forward(g, x)
            }
            Fusion::Attention { q, k, v, o } => {
                let (q, k, v) = (q.forward(g, low)?, k.forward(g, high)?, v.forward(g, high)?);
                let (a, _) = scaled_dot_attention(&mut g.tape, q, k, v)?;
                o.forward(g, a)
            }
        }
    }

    /// Fuses template and search branch grids with shared parameters and
    /// returns the `N×(Tt+Ts)×D` sequence in backbone token order.
    pub fn forward(&self, g: &mut Graph, template: &BranchGrids, search: &BranchGrids) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        for r in [template, search] {
            let (ls, hs) = (g.tape.shape(r.low).to_vec(), g.tape.shape(r.high).to_vec());
            if ls != hs {
                return Err(TensorError::mismatch("fpfm", &ls, &hs));
            }
            let l = grid_to_tokens(&mut g.tape, r.low)?;
            let h = grid_to_tokens(&mut g.tape, r.high)?;
            parts.push(self.tokens(g, l, h)?);
        }
        g.tape.concat(&parts, 1)
    }
}

/// `H + P_f`, shapes must match exactly.
pub fn inject(t: &mut Tape, tokens: Var, prompt: Var) -> Result<Var> {
    if t.shape(tokens) != t.shape(prompt) {
        return Err(TensorError::mismatch("inject", t.shape(tokens), t.shape(prompt)));
    }
    t.add(tokens, prompt)
}

/// Prompt modules attached before one backbone block.
#[derive(Clone, Debug)]
pub struct PromptLayer {
    pub layer: usize,
    pub wmp_low: WmpBlock,
    pub wmp_high: WmpBlock,
    pub fusion: Fusion,
}

impl PromptLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, layer: usize, cfg: &PromptConfig) -> Self {
        let name = format!("prompt.layer{layer}");
        PromptLayer {
            layer,
            wmp_low: WmpBlock::new(store, init, &format!("{name}.wmp_low"), cfg),
            wmp_high: WmpBlock::new(store, init, &format!("{name}.wmp_high"), cfg),
            fusion: Fusion::new(store, init, &format!("{name}.fusion"), cfg),
        }
    }

    /// Updates the branch prompts of both regions from the backbone grids and
    /// returns the fused prompt sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        template: &mut BranchGrids,
        search: &mut BranchGrids,
        feat_template: Var,
        feat_search: Var,
    ) -> Result<Var> {
        for (r, f) in [(&mut *template, feat_template), (&mut *search, feat_search)] {
            r.low = self.wmp_low.forward(g, r.low, f)?;
            r.high = self.wmp_high.forward(g, r.high, f)?;
        }
        self.fusion.forward(g, template, search)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_grad_check;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn with_init<T>(seed: u64, f: impl FnOnce(&mut Init) -> T) -> T {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut Init { rng: &mut rng })
    }

    fn zero_all(store: &mut ParamStore, ids: &[crate::nn::ParamId]) {
        for &id in ids {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s)).unwrap();
        }
    }

    #[test]
    fn embed_shapes_zeros_and_independence() {
        let mut store = ParamStore::new();
        let cfg = PromptConfig::new(64);
        let emb = with_init(1, |i| MaterialPatchEmbed::new(&mut store, i, &cfg));
        let (lo, hi) = (rand_t(&[1, 3, 64, 64], 2), rand_t(&[1, 3, 64, 64], 3));
        let run = |store: &ParamStore, hi: &Tensor| {
            let mut g = Graph::new(store, false);
            let l = g.constant(lo.clone());
            let h = g.constant(hi.clone());
            let o = emb.forward(&mut g, l, h).unwrap();
            (g.value(o.low).clone(), g.value(o.high).clone())
        };
        let (pl, ph) = run(&store, &hi);
        assert_eq!(pl.shape(), &[1, 64, 8, 8]);
        let (pl2, ph2) = run(&store, &hi.map(|v| v + 0.5));
        assert!(pl.bit_eq(&pl2));
        assert!(!ph.bit_eq(&ph2));

        let mut g = Graph::new(&store, false);
        let bad = g.constant(Tensor::zeros(&[1, 4, 64, 64]));
        assert!(emb.forward(&mut g, bad, bad).is_err());

        zero_all(
            &mut store,
            &[emb.low.weight, emb.low.bias.unwrap(), emb.high.weight, emb.high.bias.unwrap()],
        );
        let (pl, ph) = run(&store, &hi);
        assert!(pl.data().iter().chain(ph.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_mode_round_trips() {
        let mut store = ParamStore::new();
        let mut cfg = PromptConfig::new(8);
        cfg.operators = OperatorAssignment::IDENTITY;
        let wmp = with_init(4, |i| WmpBlock::new(&mut store, i, "w", &cfg));
        let pt = rand_t(&[2, 8, 8, 8], 5);
        let mut g = Graph::new(&store, false);
        let p = g.constant(pt.clone());
        let f = g.constant(rand_t(&[2, 8, 8, 8], 6));
        let o = wmp.forward(&mut g, p, f).unwrap();
        assert!(g.value(o).max_abs_diff(&pt) <= 1e-10);
    }

    #[test]
    fn wmp_preserves_shape_and_rejects_mismatch() {
        let mut store = ParamStore::new();
        let cfg = PromptConfig::new(64);
        let wmp = with_init(7, |i| WmpBlock::new(&mut store, i, "w", &cfg));
        let mut g = Graph::new(&store, true);
        let p = g.constant(rand_t(&[2, 64, 8, 8], 8));
        let f = g.constant(rand_t(&[2, 64, 8, 8], 9));
        let o = wmp.forward(&mut g, p, f).unwrap();
        assert_eq!(g.tape.shape(o), &[2, 64, 8, 8]);
        let small = g.constant(rand_t(&[2, 64, 4, 4], 10));
        assert!(wmp.forward(&mut g, p, small).is_err());
    }

    fn prompt_params(store: &ParamStore) -> Vec<crate::nn::ParamId> {
        store
            .ids()
            .filter(|&id| store.entry(id).trainable && store.entry(id).group == ParamGroup::Prompt)
            .collect()
    }

    #[test]
    fn wmp_gradient() {
        for ops in [OperatorAssignment::DEFAULT, OperatorAssignment::SWAPPED] {
            let mut store = ParamStore::new();
            let mut cfg = PromptConfig::new(4);
            cfg.hf_width = 4;
            cfg.hf_groups = 2;
            cfg.operators = ops;
            let wmp = with_init(11, |i| WmpBlock::new(&mut store, i, "w", &cfg));
            let params = prompt_params(&store);
            let inputs = [rand_t(&[2, 4, 4, 4], 12), rand_t(&[2, 4, 4, 4], 13)];
            let rep = param_grad_check(&store, &params, &inputs, true, 1e-5, |g, v| {
                let o = wmp.forward(g, v[0], v[1])?;
                let w = g.constant(rand_t(&[2, 4, 4, 4], 14));
                let o = g.tape.mul(o, w)?;
                Ok(g.tape.sum(o))
            })
            .unwrap();
            assert!(rep.max_rel_error <= 1e-4, "{ops:?} {rep:?}");
        }
    }

    fn fpfm_out(f: &Fpfm, store: &ParamStore, lo: &Tensor, hi: &Tensor) -> Tensor {
        let mut g = Graph::new(store, false);
        let l = g.constant(lo.clone());
        let h = g.constant(hi.clone());
        let o = f.forward(&mut g, l, h).unwrap();
        g.value(o).clone()
    }

    #[test]
    fn fpfm_zero_up_and_widths() {
        let mut store = ParamStore::new();
        let cfg = PromptConfig::new(64);
        let f = with_init(15, |i| Fpfm::new(&mut store, i, "f", &cfg));
        assert_eq!(f.down.in_dim, 128);
        assert_eq!((f.down.out_dim, f.middle.out_dim, f.up.out_dim), (32, 32, 64));
        let (lo, hi) = (rand_t(&[1, 80, 64], 16), rand_t(&[1, 80, 64], 17));
        assert!(fpfm_out(&f, &store, &lo, &hi).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fpfm_zero_middle_is_pure_residual() {
        let mut store = ParamStore::new();
        let cfg = PromptConfig::new(4);
        let f = with_init(18, |i| Fpfm::new(&mut store, i, "f", &cfg));
        store.set(f.up.weight, rand_t(&[2, 4], 19)).unwrap();
        zero_all(&mut store, &[f.middle.weight, f.middle.bias.unwrap()]);
        let (lo, hi) = (rand_t(&[1, 3, 4], 20), rand_t(&[1, 3, 4], 21));
        let out = fpfm_out(&f, &store, &lo, &hi);

        // Oracle: z0 = φ(down(x)), out = up(φ(z0)) since z1 = z0.
        let phi = |v: f64| if v > 0.0 { v } else { LEAKY_SLOPE * v };
        let (w_down, b_down) = (store.get(f.down.weight).clone(), store.get(f.down.bias.unwrap()).clone());
        let w_up = store.get(f.up.weight).clone();
        for tkn in 0..3 {
            let x: Vec<f64> = (0..4).map(|c| lo.data()[tkn * 4 + c]).chain((0..4).map(|c| hi.data()[tkn * 4 + c])).collect();
            let z0: Vec<f64> = (0..2)
                .map(|j| phi(b_down.data()[j] + (0..8).map(|i| x[i] * w_down.data()[i * 2 + j]).sum::<f64>()))
                .collect();
            for o in 0..4 {
                let want: f64 = (0..2).map(|j| phi(z0[j]) * w_up.data()[j * 4 + o]).sum();
                assert!((out.data()[tkn * 4 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fpfm_gradient() {
        let mut store = ParamStore::new();
        let cfg = PromptConfig::new(4);
        let f = with_init(22, |i| Fpfm::new(&mut store, i, "f", &cfg));
        store.set(f.up.weight, rand_t(&[2, 4], 23)).unwrap();
        let params = prompt_params(&store);
        let inputs = [rand_t(&[1, 5, 4], 24), rand_t(&[1, 5, 4], 25)];
        let rep = param_grad_check(&store, &params, &inputs, false, 1e-5, |g, v| {
            let o = f.forward(g, v[0], v[1])?;
            let sq = g.tape.square(o);
            Ok(g.tape.sum(sq))
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn fusion_rejects_mismatched_branches() {
        let mut store = ParamStore::new();
        let cfg = PromptConfig::new(4);
        let f = with_init(26, |i| Fusion::new(&mut store, i, "f", &cfg));
        let mut g = Graph::new(&store, false);
        let a = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let t = BranchGrids { low: a, high: a };
        let s = BranchGrids { low: b, high: a };
        assert!(f.forward(&mut g, &t, &s).is_err());
        let s = BranchGrids { low: b, high: b };
        let o = f.forward(&mut g, &t, &s).unwrap();
        assert_eq!(g.tape.shape(o), &[1, 20, 4]);
    }

    #[test]
    fn inject_examples() {
        let mut t = Tape::new();
        let ht = rand_t(&[1, 80, 8], 27);
        let pt = rand_t(&[1, 80, 8], 28);
        let h = t.constant(ht.clone());
        let zero = t.constant(Tensor::zeros(&[1, 80, 8]));
        let o = inject(&mut t, h, zero).unwrap();
        assert!(t.value(o).bit_eq(&ht));
        let p = t.constant(pt.clone());
        let np = t.neg(p);
        let a = inject(&mut t, h, p).unwrap();
        let b = inject(&mut t, a, np).unwrap();
        assert!(t.value(b).max_abs_diff(&ht) <= 1e-15);
        let direct = ht.zip_map(&pt, |x, y| x + y).unwrap();
        assert!(t.value(a).bit_eq(&direct));
        let bad = t.constant(Tensor::zeros(&[1, 79, 8]));
        assert!(inject(&mut t, h, bad).is_err());
    }
}
