//! Patch-token transformer over a template/search pair.
//!
//! Tokens are ordered template first (row-major over its grid), then search.
//! The final block keeps its attention weights so the relevance mask can be
//! derived from how strongly template queries attend to each search cell.

use crate::nn::{
    gelu, grid_to_tokens, scaled_dot_attention, Conv2d, ConvSpec, Graph, Init, LayerNorm, Linear, ParamGroup, ParamId,
    ParamStore,
};
use crate::objectives::BBox;
use crate::tensor::{Result, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            template_size: 32,
            search_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            blocks: 12,
            mlp_ratio: 2,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn tokens(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::invalid("backbone_config", msg));
        if self.patch == 0 || self.template_size % self.patch != 0 || self.search_size % self.patch != 0 {
            return bad(format!(
                "sizes {}/{} not multiples of patch {}",
                self.template_size, self.search_size, self.patch
            ));
        }
        if self.template_grid() % 2 != 0 || self.search_grid() % 2 != 0 {
            return bad("token grids must be even-sided".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return bad("blocks, mlp_ratio and in_channels must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &BackboneConfig) -> Self {
        let (d, g) = (cfg.dim, ParamGroup::Backbone);
        Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g),
            qkv: Linear::new(store, init, &format!("{name}.qkv"), d, 3 * d, true, g),
            proj: Linear::new(store, init, &format!("{name}.proj"), d, d, true, g),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, cfg.mlp_ratio * d, true, g),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), cfg.mlp_ratio * d, d, true, g),
            heads: cfg.heads,
        }
    }

    /// Multi-head self-attention over `N×T×D`; returns the output and the
    /// weights as `N×heads×T×T`.
    fn attention(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let s = g.tape.shape(x).to_vec();
        let (n, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(g, x)?;
        let qkv = g.tape.reshape(qkv, &[n, t, 3, h, dh])?;
        let qkv = g.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = g.tape.narrow(qkv, 0, i, 1)?;
            parts.push(g.tape.reshape(p, &[n * h, t, dh])?);
        }
        let (o, probs) = scaled_dot_attention(&mut g.tape, parts[0], parts[1], parts[2])?;
        let o = g.tape.reshape(o, &[n, h, t, dh])?;
        let o = g.tape.permute(o, &[0, 2, 1, 3])?;
        let o = g.tape.reshape(o, &[n, t, d])?;
        let o = self.proj.forward(g, o)?;
        let probs = g.tape.reshape(probs, &[n, h, t, t])?;
        Ok((o, probs))
    }

    /// Pre-norm block: `x + attn(LN x)`, then `+ mlp(LN ·)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.qkv.in_dim {
            return Err(TensorError::mismatch("block_forward", &s, &[self.qkv.in_dim]));
        }
        let h = self.norm1.forward(g, x)?;
        let (a, probs) = self.attention(g, h)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = gelu(&mut g.tape, h)?;
        let h = self.fc2.forward(g, h)?;
        Ok((g.tape.add(x, h)?, probs))
    }
}

/// Tokens at some depth plus the final block's attention, once recorded.
#[derive(Clone, Copy, Debug)]
pub struct TokenState {
    pub tokens: Var,
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: Conv2d,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (d, g) = (config.dim, ParamGroup::Backbone);
        let patch_embed = Conv2d::new(
            store,
            init,
            "backbone.patch_embed",
            ConvSpec::new(config.in_channels, d, config.patch).stride(config.patch),
            g,
        );
        let pos_template = store.add(
            "backbone.pos_template",
            init.uniform(&[config.template_tokens(), d], 0.02),
            g,
        );
        let pos_search = store.add("backbone.pos_search", init.uniform(&[config.search_tokens(), d], 0.02), g);
        let blocks = (0..config.blocks)
            .map(|i| Block::new(store, init, &format!("backbone.block{}", i + 1), &config))
            .collect();
        let final_norm = LayerNorm::new(store, "backbone.final_norm", d, g);
        Ok(Backbone {
            config,
            patch_embed,
            pos_template,
            pos_search,
            blocks,
            final_norm,
        })
    }

    fn embed(&self, g: &mut Graph, img: Var, size: usize, pos: ParamId, what: &str) -> Result<Var> {
        let s = g.tape.shape(img).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != size || s[3] != size {
            return Err(TensorError::invalid(
                "embed_pair",
                format!(
                    "{what} must be N×{}×{size}×{size}, got {:?}",
                    self.config.in_channels, s
                ),
            ));
        }
        let grid = self.patch_embed.forward(g, img)?;
        let tok = grid_to_tokens(&mut g.tape, grid)?;
        let p = g.param(pos);
        g.tape.add(tok, p)
    }

    /// `N×C×Ht×Wt`, `N×C×Hs×Ws` images → `N×(Tt+Ts)×D` tokens.
    pub fn embed_pair(&self, g: &mut Graph, template: Var, search: Var) -> Result<TokenState> {
        let zt = self.embed(g, template, self.config.template_size, self.pos_template, "template")?;
        let xt = self.embed(g, search, self.config.search_size, self.pos_search, "search")?;
        Ok(TokenState {
            tokens: g.tape.concat(&[zt, xt], 1)?,
            attention: None,
        })
    }

    /// Runs block `l` (1-based). The last block's attention is recorded.
    pub fn block_forward(&self, g: &mut Graph, state: TokenState, l: usize) -> Result<TokenState> {
        if l == 0 || l > self.blocks.len() {
            return Err(TensorError::invalid(
                "block_forward",
                format!("layer {l} outside 1..={}", self.blocks.len()),
            ));
        }
        let (tokens, probs) = self.blocks[l - 1].forward(g, state.tokens)?;
        let attention = if l == self.blocks.len() {
            Some(probs)
        } else {
            state.attention
        };
        Ok(TokenState { tokens, attention })
    }

    pub fn finish(&self, g: &mut Graph, state: TokenState) -> Result<TokenState> {
        Ok(TokenState {
            tokens: self.final_norm.forward(g, state.tokens)?,
            attention: state.attention,
        })
    }

    /// Splits `N×T×D` tokens into (template, search) token blocks.
    pub fn split(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Var)> {
        let (nt, ns) = (self.config.template_tokens(), self.config.search_tokens());
        Ok((g.tape.narrow(tokens, 1, 0, nt)?, g.tape.narrow(tokens, 1, nt, ns)?))
    }
}

/// Per-sample relevance of each search token: mean attention it receives
/// from template queries, averaged over heads. `attention` is `N×H×T×T`.
pub fn relevance_scores(attention: &Tensor, template_tokens: usize) -> Result<Vec<Vec<f64>>> {
    let s = attention.shape();
    if s.len() != 4 || s[2] != s[3] || template_tokens >= s[2] {
        return Err(TensorError::invalid(
            "relevance_scores",
            format!("bad attention shape {:?} for {template_tokens} template tokens", s),
        ));
    }
    let (n, h, t) = (s[0], s[1], s[2]);
    let ns = t - template_tokens;
    let d = attention.data();
    let mut out = vec![vec![0.0; ns]; n];
    for (b, scores) in out.iter_mut().enumerate() {
        for head in 0..h {
            for q in 0..template_tokens {
                let row = ((b * h + head) * t + q) * t + template_tokens;
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc += d[row + j];
                }
            }
        }
        let norm = (h * template_tokens) as f64;
        scores.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// V = 0 on the ⌈ρ·len⌉ highest scores (ties to the lower index), 1 elsewhere.
pub fn mask_from_scores(scores: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(TensorError::invalid("relevance_mask", format!("rho {rho} outside (0, 1]")));
    }
    let keep = ((rho * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut v = vec![1.0; scores.len()];
    for &i in &order[..keep] {
        v[i] = 0.0;
    }
    Ok(v)
}

/// V = 0 on cells of a `grid×grid` lattice whose centers lie inside `gt`.
pub fn mask_from_box(gt: &BBox, grid: usize, cell: f64) -> Vec<f64> {
    let mut v = vec![1.0; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            let (cx, cy) = ((j as f64 + 0.5) * cell, (i as f64 + 0.5) * cell);
            if cx >= gt.x && cx <= gt.x + gt.w && cy >= gt.y && cy <= gt.y + gt.h {
                v[i * grid + j] = 0.0;
            }
        }
    }
    v
}

/// Relevance mask `N×1×g×g` for a batch. With `gt_boxes` (warm-up) the mask
/// is geometric; otherwise it comes from the recorded attention.
pub fn relevance_mask(
    g: &Graph,
    state: &TokenState,
    config: &BackboneConfig,
    rho: f64,
    gt_boxes: Option<&[BBox]>,
) -> Result<Tensor> {
    let grid = config.search_grid();
    let rows: Vec<Vec<f64>> = match gt_boxes {
        Some(boxes) => boxes
            .iter()
            .map(|b| mask_from_box(b, grid, config.patch as f64))
            .collect(),
        None => {
            let att = state
                .attention
                .ok_or_else(|| TensorError::invalid("relevance_mask", "no attention recorded"))?;
            relevance_scores(g.value(att), config.template_tokens())?
                .iter()
                .map(|s| mask_from_scores(s, rho))
                .collect::<Result<_>>()?
        }
    };
    let n = rows.len();
    Tensor::new(vec![n, 1, grid, grid], rows.concat())
}

/// Nearest-neighbour upsampling of `N×C×h×w` by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * factor, w * factor);
    Tensor::from_fn(&[n, c, ho, wo], |i| {
        let (plane, rem) = (i / (ho * wo), i % (ho * wo));
        let (y, xx) = (rem / wo, rem % wo);
        x.data()[plane * h * w + (y / factor) * w + xx / factor]
    })
}

/// Band ranges of the three false-color groups.
pub fn band_groups(bands: usize) -> [std::ops::Range<usize>; 3] {
    let b = |k: usize| k * bands / 3;
    [b(0)..b(1), b(1)..b(2), b(2)..b(3)]
}

/// Three-channel rendering of an `n×h×w` cube: per-pixel mean of each of
/// three equal contiguous band groups.
pub fn false_color(cube: &Tensor) -> Result<Tensor> {
    let s = cube.shape();
    if s.len() != 3 || s[0] < 3 {
        return Err(TensorError::invalid("false_color", format!("need n×h×w with n ≥ 3, got {:?}", s)));
    }
    let p = s[1] * s[2];
    let mut out = vec![0.0; 3 * p];
    for (k, r) in band_groups(s[0]).into_iter().enumerate() {
        let len = r.len() as f64;
        for b in r {
            for i in 0..p {
                out[k * p + i] += cube.data()[b * p + i];
            }
        }
        out[k * p..(k + 1) * p].iter_mut().for_each(|v| *v /= len);
    }
    Tensor::new(vec![3, s[1], s[2]], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            dim: 16,
            heads: 2,
            blocks: 2,
            ..Default::default()
        }
    }

    fn build(cfg: BackboneConfig, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut store, &mut Init { rng: &mut rng }, cfg).unwrap();
        (store, bb)
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn embed_shape_contract() {
        let (store, bb) = build(BackboneConfig::default(), 1);
        let mut g = Graph::new(&store, false);
        let z = g.constant(rand_t(&[1, 3, 32, 32], 2));
        let x = g.constant(rand_t(&[1, 3, 64, 64], 3));
        let st = bb.embed_pair(&mut g, z, x).unwrap();
        assert_eq!(g.tape.shape(st.tokens), &[1, 80, 64]);
        let bad = g.constant(rand_t(&[1, 3, 48, 48], 4));
        assert!(bb.embed_pair(&mut g, z, bad).is_err());
    }

    #[test]
    fn zero_inputs_and_params_give_zero_tokens() {
        let (mut store, bb) = build(small(), 5);
        let pe = bb.patch_embed.clone();
        for id in [bb.pos_template, bb.pos_search, pe.bias.unwrap()] {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s)).unwrap();
        }
        let mut g = Graph::new(&store, false);
        let z = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let st = bb.embed_pair(&mut g, z, x).unwrap();
        assert!(g.value(st.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn template_tokens_come_first() {
        let (store, bb) = build(small(), 6);
        let zt = rand_t(&[1, 3, 32, 32], 7);
        let xt = rand_t(&[1, 3, 64, 64], 8);
        let mut g = Graph::new(&store, false);
        let z = g.constant(zt.clone());
        let x = g.constant(xt);
        let st = bb.embed_pair(&mut g, z, x).unwrap();
        let full = g.value(st.tokens).clone();
        // Template slots depend only on the template image.
        let mut g2 = Graph::new(&store, false);
        let z2 = g2.constant(zt);
        let x2 = g2.constant(rand_t(&[1, 3, 64, 64], 9));
        let st2 = bb.embed_pair(&mut g2, z2, x2).unwrap();
        let other = g2.value(st2.tokens).clone();
        assert!(full.narrow(1, 0, 16).unwrap().bit_eq(&other.narrow(1, 0, 16).unwrap()));
        assert!(!full.narrow(1, 16, 64).unwrap().bit_eq(&other.narrow(1, 16, 64).unwrap()));
    }

    #[test]
    fn zero_block_is_residual_identity() {
        let (mut store, bb) = build(small(), 10);
        let b = bb.blocks[0].clone();
        for l in [&b.qkv, &b.proj, &b.fc1, &b.fc2] {
            for id in [Some(l.weight), l.bias].into_iter().flatten() {
                let s = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&s)).unwrap();
            }
        }
        let xt = rand_t(&[2, 80, 16], 11);
        let mut g = Graph::new(&store, false);
        let x = g.constant(xt.clone());
        let st = bb
            .block_forward(&mut g, TokenState { tokens: x, attention: None }, 1)
            .unwrap();
        assert!(g.value(st.tokens).bit_eq(&xt));
        assert!(st.attention.is_none());
    }

    #[test]
    fn block_is_deterministic_and_records_last_attention() {
        let (store, bb) = build(small(), 12);
        let xt = rand_t(&[1, 80, 16], 13);
        let run = || {
            let mut g = Graph::new(&store, false);
            let x = g.constant(xt.clone());
            let mut st = TokenState { tokens: x, attention: None };
            for l in 1..=2 {
                st = bb.block_forward(&mut g, st, l).unwrap();
            }
            let att = g.value(st.attention.unwrap()).clone();
            (g.value(st.tokens).clone(), att)
        };
        let (a, att) = run();
        let (b, _) = run();
        assert!(a.bit_eq(&b));
        assert_eq!(att.shape(), &[1, 2, 80, 80]);
        let row: f64 = att.data()[..80].iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let cfg = BackboneConfig {
            dim: 4,
            heads: 2,
            blocks: 1,
            template_size: 16,
            search_size: 16,
            ..Default::default()
        };
        let (store, bb) = build(cfg, 14);
        let b = bb.blocks[0].clone();
        let params = [b.qkv.weight, b.proj.weight, b.fc1.weight, b.fc2.bias.unwrap(), b.norm1.gamma];
        let rep = param_grad_check(&store, &params, &[rand_t(&[1, 6, 4], 15)], false, 1e-5, |g, v| {
            let st = bb.block_forward(g, TokenState { tokens: v[0], attention: None }, 1)?;
            let sq = g.tape.square(st.tokens);
            Ok(g.tape.sum(sq))
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn mask_examples() {
        assert_eq!(mask_from_scores(&[0.9, 0.1, 0.2, 0.8], 0.5).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert!(mask_from_scores(&[0.3; 64], 1.0).unwrap().iter().all(|&v| v == 0.0));
        let ties = mask_from_scores(&[0.5; 4], 0.5).unwrap();
        assert_eq!(ties, vec![0.0, 0.0, 1.0, 1.0]);
        assert!(mask_from_scores(&[0.1], 0.0).is_err());
        let v = mask_from_box(
            &BBox {
                x: 0.0,
                y: 0.0,
                w: 32.0,
                h: 32.0,
            },
            8,
            8.0,
        );
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(v[i * 8 + j], if i < 4 && j < 4 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn relevance_mask_needs_attention() {
        let (store, _) = build(small(), 16);
        let mut g = Graph::new(&store, false);
        let x = g.constant(Tensor::zeros(&[1, 80, 16]));
        let st = TokenState { tokens: x, attention: None };
        assert!(relevance_mask(&g, &st, &small(), 0.25, None).is_err());
    }

    #[test]
    fn scores_average_template_rows() {
        // N=1, H=1, T=3 with one template token.
        let att = Tensor::new(vec![1, 1, 3, 3], vec![0.2, 0.5, 0.3, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(relevance_scores(&att, 1).unwrap(), vec![vec![0.5, 0.3]]);
    }

    #[test]
    fn false_color_averages_band_groups() {
        let cube = Tensor::from_fn(&[6, 1, 2], |i| (i / 2) as f64);
        let fc = false_color(&cube).unwrap();
        assert_eq!(fc.data(), &[0.5, 0.5, 2.5, 2.5, 4.5, 4.5]);
        assert_eq!(band_groups(16), [0..5, 5..10, 10..16]);
    }

    #[test]
    fn upsample_repeats_cells() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let u = upsample_nearest(&x, 2);
        assert_eq!(u.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
