//! The assembled tracker: unmixer → AMD → material embedding → backbone with
//! prompt injection → head.

use crate::backbone::{false_color, Backbone, TokenState};
use crate::nn::{tokens_to_grid, Graph, Init, ParamStore};
use crate::objectives::{Head, HeadOutputs};
use crate::prompts::{inject, BranchGrids, MaterialPatchEmbed, PromptLayer};
use crate::synthdata::sub_seed;
use crate::tensor::{Tensor, Var};
use crate::unmixing::{new_rng, Amd, UnmixNet};
use crate::wavelets::ChannelBranches;

use super::config::{BackboneInput, ModelConfig};
use super::Result;

/// Init streams; each component draws from its own so toggling one module
/// leaves the others' initial values unchanged.
const STREAM_BACKBONE: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_UNMIX: u64 = 3;
const STREAM_AMD: u64 = 4;
const STREAM_EMBED: u64 = 5;
const STREAM_PROMPT: u64 = 6;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub unmix: Option<UnmixNet>,
    pub amd: Option<Amd>,
    pub embed: Option<MaterialPatchEmbed>,
    pub prompt_layers: Vec<PromptLayer>,
    pub backbone: Backbone,
    pub head: Head,
}

/// Values kept from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub head: HeadOutputs,
    pub state: TokenState,
    /// Abundances of the template and search crops when MRDM is on.
    pub abundances: Option<(Var, Var)>,
}

impl Model {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let with = |stream: u64| new_rng(sub_seed(seed, stream));
        let mut rng = with(STREAM_BACKBONE);
        let backbone = Backbone::new(store, &mut Init { rng: &mut rng }, config.backbone())?;
        let mut rng = with(STREAM_HEAD);
        let head = Head::new(store, &mut Init { rng: &mut rng }, config.head());
        let unmix = config.mrdm.then(|| {
            let mut rng = with(STREAM_UNMIX);
            UnmixNet::new(store, &mut Init { rng: &mut rng }, "unmix", config.unmix())
        });
        let amd = if config.needs_branches() {
            let mut rng = with(STREAM_AMD);
            Some(Amd::new(
                store,
                &mut Init { rng: &mut rng },
                "amd",
                config.amd_inputs(),
                config.amd,
            )?)
        } else {
            None
        };
        let pcfg = config.prompt();
        let (embed, prompt_layers) = if config.prompts {
            let mut rng = with(STREAM_EMBED);
            let embed = MaterialPatchEmbed::new(store, &mut Init { rng: &mut rng }, &pcfg);
            let mut rng = with(STREAM_PROMPT);
            let layers = config
                .injection_layers
                .iter()
                .map(|&l| PromptLayer::new(store, &mut Init { rng: &mut rng }, l, &pcfg))
                .collect();
            (Some(embed), layers)
        } else {
            (None, Vec::new())
        };
        Ok(Model {
            config: config.clone(),
            unmix,
            amd,
            embed,
            prompt_layers,
            backbone,
            head,
        })
    }

    fn branches(&self, g: &mut Graph, cube: Var) -> Result<(Option<Var>, Option<ChannelBranches>)> {
        let abundances = match &self.unmix {
            Some(u) => Some(u.encode(g, cube)?),
            None => None,
        };
        let branches = match &self.amd {
            Some(amd) => Some(amd.forward(g, abundances.unwrap_or(cube))?),
            None => None,
        };
        Ok((abundances, branches))
    }

    fn backbone_image(&self, g: &mut Graph, cube: Var, branches: Option<&ChannelBranches>) -> Result<Var> {
        match self.config.backbone_input {
            BackboneInput::FalseColor => {
                let fc = false_color_batch(g.value(cube))?;
                Ok(g.constant(fc))
            }
            BackboneInput::Branches => {
                let b = branches.expect("branch input requires AMD");
                Ok(g.tape.concat(&[b.low, b.high], 1)?)
            }
        }
    }

    /// Template `N×n×Tz×Tz` and search `N×n×S×S` cubes → head outputs.
    pub fn forward(&self, g: &mut Graph, template: Var, search: Var) -> Result<ForwardPass> {
        let (a_t, b_t) = self.branches(g, template)?;
        let (a_s, b_s) = self.branches(g, search)?;
        let img_t = self.backbone_image(g, template, b_t.as_ref())?;
        let img_s = self.backbone_image(g, search, b_s.as_ref())?;
        let mut state = self.backbone.embed_pair(g, img_t, img_s)?;

        let mut prompts: Option<(BranchGrids, BranchGrids)> = match (&self.embed, &b_t, &b_s) {
            (Some(e), Some(bt), Some(bs)) => Some((e.forward(g, bt.low, bt.high)?, e.forward(g, bs.low, bs.high)?)),
            _ => None,
        };
        let bc = &self.backbone.config;
        let (gt, gs) = (bc.template_grid(), bc.search_grid());
        let mut next_prompt = 0;
        for l in 1..=bc.blocks {
            if let (Some(pl), Some((pt, ps))) = (self.prompt_layers.get(next_prompt), prompts.as_mut()) {
                if pl.layer == l {
                    let (zt, zs) = self.backbone.split(g, state.tokens)?;
                    let ft = tokens_to_grid(&mut g.tape, zt, gt, gt)?;
                    let fs = tokens_to_grid(&mut g.tape, zs, gs, gs)?;
                    let fused = pl.forward(g, pt, ps, ft, fs)?;
                    state.tokens = inject(&mut g.tape, state.tokens, fused)?;
                    next_prompt += 1;
                }
            }
            state = self.backbone.block_forward(g, state, l)?;
        }
        let state = self.backbone.finish(g, state)?;
        let (_, zs) = self.backbone.split(g, state.tokens)?;
        let grid = tokens_to_grid(&mut g.tape, zs, gs, gs)?;
        let head = self.head.forward(g, grid)?;
        Ok(ForwardPass {
            head,
            state,
            abundances: a_t.zip(a_s),
        })
    }
}

/// `N×n×h×w` → `N×3×h×w` band-group means.
pub fn false_color_batch(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let per = s[1] * s[2] * s[3];
    let mut out = Vec::with_capacity(s[0] * 3 * s[2] * s[3]);
    for i in 0..s[0] {
        let cube = Tensor::from_parts(vec![s[1], s[2], s[3]], x.data()[i * per..(i + 1) * per].to_vec());
        out.extend_from_slice(false_color(&cube)?.data());
    }
    Ok(Tensor::new(vec![s[0], 3, s[2], s[3]], out)?)
}
