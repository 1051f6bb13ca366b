//! Mini-batch training with the joint tracking + unmixing objective.

use crate::backbone::{relevance_mask, upsample_nearest};
use crate::nn::{Graph, ParamGroup, ParamStore};
use crate::objectives::{target_unmixing_loss, total_loss, tracking_loss, BBox, TrackingTerms};
use crate::optim::{AdamW, AdamWConfig};
use crate::synthdata::{sub_seed, SequenceRecord};
use crate::tensor::Var;
use crate::unmixing::new_rng;

use super::config::{Config, TrainMode};
use super::data::{sample_pair, stack, SamplingParams, TrackSample};
use super::model::{ForwardPass, Model};
use super::{HarnessError, Result};

const STREAM_PAIRS: u64 = 100;

/// Loss components of one step, as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    /// Target-oriented unmixing loss; recorded even when λ_u = 0.
    pub unmix: Option<f64>,
    /// Whether the mask came from the ground-truth box.
    pub warmup: bool,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,lr,total,cls,iou,l1,unmix,warmup";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.total,
            self.cls,
            self.iou,
            self.l1,
            self.unmix.map(|u| u.to_string()).unwrap_or_default(),
            self.warmup
        )
    }

    fn breakdown(&self) -> String {
        format!(
            "total={} cls={} iou={} l1={} unmix={:?}",
            self.total, self.cls, self.iou, self.l1, self.unmix
        )
    }
}

pub fn log_csv(log: &[StepRecord]) -> String {
    let mut s = String::from(StepRecord::CSV_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// A trained model with its parameters and step log.
pub struct Trained {
    pub config: Config,
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<StepRecord>,
}

/// Band count shared by all sequences.
pub fn data_bands(data: &[SequenceRecord]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| HarnessError::Config("no training sequences".into()))?;
    if let Some(s) = data.iter().find(|s| s.bands != first.bands) {
        return Err(HarnessError::Config(format!(
            "mixed band counts {} and {}",
            first.bands, s.bands
        )));
    }
    if data.iter().any(|s| s.is_empty()) {
        return Err(HarnessError::Config("empty sequence".into()));
    }
    Ok(first.bands)
}

/// Resolves `bands = 0` from the data and checks an explicit value against it.
pub fn resolve_bands(config: &Config, data: &[SequenceRecord]) -> Result<Config> {
    let bands = data_bands(data)?;
    let mut c = config.clone();
    if c.model.bands == 0 {
        c.model.bands = bands;
    } else if c.model.bands != bands {
        return Err(HarnessError::Config(format!(
            "config has {} bands, data has {bands}",
            c.model.bands
        )));
    }
    c.validate()?;
    Ok(c)
}

pub fn build(config: &Config) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &config.model, config.seed)?;
    Ok((model, store))
}

pub fn sampling_params(config: &Config) -> SamplingParams {
    SamplingParams {
        template_size: config.model.template_size,
        search_size: config.model.search_size,
        template_factor: config.train.template_factor,
        search_factor: config.train.search_factor,
        center_jitter: config.train.center_jitter,
        scale_jitter: config.train.scale_jitter,
    }
}

/// Loss variables of one batch.
pub struct BatchLoss {
    pub forward: ForwardPass,
    pub tracking: TrackingTerms,
    pub unmix: Option<Var>,
    pub total: Var,
}

/// Forward pass and full loss stack for one batch. With `warmup` the
/// relevance mask comes from the ground-truth boxes.
pub fn batch_loss(g: &mut Graph, model: &Model, config: &Config, batch: &[TrackSample], warmup: bool) -> Result<BatchLoss> {
    let templates: Vec<_> = batch.iter().map(|s| &s.template).collect();
    let searches: Vec<_> = batch.iter().map(|s| &s.search).collect();
    let gt: Vec<BBox> = batch.iter().map(|s| s.gt).collect();
    let xt = g.constant(stack(&templates));
    let xs = g.constant(stack(&searches));
    let fwd = model.forward(g, xt, xs)?;
    let w = &config.train.weights;
    let tracking = tracking_loss(&mut g.tape, &fwd.head, &gt, &model.head.config, w)?;
    let unmix = match (&model.unmix, fwd.abundances) {
        (Some(net), Some((at, as_))) => {
            let xhat_t = net.decode(g, at)?;
            let xhat_s = net.decode(g, as_)?;
            let bc = &model.backbone.config;
            let v = relevance_mask(g, &fwd.state, bc, model.config.rho, warmup.then_some(gt.as_slice()))?;
            let v = upsample_nearest(&v, bc.patch);
            Some(target_unmixing_loss(&mut g.tape, xhat_t, xt, xhat_s, xs, &v, w.ce)?)
        }
        _ => None,
    };
    let total = total_loss(&mut g.tape, tracking.total, unmix, w.unmix)?;
    Ok(BatchLoss {
        forward: fwd,
        tracking,
        unmix,
        total,
    })
}

/// Trains from scratch. `on_step` sees every step record as it is produced.
pub fn train(config: &Config, data: &[SequenceRecord], mut on_step: impl FnMut(&StepRecord)) -> Result<Trained> {
    let config = resolve_bands(config, data)?;
    let (model, mut store) = build(&config)?;
    let tc = &config.train;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..Default::default()
        },
        &store,
    );
    let frozen: &[ParamGroup] = match tc.mode {
        TrainMode::Joint => &[],
        TrainMode::Frozen => &[ParamGroup::Backbone],
    };
    let params = sampling_params(&config);
    let mut rng = new_rng(sub_seed(config.seed, STREAM_PAIRS));
    let mut log = Vec::with_capacity(tc.total_steps());
    for step in 0..tc.total_steps() {
        let batch: Vec<TrackSample> = (0..tc.batch_size).map(|_| sample_pair(&mut rng, data, &params)).collect();
        let warmup = step < tc.warmup_steps;
        let lr = tc.lr_at(step);
        let mut g = Graph::new(&store, true).with_frozen(frozen);
        let loss = batch_loss(&mut g, &model, &config, &batch, warmup)?;
        let value = |v: Var| g.value(v).item();
        let rec = StepRecord {
            step,
            lr,
            total: value(loss.total),
            cls: value(loss.tracking.cls),
            iou: value(loss.tracking.iou),
            l1: value(loss.tracking.l1),
            unmix: loss.unmix.map(value),
            warmup,
        };
        let finite = [rec.total, rec.cls, rec.iou, rec.l1, rec.unmix.unwrap_or(0.0)]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(HarnessError::NonFinite {
                step,
                breakdown: rec.breakdown(),
            });
        }
        let grads = g.finish(loss.total)?;
        for (id, t) in &grads.buffer_updates {
            if !frozen.contains(&store.entry(*id).group) {
                store.set(*id, t.clone())?;
            }
        }
        opt.step(&mut store, &grads, lr);
        on_step(&rec);
        log.push(rec);
    }
    Ok(Trained {
        config,
        model,
        store,
        log,
    })
}
