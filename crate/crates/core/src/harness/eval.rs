//! One-pass evaluation and its metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::nn::{Graph, ParamStore};
use crate::objectives::BBox;
use crate::synthdata::SequenceRecord;
use crate::tensor::Tensor;

use super::data::{stack, template_window, CropWindow};
use super::model::Model;
use super::{HarnessError, Result};

/// Center-error threshold of the distance precision, in pixels.
pub const DP_THRESHOLD: f64 = 20.0;
/// Success thresholds: τ = k/20 for k = 0..=20.
pub const SUCCESS_POINTS: usize = 21;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpeResult {
    pub dp20: f64,
    pub auc: f64,
    pub center_errors: Vec<f64>,
    pub ious: Vec<f64>,
}

pub fn success_threshold(k: usize) -> f64 {
    k as f64 / (SUCCESS_POINTS - 1) as f64
}

fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// DP@20 and the 21-point success AUC over paired per-frame boxes.
pub fn ope_metrics(pred: &[BBox], gt: &[BBox]) -> Result<OpeResult> {
    if pred.len() != gt.len() {
        return Err(HarnessError::Eval(format!(
            "{} predictions for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(HarnessError::Eval("no frames".into()));
    }
    let center_errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_error(p, g)).collect();
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    Ok(metrics_from(center_errors, ious))
}

fn metrics_from(center_errors: Vec<f64>, ious: Vec<f64>) -> OpeResult {
    let n = ious.len() as f64;
    let dp20 = center_errors.iter().filter(|&&e| e <= DP_THRESHOLD).count() as f64 / n;
    let hits: usize = (0..SUCCESS_POINTS)
        .map(|k| {
            let tau = success_threshold(k);
            ious.iter().filter(|&&v| v >= tau).count()
        })
        .sum();
    OpeResult {
        dp20,
        auc: hits as f64 / (n * SUCCESS_POINTS as f64),
        center_errors,
        ious,
    }
}

/// Pools per-frame errors from several sequences into one result.
pub fn pool(results: &[OpeResult]) -> Result<OpeResult> {
    let ce: Vec<f64> = results.iter().flat_map(|r| r.center_errors.iter().copied()).collect();
    let iou: Vec<f64> = results.iter().flat_map(|r| r.ious.iter().copied()).collect();
    if ce.is_empty() {
        return Err(HarnessError::Eval("no frames".into()));
    }
    Ok(metrics_from(ce, iou))
}

/// Something that follows a target through a sequence.
pub trait Tracker {
    fn init(&mut self, frame: &Tensor, b0: &BBox) -> Result<()>;
    /// Box for frame `t ≥ 1`, in frame pixels.
    fn track(&mut self, frame: &Tensor, t: usize) -> Result<BBox>;
}

/// Replays known boxes.
pub struct OracleTracker {
    pub boxes: Vec<BBox>,
}

impl Tracker for OracleTracker {
    fn init(&mut self, _: &Tensor, _: &BBox) -> Result<()> {
        Ok(())
    }

    fn track(&mut self, _: &Tensor, t: usize) -> Result<BBox> {
        Ok(self.boxes[t])
    }
}

/// Uniformly random boxes inside the frame.
pub struct RandomTracker {
    pub rng: ChaCha8Rng,
}

impl Tracker for RandomTracker {
    fn init(&mut self, _: &Tensor, _: &BBox) -> Result<()> {
        Ok(())
    }

    fn track(&mut self, frame: &Tensor, _: usize) -> Result<BBox> {
        let (h, w) = (frame.shape()[1] as f64, frame.shape()[2] as f64);
        let bw = self.rng.random_range(1.0..w / 2.0);
        let bh = self.rng.random_range(1.0..h / 2.0);
        Ok(BBox::new(
            self.rng.random_range(0.0..w - bw),
            self.rng.random_range(0.0..h - bh),
            bw,
            bh,
        ))
    }
}

/// The trained network: fixed frame-0 template, search crop around the
/// previous prediction.
pub struct ModelTracker<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub template_factor: f64,
    pub search_factor: f64,
    template: Option<Tensor>,
    last: BBox,
}

impl<'a> ModelTracker<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore, template_factor: f64, search_factor: f64) -> Self {
        ModelTracker {
            model,
            store,
            template_factor,
            search_factor,
            template: None,
            last: BBox::new(0.0, 0.0, 1.0, 1.0),
        }
    }
}

impl Tracker for ModelTracker<'_> {
    fn init(&mut self, frame: &Tensor, b0: &BBox) -> Result<()> {
        let tw = template_window(b0, self.template_factor, self.model.config.template_size);
        self.template = Some(tw.apply(frame));
        self.last = *b0;
        Ok(())
    }

    fn track(&mut self, frame: &Tensor, _: usize) -> Result<BBox> {
        let template = self
            .template
            .as_ref()
            .ok_or_else(|| HarnessError::Eval("track before init".into()))?;
        let cfg = &self.model.config;
        let (cx, cy) = self.last.center();
        let sw = CropWindow::around(cx, cy, self.last.w, self.last.h, self.search_factor, cfg.search_size);
        let search = sw.apply(frame);
        let mut g = Graph::new(self.store, false);
        let xt = g.constant(stack(&[template]));
        let xs = g.constant(stack(&[&search]));
        let fwd = self.model.forward(&mut g, xt, xs)?;
        let maps = self.model.head.maps(&g, &fwd.head)?;
        let hc = &self.model.head.config;
        let in_crop = maps[0].decode_box(hc.cell(), hc.search_size as f64);
        let (h, w) = (frame.shape()[1] as f64, frame.shape()[2] as f64);
        let b = sw.to_frame(&in_crop).clip(w, h);
        self.last = b;
        Ok(b)
    }
}

/// Runs `tracker` over frames 1.. of one sequence, initialized from the
/// frame-0 box. Frame 0 is not scored.
pub fn track_sequence(tracker: &mut dyn Tracker, seq: &SequenceRecord) -> Result<Vec<BBox>> {
    if seq.len() < 2 {
        return Err(HarnessError::Eval("sequence needs at least two frames".into()));
    }
    tracker.init(&seq.frames[0], &seq.boxes[0])?;
    (1..seq.len()).map(|t| tracker.track(&seq.frames[t], t)).collect()
}

/// Per-sequence and pooled one-pass results.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub overall: OpeResult,
    pub sequences: Vec<OpeResult>,
}

impl Evaluation {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            dp20: f64,
            auc: f64,
            frames: usize,
            sequences: Vec<SeqSummary>,
            overall: &'a OpeResult,
        }
        #[derive(Serialize)]
        struct SeqSummary {
            dp20: f64,
            auc: f64,
            frames: usize,
        }
        let s = Summary {
            dp20: self.overall.dp20,
            auc: self.overall.auc,
            frames: self.overall.ious.len(),
            sequences: self
                .sequences
                .iter()
                .map(|r| SeqSummary {
                    dp20: r.dp20,
                    auc: r.auc,
                    frames: r.ious.len(),
                })
                .collect(),
            overall: &self.overall,
        };
        serde_json::to_string_pretty(&s).expect("metrics serialize")
    }

    /// One row per scored frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,frame,center_error,iou\n");
        for (i, r) in self.sequences.iter().enumerate() {
            for (k, (e, v)) in r.center_errors.iter().zip(&r.ious).enumerate() {
                out.push_str(&format!("{i},{},{e},{v}\n", k + 1));
            }
        }
        out
    }
}

/// Evaluates one tracker per sequence, built by `make` for sequence `i`.
pub fn evaluate_with<'t>(
    seqs: &[SequenceRecord],
    mut make: impl FnMut(usize, &SequenceRecord) -> Box<dyn Tracker + 't>,
) -> Result<Evaluation> {
    let mut per = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let mut tr = make(i, s);
        let pred = track_sequence(tr.as_mut(), s)?;
        per.push(ope_metrics(&pred, &s.boxes[1..])?);
    }
    Ok(Evaluation {
        overall: pool(&per)?,
        sequences: per,
    })
}

/// One-pass evaluation of a trained model.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    template_factor: f64,
    search_factor: f64,
    seqs: &[SequenceRecord],
) -> Result<Evaluation> {
    evaluate_with(seqs, |_, _| {
        Box::new(ModelTracker::new(model, store, template_factor, search_factor))
    })
}
