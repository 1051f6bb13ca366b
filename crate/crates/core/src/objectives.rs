//! Prediction head, box decoding and the training objectives.

use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Graph, Init, ParamGroup, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::unmixing::reconstruction_loss;

/// Clamp applied to classification probabilities inside the focal loss.
pub const FOCAL_CLAMP: f64 = 1e-6;

/// Axis-aligned box, top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Length of `[a, a+la] ∩ [b, b+lb]`. A contained interval contributes its own
/// length exactly, so identical boxes have IoU exactly 1.
fn overlap(a: f64, la: f64, b: f64, lb: f64) -> f64 {
    let (lo, hi) = (a.max(b), (a + la).min(b + lb));
    if lo == a && hi == a + la {
        la
    } else if lo == b && hi == b + lb {
        lb
    } else {
        (hi - lo).max(0.0)
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        if self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite() {
            Ok(())
        } else {
            Err(TensorError::invalid(op, format!("degenerate box {self:?}")))
        }
    }

    fn intersection(&self, o: &BBox) -> f64 {
        overlap(self.x, self.w, o.x, o.w) * overlap(self.y, self.h, o.y, o.h)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn giou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        let cw = (self.x + self.w).max(o.x + o.w) - self.x.min(o.x);
        let ch = (self.y + self.h).max(o.y + o.h) - self.y.min(o.y);
        let c = cw * ch;
        inter / union - (c - union) / c
    }

    /// Clips the box to a `width×height` frame, keeping at least 1 px extent.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let w = self.w.clamp(1.0, width);
        let h = self.h.clamp(1.0, height);
        BBox {
            x: self.x.clamp(0.0, width - w),
            y: self.y.clamp(0.0, height - h),
            w,
            h,
        }
    }
}

/// `1 − GIoU`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate("giou_loss")?;
    gt.validate("giou_loss")?;
    Ok(1.0 - pred.giou(gt))
}

/// Mean absolute difference of (cx, cy, w, h), each divided by `scale`.
pub fn l1_loss(pred: &BBox, gt: &BBox, scale: f64) -> Result<f64> {
    pred.validate("l1_loss")?;
    gt.validate("l1_loss")?;
    let (pc, gc) = (pred.center(), gt.center());
    let d = (pc.0 - gc.0).abs() + (pc.1 - gc.1).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs();
    Ok(d / (4.0 * scale))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
    pub unmix: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            iou: 2.0,
            l1: 5.0,
            unmix: 0.5,
            ce: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iou.is_finite()
            && self.l1.is_finite()
            && (0.0..=1.0).contains(&self.unmix)
            && self.ce > 0.0
            && self.ce < 1.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::invalid("loss_weights", format!("out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub channels: usize,
    pub layers: usize,
    /// Search-grid side.
    pub grid: usize,
    /// Search crop side in pixels.
    pub search_size: usize,
}

impl HeadConfig {
    pub fn new(in_dim: usize, grid: usize, search_size: usize) -> Self {
        HeadConfig {
            in_dim,
            channels: in_dim,
            layers: 5,
            grid,
            search_size,
        }
    }

    pub fn cell(&self) -> f64 {
        self.search_size as f64 / self.grid as f64
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub convs: Vec<(Conv2d, BatchNorm2d)>,
    pub out: Conv2d,
}

impl Branch {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &HeadConfig, out_ch: usize) -> Self {
        let g = ParamGroup::Head;
        let mut convs = Vec::with_capacity(cfg.layers);
        let mut c_in = cfg.in_dim;
        for i in 0..cfg.layers {
            let conv = Conv2d::new(
                store,
                init,
                &format!("{name}.conv{i}"),
                ConvSpec::new(c_in, cfg.channels, 3).padding(1),
                g,
            );
            let bn = BatchNorm2d::new(store, &format!("{name}.bn{i}"), cfg.channels, g);
            convs.push((conv, bn));
            c_in = cfg.channels;
        }
        let out = Conv2d::new(store, init, &format!("{name}.out"), ConvSpec::new(c_in, out_ch, 1), g);
        Branch { convs, out }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &self.convs {
            h = conv.forward(g, h)?;
            h = bn.forward(g, h)?;
            h = g.tape.relu(h);
        }
        let y = self.out.forward(g, h)?;
        Ok(g.tape.sigmoid(y))
    }
}

/// Classification, offset and size maps, each `N×c×g×g` in (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub cls: Var,
    pub offset: Var,
    pub size: Var,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub config: HeadConfig,
    pub cls: Branch,
    pub offset: Branch,
    pub size: Branch,
}

impl Head {
    pub fn new(store: &mut ParamStore, init: &mut Init, config: HeadConfig) -> Self {
        Head {
            cls: Branch::new(store, init, "head.cls", &config, 1),
            offset: Branch::new(store, init, "head.offset", &config, 2),
            size: Branch::new(store, init, "head.size", &config, 2),
            config,
        }
    }

    /// Search features `N×D×g×g` → head maps.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<HeadOutputs> {
        let s = g.tape.shape(x).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_dim || s[2] != c.grid || s[3] != c.grid {
            return Err(TensorError::mismatch("head_forward", &s, &[c.in_dim, c.grid, c.grid]));
        }
        Ok(HeadOutputs {
            cls: self.cls.forward(g, x)?,
            offset: self.offset.forward(g, x)?,
            size: self.size.forward(g, x)?,
        })
    }

    /// Per-sample maps as plain tensors.
    pub fn maps(&self, g: &Graph, out: &HeadOutputs) -> Result<Vec<HeadMaps>> {
        let n = g.value(out.cls).shape()[0];
        (0..n)
            .map(|i| {
                let pick = |v: Var, c: usize| -> Result<Tensor> {
                    g.value(v).narrow(0, i, 1)?.reshape(&[c, self.config.grid, self.config.grid])
                };
                Ok(HeadMaps {
                    cls: pick(out.cls, 1)?,
                    offset: pick(out.offset, 2)?,
                    size: pick(out.size, 2)?,
                })
            })
            .collect()
    }
}

/// Head maps for one sample: `1×g×g`, `2×g×g` (δx, δy), `2×g×g` (w, h).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub cls: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl HeadMaps {
    /// Box from the argmax cell (first maximum in row-major order), in search
    /// pixels for the given cell size and search side.
    pub fn decode_box(&self, cell: f64, search_size: f64) -> BBox {
        let g = self.cls.shape()[2];
        let mut best = 0;
        for (k, &v) in self.cls.data().iter().enumerate() {
            if v > self.cls.data()[best] {
                best = k;
            }
        }
        self.box_at(best / g, best % g, cell, search_size)
    }

    pub fn box_at(&self, i: usize, j: usize, cell: f64, search_size: f64) -> BBox {
        let gg = self.cls.shape()[1] * self.cls.shape()[2];
        let k = i * self.cls.shape()[2] + j;
        let (dx, dy) = (self.offset.data()[k], self.offset.data()[gg + k]);
        let (w, h) = (self.size.data()[k] * search_size, self.size.data()[gg + k] * search_size);
        BBox::from_center((j as f64 + dx) * cell, (i as f64 + dy) * cell, w, h)
    }
}

/// Grid cell containing the box center, clamped to the grid.
pub fn center_cell(gt: &BBox, grid: usize, cell: f64) -> (usize, usize) {
    let (cx, cy) = gt.center();
    let idx = |v: f64| ((v / cell).floor().max(0.0) as usize).min(grid - 1);
    (idx(cy), idx(cx))
}

pub fn gaussian_sigma(gt: &BBox, cell: f64) -> f64 {
    ((gt.w / cell + gt.h / cell) / 6.0).max(1.0)
}

pub fn gaussian_weight(dist2: f64, sigma: f64) -> f64 {
    (-dist2 / (2.0 * sigma * sigma)).exp()
}

/// `1×g×g` Gaussian heatmap peaked at the gt-center cell.
pub fn gaussian_target(gt: &BBox, grid: usize, cell: f64) -> Result<Tensor> {
    gt.validate("gaussian_target")?;
    let (ci, cj) = center_cell(gt, grid, cell);
    let sigma = gaussian_sigma(gt, cell);
    Ok(Tensor::from_fn(&[1, grid, grid], |k| {
        let (i, j) = ((k / grid) as f64, (k % grid) as f64);
        let d2 = (i - ci as f64).powi(2) + (j - cj as f64).powi(2);
        gaussian_weight(d2, sigma)
    }))
}

/// Penalty-reduced focal loss, normalized by the number of peak cells.
pub fn focal_loss(t: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if t.shape(pred) != target.shape() {
        return Err(TensorError::mismatch("focal_loss", t.shape(pred), target.shape()));
    }
    let pos = target.map(|y| if y == 1.0 { 1.0 } else { 0.0 });
    let num_pos = pos.sum();
    if num_pos == 0.0 {
        return Err(TensorError::invalid("focal_loss", "target has no peak cell"));
    }
    let neg_w = target.zip_map(&pos, |y, p| (1.0 - p) * (1.0 - y).powi(4))?;
    let p = t.clamp(pred, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let one_minus = t.neg(p);
    let one_minus = t.add_scalar(one_minus, 1.0);
    let log_p = t.log(p);
    let log_1mp = t.log(one_minus);
    let a = t.square(one_minus);
    let pos_term = t.mul(a, log_p)?;
    let pos_term = t.masked_mul(pos_term, &pos)?;
    let b = t.square(p);
    let neg_term = t.mul(b, log_1mp)?;
    let neg_term = t.masked_mul(neg_term, &neg_w)?;
    let both = t.add(pos_term, neg_term)?;
    let total = t.sum(both);
    Ok(t.mul_scalar(total, -1.0 / num_pos))
}

/// Box variables `(cx, cy, w, h)`, each `N×1`, in units of the search side.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

/// Regression outputs read at each sample's gt-center cell.
pub fn boxes_at_cells(t: &mut Tape, out: &HeadOutputs, cells: &[(usize, usize)], grid: usize) -> Result<BoxVars> {
    let n = cells.len();
    let onehot = Tensor::from_fn(&[n, 1, grid, grid], |k| {
        let (b, rem) = (k / (grid * grid), k % (grid * grid));
        let (i, j) = cells[b];
        if rem == i * grid + j {
            1.0
        } else {
            0.0
        }
    });
    let mut gather = |v: Var| -> Result<Var> {
        let m = t.masked_mul(v, &onehot)?;
        let s = t.sum_axes(m, &[2, 3])?;
        t.reshape(s, &[n, 2])
    };
    let off = gather(out.offset)?;
    let size = gather(out.size)?;
    let g = grid as f64;
    let col = Tensor::from_fn(&[n, 1], |b| cells[b].1 as f64);
    let row = Tensor::from_fn(&[n, 1], |b| cells[b].0 as f64);
    let dx = t.narrow(off, 1, 0, 1)?;
    let dy = t.narrow(off, 1, 1, 1)?;
    let colv = t.constant(col);
    let rowv = t.constant(row);
    let cx = t.add(dx, colv)?;
    let cx = t.mul_scalar(cx, 1.0 / g);
    let cy = t.add(dy, rowv)?;
    let cy = t.mul_scalar(cy, 1.0 / g);
    Ok(BoxVars {
        cx,
        cy,
        w: t.narrow(size, 1, 0, 1)?,
        h: t.narrow(size, 1, 1, 1)?,
    })
}

fn gt_columns(t: &mut Tape, gt: &[BBox], scale: f64) -> [Var; 4] {
    let n = gt.len();
    let col = |f: &dyn Fn(&BBox) -> f64| Tensor::from_fn(&[n, 1], |b| f(&gt[b]) / scale);
    [
        t.constant(col(&|b| b.center().0)),
        t.constant(col(&|b| b.center().1)),
        t.constant(col(&|b| b.w)),
        t.constant(col(&|b| b.h)),
    ]
}

/// Batch mean of `1 − GIoU` between predicted box variables and gt boxes
/// scaled by `scale`.
pub fn giou_loss_vars(t: &mut Tape, pred: &BoxVars, gt: &[BBox], scale: f64) -> Result<Var> {
    for b in gt {
        b.validate("giou_loss")?;
    }
    let [gcx, gcy, gw, gh] = gt_columns(t, gt, scale);
    let corners = |t: &mut Tape, cx: Var, cy: Var, w: Var, h: Var| -> Result<[Var; 4]> {
        let hw = t.mul_scalar(w, 0.5);
        let hh = t.mul_scalar(h, 0.5);
        Ok([t.sub(cx, hw)?, t.sub(cy, hh)?, t.add(cx, hw)?, t.add(cy, hh)?])
    };
    let [px1, py1, px2, py2] = corners(t, pred.cx, pred.cy, pred.w, pred.h)?;
    let [gx1, gy1, gx2, gy2] = corners(t, gcx, gcy, gw, gh)?;
    let ix1 = t.maximum(px1, gx1)?;
    let iy1 = t.maximum(py1, gy1)?;
    let ix2 = t.minimum(px2, gx2)?;
    let iy2 = t.minimum(py2, gy2)?;
    let iw = t.sub(ix2, ix1)?;
    let iw = t.relu(iw);
    let ih = t.sub(iy2, iy1)?;
    let ih = t.relu(ih);
    let inter = t.mul(iw, ih)?;
    let pa = t.mul(pred.w, pred.h)?;
    let ga = t.mul(gw, gh)?;
    let union = t.add(pa, ga)?;
    let union = t.sub(union, inter)?;
    let cx1 = t.minimum(px1, gx1)?;
    let cy1 = t.minimum(py1, gy1)?;
    let cx2 = t.maximum(px2, gx2)?;
    let cy2 = t.maximum(py2, gy2)?;
    let cw = t.sub(cx2, cx1)?;
    let ch = t.sub(cy2, cy1)?;
    let c = t.mul(cw, ch)?;
    let iou = t.div(inter, union)?;
    let gap = t.sub(c, union)?;
    let pen = t.div(gap, c)?;
    let giou = t.sub(iou, pen)?;
    let loss = t.neg(giou);
    let loss = t.add_scalar(loss, 1.0);
    Ok(t.mean(loss))
}

/// Mean absolute error over (cx, cy, w, h) and the batch.
pub fn l1_loss_vars(t: &mut Tape, pred: &BoxVars, gt: &[BBox], scale: f64) -> Result<Var> {
    let g = gt_columns(t, gt, scale);
    let p = t.concat(&[pred.cx, pred.cy, pred.w, pred.h], 1)?;
    let q = t.concat(&g, 1)?;
    let d = t.sub(p, q)?;
    let d = t.abs(d);
    Ok(t.mean(d))
}

#[derive(Clone, Copy, Debug)]
pub struct TrackingTerms {
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
    pub total: Var,
}

/// `cls + λ_IoU·iou + λ_L1·l1`.
pub fn combine_tracking(t: &mut Tape, cls: Var, iou: Var, l1: Var, w: &LossWeights) -> Result<Var> {
    let a = t.mul_scalar(iou, w.iou);
    let b = t.mul_scalar(l1, w.l1);
    let s = t.add(cls, a)?;
    t.add(s, b)
}

/// Focal + GIoU + L1 for a batch; regression is read at the gt-center cell.
pub fn tracking_loss(
    t: &mut Tape,
    out: &HeadOutputs,
    gt: &[BBox],
    cfg: &HeadConfig,
    w: &LossWeights,
) -> Result<TrackingTerms> {
    let n = t.shape(out.cls)[0];
    if gt.len() != n {
        return Err(TensorError::invalid(
            "tracking_loss",
            format!("{} boxes for batch of {n}", gt.len()),
        ));
    }
    let cell = cfg.cell();
    let mut target = Vec::with_capacity(n * cfg.grid * cfg.grid);
    for b in gt {
        target.extend_from_slice(gaussian_target(b, cfg.grid, cell)?.data());
    }
    let target = Tensor::new(vec![n, 1, cfg.grid, cfg.grid], target)?;
    let cls = focal_loss(t, out.cls, &target)?;
    let cells: Vec<_> = gt.iter().map(|b| center_cell(b, cfg.grid, cell)).collect();
    let pred = boxes_at_cells(t, out, &cells, cfg.grid)?;
    let scale = cfg.search_size as f64;
    let iou = giou_loss_vars(t, &pred, gt, scale)?;
    let l1 = l1_loss_vars(t, &pred, gt, scale)?;
    let total = combine_tracking(t, cls, iou, l1, w)?;
    Ok(TrackingTerms { cls, iou, l1, total })
}

/// Template term plus background/target-weighted search terms; `v` is the
/// relevance mask at search-pixel resolution (`N×1×H×W`, 0 = target).
pub fn target_unmixing_loss(
    t: &mut Tape,
    xhat_t: Var,
    x_t: Var,
    xhat_s: Var,
    x_s: Var,
    v: &Tensor,
    lambda_ce: f64,
) -> Result<Var> {
    if !(lambda_ce > 0.0 && lambda_ce < 1.0) {
        return Err(TensorError::invalid("target_unmixing_loss", format!("λ_ce {lambda_ce} outside (0, 1)")));
    }
    let target_mask = v.map(|x| 1.0 - x);
    let lt = reconstruction_loss(t, xhat_t, x_t, None)?;
    let l_tgt = reconstruction_loss(t, xhat_s, x_s, Some(&target_mask))?;
    let l_bg = reconstruction_loss(t, xhat_s, x_s, Some(v))?;
    let a = t.mul_scalar(l_tgt, 1.0 - lambda_ce);
    let b = t.mul_scalar(l_bg, lambda_ce);
    let s = t.add(lt, a)?;
    t.add(s, b)
}

/// `(1−λ_u)·track + λ_u·unmix`. At λ_u = 0 or 1 the other term is dropped
/// from the graph entirely.
pub fn total_loss(t: &mut Tape, track: Var, unmix: Option<Var>, lambda_u: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda_u) {
        return Err(TensorError::invalid("total_loss", format!("λ_u {lambda_u} outside [0, 1]")));
    }
    match unmix {
        None => Ok(track),
        Some(_) if lambda_u == 0.0 => Ok(track),
        Some(u) if lambda_u == 1.0 => Ok(u),
        Some(u) => {
            let a = t.mul_scalar(track, 1.0 - lambda_u);
            let b = t.mul_scalar(u, lambda_u);
            t.add(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn small_head(store: &mut ParamStore, seed: u64, dim: usize) -> Head {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Head::new(store, &mut Init { rng: &mut rng }, HeadConfig::new(dim, 8, 64))
    }

    #[test]
    fn head_shape_contract() {
        let mut store = ParamStore::new();
        let head = small_head(&mut store, 1, 64);
        let mut g = Graph::new(&store, false);
        let x = g.constant(rand_t(&[1, 64, 8, 8], 2, -1.0, 1.0));
        let o = head.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(o.cls), &[1, 1, 8, 8]);
        assert_eq!(g.tape.shape(o.offset), &[1, 2, 8, 8]);
        assert_eq!(g.tape.shape(o.size), &[1, 2, 8, 8]);
        let bad = g.constant(Tensor::zeros(&[1, 32, 8, 8]));
        assert!(head.forward(&mut g, bad).is_err());
    }

    #[test]
    fn zero_output_projection_gives_half() {
        let mut store = ParamStore::new();
        let head = small_head(&mut store, 3, 8);
        for b in [&head.cls, &head.offset, &head.size] {
            for id in [b.out.weight, b.out.bias.unwrap()] {
                let s = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&s)).unwrap();
            }
        }
        let mut g = Graph::new(&store, false);
        let x = g.constant(rand_t(&[2, 8, 8, 8], 4, -1.0, 1.0));
        let o = head.forward(&mut g, x).unwrap();
        for v in [o.cls, o.offset, o.size] {
            assert!(g.value(v).data().iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn head_branch_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = HeadConfig {
            in_dim: 2,
            channels: 2,
            layers: 2,
            grid: 4,
            search_size: 32,
        };
        let head = Head::new(&mut store, &mut Init { rng: &mut rng }, cfg);
        let b = &head.cls;
        let params = [b.convs[0].0.weight, b.convs[1].1.gamma, b.out.weight, b.out.bias.unwrap()];
        let rep = param_grad_check(&store, &params, &[rand_t(&[2, 2, 4, 4], 6, -1.0, 1.0)], true, 1e-5, |g, v| {
            let y = b.forward(g, v[0])?;
            let sq = g.tape.square(y);
            Ok(g.tape.sum(sq))
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    fn maps_with(cls: Tensor, dx: f64, dy: f64, w: f64, h: f64) -> HeadMaps {
        let g = cls.shape()[1];
        let gg = g * g;
        HeadMaps {
            cls,
            offset: Tensor::from_fn(&[2, g, g], |k| if k < gg { dx } else { dy }),
            size: Tensor::from_fn(&[2, g, g], |k| if k < gg { w } else { h }),
        }
    }

    #[test]
    fn decode_examples() {
        let cls = Tensor::from_fn(&[1, 8, 8], |k| if k == 2 * 8 + 3 { 0.9 } else { 0.1 });
        let b = maps_with(cls, 0.5, 0.5, 0.25, 0.25).decode_box(8.0, 64.0);
        assert_eq!(b, BBox::new(20.0, 12.0, 16.0, 16.0));

        let b = maps_with(Tensor::full(&[1, 8, 8], 0.3), 0.5, 0.5, 0.25, 0.25).decode_box(8.0, 64.0);
        assert_eq!(b.center(), (4.0, 4.0));

        let cls = Tensor::from_fn(&[1, 8, 8], |k| if k == 5 * 8 + 6 { 0.9 } else { 0.1 });
        let b = maps_with(cls, 0.0, 0.0, 0.5, 0.125).decode_box(8.0, 64.0);
        assert_eq!(b.center(), (48.0, 40.0));
    }

    #[test]
    fn gaussian_examples() {
        let gt = BBox::from_center(28.0, 36.0, 16.0, 16.0);
        let m = gaussian_target(&gt, 8, 8.0).unwrap();
        assert_eq!(m.data()[4 * 8 + 3], 1.0);
        assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 1);
        let sigma = 1.7;
        assert!((gaussian_weight((sigma * (2.0 * 2f64.ln()).sqrt()).powi(2), sigma) - 0.5).abs() < 1e-12);
        // σ chosen so cells two away sit at the half-width.
        let s = 2.0 / (2.0 * 2f64.ln()).sqrt();
        let gt = BBox::from_center(36.0, 36.0, 24.0 * s, 24.0 * s);
        let m = gaussian_target(&gt, 8, 8.0).unwrap();
        assert!((m.data()[4 * 8 + 6] - 0.5).abs() < 1e-12);
        for i in 0..8usize {
            for j in 0..8usize {
                let (mi, mj) = (8 - i, 8 - j);
                if mi < 8 && mj < 8 {
                    assert_eq!(m.data()[i * 8 + j], m.data()[mi * 8 + mj]);
                }
            }
        }
        assert!(gaussian_target(&BBox::new(0.0, 0.0, 0.0, 4.0), 8, 8.0).is_err());
    }

    fn focal_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
        let mut t = Tape::new();
        let p = t.constant(pred.clone());
        let l = focal_loss(&mut t, p, target)?;
        Ok(t.value(l).item())
    }

    #[test]
    fn focal_examples() {
        let target = Tensor::from_fn(&[1, 1, 8, 8], |k| if k == 10 { 1.0 } else { 0.3 });
        let pred = Tensor::from_fn(&[1, 1, 8, 8], |k| if k == 10 { 1.0 - 1e-6 } else { 1e-6 });
        assert!(focal_value(&pred, &target).unwrap() <= 1e-5);
        let one = Tensor::full(&[1, 1, 1, 1], 1.0);
        let v = focal_value(&Tensor::full(&[1, 1, 1, 1], 0.5), &one).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!(focal_value(&pred, &Tensor::zeros(&[1, 1, 8, 8])).is_err());
        for s in 0..20 {
            let p = rand_t(&[1, 1, 8, 8], s, 0.0, 1.0);
            assert!(focal_value(&p, &target).unwrap() >= 0.0);
        }
    }

    #[test]
    fn giou_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &a, 64.0).unwrap(), 0.0);
        let b = BBox::new(2.0, 0.0, 1.0, 1.0);
        assert!((giou_loss(&a, &b).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        let outer = BBox::new(0.0, 0.0, 2.0, 2.0);
        let inner = BBox::new(0.5, 0.0, 1.0, 2.0);
        assert!((giou_loss(&inner, &outer).unwrap() - 0.5).abs() < 1e-12);
        assert!(giou_loss(&BBox::new(0.0, 0.0, -1.0, 1.0), &a).is_err());
    }

    #[test]
    fn tape_giou_agrees_with_plain() {
        let mut t = Tape::new();
        let pairs = [
            (BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(2.0, 0.0, 1.0, 1.0)),
            (BBox::new(0.5, 0.0, 1.0, 2.0), BBox::new(0.0, 0.0, 2.0, 2.0)),
            (BBox::new(0.3, 0.1, 0.7, 0.4), BBox::new(0.2, 0.3, 0.5, 0.5)),
        ];
        for (p, q) in pairs {
            let c = p.center();
            let pv = BoxVars {
                cx: t.constant(Tensor::full(&[1, 1], c.0)),
                cy: t.constant(Tensor::full(&[1, 1], c.1)),
                w: t.constant(Tensor::full(&[1, 1], p.w)),
                h: t.constant(Tensor::full(&[1, 1], p.h)),
            };
            let l = giou_loss_vars(&mut t, &pv, &[q], 1.0).unwrap();
            assert!((t.value(l).item() - giou_loss(&p, &q).unwrap()).abs() < 1e-12);
            let l = l1_loss_vars(&mut t, &pv, &[q], 1.0).unwrap();
            assert!((t.value(l).item() - l1_loss(&p, &q, 1.0).unwrap()).abs() < 1e-12);
        }
    }

    fn perfect_outputs(t: &mut Tape, gt: &BBox, cfg: &HeadConfig) -> HeadOutputs {
        let (g, cell) = (cfg.grid, cfg.cell());
        let (i, j) = center_cell(gt, g, cell);
        let (cx, cy) = gt.center();
        let gg = g * g;
        let cls = Tensor::from_fn(&[1, 1, g, g], |k| if k == i * g + j { 1.0 - 1e-6 } else { 1e-6 });
        let off = Tensor::from_fn(&[1, 2, g, g], |k| if k < gg { cx / cell - j as f64 } else { cy / cell - i as f64 });
        let s = cfg.search_size as f64;
        let size = Tensor::from_fn(&[1, 2, g, g], |k| if k < gg { gt.w / s } else { gt.h / s });
        HeadOutputs {
            cls: t.constant(cls),
            offset: t.constant(off),
            size: t.constant(size),
        }
    }

    #[test]
    fn tracking_loss_examples() {
        let cfg = HeadConfig::new(8, 8, 64);
        let w = LossWeights::default();
        assert_eq!((w.iou, w.l1, w.unmix, w.ce), (2.0, 5.0, 0.5, 0.2));
        let gt = BBox::from_center(30.0, 22.0, 12.0, 10.0);
        let mut t = Tape::new();
        let out = perfect_outputs(&mut t, &gt, &cfg);
        let terms = tracking_loss(&mut t, &out, &[gt], &cfg, &w).unwrap();
        assert!(t.value(terms.total).item() <= 1e-4);

        // Replacing cls only changes the cls term.
        let zero_cls = HeadOutputs {
            cls: t.constant(Tensor::zeros(&[1, 1, 8, 8])),
            ..out
        };
        let t2 = tracking_loss(&mut t, &zero_cls, &[gt], &cfg, &w).unwrap();
        assert_eq!(t.value(t2.iou).item(), t.value(terms.iou).item());
        assert_eq!(t.value(t2.l1).item(), t.value(terms.l1).item());
        assert!(t.value(t2.cls).item() > t.value(terms.cls).item());
    }

    #[test]
    fn tracking_loss_gradient() {
        let cfg = HeadConfig::new(2, 4, 32);
        let gt = [BBox::from_center(13.0, 9.0, 10.0, 7.0), BBox::from_center(20.0, 25.0, 6.0, 9.0)];
        let w = LossWeights::default();
        let store = ParamStore::new();
        let inputs = [
            rand_t(&[2, 1, 4, 4], 7, -2.0, 2.0),
            rand_t(&[2, 2, 4, 4], 8, -2.0, 2.0),
            rand_t(&[2, 2, 4, 4], 9, -2.0, 2.0),
        ];
        let rep = param_grad_check(&store, &[], &inputs, false, 1e-5, |g, v| {
            let t = &mut g.tape;
            let out = HeadOutputs {
                cls: t.sigmoid(v[0]),
                offset: t.sigmoid(v[1]),
                size: t.sigmoid(v[2]),
            };
            Ok(tracking_loss(t, &out, &gt, &cfg, &w)?.total)
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    fn unmix_value(xt: &Tensor, xs: &Tensor, yt: &Tensor, ys: &Tensor, v: &Tensor, ce: f64) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(xt.clone());
        let b = t.constant(yt.clone());
        let c = t.constant(xs.clone());
        let d = t.constant(ys.clone());
        let l = target_unmixing_loss(&mut t, a, b, c, d, v, ce).unwrap();
        t.value(l).item()
    }

    fn rec(x: &Tensor, y: &Tensor) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let b = t.constant(y.clone());
        let l = reconstruction_loss(&mut t, a, b, None).unwrap();
        t.value(l).item()
    }

    #[test]
    fn target_unmixing_examples() {
        let xt = rand_t(&[1, 4, 4, 4], 10, 0.1, 1.0);
        let yt = rand_t(&[1, 4, 4, 4], 11, 0.1, 1.0);
        let xs = rand_t(&[1, 4, 8, 8], 12, 0.1, 1.0);
        let ys = rand_t(&[1, 4, 8, 8], 13, 0.1, 1.0);
        let (lt, ls) = (rec(&xt, &yt), rec(&xs, &ys));
        let ones = Tensor::ones(&[1, 1, 8, 8]);
        let zeros = Tensor::zeros(&[1, 1, 8, 8]);
        assert!((unmix_value(&xt, &xs, &yt, &ys, &ones, 0.2) - (lt + 0.2 * ls)).abs() < 1e-12);
        assert!((unmix_value(&xt, &xs, &yt, &ys, &zeros, 0.2) - (lt + 0.8 * ls)).abs() < 1e-12);
        assert!(unmix_value(&yt, &ys, &yt, &ys, &ones, 0.2).abs() < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.7));
        let b = t.constant(Tensor::scalar(0.3));
        assert_eq!(total_loss(&mut t, a, Some(b), 0.0).unwrap(), a);
        assert_eq!(total_loss(&mut t, a, Some(b), 1.0).unwrap(), b);
        let m = total_loss(&mut t, a, Some(b), 0.5).unwrap();
        assert!((t.value(m).item() - 0.5).abs() < 1e-15);
        assert!(total_loss(&mut t, a, Some(b), 1.5).is_err());
    }
}
