//! Crop-and-resize and training-pair sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::objectives::BBox;
use crate::synthdata::SequenceRecord;
use crate::tensor::Tensor;

/// A square source window mapped onto an `out×out` crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    /// Window of side `factor·√(w·h)` centered at `(cx, cy)`.
    pub fn around(cx: f64, cy: f64, w: f64, h: f64, factor: f64, out: usize) -> Self {
        let side = (factor * (w * h).sqrt()).max(1.0);
        CropWindow {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            out,
        }
    }

    pub fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    /// Frame coordinates → crop coordinates.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox::new((b.x - self.x0) * s, (b.y - self.y0) * s, b.w * s, b.h * s)
    }

    /// Crop coordinates → frame coordinates.
    pub fn to_frame(&self, b: &BBox) -> BBox {
        let s = 1.0 / self.scale();
        BBox::new(self.x0 + b.x * s, self.y0 + b.y * s, b.w * s, b.h * s)
    }

    /// Nearest-neighbour resample of an `n×H×W` cube; samples outside the
    /// frame take the nearest edge pixel.
    pub fn apply(&self, cube: &Tensor) -> Tensor {
        let s = cube.shape();
        let (n, h, w) = (s[0], s[1], s[2]);
        let step = self.side / self.out as f64;
        let idx = |origin: f64, k: usize, len: usize| -> usize {
            let v = (origin + (k as f64 + 0.5) * step).floor();
            v.clamp(0.0, (len - 1) as f64) as usize
        };
        let xs: Vec<usize> = (0..self.out).map(|j| idx(self.x0, j, w)).collect();
        let ys: Vec<usize> = (0..self.out).map(|i| idx(self.y0, i, h)).collect();
        let src = cube.data();
        let mut out = Vec::with_capacity(n * self.out * self.out);
        for c in 0..n {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for &y in &ys {
                out.extend(xs.iter().map(|&x| plane[y * w + x]));
            }
        }
        Tensor::from_parts(vec![n, self.out, self.out], out)
    }
}

/// Template window around a box.
pub fn template_window(b: &BBox, factor: f64, out: usize) -> CropWindow {
    let (cx, cy) = b.center();
    CropWindow::around(cx, cy, b.w, b.h, factor, out)
}

/// One template/search pair with the ground-truth box in search-crop pixels.
#[derive(Clone, Debug)]
pub struct TrackSample {
    pub template: Tensor,
    pub search: Tensor,
    pub gt: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingParams {
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub center_jitter: f64,
    pub scale_jitter: f64,
}

/// Template from frame 0 around `b_0`; search from a uniformly drawn frame
/// around its jittered ground-truth center.
pub fn sample_pair(rng: &mut ChaCha8Rng, seqs: &[SequenceRecord], p: &SamplingParams) -> TrackSample {
    let seq = &seqs[rng.random_range(0..seqs.len())];
    let t = rng.random_range(0..seq.len());
    let b0 = seq.boxes[0];
    let tw = template_window(&b0, p.template_factor, p.template_size);
    let b = seq.boxes[t];
    let size = (b.w * b.h).sqrt();
    let (cx, cy) = b.center();
    let jx = rng.random_range(-0.5..0.5) * p.center_jitter * size;
    let jy = rng.random_range(-0.5..0.5) * p.center_jitter * size;
    let js = (rng.random_range(-1.0..1.0) * p.scale_jitter).exp();
    let sw = CropWindow::around(cx + jx, cy + jy, b.w * js, b.h * js, p.search_factor, p.search_size);
    TrackSample {
        template: tw.apply(&seq.frames[0]),
        search: sw.apply(&seq.frames[t]),
        gt: sw.to_crop(&b),
    }
}

/// Stacks `n×h×w` tensors into `N×n×h×w`.
pub fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[n, h, w], |i| i as f64)
    }

    #[test]
    fn identity_window_copies_the_frame() {
        let cube = ramp(2, 8, 8);
        let w = CropWindow {
            x0: 0.0,
            y0: 0.0,
            side: 8.0,
            out: 8,
        };
        assert!(w.apply(&cube).bit_eq(&cube));
    }

    #[test]
    fn nearest_neighbour_preserves_spectra_and_clamps_edges() {
        let cube = ramp(3, 4, 4);
        let w = CropWindow {
            x0: -4.0,
            y0: -4.0,
            side: 8.0,
            out: 4,
        };
        let c = w.apply(&cube);
        // Top-left quadrant of the crop lies outside the frame: clamped to (0, 0).
        for ch in 0..3 {
            assert_eq!(c.data()[ch * 16], cube.data()[ch * 16]);
        }
        // Every crop spectrum equals some frame spectrum exactly.
        for i in 0..16 {
            let spec: Vec<f64> = (0..3).map(|ch| c.data()[ch * 16 + i]).collect();
            assert!((0..16).any(|j| (0..3).all(|ch| cube.data()[ch * 16 + j] == spec[ch])));
        }
    }

    #[test]
    fn box_mapping_round_trips() {
        let w = CropWindow::around(30.0, 20.0, 10.0, 12.0, 4.0, 64);
        let b = BBox::new(25.0, 14.0, 10.0, 12.0);
        let back = w.to_frame(&w.to_crop(&b));
        for (a, e) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
            assert!((a - e).abs() < 1e-12);
        }
        let c = w.to_crop(&b);
        assert!((c.center().0 - 32.0).abs() < 1e-9 && (c.center().1 - 32.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_pairs_have_expected_shapes() {
        let spec = crate::synthdata::SceneSpec {
            frames: 3,
            ..crate::synthdata::SceneSpec::desk()
        };
        let seqs = vec![crate::synthdata::gen_sequence(&spec).unwrap()];
        let p = SamplingParams {
            template_size: 32,
            search_size: 64,
            template_factor: 2.0,
            search_factor: 4.0,
            center_jitter: 1.5,
            scale_jitter: 0.15,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = sample_pair(&mut rng, &seqs, &p);
            assert_eq!(s.template.shape(), &[16, 32, 32]);
            assert_eq!(s.search.shape(), &[16, 64, 64]);
            let (cx, cy) = s.gt.center();
            assert!((0.0..64.0).contains(&cx) && (0.0..64.0).contains(&cy));
        }
    }
}
