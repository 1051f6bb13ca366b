//! Synthetic hyperspectral sequences with full ground truth.
//!
//! Every frame is `X = M·A + E`. Endmembers are smooth Gaussian-bump spectra;
//! background abundances are a softmax over low-pass-filtered random fields
//! that excludes the last (reserved) endmember; the moving target box mixes
//! the reserved endmember into its pixels. All randomness is drawn from
//! sub-seeds of the scene seed, one stream per purpose and one per frame.

mod hsvc;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{band_groups, false_color};
use crate::kv::{KvError, KvMap};
use crate::objectives::BBox;
use crate::tensor::{Tape, Tensor};
use crate::unmixing::{mix, spectral_angle};

pub use hsvc::{
    decode_hsvc, encode_hsvc, read_annotations, read_hsvc, write_annotations, write_hsvc, HsvcError, HSVC_MAGIC,
    HSVC_VERSION,
};

/// Minimum pairwise spectral angle between generated endmembers.
pub const MIN_ENDMEMBER_SAD: f64 = 0.2;
pub const MAX_RETRIES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("could not separate {r} endmembers over {n} bands after {retries} retries (best min SAD {best:.4} rad)")]
    Separation { r: usize, n: usize, retries: usize, best: f64 },
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Format(#[from] HsvcError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// SplitMix64 finalizer over (seed, stream).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub endmembers: usize,
    pub target_min: f64,
    pub target_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub jitter: f64,
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
    pub camouflage: bool,
    /// Weight of the reserved endmember inside the target box.
    pub target_weight: f64,
    /// Box-blur radius of the background fields.
    pub smoothing: usize,
    /// Logit scale of the background fields.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            bands: 16,
            height: 128,
            width: 128,
            frames: 24,
            endmembers: 6,
            target_min: 10.0,
            target_max: 16.0,
            speed_min: 0.5,
            speed_max: 1.5,
            jitter: 0.3,
            snr_db: Some(30.0),
            camouflage: false,
            target_weight: 0.9,
            smoothing: 6,
            contrast: 3.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// 64×64 frames with 8–12 px targets.
    pub fn desk() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            target_min: 8.0,
            target_max: 12.0,
            smoothing: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.endmembers < 2 || self.bands < self.endmembers {
            return bad(format!("need 2 ≤ r ≤ n, got r={} n={}", self.endmembers, self.bands));
        }
        if self.bands < 3 {
            return bad("need at least 3 bands for false color".into());
        }
        if !(self.target_min > 0.0 && self.target_max >= self.target_min) {
            return bad(format!("bad target size range {}..{}", self.target_min, self.target_max));
        }
        if self.target_max + 2.0 > self.height.min(self.width) as f64 {
            return bad(format!(
                "target up to {} px does not fit a {}×{} frame",
                self.target_max, self.height, self.width
            ));
        }
        if !(0.8..=1.0).contains(&self.target_weight) {
            return bad(format!("target weight {} outside [0.8, 1]", self.target_weight));
        }
        if self.speed_min < 0.0 || self.speed_max < self.speed_min || self.jitter < 0.0 {
            return bad("bad motion parameters".into());
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return bad(format!("snr {s} not finite; omit it for noiseless"));
            }
        }
        Ok(())
    }

    /// Reads keys from a config map, starting from the desk profile.
    pub fn from_kv(m: &mut KvMap) -> Result<Self> {
        let mut s = SceneSpec::desk();
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = m.take(stringify!($f))? { s.$f = v; }
            )*};
        }
        set!(
            bands, height, width, frames, endmembers, target_min, target_max, speed_min, speed_max, jitter,
            camouflage, target_weight, smoothing, contrast, seed
        );
        if let Some(v) = m.take::<String>("snr_db")? {
            s.snr_db = if v == "inf" {
                None
            } else {
                Some(v.parse().map_err(|e: std::num::ParseFloatError| KvError::Value {
                    key: "snr_db".into(),
                    value: v.clone(),
                    msg: e.to_string(),
                })?)
            };
        }
        s.validate()?;
        Ok(s)
    }
}

/// One generated sequence and everything that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// `n×r`.
    pub endmembers: Tensor,
    /// `n×h×w` each.
    pub frames: Vec<Tensor>,
    /// `r×h×w` each.
    pub abundances: Vec<Tensor>,
    pub boxes: Vec<BBox>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn endmember_count(&self) -> usize {
        self.endmembers.shape()[1]
    }

    /// Every value rounded through f32, as stored on disk.
    pub fn quantized(&self) -> Self {
        let q = |t: &Tensor| t.map(|v| v as f32 as f64);
        let qb = |v: f64| v as f32 as f64;
        SequenceRecord {
            bands: self.bands,
            height: self.height,
            width: self.width,
            endmembers: q(&self.endmembers),
            frames: self.frames.iter().map(q).collect(),
            abundances: self.abundances.iter().map(q).collect(),
            boxes: self
                .boxes
                .iter()
                .map(|b| BBox::new(qb(b.x), qb(b.y), qb(b.w), qb(b.h)))
                .collect(),
        }
    }
}

fn bump_spectrum(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let bumps = rng.random_range(1..=3);
    let mut s = vec![0.0; n];
    for _ in 0..bumps {
        let c = rng.random_range(0.0..(n - 1) as f64);
        let w = rng.random_range(n as f64 / 10.0..n as f64 / 3.0).max(0.5);
        let a = rng.random_range(0.3..1.0);
        for (b, v) in s.iter_mut().enumerate() {
            *v += a * (-((b as f64 - c).powi(2)) / (2.0 * w * w)).exp();
        }
    }
    let peak = s.iter().cloned().fold(0.0, f64::max);
    s.iter().map(|v| v / peak).collect()
}

fn columns(m: &Tensor) -> Vec<Vec<f64>> {
    let (n, r) = (m.shape()[0], m.shape()[1]);
    (0..r).map(|k| (0..n).map(|b| m.data()[b * r + k]).collect()).collect()
}

fn from_columns(cols: &[Vec<f64>]) -> Tensor {
    let (n, r) = (cols[0].len(), cols.len());
    Tensor::from_fn(&[n, r], |i| cols[i % r][i / r])
}

fn min_pairwise_sad(cols: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            best = best.min(spectral_angle(&cols[i], &cols[j]));
        }
    }
    best
}

/// `n×r` endmember matrix of peak-normalized Gaussian-bump spectra with all
/// pairwise spectral angles ≥ 0.2 rad.
pub fn gen_endmembers(r: usize, n: usize, seed: u64) -> Result<Tensor> {
    gen_endmembers_separated(r, n, seed, MIN_ENDMEMBER_SAD)
}

/// As [`gen_endmembers`] with a caller-chosen separation floor.
pub fn gen_endmembers_separated(r: usize, n: usize, seed: u64, min_sad: f64) -> Result<Tensor> {
    if r == 0 || r > n {
        return Err(SynthError::Invalid(format!("need 1 ≤ r ≤ n, got r={r} n={n}")));
    }
    let mut best = 0.0f64;
    for attempt in 0..=MAX_RETRIES {
        let mut g = rng(seed, 1000 + attempt as u64);
        let cols: Vec<Vec<f64>> = (0..r).map(|_| bump_spectrum(&mut g, n)).collect();
        let sep = if r == 1 { f64::INFINITY } else { min_pairwise_sad(&cols) };
        if sep >= min_sad {
            return Ok(from_columns(&cols));
        }
        best = best.max(sep);
    }
    Err(SynthError::Separation {
        r,
        n,
        retries: MAX_RETRIES,
        best,
    })
}

fn box_blur(field: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let r = radius as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / (2 * r + 1) as f64;
            }
        }
        out
    };
    let mut f = field.to_vec();
    for _ in 0..2 {
        f = pass(&f, true);
        f = pass(&f, false);
    }
    f
}

/// Unit-variance smooth random field.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let f = box_blur(&white, h, w, radius);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

/// `r×h×w` softmax over `active` smooth fields; the remaining channels are 0.
fn background_abundance(rng: &mut ChaCha8Rng, r: usize, active: usize, h: usize, w: usize, radius: usize, contrast: f64) -> Tensor {
    let p = h * w;
    let fields: Vec<Vec<f64>> = (0..active).map(|_| smooth_field(rng, h, w, radius)).collect();
    let mut out = vec![0.0; r * p];
    for i in 0..p {
        let mx = fields.iter().map(|f| contrast * f[i]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = fields.iter().map(|f| (contrast * f[i] - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..active {
            out[k * p + i] = e[k] / z;
        }
    }
    Tensor::from_parts(vec![r, h, w], out)
}

fn fc_vector(spec: &[f64]) -> [f64; 3] {
    let g = band_groups(spec.len());
    let mean = |r: std::ops::Range<usize>| {
        let len = r.len() as f64;
        spec[r].iter().sum::<f64>() / len
    };
    [mean(g[0].clone()), mean(g[1].clone()), mean(g[2].clone())]
}

fn mean_background_spectrum(cols: &[Vec<f64>], a: &Tensor, active: usize) -> Vec<f64> {
    let p = a.shape()[1] * a.shape()[2];
    let n = cols[0].len();
    let mut mbar = vec![0.0; n];
    for (k, col) in cols.iter().enumerate().take(active) {
        let mk = a.data()[k * p..(k + 1) * p].iter().sum::<f64>() / p as f64;
        for b in 0..n {
            mbar[b] += mk * col[b];
        }
    }
    mbar
}

/// Spectrum whose three band-group means equal those of `mbar` but whose
/// shape differs from it by a large angle.
fn camouflage_spectrum(rng: &mut ChaCha8Rng, mbar: &[f64], others: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = mbar.len();
    for _ in 0..MAX_RETRIES {
        let mut p: Vec<f64> = (0..n)
            .map(|b| {
                let s = if b % 2 == 0 { 1.0 } else { -1.0 };
                s * rng.random_range(0.6..1.0)
            })
            .collect();
        for g in band_groups(n) {
            let wsum: f64 = g.clone().map(|b| mbar[b]).sum();
            let wp: f64 = g.clone().map(|b| mbar[b] * p[b]).sum::<f64>() / wsum;
            for b in g {
                p[b] -= wp;
            }
        }
        let peak = p.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let spec: Vec<f64> = (0..n).map(|b| mbar[b] * (1.0 + 0.9 * p[b] / peak)).collect();
        let sep = others.iter().map(|o| spectral_angle(o, &spec)).fold(f64::INFINITY, f64::min);
        if spectral_angle(&spec, mbar) >= 0.35 && sep >= MIN_ENDMEMBER_SAD {
            return Ok(spec);
        }
    }
    Err(SynthError::Invalid("could not build a camouflage spectrum".into()))
}

/// Clean cube `n×h×w` from `M` (`n×r`) and `A` (`r×h×w`).
pub fn mix_tensor(m: &Tensor, a: &Tensor) -> Tensor {
    let s = a.shape();
    let mut t = Tape::new();
    let mv = t.constant(m.clone());
    let av = t.constant(a.reshape(&[1, s[0], s[1], s[2]]).expect("abundance shape"));
    let x = mix(&mut t, mv, av).expect("mixture shapes");
    t.value(x).reshape(&[m.shape()[0], s[1], s[2]]).expect("cube shape")
}

fn add_noise(x: &mut Tensor, snr_db: f64, rng: &mut ChaCha8Rng) {
    let power = x.data().iter().map(|v| v * v).sum::<f64>() / x.numel() as f64;
    let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    for v in x.data_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += sd * e;
    }
}

/// Pixel `(y, x)` belongs to the box when its center lies inside it.
pub fn pixel_in_box(b: &BBox, y: usize, x: usize) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    cx >= b.x && cx <= b.x + b.w && cy >= b.y && cy <= b.y + b.h
}

fn trajectory(spec: &SceneSpec) -> Vec<BBox> {
    let mut g = rng(spec.seed, 4);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let w = g.random_range(spec.target_min..=spec.target_max);
    let h = g.random_range(spec.target_min..=spec.target_max);
    let mut x = g.random_range(1.0..(fw - w - 1.0));
    let mut y = g.random_range(1.0..(fh - h - 1.0));
    let angle = g.random_range(0.0..std::f64::consts::TAU);
    let speed = g.random_range(spec.speed_min..=spec.speed_max);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    let reflect = |p: &mut f64, v: &mut f64, hi: f64| {
        if *p < 0.0 {
            *p = -*p;
            *v = -*v;
        }
        if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        }
        *p = p.clamp(0.0, hi);
    };
    let mut out = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            let jx: f64 = StandardNormal.sample(&mut g);
            let jy: f64 = StandardNormal.sample(&mut g);
            x += vx + spec.jitter * jx;
            y += vy + spec.jitter * jy;
            reflect(&mut x, &mut vx, fw - w);
            reflect(&mut y, &mut vy, fh - h);
        }
        out.push(BBox::new(x, y, w, h));
    }
    out
}

/// Generates one sequence.
pub fn gen_sequence(spec: &SceneSpec) -> Result<SequenceRecord> {
    spec.validate()?;
    let (n, h, w, r) = (spec.bands, spec.height, spec.width, spec.endmembers);
    let p = h * w;
    let mut cols = columns(&gen_endmembers(r, n, spec.seed)?);
    let bg = background_abundance(&mut rng(spec.seed, 2), r, r - 1, h, w, spec.smoothing, spec.contrast);
    let reserved = r - 1;
    if spec.camouflage {
        let mbar = mean_background_spectrum(&cols, &bg, r - 1);
        cols[reserved] = camouflage_spectrum(&mut rng(spec.seed, 3), &mbar, &cols[..reserved])?;
    } else {
        // Reserve the endmember whose false color stands out most.
        let fcs: Vec<[f64; 3]> = cols.iter().map(|c| fc_vector(c)).collect();
        let score = |k: usize| -> f64 {
            let others: Vec<_> = (0..r).filter(|&j| j != k).collect();
            (0..3)
                .map(|c| {
                    let m = others.iter().map(|&j| fcs[j][c]).sum::<f64>() / others.len() as f64;
                    (fcs[k][c] - m).abs()
                })
                .sum()
        };
        let pick = (0..r).max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a))).unwrap();
        cols.swap(pick, reserved);
    }
    let m = from_columns(&cols);
    let boxes = trajectory(spec);
    let tw = spec.target_weight;
    // Camouflaged targets blend with the scene-average background so their
    // false color does not depend on where they are.
    let abar: Vec<f64> = (0..r)
        .map(|k| bg.data()[k * p..(k + 1) * p].iter().sum::<f64>() / p as f64)
        .collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut abundances = Vec::with_capacity(spec.frames);
    for (t, b) in boxes.iter().enumerate() {
        let mut a = bg.clone();
        for y in 0..h {
            for x in 0..w {
                if !pixel_in_box(b, y, x) {
                    continue;
                }
                let i = y * w + x;
                for k in 0..r {
                    let v = &mut a.data_mut()[k * p + i];
                    let under = if spec.camouflage { abar[k] } else { *v };
                    *v = (1.0 - tw) * under + if k == reserved { tw } else { 0.0 };
                }
            }
        }
        let mut x = mix_tensor(&m, &a);
        if let Some(snr) = spec.snr_db {
            add_noise(&mut x, snr, &mut rng(spec.seed, 100 + t as u64));
        }
        frames.push(x);
        abundances.push(a);
    }
    Ok(SequenceRecord {
        bands: n,
        height: h,
        width: w,
        endmembers: m,
        frames,
        abundances,
        boxes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamouflageStats {
    /// Mean over the three false-color channels of |target mean − background mean|.
    pub fc_contrast: f64,
    /// Mean spectral angle over all target/background pixel pairs.
    pub sad: f64,
}

pub fn camouflage_stats(record: &SequenceRecord, frame: usize) -> CamouflageStats {
    let cube = &record.frames[frame];
    let b = &record.boxes[frame];
    let (h, w, n) = (record.height, record.width, record.bands);
    let p = h * w;
    let fc = false_color(cube).expect("cube has at least three bands");
    let (mut tgt, mut bgi) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            if pixel_in_box(b, y, x) {
                tgt.push(y * w + x);
            } else {
                bgi.push(y * w + x);
            }
        }
    }
    let mean = |idx: &[usize], c: usize| idx.iter().map(|&i| fc.data()[c * p + i]).sum::<f64>() / idx.len() as f64;
    let fc_contrast = (0..3).map(|c| (mean(&tgt, c) - mean(&bgi, c)).abs()).sum::<f64>() / 3.0;
    let spec = |i: usize| -> Vec<f64> { (0..n).map(|k| cube.data()[k * p + i]).collect() };
    let bg_spectra: Vec<Vec<f64>> = bgi.iter().map(|&i| spec(i)).collect();
    let mut total = 0.0;
    for &i in &tgt {
        let s = spec(i);
        total += bg_spectra.iter().map(|o| spectral_angle(&s, o)).sum::<f64>();
    }
    CamouflageStats {
        fc_contrast,
        sad: total / (tgt.len() * bgi.len()) as f64,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnmixingCubeSpec {
    pub endmembers: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub snr_db: Option<f64>,
    pub pure_fraction: f64,
    /// Minimum pairwise spectral angle between endmembers.
    pub min_separation: f64,
    pub contrast: f64,
    pub smoothing: usize,
    pub seed: u64,
}

impl Default for UnmixingCubeSpec {
    fn default() -> Self {
        UnmixingCubeSpec {
            endmembers: 4,
            bands: 16,
            height: 64,
            width: 64,
            snr_db: Some(30.0),
            pure_fraction: 0.08,
            min_separation: 0.5,
            contrast: 2.0,
            smoothing: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnmixingCube {
    pub cube: Tensor,
    pub clean: Tensor,
    pub endmembers: Tensor,
    pub abundances: Tensor,
    pub pure_pixels: usize,
}

/// Single cube for unmixing recovery: softmax abundances over all
/// endmembers with a fraction of pixels forced to be pure.
pub fn gen_unmixing_cube(spec: &UnmixingCubeSpec) -> Result<UnmixingCube> {
    let (r, n, h, w) = (spec.endmembers, spec.bands, spec.height, spec.width);
    if !(0.0..=1.0).contains(&spec.pure_fraction) {
        return Err(SynthError::Invalid(format!("pure fraction {} outside [0, 1]", spec.pure_fraction)));
    }
    let m = gen_endmembers_separated(r, n, spec.seed, spec.min_separation)?;
    let mut a = background_abundance(&mut rng(spec.seed, 2), r, r, h, w, spec.smoothing, spec.contrast);
    let p = h * w;
    let pure = (spec.pure_fraction * p as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..p).collect();
    let mut g = rng(spec.seed, 5);
    for i in (1..p).rev() {
        order.swap(i, g.random_range(0..=i));
    }
    for (j, &i) in order[..pure].iter().enumerate() {
        for k in 0..r {
            a.data_mut()[k * p + i] = if k == j % r { 1.0 } else { 0.0 };
        }
    }
    let clean = mix_tensor(&m, &a);
    let mut cube = clean.clone();
    if let Some(snr) = spec.snr_db {
        add_noise(&mut cube, snr, &mut rng(spec.seed, 6));
    }
    Ok(UnmixingCube {
        cube,
        clean,
        endmembers: m,
        abundances: a,
        pure_pixels: pure,
    })
}

/// A scene spec plus how many sequences to emit.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub sequences: usize,
}

impl DatasetSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = KvMap::parse(text)?;
        let sequences = m.take("sequences")?.unwrap_or(12);
        let scene = SceneSpec::from_kv(&mut m)?;
        m.finish()?;
        Ok(DatasetSpec { scene, sequences })
    }

    /// Scene for sequence `i`, with its own derived seed.
    pub fn scene(&self, i: usize) -> SceneSpec {
        SceneSpec {
            seed: sub_seed(self.scene.seed, 1_000_000 + i as u64),
            ..self.scene.clone()
        }
    }

    pub fn generate(&self) -> Result<Vec<SequenceRecord>> {
        (0..self.sequences).map(|i| gen_sequence(&self.scene(i))).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `seq_NNN.hsvc` and `seq_NNN.json` for each record.
pub fn write_dataset(dir: &Path, records: &[SequenceRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let path = dir.join(format!("seq_{i:03}.hsvc"));
        write_hsvc(&path, rec)?;
        write_annotations(&path.with_extension("json"), &rec.boxes)?;
        out.push(path);
    }
    Ok(out)
}

/// Reads every `*.hsvc` file in `dir`, sorted by name.
pub fn read_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hsvc"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(read_hsvc(p)?)).collect()
}
