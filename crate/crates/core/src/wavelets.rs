//! Orthonormal Haar transforms, built from tape operations so they are
//! differentiable end to end.
//!
//! The 2-D transform works on non-overlapping 2×2 blocks `[[a, b], [c, d]]`
//! of the last two axes (rows, columns):
//!
//! ```text
//! LL = (a + b + c + d) / 2      HL = (a − b + c − d) / 2
//! LH = (a + b − c − d) / 2      HH = (a − b − c + d) / 2
//! ```
//!
//! so HL responds to horizontal (column-to-column) change and LH to
//! vertical (row-to-row) change. The 1-D channel transform pairs channels
//! `(2k, 2k+1)` and scales sums/differences by `1/√2`.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// The four subbands of one 2-D Haar level, each with the spatial extents halved.
#[derive(Clone, Copy, Debug)]
pub struct Subbands2D<T = Var> {
    pub ll: T,
    pub hl: T,
    pub lh: T,
    pub hh: T,
}

impl<T> Subbands2D<T> {
    pub fn as_array(&self) -> [&T; 4] {
        [&self.ll, &self.hl, &self.lh, &self.hh]
    }
}

impl Subbands2D<Tensor> {
    pub fn energy(&self) -> f64 {
        self.as_array()
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Low/high channel branches of the 1-D transform.
#[derive(Clone, Copy, Debug)]
pub struct ChannelBranches<T = Var> {
    pub low: T,
    pub high: T,
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// 1-D Haar across the channel axis of a `[.., 2c, h, w]` tensor.
pub fn haar1d_channels(t: &mut Tape, x: Var) -> Result<ChannelBranches> {
    let s = t.shape(x).to_vec();
    if s.len() < 3 {
        return Err(TensorError::invalid(
            "haar1d_channels",
            format!("expected [.., channels, h, w], got {:?}", s),
        ));
    }
    let ax = s.len() - 3;
    if s[ax] % 2 != 0 {
        return Err(TensorError::invalid(
            "haar1d_channels",
            format!("channel count {} is odd", s[ax]),
        ));
    }
    let c = s[ax] / 2;
    let mut paired = s[..ax].to_vec();
    paired.extend_from_slice(&[c, 2, s[ax + 1], s[ax + 2]]);
    let mut out_shape = s.clone();
    out_shape[ax] = c;
    let p = t.reshape(x, &paired)?;
    let first = t.narrow(p, ax + 1, 0, 1)?;
    let second = t.narrow(p, ax + 1, 1, 1)?;
    let sum = t.add(first, second)?;
    let diff = t.sub(first, second)?;
    let low = t.mul_scalar(sum, INV_SQRT2);
    let high = t.mul_scalar(diff, INV_SQRT2);
    Ok(ChannelBranches {
        low: t.reshape(low, &out_shape)?,
        high: t.reshape(high, &out_shape)?,
    })
}

/// Inverse of [`haar1d_channels`]: re-interleaves `(L+H)/√2, (L−H)/√2`.
pub fn ihaar1d_channels(t: &mut Tape, b: ChannelBranches) -> Result<Var> {
    let s = t.shape(b.low).to_vec();
    if t.shape(b.high) != s.as_slice() || s.len() < 3 {
        return Err(TensorError::mismatch("ihaar1d_channels", &s, t.shape(b.high)));
    }
    let ax = s.len() - 3;
    let mut split = s[..ax].to_vec();
    split.extend_from_slice(&[s[ax], 1, s[ax + 1], s[ax + 2]]);
    let sum = t.add(b.low, b.high)?;
    let diff = t.sub(b.low, b.high)?;
    let first = t.mul_scalar(sum, INV_SQRT2);
    let second = t.mul_scalar(diff, INV_SQRT2);
    let first = t.reshape(first, &split)?;
    let second = t.reshape(second, &split)?;
    let both = t.concat(&[first, second], ax + 1)?;
    let mut out = s.clone();
    out[ax] *= 2;
    t.reshape(both, &out)
}

/// One level of 2-D Haar analysis over the last two axes.
pub fn haar2d(t: &mut Tape, x: Var) -> Result<Subbands2D> {
    let s = t.shape(x).to_vec();
    if s.len() < 2 {
        return Err(TensorError::invalid("haar2d", format!("rank too small: {:?}", s)));
    }
    let nd = s.len();
    let (h, w) = (s[nd - 2], s[nd - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::invalid(
            "haar2d",
            format!("spatial extent {}×{} is not even", h, w),
        ));
    }
    let lead: usize = s[..nd - 2].iter().product();
    let blocks = t.reshape(x, &[lead, h / 2, 2, w / 2, 2])?;
    let mut out_shape = s[..nd - 2].to_vec();
    out_shape.extend_from_slice(&[h / 2, w / 2]);
    let pick = |t: &mut Tape, row: usize, col: usize| -> Result<Var> {
        let r = t.narrow(blocks, 2, row, 1)?;
        t.narrow(r, 4, col, 1)
    };
    let a = pick(t, 0, 0)?;
    let b = pick(t, 0, 1)?;
    let c = pick(t, 1, 0)?;
    let d = pick(t, 1, 1)?;
    let ab_sum = t.add(a, b)?;
    let ab_diff = t.sub(a, b)?;
    let cd_sum = t.add(c, d)?;
    let cd_diff = t.sub(c, d)?;
    let ll = t.add(ab_sum, cd_sum)?;
    let hl = t.add(ab_diff, cd_diff)?;
    let lh = t.sub(ab_sum, cd_sum)?;
    let hh = t.sub(ab_diff, cd_diff)?;
    let finish = |t: &mut Tape, v: Var| -> Result<Var> {
        let v = t.mul_scalar(v, 0.5);
        t.reshape(v, &out_shape)
    };
    Ok(Subbands2D {
        ll: finish(t, ll)?,
        hl: finish(t, hl)?,
        lh: finish(t, lh)?,
        hh: finish(t, hh)?,
    })
}

/// Exact inverse of [`haar2d`].
pub fn ihaar2d(t: &mut Tape, s: Subbands2D) -> Result<Var> {
    let shape = t.shape(s.ll).to_vec();
    for v in [s.hl, s.lh, s.hh] {
        if t.shape(v) != shape.as_slice() {
            return Err(TensorError::mismatch("ihaar2d", &shape, t.shape(v)));
        }
    }
    if shape.len() < 2 {
        return Err(TensorError::invalid("ihaar2d", format!("rank too small: {:?}", shape)));
    }
    let nd = shape.len();
    let (h2, w2) = (shape[nd - 2], shape[nd - 1]);
    let lead: usize = shape[..nd - 2].iter().product();
    let ll_p_lh = t.add(s.ll, s.lh)?;
    let ll_m_lh = t.sub(s.ll, s.lh)?;
    let hl_p_hh = t.add(s.hl, s.hh)?;
    let hl_m_hh = t.sub(s.hl, s.hh)?;
    let a = t.add(ll_p_lh, hl_p_hh)?;
    let b = t.sub(ll_p_lh, hl_p_hh)?;
    let c = t.add(ll_m_lh, hl_m_hh)?;
    let d = t.sub(ll_m_lh, hl_m_hh)?;
    let cell = |t: &mut Tape, v: Var| -> Result<Var> {
        let v = t.mul_scalar(v, 0.5);
        t.reshape(v, &[lead, h2, 1, w2, 1])
    };
    let (a, b, c, d) = (cell(t, a)?, cell(t, b)?, cell(t, c)?, cell(t, d)?);
    let top = t.concat(&[a, b], 4)?;
    let bottom = t.concat(&[c, d], 4)?;
    let full = t.concat(&[top, bottom], 2)?;
    let mut out = shape[..nd - 2].to_vec();
    out.extend_from_slice(&[h2 * 2, w2 * 2]);
    t.reshape(full, &out)
}

/// Tensor-level convenience wrapper around [`haar2d`].
pub fn haar2d_tensor(x: &Tensor) -> Result<Subbands2D<Tensor>> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let s = haar2d(&mut t, v)?;
    Ok(Subbands2D {
        ll: t.value(s.ll).clone(),
        hl: t.value(s.hl).clone(),
        lh: t.value(s.lh).clone(),
        hh: t.value(s.hh).clone(),
    })
}

pub fn ihaar2d_tensor(s: &Subbands2D<Tensor>) -> Result<Tensor> {
    let mut t = Tape::new();
    let b = Subbands2D {
        ll: t.constant(s.ll.clone()),
        hl: t.constant(s.hl.clone()),
        lh: t.constant(s.lh.clone()),
        hh: t.constant(s.hh.clone()),
    };
    let v = ihaar2d(&mut t, b)?;
    Ok(t.value(v).clone())
}

pub fn haar1d_channels_tensor(x: &Tensor) -> Result<ChannelBranches<Tensor>> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let b = haar1d_channels(&mut t, v)?;
    Ok(ChannelBranches {
        low: t.value(b.low).clone(),
        high: t.value(b.high).clone(),
    })
}

pub fn ihaar1d_channels_tensor(b: &ChannelBranches<Tensor>) -> Result<Tensor> {
    let mut t = Tape::new();
    let br = ChannelBranches {
        low: t.constant(b.low.clone()),
        high: t.constant(b.high.clone()),
    };
    let v = ihaar1d_channels(&mut t, br)?;
    Ok(t.value(v).clone())
}
