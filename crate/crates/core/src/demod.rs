//! Soft demodulators feeding the binary Viterbi decoder, and the 8-bit
//! quantizer that maps their output onto `0..=255`.
//!
//! With two BPSK users the receiver sees one of four points
//! `x_A h_A + x_B h_B`. The reduced-constellation demodulators keep only the
//! nearest point of each hypothesis class (log-max), which turns the soft bit
//! into a projection of a partially cancelled sample onto one of the gains.
//! Every soft value here is a scaled LLR proxy: positive favors bit 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelUse, Complex, RxFrame};
use crate::convcode::QuantizedSoftBit;

/// Real-valued soft bit; sign is the hard decision (positive means bit 0).
pub type SoftBit = f64;

/// Quantizer scale used by the reference receiver.
pub const DEFAULT_ALPHA: f64 = 0.228;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum User {
    A,
    B,
}

impl User {
    pub fn other(self) -> User {
        match self {
            User::A => User::B,
            User::B => User::A,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemodError {
    #[error("alpha must lie in (0, 0.5), got {0}")]
    InvalidAlpha(f64),
    #[error("|h_max|^2 must be positive and finite, got {0}")]
    InvalidScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerParams {
    alpha: f64,
    hmax2: f64,
}

impl QuantizerParams {
    pub fn new(alpha: f64, hmax2: f64) -> Result<Self, DemodError> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(DemodError::InvalidAlpha(alpha));
        }
        if !(hmax2 > 0.0 && hmax2.is_finite()) {
            return Err(DemodError::InvalidScale(hmax2));
        }
        Ok(Self { alpha, hmax2 })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn hmax2(&self) -> f64 {
        self.hmax2
    }
}

#[inline]
fn dot(a: Complex, b: Complex) -> f64 {
    (a.conj() * b).re
}

/// Matched filter `Re(conj(h) y)`.
#[inline]
pub fn single_user_soft(y: Complex, h: Complex) -> SoftBit {
    dot(h, y)
}

/// Soft bit of `x_A xor x_B`.
///
/// Class 0 holds `(+1,+1)` and `(-1,-1)`, class 1 holds `(-1,+1)` and
/// `(+1,-1)`. The nearest point of each class fixes one user's symbol, and
/// the other user's symbol is read off by projecting the residual.
pub fn pnc_soft(y: Complex, ha: Complex, hb: Complex) -> SoftBit {
    let pp = ha + hb;
    let pm = ha - hb;
    let d = |p: Complex| (y - p).norm_sqr();
    let zero_is_pp = d(pp) <= d(-pp);
    let one_is_mp = d(-pm) <= d(pm);
    match (zero_is_pp, one_is_mp) {
        // (+1,+1) and (-1,+1): B sent +1.
        (true, true) => dot(ha, y - hb),
        // (-1,-1) and (-1,+1): A sent -1.
        (false, true) => -dot(hb, y + ha),
        // (+1,+1) and (+1,-1): A sent +1.
        (true, false) => dot(hb, y - ha),
        // (-1,-1) and (+1,-1): B sent -1.
        (false, false) => -dot(ha, y + hb),
    }
}

/// Per-user reduced-constellation soft bits `(x~_A, x~_B)`.
pub fn rmud_soft(y: Complex, ha: Complex, hb: Complex) -> (SoftBit, SoftBit) {
    let pp = ha + hb;
    let pm = ha - hb;
    let (mp, mm) = (-pm, -pp);
    let d = |p: Complex| (y - p).norm_sqr();

    // User A: class +1 = {(+,+), (+,-)}, class -1 = {(-,+), (-,-)}.
    let a_zero_pp = d(pp) <= d(pm);
    let a_one_mp = d(mp) <= d(mm);
    let soft_a = match (a_zero_pp, a_one_mp) {
        (true, true) => dot(ha, y - hb),
        (false, false) => dot(ha, y + hb),
        (true, false) => dot(pp, y),
        (false, true) => dot(pm, y),
    };

    // User B: class +1 = {(+,+), (-,+)}, class -1 = {(+,-), (-,-)}.
    let b_zero_pp = d(pp) <= d(mp);
    let b_one_pm = d(pm) <= d(mm);
    let soft_b = match (b_zero_pp, b_one_pm) {
        (true, true) => dot(hb, y - ha),
        (false, false) => dot(hb, y + ha),
        (true, false) => dot(pp, y),
        (false, true) => dot(mp, y),
    };
    (soft_a, soft_b)
}

/// First SIC stage: decode one user treating the other as Gaussian noise.
#[inline]
pub fn interference_as_noise_soft(y: Complex, target: Complex, interferer: Complex, sigma2: f64) -> SoftBit {
    dot(target, y) / (interferer.norm_sqr() + 2.0 * sigma2)
}

/// `round(clamp(v / hmax2 * alpha + 0.5, 0, 1) * 255)`, rounding halves up.
#[inline]
pub fn quantize(value: SoftBit, params: &QuantizerParams) -> QuantizedSoftBit {
    let unit = (value / params.hmax2 * params.alpha + 0.5).clamp(0.0, 1.0);
    if unit.is_nan() {
        return QuantizedSoftBit::ERASURE;
    }
    QuantizedSoftBit((unit * 255.0 + 0.5).floor() as u8)
}

pub fn quantize_frame(soft: &[SoftBit], params: &QuantizerParams) -> Vec<QuantizedSoftBit> {
    soft.iter().map(|&v| quantize(v, params)).collect()
}

/// `max_k min(|h_A[k]|^2, |h_B[k]|^2)`: the largest noiseless PNC soft magnitude.
pub fn hmax2_pnc(ch: &ChannelUse) -> f64 {
    ch.gains_a
        .iter()
        .zip(&ch.gains_b)
        .map(|(a, b)| a.norm_sqr().min(b.norm_sqr()))
        .fold(0.0, f64::max)
}

/// `max_k |h_u[k]|^2`.
pub fn hmax2_user(ch: &ChannelUse, user: User) -> f64 {
    let gains = match user {
        User::A => &ch.gains_a,
        User::B => &ch.gains_b,
    };
    gains.iter().map(|h| h.norm_sqr()).fold(0.0, f64::max)
}

pub fn single_user_soft_frame(samples: &[Complex], gains: &[Complex]) -> Vec<SoftBit> {
    samples.iter().zip(gains).map(|(&y, &h)| single_user_soft(y, h)).collect()
}

pub fn pnc_soft_frame(rx: &RxFrame, ch: &ChannelUse) -> Vec<SoftBit> {
    rx.samples
        .iter()
        .zip(ch.gains_a.iter().zip(&ch.gains_b))
        .map(|(&y, (&a, &b))| pnc_soft(y, a, b))
        .collect()
}

pub fn rmud_soft_frame(rx: &RxFrame, ch: &ChannelUse) -> (Vec<SoftBit>, Vec<SoftBit>) {
    rx.samples
        .iter()
        .zip(ch.gains_a.iter().zip(&ch.gains_b))
        .map(|(&y, (&a, &b))| rmud_soft(y, a, b))
        .unzip()
}
