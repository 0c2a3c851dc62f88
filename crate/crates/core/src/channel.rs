//! Simulated BPSK uplink with one or two concurrent users.
//!
//! `y[k] = h_A[k] x_A[k] + h_B[k] x_B[k] + n[k]`, with `n` circular complex
//! Gaussian of variance `sigma2` per dimension. The per-user SNR is
//! `|h_u|^2 / (2 sigma2)`; the noise level is fixed and the gains are scaled.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convcode::BitFrame;

pub type Complex = Complex64;

/// Noise variance per real dimension used by [`draw_channel`].
pub const NOISE_SIGMA2: f64 = 0.5;

/// Data subcarriers per OFDM symbol; coded bit `k` rides subcarrier `k % 48`.
pub const SUBCARRIERS: usize = 48;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("symbol sequence has {got} entries, channel covers {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("unknown channel model '{0}' (expected fixed-phase or rayleigh-block[:group])")]
    UnknownModel(String),
    #[error("SNR must be finite, got {0}")]
    InvalidSnr(f64),
    #[error("subcarrier group size must be in 1..={SUBCARRIERS}, got {0}")]
    InvalidGroup(usize),
    #[error("two-user transmission over a single-user channel")]
    MissingSecondUser,
}

/// Gain process for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelModel {
    /// Constant gain over the frame: magnitude from the SNR, uniform random phase.
    FixedPhase,
    /// Independent Rayleigh gain per group of adjacent subcarriers.
    RayleighBlock { group: usize },
}

impl ChannelModel {
    pub const DEFAULT_GROUP: usize = 12;
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelModel::FixedPhase => f.write_str("fixed-phase"),
            ChannelModel::RayleighBlock { group } => write!(f, "rayleigh-block:{group}"),
        }
    }
}

impl FromStr for ChannelModel {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "fixed-phase" {
            return Ok(ChannelModel::FixedPhase);
        }
        let Some(rest) = s.strip_prefix("rayleigh-block") else {
            return Err(ChannelError::UnknownModel(s.to_string()));
        };
        let group = match rest.strip_prefix(':') {
            None if rest.is_empty() => ChannelModel::DEFAULT_GROUP,
            Some(g) => g.parse().map_err(|_| ChannelError::UnknownModel(s.to_string()))?,
            None => return Err(ChannelError::UnknownModel(s.to_string())),
        };
        if group == 0 || group > SUBCARRIERS {
            return Err(ChannelError::InvalidGroup(group));
        }
        Ok(ChannelModel::RayleighBlock { group })
    }
}

/// One slot's channel realization. `gains_b` is empty for single-user slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelUse {
    pub gains_a: Vec<Complex>,
    pub gains_b: Vec<Complex>,
    pub sigma2: f64,
    /// Skip the noise term entirely.
    pub noiseless: bool,
}

impl ChannelUse {
    pub fn len(&self) -> usize {
        self.gains_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains_a.is_empty()
    }

    pub fn is_two_user(&self) -> bool {
        !self.gains_b.is_empty()
    }

    /// Constant gains over `len` coded bits.
    pub fn constant(h_a: Complex, h_b: Option<Complex>, len: usize, sigma2: f64) -> Self {
        Self {
            gains_a: vec![h_a; len],
            gains_b: h_b.map_or_else(Vec::new, |h| vec![h; len]),
            sigma2,
            noiseless: false,
        }
    }

    pub fn without_noise(mut self) -> Self {
        self.noiseless = true;
        self
    }

    /// Same channel with user B's gains as user A's (for single-user decoding of B).
    pub fn user_b_only(&self) -> ChannelUse {
        ChannelUse {
            gains_a: self.gains_b.clone(),
            gains_b: Vec::new(),
            sigma2: self.sigma2,
            noiseless: self.noiseless,
        }
    }
}

/// Received samples, one per coded bit.
#[derive(Debug, Clone, PartialEq)]
pub struct RxFrame {
    pub samples: Vec<Complex>,
}

impl RxFrame {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Bit 0 maps to +1, bit 1 to -1.
pub fn bpsk_map(frame: &BitFrame) -> Vec<f64> {
    frame.0.iter().map(|&b| if b == 0 { 1.0 } else { -1.0 }).collect()
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Circular complex Gaussian sample with the given variance per dimension.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var_per_dim: f64) -> Complex {
    let sd = var_per_dim.sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex::new(sd * re, sd * im)
}

pub fn transmit<R: Rng + ?Sized>(
    xa: &[f64],
    xb: Option<&[f64]>,
    ch: &ChannelUse,
    rng: &mut R,
) -> Result<RxFrame, ChannelError> {
    let n = ch.len();
    if xa.len() != n {
        return Err(ChannelError::LengthMismatch { got: xa.len(), expected: n });
    }
    if let Some(xb) = xb {
        if !ch.is_two_user() {
            return Err(ChannelError::MissingSecondUser);
        }
        if xb.len() != n || ch.gains_b.len() != n {
            return Err(ChannelError::LengthMismatch { got: xb.len(), expected: n });
        }
    }
    let samples = (0..n)
        .map(|k| {
            let mut y = ch.gains_a[k] * xa[k];
            if let Some(xb) = xb {
                y += ch.gains_b[k] * xb[k];
            }
            if !ch.noiseless {
                y += complex_gaussian(rng, ch.sigma2);
            }
            y
        })
        .collect();
    Ok(RxFrame { samples })
}

fn draw_gains<R: Rng + ?Sized>(snr_db: f64, model: ChannelModel, len: usize, rng: &mut R) -> Vec<Complex> {
    let power = 2.0 * NOISE_SIGMA2 * db_to_linear(snr_db);
    match model {
        ChannelModel::FixedPhase => {
            let phase = rng.random_range(0.0..2.0 * PI);
            vec![Complex::from_polar(power.sqrt(), phase); len]
        }
        ChannelModel::RayleighBlock { group } => {
            let groups = SUBCARRIERS.div_ceil(group);
            let per_group: Vec<Complex> = (0..groups).map(|_| complex_gaussian(rng, power / 2.0)).collect();
            (0..len).map(|k| per_group[(k % SUBCARRIERS) / group]).collect()
        }
    }
}

/// Draws one slot's gains. User A's gains are drawn before user B's so a
/// given random stream always produces the same realization.
pub fn draw_channel<R: Rng + ?Sized>(
    snr_a_db: f64,
    snr_b_db: Option<f64>,
    model: ChannelModel,
    len: usize,
    rng: &mut R,
) -> Result<ChannelUse, ChannelError> {
    for snr in std::iter::once(snr_a_db).chain(snr_b_db) {
        if !snr.is_finite() {
            return Err(ChannelError::InvalidSnr(snr));
        }
    }
    if let ChannelModel::RayleighBlock { group } = model {
        if group == 0 || group > SUBCARRIERS {
            return Err(ChannelError::InvalidGroup(group));
        }
    }
    let gains_a = draw_gains(snr_a_db, model, len, rng);
    let gains_b = match snr_b_db {
        Some(snr) => draw_gains(snr, model, len, rng),
        None => Vec::new(),
    };
    Ok(ChannelUse {
        gains_a,
        gains_b,
        sigma2: NOISE_SIGMA2,
        noiseless: false,
    })
}

/// Receiver-side channel estimate `h (1 + e)`, `e ~ CN(0, rel_err^2)`.
/// With `rel_err == 0` the true channel is returned unchanged.
pub fn perturb_csi<R: Rng + ?Sized>(ch: &ChannelUse, rel_err: f64, rng: &mut R) -> ChannelUse {
    if rel_err <= 0.0 {
        return ch.clone();
    }
    let mut perturb = |gains: &[Complex]| -> Vec<Complex> {
        // One error term per distinct gain run keeps block structure intact.
        let mut out = Vec::with_capacity(gains.len());
        let mut last: Option<(Complex, Complex)> = None;
        for &h in gains {
            let est = match last {
                Some((prev, est)) if prev == h => est,
                _ => h * (Complex::new(1.0, 0.0) + complex_gaussian(rng, rel_err * rel_err / 2.0)),
            };
            last = Some((h, est));
            out.push(est);
        }
        out
    };
    ChannelUse {
        gains_a: perturb(&ch.gains_a),
        gains_b: perturb(&ch.gains_b),
        sigma2: ch.sigma2,
        noiseless: ch.noiseless,
    }
}
