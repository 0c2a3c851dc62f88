//! Experiment description: a flat `key = value` file whose sweep axes accept
//! comma-separated lists and inclusive `start:stop:step` ranges.
//!
//! ```text
//! # balanced SNR sweep
//! variant = NCMA-RMUD, RMUD, SU
//! snr_a = 6:14:1
//! balanced = true
//! l_a = 24
//! l_b = 16
//! slots = 10000
//! repetitions = 3
//! ```

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use ncma::channel::ChannelModel;
use ncma::demod::DEFAULT_ALPHA;
use ncma::protocol::{SessionConfig, Variant};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub variant: Vec<Variant>,
    pub snr_a: Vec<f64>,
    pub snr_b: Vec<f64>,
    /// Use `snr_b = snr_a` at every point.
    pub balanced: bool,
    pub l_a: Vec<usize>,
    pub l_b: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub slots: usize,
    pub k: usize,
    pub slots_per_poll: usize,
    pub alpha: f64,
    pub channel: ChannelModel,
    pub csi_error: f64,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            variant: vec![Variant::NcmaRmud],
            snr_a: vec![10.0],
            snr_b: Vec::new(),
            balanced: true,
            l_a: vec![24],
            l_b: vec![16],
            repetitions: 1,
            seed: 1,
            slots: 10_000,
            k: SessionConfig::DEFAULT_K,
            slots_per_poll: SessionConfig::DEFAULT_SLOTS_PER_POLL,
            alpha: DEFAULT_ALPHA,
            channel: ChannelModel::FixedPhase,
            csi_error: 0.0,
            out: None,
        }
    }
}

/// One configuration of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub variant: Variant,
    pub snr_a: f64,
    pub snr_b: f64,
    pub l_a: usize,
    pub l_b: usize,
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| item(s).with_context(|| format!("{key}: bad entry {s:?}")))
        .collect()
}

fn parse_f64_axis(key: &str, value: &str) -> Result<Vec<f64>> {
    let nested = parse_list(key, value, |s| {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        match parts.as_slice() {
            [v] => Ok(vec![v.parse::<f64>()?]),
            [start, stop, step] => {
                let (start, stop, step): (f64, f64, f64) = (start.parse()?, stop.parse()?, step.parse()?);
                if !(step > 0.0) || stop < start {
                    bail!("range needs start <= stop and a positive step");
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                Ok((0..=n).map(|i| start + i as f64 * step).collect())
            }
            _ => bail!("expected a number or start:stop:step"),
        }
    })?;
    Ok(nested.into_iter().flatten().collect())
}

fn parse_usize_axis(key: &str, value: &str) -> Result<Vec<usize>> {
    let nested = parse_list(key, value, |s| {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        match parts.as_slice() {
            [v] => Ok(vec![v.parse::<usize>()?]),
            [start, stop, step] => {
                let (start, stop, step): (usize, usize, usize) = (start.parse()?, stop.parse()?, step.parse()?);
                if step == 0 || stop < start {
                    bail!("range needs start <= stop and a positive step");
                }
                Ok((start..=stop).step_by(step).collect())
            }
            _ => bail!("expected an integer or start:stop:step"),
        }
    })?;
    Ok(nested.into_iter().flatten().collect())
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bail!("{key}: expected true or false, got {other:?}"),
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| anyhow!("{key}: {e}"))
}

impl ExperimentSpec {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => {
                self.variant = parse_list(key, value, |s| s.parse::<Variant>().map_err(|e| anyhow!(e)))?;
            }
            "snr_a" => self.snr_a = parse_f64_axis(key, value)?,
            "snr_b" => {
                self.snr_b = parse_f64_axis(key, value)?;
                self.balanced = false;
            }
            "balanced" => self.balanced = parse_bool(key, value)?,
            "l_a" => self.l_a = parse_usize_axis(key, value)?,
            "l_b" => self.l_b = parse_usize_axis(key, value)?,
            "repetitions" => self.repetitions = parse_scalar(key, value)?,
            "seed" => self.seed = parse_scalar(key, value)?,
            "slots" => self.slots = parse_scalar(key, value)?,
            "k" => self.k = parse_scalar(key, value)?,
            "slots_per_poll" => self.slots_per_poll = parse_scalar(key, value)?,
            "alpha" => self.alpha = parse_scalar(key, value)?,
            "channel" => self.channel = value.trim().parse().map_err(|e| anyhow!("{key}: {e}"))?,
            "csi_error" => self.csi_error = parse_scalar(key, value)?,
            "out" => self.out = Some(PathBuf::from(value.trim())),
            other => bail!("unknown key {other:?}"),
        }
        Ok(())
    }

    /// Parses a whole file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut seen = BTreeSet::new();
        let mut balanced_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key {key:?}", n + 1);
            }
            balanced_set |= key == "balanced";
            spec.set(key, value).with_context(|| format!("line {}", n + 1))?;
        }
        if balanced_set && seen.contains("snr_b") && spec.balanced {
            bail!("balanced = true conflicts with an explicit snr_b axis");
        }
        if seen.contains("snr_b") && !balanced_set {
            spec.balanced = false;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, len: usize| if len == 0 { Err(anyhow!("sweep axis {name} is empty")) } else { Ok(()) };
        empty("variant", self.variant.len())?;
        empty("snr_a", self.snr_a.len())?;
        if !self.balanced {
            empty("snr_b", self.snr_b.len())?;
        }
        empty("l_a", self.l_a.len())?;
        empty("l_b", self.l_b.len())?;
        if self.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        for p in self.points() {
            self.session(&p, 0).validate().with_context(|| format!("point {p:?}"))?;
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &variant in &self.variant {
            for &snr_a in &self.snr_a {
                let snr_bs = if self.balanced { vec![snr_a] } else { self.snr_b.clone() };
                for snr_b in snr_bs {
                    for &l_a in &self.l_a {
                        for &l_b in &self.l_b {
                            out.push(SweepPoint { variant, snr_a, snr_b, l_a, l_b });
                        }
                    }
                }
            }
        }
        out
    }

    /// Session for one point; repetition `rep` runs with seed `seed + rep`,
    /// so every point sees the same random streams for a given repetition.
    pub fn session(&self, p: &SweepPoint, rep: usize) -> SessionConfig {
        let mut cfg = SessionConfig::two_user(p.snr_a, p.snr_b, p.l_a, p.l_b, p.variant, self.slots, self.seed.wrapping_add(rep as u64));
        cfg.k = self.k;
        cfg.slots_per_poll = self.slots_per_poll;
        cfg.alpha = self.alpha;
        cfg.channel = self.channel;
        cfg.csi_error = self.csi_error;
        cfg
    }

    /// SHA-256 of the canonical JSON form of the spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
