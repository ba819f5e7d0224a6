//! Multichannel slotted-ALOHA uplink with hard collisions and Poisson
//! background traffic.
//!
//! An update of `N` bits becomes `D = ceil(N / Ns)` information subpackets,
//! coded into `F = ceil(D / q)` subpackets sent over `F` consecutive slots.
//! The base station decodes the packet once any `D` of them arrive clean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// How often a device redraws its access decision and channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    /// One Bernoulli(p) draw and one channel for the whole frame.
    #[default]
    Frame,
    /// A fresh Bernoulli(p) draw and channel for every subpacket.
    Subpacket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub channels: usize,
    pub access_prob: f64,
    pub payload_bits: u64,
    pub code_rate: f64,
    pub slot_s: f64,
    pub mode: AccessMode,
}

impl FrameConfig {
    pub fn new(channels: usize, access_prob: f64, payload_bits: u64, code_rate: f64, slot_s: f64) -> Result<Self> {
        let cfg = Self {
            channels,
            access_prob,
            payload_bits,
            code_rate,
            slot_s,
            mode: AccessMode::Frame,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_mode(mut self, mode: AccessMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("M must be >= 1"));
        }
        if !(self.access_prob > 0.0 && self.access_prob <= 1.0) {
            return Err(Error::invalid("access probability must be in (0, 1]"));
        }
        if !(self.code_rate > 0.0 && self.code_rate <= 1.0) {
            return Err(Error::invalid("code rate must be in (0, 1]"));
        }
        if self.payload_bits == 0 {
            return Err(Error::invalid("subpacket payload must be >= 1 bit"));
        }
        if !(self.slot_s > 0.0) {
            return Err(Error::invalid("slot duration must be > 0"));
        }
        Ok(())
    }
}

/// `ceil(d / q)`, robust to `d / q` landing a rounding error above an integer.
pub fn coded_subpackets(info: u64, code_rate: f64) -> u64 {
    let x = info as f64 / code_rate;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubpacketPlan {
    pub bits: u64,
    pub info: u64,
    pub total: u64,
}

impl SubpacketPlan {
    /// Replaces the coded subpacket count, e.g. with a tabulated value.
    pub fn with_total(self, total: u64) -> Result<Self> {
        if total < self.info {
            return Err(Error::invalid(format!(
                "F override {total} is below D = {}",
                self.info
            )));
        }
        Ok(Self { total, ..self })
    }
}

pub fn subpacket_plan(bits: u64, cfg: &FrameConfig) -> Result<SubpacketPlan> {
    if bits == 0 {
        return Err(Error::invalid("update size must be >= 1 bit"));
    }
    let info = bits.div_ceil(cfg.payload_bits);
    Ok(SubpacketPlan {
        bits,
        info,
        total: coded_subpackets(info, cfg.code_rate),
    })
}

/// Smallest `k` with `P(Poisson(mean) <= k) >= u`.
pub fn poisson_quantile(mean: f64, u: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let mut k = 0u32;
    let mut term = (-mean).exp();
    let mut cdf = term;
    while u > cdf && k < 100_000 {
        k += 1;
        term *= mean / k as f64;
        cdf += term;
        if term == 0.0 && cdf < u {
            // cdf saturated below u in floating point
            break;
        }
    }
    k
}

/// Result of one slot.
#[derive(Debug, Clone, Default)]
pub struct SlotOutcome {
    /// Background subpackets per channel.
    pub background: Vec<u32>,
    /// Per device: channel used this slot, if it transmitted.
    pub channel: Vec<Option<usize>>,
    /// Per device: the subpacket it sent this slot arrived clean.
    pub clean: Vec<bool>,
}

impl SlotOutcome {
    pub fn background_total(&self) -> u32 {
        self.background.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceFrame {
    pub attempted: bool,
    /// Frame-level channel; `None` if the device did not access the medium
    /// (or, in per-subpacket mode, always `None`).
    pub channel: Option<usize>,
    pub sent_subpackets: u64,
    pub clean_subpackets: u64,
    pub packet_success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameOutcome {
    pub devices: Vec<DeviceFrame>,
    pub background_per_slot: Vec<u32>,
}

impl FrameOutcome {
    pub fn successes(&self) -> impl Iterator<Item = usize> + '_ {
        self.devices
            .iter()
            .enumerate()
            .filter(|(_, d)| d.packet_success)
            .map(|(k, _)| k)
    }

    pub fn success_count(&self) -> usize {
        self.successes().count()
    }
}

/// Slot-by-slot frame driver.
///
/// Call [`FrameEngine::intents`] at the start of each slot to learn which
/// devices want to send, then [`FrameEngine::resolve`] with the devices that
/// actually transmit (e.g. those that could pay for it). Random draws are made
/// for every device regardless of its state, so the access stream advances
/// identically across paired runs.
#[derive(Debug)]
pub struct FrameEngine {
    cfg: FrameConfig,
    plan: SubpacketPlan,
    lambda: f64,
    attempting: Vec<bool>,
    frame_access: Vec<bool>,
    frame_channel: Vec<usize>,
    intent: Vec<bool>,
    slot_channel: Vec<usize>,
    sent: Vec<u64>,
    clean: Vec<u64>,
    background_per_slot: Vec<u32>,
    slot: u64,
}

impl FrameEngine {
    pub fn new(
        cfg: &FrameConfig,
        plan: SubpacketPlan,
        lambda: f64,
        attempting: &[bool],
        access_rng: &mut SimRng,
    ) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::invalid("background load must be >= 0"));
        }
        let k = attempting.len();
        let mut frame_access = vec![false; k];
        let mut frame_channel = vec![0; k];
        if cfg.mode == AccessMode::Frame {
            for d in 0..k {
                let u: f64 = access_rng.random();
                let ch = access_rng.random_range(0..cfg.channels);
                frame_access[d] = attempting[d] && u < cfg.access_prob;
                frame_channel[d] = ch;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            plan,
            lambda,
            attempting: attempting.to_vec(),
            frame_access,
            frame_channel,
            intent: vec![false; k],
            slot_channel: vec![0; k],
            sent: vec![0; k],
            clean: vec![0; k],
            background_per_slot: Vec::with_capacity(plan.total as usize),
            slot: 0,
        })
    }

    pub fn plan(&self) -> SubpacketPlan {
        self.plan
    }

    pub fn is_done(&self) -> bool {
        self.slot >= self.plan.total
    }

    /// Devices wishing to send in the coming slot.
    pub fn intents(&mut self, access_rng: &mut SimRng) -> &[bool] {
        match self.cfg.mode {
            AccessMode::Frame => {
                self.intent.copy_from_slice(&self.frame_access);
                self.slot_channel.copy_from_slice(&self.frame_channel);
            }
            AccessMode::Subpacket => {
                for d in 0..self.attempting.len() {
                    let u: f64 = access_rng.random();
                    let ch = access_rng.random_range(0..self.cfg.channels);
                    self.intent[d] = self.attempting[d] && u < self.cfg.access_prob;
                    self.slot_channel[d] = ch;
                }
            }
        }
        &self.intent
    }

    /// Resolves collisions for the devices in `transmitting` (a subset of the
    /// current intents).
    pub fn resolve(&mut self, transmitting: &[bool], background_rng: &mut SimRng) -> SlotOutcome {
        let m = self.cfg.channels;
        let per_channel = self.lambda / m as f64;
        let background: Vec<u32> = (0..m)
            .map(|_| poisson_quantile(per_channel, background_rng.random()))
            .collect();
        let mut users = vec![0u32; m];
        for d in 0..transmitting.len() {
            if transmitting[d] && self.intent[d] {
                users[self.slot_channel[d]] += 1;
            }
        }
        let k = transmitting.len();
        let mut channel = vec![None; k];
        let mut clean = vec![false; k];
        for d in 0..k {
            if transmitting[d] && self.intent[d] {
                let ch = self.slot_channel[d];
                channel[d] = Some(ch);
                self.sent[d] += 1;
                if users[ch] == 1 && background[ch] == 0 {
                    clean[d] = true;
                    self.clean[d] += 1;
                }
            }
        }
        self.background_per_slot.push(background.iter().sum());
        self.slot += 1;
        SlotOutcome {
            background,
            channel,
            clean,
        }
    }

    pub fn finish(self) -> FrameOutcome {
        let per_frame = self.cfg.mode == AccessMode::Frame;
        let devices = (0..self.attempting.len())
            .map(|d| DeviceFrame {
                attempted: self.attempting[d],
                channel: (per_frame && self.frame_access[d]).then_some(self.frame_channel[d]),
                sent_subpackets: self.sent[d],
                clean_subpackets: self.clean[d],
                packet_success: self.attempting[d] && self.clean[d] >= self.plan.info,
            })
            .collect();
        FrameOutcome {
            devices,
            background_per_slot: self.background_per_slot,
        }
    }
}

/// Runs a whole frame in which every attempting device can afford every
/// subpacket.
pub fn simulate_frame(
    attempting: &[bool],
    plan: SubpacketPlan,
    cfg: &FrameConfig,
    lambda: f64,
    access_rng: &mut SimRng,
    background_rng: &mut SimRng,
) -> Result<FrameOutcome> {
    let mut engine = FrameEngine::new(cfg, plan, lambda, attempting, access_rng)?;
    let all = vec![true; attempting.len()];
    while !engine.is_done() {
        engine.intents(access_rng);
        engine.resolve(&all, background_rng);
    }
    Ok(engine.finish())
}

/// Downlink: error-free delivery to every device that can pay for reception.
pub fn broadcast(can_afford: &[bool]) -> Vec<usize> {
    can_afford
        .iter()
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(k, _)| k)
        .collect()
}
