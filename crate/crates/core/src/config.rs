//! Simulation configuration: a sectioned key/value file whose keys follow the
//! usual symbols of the system model. Omitted keys take the default scenario
//! values (20 devices, 4 channels, 0.1 J batteries, BLE-sized subpackets).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::energy::{dbm_to_watts, EnergyParams};
use crate::error::{Error, Result};
use crate::fed::PhaseSchedule;
use crate::model::Activation;
use crate::phy::{AccessMode, FrameConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fl,
    Fd,
    Flda,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fl => "fl",
            Mode::Fd => "fd",
            Mode::Flda => "flda",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fl" => Ok(Mode::Fl),
            "fd" => Ok(Mode::Fd),
            "flda" => Ok(Mode::Flda),
            other => Err(Error::config("run.mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// When a device joins an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityRule {
    /// Battery at iteration start covers computation plus one transmit slot.
    #[default]
    Causal,
    /// Battery plus the frame's (pre-drawn) harvest covers the whole round.
    Lookahead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: Mode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    /// Simulated seconds between evaluations; 0 evaluates after every iteration.
    pub eval_period_s: f64,
    pub activity: ActivityRule,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::Flda,
            seed: 1,
            duration_s: Some(150.0),
            max_iterations: None,
            eval_period_s: 0.0,
            activity: ActivityRule::Causal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    #[serde(rename = "K")]
    pub num_users: usize,
    #[serde(rename = "M")]
    pub channels: usize,
    pub p: f64,
    pub q: f64,
    #[serde(rename = "Ns")]
    pub payload_bits: u64,
    pub lambda: f64,
    pub access: AccessMode,
    #[serde(rename = "F_FL", skip_serializing_if = "Option::is_none")]
    pub f_fl: Option<u64>,
    #[serde(rename = "F_FD", skip_serializing_if = "Option::is_none")]
    pub f_fd: Option<u64>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            num_users: 20,
            channels: 4,
            p: 0.2,
            q: 0.5,
            payload_bits: 2008,
            lambda: 0.0,
            access: AccessMode::Frame,
            f_fl: None,
            f_fd: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningSection {
    pub alpha: f64,
    pub gamma: u64,
    pub mu: f64,
    pub beta: f64,
    /// Mini-batch size; omitted means the whole local dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Uploaded model size in bits; omitted means `32 * parameter count`.
    #[serde(rename = "N_FL", skip_serializing_if = "Option::is_none")]
    pub n_fl: Option<u64>,
    /// FLOPs per sample; omitted means the network's own count.
    #[serde(rename = "W", skip_serializing_if = "Option::is_none")]
    pub flops_per_sample: Option<u64>,
}

impl Default for LearningSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 100,
            mu: 0.01,
            beta: 1.0,
            batch_size: None,
            hidden: vec![64],
            activation: Activation::Relu,
            n_fl: Some(223_488),
            flops_per_sample: Some(256_896),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub modes: usize,
    pub spread: f64,
    /// Synthetic pool drawn per class before partitioning.
    pub per_class: usize,
    pub test_per_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// Cap on test samples taken from an IDX test file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub minority_labels: usize,
    pub minority_count: usize,
    pub majority_count: usize,
    pub replacement: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 10,
            dim: 16,
            modes: 2,
            spread: 0.15,
            per_class: 200,
            test_per_class: 500,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            test_limit: Some(5000),
            minority_labels: 2,
            minority_count: 2,
            majority_count: 62,
            replacement: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub psi: f64,
    pub f_clk: f64,
    #[serde(rename = "Theta")]
    pub theta: f64,
    pub eta: f64,
    #[serde(rename = "P_tx_dBm")]
    pub p_tx_dbm: f64,
    #[serde(rename = "P_circ")]
    pub p_circ: f64,
    #[serde(rename = "P_rx")]
    pub p_rx: f64,
    #[serde(rename = "R_tx")]
    pub r_tx: f64,
    #[serde(rename = "R_rx")]
    pub r_rx: f64,
    #[serde(rename = "B_max")]
    pub b_max: f64,
    /// Starting charge in joules; omitted means a full battery.
    #[serde(rename = "B_0", skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self {
            psi: 1e-30,
            f_clk: 2e9,
            theta: 8.0,
            eta: 0.5,
            p_tx_dbm: 3.3,
            p_circ: 1.33e-3,
            p_rx: 1.9e-3,
            r_tx: 1e6,
            r_rx: 1e6,
            b_max: 0.1,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestSection {
    pub r: f64,
    pub rho_bar: f64,
}

impl Default for HarvestSection {
    fn default() -> Self {
        Self {
            r: 1.0 / 50.0,
            rho_bar: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub run: RunSection,
    pub network: NetworkSection,
    pub learning: LearningSection,
    pub data: DataSection,
    pub energy: EnergySection,
    pub harvest: HarvestSection,
}

/// Every accepted `section.key`.
pub const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("run", &["mode", "seed", "duration_s", "max_iterations", "eval_period_s", "activity"]),
    ("network", &["K", "M", "p", "q", "Ns", "lambda", "access", "F_FL", "F_FD"]),
    (
        "learning",
        &["alpha", "gamma", "mu", "beta", "batch_size", "hidden", "activation", "N_FL", "W"],
    ),
    (
        "data",
        &[
            "source", "classes", "dim", "modes", "spread", "per_class", "test_per_class",
            "train_images", "train_labels", "test_images", "test_labels", "test_limit",
            "minority_labels", "minority_count", "majority_count", "replacement",
        ],
    ),
    (
        "energy",
        &["psi", "f_clk", "Theta", "eta", "P_tx_dBm", "P_circ", "P_rx", "R_tx", "R_rx", "B_max", "B_0"],
    ),
    ("harvest", &["r", "rho_bar"]),
];

/// Resolves `key` or `section.key` to its canonical `(section, key)`.
pub fn resolve_key(key: &str) -> Result<(&'static str, &'static str)> {
    if let Some((section, name)) = key.split_once('.') {
        for (s, keys) in KNOWN_KEYS {
            if *s == section {
                if let Some(k) = keys.iter().find(|k| **k == name) {
                    return Ok((s, k));
                }
            }
        }
        return Err(Error::config(key, "unknown key"));
    }
    let hits: Vec<_> = KNOWN_KEYS
        .iter()
        .flat_map(|(s, keys)| keys.iter().filter(|k| **k == key).map(move |k| (*s, *k)))
        .collect();
    match hits.as_slice() {
        [one] => Ok(*one),
        [] => Err(Error::config(key, "unknown key")),
        _ => Err(Error::config(key, "ambiguous key; qualify it with its section")),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides to a raw table.
pub fn apply_overrides(table: &mut Table, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let (section, name) = resolve_key(key.trim())?;
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(sec) = entry else {
            return Err(Error::config(section, "expected a section"));
        };
        sec.insert(name.to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl SimConfig {
    /// Parses and validates config text, applying overrides on top.
    pub fn from_str_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::ConfigParse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        for (section, value) in &table {
            if !KNOWN_KEYS.iter().any(|(s, _)| s == section) {
                return Err(Error::config(section.clone(), "unknown section"));
            }
            let Value::Table(inner) = value else {
                return Err(Error::config(section.clone(), "expected a section"));
            };
            let known = KNOWN_KEYS.iter().find(|(s, _)| s == section).unwrap().1;
            for k in inner.keys() {
                if !known.contains(&k.as_str()) {
                    return Err(Error::config(format!("{section}.{k}"), "unknown key"));
                }
            }
        }
        apply_overrides(&mut table, overrides)?;
        let cfg: SimConfig = table.try_into().map_err(|e: toml::de::Error| Error::ConfigParse {
            line: 0,
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_str_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_with(&text, overrides)
    }

    /// Re-parses this config with overrides applied.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_str_with(&self.to_toml(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if let Some(d) = r.duration_s {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::config("run.duration_s", "must be finite and >= 0"));
            }
        }
        if r.duration_s.is_none() && r.max_iterations.is_none() {
            return Err(Error::config("run.duration_s", "set duration_s or max_iterations"));
        }
        if r.seed > i64::MAX as u64 {
            return Err(Error::config("run.seed", "must fit in a signed 64-bit integer"));
        }
        if !(r.eval_period_s >= 0.0) {
            return Err(Error::config("run.eval_period_s", "must be >= 0"));
        }

        let n = &self.network;
        if n.num_users == 0 {
            return Err(Error::config("network.K", "must be >= 1"));
        }
        if n.channels == 0 {
            return Err(Error::config("network.M", "must be >= 1"));
        }
        if !(n.p > 0.0 && n.p <= 1.0) {
            return Err(Error::config("network.p", "must be in (0, 1]"));
        }
        if !(n.q > 0.0 && n.q <= 1.0) {
            return Err(Error::config("network.q", "must be in (0, 1]"));
        }
        if n.payload_bits == 0 {
            return Err(Error::config("network.Ns", "must be >= 1"));
        }
        if !(n.lambda >= 0.0) || !n.lambda.is_finite() {
            return Err(Error::config("network.lambda", "must be finite and >= 0"));
        }

        let l = &self.learning;
        PhaseSchedule::new(l.alpha, l.gamma).map_err(|e| {
            let key = if l.gamma == 0 { "learning.gamma" } else { "learning.alpha" };
            Error::config(key, e.to_string())
        })?;
        if !(l.mu > 0.0) {
            return Err(Error::config("learning.mu", "must be > 0"));
        }
        if !(l.beta >= 0.0) {
            return Err(Error::config("learning.beta", "must be >= 0"));
        }
        if l.batch_size == Some(0) {
            return Err(Error::config("learning.batch_size", "must be >= 1"));
        }
        if l.hidden.contains(&0) {
            return Err(Error::config("learning.hidden", "widths must be >= 1"));
        }
        if l.n_fl == Some(0) {
            return Err(Error::config("learning.N_FL", "must be >= 1"));
        }

        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "must be >= 2"));
        }
        if d.minority_labels > d.classes {
            return Err(Error::config("data.minority_labels", "exceeds class count"));
        }
        if d.source == DataSource::Synthetic {
            if d.dim == 0 {
                return Err(Error::config("data.dim", "must be >= 1"));
            }
            if d.modes == 0 {
                return Err(Error::config("data.modes", "must be >= 1"));
            }
            if !(d.spread >= 0.0) {
                return Err(Error::config("data.spread", "must be >= 0"));
            }
            if d.per_class == 0 || d.test_per_class == 0 {
                return Err(Error::config("data.per_class", "must be >= 1"));
            }
        } else {
            for (key, v) in [
                ("data.train_images", &d.train_images),
                ("data.train_labels", &d.train_labels),
                ("data.test_images", &d.test_images),
                ("data.test_labels", &d.test_labels),
            ] {
                if v.is_none() {
                    return Err(Error::config(key, "required when source = \"idx\""));
                }
            }
        }
        if d.minority_labels * d.minority_count + (d.classes - d.minority_labels) * d.majority_count == 0 {
            return Err(Error::config("data.majority_count", "local datasets would be empty"));
        }

        self.energy_params().validate().map_err(|e| match e {
            Error::ConfigValue { key, message } => Error::config(format!("energy.{key}"), message),
            other => other,
        })?;
        let e = &self.energy;
        if !(e.b_max > 0.0) {
            return Err(Error::config("energy.B_max", "must be > 0"));
        }
        if let Some(b0) = e.initial {
            if !(0.0..=e.b_max).contains(&b0) {
                return Err(Error::config("energy.B_0", "must be within [0, B_max]"));
            }
        }
        let h = &self.harvest;
        if !(h.r > 0.0) {
            return Err(Error::config("harvest.r", "must be > 0"));
        }
        if !(h.rho_bar >= 0.0) {
            return Err(Error::config("harvest.rho_bar", "must be >= 0"));
        }
        Ok(())
    }

    /// Schedule implied by the mode: FL and FD are the `alpha = 0` and
    /// `alpha = 1` ends of the alternation.
    pub fn schedule(&self) -> PhaseSchedule {
        let alpha = match self.run.mode {
            Mode::Fl => 0.0,
            Mode::Fd => 1.0,
            Mode::Flda => self.learning.alpha,
        };
        PhaseSchedule::new(alpha, self.learning.gamma).expect("validated")
    }

    pub fn slot_s(&self) -> f64 {
        self.network.payload_bits as f64 / self.energy.r_tx
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig {
            channels: self.network.channels,
            access_prob: self.network.p,
            payload_bits: self.network.payload_bits,
            code_rate: self.network.q,
            slot_s: self.slot_s(),
            mode: self.network.access,
        }
    }

    /// Hardware constants with `W` and `|B|` filled in for the given network.
    pub fn energy_params_for(&self, flops_per_sample: u64, batch: usize) -> EnergyParams {
        let e = &self.energy;
        EnergyParams {
            capacitance: e.psi,
            clock_hz: e.f_clk,
            flops_per_cycle: e.theta,
            flops_per_sample,
            batch,
            pa_efficiency: e.eta,
            tx_power_w: dbm_to_watts(e.p_tx_dbm),
            circuit_power_w: e.p_circ,
            rx_power_w: e.p_rx,
            uplink_bps: e.r_tx,
            downlink_bps: e.r_rx,
        }
    }

    fn energy_params(&self) -> EnergyParams {
        self.energy_params_for(self.learning.flops_per_sample.unwrap_or(1), 1)
    }

    pub fn samples_per_user(&self) -> usize {
        let d = &self.data;
        d.minority_labels * d.minority_count + (d.classes - d.minority_labels) * d.majority_count
    }

    /// Flat `section.key -> value` view.
    pub fn flat(&self) -> BTreeMap<String, String> {
        let table: Table = Table::try_from(self).expect("config serialises");
        let mut out = BTreeMap::new();
        for (s, v) in table {
            if let Value::Table(inner) = v {
                for (k, v) in inner {
                    out.insert(format!("{s}.{k}"), v.to_string());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = SimConfig::parse("").unwrap();
        assert_eq!(cfg, SimConfig::default());
        assert_eq!(cfg.network.num_users, 20);
        assert_eq!(cfg.network.channels, 4);
        assert_eq!(cfg.learning.n_fl, Some(223_488));
        assert_eq!(cfg.learning.flops_per_sample, Some(256_896));
        assert_eq!(cfg.energy.b_max, 0.1);
        assert!((cfg.slot_s() - 2.008e-3).abs() < 1e-15);
    }

    #[test]
    fn negative_lambda_names_the_key() {
        let err = SimConfig::parse("[network]\nlambda = -1\n").unwrap_err();
        match err {
            Error::ConfigValue { key, .. } => assert_eq!(key, "network.lambda"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(SimConfig::parse("[network]\nbogus = 1\n").is_err());
        assert!(SimConfig::parse("[nonsense]\n").is_err());
        assert!(resolve_key("bogus").is_err());
    }

    #[test]
    fn parse_errors_report_line() {
        let err = SimConfig::parse("[run]\nseed = 1\nmode = = 3\n").unwrap_err();
        match err {
            Error::ConfigParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_apply_and_resolve_bare_keys() {
        let o = vec![parse_override("alpha=0").unwrap(), parse_override("network.lambda = 3").unwrap()];
        let cfg = SimConfig::from_str_with("[run]\nmode = \"flda\"\n", &o).unwrap();
        assert_eq!(cfg.learning.alpha, 0.0);
        assert_eq!(cfg.network.lambda, 3.0);
        assert_eq!(cfg.schedule().fd_iterations(), 0);
        let cfg = SimConfig::from_str_with("", &[parse_override("mode=fd").unwrap()]).unwrap();
        assert_eq!(cfg.run.mode, Mode::Fd);
        assert!(SimConfig::from_str_with("", &[parse_override("lambda=-2").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    proptest! {
        #[test]
        fn write_then_parse_roundtrips(
            lambda in 0.0f64..10.0, alpha in 0.0f64..=1.0, gamma in 1u64..2000,
            k in 1usize..50, mu in 1e-4f64..1.0, batch in proptest::option::of(1usize..600),
            f_fl in proptest::option::of(300u64..400), seed in 0u64..=i64::MAX as u64,
        ) {
            let mut cfg = SimConfig::default();
            cfg.network.lambda = lambda;
            cfg.learning.alpha = alpha;
            cfg.learning.gamma = gamma;
            cfg.network.num_users = k;
            cfg.learning.mu = mu;
            cfg.learning.batch_size = batch;
            cfg.network.f_fl = f_fl;
            cfg.run.seed = seed;
            let back = SimConfig::parse(&cfg.to_toml()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
