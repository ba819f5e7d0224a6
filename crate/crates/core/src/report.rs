//! CSV emission. Every file starts with a header row and floats carry nine
//! significant digits, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::orchestrator::{EnergyRow, MetricsTrace, SlotEvent};

pub const TRACE_HEADER: &str =
    "time_s,iteration,phase,mean_accuracy,mean_battery,mean_energy_j,updates_received";
pub const SLOT_HEADER: &str = "t,z,channel,device,background_count,clean";
pub const ENERGY_HEADER: &str = "t,z,device,harvested_J,spent_tx_J,spent_rx_J,spent_cmp_J,level_J";

/// Formats `x` with nine significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn trace_csv(trace: &MetricsTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for p in &trace.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            sig9(p.time_s),
            p.iteration,
            p.phase.map_or("init", |ph| ph.as_str()),
            sig9(p.mean_accuracy),
            sig9(p.mean_battery),
            sig9(p.mean_energy_j),
            p.updates_received
        );
    }
    out
}

pub fn slot_log_csv(events: &[SlotEvent]) -> String {
    let mut out = String::from(SLOT_HEADER);
    out.push('\n');
    for e in events {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.iteration, e.slot, e.channel, e.device, e.background, e.clean as u8
        );
    }
    out
}

pub fn energy_log_csv(rows: &[EnergyRow]) -> String {
    let mut out = String::from(ENERGY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.slot,
            r.device,
            sig9(r.harvested.joules()),
            sig9(r.spent_tx.joules()),
            sig9(r.spent_rx.joules()),
            sig9(r.spent_cmp.joules()),
            sig9(r.level.joules())
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(path: &Path, model: &ModelParams<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_bytes(&bytes)
}
