//! Battery dynamics, computation and transceiver costs, and compound-Poisson
//! energy harvesting.
//!
//! Battery bookkeeping is done in integer femtojoules so that
//! `initial + harvested - spent == final` holds exactly over a run.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::phy::SubpacketPlan;

const FEMTO_PER_JOULE: f64 = 1e15;

/// An amount of energy, stored as whole femtojoules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct Energy(u64);

impl Energy {
    pub const ZERO: Energy = Energy(0);

    /// Rounds to the nearest femtojoule; negative and NaN inputs become zero.
    pub fn from_joules(j: f64) -> Self {
        if !(j > 0.0) {
            return Energy(0);
        }
        Energy((j * FEMTO_PER_JOULE).round() as u64)
    }

    pub fn from_femtojoules(fj: u64) -> Self {
        Energy(fj)
    }

    pub fn femtojoules(self) -> u64 {
        self.0
    }

    pub fn joules(self) -> f64 {
        self.0 as f64 / FEMTO_PER_JOULE
    }

    pub fn saturating_sub(self, rhs: Energy) -> Energy {
        Energy(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Energy {
    type Output = Energy;
    fn add(self, rhs: Energy) -> Energy {
        Energy(self.0 + rhs.0)
    }
}

impl AddAssign for Energy {
    fn add_assign(&mut self, rhs: Energy) {
        self.0 += rhs.0;
    }
}

impl Sub for Energy {
    type Output = Energy;
    fn sub(self, rhs: Energy) -> Energy {
        Energy(self.0 - rhs.0)
    }
}

impl Mul<u64> for Energy {
    type Output = Energy;
    fn mul(self, rhs: u64) -> Energy {
        Energy(self.0 * rhs)
    }
}

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} J", self.joules())
    }
}

/// Radiated power for a level given in dBm.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

/// Device hardware constants. Powers in watts, rates in bit/s.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyParams {
    pub capacitance: f64,
    pub clock_hz: f64,
    pub flops_per_cycle: f64,
    pub flops_per_sample: u64,
    pub batch: usize,
    pub pa_efficiency: f64,
    pub tx_power_w: f64,
    pub circuit_power_w: f64,
    pub rx_power_w: f64,
    pub uplink_bps: f64,
    pub downlink_bps: f64,
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("psi", self.capacitance),
            ("f_clk", self.clock_hz),
            ("theta", self.flops_per_cycle),
            ("p_tx", self.tx_power_w),
            ("p_circ", self.circuit_power_w),
            ("p_rx", self.rx_power_w),
            ("r_tx", self.uplink_bps),
            ("r_rx", self.downlink_bps),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be finite and > 0"));
            }
        }
        if !(self.pa_efficiency > 0.0 && self.pa_efficiency <= 1.0) {
            return Err(Error::config("eta", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Computation energy `psi * (W * |B| / Theta) * f_clk^2`.
pub fn e_cmp(p: &EnergyParams) -> f64 {
    let flops = p.flops_per_sample as f64 * p.batch as f64;
    p.capacitance * (flops / p.flops_per_cycle) * p.clock_hz * p.clock_hz
}

/// Transmit-side power draw `P_tx / eta + P_circ`.
pub fn p_total(p: &EnergyParams) -> f64 {
    p.tx_power_w / p.pa_efficiency + p.circuit_power_w
}

pub fn e_tx(p: &EnergyParams, bits: u64) -> f64 {
    p_total(p) * bits as f64 / p.uplink_bps
}

pub fn e_rx(p: &EnergyParams, bits: u64) -> f64 {
    p.rx_power_w * bits as f64 / p.downlink_bps
}

/// Cost of sending one subpacket slot.
pub fn tx_slot_cost(p: &EnergyParams, slot_s: f64) -> f64 {
    slot_s * p_total(p)
}

/// One harvested energy unit: the FL round cost spread over the FL frame,
/// `(E_tx(N_FL) + E_rx(N_FL) + E_cmp) / F_FL`.
pub fn energy_unit(p: &EnergyParams, fl_plan: &SubpacketPlan) -> f64 {
    (e_tx(p, fl_plan.bits) + e_rx(p, fl_plan.bits) + e_cmp(p)) / fl_plan.total as f64
}

/// Compound-Poisson income: `Poisson(r)` arrivals per slot, each bringing
/// `Poisson(rho / r)` units.
#[derive(Debug, Clone, PartialEq)]
pub struct EhParams {
    pub rate: f64,
    pub mean_units: f64,
    pub unit: Energy,
}

impl EhParams {
    pub fn new(rate: f64, mean_units: f64, unit: Energy) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::config("r", "must be finite and > 0"));
        }
        if !(mean_units >= 0.0) || !mean_units.is_finite() {
            return Err(Error::config("rho_bar", "must be finite and >= 0"));
        }
        if unit == Energy::ZERO {
            return Err(Error::invalid("energy unit must be > 0"));
        }
        Ok(Self {
            rate,
            mean_units,
            unit,
        })
    }

    pub fn mean_per_slot(&self) -> f64 {
        self.mean_units * self.unit.joules()
    }
}

/// Units harvested in one slot.
pub fn harvest_units(eh: &EhParams, rng: &mut impl Rng) -> u64 {
    if eh.mean_units == 0.0 {
        return 0;
    }
    let arrivals = sample_poisson(eh.rate, rng);
    if arrivals == 0 {
        return 0;
    }
    // a sum of `arrivals` independent Poisson(rho/r) draws
    sample_poisson(arrivals as f64 * eh.mean_units / eh.rate, rng)
}

/// Energy harvested in one slot.
pub fn harvest_slot(eh: &EhParams, rng: &mut impl Rng) -> Energy {
    eh.unit * harvest_units(eh, rng)
}

fn sample_poisson(mean: f64, rng: &mut impl Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Battery {
    level: Energy,
    capacity: Energy,
}

impl Battery {
    pub fn new(level: Energy, capacity: Energy) -> Result<Self> {
        if level > capacity {
            return Err(Error::invalid("battery level above capacity"));
        }
        Ok(Self { level, capacity })
    }

    pub fn full(capacity: Energy) -> Self {
        Self {
            level: capacity,
            capacity,
        }
    }

    pub fn level(&self) -> Energy {
        self.level
    }

    pub fn capacity(&self) -> Energy {
        self.capacity
    }

    pub fn normalized(&self) -> f64 {
        if self.capacity == Energy::ZERO {
            0.0
        } else {
            self.level.femtojoules() as f64 / self.capacity.femtojoules() as f64
        }
    }

    pub fn can_afford(&self, cost: Energy) -> bool {
        self.level >= cost
    }

    /// Stores as much of `income` as fits; returns the stored amount.
    pub fn charge(&mut self, income: Energy) -> Energy {
        let stored = income.min(self.capacity - self.level);
        self.level += stored;
        stored
    }

    /// Pays `cost` if the level covers it.
    pub fn spend(&mut self, cost: Energy) -> bool {
        if self.level >= cost {
            self.level = self.level - cost;
            true
        } else {
            false
        }
    }
}

/// Per-event costs for [`battery_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepCosts {
    pub tx: Energy,
    pub rx: Energy,
    pub cmp: Energy,
}

/// Which events of a step actually happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEvents {
    pub stored: Energy,
    pub tx: bool,
    pub rx: bool,
    pub cmp: bool,
}

/// One slot of the battery recursion: harvest (clamped at capacity), then
/// transmission, reception and computation, each skipped if the remaining
/// level cannot cover it.
pub fn battery_step(
    b: &mut Battery,
    harvested: Energy,
    spend_tx: bool,
    spend_rx: bool,
    spend_cmp: bool,
    costs: &StepCosts,
) -> StepEvents {
    let stored = b.charge(harvested);
    let tx = spend_tx && b.spend(costs.tx);
    let rx = spend_rx && b.spend(costs.rx);
    let cmp = spend_cmp && b.spend(costs.cmp);
    StepEvents { stored, tx, rx, cmp }
}

/// Running totals for one device, used to audit conservation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnergyLedger {
    pub initial: Energy,
    pub harvested: Energy,
    pub stored: Energy,
    pub spent_tx: Energy,
    pub spent_rx: Energy,
    pub spent_cmp: Energy,
}

impl EnergyLedger {
    pub fn new(initial: Energy) -> Self {
        Self {
            initial,
            ..Default::default()
        }
    }

    pub fn spent(&self) -> Energy {
        self.spent_tx + self.spent_rx + self.spent_cmp
    }

    /// `initial + stored - spent`, which must equal the battery level.
    pub fn expected_level(&self) -> Energy {
        self.initial + self.stored - self.spent()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    pub(crate) fn table_one() -> EnergyParams {
        EnergyParams {
            capacitance: 1e-30,
            clock_hz: 2e9,
            flops_per_cycle: 8.0,
            flops_per_sample: 256_896,
            batch: 500,
            pa_efficiency: 0.5,
            tx_power_w: dbm_to_watts(3.3),
            circuit_power_w: 1.33e-3,
            rx_power_w: 1.9e-3,
            uplink_bps: 1e6,
            downlink_bps: 1e6,
        }
    }

    #[test]
    fn computation_energy() {
        let p = table_one();
        assert!((e_cmp(&p) - 6.4224e-5).abs() < 1e-15);
        assert_eq!(e_cmp(&EnergyParams { batch: 0, ..p.clone() }), 0.0);
        let fast = EnergyParams {
            clock_hz: 4e9,
            ..p.clone()
        };
        assert!((e_cmp(&fast) / e_cmp(&p) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn transceiver_energy() {
        let p = table_one();
        assert_eq!(e_tx(&p, 0), 0.0);
        assert_eq!(e_rx(&p, 0), 0.0);
        assert!((e_tx(&p, 6400) - 2.0 * e_tx(&p, 3200)).abs() < 1e-18);
        assert!((e_rx(&p, 3200) - 6.08e-6).abs() < 1e-18);
        assert!((p_total(&p) - (dbm_to_watts(3.3) / 0.5 + 1.33e-3)).abs() < 1e-15);
        assert!((dbm_to_watts(3.3) - 2.13796e-3).abs() < 1e-8);
    }

    #[test]
    fn energy_unit_spreads_fl_round_cost() {
        let p = table_one();
        let plan = SubpacketPlan {
            bits: 223_488,
            info: 112,
            total: 224,
        };
        let unit = energy_unit(&p, &plan);
        let round = e_tx(&p, plan.bits) + e_rx(&p, plan.bits) + e_cmp(&p);
        assert!((unit * 224.0 - round).abs() < 1e-15);
        // mean harvest over an FL frame and an FD frame at rho = 0.4
        assert!((0.4 * unit * 224.0 - 0.4 * round).abs() < 1e-15);
        assert!((0.4 * unit * 4.0 - 0.4 * round * 4.0 / 224.0).abs() < 1e-15);
    }

    #[test]
    fn zero_income_harvests_nothing() {
        let eh = EhParams::new(0.02, 0.0, Energy::from_joules(1e-6)).unwrap();
        let mut rng = stream(1, Stream::Harvest);
        assert!((0..1000).all(|_| harvest_slot(&eh, &mut rng) == Energy::ZERO));
    }

    #[test]
    fn harvest_is_whole_units() {
        let unit = Energy::from_joules(7.5e-6);
        let eh = EhParams::new(0.02, 0.4, unit).unwrap();
        let mut rng = stream(2, Stream::Harvest);
        for _ in 0..10_000 {
            assert_eq!(harvest_slot(&eh, &mut rng).femtojoules() % unit.femtojoules(), 0);
        }
    }

    #[test]
    fn battery_step_rules() {
        let cap = Energy::from_joules(0.1);
        let costs = StepCosts {
            tx: Energy::from_joules(1e-5),
            rx: Energy::from_joules(2e-5),
            cmp: Energy::from_joules(3e-5),
        };
        let mut full = Battery::full(cap);
        let ev = battery_step(&mut full, Energy::from_joules(1e-3), false, false, false, &costs);
        assert_eq!(full.level(), cap);
        assert_eq!(ev.stored, Energy::ZERO);

        let mut exact = Battery::new(costs.cmp, cap).unwrap();
        let ev = battery_step(&mut exact, Energy::ZERO, false, false, true, &costs);
        assert!(ev.cmp);
        assert_eq!(exact.level(), Energy::ZERO);

        let mut low = Battery::new(Energy::from_joules(5e-6), cap).unwrap();
        let ev = battery_step(&mut low, Energy::ZERO, true, false, false, &costs);
        assert!(!ev.tx);
        assert_eq!(low.level(), Energy::from_joules(5e-6));
    }

    proptest! {
        #[test]
        fn battery_stays_in_bounds_and_conserves(
            events in proptest::collection::vec((0u64..5_000, any::<bool>(), any::<bool>(), any::<bool>()), 1..400),
            start in 0u64..10_000,
        ) {
            let cap = Energy::from_femtojoules(10_000);
            let costs = StepCosts {
                tx: Energy::from_femtojoules(700),
                rx: Energy::from_femtojoules(1_300),
                cmp: Energy::from_femtojoules(2_900),
            };
            let mut b = Battery::new(Energy::from_femtojoules(start), cap).unwrap();
            let mut ledger = EnergyLedger::new(b.level());
            for (h, tx, rx, cmp) in events {
                let ev = battery_step(&mut b, Energy::from_femtojoules(h), tx, rx, cmp, &costs);
                ledger.harvested += Energy::from_femtojoules(h);
                ledger.stored += ev.stored;
                if ev.tx { ledger.spent_tx += costs.tx; }
                if ev.rx { ledger.spent_rx += costs.rx; }
                if ev.cmp { ledger.spent_cmp += costs.cmp; }
                prop_assert!(b.level() <= cap);
                prop_assert_eq!(ledger.expected_level(), b.level());
            }
        }
    }
}
