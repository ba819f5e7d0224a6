//! The acceptance suite, shared by `flda validate` and the test target.
//!
//! Every tolerance is a named constant here so both front ends apply the
//! same bar.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::analytic::{argmax_p_a, p_a, p_ma, p_s, rho_flda, ThroughputQuery};
use crate::config::{Mode, SimConfig};
use crate::energy::{battery_step, e_cmp, harvest_slot, Battery, EhParams, Energy, StepCosts};
use crate::error::Result;
use crate::gradcheck::GradCase;
use crate::model::logit_table_bits;
use crate::orchestrator::{energy_to_target, mean_trace, MetricsTrace, RunConstants, Simulation};
use crate::phy::{simulate_frame, subpacket_plan, FrameConfig};
use crate::report;
use crate::rng::{self, Stream};

pub const MC_FRAMES: usize = 100_000;
pub const MC_SIGMAS: f64 = 3.0;
pub const ARGMAX_STEP: f64 = 1e-3;
pub const GRAD_CASES: usize = 24;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const E_CMP_TABLE: f64 = 6.4224e-5;
pub const E_CMP_REL_TOL: f64 = 1e-12;
pub const BATTERY_STEPS: usize = 1_000_000;
pub const HARVEST_SLOTS: usize = 10_000_000;
pub const HARVEST_REL_TOL: f64 = 0.01;
pub const LEARNING_SEEDS: u64 = 10;
pub const REQUIRED_SEEDS: usize = 8;
pub const ACCURACY_TARGETS: [f64; 3] = [0.6, 0.7, 0.8];
pub const ENERGY_RATIO: f64 = 0.5;
pub const PLATEAU_TOL: f64 = 0.02;
pub const TABLE_F_FL: u64 = 220;

/// Seed used by the Monte-Carlo and randomized checks.
const CHECK_SEED: u64 = 20_240_611;

#[derive(Debug, Clone, Default)]
pub struct ValidationOptions {
    /// Where to write the traces of the learning study, if anywhere.
    pub out_dir: Option<PathBuf>,
    /// Restricts the run to these criteria; empty runs all.
    pub only: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} [{}] {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn report(id: u32, name: &'static str, outcome: Result<(bool, String)>) -> CriterionReport {
    match outcome {
        Ok((passed, detail)) => CriterionReport {
            id,
            name,
            passed,
            detail,
        },
        Err(e) => CriterionReport {
            id,
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

type Check = fn() -> Result<(bool, String)>;

/// Runs the selected criteria in order.
pub fn run_all(opts: &ValidationOptions) -> Vec<CriterionReport> {
    run_with(opts, |_| {})
}

/// Like [`run_all`], calling `each` as soon as a criterion finishes. Each
/// detail line ends with the criterion's wall-clock time.
pub fn run_with(opts: &ValidationOptions, mut each: impl FnMut(&CriterionReport)) -> Vec<CriterionReport> {
    let wanted = |id: u32| opts.only.is_empty() || opts.only.contains(&id);
    let mut out = Vec::new();
    let mut emit = |mut r: CriterionReport, started: Instant| {
        r.detail.push_str(&format!(" [{:.1} s]", started.elapsed().as_secs_f64()));
        each(&r);
        out.push(r);
    };
    let simple: [(u32, &'static str, Check); 6] = [
        (1, "analytic vs Monte-Carlo throughput", throughput_agreement),
        (2, "degenerate closed-form identities", closed_form_identities),
        (3, "access probability maximiser", access_maximiser),
        (4, "gradient correctness", gradient_correctness),
        (5, "subpacket arithmetic", subpacket_arithmetic),
        (6, "energy accounting", energy_accounting),
    ];
    for (id, name, check) in simple {
        if wanted(id) {
            let started = Instant::now();
            emit(report(id, name, check()), started);
        }
    }
    if wanted(7) || wanted(8) {
        const ORDERING: &str = "desk-scale learning ordering";
        const ROBUSTNESS: &str = "robustness to background traffic";
        // both criteria share the same runs; the time is reported on each
        let started = Instant::now();
        match LearningStudy::run(&desk_config(), LEARNING_SEEDS) {
            Ok(study) => {
                if let Some(dir) = &opts.out_dir {
                    if let Err(e) = study.write(dir) {
                        eprintln!("warning: could not write study traces: {e}");
                    }
                }
                if wanted(7) {
                    emit(report(7, ORDERING, Ok(study.ordering())), started);
                }
                if wanted(8) {
                    emit(report(8, ROBUSTNESS, Ok(study.robustness())), started);
                }
            }
            Err(e) => {
                for (id, name) in [(7, ORDERING), (8, ROBUSTNESS)] {
                    if wanted(id) {
                        emit(report(id, name, Ok((false, format!("error: {e}")))), started);
                    }
                }
            }
        }
    }
    if wanted(9) {
        let started = Instant::now();
        emit(report(9, "compound-Poisson harvest mean", harvest_mean()), started);
    }
    out
}

fn query(lambda: f64, d: u64, q: f64) -> ThroughputQuery {
    ThroughputQuery {
        access_prob: 0.2,
        channels: 4,
        active_users: 20.0,
        lambda,
        info_subpackets: d,
        code_rate: q,
    }
}

/// Per-device success rate over `frames` frames with 20 always-attempting
/// devices, and its standard error from the per-frame success fraction.
pub fn simulated_success_rate(lambda: f64, d: u64, q: f64, frames: usize, seed: u64) -> Result<(f64, f64)> {
    let ns = 2008;
    let cfg = FrameConfig::new(4, 0.2, ns, q, ns as f64 / 1e6)?;
    let plan = subpacket_plan(d * ns, &cfg)?;
    let attempting = vec![true; 20];
    let mut access = rng::stream(seed, Stream::Access);
    let mut background = rng::stream(seed, Stream::Background);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..frames {
        let f = simulate_frame(&attempting, plan, &cfg, lambda, &mut access, &mut background)?;
        let x = f.success_count() as f64 / attempting.len() as f64;
        sum += x;
        sq += x * x;
    }
    let n = frames as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

fn throughput_agreement() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut k = 0;
    for lambda in [0.0, 1.5, 3.0] {
        for q in [0.5, 1.0] {
            for d in [1u64, 2, 5] {
                k += 1;
                let (rate, se) = simulated_success_rate(lambda, d, q, MC_FRAMES, CHECK_SEED + k)?;
                let exact = p_ma(&query(lambda, d, q));
                let z = (rate - exact).abs() / se.max(f64::MIN_POSITIVE);
                worst = worst.max(z);
                if z > MC_SIGMAS {
                    failures.push(format!("(lambda={lambda}, q={q}, D={d}): {rate:.5} vs {exact:.5}"));
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("18 grid points, {MC_FRAMES} frames each, worst deviation {worst:.2} sigma (limit {MC_SIGMAS})")
    } else {
        format!("outside {MC_SIGMAS} sigma at {}", failures.join("; "))
    };
    Ok((failures.is_empty(), detail))
}

fn closed_form_identities() -> Result<(bool, String)> {
    let mut bad = Vec::new();
    for (p, m, k) in [(0.2, 4, 20.0), (0.05, 2, 7.5), (1.0, 1, 1.0), (0.6, 8, 33.0)] {
        for d in [1u64, 2, 5, 112] {
            for q in [0.25, 0.5, 1.0] {
                for lambda in [0.0, 0.7, 3.0] {
                    let base = ThroughputQuery {
                        access_prob: p,
                        channels: m,
                        active_users: k,
                        lambda,
                        info_subpackets: d,
                        code_rate: q,
                    };
                    let quiet = ThroughputQuery { lambda: 0.0, ..base };
                    if p_ma(&quiet) != p_a(&quiet) {
                        bad.push(format!("p_ma(lambda=0) != p_a at {base:?}"));
                    }
                    let uncoded = ThroughputQuery { code_rate: 1.0, ..base };
                    if p_ma(&uncoded) != p_a(&uncoded) * p_s(lambda, m).powi(d as i32) {
                        bad.push(format!("p_ma(q=1) != p_a p_s^D at {base:?}"));
                    }
                }
            }
        }
    }
    for (fd, fl) in [(0.97, 0.33), (1.5, 0.0), (0.0, 2.0)] {
        if rho_flda(0.0, fd, fl) != fl || rho_flda(1.0, fd, fl) != fd {
            bad.push(format!("rho_FLDA endpoints at ({fd}, {fl})"));
        }
    }
    let detail = if bad.is_empty() {
        "p_ma(lambda=0)=p_a, p_ma(q=1)=p_a*p_s^D and rho_FLDA endpoints hold with exact equality".to_string()
    } else {
        bad.join("; ")
    };
    Ok((bad.is_empty(), detail))
}

fn access_maximiser() -> Result<(bool, String)> {
    let mut parts = Vec::new();
    let mut ok = true;
    for (m, k) in [(4usize, 20.0f64), (2, 10.0), (1, 5.0)] {
        let best = argmax_p_a(m, k, ARGMAX_STEP);
        let expected = m as f64 / k;
        let hit = (best - expected).abs() <= ARGMAX_STEP + 1e-12;
        ok &= hit;
        parts.push(format!("(M={m}, K={k}) -> {best:.3} (M/K={expected:.3})"));
    }
    Ok((ok, parts.join(", ")))
}

fn gradient_correctness() -> Result<(bool, String)> {
    let mut rng = rng::stream(CHECK_SEED, Stream::Validation);
    let mut worst = [0.0f64; 3];
    for _ in 0..GRAD_CASES {
        let case = GradCase::random(&mut rng)?;
        for (w, e) in worst.iter_mut().zip(case.errors(GRAD_STEP)?) {
            *w = w.max(e);
        }
    }
    let ok = worst.iter().all(|&e| e < GRAD_TOL);
    Ok((
        ok,
        format!(
            "{GRAD_CASES} random networks, max relative error grad_fl {:.1e}, grad_fd(beta=0) {:.1e}, grad_fd(beta=1) {:.1e} (limit {GRAD_TOL:.0e})",
            worst[0], worst[1], worst[2]
        ),
    ))
}

fn subpacket_arithmetic() -> Result<(bool, String)> {
    let cfg = SimConfig::default();
    let frame = cfg.frame_config();
    let fd = subpacket_plan(3200, &frame)?;
    let fl = subpacket_plan(cfg.learning.n_fl.unwrap_or(223_488), &frame)?;
    let overridden = cfg.with_overrides(&[("network.F_FL".into(), TABLE_F_FL.to_string())])?;
    let consts = RunConstants::new(&overridden, cfg.data.dim, cfg.data.classes)?;
    let ok = fd.info == 2
        && fd.total == 4
        && logit_table_bits(10) == 3200
        && fl.info == 112
        && fl.total == 224
        && consts.fl_plan.total == TABLE_F_FL
        && consts.fl_plan.info == 112;
    Ok((
        ok,
        format!(
            "FD: N=3200 -> D={}, F={}; FL: N={} -> D={}, F={} by formula while the tabulated value is {TABLE_F_FL} \
             (documented deviation; override network.F_FL={TABLE_F_FL} yields F={})",
            fd.info, fd.total, fl.bits, fl.info, fl.total, consts.fl_plan.total
        ),
    ))
}

fn energy_accounting() -> Result<(bool, String)> {
    let cfg = SimConfig::default();
    // tabulated network: W = 256896 FLOPs per sample, |B| = 500
    let params = cfg.energy_params_for(256_896, 500);
    let cmp = e_cmp(&params);
    let cmp_ok = ((cmp - E_CMP_TABLE) / E_CMP_TABLE).abs() < E_CMP_REL_TOL;

    // conservation over full runs of every mode
    let mut conserved = true;
    for mode in [Mode::Fl, Mode::Fd, Mode::Flda] {
        let mut c = desk_config();
        c.run.mode = mode;
        c.run.duration_s = Some(30.0);
        c.run.eval_period_s = 30.0;
        c.energy.initial = Some(0.01);
        let mut sim = Simulation::new(&c)?;
        sim.run()?;
        conserved &= sim.energy_conserved();
    }

    // randomized event streams
    let mut rng = rng::stream(CHECK_SEED, Stream::Validation);
    let cap = Energy::from_joules(0.1);
    let mut b = Battery::full(cap);
    let mut level = cap;
    let mut in_bounds = true;
    let mut exact = true;
    for _ in 0..BATTERY_STEPS {
        let costs = StepCosts {
            tx: Energy::from_femtojoules(rng.random_range(0..2_000_000_000_000)),
            rx: Energy::from_femtojoules(rng.random_range(0..20_000_000_000_000)),
            cmp: Energy::from_femtojoules(rng.random_range(0..20_000_000_000_000)),
        };
        let income = Energy::from_femtojoules(rng.random_range(0..10_000_000_000_000));
        let ev = battery_step(&mut b, income, rng.random_bool(0.5), rng.random_bool(0.3), rng.random_bool(0.3), &costs);
        level += ev.stored;
        for (hit, cost) in [(ev.tx, costs.tx), (ev.rx, costs.rx), (ev.cmp, costs.cmp)] {
            if hit {
                level = level - cost;
            }
        }
        in_bounds &= b.level() <= cap;
        exact &= b.level() == level;
    }
    Ok((
        cmp_ok && conserved && in_bounds && exact,
        format!(
            "E_cmp = {:.6e} J (table {E_CMP_TABLE:e}); conservation over FL/FD/FLDA runs: {}; \
             {BATTERY_STEPS} random steps within [0, B_max]: {}, bookkeeping exact: {}",
            cmp, conserved, in_bounds, exact
        ),
    ))
}

fn harvest_mean() -> Result<(bool, String)> {
    let cfg = SimConfig::default();
    let consts = RunConstants::new(&cfg, cfg.data.dim, cfg.data.classes)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, rho) in [0.2, 0.4, 0.8].into_iter().enumerate() {
        let eh = EhParams::new(1.0 / 50.0, rho, consts.unit)?;
        let mut rng = rng::substream(CHECK_SEED, Stream::Harvest, i as u64);
        let mut total = 0u128;
        for _ in 0..HARVEST_SLOTS {
            total += harvest_slot(&eh, &mut rng).femtojoules() as u128;
        }
        let mean = total as f64 / HARVEST_SLOTS as f64 / 1e15;
        let rel = (mean - eh.mean_per_slot()) / eh.mean_per_slot();
        ok &= rel.abs() < HARVEST_REL_TOL;
        parts.push(format!("rho={rho}: {:+.3}%", 100.0 * rel));
    }
    Ok((
        ok,
        format!(
            "{HARVEST_SLOTS} slots per point, relative error vs rho*unit: {} (limit {}%)",
            parts.join(", "),
            100.0 * HARVEST_REL_TOL
        ),
    ))
}

/// The desk-scale configuration used by the learning criteria: the default
/// network and energy model with a small synthetic task and a 150 s budget.
pub fn desk_config() -> SimConfig {
    SimConfig::parse(DESK_TOML).expect("desk configuration parses")
}

pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");

/// Paired-seed runs shared by the ordering and robustness criteria.
#[derive(Debug, Clone)]
pub struct LearningStudy {
    pub seeds: Vec<u64>,
    pub fl_busy: Vec<MetricsTrace>,
    pub fd_busy: Vec<MetricsTrace>,
    pub flda_busy: Vec<MetricsTrace>,
    pub fl_quiet: Vec<MetricsTrace>,
    pub flda_quiet: Vec<MetricsTrace>,
}

pub const BUSY_LAMBDA: f64 = 3.0;

impl LearningStudy {
    pub fn run(base: &SimConfig, seeds: u64) -> Result<Self> {
        let seeds: Vec<u64> = (1..=seeds).collect();
        let jobs: Vec<(Mode, f64, u64)> = [
            (Mode::Fl, BUSY_LAMBDA),
            (Mode::Fd, BUSY_LAMBDA),
            (Mode::Flda, BUSY_LAMBDA),
            (Mode::Fl, 0.0),
            (Mode::Flda, 0.0),
        ]
        .iter()
        .flat_map(|&(m, l)| seeds.iter().map(move |&s| (m, l, s)))
        .collect();
        let traces: Vec<MetricsTrace> = jobs
            .par_iter()
            .map(|&(mode, lambda, seed)| {
                let mut c = base.clone();
                c.run.mode = mode;
                c.network.lambda = lambda;
                c.run.seed = seed;
                Simulation::new(&c)?.run()
            })
            .collect::<Result<_>>()?;
        let mut groups = traces.chunks(seeds.len()).map(|c| c.to_vec());
        Ok(Self {
            fl_busy: groups.next().unwrap(),
            fd_busy: groups.next().unwrap(),
            flda_busy: groups.next().unwrap(),
            fl_quiet: groups.next().unwrap(),
            flda_quiet: groups.next().unwrap(),
            seeds,
        })
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        for (name, set) in [
            ("fl_busy", &self.fl_busy),
            ("fd_busy", &self.fd_busy),
            ("flda_busy", &self.flda_busy),
            ("fl_quiet", &self.fl_quiet),
            ("flda_quiet", &self.flda_quiet),
        ] {
            for (seed, t) in self.seeds.iter().zip(set) {
                report::write_text(&dir.join(format!("{name}_seed{seed}.csv")), &report::trace_csv(t))?;
            }
            report::write_text(&dir.join(format!("{name}_mean.csv")), &report::trace_csv(&mean_trace(set)?))?;
        }
        Ok(())
    }

    fn finals(set: &[MetricsTrace]) -> Vec<f64> {
        set.iter().map(|t| t.final_accuracy()).collect()
    }

    /// FLDA at least as accurate as FL and FD per seed, FD plateauing below
    /// both, and FLDA's energy to the lowest common target at most half of
    /// FL's.
    pub fn ordering(&self) -> (bool, String) {
        let (fl, fd, flda) = (
            Self::finals(&self.fl_busy),
            Self::finals(&self.fd_busy),
            Self::finals(&self.flda_busy),
        );
        let n = self.seeds.len();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let wins = (0..n).filter(|&i| flda[i] >= fl[i] && flda[i] >= fd[i]).count();

        let late_gain: Vec<f64> = self
            .fd_busy
            .iter()
            .map(|t| {
                let end = t.last().unwrap();
                let half = t.at_time(end.time_s / 2.0).unwrap();
                end.mean_accuracy - half.mean_accuracy
            })
            .collect();
        let plateau = mean(&late_gain).abs() <= PLATEAU_TOL && mean(&fd) < mean(&fl) && mean(&fd) < mean(&flda);

        let (energy_ok, energy_detail) = match (mean_trace(&self.fl_busy), mean_trace(&self.flda_busy)) {
            (Ok(fl_mean), Ok(flda_mean)) => {
                let target = ACCURACY_TARGETS.iter().copied().find(|&t| {
                    energy_to_target(&fl_mean, t).is_some() && energy_to_target(&flda_mean, t).is_some()
                });
                match target {
                    None => (false, "no common target reached".to_string()),
                    Some(t) => {
                        let ratios: Vec<Option<f64>> = (0..n)
                            .map(|i| {
                                let a = energy_to_target(&self.flda_busy[i], t)?;
                                // FL never reaching the target counts as spending more
                                Some(energy_to_target(&self.fl_busy[i], t).map_or(0.0, |b| a / b))
                            })
                            .collect();
                        let good = ratios.iter().filter(|r| r.is_some_and(|r| r <= ENERGY_RATIO)).count();
                        let shown: Vec<String> = ratios
                            .iter()
                            .map(|r| r.map_or("unreached".to_string(), |r| format!("{r:.2}")))
                            .collect();
                        (
                            good >= REQUIRED_SEEDS,
                            format!("energy FLDA/FL at target {t}: [{}], {good}/{n} <= {ENERGY_RATIO}", shown.join(", ")),
                        )
                    }
                }
            }
            (Err(e), _) | (_, Err(e)) => (false, format!("error: {e}")),
        };
        (
            wins >= REQUIRED_SEEDS && plateau && energy_ok,
            format!(
                "lambda={BUSY_LAMBDA}: FLDA >= FL and FD in {wins}/{n} seeds (need {REQUIRED_SEEDS}); \
                 mean final FL {:.3}, FD {:.3}, FLDA {:.3}; FD late gain {:+.3} (limit {PLATEAU_TOL}); {energy_detail}",
                mean(&fl),
                mean(&fd),
                mean(&flda),
                mean(&late_gain)
            ),
        )
    }

    /// FLDA loses less accuracy than FL when background traffic rises.
    pub fn robustness(&self) -> (bool, String) {
        let drop = |quiet: &[MetricsTrace], busy: &[MetricsTrace]| -> Vec<f64> {
            quiet.iter().zip(busy).map(|(a, b)| a.final_accuracy() - b.final_accuracy()).collect()
        };
        let fl = drop(&self.fl_quiet, &self.fl_busy);
        let flda = drop(&self.flda_quiet, &self.flda_busy);
        let n = self.seeds.len();
        let wins = (0..n).filter(|&i| flda[i] < fl[i]).count();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (
            wins >= REQUIRED_SEEDS,
            format!(
                "accuracy drop from lambda=0 to lambda={BUSY_LAMBDA}: FLDA smaller in {wins}/{n} seeds (need {REQUIRED_SEEDS}); mean drop FL {:.3}, FLDA {:.3}",
                mean(&fl),
                mean(&flda)
            ),
        )
    }
}
