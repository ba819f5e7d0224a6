//! Slot-accurate execution of the iteration protocol for FL, FD and their
//! alternation.
//!
//! Each iteration spans the frame window of its phase (`F_FD` or `F_FL`
//! slots). Per slot every device harvests, then devices that are sending pay
//! for the slot. Computation happens at the first slot, aggregation and the
//! downlink broadcast after the last, followed by re-initialisation.

use crate::config::{ActivityRule, DataSource, SimConfig};
use crate::data::{load_idx, partition_non_iid, Dataset, PartitionSpec, SyntheticTask};
use crate::energy::{
    e_cmp, e_rx, e_tx, energy_unit, harvest_slot, tx_slot_cost, Battery, EhParams, Energy, EnergyLedger,
    EnergyParams,
};
use crate::error::{Error, Result};
use crate::fed::{aggregate_fd, aggregate_fl, phase_of, reinit_fd, reinit_fl, LogitTable, Phase, PhaseSchedule};
use crate::model::{logit_table_bits, sgd_step, Arch, MiniBatch, ModelParams};
use crate::phy::{subpacket_plan, FrameConfig, FrameEngine, FrameOutcome, SubpacketPlan};
use crate::rng::{self, SimRng, Stream};

/// Everything a device owns.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub model: ModelParams<f32>,
    pub battery: Battery,
    pub ledger: EnergyLedger,
    pub data: Dataset,
    /// Joined the current iteration (paid for computation).
    pub committed: bool,
    /// Ran out of energy mid-frame and stopped sending.
    pub aborted: bool,
    /// Received the last downlink broadcast.
    pub received_broadcast: bool,
    batch: Option<MiniBatch>,
    upload: Option<Upload>,
}

#[derive(Debug, Clone)]
enum Upload {
    Model(ModelParams<f32>),
    Logits(LogitTable),
}

/// Per-slot channel record.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotEvent {
    pub iteration: u64,
    pub slot: u64,
    pub channel: usize,
    pub device: usize,
    pub background: u32,
    pub clean: bool,
}

/// Per-slot energy record of one device.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyRow {
    pub iteration: u64,
    pub slot: u64,
    pub device: usize,
    pub harvested: Energy,
    pub spent_tx: Energy,
    pub spent_rx: Energy,
    pub spent_cmp: Energy,
    pub level: Energy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u64,
    pub phase: Phase,
    pub slots: u64,
    pub committed: usize,
    pub received: usize,
    pub broadcast_to: usize,
    pub frame: FrameOutcome,
}

/// One evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsPoint {
    pub time_s: f64,
    pub iteration: u64,
    pub phase: Option<Phase>,
    pub mean_accuracy: f64,
    pub mean_battery: f64,
    pub mean_energy_j: f64,
    pub updates_received: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTrace {
    pub points: Vec<MetricsPoint>,
}

impl MetricsTrace {
    pub fn last(&self) -> Option<&MetricsPoint> {
        self.points.last()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.last().map_or(0.0, |p| p.mean_accuracy)
    }

    /// Latest point at or before `time_s`.
    pub fn at_time(&self, time_s: f64) -> Option<&MetricsPoint> {
        self.points.iter().take_while(|p| p.time_s <= time_s + 1e-12).last()
    }
}

/// Mean cumulative energy at the first point whose mean accuracy reaches
/// `target`, or `None` if it never does.
pub fn energy_to_target(trace: &MetricsTrace, target: f64) -> Option<f64> {
    trace
        .points
        .iter()
        .find(|p| p.mean_accuracy >= target)
        .map(|p| p.mean_energy_j)
}

/// Derived constants of a run.
#[derive(Debug, Clone)]
pub struct RunConstants {
    pub arch: Arch,
    pub fl_plan: SubpacketPlan,
    pub fd_plan: SubpacketPlan,
    pub energy: EnergyParams,
    pub unit: Energy,
    pub cmp: Energy,
    pub tx_slot: Energy,
    pub rx_fl: Energy,
    pub rx_fd: Energy,
    pub batch: usize,
}

impl RunConstants {
    pub fn new(cfg: &SimConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        let arch = Arch::new(
            std::iter::once(input_dim)
                .chain(cfg.learning.hidden.iter().copied())
                .chain(std::iter::once(num_classes))
                .collect(),
            cfg.learning.activation,
        )?;
        let frame = cfg.frame_config();
        let n_fl = cfg.learning.n_fl.unwrap_or_else(|| arch.update_bits());
        let mut fl_plan = subpacket_plan(n_fl, &frame)?;
        if let Some(f) = cfg.network.f_fl {
            fl_plan = fl_plan.with_total(f).map_err(|e| Error::config("network.F_FL", e.to_string()))?;
        }
        let mut fd_plan = subpacket_plan(logit_table_bits(num_classes), &frame)?;
        if let Some(f) = cfg.network.f_fd {
            fd_plan = fd_plan.with_total(f).map_err(|e| Error::config("network.F_FD", e.to_string()))?;
        }
        let local = cfg.samples_per_user();
        let batch = cfg.learning.batch_size.map_or(local, |b| b.min(local));
        let w = cfg.learning.flops_per_sample.unwrap_or_else(|| arch.flops_per_sample());
        let energy = cfg.energy_params_for(w, batch);
        let unit = Energy::from_joules(energy_unit(&energy, &fl_plan));
        Ok(Self {
            cmp: Energy::from_joules(e_cmp(&energy)),
            tx_slot: Energy::from_joules(tx_slot_cost(&energy, frame.slot_s)),
            rx_fl: Energy::from_joules(e_rx(&energy, fl_plan.bits)),
            rx_fd: Energy::from_joules(e_rx(&energy, fd_plan.bits)),
            arch,
            fl_plan,
            fd_plan,
            energy,
            unit,
            batch,
        })
    }

    pub fn plan(&self, phase: Phase) -> SubpacketPlan {
        match phase {
            Phase::Learning => self.fl_plan,
            Phase::Distillation => self.fd_plan,
        }
    }

    pub fn rx_cost(&self, phase: Phase) -> Energy {
        match phase {
            Phase::Learning => self.rx_fl,
            Phase::Distillation => self.rx_fd,
        }
    }

    /// Full round cost used by the look-ahead activity rule.
    pub fn round_cost(&self, phase: Phase) -> Energy {
        let plan = self.plan(phase);
        Energy::from_joules(e_tx(&self.energy, plan.bits)) + self.rx_cost(phase) + self.cmp
    }
}

/// Training and test data for one seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub locals: Vec<Dataset>,
    pub test: Dataset,
}

impl Scenario {
    pub fn build(cfg: &SimConfig) -> Result<Self> {
        let d = &cfg.data;
        let (pool, test) = match d.source {
            DataSource::Synthetic => {
                let mut r = rng::stream(cfg.run.seed, Stream::Dataset);
                let task = SyntheticTask::new(&mut r, d.classes, d.dim, d.modes, d.spread as f32)?;
                let pool = task.draw(&mut r, d.per_class)?;
                let test = task.draw(&mut r, d.test_per_class)?;
                (pool, test)
            }
            DataSource::Idx => {
                let pool = load_idx(d.train_images.as_ref().unwrap(), d.train_labels.as_ref().unwrap())?;
                let mut test = load_idx(d.test_images.as_ref().unwrap(), d.test_labels.as_ref().unwrap())?;
                if let Some(limit) = d.test_limit {
                    if limit < test.len() {
                        let idx: Vec<usize> = (0..limit).collect();
                        test = test.subset(&idx);
                    }
                }
                (pool, test)
            }
        };
        if pool.num_classes() != d.classes && d.source == DataSource::Idx {
            return Err(Error::config(
                "data.classes",
                format!("IDX data has {} classes", pool.num_classes()),
            ));
        }
        let spec = PartitionSpec {
            num_users: cfg.network.num_users,
            minority_labels_per_user: d.minority_labels,
            minority_count: d.minority_count,
            majority_count: d.majority_count,
            seed: cfg.run.seed,
            replacement_across_users: d.replacement,
        };
        let locals = partition_non_iid(&pool, &spec)?;
        Ok(Self { locals, test })
    }
}

struct Streams {
    access: SimRng,
    background: SimRng,
    harvest: Vec<SimRng>,
    batch: SimRng,
}

/// A running simulation that owns every device and the server state.
pub struct Simulation {
    cfg: SimConfig,
    schedule: PhaseSchedule,
    frame: FrameConfig,
    consts: RunConstants,
    eh: EhParams,
    devices: Vec<DeviceState>,
    global: ModelParams<f32>,
    test: Dataset,
    streams: Streams,
    iteration: u64,
    slots: u64,
    last_received: usize,
    slot_log: Option<Vec<SlotEvent>>,
    energy_log: Option<Vec<EnergyRow>>,
}

impl Simulation {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let scenario = Scenario::build(cfg)?;
        Self::with_scenario(cfg, scenario)
    }

    pub fn with_scenario(cfg: &SimConfig, scenario: Scenario) -> Result<Self> {
        cfg.validate()?;
        let Scenario { locals, test } = scenario;
        if locals.len() != cfg.network.num_users {
            return Err(Error::invalid("scenario has a different number of devices"));
        }
        let consts = RunConstants::new(cfg, test.dim(), test.num_classes())?;
        let eh = EhParams::new(cfg.harvest.r, cfg.harvest.rho_bar, consts.unit)?;
        let seed = cfg.run.seed;
        let mut init_rng = rng::stream(seed, Stream::Init);
        let global = ModelParams::<f32>::init(consts.arch.clone(), &mut init_rng);
        let capacity = Energy::from_joules(cfg.energy.b_max);
        let start = cfg.energy.initial.map_or(capacity, Energy::from_joules).min(capacity);
        let devices = locals
            .into_iter()
            .map(|data| DeviceState {
                model: global.clone(),
                battery: Battery::new(start, capacity).expect("start <= capacity"),
                ledger: EnergyLedger::new(start),
                data,
                committed: false,
                aborted: false,
                received_broadcast: false,
                batch: None,
                upload: None,
            })
            .collect::<Vec<_>>();
        let streams = Streams {
            access: rng::stream(seed, Stream::Access),
            background: rng::stream(seed, Stream::Background),
            harvest: (0..devices.len() as u64)
                .map(|k| rng::substream(seed, Stream::Harvest, k))
                .collect(),
            batch: rng::stream(seed, Stream::Batch),
        };
        Ok(Self {
            schedule: cfg.schedule(),
            frame: cfg.frame_config(),
            cfg: cfg.clone(),
            consts,
            eh,
            devices,
            global,
            test,
            streams,
            iteration: 0,
            slots: 0,
            last_received: 0,
            slot_log: None,
            energy_log: None,
        })
    }

    pub fn enable_slot_log(&mut self) {
        self.slot_log.get_or_insert_with(Vec::new);
    }

    pub fn enable_energy_log(&mut self) {
        self.energy_log.get_or_insert_with(Vec::new);
    }

    pub fn slot_log(&self) -> &[SlotEvent] {
        self.slot_log.as_deref().unwrap_or(&[])
    }

    pub fn energy_log(&self) -> &[EnergyRow] {
        self.energy_log.as_deref().unwrap_or(&[])
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn constants(&self) -> &RunConstants {
        &self.consts
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn devices_mut(&mut self) -> &mut [DeviceState] {
        &mut self.devices
    }

    pub fn global_model(&self) -> &ModelParams<f32> {
        &self.global
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn elapsed_slots(&self) -> u64 {
        self.slots
    }

    pub fn time_s(&self) -> f64 {
        self.slots as f64 * self.frame.slot_s
    }

    pub fn next_phase(&self) -> Phase {
        phase_of(self.iteration, &self.schedule)
    }

    /// Duration of the next iteration in seconds.
    pub fn next_frame_s(&self) -> f64 {
        self.consts.plan(self.next_phase()).total as f64 * self.frame.slot_s
    }

    /// Every device's battery matches its ledger.
    pub fn energy_conserved(&self) -> bool {
        self.devices.iter().all(|d| d.ledger.expected_level() == d.battery.level())
    }

    /// Mean accuracy of the device models on the test set.
    pub fn mean_accuracy(&self) -> Result<f64> {
        let mut total = 0.0;
        for d in &self.devices {
            total += d.model.accuracy(&self.test)?;
        }
        Ok(total / self.devices.len() as f64)
    }

    pub fn metrics(&self) -> Result<MetricsPoint> {
        let k = self.devices.len() as f64;
        Ok(MetricsPoint {
            time_s: self.time_s(),
            iteration: self.iteration,
            phase: self.iteration.checked_sub(1).map(|t| phase_of(t, &self.schedule)),
            mean_accuracy: self.mean_accuracy()?,
            mean_battery: self.devices.iter().map(|d| d.battery.normalized()).sum::<f64>() / k,
            mean_energy_j: self.devices.iter().map(|d| d.ledger.spent().joules()).sum::<f64>() / k,
            updates_received: self.last_received,
        })
    }

    fn log_energy(&mut self, row: EnergyRow) {
        if let Some(log) = &mut self.energy_log {
            log.push(row);
        }
    }

    /// Local computation at the first slot of the frame.
    fn compute(&mut self, phase: Phase) -> Result<()> {
        let batch_size = self.consts.batch;
        let mu = self.cfg.learning.mu as f32;
        for d in self.devices.iter_mut().filter(|d| d.committed) {
            let batch = MiniBatch::sample(&mut self.streams.batch, d.data.len(), batch_size);
            match phase {
                Phase::Learning => {
                    // the stepped model is only the upload; the device keeps
                    // its current weights until a global model arrives
                    let g = d.model.grad_fl(&batch, &d.data)?;
                    d.upload = Some(Upload::Model(sgd_step(&d.model, &g, mu)));
                }
                Phase::Distillation => {
                    let table = d.model.avg_logits_per_label(&batch, &d.data)?;
                    d.upload = Some(Upload::Logits(table));
                }
            }
            d.batch = Some(batch);
        }
        Ok(())
    }

    /// Runs one iteration of the protocol.
    pub fn run_iteration(&mut self) -> Result<IterationReport> {
        let t = self.iteration;
        let phase = phase_of(t, &self.schedule);
        let plan = self.consts.plan(phase);
        let frame_slots = plan.total as usize;
        let k = self.devices.len();

        // harvests for the whole frame are drawn up front so that both
        // activity rules consume the stream identically
        let harvests: Vec<Vec<Energy>> = self
            .streams
            .harvest
            .iter_mut()
            .map(|r| (0..frame_slots).map(|_| harvest_slot(&self.eh, r)).collect())
            .collect();

        for d in &mut self.devices {
            d.committed = false;
            d.aborted = false;
            d.received_broadcast = false;
            d.batch = None;
            d.upload = None;
        }

        let mut engine: Option<FrameEngine> = None;
        let mut transmitting = vec![false; k];
        for z in 0..frame_slots {
            let mut rows: Vec<EnergyRow> = Vec::new();
            for (i, d) in self.devices.iter_mut().enumerate() {
                let income = harvests[i][z];
                let stored = d.battery.charge(income);
                d.ledger.harvested += income;
                d.ledger.stored += stored;
                rows.push(EnergyRow {
                    iteration: t,
                    slot: z as u64 + 1,
                    device: i,
                    harvested: stored,
                    ..Default::default()
                });
            }

            if z == 0 {
                for (i, d) in self.devices.iter_mut().enumerate() {
                    let ready = match self.cfg.run.activity {
                        ActivityRule::Causal => d.battery.can_afford(self.consts.cmp + self.consts.tx_slot),
                        ActivityRule::Lookahead => {
                            let before = d.battery.level().saturating_sub(rows[i].harvested);
                            let income: Energy = harvests[i].iter().copied().fold(Energy::ZERO, |a, b| a + b);
                            before + income >= self.consts.round_cost(phase)
                                && d.battery.can_afford(self.consts.cmp)
                        }
                    };
                    if ready && d.battery.spend(self.consts.cmp) {
                        d.committed = true;
                        d.ledger.spent_cmp += self.consts.cmp;
                        rows[i].spent_cmp = self.consts.cmp;
                    }
                }
                self.compute(phase)?;
                let attempting: Vec<bool> = self.devices.iter().map(|d| d.committed).collect();
                engine = Some(FrameEngine::new(
                    &self.frame,
                    plan,
                    self.cfg.network.lambda,
                    &attempting,
                    &mut self.streams.access,
                )?);
            }

            let eng = engine.as_mut().unwrap();
            let intents = eng.intents(&mut self.streams.access).to_vec();
            for (i, d) in self.devices.iter_mut().enumerate() {
                transmitting[i] = false;
                if intents[i] && !d.aborted {
                    if d.battery.spend(self.consts.tx_slot) {
                        transmitting[i] = true;
                        d.ledger.spent_tx += self.consts.tx_slot;
                        rows[i].spent_tx = self.consts.tx_slot;
                    } else {
                        d.aborted = true;
                    }
                }
            }
            let outcome = eng.resolve(&transmitting, &mut self.streams.background);
            if let Some(log) = &mut self.slot_log {
                for (i, ch) in outcome.channel.iter().enumerate() {
                    if let Some(ch) = *ch {
                        log.push(SlotEvent {
                            iteration: t,
                            slot: z as u64 + 1,
                            channel: ch,
                            device: i,
                            background: outcome.background[ch],
                            clean: outcome.clean[i],
                        });
                    }
                }
            }
            if z + 1 < frame_slots {
                for (i, mut row) in rows.into_iter().enumerate() {
                    row.level = self.devices[i].battery.level();
                    self.log_energy(row);
                }
            } else {
                // the closing row also carries the broadcast reception
                let frame = engine.take().unwrap().finish();
                let report = self.close_iteration(t, phase, plan, frame, &mut rows)?;
                for (i, mut row) in rows.into_iter().enumerate() {
                    row.level = self.devices[i].battery.level();
                    self.log_energy(row);
                }
                return Ok(report);
            }
        }
        unreachable!("frames have at least one slot")
    }

    /// Aggregation, downlink and re-initialisation after the last slot.
    fn close_iteration(
        &mut self,
        t: u64,
        phase: Phase,
        plan: SubpacketPlan,
        frame: FrameOutcome,
        rows: &mut [EnergyRow],
    ) -> Result<IterationReport> {
        let received: Vec<usize> = frame.successes().collect();
        let rx_cost = self.consts.rx_cost(phase);
        let mut broadcast_to = 0;
        match phase {
            Phase::Learning => {
                let models: Vec<(&ModelParams<f32>, usize)> = received
                    .iter()
                    .filter_map(|&i| match &self.devices[i].upload {
                        Some(Upload::Model(m)) => Some((m, self.devices[i].batch.as_ref().unwrap().len())),
                        _ => None,
                    })
                    .collect();
                if let Some(global) = aggregate_fl(&models)? {
                    self.global = global;
                    for (i, d) in self.devices.iter_mut().enumerate() {
                        let got = d.battery.spend(rx_cost);
                        if got {
                            d.ledger.spent_rx += rx_cost;
                            rows[i].spent_rx = rx_cost;
                            broadcast_to += 1;
                        }
                        d.received_broadcast = got;
                        reinit_fl(&mut d.model, &self.global, got);
                    }
                }
            }
            Phase::Distillation => {
                let tables: Vec<&LogitTable> = received
                    .iter()
                    .filter_map(|&i| match &self.devices[i].upload {
                        Some(Upload::Logits(t)) => Some(t),
                        _ => None,
                    })
                    .collect();
                let global = aggregate_fd(&tables)?;
                let beta = self.cfg.learning.beta as f32;
                let mu = self.cfg.learning.mu as f32;
                for (i, d) in self.devices.iter_mut().enumerate() {
                    if !d.committed {
                        continue;
                    }
                    let got = global.is_some() && d.battery.spend(rx_cost);
                    if got {
                        d.ledger.spent_rx += rx_cost;
                        rows[i].spent_rx = rx_cost;
                        broadcast_to += 1;
                    }
                    d.received_broadcast = got;
                    let batch = d.batch.as_ref().unwrap();
                    let g = match (&global, got) {
                        (Some(table), true) => match d.model.grad_fd(batch, &d.data, table, beta) {
                            Ok(g) => g,
                            // the global table lacks a label this batch needs
                            Err(Error::MissingLogit(_)) => d.model.grad_fl(batch, &d.data)?,
                            Err(e) => return Err(e),
                        },
                        _ => d.model.grad_fl(batch, &d.data)?,
                    };
                    reinit_fd(&mut d.model, &g, mu);
                }
            }
        }
        self.iteration += 1;
        self.slots += plan.total;
        self.last_received = received.len();
        Ok(IterationReport {
            iteration: t,
            phase,
            slots: plan.total,
            committed: self.devices.iter().filter(|d| d.committed).count(),
            received: received.len(),
            broadcast_to,
            frame,
        })
    }

    /// Runs until the configured duration or iteration cap, evaluating at
    /// time zero, every evaluation period, and at the end.
    ///
    /// An iteration is only started if it ends within the duration.
    pub fn run(&mut self) -> Result<MetricsTrace> {
        let duration = self.cfg.run.duration_s;
        let max_iter = self.cfg.run.max_iterations;
        let period = self.cfg.run.eval_period_s;
        let mut trace = MetricsTrace {
            points: vec![self.metrics()?],
        };
        let mut next_eval = period;
        let mut evaluated_last = true;
        loop {
            if max_iter.is_some_and(|m| self.iteration >= m) {
                break;
            }
            if let Some(d) = duration {
                if self.time_s() + self.next_frame_s() > d + 1e-9 {
                    break;
                }
            }
            self.run_iteration()?;
            evaluated_last = false;
            if period == 0.0 || self.time_s() + 1e-12 >= next_eval {
                trace.points.push(self.metrics()?);
                evaluated_last = true;
                if period > 0.0 {
                    while next_eval <= self.time_s() + 1e-12 {
                        next_eval += period;
                    }
                }
            }
        }
        if !evaluated_last {
            trace.points.push(self.metrics()?);
        }
        Ok(trace)
    }
}

/// Builds and runs one configuration.
pub fn run_experiment(cfg: &SimConfig) -> Result<MetricsTrace> {
    Simulation::new(cfg)?.run()
}

/// Runs one configuration for several seeds.
pub fn run_seeds(cfg: &SimConfig, seeds: &[u64]) -> Result<Vec<MetricsTrace>> {
    seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.run.seed = s;
            run_experiment(&c)
        })
        .collect()
}

/// Pointwise mean of traces that share their evaluation times.
pub fn mean_trace(traces: &[MetricsTrace]) -> Result<MetricsTrace> {
    let Some(first) = traces.first() else {
        return Ok(MetricsTrace::default());
    };
    let n = first.points.len();
    if traces.iter().any(|t| t.points.len() != n) {
        return Err(Error::invalid("traces have different evaluation grids"));
    }
    let k = traces.len() as f64;
    let points = (0..n)
        .map(|i| {
            let p0 = &first.points[i];
            let avg = |f: fn(&MetricsPoint) -> f64| traces.iter().map(|t| f(&t.points[i])).sum::<f64>() / k;
            MetricsPoint {
                time_s: avg(|p| p.time_s),
                iteration: p0.iteration,
                phase: p0.phase,
                mean_accuracy: avg(|p| p.mean_accuracy),
                mean_battery: avg(|p| p.mean_battery),
                mean_energy_j: avg(|p| p.mean_energy_j),
                updates_received: (traces.iter().map(|t| t.points[i].updates_received).sum::<usize>() as f64 / k)
                    .round() as usize,
            }
        })
        .collect();
    Ok(MetricsTrace { points })
}
