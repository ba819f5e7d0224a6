use flda_core::config::Mode;
use flda_core::fed::Phase;
use flda_core::{run_experiment, SimConfig, Simulation};

fn tiny(mode: Mode) -> SimConfig {
    let mut c = SimConfig::parse(
        "[run]\nmax_iterations = 6\neval_period_s = 0.1\n\
         [network]\nK = 5\n\
         [learning]\nhidden = [8]\ngamma = 4\n\
         [data]\nclasses = 4\ndim = 6\nper_class = 40\ntest_per_class = 10\n\
         minority_labels = 1\nminority_count = 1\nmajority_count = 5\n",
    )
    .unwrap();
    c.run.mode = mode;
    c
}

#[test]
fn runs_are_deterministic_per_seed() {
    for mode in [Mode::Fl, Mode::Fd, Mode::Flda] {
        let c = tiny(mode);
        let a = run_experiment(&c).unwrap();
        assert_eq!(a, run_experiment(&c).unwrap());
        let mut other = c.clone();
        other.run.seed += 1;
        assert_ne!(a, run_experiment(&other).unwrap());
    }
}

#[test]
fn zero_duration_only_evaluates_the_initial_models() {
    let mut c = SimConfig::default();
    c.data.test_per_class = 30;
    c.run.max_iterations = None;
    c.run.duration_s = Some(0.0);
    let trace = run_experiment(&c).unwrap();
    assert_eq!(trace.points.len(), 1);
    let p = &trace.points[0];
    assert_eq!((p.time_s, p.iteration, p.phase), (0.0, 0, None));
    // untrained models are near chance on 10 balanced classes
    assert!(p.mean_accuracy < 0.3, "{}", p.mean_accuracy);
    assert_eq!(p.mean_energy_j, 0.0);
}

#[test]
fn single_device_fl_round_installs_its_own_update() {
    let mut c = tiny(Mode::Fl);
    c.network.num_users = 1;
    c.network.p = 1.0;
    c.network.lambda = 0.0;
    let mut sim = Simulation::new(&c).unwrap();
    let before = sim.global_model().clone();
    let r = sim.run_iteration().unwrap();
    assert_eq!((r.committed, r.received, r.broadcast_to), (1, 1, 1));
    assert_ne!(sim.global_model(), &before);
    assert_eq!(&sim.devices()[0].model, sim.global_model());
}

#[test]
fn dead_batteries_stall_learning_but_not_the_clock() {
    let mut c = tiny(Mode::Flda);
    c.energy.initial = Some(0.0);
    c.harvest.rho_bar = 0.0;
    let mut sim = Simulation::new(&c).unwrap();
    let models: Vec<_> = sim.devices().iter().map(|d| d.model.clone()).collect();
    let global = sim.global_model().clone();
    let mut slots = 0;
    for _ in 0..6 {
        let r = sim.run_iteration().unwrap();
        assert_eq!((r.committed, r.received, r.broadcast_to), (0, 0, 0));
        slots += r.slots;
    }
    assert_eq!(sim.elapsed_slots(), slots);
    assert!(sim.time_s() > 0.0);
    assert_eq!(sim.global_model(), &global);
    for (d, m) in sim.devices().iter().zip(&models) {
        assert_eq!(&d.model, m);
    }
    assert!(sim.energy_conserved());
}

#[test]
fn flda_alternates_by_cycle_position() {
    let mut c = tiny(Mode::Flda);
    c.learning.gamma = 100;
    c.learning.alpha = 0.5;
    c.run.max_iterations = Some(52);
    let mut sim = Simulation::new(&c).unwrap();
    let phases: Vec<Phase> = (0..52).map(|_| sim.run_iteration().unwrap().phase).collect();
    assert!(phases[..50].iter().all(|&p| p == Phase::Distillation));
    assert_eq!(phases[49], Phase::Distillation);
    assert_eq!(phases[50], Phase::Learning);
    assert_eq!(phases[51], Phase::Learning);
}

#[test]
fn frames_last_their_coded_length() {
    for mode in [Mode::Fl, Mode::Fd] {
        let c = tiny(mode);
        let mut sim = Simulation::new(&c).unwrap();
        let phase = if mode == Mode::Fl { Phase::Learning } else { Phase::Distillation };
        let f = sim.constants().plan(phase).total;
        let r = sim.run_iteration().unwrap();
        assert_eq!(r.slots, f);
        assert!((sim.time_s() - f as f64 * c.slot_s()).abs() < 1e-12);
        let bits = match mode {
            Mode::Fl => 223_488,
            _ => flda_core::model::logit_table_bits(4),
        };
        let d = bits.div_ceil(2008);
        assert_eq!(f, (d as f64 / 0.5).ceil() as u64);
    }
}

#[test]
fn fl_broadcast_synchronises_receivers() {
    let mut c = tiny(Mode::Fl);
    c.network.lambda = 0.0;
    let mut sim = Simulation::new(&c).unwrap();
    let mut synced = 0;
    for _ in 0..6 {
        let r = sim.run_iteration().unwrap();
        for d in sim.devices() {
            if d.received_broadcast {
                assert_eq!(&d.model, sim.global_model());
                synced += 1;
            }
        }
        if r.received == 0 {
            assert_eq!(r.broadcast_to, 0);
        }
    }
    assert!(synced > 0);
}

#[test]
fn energy_is_conserved_in_every_mode() {
    for mode in [Mode::Fl, Mode::Fd, Mode::Flda] {
        let mut c = tiny(mode);
        c.energy.initial = Some(0.005);
        c.run.max_iterations = Some(20);
        let mut sim = Simulation::new(&c).unwrap();
        sim.enable_energy_log();
        sim.run().unwrap();
        assert!(sim.energy_conserved(), "{mode:?}");
        let cap = flda_core::energy::Energy::from_joules(c.energy.b_max);
        assert!(sim.energy_log().iter().all(|row| row.level <= cap));
    }
}

#[test]
fn fl_suffers_under_background_traffic() {
    let mut c = flda_core::validation::desk_config();
    c.run.mode = Mode::Fl;
    c.network.lambda = 0.0;
    let quiet = run_experiment(&c).unwrap().final_accuracy();
    c.network.lambda = 3.0;
    let busy = run_experiment(&c).unwrap().final_accuracy();
    assert!(busy < quiet, "lambda=3 {busy} vs lambda=0 {quiet}");
}

#[test]
fn desk_file_matches_the_builtin_config() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let loaded = SimConfig::load(std::path::Path::new(path), &[]).unwrap();
    assert_eq!(loaded, flda_core::validation::desk_config());
}
