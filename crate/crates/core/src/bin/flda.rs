use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flda_core::analytic::{p_a, p_ma, p_s, rho, rho_flda, ThroughputQuery};
use flda_core::config::{parse_override, Mode, SimConfig};
use flda_core::model::logit_table_bits;
use flda_core::orchestrator::{energy_to_target, mean_trace, MetricsTrace, RunConstants, Simulation};
use flda_core::phy::subpacket_plan;
use flda_core::report::{self, sig9};
use flda_core::validation::{self, ValidationOptions};
use flda_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "flda", version, about = "FL, FD and FLDA over energy-harvesting slotted-ALOHA networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seeds as `1,2,5` or an inclusive range `1:10`.
    #[arg(long)]
    seeds: Option<String>,
    /// Override a key, e.g. `--set lambda=3` or `--set network.M=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// fl, fd or flda.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulator and write one trace per seed plus their mean.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the per-slot channel log.
        #[arg(long)]
        slot_log: bool,
        /// Also write the per-slot energy trace.
        #[arg(long)]
        energy_log: bool,
        /// Save each device's final model.
        #[arg(long)]
        checkpoint: bool,
    },
    /// Evaluate the closed-form throughput expressions over a grid.
    Analytic {
        #[command(flatten)]
        common: Common,
        /// Background loads, e.g. `0:5:0.5`.
        #[arg(long, default_value = "0,1.5,3")]
        lambda: String,
        #[arg(long)]
        q: Option<String>,
        /// Access probabilities.
        #[arg(long)]
        p: Option<String>,
        /// Active users; defaults to K.
        #[arg(long)]
        k_hat: Option<String>,
    },
    /// Cartesian sweep over override values with an energy-to-target summary.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `KEY=LIST`, repeatable; LIST is `a,b,c` or `start:stop:step`.
        #[arg(long = "vary", value_name = "KEY=LIST", required = true)]
        vary: Vec<String>,
        /// Accuracy targets for the summary.
        #[arg(long, default_value = "0.5,0.6,0.7,0.8")]
        targets: String,
    },
    /// Run the acceptance suite and print one line per criterion.
    Validate {
        /// Directory for auxiliary CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated criterion numbers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
    Acceptance,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Acceptance) => ExitCode::from(EXIT_ACCEPTANCE),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            common,
            slot_log,
            energy_log,
            checkpoint,
        } => simulate(&common, slot_log, energy_log, checkpoint),
        Command::Analytic {
            common,
            lambda,
            q,
            p,
            k_hat,
        } => analytic(&common, &lambda, q.as_deref(), p.as_deref(), k_hat.as_deref()),
        Command::Sweep { common, vary, targets } => sweep(&common, &vary, &targets),
        Command::Validate { out, only } => {
            let opts = ValidationOptions { out_dir: out, only };
            let reports = validation::run_with(&opts, |r| println!("{r}"));
            if reports.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(Failure::Acceptance)
            }
        }
    }
}

/// Parses `a,b,c` or `start:stop:step` (inclusive).
fn parse_list(s: &str) -> Result<Vec<String>, Failure> {
    let s = s.trim();
    if s.is_empty() {
        return Err(usage("empty value list"));
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| usage(format!("bad range `{s}`")));
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step.is_nan() || step <= 0.0 || b < a {
            return Err(usage(format!("bad range `{s}`")));
        }
        let integral = [parts[0], parts[1], parts[2]].iter().all(|x| !x.contains(['.', 'e', 'E']));
        let n = ((b - a) / step + 1e-9).floor() as u64;
        return Ok((0..=n)
            .map(|i| {
                let v = a + i as f64 * step;
                if integral {
                    format!("{}", v.round() as i64)
                } else {
                    sig9(v)
                }
            })
            .collect());
    }
    if parts.len() == 2 {
        let int = |x: &str| x.trim().parse::<u64>().map_err(|_| usage(format!("bad range `{s}`")));
        let (a, b) = (int(parts[0])?, int(parts[1])?);
        if b < a {
            return Err(usage(format!("bad range `{s}`")));
        }
        return Ok((a..=b).map(|v| v.to_string()).collect());
    }
    let items: Vec<String> = s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
    if items.is_empty() {
        return Err(usage("empty value list"));
    }
    Ok(items)
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, Failure> {
    parse_list(s)?
        .iter()
        .map(|x| x.parse::<f64>().map_err(|_| usage(format!("`{x}` is not a number"))))
        .collect()
}

fn load_config(common: &Common, extra: &[(String, String)]) -> Result<SimConfig, Failure> {
    let mut overrides = Vec::new();
    for s in &common.set {
        overrides.push(parse_override(s)?);
    }
    if let Some(m) = &common.mode {
        let mode: Mode = m.parse()?;
        overrides.push(("run.mode".to_string(), mode.as_str().to_string()));
    }
    overrides.extend_from_slice(extra);
    let cfg = match &common.config {
        Some(path) => SimConfig::load(path, &overrides)?,
        None => SimConfig::from_str_with("", &overrides)?,
    };
    Ok(cfg)
}

fn seeds(common: &Common, cfg: &SimConfig) -> Result<Vec<u64>, Failure> {
    match &common.seeds {
        None => Ok(vec![cfg.run.seed]),
        Some(s) => parse_list(s)?
            .iter()
            .map(|x| x.parse::<u64>().map_err(|_| usage(format!("`{x}` is not a seed"))))
            .collect(),
    }
}

fn run_seed_set(
    cfg: &SimConfig,
    seeds: &[u64],
    dir: &Path,
    slot_log: bool,
    energy_log: bool,
    checkpoint: bool,
) -> Result<Vec<MetricsTrace>, Failure> {
    let mut traces = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.run.seed = seed;
        let mut sim = Simulation::new(&c)?;
        if slot_log {
            sim.enable_slot_log();
        }
        if energy_log {
            sim.enable_energy_log();
        }
        let trace = sim.run()?;
        if !sim.energy_conserved() {
            return Err(Failure::Lib(Error::InvalidArgument(format!(
                "energy audit failed for seed {seed}"
            ))));
        }
        report::write_text(&dir.join(format!("trace_seed{seed}.csv")), &report::trace_csv(&trace))?;
        if slot_log {
            report::write_text(&dir.join(format!("slots_seed{seed}.csv")), &report::slot_log_csv(sim.slot_log()))?;
        }
        if energy_log {
            report::write_text(
                &dir.join(format!("energy_seed{seed}.csv")),
                &report::energy_log_csv(sim.energy_log()),
            )?;
        }
        if checkpoint {
            for (k, d) in sim.devices().iter().enumerate() {
                report::write_checkpoint(&dir.join(format!("checkpoint_seed{seed}_device{k}.bin")), &d.model)?;
            }
        }
        traces.push(trace);
    }
    let mean = mean_trace(&traces)?;
    report::write_text(&dir.join("trace_mean.csv"), &report::trace_csv(&mean))?;
    Ok(traces)
}

fn simulate(common: &Common, slot_log: bool, energy_log: bool, checkpoint: bool) -> Result<(), Failure> {
    let cfg = load_config(common, &[])?;
    let seeds = seeds(common, &cfg)?;
    let traces = run_seed_set(&cfg, &seeds, &common.out, slot_log, energy_log, checkpoint)?;
    for (seed, t) in seeds.iter().zip(&traces) {
        let last = t.last().expect("traces have a first point");
        println!(
            "seed {seed}: mode {} time {} s, iterations {}, accuracy {}, energy {} J",
            cfg.run.mode.as_str(),
            sig9(last.time_s),
            last.iteration,
            sig9(last.mean_accuracy),
            sig9(last.mean_energy_j)
        );
    }
    Ok(())
}

fn analytic(
    common: &Common,
    lambdas: &str,
    qs: Option<&str>,
    ps: Option<&str>,
    k_hats: Option<&str>,
) -> Result<(), Failure> {
    let cfg = load_config(common, &[])?;
    let lambdas = parse_f64_list(lambdas)?;
    let qs = qs.map_or(Ok(vec![cfg.network.q]), parse_f64_list)?;
    let ps = ps.map_or(Ok(vec![cfg.network.p]), parse_f64_list)?;
    let k_hats = k_hats.map_or(Ok(vec![cfg.network.num_users as f64]), parse_f64_list)?;
    let consts = RunConstants::new(&cfg, cfg.data.dim, cfg.data.classes)?;

    let mut out = String::from(
        "lambda,q,p,K_hat,D_FL,F_FL,D_FD,F_FD,p_a,p_s,p_ma_FL,p_ma_FD,rho_FL,rho_FD,rho_FLDA\n",
    );
    for &lambda in &lambdas {
        for &q in &qs {
            for &p in &ps {
                for &k_hat in &k_hats {
                    let mut c = cfg.clone();
                    c.network.q = q;
                    c.network.p = p;
                    c.network.lambda = lambda;
                    c.validate()?;
                    let frame = c.frame_config();
                    let mut fl = subpacket_plan(consts.fl_plan.bits, &frame)?;
                    if let Some(f) = c.network.f_fl {
                        fl = fl.with_total(f)?;
                    }
                    let mut fd = subpacket_plan(logit_table_bits(c.data.classes), &frame)?;
                    if let Some(f) = c.network.f_fd {
                        fd = fd.with_total(f)?;
                    }
                    let query = |info: u64, total: u64| ThroughputQuery {
                        access_prob: p,
                        channels: c.network.channels,
                        active_users: k_hat,
                        lambda,
                        info_subpackets: info,
                        code_rate: info as f64 / total as f64,
                    };
                    let (q_fl, q_fd) = (query(fl.info, fl.total), query(fd.info, fd.total));
                    let (r_fl, r_fd) = (rho(&q_fl), rho(&q_fd));
                    let alpha = c.schedule().alpha();
                    let row = [
                        sig9(lambda),
                        sig9(q),
                        sig9(p),
                        sig9(k_hat),
                        fl.info.to_string(),
                        fl.total.to_string(),
                        fd.info.to_string(),
                        fd.total.to_string(),
                        sig9(p_a(&q_fl)),
                        sig9(p_s(lambda, c.network.channels)),
                        sig9(p_ma(&q_fl)),
                        sig9(p_ma(&q_fd)),
                        sig9(r_fl),
                        sig9(r_fd),
                        sig9(rho_flda(alpha, r_fd, r_fl)),
                    ];
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
            }
        }
    }
    print!("{out}");
    report::write_text(&common.out.join("analytic.csv"), &out)?;
    Ok(())
}

fn sweep(common: &Common, vary: &[String], targets: &str) -> Result<(), Failure> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for v in vary {
        let (k, list) = v.split_once('=').ok_or_else(|| usage(format!("expected KEY=LIST, got `{v}`")))?;
        axes.push((k.trim().to_string(), parse_list(list)?));
    }
    let targets = parse_f64_list(targets)?;
    // reject bad keys before running anything
    let base = load_config(common, &[])?;
    for (k, vals) in &axes {
        base.with_overrides(&[(k.clone(), vals[0].clone())])?;
    }
    let seeds = seeds(common, &base)?;

    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vals) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }

    let mut summary = axes.iter().map(|(k, _)| k.clone()).collect::<Vec<_>>().join(",");
    summary.push_str(",final_accuracy");
    for t in &targets {
        summary.push_str(&format!(",energy_to_{}", sig9(*t)));
    }
    summary.push('\n');
    for (i, point) in points.iter().enumerate() {
        let cfg = load_config(common, point)?;
        let dir = common.out.join(format!("point{i}"));
        let traces = run_seed_set(&cfg, &seeds, &dir, false, false, false)?;
        let mean = mean_trace(&traces)?;
        let mut row: Vec<String> = point.iter().map(|(_, v)| v.clone()).collect();
        row.push(sig9(mean.final_accuracy()));
        for &t in &targets {
            row.push(energy_to_target(&mean, t).map_or("unreached".to_string(), sig9));
        }
        println!("point {i}: {}", row.join(","));
        summary.push_str(&row.join(","));
        summary.push('\n');
    }
    report::write_text(&common.out.join("summary.csv"), &summary)?;
    Ok(())
}
