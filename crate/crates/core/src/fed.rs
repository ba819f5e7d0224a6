//! Server-side aggregation rules, the FD/FL alternation schedule, and the
//! device-side re-initialisation that closes every iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sgd_step_in_place, GradientVector, ModelParams, Scalar};

/// One averaged softmax vector per label; labels without samples are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    entries: Vec<Option<Vec<f32>>>,
    counts: Vec<usize>,
}

impl LogitTable {
    pub fn missing(num_classes: usize) -> Self {
        Self {
            entries: vec![None; num_classes],
            counts: vec![0; num_classes],
        }
    }

    pub fn from_entries(entries: Vec<Option<Vec<f32>>>) -> Result<Self> {
        let c = entries.len();
        for e in entries.iter().flatten() {
            if e.len() != c {
                return Err(Error::DimensionMismatch {
                    expected: c,
                    got: e.len(),
                });
            }
            let sum: f64 = e.iter().map(|&v| v as f64).sum();
            if e.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid("logit table entry is not a probability vector"));
            }
        }
        let counts = entries.iter().map(|e| usize::from(e.is_some())).collect();
        Ok(Self { entries, counts })
    }

    pub(crate) fn from_entries_with_counts(entries: Vec<Option<Vec<f32>>>, counts: Vec<usize>) -> Self {
        Self { entries, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, label: usize) -> Option<&[f32]> {
        self.entries.get(label).and_then(|e| e.as_deref())
    }

    /// Samples that contributed to each entry (`m_{k,n}` for a local table).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn present_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }
}

/// Which protocol an iteration runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "fd")]
    Distillation,
    #[serde(rename = "fl")]
    Learning,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Distillation => "FD",
            Phase::Learning => "FL",
        }
    }
}

/// Cycles of `gamma` iterations, the first `round(alpha * gamma)` of which
/// are FD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSchedule {
    alpha: f64,
    gamma: u64,
}

impl PhaseSchedule {
    pub fn new(alpha: f64, gamma: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        if gamma == 0 {
            return Err(Error::invalid("gamma must be >= 1"));
        }
        Ok(Self { alpha, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> u64 {
        self.gamma
    }

    pub fn fd_iterations(&self) -> u64 {
        (self.alpha * self.gamma as f64).round() as u64
    }

    pub fn fl_iterations(&self) -> u64 {
        self.gamma - self.fd_iterations()
    }
}

pub fn phase_of(t: u64, schedule: &PhaseSchedule) -> Phase {
    if t % schedule.gamma < schedule.fd_iterations() {
        Phase::Distillation
    } else {
        Phase::Learning
    }
}

/// Aggregation weights `|B_k| / sum |B_k'|` over the received subset.
pub fn fl_weights(batch_sizes: &[usize]) -> Vec<f64> {
    let total: usize = batch_sizes.iter().sum();
    batch_sizes.iter().map(|&b| b as f64 / total as f64).collect()
}

/// Batch-size weighted mean of the received models, or `None` when nothing
/// arrived and the server keeps its previous model.
pub fn aggregate_fl<T: Scalar>(received: &[(&ModelParams<T>, usize)]) -> Result<Option<ModelParams<T>>> {
    let Some(((first, _), _)) = received.split_first() else {
        return Ok(None);
    };
    if received.iter().any(|(_, b)| *b == 0) {
        return Err(Error::invalid("batch sizes must be > 0"));
    }
    if received.iter().any(|(m, _)| m.arch() != first.arch()) {
        return Err(Error::invalid("received models have different architectures"));
    }
    let weights = fl_weights(&received.iter().map(|(_, b)| *b).collect::<Vec<_>>());
    let n = first.values().len();
    let mut acc = vec![0f64; n];
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for ((m, _), w) in received.iter().zip(&weights) {
        for (i, v) in m.values().iter().enumerate() {
            let v = v.to_f64().unwrap();
            acc[i] += w * v;
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    let values = acc
        .iter()
        .zip(lo.iter().zip(&hi))
        .map(|(&a, (&l, &h))| T::from(a.clamp(l, h)).unwrap())
        .collect();
    Ok(Some(ModelParams::from_values(first.arch().clone(), values)?))
}

/// Per-label mean over the received tables that have the label.
pub fn aggregate_fd(received: &[&LogitTable]) -> Result<Option<LogitTable>> {
    let Some(first) = received.first() else {
        return Ok(None);
    };
    let c = first.num_classes();
    if received.iter().any(|t| t.num_classes() != c) {
        return Err(Error::invalid("received logit tables disagree on class count"));
    }
    let mut entries = Vec::with_capacity(c);
    let mut counts = Vec::with_capacity(c);
    for n in 0..c {
        let present: Vec<&[f32]> = received.iter().filter_map(|t| t.get(n)).collect();
        counts.push(present.len());
        if present.is_empty() {
            entries.push(None);
            continue;
        }
        let mut mean = vec![0f64; c];
        for v in &present {
            for (m, &x) in mean.iter_mut().zip(v.iter()) {
                *m += x as f64;
            }
        }
        let k = present.len() as f64;
        entries.push(Some(mean.iter().map(|m| (m / k) as f32).collect()));
    }
    Ok(Some(LogitTable::from_entries_with_counts(entries, counts)))
}

/// Replaces the local model with the broadcast global model, if it arrived.
pub fn reinit_fl<T: Scalar>(local: &mut ModelParams<T>, global: &ModelParams<T>, received: bool) {
    if received {
        local.clone_from(global);
    }
}

/// Local distillation step `w - mu * g_FD`.
pub fn reinit_fd<T: Scalar>(local: &mut ModelParams<T>, g: &GradientVector<T>, mu: T) {
    sgd_step_in_place(local, g, mu);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use proptest::prelude::*;

    fn params(values: Vec<f32>) -> ModelParams<f32> {
        let arch = Arch::mlp(1, &[], values.len() / 2).unwrap();
        ModelParams::from_values(arch, values).unwrap()
    }

    #[test]
    fn aggregate_fl_examples() {
        let a = params(vec![1.0, -2.0, 0.5, 4.0]);
        let b = params(vec![3.0, 2.0, -0.5, 0.0]);
        assert_eq!(aggregate_fl(&[(&a, 10), (&a, 30)]).unwrap().unwrap(), a);

        let neg = params(a.values().iter().map(|v| -v).collect());
        let mean = aggregate_fl(&[(&a, 7), (&neg, 7)]).unwrap().unwrap();
        assert!(mean.values().iter().all(|&v| v == 0.0));

        let mixed = aggregate_fl(&[(&a, 100), (&b, 300)]).unwrap().unwrap();
        for ((m, x), y) in mixed.values().iter().zip(a.values()).zip(b.values()) {
            assert!((m - (0.25 * x + 0.75 * y)).abs() < 1e-6);
        }
        assert!(aggregate_fl::<f32>(&[]).unwrap().is_none());
    }

    fn table(entries: Vec<Option<Vec<f32>>>) -> LogitTable {
        LogitTable::from_entries(entries).unwrap()
    }

    #[test]
    fn aggregate_fd_examples() {
        let t = table(vec![Some(vec![0.7, 0.3]), Some(vec![0.2, 0.8])]);
        assert_eq!(aggregate_fd(&[&t]).unwrap().unwrap().get(1), t.get(1));
        let twice = aggregate_fd(&[&t, &t]).unwrap().unwrap();
        assert_eq!(twice.get(0), t.get(0));

        let partial = table(vec![None, Some(vec![0.4, 0.6])]);
        let g = aggregate_fd(&[&t, &partial]).unwrap().unwrap();
        assert_eq!(g.get(0), t.get(0));
        let g1 = g.get(1).unwrap();
        assert!((g1[0] - 0.3).abs() < 1e-7 && (g1[1] - 0.7).abs() < 1e-7);

        let empty = table(vec![None, None]);
        assert!(aggregate_fd(&[&empty]).unwrap().unwrap().get(0).is_none());
        assert!(aggregate_fd(&[]).unwrap().is_none());
    }

    #[test]
    fn schedule_examples() {
        let s = PhaseSchedule::new(0.5, 100).unwrap();
        for t in 0..50 {
            assert_eq!(phase_of(t, &s), Phase::Distillation);
        }
        for t in 50..100 {
            assert_eq!(phase_of(t, &s), Phase::Learning);
        }
        assert_eq!(phase_of(100, &s), Phase::Distillation);
        let fl = PhaseSchedule::new(0.0, 7).unwrap();
        let fd = PhaseSchedule::new(1.0, 7).unwrap();
        assert!((0..50).all(|t| phase_of(t, &fl) == Phase::Learning));
        assert!((0..50).all(|t| phase_of(t, &fd) == Phase::Distillation));
        assert!(PhaseSchedule::new(1.5, 7).is_err());
        assert!(PhaseSchedule::new(0.5, 0).is_err());
    }

    #[test]
    fn reinit_rules() {
        let global = params(vec![1.0, 2.0]);
        let mut local = params(vec![0.0, 0.0]);
        reinit_fl(&mut local, &global, false);
        assert_eq!(local.values(), &[0.0, 0.0]);
        reinit_fl(&mut local, &global, true);
        assert_eq!(local, global);

        let g = GradientVector { values: vec![1.0, -1.0] };
        reinit_fd(&mut local, &g, 0.5);
        assert_eq!(local.values(), &[0.5, 2.5]);
    }

    proptest! {
        #[test]
        fn fl_weights_sum_to_one(sizes in proptest::collection::vec(1usize..1000, 1..30)) {
            let s: f64 = fl_weights(&sizes).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fl_aggregate_in_convex_hull(
            models in proptest::collection::vec(proptest::collection::vec(-10f32..10.0, 6), 1..8),
            sizes in proptest::collection::vec(1usize..500, 8),
        ) {
            let ps: Vec<_> = models.into_iter().map(params).collect();
            let received: Vec<_> = ps.iter().zip(&sizes).map(|(p, &b)| (p, b)).collect();
            let agg = aggregate_fl(&received).unwrap().unwrap();
            for i in 0..6 {
                let lo = ps.iter().map(|p| p.values()[i]).fold(f32::INFINITY, f32::min);
                let hi = ps.iter().map(|p| p.values()[i]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(agg.values()[i] >= lo && agg.values()[i] <= hi);
            }
        }

        #[test]
        fn fd_aggregate_stays_on_simplex(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f32..1.0, 4), 1..6),
            mask in proptest::collection::vec(any::<bool>(), 24),
        ) {
            let tables: Vec<LogitTable> = raw.iter().enumerate().map(|(u, v)| {
                let s: f32 = v.iter().sum();
                let p: Vec<f32> = v.iter().map(|x| x / s).collect();
                table((0..4).map(|n| mask[u * 4 + n].then(|| p.clone())).collect())
            }).collect();
            let refs: Vec<&LogitTable> = tables.iter().collect();
            let g = aggregate_fd(&refs).unwrap().unwrap();
            for n in 0..4 {
                if let Some(v) = g.get(n) {
                    let s: f32 = v.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-5);
                    prop_assert!(v.iter().all(|&x| x >= 0.0));
                }
            }
        }

        #[test]
        fn fd_count_per_cycle(alpha in 0.0f64..=1.0, gamma in 1u64..300, cycle in 0u64..5) {
            let s = PhaseSchedule::new(alpha, gamma).unwrap();
            let fd = (cycle * gamma..(cycle + 1) * gamma)
                .filter(|&t| phase_of(t, &s) == Phase::Distillation)
                .count() as u64;
            prop_assert_eq!(fd, (alpha * gamma as f64).round() as u64);
        }
    }
}
