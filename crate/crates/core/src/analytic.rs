//! Closed-form success probabilities and uplink throughput for multichannel
//! slotted ALOHA with background traffic.

use rand::Rng;

use crate::energy::{harvest_slot, EhParams, Energy};
use crate::error::{Error, Result};
use crate::phy::coded_subpackets;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputQuery {
    pub access_prob: f64,
    pub channels: usize,
    /// Active users; real-valued since it is an expectation.
    pub active_users: f64,
    pub lambda: f64,
    pub info_subpackets: u64,
    pub code_rate: f64,
}

impl ThroughputQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.access_prob > 0.0 && self.access_prob <= 1.0) {
            return Err(Error::invalid("p must be in (0, 1]"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("M must be >= 1"));
        }
        if !(self.active_users >= 1.0) {
            return Err(Error::invalid("active users must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if self.info_subpackets == 0 {
            return Err(Error::invalid("D must be >= 1"));
        }
        if !(self.code_rate > 0.0 && self.code_rate <= 1.0) {
            return Err(Error::invalid("q must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn total_subpackets(&self) -> u64 {
        coded_subpackets(self.info_subpackets, self.code_rate)
    }
}

/// No other active user picks the same channel: `p (1 - p/M)^(K-1)`.
pub fn p_a(q: &ThroughputQuery) -> f64 {
    q.access_prob * (1.0 - q.access_prob / q.channels as f64).powf(q.active_users - 1.0)
}

/// No background subpacket lands on a given channel in a slot.
pub fn p_s(lambda: f64, channels: usize) -> f64 {
    (-lambda / channels as f64).exp()
}

/// `p_a` times the probability that at least `D` of the `ceil(D/q)` coded
/// subpackets escape background traffic.
pub fn p_ma(q: &ThroughputQuery) -> f64 {
    p_a(q) * binomial_tail(q.total_subpackets(), q.info_subpackets, p_s(q.lambda, q.channels))
}

/// Expected number of updates received per iteration.
pub fn rho(q: &ThroughputQuery) -> f64 {
    q.active_users * p_ma(q)
}

/// Iteration-averaged throughput of the alternation.
pub fn rho_flda(alpha: f64, rho_fd: f64, rho_fl: f64) -> f64 {
    alpha * rho_fd + (1.0 - alpha) * rho_fl
}

/// Expected active users `K * P_active`.
pub fn k_hat(num_users: usize, p_active: f64) -> f64 {
    num_users as f64 * p_active
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// `P(Binomial(n, p) >= k)`, summed in log space.
pub fn binomial_tail(n: u64, k: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    if k == n {
        return p.powi(n as i32);
    }
    let lf = ln_factorials(n);
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let log_pmf = |z: u64| lf[n as usize] - lf[z as usize] - lf[(n - z) as usize] + z as f64 * lp + (n - z) as f64 * lq;
    let log_sum = |range: std::ops::Range<u64>| {
        let terms: Vec<f64> = range.map(log_pmf).collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    };
    // sum whichever side of the mean is smaller so results near 1 keep
    // their precision
    if k as f64 > n as f64 * p {
        log_sum(k..n + 1).exp().min(1.0)
    } else {
        (1.0 - log_sum(0..k).exp()).clamp(0.0, 1.0)
    }
}

/// Grid search for the access probability that maximises `p_a` over
/// `(0, 1]` with the given step.
pub fn argmax_p_a(channels: usize, active_users: f64, step: f64) -> f64 {
    let steps = (1.0 / step).round() as u64;
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 1..=steps {
        let p = (i as f64 * step).min(1.0);
        let v = p_a(&ThroughputQuery {
            access_prob: p,
            channels,
            active_users,
            lambda: 0.0,
            info_subpackets: 1,
            code_rate: 1.0,
        });
        if v > best.1 {
            best = (p, v);
        }
    }
    best.0
}

/// Monte-Carlo estimate of `P(battery0 + sum of `slots` harvests >= cost)`.
pub fn p_active_mc(
    battery0: Energy,
    eh: &EhParams,
    cost: Energy,
    slots: u64,
    trials: u64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if battery0 >= cost {
        return Ok(1.0);
    }
    let needed = cost - battery0;
    let mut hits = 0u64;
    for _ in 0..trials {
        let mut total = Energy::ZERO;
        for _ in 0..slots {
            total += harvest_slot(eh, rng);
            if total >= needed {
                break;
            }
        }
        if total >= needed {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn query(p: f64, m: usize, k: f64, lambda: f64, d: u64, q: f64) -> ThroughputQuery {
        ThroughputQuery {
            access_prob: p,
            channels: m,
            active_users: k,
            lambda,
            info_subpackets: d,
            code_rate: q,
        }
    }

    #[test]
    fn p_a_examples() {
        // 0.2 * 0.95^19 evaluated in 30-digit arithmetic
        assert!((p_a(&query(0.2, 4, 20.0, 0.0, 1, 1.0)) - 0.075_470_720_507_061_44).abs() < 1e-15);
        assert_eq!(p_a(&query(0.37, 3, 1.0, 0.0, 1, 1.0)), 0.37);
    }

    #[test]
    fn p_s_examples() {
        assert_eq!(p_s(0.0, 4), 1.0);
        assert!((p_s(4.0, 4) - 0.367879441171).abs() < 1e-11);
        assert!((p_s(3.0, 4) - 0.472366552741).abs() < 1e-11);
    }

    #[test]
    fn p_ma_matches_enumeration_of_four_subpackets() {
        let q = query(0.2, 4, 20.0, 3.0, 2, 0.5);
        let ps = p_s(3.0, 4);
        let mut tail = 0.0;
        for mask in 0u32..16 {
            let clean = mask.count_ones();
            if clean >= 2 {
                tail += ps.powi(clean as i32) * (1.0 - ps).powi(4 - clean as i32);
            }
        }
        assert!((p_ma(&q) - p_a(&q) * tail).abs() < 1e-15);
    }

    #[test]
    fn degenerate_identities() {
        for d in [1, 2, 5, 112] {
            let q0 = query(0.2, 4, 20.0, 0.0, d, 0.5);
            assert_eq!(p_ma(&q0), p_a(&q0));
            let q1 = query(0.2, 4, 20.0, 3.0, d, 1.0);
            assert!((p_ma(&q1) - p_a(&q1) * p_s(3.0, 4).powi(d as i32)).abs() <= 1e-15 * p_a(&q1));
        }
        let single = query(0.3, 4, 1.0, 0.0, 3, 1.0);
        assert_eq!(rho(&single), p_a(&single));
        assert_eq!(rho_flda(0.0, 2.0, 1.0), 1.0);
        assert_eq!(rho_flda(1.0, 2.0, 1.0), 2.0);
        assert_eq!(rho_flda(0.5, 2.0, 1.0), 1.5);
    }

    #[test]
    fn fd_out_throughputs_fl_under_load() {
        let fd = query(0.2, 4, 20.0, 3.0, 2, 0.5);
        let fl = query(0.2, 4, 20.0, 3.0, 112, 0.5);
        assert!(rho(&fd) > rho(&fl));
    }

    #[test]
    fn rho_recomputes_contention_with_k() {
        let a = query(0.2, 4, 10.0, 1.0, 2, 0.5);
        let b = query(0.2, 4, 20.0, 1.0, 2, 0.5);
        assert!((rho(&b) / rho(&a) - 2.0 * 0.95f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn p_a_maximiser() {
        for (m, k) in [(4usize, 20.0), (2, 10.0), (1, 5.0)] {
            let p = argmax_p_a(m, k, 1e-3);
            assert!((p - m as f64 / k).abs() <= 1e-3 + 1e-12, "{m} {k} -> {p}");
        }
    }

    #[test]
    fn binomial_tail_large_n_is_finite() {
        let t = binomial_tail(224, 112, 0.472366552741);
        assert!(t > 0.0 && t < 1.0);
        // normal approximation: mean 105.8, sd 7.47 -> roughly P(Z >= 0.76)
        assert!((t - 0.22).abs() < 0.05);
        assert_eq!(binomial_tail(10, 0, 0.1), 1.0);
        assert_eq!(binomial_tail(3, 4, 0.9), 0.0);
    }

    /// Exact `P(total units over `slots` slots >= need)` for the compound
    /// Poisson income, by convolving truncated per-slot pmfs.
    fn enumerated_activity(rate: f64, mean_units: f64, slots: usize, need: usize) -> f64 {
        let support = 60;
        let pois = |mean: f64, k: usize| -> f64 {
            if mean == 0.0 {
                return if k == 0 { 1.0 } else { 0.0 };
            }
            let mut lf = 0.0;
            for i in 1..=k {
                lf += (i as f64).ln();
            }
            (k as f64 * mean.ln() - mean - lf).exp()
        };
        let per_slot: Vec<f64> = (0..support)
            .map(|u| (0..30).map(|a| pois(rate, a) * pois(a as f64 * mean_units / rate, u)).sum())
            .collect();
        let mut dist = vec![0.0; support];
        dist[0] = 1.0;
        for _ in 0..slots {
            let mut next = vec![0.0; support];
            for (i, &a) in dist.iter().enumerate() {
                for (j, &b) in per_slot.iter().enumerate() {
                    if i + j < support {
                        next[i + j] += a * b;
                    }
                }
            }
            dist = next;
        }
        1.0 - dist[..need].iter().sum::<f64>()
    }

    #[test]
    fn p_active_against_enumeration() {
        let unit = Energy::from_femtojoules(1_000);
        let eh = EhParams::new(1.0, 0.3, unit).unwrap();
        let mut rng = stream(4, Stream::Validation);
        assert_eq!(p_active_mc(unit * 5, &eh, unit * 5, 3, 10, &mut rng).unwrap(), 1.0);
        let dry = EhParams::new(1.0, 0.0, unit).unwrap();
        assert_eq!(p_active_mc(unit, &dry, unit * 2, 10, 100, &mut rng).unwrap(), 0.0);

        // cost equal to the expected income over 10 slots (3 units)
        let trials = 200_000;
        let est = p_active_mc(Energy::ZERO, &eh, unit * 3, 10, trials, &mut rng).unwrap();
        let exact = enumerated_activity(1.0, 0.3, 10, 3);
        let se = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((est - exact).abs() < 4.0 * se, "{est} vs {exact}");
        assert!(exact > 0.3 && exact < 0.8);
    }

    proptest! {
        #[test]
        fn probabilities_in_unit_interval(
            p in 0.001f64..=1.0, m in 1usize..16, k in 1.0f64..200.0,
            lambda in 0.0f64..20.0, d in 1u64..300, q in 0.05f64..=1.0,
        ) {
            let qq = query(p, m, k, lambda, d, q);
            for v in [p_a(&qq), p_s(lambda, m), p_ma(&qq)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn p_ma_monotone(
            p in 0.01f64..=1.0, m in 1usize..8, k in 1.0f64..50.0,
            l1 in 0.0f64..10.0, dl in 0.0f64..5.0, d in 1u64..40,
            q1 in 0.1f64..=1.0, dq in 0.0f64..0.9,
        ) {
            let base = query(p, m, k, l1, d, q1);
            let more_load = ThroughputQuery { lambda: l1 + dl, ..base };
            prop_assert!(p_ma(&more_load) <= p_ma(&base) * (1.0 + 1e-12));
            let q2 = (q1 - dq).max(0.05);
            let lower_rate = ThroughputQuery { code_rate: q2, ..base };
            prop_assert!(p_ma(&lower_rate) >= p_ma(&base) * (1.0 - 1e-12));
        }

        #[test]
        fn rho_flda_linear(alpha in 0.0f64..=1.0, a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let mid = rho_flda(alpha, a, b);
            prop_assert!((mid - (b + alpha * (a - b))).abs() < 1e-12);
        }
    }
}
