//! Group-fairness controller.
//!
//! Each client turns its local loss into a performance score
//! `M_u = -L_util`, reports noised group-conditional sums to the server,
//! and rescales its gradient by a factor derived from the published group
//! averages `(P, Q)`: the better-performing group learns more slowly, the
//! other faster.

use std::collections::{BTreeMap, HashMap};

use log::info;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Group, SensitiveAssignment, UserId};
use crate::rng::{label, substream};

/// Lower and upper bound applied to the gradient scale factor.
pub const SCALE_CLAMP: (f64, f64) = (0.05, 2.0);

/// Aggregated denominators below this magnitude keep the previous estimate.
pub const DENOMINATOR_FLOOR: f64 = 0.1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FairnessError {
    #[error("invalid fairness configuration: {0}")]
    Config(String),
    #[error("group {0} has no users with a metric")]
    EmptyGroup(Group),
    #[error("no group-statistics contributions to aggregate")]
    NoContributions,
}

/// Exponent of the disparity: 1 for absolute gap, 2 for squared gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Smoothness {
    Linear,
    Squared,
}

impl Smoothness {
    pub fn exponent(self) -> i32 {
        match self {
            Smoothness::Linear => 1,
            Smoothness::Squared => 2,
        }
    }
}

impl TryFrom<u8> for Smoothness {
    type Error = FairnessError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Smoothness::Linear),
            2 => Ok(Smoothness::Squared),
            other => Err(FairnessError::Config(format!("alpha must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Smoothness> for u8 {
    fn from(s: Smoothness) -> u8 {
        s.exponent() as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConfig {
    /// Fairness budget, `0 ≤ β < 1`.
    pub beta: f64,
    pub alpha: Smoothness,
    /// Standard deviation of the group-statistics noise.
    pub sigma: f64,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            alpha: Smoothness::Linear,
            sigma: 0.0,
        }
    }
}

impl FairnessConfig {
    pub fn validate(&self) -> Result<(), FairnessError> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(FairnessError::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(FairnessError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// How a per-user score is derived from that user's squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserMetric {
    /// `-MSE`; higher is better. Drives gradient scaling during training.
    NegativeMse,
    /// `sqrt(MSE)`; lower is better. Used when reporting disparity.
    Rmse,
}

impl UserMetric {
    pub fn from_mse(self, mse: f64) -> f64 {
        match self {
            UserMetric::NegativeMse => -mse,
            UserMetric::Rmse => mse.sqrt(),
        }
    }
}

/// The performance score used for training-time fairness: `M_u = -L_util`.
pub fn performance(local_loss: f64) -> f64 {
    UserMetric::NegativeMse.from_mse(local_loss)
}

/// Global group averages `(P, Q)` of S0 and S1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub p: f64,
    pub q: f64,
}

impl GroupStats {
    /// Both groups start at 1, so the first round is unscaled.
    pub const INITIAL: GroupStats = GroupStats { p: 1.0, q: 1.0 };

    pub fn gap(&self) -> f64 {
        (self.p - self.q).abs()
    }
}

impl Default for GroupStats {
    fn default() -> Self {
        Self::INITIAL
    }
}

/// `|mean_S0 M - mean_S1 M|^α` over users present in `metric`.
pub fn disparity(
    metric: &BTreeMap<UserId, f64>,
    groups: &SensitiveAssignment,
    alpha: Smoothness,
) -> Result<f64, FairnessError> {
    let means = group_means(metric, groups)?;
    Ok((means[0] - means[1]).abs().powi(alpha.exponent()))
}

/// Per-group means `[S0, S1]` of the users present in both maps.
pub fn group_means(
    metric: &BTreeMap<UserId, f64>,
    groups: &SensitiveAssignment,
) -> Result<[f64; 2], FairnessError> {
    let mut sum = [0.0; 2];
    let mut count = [0usize; 2];
    for (u, m) in metric {
        if let Some(g) = groups.group(*u) {
            sum[g.index()] += m;
            count[g.index()] += 1;
        }
    }
    for g in [Group::S0, Group::S1] {
        if count[g.index()] == 0 {
            return Err(FairnessError::EmptyGroup(g));
        }
    }
    Ok([sum[0] / count[0] as f64, sum[1] / count[1] as f64])
}

/// The sign term `R = α(-1)^[P<Q](-1)^[u∉S0]`, or `None` when `P = Q`.
pub fn direction(alpha: Smoothness, stats: GroupStats, membership: Group) -> Option<f64> {
    if stats.p == stats.q {
        return None;
    }
    let lagging_s0 = if stats.p < stats.q { -1.0 } else { 1.0 };
    let outside_s0 = if membership == Group::S0 { 1.0 } else { -1.0 };
    Some(alpha.exponent() as f64 * lagging_s0 * outside_s0)
}

/// Gradient multiplier `L = 1 - βR|P-Q|^(α-1)`, clamped to
/// [`SCALE_CLAMP`]. Equal group statistics leave the gradient untouched.
pub fn scale_factor(config: &FairnessConfig, stats: GroupStats, membership: Group) -> f64 {
    if config.beta == 0.0 {
        return 1.0;
    }
    let Some(r) = direction(config.alpha, stats, membership) else {
        return 1.0;
    };
    let l = 1.0 - config.beta * r * stats.gap().powi(config.alpha.exponent() - 1);
    l.clamp(SCALE_CLAMP.0, SCALE_CLAMP.1)
}

/// One client's noised group-statistics upload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsContribution {
    pub p_per: f64,
    pub p_add: f64,
    pub q_per: f64,
    pub q_add: f64,
}

/// The four Gaussian perturbations `[ε1, ε2, ε3, ε4]` applied to
/// `(P_per, Q_per, P_add, Q_add)`.
pub type EpochNoise = [f64; 4];

/// Draw the noise for `(user, epoch)` from its own substream, so repeated
/// requests within an epoch see the same values.
pub fn epoch_noise(seed: u64, user: UserId, epoch: usize, sigma: f64) -> Result<EpochNoise, FairnessError> {
    if !(sigma >= 0.0) {
        return Err(FairnessError::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok([0.0; 4]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| FairnessError::Config(e.to_string()))?;
    let mut rng = substream(seed, label::STATS_NOISE, &[user as u64, epoch as u64]);
    Ok([
        normal.sample(&mut rng),
        normal.sample(&mut rng),
        normal.sample(&mut rng),
        normal.sample(&mut rng),
    ])
}

/// Memoizes [`epoch_noise`] per `(user, epoch)`.
#[derive(Debug, Default)]
pub struct NoiseCache {
    seed: u64,
    sigma: f64,
    drawn: HashMap<(UserId, usize), EpochNoise>,
}

impl NoiseCache {
    pub fn new(seed: u64, sigma: f64) -> Self {
        Self {
            seed,
            sigma,
            drawn: HashMap::new(),
        }
    }

    pub fn get(&mut self, user: UserId, epoch: usize) -> Result<EpochNoise, FairnessError> {
        if let Some(n) = self.drawn.get(&(user, epoch)) {
            return Ok(*n);
        }
        let n = epoch_noise(self.seed, user, epoch, self.sigma)?;
        self.drawn.insert((user, epoch), n);
        Ok(n)
    }

    /// Drop entries from epochs before `epoch`.
    pub fn retain_from(&mut self, epoch: usize) {
        self.drawn.retain(|(_, e), _| *e >= epoch);
    }
}

pub fn make_contribution(
    metric: f64,
    membership: Group,
    sigma: f64,
    noise: EpochNoise,
) -> Result<StatsContribution, FairnessError> {
    if !(sigma >= 0.0) {
        return Err(FairnessError::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    let (in_s0, in_s1) = match membership {
        Group::S0 => (1.0, 0.0),
        Group::S1 => (0.0, 1.0),
    };
    let [e1, e2, e3, e4] = noise;
    Ok(StatsContribution {
        p_per: in_s0 * metric + e1,
        q_per: in_s1 * metric + e2,
        p_add: in_s0 + e3,
        q_add: in_s1 + e4,
    })
}

/// Result of one server-side aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsUpdate {
    pub stats: GroupStats,
    /// The P denominator fell under the floor; P was carried over.
    pub p_retained: bool,
    pub q_retained: bool,
}

/// `P = ΣP_per / ΣP_add`, `Q = ΣQ_per / ΣQ_add`; a component whose
/// denominator magnitude is below [`DENOMINATOR_FLOOR`] keeps its value
/// from `previous`.
pub fn aggregate_stats(
    contributions: &[StatsContribution],
    previous: GroupStats,
) -> Result<StatsUpdate, FairnessError> {
    if contributions.is_empty() {
        return Err(FairnessError::NoContributions);
    }
    let mut sums = [0.0f64; 4];
    for c in contributions {
        sums[0] += c.p_per;
        sums[1] += c.p_add;
        sums[2] += c.q_per;
        sums[3] += c.q_add;
    }
    let ratio = |num: f64, den: f64, prev: f64, name: &str| {
        if den.abs() < DENOMINATOR_FLOOR {
            info!("group statistic {name}: denominator {den:.4} below floor, keeping {prev}");
            (prev, true)
        } else {
            (num / den, false)
        }
    };
    let (p, p_retained) = ratio(sums[0], sums[1], previous.p, "P");
    let (q, q_retained) = ratio(sums[2], sums[3], previous.q, "Q");
    Ok(StatsUpdate {
        stats: GroupStats { p, q },
        p_retained,
        q_retained,
    })
}

/// Draw `n` i.i.d. Gaussian noise tuples from `rng`, mainly for simulation
/// studies of the aggregation.
pub fn sample_noise<R: Rng>(rng: &mut R, sigma: f64, n: usize) -> Vec<EpochNoise> {
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    (0..n)
        .map(|_| {
            [
                normal.sample(rng),
                normal.sample(rng),
                normal.sample(rng),
                normal.sample(rng),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SensitiveAttribute;
    use proptest::prelude::*;
    use rand::Rng;

    fn groups(pairs: &[(UserId, Group)]) -> SensitiveAssignment {
        SensitiveAssignment::new(SensitiveAttribute::Gender, pairs.iter().cloned().collect())
    }

    fn cfg(beta: f64, alpha: Smoothness) -> FairnessConfig {
        FairnessConfig {
            beta,
            alpha,
            sigma: 0.0,
        }
    }

    #[test]
    fn disparity_examples() {
        let g = groups(&[(1, Group::S0), (2, Group::S1), (3, Group::S1)]);
        let same: BTreeMap<_, _> = [(1, 0.7), (2, 0.7), (3, 0.7)].into();
        assert_eq!(disparity(&same, &g, Smoothness::Linear).unwrap(), 0.0);
        let g2 = groups(&[(1, Group::S0), (2, Group::S1)]);
        let m: BTreeMap<_, _> = [(1, 0.5), (2, 0.3)].into();
        assert!((disparity(&m, &g2, Smoothness::Linear).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn disparity_matches_brute_force_squared() {
        let mut rng = substream(3, "disp", &[]);
        let mut pairs = Vec::new();
        let mut metric = BTreeMap::new();
        for u in 0..20u32 {
            let g = if rng.random::<bool>() || u == 0 { Group::S0 } else { Group::S1 };
            let g = if u == 1 { Group::S1 } else { g };
            pairs.push((u, g));
            metric.insert(u, rng.random_range(-2.0..0.0));
        }
        let ga = groups(&pairs);
        let s0: Vec<f64> = pairs.iter().filter(|p| p.1 == Group::S0).map(|p| metric[&p.0]).collect();
        let s1: Vec<f64> = pairs.iter().filter(|p| p.1 == Group::S1).map(|p| metric[&p.0]).collect();
        let diff = s0.iter().sum::<f64>() / s0.len() as f64 - s1.iter().sum::<f64>() / s1.len() as f64;
        let got = disparity(&metric, &ga, Smoothness::Squared).unwrap();
        assert!((got - diff * diff).abs() < 1e-14);
    }

    #[test]
    fn disparity_empty_group_named() {
        let g = groups(&[(1, Group::S0)]);
        let m: BTreeMap<_, _> = [(1, 0.5)].into();
        assert_eq!(
            disparity(&m, &g, Smoothness::Linear),
            Err(FairnessError::EmptyGroup(Group::S1))
        );
    }

    #[test]
    fn scale_factor_examples() {
        let stats = GroupStats { p: 0.8, q: 0.5 };
        for g in [Group::S0, Group::S1] {
            assert_eq!(scale_factor(&cfg(0.0, Smoothness::Linear), stats, g), 1.0);
        }
        // superior S0 member is slowed
        assert_eq!(scale_factor(&cfg(0.5, Smoothness::Linear), stats, Group::S0), 0.5);
        assert_eq!(scale_factor(&cfg(0.5, Smoothness::Linear), stats, Group::S1), 1.5);
        // α = 2, u ∈ S1: R = 2·(+1)·(-1) = -2; L = 1 - 0.3·(-2)·0.3
        assert_eq!(direction(Smoothness::Squared, stats, Group::S1), Some(-2.0));
        let l = scale_factor(&cfg(0.3, Smoothness::Squared), stats, Group::S1);
        assert!((l - 1.18).abs() < 1e-12, "{l}");
        // ties leave learning untouched
        let tie = GroupStats { p: 0.4, q: 0.4 };
        assert_eq!(scale_factor(&cfg(0.9, Smoothness::Linear), tie, Group::S0), 1.0);
        assert_eq!(scale_factor(&cfg(0.9, Smoothness::Linear), GroupStats::INITIAL, Group::S1), 1.0);
    }

    #[test]
    fn scale_factor_is_clamped() {
        let stats = GroupStats { p: 10.0, q: 0.0 };
        let c = cfg(0.9, Smoothness::Squared);
        assert_eq!(scale_factor(&c, stats, Group::S0), SCALE_CLAMP.0);
        assert_eq!(scale_factor(&c, stats, Group::S1), SCALE_CLAMP.1);
    }

    #[test]
    fn contribution_examples() {
        let c = make_contribution(-0.9, Group::S0, 0.0, [0.0; 4]).unwrap();
        assert_eq!((c.p_per, c.q_per, c.p_add, c.q_add), (-0.9, 0.0, 1.0, 0.0));
        let c = make_contribution(-1.2, Group::S1, 0.0, [0.0; 4]).unwrap();
        assert_eq!((c.p_per, c.q_per, c.p_add, c.q_add), (0.0, -1.2, 0.0, 1.0));
        assert!(matches!(
            make_contribution(0.0, Group::S0, -0.1, [0.0; 4]),
            Err(FairnessError::Config(_))
        ));
    }

    #[test]
    fn seeded_contribution_adds_regenerated_draws() {
        let noise = epoch_noise(42, 7, 3, 0.1).unwrap();
        let c = make_contribution(-1.0, Group::S0, 0.1, noise).unwrap();
        // regenerate the draws directly from the documented substream
        let mut rng = substream(42, label::STATS_NOISE, &[7, 3]);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let e: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
        assert_eq!(c.p_per, -1.0 + e[0]);
        assert_eq!(c.q_per, e[1]);
        assert_eq!(c.p_add, 1.0 + e[2]);
        assert_eq!(c.q_add, e[3]);
    }

    #[test]
    fn noise_cache_is_idempotent_within_epoch() {
        let mut cache = NoiseCache::new(5, 0.2);
        let a = cache.get(1, 0).unwrap();
        assert_eq!(a, cache.get(1, 0).unwrap());
        assert_ne!(a, cache.get(1, 1).unwrap());
        assert_ne!(a, cache.get(2, 0).unwrap());
        cache.retain_from(1);
        assert_eq!(a, cache.get(1, 0).unwrap());
    }

    #[test]
    fn aggregate_examples() {
        let cs = [
            make_contribution(-1.0, Group::S0, 0.0, [0.0; 4]).unwrap(),
            make_contribution(-3.0, Group::S0, 0.0, [0.0; 4]).unwrap(),
            make_contribution(-2.0, Group::S1, 0.0, [0.0; 4]).unwrap(),
        ];
        let up = aggregate_stats(&cs, GroupStats::INITIAL).unwrap();
        assert_eq!(up.stats, GroupStats { p: -2.0, q: -2.0 });

        let single = [make_contribution(-0.7, Group::S0, 0.0, [0.0; 4]).unwrap()];
        let prev = GroupStats { p: 3.0, q: 4.0 };
        let up = aggregate_stats(&single, prev).unwrap();
        assert_eq!(up.stats.p, -0.7);
        assert_eq!(up.stats.q, 4.0);
        assert!(up.q_retained && !up.p_retained);

        assert_eq!(
            aggregate_stats(&[], prev),
            Err(FairnessError::NoContributions)
        );
    }

    #[test]
    fn noisy_aggregate_lands_near_truth() {
        let n = 1000;
        let sigma = 0.05;
        let mut rng = substream(11, "mc", &[]);
        let mut cs = Vec::new();
        let mut truth = Vec::new();
        for u in 0..n {
            let g = if u % 2 == 0 { Group::S0 } else { Group::S1 };
            let m: f64 = rng.random_range(-2.0..-0.5);
            if g == Group::S0 {
                truth.push(m);
            }
            cs.push(make_contribution(m, g, sigma, epoch_noise(11, u, 0, sigma).unwrap()).unwrap());
        }
        let p = aggregate_stats(&cs, GroupStats::INITIAL).unwrap().stats.p;
        let mean = truth.iter().sum::<f64>() / truth.len() as f64;
        // delta-method standard error of a ratio of noisy sums
        let k = truth.len() as f64;
        let se = (n as f64).sqrt() * sigma * (1.0 + mean * mean).sqrt() / k;
        assert!((p - mean).abs() < 3.0 * se, "p={p} mean={mean} se={se}");
    }

    proptest! {
        #[test]
        fn zero_noise_aggregation_is_exact(ms in proptest::collection::vec((-3.0f64..0.0, any::<bool>()), 2..60)) {
            let mut ms = ms;
            ms[0].1 = false;
            ms[1].1 = true;
            let cs: Vec<_> = ms.iter().map(|(m, s1)| {
                make_contribution(*m, if *s1 { Group::S1 } else { Group::S0 }, 0.0, [0.0; 4]).unwrap()
            }).collect();
            let up = aggregate_stats(&cs, GroupStats::INITIAL).unwrap();
            let mean = |want: bool| {
                let v: Vec<f64> = ms.iter().filter(|x| x.1 == want).map(|x| x.0).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            prop_assert!((up.stats.p - mean(false)).abs() < 1e-12);
            prop_assert!((up.stats.q - mean(true)).abs() < 1e-12);
        }

        #[test]
        fn superior_group_never_sped_up(p in -3.0f64..1.0, q in -3.0f64..1.0, beta in 0.0f64..0.999, sq in any::<bool>()) {
            let alpha = if sq { Smoothness::Squared } else { Smoothness::Linear };
            let c = cfg(beta, alpha);
            let stats = GroupStats { p, q };
            let (l0, l1) = (scale_factor(&c, stats, Group::S0), scale_factor(&c, stats, Group::S1));
            if p > q {
                prop_assert!(l0 <= 1.0 && 1.0 <= l1);
            } else if p < q {
                prop_assert!(l1 <= 1.0 && 1.0 <= l0);
            }
            // swapping labels and membership together leaves L unchanged
            let swapped = GroupStats { p: q, q: p };
            prop_assert_eq!(l0, scale_factor(&c, swapped, Group::S1));
            prop_assert_eq!(l1, scale_factor(&c, swapped, Group::S0));
        }
    }

    #[test]
    fn noisy_numerator_is_unbiased() {
        // E[Σ P_per] = Σ 1(u∈S0) M_u; check the mean of 400 replicates.
        let sigma = 0.5;
        let metrics: Vec<(f64, Group)> = (0..50)
            .map(|u| (-(u as f64) / 25.0, if u % 3 == 0 { Group::S1 } else { Group::S0 }))
            .collect();
        let truth: f64 = metrics.iter().filter(|m| m.1 == Group::S0).map(|m| m.0).sum();
        let reps = 400;
        let mut rng = substream(1, "unbiased", &[]);
        let mut total = 0.0;
        for _ in 0..reps {
            let noise = sample_noise(&mut rng, sigma, metrics.len());
            total += metrics
                .iter()
                .zip(noise)
                .map(|((m, g), e)| make_contribution(*m, *g, sigma, e).unwrap().p_per)
                .sum::<f64>();
        }
        let mean = total / reps as f64;
        let se = sigma * (metrics.len() as f64).sqrt() / (reps as f64).sqrt();
        assert!((mean - truth).abs() < 3.0 * se);
    }
}
