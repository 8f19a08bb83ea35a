//! Self-checks runnable outside the test harness. Each suite compares a
//! production routine against an independent slow reference and reports the
//! worst discrepancy it saw.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::Distribution;
use serde::Serialize;

use crate::data::{ncore_filter, Group, RatingRecord, RatingTable, UserId};
use crate::expansion::{encrypt_item_id, ClientTag, ExpansionClient, ExpansionKey, ExpansionServer};
use crate::fairness::{aggregate_stats, make_contribution, GroupStats};
use crate::model::{
    backward, forward, Activation, ForwardMode, ForwardTrace, GradientSet, LocalSubgraph, ModelConfig, ModelState,
};
use crate::privacy::{clip_and_noise, Laplace, LdpConfig};
use crate::rng::substream;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest error observed, in the suite's own units.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {} cases={} worst={:.3e} tol={:.1e} {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.worst,
            self.tolerance,
            self.detail
        )
    }
}

pub type BackwardFn = dyn Fn(&ForwardTrace, &[f64], &LocalSubgraph, &ModelState, &ModelConfig) -> GradientSet;

/// One randomly drawn gradient-check problem.
struct GradCase {
    graph: LocalSubgraph,
    params: ModelState,
    config: ModelConfig,
    truths: Vec<f64>,
    dropout_seed: Option<u64>,
}

/// Distance to the nearest point where the loss is not differentiable.
fn kink_margin(trace: &ForwardTrace, cfg: &ModelConfig) -> f64 {
    let mut margin = f64::INFINITY;
    for l in &trace.layers {
        for s in l.scores.iter().flatten() {
            margin = margin.min(s.abs());
        }
        if cfg.activation != Activation::Identity {
            for x in &l.pre_activation {
                margin = margin.min(x.abs());
            }
        }
    }
    margin
}

fn draw_case<R: Rng>(rng: &mut R) -> GradCase {
    let h = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=3usize);
    let r = rng.random_range(0..=4 - m);
    let activation = [Activation::Relu, Activation::LeakyRelu, Activation::Identity][rng.random_range(0..3)];
    let config = ModelConfig {
        hidden: h,
        layers: rng.random_range(1..=2),
        activation,
        dropout: if rng.random_bool(0.5) { 0.3 } else { 0.0 },
        self_loops: rng.random_bool(0.7),
        ..ModelConfig::default()
    };
    let items: Vec<u32> = (10..10 + m as u32).collect();
    let mut params = ModelState::init(&[1], &items, &config, rng);
    // larger attention weights so the softmax is far from uniform
    for l in &mut params.layers {
        for a in &mut l.attention {
            *a *= 3.0;
        }
    }
    let neighbors = (0..r)
        .map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>().into())
        .collect();
    let truths = (0..m).map(|_| rng.random_range(1.0..5.0)).collect();
    let dropout_seed = (config.dropout > 0.0).then(|| rng.random());
    GradCase {
        graph: LocalSubgraph {
            user: 1,
            items,
            neighbors,
        },
        params,
        config,
        truths,
        dropout_seed,
    }
}

fn case_trace(c: &GradCase, params: &ModelState) -> ForwardTrace {
    let run = match c.dropout_seed {
        Some(s) => forward(
            &c.graph,
            params,
            &c.config,
            ForwardMode::Train {
                dropout: c.config.dropout,
                rng: &mut substream(s, "gradcheck", &[]),
            },
        ),
        None => forward(&c.graph, params, &c.config, ForwardMode::eval()),
    };
    run.expect("generated case is well formed")
}

fn case_loss(c: &GradCase, params: &ModelState) -> f64 {
    let t = case_trace(c, params);
    crate::model::local_loss(&t, &c.truths).expect("truths match")
}

/// Flat views over the parameters a client's gradient covers, in the
/// order of [`GradientSet::values`].
fn param_slots(c: &GradCase) -> Vec<(usize, usize)> {
    let h = c.config.hidden;
    let mut slots: Vec<(usize, usize)> = (0..h).map(|j| (0, j)).collect();
    let mut sorted = c.graph.items.clone();
    sorted.sort_unstable();
    for (k, _) in sorted.iter().enumerate() {
        slots.extend((0..h).map(|j| (1 + k, j)));
    }
    let base = 1 + sorted.len();
    for l in 0..c.params.layers.len() {
        slots.extend((0..h * h + 2 * h).map(|j| (base + l, j)));
    }
    slots
}

fn param_mut<'a>(c: &GradCase, p: &'a mut ModelState, slot: (usize, usize)) -> &'a mut f64 {
    let h = c.config.hidden;
    let mut sorted = c.graph.items.clone();
    sorted.sort_unstable();
    let (block, j) = slot;
    if block == 0 {
        &mut p.users.row_mut(c.graph.user).unwrap()[j]
    } else if block <= sorted.len() {
        &mut p.items.row_mut(sorted[block - 1]).unwrap()[j]
    } else {
        let l = &mut p.layers[block - 1 - sorted.len()];
        if j < h * h {
            &mut l.transform[j]
        } else {
            &mut l.attention[j - h * h]
        }
    }
}

/// Compare `grad` against central finite differences on `cases` random
/// graphs of at most five nodes and hidden size at most four. The error of
/// a case is `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)`.
pub fn gradient_check_with(cases: usize, seed: u64, grad: &BackwardFn) -> SuiteResult {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-3;
    let mut rng = substream(seed, "verify/gradient", &[]);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut redrawn = 0;
    while done < cases {
        let c = draw_case(&mut rng);
        let trace = case_trace(&c, &c.params);
        if kink_margin(&trace, &c.config) < 1e-3 {
            redrawn += 1;
            continue;
        }
        let analytic: Vec<f64> = grad(&trace, &c.truths, &c.graph, &c.params, &c.config)
            .values()
            .copied()
            .collect();
        let slots = param_slots(&c);
        let mut numeric = Vec::with_capacity(slots.len());
        for &s in &slots {
            let mut p = c.params.clone();
            let x0 = *param_mut(&c, &mut p, s);
            *param_mut(&c, &mut p, s) = x0 + STEP;
            let up = case_loss(&c, &p);
            *param_mut(&c, &mut p, s) = x0 - STEP;
            let down = case_loss(&c, &p);
            numeric.push((up - down) / (2.0 * STEP));
        }
        let err = if analytic.len() != numeric.len() {
            f64::INFINITY
        } else {
            let diff = l2(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
            let scale = l2(analytic.iter().copied()).max(l2(numeric.iter().copied()));
            if scale < 1e-10 {
                diff
            } else {
                diff / scale
            }
        };
        worst = worst.max(err);
        done += 1;
    }
    SuiteResult {
        name: "gradient",
        cases,
        worst,
        tolerance: TOL,
        passed: worst < TOL,
        detail: format!("redrawn_near_kink={redrawn}"),
    }
}

pub fn gradient_check(cases: usize, seed: u64) -> SuiteResult {
    gradient_check_with(cases, seed, &backward)
}

fn l2<I: Iterator<Item = f64>>(xs: I) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

fn rated(records: &[RatingRecord]) -> BTreeMap<UserId, BTreeSet<u32>> {
    let mut out: BTreeMap<UserId, BTreeSet<u32>> = BTreeMap::new();
    for r in records {
        out.entry(r.user).or_default().insert(r.item);
    }
    out
}

fn random_table<R: Rng>(rng: &mut R, users: u32, items: u32, density: f64) -> Vec<RatingRecord> {
    let mut v = Vec::new();
    for u in 0..users {
        for i in 0..items {
            if rng.random_bool(density) {
                v.push(RatingRecord {
                    user: u,
                    item: i,
                    rating: rng.random_range(1..=5) as f64,
                    timestamp: rng.random_range(0..1_000_000),
                });
            }
        }
    }
    v
}

/// Run one expansion round with every user and compare each client's slice
/// against a join computed on plaintext ids. Then replay five rounds of
/// partial participation and check the server never holds more digests
/// than distinct items uploaded.
pub fn expansion_check(fixtures: usize, seed: u64) -> SuiteResult {
    let mut rng = substream(seed, "verify/expansion", &[]);
    let mut mismatches = 0usize;
    for _ in 0..fixtures {
        let records = random_table(&mut rng, 100, 50, 0.08);
        let items_of = rated(&records);
        let key = Arc::new(ExpansionKey::generate(&mut rng));
        let emb = |u: UserId| -> crate::model::Embedding { vec![u as f64 + 0.5, -(u as f64)].into() };

        let mut clients: BTreeMap<UserId, ExpansionClient> = items_of
            .keys()
            .map(|&u| (u, ExpansionClient::new(ClientTag::generate(&mut rng), key.clone())))
            .collect();
        let mut server = ExpansionServer::new(2);
        let uploads = items_of
            .iter()
            .map(|(u, its)| {
                let its: Vec<u32> = its.iter().copied().collect();
                clients.get_mut(u).unwrap().prepare_upload(&its, emb(*u))
            })
            .collect();
        let map = server.update_mapping(uploads).expect("dimensions agree");
        for (&u, its) in &items_of {
            let slice = map.slice_for(clients[&u].tag()).expect("client uploaded");
            if slice.entries.len() != its.len() {
                mismatches += 1;
            }
            for &i in its {
                let want: BTreeSet<u64> = items_of
                    .iter()
                    .filter(|(v, s)| **v != u && s.contains(&i))
                    .map(|(v, _)| emb(*v)[0].to_bits())
                    .collect();
                let got: BTreeSet<u64> = slice
                    .entries
                    .get(&encrypt_item_id(i, &key))
                    .map(|l| l.iter().map(|e| e[0].to_bits()).collect())
                    .unwrap_or_default();
                if want != got {
                    mismatches += 1;
                }
            }
        }
    }

    // five rounds, each user revealing a growing prefix of its items
    let records = random_table(&mut rng, 100, 50, 0.08);
    let items_of = rated(&records);
    let key = Arc::new(ExpansionKey::generate(&mut rng));
    let mut clients: BTreeMap<UserId, ExpansionClient> = items_of
        .keys()
        .map(|&u| (u, ExpansionClient::new(ClientTag::generate(&mut rng), key.clone())))
        .collect();
    let mut server = ExpansionServer::new(1);
    let mut sent_items = BTreeSet::new();
    let mut sent_pairs = BTreeSet::new();
    for round in 1..=5usize {
        let mut uploads = Vec::new();
        for (u, its) in &items_of {
            if !rng.random_bool(0.7) {
                continue;
            }
            let shown: Vec<u32> = its.iter().copied().take(its.len() * round / 5).collect();
            for &i in &shown {
                sent_items.insert(i);
                sent_pairs.insert((*u, i));
            }
            uploads.push(clients.get_mut(u).unwrap().prepare_upload(&shown, vec![round as f64].into()));
        }
        server.update_mapping(uploads).expect("dimensions agree");
    }
    if server.digest_count() != sent_items.len() {
        mismatches += 1;
    }
    if server.received_digests() != sent_pairs.len() {
        mismatches += 1;
    }

    SuiteResult {
        name: "expansion",
        cases: fixtures + 1,
        worst: mismatches as f64,
        tolerance: 0.0,
        passed: mismatches == 0,
        detail: format!("digests={} distinct_items={}", server.digest_count(), sent_items.len()),
    }
}

/// Laplace noise mean over `draws` samples, and the clipped norm bound on
/// random gradients.
pub fn noise_check(draws: usize, seed: u64) -> SuiteResult {
    let cfg = LdpConfig {
        delta: 0.4,
        lambda: 0.15,
        enabled: true,
    };
    let mut rng = substream(seed, "verify/noise", &[]);
    let lap = Laplace::new(cfg.lambda).expect("valid scale");
    let xs: Vec<f64> = (0..draws).map(|_| lap.sample(&mut rng)).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let z = mean.abs() / se;

    let mut norm_excess = 0.0f64;
    let clip_only = LdpConfig { lambda: 0.0, ..cfg };
    for _ in 0..200 {
        let h = rng.random_range(1..8);
        let mut g = GradientSet::zeros(0, &[1, 2], h, 1);
        let spread = rng.random_range(0.01..20.0);
        for x in g.values_mut() {
            *x = rng.random_range(-spread..spread);
        }
        clip_and_noise(&mut g, &clip_only, &mut rng).expect("finite gradient");
        norm_excess = norm_excess.max(g.norm() - cfg.delta);
    }
    let passed = z < 3.0 && norm_excess <= 1e-12;
    SuiteResult {
        name: "noise",
        cases: draws,
        worst: z,
        tolerance: 3.0,
        passed,
        detail: format!(
            "mean={mean:.2e} var={var:.4} (2b^2={:.4}) max_norm_excess={norm_excess:.1e}",
            2.0 * cfg.lambda * cfg.lambda
        ),
    }
}

fn ncore_reference(records: &[RatingRecord], n: usize) -> BTreeSet<(u32, u32)> {
    let mut live: BTreeSet<(u32, u32)> = records.iter().map(|r| (r.user, r.item)).collect();
    loop {
        let mut ud: BTreeMap<u32, usize> = BTreeMap::new();
        let mut id: BTreeMap<u32, usize> = BTreeMap::new();
        for &(u, i) in &live {
            *ud.entry(u).or_default() += 1;
            *id.entry(i).or_default() += 1;
        }
        let before = live.len();
        live.retain(|(u, i)| ud[u] >= n && id[i] >= n);
        if live.len() == before {
            return live;
        }
    }
}

/// Compare the n-core filter with a naive fixed-point loop on random tables.
pub fn ncore_check(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = substream(seed, "verify/ncore", &[]);
    let mut mismatches = 0;
    for _ in 0..cases {
        let density = rng.random_range(0.1..0.6);
        let records = random_table(&mut rng, 15, 15, density);
        let n = rng.random_range(1..5);
        let want = ncore_reference(&records, n);
        let got: BTreeSet<(u32, u32)> = RatingTable::new(records)
            .ok()
            .and_then(|t| ncore_filter(&t, n).ok())
            .map(|t| t.records().iter().map(|r| (r.user, r.item)).collect())
            .unwrap_or_default();
        if want != got {
            mismatches += 1;
        }
    }
    SuiteResult {
        name: "ncore",
        cases,
        worst: mismatches as f64,
        tolerance: 0.0,
        passed: mismatches == 0,
        detail: String::new(),
    }
}

/// Noise-free aggregation must reproduce the plain group means; with
/// `σ = 0.05` the Monte-Carlo mean of `P` must sit within three standard
/// errors of the true S0 mean.
pub fn group_stats_check(trials: usize, seed: u64) -> SuiteResult {
    let mut rng = substream(seed, "verify/groups", &[]);
    let mut exact_err = 0.0f64;
    for _ in 0..50 {
        let users = rng.random_range(2..60);
        let pop: Vec<(f64, Group)> = (0..users)
            .map(|k| {
                let g = if k % 2 == 0 || rng.random_bool(0.3) { Group::S0 } else { Group::S1 };
                (rng.random_range(-4.0..0.0), g)
            })
            .collect();
        let contribs: Vec<_> = pop
            .iter()
            .map(|(m, g)| make_contribution(*m, *g, 0.0, [0.0; 4]).expect("valid sigma"))
            .collect();
        let agg = aggregate_stats(&contribs, GroupStats::INITIAL).expect("non-empty");
        let mean = |grp: Group| {
            let v: Vec<f64> = pop.iter().filter(|(_, g)| *g == grp).map(|(m, _)| *m).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        exact_err = exact_err.max((agg.stats.p - mean(Group::S0)).abs());
        if pop.iter().any(|(_, g)| *g == Group::S1) {
            exact_err = exact_err.max((agg.stats.q - mean(Group::S1)).abs());
        }
    }

    let sigma = 0.05;
    let pop: Vec<(f64, Group)> = (0..200)
        .map(|k| {
            let g = if k % 3 == 0 { Group::S1 } else { Group::S0 };
            (rng.random_range(-3.0..-0.5), g)
        })
        .collect();
    let truth = {
        let v: Vec<f64> = pop.iter().filter(|(_, g)| *g == Group::S0).map(|(m, _)| *m).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let estimates: Vec<f64> = (0..trials)
        .map(|_| {
            let noise = crate::fairness::sample_noise(&mut rng, sigma, pop.len());
            let contribs: Vec<_> = pop
                .iter()
                .zip(noise)
                .map(|((m, g), e)| make_contribution(*m, *g, sigma, e).expect("valid sigma"))
                .collect();
            aggregate_stats(&contribs, GroupStats::INITIAL).expect("non-empty").stats.p
        })
        .collect();
    let n = trials as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let z = (mean - truth).abs() / (sd / n.sqrt());
    SuiteResult {
        name: "group-stats",
        cases: 50 + trials,
        worst: exact_err,
        tolerance: 1e-12,
        passed: exact_err <= 1e-12 && z < 3.0,
        detail: format!("noisy_z={z:.2}"),
    }
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    run_all_with(seed, &backward)
}

/// [`run_all`] with a substitute gradient routine, for mutation testing.
pub fn run_all_with(seed: u64, grad: &BackwardFn) -> Vec<SuiteResult> {
    vec![
        gradient_check_with(100, seed, grad),
        expansion_check(20, seed),
        noise_check(100_000, seed),
        ncore_check(200, seed),
        group_stats_check(2000, seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(0) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn broken_backward_is_caught() {
        let flipped = |t: &ForwardTrace, y: &[f64], g: &LocalSubgraph, p: &ModelState, c: &ModelConfig| {
            let mut out = backward(t, y, g, p, c);
            for x in out.layers[0].attention.iter_mut() {
                *x = -*x;
            }
            out
        };
        let r = gradient_check_with(20, 3, &flipped);
        assert!(!r.passed, "{r}");
    }
}
