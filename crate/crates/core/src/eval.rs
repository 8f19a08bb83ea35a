//! RMSE and group disparity on held-out ratings, plus the sweep tables.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Group, RatingTable, SensitiveAssignment, SplitTable, UserId, RATING_MAX, RATING_MIN};
use crate::fairness::{disparity, group_means, FairnessError, Smoothness, UserMetric};
use crate::federation::{train, ExperimentConfig, FederationError, RoundRecord, TrainOutcome};
use crate::model::{predict, LocalSubgraph, ModelConfig, ModelError, ModelState};
use crate::privacy::privacy_budget;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate: the split is empty")]
    Empty,
    #[error("sweep has no cells")]
    EmptySweep,
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rmse: f64,
    /// Mean per-user RMSE of S0 and S1.
    pub group_rmse: [f64; 2],
    pub disparity: f64,
    pub per_user: BTreeMap<UserId, f64>,
    /// Squared-error sums and rating counts of S0 and S1.
    pub group_sse: [(f64, usize); 2],
    pub count: usize,
}

/// Score every rating in `split` with the user's training-time graph as
/// context. Users without a context are evaluated on a bare user node.
pub fn evaluate(
    params: &ModelState,
    config: &ModelConfig,
    contexts: &BTreeMap<UserId, LocalSubgraph>,
    split: &RatingTable,
    groups: &SensitiveAssignment,
    alpha: Smoothness,
) -> Result<EvalReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::Empty);
    }
    let users: Vec<_> = split.by_user().into_iter().collect();
    let per_user_sse: Vec<(UserId, f64, usize)> = users
        .par_iter()
        .map(|(u, held)| {
            let bare;
            let graph = match contexts.get(u) {
                Some(g) => g,
                None => {
                    bare = LocalSubgraph::new(*u, Vec::new());
                    &bare
                }
            };
            let preds = predict(graph, params, config, &held.items)?;
            let sse = preds
                .iter()
                .zip(&held.ratings)
                .map(|(p, y)| (p.clamp(RATING_MIN, RATING_MAX) - y).powi(2))
                .sum::<f64>();
            Ok((*u, sse, held.len()))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut total = 0.0;
    let mut count = 0;
    let mut group_sse = [(0.0, 0usize); 2];
    let mut per_user = BTreeMap::new();
    for (u, sse, n) in per_user_sse {
        total += sse;
        count += n;
        if n == 0 {
            debug!("user {u} has no evaluation ratings");
            continue;
        }
        per_user.insert(u, UserMetric::Rmse.from_mse(sse / n as f64));
        if let Some(g) = groups.group(u) {
            group_sse[g.index()].0 += sse;
            group_sse[g.index()].1 += n;
        }
    }
    // A split can miss a group entirely (tiny fixtures); the gap is then
    // undefined rather than an error.
    let (group_rmse, gap) = match group_means(&per_user, groups) {
        Ok(means) => (means, disparity(&per_user, groups, alpha)?),
        Err(FairnessError::EmptyGroup(g)) => {
            warn!("no {g} users among the evaluated ratings; disparity is undefined");
            let mut means = [f64::NAN; 2];
            for (i, m) in means.iter_mut().enumerate() {
                let xs: Vec<f64> = per_user
                    .iter()
                    .filter(|(u, _)| groups.group(**u).map(Group::index) == Some(i))
                    .map(|(_, r)| *r)
                    .collect();
                if !xs.is_empty() {
                    *m = xs.iter().sum::<f64>() / xs.len() as f64;
                }
            }
            (means, f64::NAN)
        }
        Err(e) => return Err(e.into()),
    };
    Ok(EvalReport {
        rmse: (total / count as f64).sqrt(),
        group_rmse,
        disparity: gap,
        per_user,
        group_sse,
        count,
    })
}

/// A finished run scored on the test split.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test: EvalReport,
}

/// Train with `config` and evaluate the final model on the test split.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &SplitTable,
    groups: &SensitiveAssignment,
) -> Result<RunResult, FederationError> {
    let outcome = train(config, data, groups)?;
    let test = evaluate(
        &outcome.state,
        &config.model,
        &outcome.contexts,
        &data.test,
        groups,
        config.fairness.alpha,
    )?;
    Ok(RunResult { outcome, test })
}

/// Scores of one finished sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub rmse: f64,
    pub disparity: f64,
    pub history: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub seed: u64,
    pub beta: f64,
    pub delta: f64,
    pub lambda: f64,
    pub ldp: bool,
    /// The run's scores, or the error that stopped it.
    pub result: Result<CellScores, String>,
}

impl SweepCell {
    pub fn epsilon(&self) -> f64 {
        if self.ldp {
            privacy_budget(&crate::privacy::LdpConfig {
                delta: self.delta,
                lambda: self.lambda,
                enabled: true,
            })
        } else {
            f64::INFINITY
        }
    }
}

fn run_cell(config: &ExperimentConfig, data: &SplitTable, groups: &SensitiveAssignment) -> SweepCell {
    let result = run_experiment(config, data, groups)
        .map(|r| CellScores {
            rmse: r.test.rmse,
            disparity: r.test.disparity,
            history: r.outcome.history,
        })
        .map_err(|e| {
            log::warn!("sweep cell beta={} failed: {e}", config.fairness.beta);
            e.to_string()
        });
    SweepCell {
        seed: config.seed,
        beta: config.fairness.beta,
        delta: config.ldp.delta,
        lambda: config.ldp.lambda,
        ldp: config.ldp.enabled,
        result,
    }
}

/// One train and test evaluation per β, all sharing `base`'s seed. A
/// failing cell is recorded and the sweep moves on.
pub fn beta_sweep(
    base: &ExperimentConfig,
    betas: &[f64],
    data: &SplitTable,
    groups: &SensitiveAssignment,
) -> Result<Vec<SweepCell>, EvalError> {
    if betas.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    Ok(betas
        .iter()
        .map(|&beta| {
            let mut cfg = base.clone();
            cfg.fairness.beta = beta;
            run_cell(&cfg, data, groups)
        })
        .collect())
}

/// One run per `(δ, λ)` pair with LDP switched on.
pub fn ldp_grid(
    base: &ExperimentConfig,
    deltas: &[f64],
    lambdas: &[f64],
    data: &SplitTable,
    groups: &SensitiveAssignment,
) -> Result<Vec<SweepCell>, EvalError> {
    if deltas.is_empty() || lambdas.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let mut out = Vec::with_capacity(deltas.len() * lambdas.len());
    for &delta in deltas {
        for &lambda in lambdas {
            let mut cfg = base.clone();
            cfg.ldp.enabled = true;
            cfg.ldp.delta = delta;
            cfg.ldp.lambda = lambda;
            out.push(run_cell(&cfg, data, groups));
        }
    }
    Ok(out)
}

/// Relative change of disparity and RMSE against the β = 0 cell with the
/// same seed, in percent. `None` where the baseline or the cell failed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PercentChange {
    pub seed: u64,
    pub beta: f64,
    pub disparity: Option<f64>,
    pub rmse: Option<f64>,
}

pub fn percent_changes(cells: &[SweepCell]) -> Vec<PercentChange> {
    let pct = |now: f64, then: f64| if then == 0.0 { 0.0 } else { 100.0 * (now - then) / then };
    cells
        .iter()
        .map(|c| {
            let base = cells
                .iter()
                .find(|b| b.beta == 0.0 && b.seed == c.seed)
                .and_then(|b| b.result.as_ref().ok());
            let pair = match (base, c.result.as_ref().ok()) {
                (Some(b), Some(s)) => Some((pct(s.disparity, b.disparity), pct(s.rmse, b.rmse))),
                _ => None,
            };
            PercentChange {
                seed: c.seed,
                beta: c.beta,
                disparity: pair.map(|p| p.0),
                rmse: pair.map(|p| p.1),
            }
        })
        .collect()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, EvalError> {
    csv::Writer::from_path(path).map_err(|e| write_err(path, e))
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn status(c: &SweepCell) -> String {
    match &c.result {
        Ok(_) => "ok".into(),
        Err(e) => format!("error: {e}"),
    }
}

fn num(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `manifest,dataset,attribute,seed,beta,rmse,disparity,status`.
pub fn write_table1(
    path: &Path,
    stamp: &str,
    dataset: &str,
    attribute: &str,
    cells: &[SweepCell],
) -> Result<(), EvalError> {
    let mut w = writer(path)?;
    let res = (|| -> csv::Result<()> {
        w.write_record(["manifest", "dataset", "attribute", "seed", "beta", "rmse", "disparity", "status"])?;
        for c in cells {
            let ok = c.result.as_ref().ok();
            w.write_record([
                stamp,
                dataset,
                attribute,
                &c.seed.to_string(),
                &c.beta.to_string(),
                &num(ok.map(|s| s.rmse)),
                &num(ok.map(|s| s.disparity)),
                &status(c),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| write_err(path, e))
}

/// Per-epoch curves:
/// `manifest,seed,beta,epoch,val_rmse,val_disparity,test_disparity,p,q,gap`.
pub fn write_figure3(path: &Path, stamp: &str, cells: &[SweepCell]) -> Result<(), EvalError> {
    let mut w = writer(path)?;
    let res = (|| -> csv::Result<()> {
        w.write_record([
            "manifest",
            "seed",
            "beta",
            "epoch",
            "val_rmse",
            "val_disparity",
            "test_disparity",
            "p",
            "q",
            "gap",
        ])?;
        for c in cells {
            let Ok(s) = &c.result else { continue };
            for r in &s.history {
                w.write_record([
                    stamp,
                    &c.seed.to_string(),
                    &c.beta.to_string(),
                    &r.epoch.to_string(),
                    &format!("{:.6}", r.val_rmse),
                    &format!("{:.6}", r.val_disparity),
                    &format!("{:.6}", r.test_disparity),
                    &format!("{:.6}", r.p),
                    &format!("{:.6}", r.q),
                    &format!("{:.6}", (r.p - r.q).abs()),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| write_err(path, e))
}

/// `manifest,seed,beta,disparity_change_pct,rmse_change_pct`.
pub fn write_percent_changes(path: &Path, stamp: &str, changes: &[PercentChange]) -> Result<(), EvalError> {
    let mut w = writer(path)?;
    let res = (|| -> csv::Result<()> {
        w.write_record(["manifest", "seed", "beta", "disparity_change_pct", "rmse_change_pct"])?;
        for c in changes {
            w.write_record([
                stamp,
                &c.seed.to_string(),
                &c.beta.to_string(),
                &num(c.disparity),
                &num(c.rmse),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| write_err(path, e))
}

/// `manifest,seed,beta,delta,lambda,epsilon,rmse,disparity,status`.
pub fn write_ldp_grid(path: &Path, stamp: &str, cells: &[SweepCell]) -> Result<(), EvalError> {
    let mut w = writer(path)?;
    let res = (|| -> csv::Result<()> {
        w.write_record(["manifest", "seed", "beta", "delta", "lambda", "epsilon", "rmse", "disparity", "status"])?;
        for c in cells {
            let ok = c.result.as_ref().ok();
            w.write_record([
                stamp,
                &c.seed.to_string(),
                &c.beta.to_string(),
                &c.delta.to_string(),
                &c.lambda.to_string(),
                &format!("{:.6}", c.epsilon()),
                &num(ok.map(|s| s.rmse)),
                &num(ok.map(|s| s.disparity)),
                &status(c),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| write_err(path, e))
}
