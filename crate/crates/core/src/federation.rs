//! The federated training loop.
//!
//! Every round the server samples clients, runs the graph-expansion
//! exchange, and broadcasts the current parameters and group statistics.
//! Each client then takes one local SGD step on its own subgraph with the
//! gradient rescaled for fairness and optionally privatized, and reports a
//! noised group-statistics contribution. The server averages the updates
//! and the statistics into the next round's state.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Group, ItemId, RatingTable, SensitiveAssignment, SensitiveAttribute, SplitTable, UserId};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::expansion::{ClientTag, EncryptedItemId, ExpansionClient, ExpansionError, ExpansionKey, ExpansionServer};
use crate::fairness::{
    aggregate_stats, make_contribution, performance, scale_factor, EpochNoise, FairnessConfig, FairnessError,
    GroupStats, NoiseCache, StatsContribution,
};
use crate::model::{
    backward, forward, local_loss, Embedding, ForwardMode, GradientSet, LocalSubgraph, ModelConfig, ModelError,
    ModelState,
};
use crate::privacy::{clip_and_noise, LdpConfig, PrivacyError};
use crate::rng::{label, substream};

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<FederationError>,
    },
}

impl FederationError {
    fn at(self, epoch: usize) -> Self {
        match self {
            e @ FederationError::Epoch { .. } => e,
            e => FederationError::Epoch {
                epoch,
                source: Box::new(e),
            },
        }
    }
}

/// Which prepared dataset and sensitive attribute a run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub attribute: SensitiveAttribute,
    pub ncore: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: "ml-100k".into(),
            attribute: SensitiveAttribute::Gender,
            ncore: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Maximum number of rounds.
    pub epochs: usize,
    pub eta: f64,
    /// Batch dropout rate: the fraction of users left out of each round.
    #[serde(rename = "K")]
    pub batch_dropout: f64,
    /// Draw the participating users once instead of every round.
    pub sample_once: bool,
    /// Largest number of neighbor users attached per client; 0 for no cap.
    pub neighbor_cap: usize,
    pub expansion: bool,
    /// Stop after this many rounds without a better validation RMSE; 0
    /// disables early stopping.
    pub early_stop: usize,
    pub model: ModelConfig,
    pub fairness: FairnessConfig,
    pub ldp: LdpConfig,
    pub dataset: DatasetSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            eta: 0.01,
            batch_dropout: 0.1,
            sample_once: false,
            neighbor_cap: 32,
            expansion: true,
            early_stop: 0,
            model: ModelConfig::default(),
            fairness: FairnessConfig::default(),
            ldp: LdpConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(FederationError::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.batch_dropout) {
            return Err(FederationError::Config(format!(
                "K must lie in [0, 1), got {}",
                self.batch_dropout
            )));
        }
        self.model.validate()?;
        self.fairness.validate()?;
        self.ldp.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, FederationError> {
        let cfg: Self = toml::from_str(text).map_err(|e| FederationError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, FederationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FederationError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    fn cap(&self) -> Option<usize> {
        (self.neighbor_cap > 0).then_some(self.neighbor_cap)
    }
}

/// `round((1-K)·n)`, at least 1.
pub fn sample_size(n: usize, k: f64) -> usize {
    (((1.0 - k) * n as f64).round() as usize).max(1)
}

/// Uniform sample without replacement of [`sample_size`] users, returned
/// in ascending order.
pub fn sample_users<R: Rng>(users: &[UserId], k: f64, rng: &mut R) -> Result<Vec<UserId>, FederationError> {
    if users.is_empty() {
        return Err(FederationError::Config("no users to sample from".into()));
    }
    if !(0.0..1.0).contains(&k) {
        return Err(FederationError::Config(format!("K must lie in [0, 1), got {k}")));
    }
    let n = sample_size(users.len(), k).min(users.len());
    let mut out: Vec<UserId> = index::sample(rng, users.len(), n).into_iter().map(|i| users[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// One client's result for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub user: UserId,
    /// Local training-set size, the aggregation weight.
    pub weight: f64,
    /// `Θ_u - Θ` on every parameter the client touched.
    pub delta: GradientSet,
    pub loss: f64,
    /// The fairness multiplier applied to the gradient.
    pub scale: f64,
    pub contribution: StatsContribution,
}

/// Local round for one client: forward and backward on its (already
/// expanded) graph, fairness scaling, optional clipping and noise, and a
/// single SGD step.
#[allow(clippy::too_many_arguments)]
pub fn client_round(
    graph: &LocalSubgraph,
    truths: &[f64],
    membership: Group,
    snapshot: &ModelState,
    stats: GroupStats,
    config: &ExperimentConfig,
    epoch: usize,
    stats_noise: EpochNoise,
) -> Result<ClientUpdate, FederationError> {
    if truths.is_empty() {
        return Err(ModelError::NoRatings.into());
    }
    let user = graph.user;
    let mut drop_rng = substream(config.seed, label::DROPOUT, &[epoch as u64, user as u64]);
    let trace = forward(
        graph,
        snapshot,
        &config.model,
        ForwardMode::Train {
            dropout: config.model.dropout,
            rng: &mut drop_rng,
        },
    )?;
    let loss = local_loss(&trace, truths)?;
    let mut grad = backward(&trace, truths, graph, snapshot, &config.model);

    let scale = scale_factor(&config.fairness, stats, membership);
    if scale != 1.0 {
        grad.scale(scale);
    }
    if config.ldp.enabled {
        let mut rng = substream(config.seed, label::GRADIENT_NOISE, &[epoch as u64, user as u64]);
        clip_and_noise(&mut grad, &config.ldp, &mut rng)?;
    }
    grad.scale(-config.eta);

    let contribution = make_contribution(performance(loss), membership, config.fairness.sigma, stats_noise)?;
    Ok(ClientUpdate {
        user,
        weight: truths.len() as f64,
        delta: grad,
        loss,
        scale,
        contribution,
    })
}

/// FedAvg over the round's updates with weights proportional to local
/// training size. Shared layers average over all updates, item rows over
/// the clients that touched them, and user rows come from their owner only.
pub fn aggregate_params(snapshot: &ModelState, updates: &[ClientUpdate]) -> Result<ModelState, FederationError> {
    let mut next = snapshot.clone();
    if updates.is_empty() {
        return Ok(next);
    }
    let h = snapshot.hidden;
    let shape_err = |u: UserId| FederationError::Protocol(format!("update from user {u} has the wrong shape"));
    let total: f64 = updates.iter().map(|u| u.weight).sum();
    if !(total > 0.0) {
        return Err(FederationError::Protocol("aggregation weights sum to zero".into()));
    }

    let mut item_num: BTreeMap<ItemId, (Vec<f64>, f64)> = BTreeMap::new();
    for up in updates {
        let d = &up.delta;
        if d.user_grad.len() != h || d.layers.len() != next.layers.len() {
            return Err(shape_err(up.user));
        }
        let p = up.weight / total;
        for (layer, dl) in next.layers.iter_mut().zip(&d.layers) {
            if dl.transform.len() != layer.transform.len() || dl.attention.len() != layer.attention.len() {
                return Err(shape_err(up.user));
            }
            for (x, dx) in layer.transform.iter_mut().zip(&dl.transform) {
                *x += p * dx;
            }
            for (x, dx) in layer.attention.iter_mut().zip(&dl.attention) {
                *x += p * dx;
            }
        }
        for (item, di) in &d.items {
            if di.len() != h {
                return Err(shape_err(up.user));
            }
            let (num, den) = item_num.entry(*item).or_insert_with(|| (vec![0.0; h], 0.0));
            for (n, dx) in num.iter_mut().zip(di) {
                *n += up.weight * dx;
            }
            *den += up.weight;
        }
        let row = next
            .users
            .row_mut(up.user)
            .ok_or_else(|| FederationError::Protocol(format!("unknown user {}", up.user)))?;
        for (x, dx) in row.iter_mut().zip(&d.user_grad) {
            *x += dx;
        }
    }
    for (item, (num, den)) in item_num {
        let row = next
            .items
            .row_mut(item)
            .ok_or_else(|| FederationError::Protocol(format!("unknown item {item}")))?;
        for (x, n) in row.iter_mut().zip(num) {
            *x += n / den;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: usize,
    /// Root of the weighted mean training loss of this round's clients.
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub val_disparity: f64,
    pub test_rmse: f64,
    pub test_disparity: f64,
    /// Group statistics aggregated at the end of this round.
    pub p: f64,
    pub q: f64,
    pub participants: usize,
    pub wall_time: f64,
}

struct Client {
    train: LocalSubgraph,
    truths: Vec<f64>,
    group: Group,
    expansion: ExpansionClient,
    neighbors: Vec<Embedding>,
}

/// What one call to [`Federation::run_round`] did.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    /// Users drawn this round, including any without training data.
    pub sampled: Vec<UserId>,
    pub updates: Vec<ClientUpdate>,
}

/// Server plus simulated clients, advanced one round at a time.
pub struct Federation<'a> {
    config: ExperimentConfig,
    groups: &'a SensitiveAssignment,
    validation: &'a RatingTable,
    test: &'a RatingTable,
    users: Vec<UserId>,
    clients: BTreeMap<UserId, Client>,
    server: ExpansionServer,
    state: ModelState,
    stats: GroupStats,
    noise: NoiseCache,
    fixed_sample: Option<Vec<UserId>>,
    epoch: usize,
}

impl<'a> Federation<'a> {
    pub fn new(
        config: ExperimentConfig,
        data: &'a SplitTable,
        groups: &'a SensitiveAssignment,
    ) -> Result<Self, FederationError> {
        config.validate()?;
        if groups.count(Group::S0) == 0 || groups.count(Group::S1) == 0 {
            return Err(FederationError::Config("both sensitive groups need members".into()));
        }
        let per_user = data.per_user();
        let users: Vec<UserId> = per_user.keys().copied().collect();
        let items: BTreeSet<ItemId> = [&data.train, &data.validation, &data.test]
            .iter()
            .flat_map(|t| t.records().iter().map(|r| r.item))
            .collect();
        let items: Vec<ItemId> = items.into_iter().collect();
        let state = ModelState::init(
            &users,
            &items,
            &config.model,
            &mut substream(config.seed, label::INIT, &[]),
        );

        let key = Arc::new(ExpansionKey::generate(&mut substream(config.seed, label::EXPANSION_KEY, &[])));
        let mut clients = BTreeMap::new();
        for (u, split) in per_user {
            if split.train.is_empty() {
                debug!("user {u} has no training ratings and will never train");
                continue;
            }
            let group = groups
                .group(u)
                .ok_or_else(|| FederationError::Config(format!("user {u} has no sensitive group")))?;
            let tag = ClientTag::generate(&mut substream(config.seed, label::CLIENT_TAGS, &[u as u64]));
            clients.insert(
                u,
                Client {
                    train: LocalSubgraph::new(u, split.train.items),
                    truths: split.train.ratings,
                    group,
                    expansion: ExpansionClient::new(tag, key.clone()),
                    neighbors: Vec::new(),
                },
            );
        }
        let noise = NoiseCache::new(config.seed, config.fairness.sigma);
        Ok(Self {
            server: ExpansionServer::new(config.model.hidden),
            config,
            groups,
            validation: &data.validation,
            test: &data.test,
            users,
            clients,
            state,
            stats: GroupStats::INITIAL,
            noise,
            fixed_sample: None,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    /// Statistics the next round will scale with.
    pub fn stats(&self) -> GroupStats {
        self.stats
    }

    /// Override the broadcast statistics, e.g. to study scaling in isolation.
    pub fn set_stats(&mut self, stats: GroupStats) {
        self.stats = stats;
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    pub fn expansion_server(&self) -> &ExpansionServer {
        &self.server
    }

    /// Each user's training graph with the neighbors from its latest round.
    pub fn contexts(&self) -> BTreeMap<UserId, LocalSubgraph> {
        self.clients
            .iter()
            .map(|(u, c)| {
                let mut g = c.train.clone();
                g.neighbors = c.neighbors.clone();
                (*u, g)
            })
            .collect()
    }

    pub fn evaluate(&self, split: &RatingTable) -> Result<EvalReport, FederationError> {
        Ok(evaluate(
            &self.state,
            &self.config.model,
            &self.contexts(),
            split,
            self.groups,
            self.config.fairness.alpha,
        )?)
    }

    /// RMSE and disparity on `split`, NaN for an empty split.
    fn scores(&self, split: &RatingTable) -> Result<(f64, f64), FederationError> {
        if split.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let r = self.evaluate(split)?;
        Ok((r.rmse, r.disparity))
    }

    fn draw_sample(&mut self, epoch: usize) -> Result<Vec<UserId>, FederationError> {
        if let Some(s) = &self.fixed_sample {
            return Ok(s.clone());
        }
        let coord = if self.config.sample_once { 0 } else { epoch as u64 };
        let s = sample_users(
            &self.users,
            self.config.batch_dropout,
            &mut substream(self.config.seed, label::SAMPLING, &[coord]),
        )?;
        if self.config.sample_once {
            self.fixed_sample = Some(s.clone());
        }
        Ok(s)
    }

    /// Upload new item digests and refreshed embeddings, then attach each
    /// participant's matched neighbors.
    fn expand(&mut self, epoch: usize, active: &[UserId]) -> Result<(), FederationError> {
        let h = self.state.hidden;
        let mut uploads = Vec::with_capacity(active.len());
        for u in active {
            let c = self.clients.get_mut(u).expect("active users are clients");
            let emb: Embedding = self.state.users.row(*u).expect("every user has a row").into();
            uploads.push(c.expansion.prepare_upload(&c.train.items, emb));
        }
        let mapping = self.server.update_mapping(uploads)?;
        let cap = self.config.cap();
        for u in active {
            let c = self.clients.get_mut(u).expect("active users are clients");
            let slice = mapping
                .slice_for(c.expansion.tag())
                .ok_or_else(|| FederationError::Protocol(format!("no mapping slice for user {u}")))?;
            let mut rng = substream(self.config.seed, label::NEIGHBOR_CAP, &[epoch as u64, *u as u64]);
            let expanded = c.expansion.expand(&c.train, &slice, h, cap, &mut rng)?;
            c.neighbors = expanded.neighbors;
        }
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome, FederationError> {
        let epoch = self.epoch + 1;
        self.round(epoch).map_err(|e| e.at(epoch))
    }

    fn round(&mut self, epoch: usize) -> Result<RoundOutcome, FederationError> {
        let started = Instant::now();
        let sampled = self.draw_sample(epoch)?;
        let active: Vec<UserId> = sampled.iter().copied().filter(|u| self.clients.contains_key(u)).collect();
        if self.config.expansion {
            self.expand(epoch, &active)?;
        }

        self.noise.retain_from(epoch);
        let mut noises = Vec::with_capacity(active.len());
        for u in &active {
            noises.push(self.noise.get(*u, epoch)?);
        }
        let snapshot = &self.state;
        let stats = self.stats;
        let config = &self.config;
        let clients = &self.clients;
        let updates: Vec<ClientUpdate> = active
            .par_iter()
            .zip(noises.par_iter())
            .map(|(u, noise)| {
                let c = &clients[u];
                let mut graph = c.train.clone();
                graph.neighbors = c.neighbors.clone();
                client_round(&graph, &c.truths, c.group, snapshot, stats, config, epoch, *noise)
            })
            .collect::<Result<_, _>>()?;

        self.state = aggregate_params(&self.state, &updates)?;
        if !self.state.is_finite() {
            return Err(FederationError::Protocol("parameters diverged to a non-finite value".into()));
        }
        if !updates.is_empty() {
            let contributions: Vec<StatsContribution> = updates.iter().map(|u| u.contribution).collect();
            self.stats = aggregate_stats(&contributions, self.stats)?.stats;
        }
        self.epoch = epoch;

        let weight: f64 = updates.iter().map(|u| u.weight).sum();
        let train_mse = updates.iter().map(|u| u.weight * u.loss).sum::<f64>() / weight.max(1.0);
        let (val_rmse, val_disparity) = self.scores(self.validation)?;
        let (test_rmse, test_disparity) = self.scores(self.test)?;
        let record = RoundRecord {
            epoch,
            train_rmse: train_mse.sqrt(),
            val_rmse,
            val_disparity,
            test_rmse,
            test_disparity,
            p: self.stats.p,
            q: self.stats.q,
            participants: updates.len(),
            wall_time: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train {:.4} val {:.4} disparity {:.4} P {:.4} Q {:.4}",
            record.train_rmse, record.val_rmse, record.val_disparity, record.p, record.q
        );
        Ok(RoundOutcome {
            record,
            sampled,
            updates,
        })
    }
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<RoundRecord>,
    pub stats: GroupStats,
    /// Per-user evaluation graphs at the end of training.
    pub contexts: BTreeMap<UserId, LocalSubgraph>,
    /// Clients on record per item digest at the end of training.
    pub digest_histogram: Vec<(EncryptedItemId, usize)>,
}

/// Run up to `config.epochs` rounds, stopping early if configured.
pub fn train(
    config: &ExperimentConfig,
    data: &SplitTable,
    groups: &SensitiveAssignment,
) -> Result<TrainOutcome, FederationError> {
    let mut fed = Federation::new(config.clone(), data, groups)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..config.epochs {
        let out = fed.run_round()?;
        let val = out.record.val_rmse;
        history.push(out.record);
        if val < best {
            best = val;
            stale = 0;
        } else {
            stale += 1;
            if config.early_stop > 0 && stale >= config.early_stop {
                info!("no validation improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        contexts: fed.contexts(),
        digest_histogram: fed.server.digest_histogram(),
        stats: fed.stats(),
        state: fed.state,
        history,
    })
}
