//! Local graph-attention recommender.
//!
//! A client's graph is a star: the user node, one node per rated item, and
//! the anonymous neighbor users received through expansion. Each layer
//! computes, for every node `v` with neighborhood `N(v)`,
//!
//! ```text
//! g_k      = Θ h_k
//! γ_vk     = softmax_k LeakyReLU(a_srcᵀ g_v + a_dstᵀ g_k)
//! h'_v     = σ(Θ Σ_k γ_vk h_k) = σ(Σ_k γ_vk g_k)
//! ```
//!
//! and a rating is predicted as `⟨h_user, h_item⟩` on the last layer.
//! Gradients are derived by hand in [`backward`]; neighbor embeddings are
//! treated as constants.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, UserId};

/// An anonymous embedding shared read-only between the server and clients.
pub type Embedding = Arc<[f64]>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("no {kind} embedding for id {id}")]
    MissingEmbedding { kind: &'static str, id: u32 },
    #[error("embedding length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("client has no training ratings")]
    NoRatings,
    #[error("{0} ratings supplied for {1} predictions")]
    TruthLength(usize, usize),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Identity,
}

impl Activation {
    const LEAKY_SLOPE: f64 = 0.2;

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => leaky(x, Self::LEAKY_SLOPE),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => leaky_grad(x, Self::LEAKY_SLOPE),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Negative slope of the attention LeakyReLU.
    pub attention_slope: f64,
    /// Nonlinearity applied after each layer's update.
    pub activation: Activation,
    /// Dropout rate on layer outputs during local training.
    pub dropout: f64,
    /// Put each node in its own neighborhood. Off, an item node hears
    /// only its user, and a node left with no neighbors attends to itself.
    pub self_loops: bool,
    /// Embeddings start uniform in `±init_embedding/√h`.
    pub init_embedding: f64,
    /// `Θ` and `a` start uniform in `±init_weight/√h`.
    pub init_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 1,
            attention_slope: 0.2,
            activation: Activation::Relu,
            dropout: 0.2,
            self_loops: false,
            init_embedding: 12.0,
            init_weight: 3f64.sqrt(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 {
            return Err(ModelError::Config("hidden dimension must be positive".into()));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(ModelError::Config(format!("layers must be 1 or 2, got {}", self.layers)));
        }
        if !(self.init_embedding > 0.0 && self.init_weight > 0.0) {
            return Err(ModelError::Config("initialization gains must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Dense rows keyed by external ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<u32>,
    index: HashMap<u32, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(ids: &[u32], dim: usize) -> Self {
        Self::from_parts(ids.to_vec(), dim, vec![0.0; ids.len() * dim])
    }

    pub fn from_parts(ids: Vec<u32>, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(ids.len() * dim, data.len(), "table shape mismatch");
        let index = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Self { dim, ids, index, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.index.contains_key(&id)
    }

    pub fn row(&self, id: u32) -> Option<&[f64]> {
        let i = *self.index.get(&id)?;
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_mut(&mut self, id: u32) -> Option<&mut [f64]> {
        let i = *self.index.get(&id)?;
        Some(&mut self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// One attention layer: `h×h` transform (row-major) and a `2h` attention
/// vector whose first half scores the center node and second half the
/// neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub transform: Vec<f64>,
    pub attention: Vec<f64>,
}

impl GatLayer {
    pub fn zeros(h: usize) -> Self {
        Self {
            transform: vec![0.0; h * h],
            attention: vec![0.0; 2 * h],
        }
    }
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub hidden: usize,
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
    pub layers: Vec<GatLayer>,
}

impl ModelState {
    /// Uniform initialization scaled by `1/√h` (see [`ModelConfig`]),
    /// drawing users, then items, then layers in ascending id order.
    pub fn init<R: Rng>(users: &[UserId], items: &[ItemId], config: &ModelConfig, rng: &mut R) -> Self {
        let h = config.hidden;
        let root = (h as f64).sqrt();
        let (emb, wt) = (config.init_embedding / root, config.init_weight / root);
        let mut draw = |n: usize, b: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-b..b)).collect() };
        let mut users = users.to_vec();
        users.sort_unstable();
        users.dedup();
        let mut items = items.to_vec();
        items.sort_unstable();
        items.dedup();
        let user_data = draw(users.len() * h, emb);
        let item_data = draw(items.len() * h, emb);
        let layers = (0..config.layers)
            .map(|_| GatLayer {
                transform: draw(h * h, wt),
                attention: draw(2 * h, wt),
            })
            .collect();
        Self {
            hidden: h,
            users: EmbeddingTable::from_parts(users, h, user_data),
            items: EmbeddingTable::from_parts(items, h, item_data),
            layers,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.users.data().iter().all(|x| x.is_finite())
            && self.items.data().iter().all(|x| x.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.transform.iter().chain(&l.attention).all(|x| x.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.users.data().len()
            + self.items.data().len()
            + self.layers.iter().map(|l| l.transform.len() + l.attention.len()).sum::<usize>()
    }
}

/// A client's private star graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSubgraph {
    pub user: UserId,
    /// Rated items; predictions follow this order.
    pub items: Vec<ItemId>,
    /// Anonymous neighbor users attached to the user node.
    pub neighbors: Vec<Embedding>,
}

impl LocalSubgraph {
    pub fn new(user: UserId, items: Vec<ItemId>) -> Self {
        Self {
            user,
            items,
            neighbors: Vec::new(),
        }
    }
}

pub enum ForwardMode<'a, R: Rng> {
    Eval,
    Train { dropout: f64, rng: &'a mut R },
}

impl ForwardMode<'static, rand::rngs::ThreadRng> {
    /// Evaluation mode without naming a generator type.
    pub fn eval() -> Self {
        ForwardMode::Eval
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Node states entering the layer, `n×h`.
    pub input: Vec<f64>,
    /// `Θ h_k` for every node, `n×h`.
    pub transformed: Vec<f64>,
    /// Attention scores before the LeakyReLU, per neighborhood slot.
    pub scores: Vec<Vec<f64>>,
    /// Softmax attention weights, aligned with `ForwardTrace::neighborhoods`.
    pub attention: Vec<Vec<f64>>,
    /// `Σ_k γ_vk Θ h_k` before the activation, `n×h`.
    pub pre_activation: Vec<f64>,
    /// Inverted-dropout multipliers applied to the layer output, if training.
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub hidden: usize,
    pub item_count: usize,
    pub neighbor_count: usize,
    pub query_count: usize,
    pub neighborhoods: Vec<Vec<usize>>,
    pub layers: Vec<LayerTrace>,
    /// Final node states, `n×h`.
    pub output: Vec<f64>,
    /// `ŷ` for each rated item, in graph order.
    pub predictions: Vec<f64>,
    /// `ŷ` for each query item.
    pub query_predictions: Vec<f64>,
}

impl ForwardTrace {
    pub fn node_count(&self) -> usize {
        1 + self.item_count + self.neighbor_count + self.query_count
    }

    pub fn state(&self, node: usize) -> &[f64] {
        &self.output[node * self.hidden..(node + 1) * self.hidden]
    }
}

/// Node layout: 0 = user, then rated items, neighbors and query items.
/// Query items see the user but the user does not see them, so adding
/// queries never changes the user's representation.
fn neighborhoods(m: usize, r: usize, q: usize, self_loops: bool) -> Vec<Vec<usize>> {
    let n = 1 + m + r + q;
    let mut out = Vec::with_capacity(n);
    let mut user_nbrs: Vec<usize> = Vec::with_capacity(1 + m + r);
    if self_loops {
        user_nbrs.push(0);
    }
    user_nbrs.extend(1..1 + m + r);
    if user_nbrs.is_empty() {
        user_nbrs.push(0);
    }
    out.push(user_nbrs);
    for v in 1..n {
        if self_loops {
            out.push(vec![v, 0]);
        } else {
            out.push(vec![0]);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = Θ x` with `Θ` row-major `h×h`.
#[inline]
fn matvec(theta: &[f64], x: &[f64], out: &mut [f64]) {
    let h = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&theta[i * h..(i + 1) * h], x);
    }
}

fn gather_inputs(
    graph: &LocalSubgraph,
    params: &ModelState,
    queries: &[ItemId],
) -> Result<Vec<f64>, ModelError> {
    let h = params.hidden;
    let n = 1 + graph.items.len() + graph.neighbors.len() + queries.len();
    let mut x = Vec::with_capacity(n * h);
    let user = params.users.row(graph.user).ok_or(ModelError::MissingEmbedding {
        kind: "user",
        id: graph.user,
    })?;
    x.extend_from_slice(user);
    for &i in &graph.items {
        let row = params
            .items
            .row(i)
            .ok_or(ModelError::MissingEmbedding { kind: "item", id: i })?;
        x.extend_from_slice(row);
    }
    for nb in &graph.neighbors {
        if nb.len() != h {
            return Err(ModelError::DimensionMismatch {
                expected: h,
                found: nb.len(),
            });
        }
        x.extend_from_slice(nb);
    }
    for &i in queries {
        let row = params
            .items
            .row(i)
            .ok_or(ModelError::MissingEmbedding { kind: "item", id: i })?;
        x.extend_from_slice(row);
    }
    Ok(x)
}

/// Forward pass over the graph's rated items.
pub fn forward<R: Rng>(
    graph: &LocalSubgraph,
    params: &ModelState,
    config: &ModelConfig,
    mode: ForwardMode<'_, R>,
) -> Result<ForwardTrace, ModelError> {
    forward_with_queries(graph, params, config, &[], mode)
}

/// Forward pass that also scores `queries`, items outside the user's
/// neighborhood (used for held-out evaluation).
pub fn forward_with_queries<R: Rng>(
    graph: &LocalSubgraph,
    params: &ModelState,
    config: &ModelConfig,
    queries: &[ItemId],
    mut mode: ForwardMode<'_, R>,
) -> Result<ForwardTrace, ModelError> {
    let h = params.hidden;
    let (m, r, q) = (graph.items.len(), graph.neighbors.len(), queries.len());
    let n = 1 + m + r + q;
    let nbrs = neighborhoods(m, r, q, config.self_loops);
    let mut state = gather_inputs(graph, params, queries)?;
    let mut layers = Vec::with_capacity(params.layers.len());

    for layer in &params.layers {
        let (a_src, a_dst) = layer.attention.split_at(h);
        let mut transformed = vec![0.0; n * h];
        for v in 0..n {
            matvec(
                &layer.transform,
                &state[v * h..(v + 1) * h],
                &mut transformed[v * h..(v + 1) * h],
            );
        }
        let src: Vec<f64> = (0..n).map(|v| dot(a_src, &transformed[v * h..(v + 1) * h])).collect();
        let dst: Vec<f64> = (0..n).map(|v| dot(a_dst, &transformed[v * h..(v + 1) * h])).collect();

        let mut scores = Vec::with_capacity(n);
        let mut attention = Vec::with_capacity(n);
        let mut pre = vec![0.0; n * h];
        for v in 0..n {
            let z: Vec<f64> = nbrs[v].iter().map(|&k| src[v] + dst[k]).collect();
            let e: Vec<f64> = z.iter().map(|&x| leaky(x, config.attention_slope)).collect();
            let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = e.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let gamma: Vec<f64> = exps.iter().map(|x| x / total).collect();
            let out = &mut pre[v * h..(v + 1) * h];
            for (&k, &g) in nbrs[v].iter().zip(&gamma) {
                for (o, t) in out.iter_mut().zip(&transformed[k * h..(k + 1) * h]) {
                    *o += g * t;
                }
            }
            scores.push(z);
            attention.push(gamma);
        }

        let mut next: Vec<f64> = pre.iter().map(|&x| config.activation.apply(x)).collect();
        let mask = match &mut mode {
            ForwardMode::Train { dropout, rng } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                let mask: Vec<f64> = (0..n * h)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (x, k) in next.iter_mut().zip(&mask) {
                    *x *= k;
                }
                Some(mask)
            }
            _ => None,
        };

        let input = std::mem::replace(&mut state, next);
        layers.push(LayerTrace {
            input,
            transformed,
            scores,
            attention,
            pre_activation: pre,
            mask,
        });
    }

    let user = &state[0..h];
    let predictions = (1..=m).map(|j| dot(user, &state[j * h..(j + 1) * h])).collect();
    let qbase = 1 + m + r;
    let query_predictions = (qbase..qbase + q)
        .map(|j| dot(user, &state[j * h..(j + 1) * h]))
        .collect();

    Ok(ForwardTrace {
        hidden: h,
        item_count: m,
        neighbor_count: r,
        query_count: q,
        neighborhoods: nbrs,
        layers,
        output: state,
        predictions,
        query_predictions,
    })
}

/// Mean squared error over the user's rated items.
pub fn local_loss(trace: &ForwardTrace, truths: &[f64]) -> Result<f64, ModelError> {
    if truths.is_empty() {
        return Err(ModelError::NoRatings);
    }
    if truths.len() != trace.predictions.len() {
        return Err(ModelError::TruthLength(truths.len(), trace.predictions.len()));
    }
    let sse: f64 = trace
        .predictions
        .iter()
        .zip(truths)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(sse / truths.len() as f64)
}

/// Gradients for the parameters one client can reach. Items absent from
/// `items` have an exactly zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub user: UserId,
    pub user_grad: Vec<f64>,
    pub items: BTreeMap<ItemId, Vec<f64>>,
    pub layers: Vec<GatLayer>,
}

impl GradientSet {
    pub fn zeros(user: UserId, items: &[ItemId], hidden: usize, layers: usize) -> Self {
        Self {
            user,
            user_grad: vec![0.0; hidden],
            items: items.iter().map(|i| (*i, vec![0.0; hidden])).collect(),
            layers: (0..layers).map(|_| GatLayer::zeros(hidden)).collect(),
        }
    }

    pub fn item(&self, id: ItemId) -> Option<&[f64]> {
        self.items.get(&id).map(|v| v.as_slice())
    }

    /// Add explicit zero rows for every catalogue item not already present.
    pub fn densify(&mut self, catalogue: &[ItemId]) {
        let h = self.user_grad.len();
        for &i in catalogue {
            self.items.entry(i).or_insert_with(|| vec![0.0; h]);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.user_grad
            .iter()
            .chain(self.items.values().flatten())
            .chain(self.layers.iter().flat_map(|l| l.transform.iter().chain(&l.attention)))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.user_grad
            .iter_mut()
            .chain(self.items.values_mut().flatten())
            .chain(
                self.layers
                    .iter_mut()
                    .flat_map(|l| l.transform.iter_mut().chain(l.attention.iter_mut())),
            )
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.values_mut() {
            *x *= factor;
        }
    }
}

/// Exact gradient of [`local_loss`] with respect to the user embedding, the
/// rated items' embeddings and every layer's `Θ` and `a`.
pub fn backward(
    trace: &ForwardTrace,
    truths: &[f64],
    graph: &LocalSubgraph,
    params: &ModelState,
    config: &ModelConfig,
) -> GradientSet {
    let h = trace.hidden;
    let m = trace.item_count;
    let n = trace.node_count();
    let mut grads = GradientSet::zeros(graph.user, &graph.items, h, params.layers.len());
    if m == 0 || truths.len() != m {
        return grads;
    }

    // dL/d(final states)
    let mut d_state = vec![0.0; n * h];
    let user_out = trace.state(0).to_vec();
    for j in 0..m {
        let resid = 2.0 * (trace.predictions[j] - truths[j]) / m as f64;
        if resid == 0.0 {
            continue;
        }
        let item_out = trace.state(j + 1);
        for d in 0..h {
            d_state[d] += resid * item_out[d];
            d_state[(j + 1) * h + d] += resid * user_out[d];
        }
    }

    for (li, (layer, lt)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let (a_src, a_dst) = layer.attention.split_at(h);

        let mut d_pre = d_state;
        if let Some(mask) = &lt.mask {
            for (d, k) in d_pre.iter_mut().zip(mask) {
                *d *= k;
            }
        }
        for (d, p) in d_pre.iter_mut().zip(&lt.pre_activation) {
            *d *= config.activation.derivative(*p);
        }

        let mut d_transformed = vec![0.0; n * h];
        let mut d_src = vec![0.0; n];
        let mut d_dst = vec![0.0; n];
        for v in 0..n {
            let dp = &d_pre[v * h..(v + 1) * h];
            if dp.iter().all(|x| *x == 0.0) {
                continue;
            }
            let nb = &trace.neighborhoods[v];
            let gamma = &lt.attention[v];
            let mut d_gamma = Vec::with_capacity(nb.len());
            for (&k, &g) in nb.iter().zip(gamma) {
                let gk = &lt.transformed[k * h..(k + 1) * h];
                d_gamma.push(dot(dp, gk));
                for (dt, x) in d_transformed[k * h..(k + 1) * h].iter_mut().zip(dp) {
                    *dt += g * x;
                }
            }
            let weighted: f64 = gamma.iter().zip(&d_gamma).map(|(g, d)| g * d).sum();
            for (idx, &k) in nb.iter().enumerate() {
                let d_e = gamma[idx] * (d_gamma[idx] - weighted);
                let d_z = d_e * leaky_grad(lt.scores[v][idx], config.attention_slope);
                d_src[v] += d_z;
                d_dst[k] += d_z;
            }
        }

        let g_layer = &mut grads.layers[li];
        for v in 0..n {
            let gv = &lt.transformed[v * h..(v + 1) * h];
            for d in 0..h {
                g_layer.attention[d] += d_src[v] * gv[d];
                g_layer.attention[h + d] += d_dst[v] * gv[d];
            }
            let dt = &mut d_transformed[v * h..(v + 1) * h];
            for d in 0..h {
                dt[d] += d_src[v] * a_src[d] + d_dst[v] * a_dst[d];
            }
        }

        // transformed_v = Θ input_v
        let mut d_input = vec![0.0; n * h];
        for v in 0..n {
            let dt = &d_transformed[v * h..(v + 1) * h];
            if dt.iter().all(|x| *x == 0.0) {
                continue;
            }
            let x = &lt.input[v * h..(v + 1) * h];
            let di = &mut d_input[v * h..(v + 1) * h];
            for (i, &dti) in dt.iter().enumerate() {
                if dti == 0.0 {
                    continue;
                }
                let row = &layer.transform[i * h..(i + 1) * h];
                let grow = &mut g_layer.transform[i * h..(i + 1) * h];
                for j in 0..h {
                    grow[j] += dti * x[j];
                    di[j] += dti * row[j];
                }
            }
        }
        d_state = d_input;
    }

    grads.user_grad.copy_from_slice(&d_state[0..h]);
    for (j, item) in graph.items.iter().enumerate() {
        let row = grads.items.get_mut(item).expect("item row");
        for (g, d) in row.iter_mut().zip(&d_state[(j + 1) * h..(j + 2) * h]) {
            *g += d;
        }
    }
    grads
}

/// Eval-mode predictions for `queries` using the user's training graph.
pub fn predict(
    graph: &LocalSubgraph,
    params: &ModelState,
    config: &ModelConfig,
    queries: &[ItemId],
) -> Result<Vec<f64>, ModelError> {
    let trace = forward_with_queries(graph, params, config, queries, ForwardMode::eval())?;
    Ok(trace.query_predictions)
}
