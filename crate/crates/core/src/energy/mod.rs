//! Energy model over the label grid.
//!
//! The total energy of an assignment decomposes into per-node unary terms and
//! one term per **ordered** pair of distinct nodes:
//!
//! ```text
//! E(y | X) = sum_{t,k} psi_{t,k}(y_t^k | X)
//!          + sum_{(t,k) != (t',k')} phi_{t,k,t',k'}(y_t^k, y_{t'}^{k'} | X)
//! ```
//!
//! The pairwise transition sourced at node `(t, k)` toward `(t', k')` is,
//! depending on the mode:
//!
//! * `ueg`   — absent (unary-only baseline);
//! * `seg`   — a learned compatibility matrix `mu^{kk'}`, same-step pairs only;
//! * `steg`  — `kappa_sigma(t, t') * mu^{kk'}` for every pair, where
//!   `kappa_sigma` is a Gaussian proximity kernel in the step distance;
//! * `gsteg` — an observation-gated low-rank product: two projections of the
//!   source node's feature vector are reshaped to `|Y^k| x r` and
//!   `|Y^{k'}| x r` factors `A`, `B`, and the transition is
//!   `kappa_sigma(t, t') * A B^T` (same-step and cross-step pairs use
//!   separate projection pairs; `kappa_sigma(t, t) = 1`).
//!
//! An optional prior adds `u(S^k[y]) * v(S^{k'}[y'])` entrywise to every
//! existing transition, where `S^k` are fixed per-stream label embedding
//! tables (ingested, never trained) and `u`, `v` are learned scalar score
//! maps.

mod projection;

pub use projection::{AffineLayer, Projection};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Assignment, GraphSpec, ObservationInstance};
use crate::rng::substream;

/// Model family: which pairwise structure the energy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    /// Unary-only baseline.
    Ueg,
    /// Same-step pairwise compatibilities.
    Seg,
    /// Same-step and kernel-discounted cross-step compatibilities.
    Steg,
    /// Observation-gated low-rank pairwise energies.
    Gsteg,
}

impl fmt::Display for EnergyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EnergyMode::Ueg => "ueg",
            EnergyMode::Seg => "seg",
            EnergyMode::Steg => "steg",
            EnergyMode::Gsteg => "gsteg",
        };
        f.write_str(s)
    }
}

impl FromStr for EnergyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ueg" => Ok(EnergyMode::Ueg),
            "seg" => Ok(EnergyMode::Seg),
            "steg" => Ok(EnergyMode::Steg),
            "gsteg" => Ok(EnergyMode::Gsteg),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected one of ueg, seg, steg, gsteg"
            ))),
        }
    }
}

/// Fixed label-embedding tables plus the architecture of the prior score maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Per-stream tables, row-major `|Y^k| x d`. Ingested as given.
    pub tables: Vec<Vec<f64>>,
}

/// Everything needed to build an [`EnergyModel`] except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: EnergyMode,
    /// Rank `r` of the gated low-rank factors (gated mode only; must satisfy
    /// `1 <= r < min_k |Y^k|`).
    pub rank: usize,
    /// Bandwidth `sigma` of the temporal proximity kernel.
    pub bandwidth: f64,
    /// Sensitivity flag: multiply every pairwise term by one half, probing
    /// the ordered-pair double-count convention.
    #[serde(default)]
    pub halve_pairwise: bool,
    /// Hidden widths of the unary projections (empty = single affine map).
    #[serde(default)]
    pub unary_hidden: Vec<usize>,
    /// Hidden widths of the same-step gating projections.
    #[serde(default)]
    pub spatial_hidden: Vec<usize>,
    /// Hidden widths of the cross-step gating projections.
    #[serde(default)]
    pub temporal_hidden: Vec<usize>,
    /// Hidden widths of the prior score maps.
    #[serde(default)]
    pub prior_hidden: Vec<usize>,
    /// Hidden-layer dropout rate applied during training only.
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub prior: Option<PriorConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: EnergyMode::Gsteg,
            rank: 5,
            bandwidth: 10.0,
            halve_pairwise: false,
            unary_hidden: Vec::new(),
            spatial_hidden: Vec::new(),
            temporal_hidden: Vec::new(),
            prior_hidden: Vec::new(),
            dropout: None,
            prior: None,
        }
    }
}

/// Gating projection pair for one ordered stream pair `(k, k')`: `source`
/// maps the source node's feature vector to the `|Y^k| x r` factor, `target`
/// to the `|Y^{k'}| x r` factor (both reshaped row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GatedPair {
    pub source: Projection,
    pub target: Projection,
}

/// A pairwise transition table between a source and a target node:
/// `values[y * cols + y']` is the energy added when the source takes label
/// `y` and the target takes label `y'`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl TransitionMatrix {
    pub fn get(&self, y: usize, y_prime: usize) -> f64 {
        self.values[y * self.cols + y_prime]
    }
}

/// Gaussian proximity kernel `exp(-(t - t')^2 / (2 sigma^2))`.
///
/// Symmetric in its arguments, exactly 1 at `t = t'`, strictly decreasing in
/// the step distance.
pub fn temporal_kernel(t: usize, t_prime: usize, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidBandwidth { sigma });
    }
    Ok(kernel_value(t, t_prime, sigma))
}

#[inline]
fn kernel_value(t: usize, t_prime: usize, sigma: f64) -> f64 {
    let dt = t as f64 - t_prime as f64;
    (-dt * dt / (2.0 * sigma * sigma)).exp()
}

/// The full parameterized energy function.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    spec: GraphSpec,
    config: ModelConfig,
    unary: Vec<Projection>,
    /// Non-gated compatibility matrices, keyed by ordered stream pair.
    /// `seg`: pairs with `k != k'` only; `steg`: every ordered pair.
    compat: BTreeMap<(usize, usize), Vec<f64>>,
    /// Gated same-step projection pairs, keyed by ordered `(k, k')`, `k != k'`.
    spatial: BTreeMap<(usize, usize), GatedPair>,
    /// Gated cross-step projection pairs, keyed by ordered `(k, k')`
    /// including `k = k'`.
    temporal: BTreeMap<(usize, usize), GatedPair>,
    /// Learned scalar score maps `(u, v)` of the prior, if configured.
    prior_maps: Option<(Projection, Projection)>,
}

impl EnergyModel {
    /// Build a model with freshly initialized parameters. All draws come from
    /// the `init` substream of `seed`, in canonical tensor order.
    pub fn new(spec: GraphSpec, config: ModelConfig, seed: u64) -> Result<Self> {
        if !(config.bandwidth > 0.0) {
            return Err(Error::InvalidBandwidth { sigma: config.bandwidth });
        }
        let min_labels = *spec.label_sizes.iter().min().expect("spec has streams");
        if config.mode == EnergyMode::Gsteg && (config.rank == 0 || config.rank >= min_labels) {
            return Err(Error::RankOutOfRange { rank: config.rank, min_labels });
        }
        if let Some(rate) = config.dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        if let Some(prior) = &config.prior {
            if prior.dim == 0 {
                return Err(Error::Config("prior embedding dimension must be >= 1".into()));
            }
            if prior.tables.len() != spec.num_streams() {
                return Err(Error::Config(format!(
                    "prior has {} embedding tables for {} streams",
                    prior.tables.len(),
                    spec.num_streams()
                )));
            }
            for (k, table) in prior.tables.iter().enumerate() {
                if table.len() != spec.label_sizes[k] * prior.dim {
                    return Err(Error::PriorTableShape {
                        k,
                        rows: table.len() / prior.dim.max(1),
                        expected: spec.label_sizes[k],
                    });
                }
                if table.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!(
                        "prior embedding table for stream {k} has non-finite entries"
                    )));
                }
            }
        }

        let streams = spec.num_streams();
        let mut rng = substream(seed, "init");

        let unary = (0..streams)
            .map(|k| {
                Projection::init(
                    spec.feature_dims[k],
                    spec.label_sizes[k],
                    &config.unary_hidden,
                    &mut rng,
                )
            })
            .collect();

        let mut compat = BTreeMap::new();
        let mut spatial = BTreeMap::new();
        let mut temporal = BTreeMap::new();
        match config.mode {
            EnergyMode::Ueg => {}
            EnergyMode::Seg | EnergyMode::Steg => {
                let include_self = config.mode == EnergyMode::Steg;
                for k in 0..streams {
                    for k2 in 0..streams {
                        if k == k2 && !include_self {
                            continue;
                        }
                        let rows = spec.label_sizes[k];
                        let cols = spec.label_sizes[k2];
                        let a = (6.0 / (rows + cols) as f64).sqrt();
                        let values =
                            (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
                        compat.insert((k, k2), values);
                    }
                }
            }
            EnergyMode::Gsteg => {
                for k in 0..streams {
                    for k2 in 0..streams {
                        if k == k2 {
                            continue;
                        }
                        spatial.insert(
                            (k, k2),
                            Self::init_gated_pair(&spec, &config, k, k2, true, &mut rng),
                        );
                    }
                }
                for k in 0..streams {
                    for k2 in 0..streams {
                        temporal.insert(
                            (k, k2),
                            Self::init_gated_pair(&spec, &config, k, k2, false, &mut rng),
                        );
                    }
                }
            }
        }

        let prior_maps = config.prior.as_ref().map(|p| {
            let u = Projection::init(p.dim, 1, &config.prior_hidden, &mut rng);
            let v = Projection::init(p.dim, 1, &config.prior_hidden, &mut rng);
            (u, v)
        });

        Ok(Self { spec, config, unary, compat, spatial, temporal, prior_maps })
    }

    fn init_gated_pair<R: rand::Rng>(
        spec: &GraphSpec,
        config: &ModelConfig,
        k: usize,
        k2: usize,
        same_step: bool,
        rng: &mut R,
    ) -> GatedPair {
        let hidden =
            if same_step { &config.spatial_hidden } else { &config.temporal_hidden };
        let in_dim = spec.feature_dims[k];
        let source = Projection::init(in_dim, spec.label_sizes[k] * config.rank, hidden, rng);
        let target = Projection::init(in_dim, spec.label_sizes[k2] * config.rank, hidden, rng);
        GatedPair { source, target }
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> EnergyMode {
        self.config.mode
    }

    pub fn bandwidth(&self) -> f64 {
        self.config.bandwidth
    }

    fn check_instance(&self, inst: &ObservationInstance) -> Result<()> {
        if inst.spec != self.spec {
            return Err(Error::SpecMismatch);
        }
        Ok(())
    }

    fn check_node(&self, t: usize, k: usize) -> Result<()> {
        if t >= self.spec.num_steps || k >= self.spec.num_streams() {
            return Err(Error::NodeOutOfRange { t, k });
        }
        Ok(())
    }

    /// Unary energy vector `psi_{t,k}` of node `(t, k)`: one energy per label.
    pub fn unary_energy(&self, inst: &ObservationInstance, t: usize, k: usize) -> Result<Vec<f64>> {
        self.check_instance(inst)?;
        self.check_node(t, k)?;
        Ok(self.unary[k].forward(inst.feature(t, k)))
    }

    /// The ordered pairwise transition sourced at `source` toward `target`.
    ///
    /// Gating reads the **source** node's observation only; the result is
    /// scaled by the temporal kernel, augmented by the prior (when
    /// configured), and halved when the sensitivity flag is set.
    pub fn pairwise_transition(
        &self,
        inst: &ObservationInstance,
        source: (usize, usize),
        target: (usize, usize),
    ) -> Result<TransitionMatrix> {
        self.check_instance(inst)?;
        self.check_node(source.0, source.1)?;
        self.check_node(target.0, target.1)?;
        if source == target {
            return Err(Error::SelfPair { t: source.0, k: source.1 });
        }
        let (t, k) = source;
        let (t2, k2) = target;
        match self.config.mode {
            EnergyMode::Ueg => return Err(Error::NoPairwiseTerms),
            EnergyMode::Seg if t != t2 => {
                return Err(Error::TemporalEdgeInSpatialMode { t, t_prime: t2 })
            }
            _ => {}
        }
        let rows = self.spec.label_sizes[k];
        let cols = self.spec.label_sizes[k2];
        let mut values = self.base_pair(inst, source, target);
        let kappa = kernel_value(t, t2, self.config.bandwidth);
        for v in values.iter_mut() {
            *v *= kappa;
        }
        if let Some((u_vecs, v_vecs)) = self.prior_label_scores() {
            let us = &u_vecs[k];
            let vs = &v_vecs[k2];
            for y in 0..rows {
                for y2 in 0..cols {
                    values[y * cols + y2] += us[y] * vs[y2];
                }
            }
        }
        if self.config.halve_pairwise {
            for v in values.iter_mut() {
                *v *= 0.5;
            }
        }
        Ok(TransitionMatrix { source, target, rows, cols, values })
    }

    /// Kernel-free, prior-free base table of the ordered pair. Callers apply
    /// kernel, prior, and the halving flag.
    fn base_pair(
        &self,
        inst: &ObservationInstance,
        source: (usize, usize),
        target: (usize, usize),
    ) -> Vec<f64> {
        let (t, k) = source;
        let (t2, k2) = target;
        let rows = self.spec.label_sizes[k];
        let cols = self.spec.label_sizes[k2];
        match self.config.mode {
            EnergyMode::Ueg => unreachable!("callers reject unary-only mode"),
            EnergyMode::Seg | EnergyMode::Steg => self.compat[&(k, k2)].clone(),
            EnergyMode::Gsteg => {
                let pair = if t == t2 { &self.spatial[&(k, k2)] } else { &self.temporal[&(k, k2)] };
                let x = inst.feature(t, k);
                let left = pair.source.forward(x);
                let right = pair.target.forward(x);
                low_rank_product(&left, &right, rows, cols, self.config.rank)
            }
        }
    }

    /// Per-stream label scores of the prior maps: `u(S^k[y])` and `v(S^k[y])`
    /// for every stream and label. `None` when no prior is configured.
    fn prior_label_scores(&self) -> Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (u, v) = self.prior_maps.as_ref()?;
        let prior = self.config.prior.as_ref().expect("prior maps imply prior config");
        let mut us = Vec::with_capacity(self.spec.num_streams());
        let mut vs = Vec::with_capacity(self.spec.num_streams());
        for (k, table) in prior.tables.iter().enumerate() {
            let n = self.spec.label_sizes[k];
            let mut uk = Vec::with_capacity(n);
            let mut vk = Vec::with_capacity(n);
            for y in 0..n {
                let row = &table[y * prior.dim..(y + 1) * prior.dim];
                uk.push(u.forward(row)[0]);
                vk.push(v.forward(row)[0]);
            }
            us.push(uk);
            vs.push(vk);
        }
        Some((us, vs))
    }

    /// Total energy of a full assignment: unary terms plus one term per
    /// ordered pair of distinct nodes.
    pub fn total_energy(&self, inst: &ObservationInstance, y: &Assignment) -> Result<f64> {
        self.check_instance(inst)?;
        y.validate(&self.spec)?;
        let table = EnergyTables::build(self, inst)?;
        Ok(table.total_energy(y))
    }

    /// Parameter tensors in canonical order, paired with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (k, proj) in self.unary.iter().enumerate() {
            push_projection(&mut out, &format!("unary[{k}]"), proj);
        }
        for ((k, k2), values) in &self.compat {
            out.push((format!("compat[{k},{k2}]"), values));
        }
        for ((k, k2), pair) in &self.spatial {
            push_projection(&mut out, &format!("spatial[{k},{k2}].src"), &pair.source);
            push_projection(&mut out, &format!("spatial[{k},{k2}].tgt"), &pair.target);
        }
        for ((k, k2), pair) in &self.temporal {
            push_projection(&mut out, &format!("temporal[{k},{k2}].src"), &pair.source);
            push_projection(&mut out, &format!("temporal[{k},{k2}].tgt"), &pair.target);
        }
        if let Some((u, v)) = &self.prior_maps {
            push_projection(&mut out, "prior.src", u);
            push_projection(&mut out, "prior.tgt", v);
        }
        out
    }

    /// Mutable view of the parameter tensors, same names and order as
    /// [`named_tensors`](Self::named_tensors).
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (k, proj) in self.unary.iter_mut().enumerate() {
            push_projection_mut(&mut out, &format!("unary[{k}]"), proj);
        }
        for ((k, k2), values) in self.compat.iter_mut() {
            out.push((format!("compat[{k},{k2}]"), values));
        }
        for ((k, k2), pair) in self.spatial.iter_mut() {
            push_projection_mut(&mut out, &format!("spatial[{k},{k2}].src"), &mut pair.source);
            push_projection_mut(&mut out, &format!("spatial[{k},{k2}].tgt"), &mut pair.target);
        }
        for ((k, k2), pair) in self.temporal.iter_mut() {
            push_projection_mut(&mut out, &format!("temporal[{k},{k2}].src"), &mut pair.source);
            push_projection_mut(&mut out, &format!("temporal[{k},{k2}].tgt"), &mut pair.target);
        }
        if let Some((u, v)) = &mut self.prior_maps {
            push_projection_mut(&mut out, "prior.src", u);
            push_projection_mut(&mut out, "prior.tgt", v);
        }
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, v)| v.len()).sum()
    }

    /// Overwrite one tensor by name (used by checkpoint loading and tests).
    pub fn set_tensor(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for (n, tensor) in self.named_tensors_mut() {
            if n == name {
                if tensor.len() != values.len() {
                    return Err(Error::ParamShapeMismatch {
                        name: name.to_string(),
                        got: values.len(),
                        expected: tensor.len(),
                    });
                }
                tensor.copy_from_slice(values);
                return Ok(());
            }
        }
        Err(Error::UnknownParam { name: name.to_string() })
    }

    pub(crate) fn projections(&self) -> ModelProjections<'_> {
        ModelProjections {
            unary: &self.unary,
            compat: &self.compat,
            spatial: &self.spatial,
            temporal: &self.temporal,
            prior_maps: self.prior_maps.as_ref(),
        }
    }
}

/// Read-only structural view used by the unrolled-gradient tape builder.
pub(crate) struct ModelProjections<'a> {
    pub unary: &'a [Projection],
    pub compat: &'a BTreeMap<(usize, usize), Vec<f64>>,
    pub spatial: &'a BTreeMap<(usize, usize), GatedPair>,
    pub temporal: &'a BTreeMap<(usize, usize), GatedPair>,
    pub prior_maps: Option<&'a (Projection, Projection)>,
}

fn push_projection<'a>(
    out: &mut Vec<(String, &'a Vec<f64>)>,
    prefix: &str,
    proj: &'a Projection,
) {
    for (i, layer) in proj.layers.iter().enumerate() {
        out.push((format!("{prefix}.w{i}"), &layer.weight));
        out.push((format!("{prefix}.b{i}"), &layer.bias));
    }
}

fn push_projection_mut<'a>(
    out: &mut Vec<(String, &'a mut Vec<f64>)>,
    prefix: &str,
    proj: &'a mut Projection,
) {
    for (i, layer) in proj.layers.iter_mut().enumerate() {
        out.push((format!("{prefix}.w{i}"), &mut layer.weight));
        out.push((format!("{prefix}.b{i}"), &mut layer.bias));
    }
}

/// `result[y][y'] = sum_r left[y*rank + r] * right[y'*rank + r]`, i.e. the
/// product `A B^T` of the two row-major reshaped factors.
pub(crate) fn low_rank_product(
    left: &[f64],
    right: &[f64],
    rows: usize,
    cols: usize,
    rank: usize,
) -> Vec<f64> {
    debug_assert_eq!(left.len(), rows * rank);
    debug_assert_eq!(right.len(), cols * rank);
    let mut out = vec![0.0; rows * cols];
    for y in 0..rows {
        let a = &left[y * rank..(y + 1) * rank];
        for y2 in 0..cols {
            let b = &right[y2 * rank..(y2 + 1) * rank];
            let mut acc = 0.0;
            for r in 0..rank {
                acc += a[r] * b[r];
            }
            out[y * cols + y2] = acc;
        }
    }
    out
}

/// Precomputed energy tables for one `(model, instance)` pair: unary vectors
/// per node, pairwise base tables per (source node, target stream, same-step)
/// triple, prior outer tables per stream pair, and the kernel per step
/// distance. Base tables exclude kernel, prior, and halving, which are
/// applied at lookup time — this is what makes the cache reusable across all
/// `t'` for a fixed source.
pub(crate) struct EnergyTables<'a> {
    spec: &'a GraphSpec,
    streams: usize,
    /// `psi` per node, indexed `t * K + k`.
    pub unary: Vec<Vec<f64>>,
    /// Base tables indexed `(t*K + k) * (K*2) + k2*2 + same_step`.
    base: Vec<Option<Vec<f64>>>,
    /// Prior outer tables indexed `k * K + k2`.
    prior: Vec<Option<Vec<f64>>>,
    /// Kernel value per step distance `0..T`.
    kernel: Vec<f64>,
    /// 0.5 when the halving flag is set, else 1.0.
    halve: f64,
}

impl<'a> EnergyTables<'a> {
    pub fn build(model: &'a EnergyModel, inst: &'a ObservationInstance) -> Result<Self> {
        model.check_instance(inst)?;
        let spec = model.spec();
        let streams = spec.num_streams();
        let mut unary = Vec::with_capacity(spec.node_count());
        for (t, k) in spec.nodes() {
            unary.push(model.unary[k].forward(inst.feature(t, k)));
        }

        let mut base = vec![None; spec.node_count() * streams * 2];
        for (t, k) in spec.nodes() {
            for k2 in 0..streams {
                for same_step in [false, true] {
                    let exists = match model.mode() {
                        EnergyMode::Ueg => false,
                        EnergyMode::Seg => same_step && k != k2,
                        EnergyMode::Steg | EnergyMode::Gsteg => {
                            // A same-step pair between a stream and itself is
                            // the node itself — no such edge.
                            !(same_step && k == k2)
                        }
                    };
                    if !exists {
                        continue;
                    }
                    // Cross-step tables are irrelevant when T = 1.
                    if !same_step && spec.num_steps == 1 {
                        continue;
                    }
                    let t2 = if same_step { t } else { (t + 1) % spec.num_steps };
                    let values = model.base_pair(inst, (t, k), (t2, k2));
                    base[Self::base_index(streams, t, k, k2, same_step)] = Some(values);
                }
            }
        }

        let mut prior = vec![None; streams * streams];
        if let Some((us, vs)) = model.prior_label_scores() {
            for k in 0..streams {
                for k2 in 0..streams {
                    let rows = spec.label_sizes[k];
                    let cols = spec.label_sizes[k2];
                    let mut table = vec![0.0; rows * cols];
                    for y in 0..rows {
                        for y2 in 0..cols {
                            table[y * cols + y2] = us[k][y] * vs[k2][y2];
                        }
                    }
                    prior[k * streams + k2] = Some(table);
                }
            }
        }

        let kernel = (0..spec.num_steps)
            .map(|d| kernel_value(d, 0, model.bandwidth()))
            .collect();
        let halve = if model.config().halve_pairwise { 0.5 } else { 1.0 };
        Ok(Self { spec, streams, unary, base, prior, kernel, halve })
    }

    #[inline]
    fn base_index(streams: usize, t: usize, k: usize, k2: usize, same_step: bool) -> usize {
        ((t * streams + k) * streams + k2) * 2 + same_step as usize
    }

    #[inline]
    pub fn node(&self, t: usize, k: usize) -> usize {
        t * self.streams + k
    }

    pub fn spec(&self) -> &GraphSpec {
        self.spec
    }

    /// Base table of the ordered pair `(source, target)` plus its kernel
    /// scale, or `None` when the mode has no such edge. Prior and halving are
    /// *not* applied.
    #[inline]
    pub fn pair_base(
        &self,
        source: (usize, usize),
        target: (usize, usize),
    ) -> Option<(&[f64], f64)> {
        let same_step = source.0 == target.0;
        let idx = Self::base_index(self.streams, source.0, source.1, target.1, same_step);
        self.base[idx].as_deref().map(|b| {
            let dt = source.0.abs_diff(target.0);
            (b, self.kernel[dt])
        })
    }

    #[inline]
    pub fn prior_pair(&self, k: usize, k2: usize) -> Option<&[f64]> {
        self.prior[k * self.streams + k2].as_deref()
    }

    /// Full transition table of one ordered pair, with kernel, prior, and
    /// halving applied; `None` when the mode has no such edge.
    pub fn assembled(&self, source: (usize, usize), target: (usize, usize)) -> Option<Vec<f64>> {
        let cols = self.spec.label_sizes[target.1];
        let rows = self.spec.label_sizes[source.1];
        let base = self.pair_base(source, target);
        let prior = self.prior_pair(source.1, target.1);
        base.map(|(b, kappa)| {
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows * cols {
                let mut v = kappa * b[i];
                if let Some(p) = prior {
                    v += p[i];
                }
                out[i] = v * self.halve;
            }
            out
        })
    }

    /// Total energy of a full assignment.
    pub fn total_energy(&self, y: &Assignment) -> f64 {
        let mut e = 0.0;
        for (t, k) in self.spec.nodes() {
            e += self.unary[self.node(t, k)][y.labels[t][k]];
        }
        for (t, k) in self.spec.nodes() {
            for (t2, k2) in self.spec.nodes() {
                if (t, k) == (t2, k2) {
                    continue;
                }
                if let Some((base, kappa)) = self.pair_base((t, k), (t2, k2)) {
                    let cols = self.spec.label_sizes[k2];
                    let idx = y.labels[t][k] * cols + y.labels[t2][k2];
                    let mut v = kappa * base[idx];
                    if let Some(p) = self.prior_pair(k, k2) {
                        v += p[idx];
                    }
                    e += self.halve * v;
                }
            }
        }
        e
    }

    /// The coordinate-descent score vector of node `(t, k)` given the other
    /// nodes' marginals: `s[y] = -psi[y] - sum_b (Phi_{a,b} q_b)[y]
    /// - sum_b (Phi_{b,a}^T q_b)[y]`, covering **both** ordered directions of
    /// every pair so that `softmax(s)` is the exact minimizer of the free
    /// energy over this node's marginal.
    pub fn update_scores(&self, t: usize, k: usize, q: &[Vec<Vec<f64>>]) -> Vec<f64> {
        let rows = self.spec.label_sizes[k];
        let mut s: Vec<f64> = self.unary[self.node(t, k)].iter().map(|v| -v).collect();
        for (t2, k2) in self.spec.nodes() {
            if (t2, k2) == (t, k) {
                continue;
            }
            let qb = &q[t2][k2];
            let cols = self.spec.label_sizes[k2];
            // Outgoing direction: Phi_{(t,k),(t2,k2)} q_b.
            if let Some((base, kappa)) = self.pair_base((t, k), (t2, k2)) {
                let prior = self.prior_pair(k, k2);
                for y in 0..rows {
                    let row = &base[y * cols..(y + 1) * cols];
                    let mut acc = 0.0;
                    for (bv, qv) in row.iter().zip(qb) {
                        acc += bv * qv;
                    }
                    let mut term = kappa * acc;
                    if let Some(p) = prior {
                        let prow = &p[y * cols..(y + 1) * cols];
                        let mut pacc = 0.0;
                        for (pv, qv) in prow.iter().zip(qb) {
                            pacc += pv * qv;
                        }
                        term += pacc;
                    }
                    s[y] -= self.halve * term;
                }
            }
            // Incoming direction: Phi_{(t2,k2),(t,k)}^T q_b.
            if let Some((base, kappa)) = self.pair_base((t2, k2), (t, k)) {
                let prior = self.prior_pair(k2, k);
                for y in 0..rows {
                    let mut acc = 0.0;
                    for (y2, qv) in qb.iter().enumerate() {
                        acc += base[y2 * rows + y] * qv;
                    }
                    let mut term = kappa * acc;
                    if let Some(p) = prior {
                        let mut pacc = 0.0;
                        for (y2, qv) in qb.iter().enumerate() {
                            pacc += p[y2 * rows + y] * qv;
                        }
                        term += pacc;
                    }
                    s[y] -= self.halve * term;
                }
            }
        }
        s
    }

    /// Mean-field variational free energy of marginals `q`:
    /// expected unary energy + expected pairwise energy over ordered pairs
    /// + the negative entropy `sum q ln q` (with `0 ln 0 = 0`).
    pub fn free_energy(&self, q: &[Vec<Vec<f64>>]) -> f64 {
        let mut f = 0.0;
        for (t, k) in self.spec.nodes() {
            let psi = &self.unary[self.node(t, k)];
            for (qv, pv) in q[t][k].iter().zip(psi) {
                f += qv * pv;
            }
            for &qv in &q[t][k] {
                if qv > 0.0 {
                    f += qv * qv.ln();
                }
            }
        }
        for (t, k) in self.spec.nodes() {
            for (t2, k2) in self.spec.nodes() {
                if (t, k) == (t2, k2) {
                    continue;
                }
                if let Some((base, kappa)) = self.pair_base((t, k), (t2, k2)) {
                    let qa = &q[t][k];
                    let qb = &q[t2][k2];
                    let cols = self.spec.label_sizes[k2];
                    let prior = self.prior_pair(k, k2);
                    let mut pair_sum = 0.0;
                    for (y, &qav) in qa.iter().enumerate() {
                        let row = &base[y * cols..(y + 1) * cols];
                        let mut acc = 0.0;
                        for (bv, qbv) in row.iter().zip(qb) {
                            acc += bv * qbv;
                        }
                        let mut term = kappa * acc;
                        if let Some(p) = prior {
                            let prow = &p[y * cols..(y + 1) * cols];
                            let mut pacc = 0.0;
                            for (pv, qbv) in prow.iter().zip(qb) {
                                pacc += pv * qbv;
                            }
                            term += pacc;
                        }
                        pair_sum += qav * term;
                    }
                    f += self.halve * pair_sum;
                }
            }
        }
        f
    }

}
