//! Approximate and exact inference over the Gibbs distribution
//! `P(y | X) = exp(-E(y | X)) / Z(X)`.
//!
//! The workhorse is naive mean field: marginals `q_{t,k}` over each node's
//! labels, refined by coordinate descent on the variational free energy
//!
//! ```text
//! F(q) = sum_a <q_a, psi_a> + sum_{a != b} q_a^T Phi_{a,b} q_b + sum_a <q_a, ln q_a>
//! ```
//!
//! where the pairwise sum runs over ordered pairs. The single-node update
//! replaces `q_a` with `softmax(-psi_a - sum_b (Phi_{a,b} q_b + Phi_{b,a}^T q_b))`
//! — the exact minimizer of `F` over `q_a` with all other marginals held
//! fixed, which is what makes the sequential schedule monotone in `F`. The
//! two matrix terms are exactly the message products of the two ordered
//! directions a pair contributes; [`compute_message`] exposes the single
//! directed message as its own operation.
//!
//! Everything is computed in log space with max-subtraction normalization.

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, EnergyTables};
use crate::error::{Error, Result};
use crate::graph::{enumerate_assignments, Assignment, GraphSpec, ObservationInstance};
use crate::numeric::{logsumexp, softmax};

/// Per-node label marginals `values[t][k][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub values: Vec<Vec<Vec<f64>>>,
}

impl Marginals {
    pub fn get(&self, t: usize, k: usize) -> &[f64] {
        &self.values[t][k]
    }

    /// Check shapes against `spec` and that every node's vector is a
    /// distribution (entries in `[0, 1]`, sum within `tol` of one).
    pub fn validate(&self, spec: &GraphSpec, tol: f64) -> Result<()> {
        let streams = spec.num_streams();
        if self.values.len() != spec.num_steps
            || self.values.iter().any(|row| row.len() != streams)
        {
            return Err(Error::InvalidMarginal {
                t: self.values.len(),
                k: 0,
                reason: "marginal grid shape does not match the spec".into(),
            });
        }
        for (t, k) in spec.nodes() {
            let q = &self.values[t][k];
            if q.len() != spec.label_sizes[k] {
                return Err(Error::InvalidMarginal {
                    t,
                    k,
                    reason: format!("{} entries for {} labels", q.len(), spec.label_sizes[k]),
                });
            }
            if q.iter().any(|v| !v.is_finite() || *v < -tol || *v > 1.0 + tol) {
                return Err(Error::InvalidMarginal { t, k, reason: "entry outside [0, 1]".into() });
            }
            let sum: f64 = q.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidMarginal { t, k, reason: format!("sum {sum} != 1") });
            }
        }
        Ok(())
    }
}

/// Node visitation strategy for mean-field passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// In-place coordinate descent in lexicographic `(t, k)` order (default).
    Sequential,
    /// All nodes recomputed from the previous iterate, then blended with the
    /// old marginals by the damping factor.
    Parallel,
}

/// Knobs of [`run_mean_field`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    pub passes: usize,
    pub schedule: Schedule,
    /// Blend weight on the *old* marginals under the parallel schedule;
    /// ignored by the sequential schedule. Must lie in `[0, 1)`.
    pub damping: f64,
    /// Stop early once a full pass moves no marginal entry by more than this.
    pub early_stop: Option<f64>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { passes: 3, schedule: Schedule::Sequential, damping: 0.0, early_stop: None }
    }
}

impl InferenceOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidDamping { damping: self.damping });
        }
        if self.passes == 0 {
            return Err(Error::Config("mean field needs at least one pass".into()));
        }
        Ok(())
    }
}

/// Initial marginals: per-node softmax of the negated unary energies.
pub fn init_marginals(model: &EnergyModel, inst: &ObservationInstance) -> Result<Marginals> {
    let tables = EnergyTables::build(model, inst)?;
    Ok(init_from_tables(&tables))
}

pub(crate) fn init_from_tables(tables: &EnergyTables) -> Marginals {
    let spec = tables.spec();
    let values = (0..spec.num_steps)
        .map(|t| {
            (0..spec.num_streams())
                .map(|k| {
                    let neg: Vec<f64> =
                        tables.unary[tables.node(t, k)].iter().map(|v| -v).collect();
                    softmax(&neg)
                })
                .collect()
        })
        .collect();
    Marginals { values }
}

/// The directed mean-field message from node `from` into node `into`:
/// `m[y] = exp(-sum_{y'} Phi_{into,from}[y, y'] * q_from[y'])`, using the
/// transition sourced (and hence observation-gated) at the message target.
///
/// Errors mirror [`EnergyModel::pairwise_transition`]: no messages exist in
/// unary-only mode, and none cross steps in spatial-only mode.
pub fn compute_message(
    model: &EnergyModel,
    inst: &ObservationInstance,
    q: &Marginals,
    from: (usize, usize),
    into: (usize, usize),
) -> Result<Vec<f64>> {
    let phi = model.pairwise_transition(inst, into, from)?;
    let qf = q.get(from.0, from.1);
    let mut out = Vec::with_capacity(phi.rows);
    for y in 0..phi.rows {
        let mut acc = 0.0;
        for (y2, qv) in qf.iter().enumerate() {
            acc += phi.get(y, y2) * qv;
        }
        out.push((-acc).exp());
    }
    Ok(out)
}

/// Replace `q[t][k]` with the exact free-energy minimizer given every other
/// node's marginal; all other nodes are untouched.
pub fn mean_field_update_node(
    model: &EnergyModel,
    inst: &ObservationInstance,
    q: &mut Marginals,
    t: usize,
    k: usize,
) -> Result<()> {
    let tables = EnergyTables::build(model, inst)?;
    if t >= tables.spec().num_steps || k >= tables.spec().num_streams() {
        return Err(Error::NodeOutOfRange { t, k });
    }
    q.values[t][k] = softmax(&tables.update_scores(t, k, &q.values));
    Ok(())
}

/// Run `passes` sweeps of mean field from the unary initialization.
pub fn run_mean_field(
    model: &EnergyModel,
    inst: &ObservationInstance,
    opts: &InferenceOptions,
) -> Result<Marginals> {
    opts.validate()?;
    let tables = EnergyTables::build(model, inst)?;
    let mut q = init_from_tables(&tables);
    let spec = tables.spec();
    for _ in 0..opts.passes {
        let mut max_change = 0.0f64;
        match opts.schedule {
            Schedule::Sequential => {
                for (t, k) in spec.nodes() {
                    let new = softmax(&tables.update_scores(t, k, &q.values));
                    for (a, b) in new.iter().zip(&q.values[t][k]) {
                        max_change = max_change.max((a - b).abs());
                    }
                    q.values[t][k] = new;
                }
            }
            Schedule::Parallel => {
                let mut next = q.values.clone();
                for (t, k) in spec.nodes() {
                    let update = softmax(&tables.update_scores(t, k, &q.values));
                    let old = &q.values[t][k];
                    next[t][k] = update
                        .iter()
                        .zip(old)
                        .map(|(u, o)| (1.0 - opts.damping) * u + opts.damping * o)
                        .collect();
                    for (a, b) in next[t][k].iter().zip(old) {
                        max_change = max_change.max((a - b).abs());
                    }
                }
                q.values = next;
            }
        }
        if let Some(tol) = opts.early_stop {
            if max_change <= tol {
                break;
            }
        }
    }
    Ok(q)
}

/// Mean-field variational free energy `F(q)` of the given marginals.
///
/// `F(q) = KL(q || P) - ln Z`, so it upper-bounds `-ln Z` and equals it when
/// `q` is the true distribution (exactly representable only when the energy
/// factorizes, e.g. unary-only mode).
pub fn free_energy(
    model: &EnergyModel,
    inst: &ObservationInstance,
    q: &Marginals,
) -> Result<f64> {
    q.validate(model.spec(), 1e-6)?;
    let tables = EnergyTables::build(model, inst)?;
    Ok(tables.free_energy(&q.values))
}

/// Exact quantities from brute-force enumeration of the joint label space.
#[derive(Debug, Clone)]
pub struct GibbsDistribution {
    pub log_partition: f64,
    pub marginals: Marginals,
    /// Minimum-energy assignment; ties resolve to the lexicographically
    /// smallest (earliest enumerated).
    pub map_assignment: Assignment,
}

/// Enumerate every assignment to obtain the exact log-partition, exact
/// per-node marginals, and the exact MAP. Refuses when the joint state space
/// exceeds the enumeration cap.
pub fn exact_inference(
    model: &EnergyModel,
    inst: &ObservationInstance,
) -> Result<GibbsDistribution> {
    let tables = EnergyTables::build(model, inst)?;
    let spec = model.spec();

    let mut energies = Vec::new();
    let mut best_energy = f64::INFINITY;
    let mut map_assignment = None;
    for y in enumerate_assignments(spec)? {
        let e = tables.total_energy(&y);
        if e < best_energy {
            best_energy = e;
            map_assignment = Some(y.clone());
        }
        energies.push(e);
    }
    let neg: Vec<f64> = energies.iter().map(|e| -e).collect();
    let log_partition = logsumexp(&neg);

    let mut values: Vec<Vec<Vec<f64>>> = (0..spec.num_steps)
        .map(|_| spec.label_sizes.iter().map(|&s| vec![0.0; s]).collect())
        .collect();
    for (y, e) in enumerate_assignments(spec)?.zip(&energies) {
        let p = (-e - log_partition).exp();
        for (t, k) in spec.nodes() {
            values[t][k][y.labels[t][k]] += p;
        }
    }

    Ok(GibbsDistribution {
        log_partition,
        marginals: Marginals { values },
        map_assignment: map_assignment.expect("state space is non-empty"),
    })
}

/// Per-node argmax of the marginals; ties resolve to the smallest label
/// index.
pub fn map_labels(q: &Marginals) -> Assignment {
    let labels = q
        .values
        .iter()
        .map(|row| {
            row.iter()
                .map(|dist| {
                    let mut best = 0;
                    for (i, v) in dist.iter().enumerate() {
                        if *v > dist[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    Assignment::new(labels)
}
