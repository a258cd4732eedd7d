//! One-snapshot relational neighborhood aggregation.
//!
//! Per layer, each incident entity receives, for every relation and
//! direction, the weighted mean-like sum of transformed neighbor states plus
//! a self-loop term. Two weighting modes: temporal (inter-event-time factor)
//! and structural (neighborhood-size factor). Forward and reverse edge
//! traversal use distinct relation weights.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TkgError};
use crate::nn::{glorot, glorot_block_diag, Activation};
use crate::store::Snapshot;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};

/// How the per-edge factor `nu` is computed.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightingMode {
    /// `nu = 1 + ln(1 + tau)` from the pair's inter-event time; pairs with
    /// no recorded history use `fallback_tau`.
    Temporal {
        pair_tau: BTreeMap<(usize, usize), u64>,
        fallback_tau: u64,
    },
    /// `nu = |N_t^(i,r)|` for the direction bucket being aggregated.
    Structural,
}

/// Strictly positive, monotone transform of the inter-event time.
pub fn temporal_factor(tau: u64) -> f64 {
    1.0 + (1.0 + tau as f64).ln()
}

/// Per-layer weights: one matrix per relation per direction plus a
/// self-loop matrix. Relation matrices are block-diagonal with `blocks`
/// blocks; the self-loop matrix is dense.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RelationalLayerParams {
    /// Messages along edge direction (subject -> object).
    pub w_fwd: Vec<ParamId>,
    /// Messages against edge direction (object -> subject).
    pub w_rev: Vec<ParamId>,
    pub w_self: ParamId,
    pub blocks: usize,
    #[serde(skip, default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl RelationalLayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        num_relations: usize,
        d_in: usize,
        d_out: usize,
        blocks: usize,
    ) -> Result<Self> {
        if d_in % blocks != 0 || d_out % blocks != 0 {
            return Err(TkgError::Dimension(format!(
                "dims ({d_in}, {d_out}) not divisible by {blocks} blocks"
            )));
        }
        let mut w_fwd = Vec::with_capacity(num_relations);
        let mut w_rev = Vec::with_capacity(num_relations);
        for r in 0..num_relations {
            w_fwd.push(store.add(
                &format!("{name}.r{r}.fwd"),
                glorot_block_diag(rng, d_out, d_in, blocks),
            ));
            w_rev.push(store.add(
                &format!("{name}.r{r}.rev"),
                glorot_block_diag(rng, d_out, d_in, blocks),
            ));
        }
        let w_self = store.add(&format!("{name}.self"), glorot(rng, d_out, d_in));
        Ok(Self {
            w_fwd,
            w_rev,
            w_self,
            blocks,
            activation: Activation::Relu,
        })
    }
}

/// Input to one aggregation layer: the snapshot, per-entity states, and the
/// weighting mode.
pub struct EncoderInput<'a> {
    pub snapshot: &'a Snapshot,
    pub node_states: BTreeMap<usize, NodeId>,
    pub mode: WeightingMode,
}

fn pair_key(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// One layer of relational aggregation over the snapshot's incident
/// entities. Output covers exactly the incident entities.
pub fn aggregate_layer(
    tape: &mut Tape,
    params: &ParamStore,
    layer: &RelationalLayerParams,
    input: &EncoderInput,
) -> Result<BTreeMap<usize, NodeId>> {
    let snapshot = input.snapshot;
    // Direction-and-relation buckets: (receiver, relation, is_reverse) -> neighbors.
    let mut buckets: BTreeMap<(usize, usize, bool), Vec<usize>> = BTreeMap::new();
    for q in &snapshot.events {
        if q.relation >= layer.w_fwd.len() {
            return Err(TkgError::Dimension(format!(
                "relation {} has no layer weights",
                q.relation
            )));
        }
        buckets
            .entry((q.object, q.relation, false))
            .or_default()
            .push(q.subject);
        buckets
            .entry((q.subject, q.relation, true))
            .or_default()
            .push(q.object);
    }

    let state_of = |id: usize| -> Result<NodeId> {
        input.node_states.get(&id).copied().ok_or_else(|| {
            TkgError::Contract(format!("missing node state for entity {id}"))
        })
    };

    let mut out = BTreeMap::new();
    for i in snapshot.incident_entities() {
        let hi = state_of(i)?;
        let selfloop = tape.matvec(params, layer.w_self, hi);
        let mut acc = selfloop;
        for (&(recv, rel, rev), bucket) in buckets.iter() {
            if recv != i {
                continue;
            }
            let w = if rev {
                layer.w_rev[rel]
            } else {
                layer.w_fwd[rel]
            };
            let mut messages = Vec::with_capacity(bucket.len());
            for &j in bucket {
                let hj = state_of(j)?;
                let msg = tape.block_matvec(params, w, layer.blocks, hj);
                let nu = match &input.mode {
                    WeightingMode::Structural => bucket.len() as f64,
                    WeightingMode::Temporal {
                        pair_tau,
                        fallback_tau,
                    } => {
                        let tau = pair_tau
                            .get(&pair_key(i, j))
                            .copied()
                            .unwrap_or(*fallback_tau);
                        temporal_factor(tau)
                    }
                };
                messages.push(tape.scale(msg, 1.0 / nu));
            }
            messages.push(acc);
            acc = tape.sum_many(&messages);
        }
        out.insert(i, layer.activation.apply(tape, acc));
    }
    Ok(out)
}

/// Composes `layers` aggregation layers; layer-0 states come from
/// `input.node_states`.
pub fn encode(
    tape: &mut Tape,
    params: &ParamStore,
    layers: &[RelationalLayerParams],
    input: &EncoderInput,
) -> Result<BTreeMap<usize, NodeId>> {
    if layers.is_empty() {
        return Err(TkgError::Validation("encoder needs >= 1 layer".into()));
    }
    let mut states = aggregate_layer(tape, params, &layers[0], input)?;
    for layer in &layers[1..] {
        let next_input = EncoderInput {
            snapshot: input.snapshot,
            node_states: states,
            mode: input.mode.clone(),
        };
        states = aggregate_layer(tape, params, layer, &next_input)?;
    }
    Ok(states)
}
