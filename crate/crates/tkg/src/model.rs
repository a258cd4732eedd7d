//! The full model: static embeddings, two relational encoders (temporal and
//! structural), four recurrence cells, the time head, and the structure
//! head, plus the dynamic per-entity / per-relation state they evolve.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::{encode, EncoderInput, RelationalLayerParams, WeightingMode};
use crate::error::{Result, TkgError};
use crate::nn::{glorot, Dropout, RnnCell};
use crate::store::{HistoryTracker, Snapshot};
use crate::structure_head::{StructureContext, StructureHead};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::time_head::{Branch, MixtureParams, TimeHead};

/// Dynamic embeddings and recurrent state; `None` entries are still at
/// their zero initialization. Node ids refer to one specific tape.
#[derive(Debug, Clone, Default)]
pub struct DynamicState {
    pub ent_temporal: BTreeMap<usize, NodeId>,
    pub ent_structural: BTreeMap<usize, NodeId>,
    pub rel_temporal: BTreeMap<usize, NodeId>,
    pub rel_structural: BTreeMap<usize, NodeId>,
    /// Entities seen in any processed snapshot (the graph-summary pool).
    pub seen_entities: BTreeSet<usize>,
}

impl DynamicState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copies state values into `new_tape` as constants, severing gradient
    /// lineage while retaining values (backpropagation truncation).
    pub fn detach(&self, old_tape: &Tape, new_tape: &mut Tape) -> Self {
        let move_map = |m: &BTreeMap<usize, NodeId>, new_tape: &mut Tape| {
            m.iter()
                .map(|(&k, &n)| (k, new_tape.constant(old_tape.value(n).clone())))
                .collect()
        };
        Self {
            ent_temporal: move_map(&self.ent_temporal, new_tape),
            ent_structural: move_map(&self.ent_structural, new_tape),
            rel_temporal: move_map(&self.rel_temporal, new_tape),
            rel_structural: move_map(&self.rel_structural, new_tape),
            seen_entities: self.seen_entities.clone(),
        }
    }

    /// Plain values for checkpointing, in sorted key order.
    pub fn export(&self, tape: &Tape) -> ExportedState {
        let grab = |m: &BTreeMap<usize, NodeId>| {
            m.iter()
                .map(|(&k, &n)| (k, tape.value(n).to_vec()))
                .collect()
        };
        ExportedState {
            ent_temporal: grab(&self.ent_temporal),
            ent_structural: grab(&self.ent_structural),
            rel_temporal: grab(&self.rel_temporal),
            rel_structural: grab(&self.rel_structural),
            seen_entities: self.seen_entities.iter().copied().collect(),
        }
    }

    pub fn import(exported: &ExportedState, tape: &mut Tape) -> Self {
        let load = |v: &Vec<(usize, Vec<f64>)>, tape: &mut Tape| {
            v.iter()
                .map(|(k, vals)| (*k, tape.constant(Array1::from_vec(vals.clone()))))
                .collect()
        };
        Self {
            ent_temporal: load(&exported.ent_temporal, tape),
            ent_structural: load(&exported.ent_structural, tape),
            rel_temporal: load(&exported.rel_temporal, tape),
            rel_structural: load(&exported.rel_structural, tape),
            seen_entities: exported.seen_entities.iter().copied().collect(),
        }
    }
}

/// Serializable snapshot of [`DynamicState`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExportedState {
    pub ent_temporal: Vec<(usize, Vec<f64>)>,
    pub ent_structural: Vec<(usize, Vec<f64>)>,
    pub rel_temporal: Vec<(usize, Vec<f64>)>,
    pub rel_structural: Vec<(usize, Vec<f64>)>,
    pub seen_entities: Vec<usize>,
}

/// Per-event loss nodes produced for one snapshot.
pub struct TickLosses {
    pub iet: Vec<NodeId>,
    pub triple: Vec<NodeId>,
    /// Events with no history in either branch (excluded from the time NLL).
    pub skipped_time: usize,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub num_entities: usize,
    pub num_relations: usize,
    pub params: ParamStore,
    pub ent_temporal_static: ParamId,
    pub ent_structural_static: ParamId,
    pub rel_structural_static: ParamId,
    pub temporal_layers: Vec<RelationalLayerParams>,
    pub structural_layers: Vec<RelationalLayerParams>,
    pub rnn_temporal_entity: RnnCell,
    pub rnn_structural_entity: RnnCell,
    pub rnn_temporal_relation: RnnCell,
    pub rnn_structural_relation: RnnCell,
    pub time_head: TimeHead,
    pub structure_head: StructureHead,
}

impl Model {
    pub fn new(cfg: ModelConfig, num_entities: usize, num_relations: usize) -> Result<Self> {
        cfg.validate()?;
        if num_entities == 0 || num_relations == 0 {
            return Err(TkgError::Validation(
                "model needs >= 1 entity and >= 1 relation".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let dt = cfg.temporal_dim;
        let ds = cfg.structural_dim;

        let ent_temporal_static = params.add("emb.ent.t", glorot(&mut rng, num_entities, dt));
        let ent_structural_static = params.add("emb.ent.s", glorot(&mut rng, num_entities, ds));
        let rel_structural_static = params.add("emb.rel.s", glorot(&mut rng, num_relations, ds));

        let mut temporal_layers = Vec::with_capacity(cfg.layers);
        let mut structural_layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            temporal_layers.push(RelationalLayerParams::new(
                &mut params,
                &mut rng,
                &format!("enc.t.l{l}"),
                num_relations,
                dt,
                dt,
                cfg.blocks,
            )?);
            structural_layers.push(RelationalLayerParams::new(
                &mut params,
                &mut rng,
                &format!("enc.s.l{l}"),
                num_relations,
                ds,
                ds,
                cfg.blocks,
            )?);
        }

        let rnn_temporal_entity = RnnCell::new(&mut params, &mut rng, "rnn.te", dt, dt);
        let rnn_structural_entity = RnnCell::new(&mut params, &mut rng, "rnn.se", ds, ds);
        let rnn_temporal_relation = RnnCell::new(&mut params, &mut rng, "rnn.tr", dt, dt);
        let rnn_structural_relation = RnnCell::new(&mut params, &mut rng, "rnn.sr", ds, ds);

        let time_head = TimeHead::new(&mut params, &mut rng, 3 * dt, dt, cfg.mixture_components);
        let structure_head = StructureHead::new(
            &mut params,
            &mut rng,
            2 * ds,
            num_entities,
            num_relations,
        );

        Ok(Self {
            cfg,
            num_entities,
            num_relations,
            params,
            ent_temporal_static,
            ent_structural_static,
            rel_structural_static,
            temporal_layers,
            structural_layers,
            rnn_temporal_entity,
            rnn_structural_entity,
            rnn_temporal_relation,
            rnn_structural_relation,
            time_head,
            structure_head,
        })
    }

    fn dyn_or_zero(
        &self,
        tape: &mut Tape,
        map: &BTreeMap<usize, NodeId>,
        key: usize,
        dim: usize,
    ) -> NodeId {
        map.get(&key)
            .copied()
            .unwrap_or_else(|| tape.zeros(dim))
    }

    /// `[dynamic structural || static structural]` view of one entity.
    pub fn entity_structural_bar(
        &self,
        tape: &mut Tape,
        state: &DynamicState,
        entity: usize,
    ) -> NodeId {
        let dynamic =
            self.dyn_or_zero(tape, &state.ent_structural, entity, self.cfg.structural_dim);
        let stat = tape.param_row(&self.params, self.ent_structural_static, entity);
        tape.concat(&[dynamic, stat])
    }

    /// `[dynamic structural || static structural]` view of one relation.
    pub fn relation_structural_bar(
        &self,
        tape: &mut Tape,
        state: &DynamicState,
        relation: usize,
    ) -> NodeId {
        let dynamic =
            self.dyn_or_zero(tape, &state.rel_structural, relation, self.cfg.structural_dim);
        let stat = tape.param_row(&self.params, self.rel_structural_static, relation);
        tape.concat(&[dynamic, stat])
    }

    /// Element-wise max over the structural views of all seen entities;
    /// the zero vector before any entity has been seen.
    pub fn graph_summary(&self, tape: &mut Tape, state: &DynamicState) -> NodeId {
        if state.seen_entities.is_empty() {
            return tape.zeros(2 * self.cfg.structural_dim);
        }
        let bars: Vec<NodeId> = state
            .seen_entities
            .iter()
            .map(|&i| self.entity_structural_bar(tape, state, i))
            .collect();
        tape.max_many(&bars)
    }

    /// Temporal context `[e_t*_s || e_t*_r || e_t*_o]` of one triple.
    pub fn time_context(
        &self,
        tape: &mut Tape,
        state: &DynamicState,
        subject: usize,
        relation: usize,
        object: usize,
    ) -> NodeId {
        let dt = self.cfg.temporal_dim;
        let s = self.dyn_or_zero(tape, &state.ent_temporal, subject, dt);
        let r = self.dyn_or_zero(tape, &state.rel_temporal, relation, dt);
        let o = self.dyn_or_zero(tape, &state.ent_temporal, object, dt);
        tape.concat(&[s, r, o])
    }

    /// Structure-head conditioning context for one `(s, r)` query.
    pub fn structure_context(
        &self,
        tape: &mut Tape,
        state: &DynamicState,
        summary: NodeId,
        subject: usize,
        relation: usize,
    ) -> StructureContext {
        StructureContext {
            subject_state: self.entity_structural_bar(tape, state, subject),
            relation_state: self.relation_structural_bar(tape, state, relation),
            summary,
        }
    }

    /// Plain mixture parameters of one branch for an event triple, using
    /// the current dynamic state (no dropout).
    pub fn mixture_for(
        &self,
        tape: &mut Tape,
        state: &DynamicState,
        subject: usize,
        relation: usize,
        object: usize,
        branch: Branch,
    ) -> MixtureParams {
        let ctx = self.time_context(tape, state, subject, relation, object);
        let nodes = self
            .time_head
            .head(branch)
            .mixture_nodes(tape, &self.params, ctx, None);
        nodes.to_params(tape)
    }

    /// Builds the per-event loss nodes of one snapshot. The tracker and
    /// state must reflect history strictly before the snapshot tick.
    pub fn tick_losses(
        &self,
        tape: &mut Tape,
        state: &DynamicState,
        tracker: &HistoryTracker,
        snapshot: &Snapshot,
        mut dropout: Option<&mut Dropout>,
        include_time: bool,
    ) -> Result<TickLosses> {
        let summary = self.graph_summary(tape, state);
        let mut iet = Vec::new();
        let mut triple = Vec::new();
        let mut skipped_time = 0;
        for q in &snapshot.events {
            if include_time {
                let times = tracker.inter_event_times(q)?;
                let ctx = self.time_context(tape, state, q.subject, q.relation, q.object);
                match crate::time_head::nll_time_node(
                    tape,
                    &self.time_head,
                    &self.params,
                    ctx,
                    self.cfg.alpha,
                    times.tau_eo,
                    times.tau_min,
                    dropout.as_deref_mut(),
                ) {
                    crate::time_head::TimeNll::Loss(n) => iet.push(n),
                    crate::time_head::TimeNll::Skip => skipped_time += 1,
                }
            }
            let ctx = self.structure_context(tape, state, summary, q.subject, q.relation);
            let nll = self.structure_head.nll_triple(
                tape,
                &self.params,
                &ctx,
                q.subject,
                q.relation,
                q.object,
                dropout.as_deref_mut(),
            )?;
            triple.push(nll);
        }
        Ok(TickLosses {
            iet,
            triple,
            skipped_time,
        })
    }

    /// Pair inter-event times for every snapshot edge with history, plus
    /// the fallback used for pairs without history.
    fn edge_taus(
        &self,
        tracker: &HistoryTracker,
        snapshot: &Snapshot,
    ) -> (BTreeMap<(usize, usize), u64>, u64) {
        let mut pair_tau = BTreeMap::new();
        for q in &snapshot.events {
            let key = if q.subject <= q.object {
                (q.subject, q.object)
            } else {
                (q.object, q.subject)
            };
            if let Some(t) = tracker.last_pair_time(q.subject, q.object) {
                pair_tau.insert(key, snapshot.tick - t);
            }
        }
        let fallback = snapshot.tick - tracker.start_tick().unwrap_or(snapshot.tick) + 1;
        (pair_tau, fallback)
    }

    /// Runs both encoders over one snapshot and returns
    /// (temporal summaries, structural summaries) for incident entities.
    pub fn encode_snapshot(
        &self,
        tape: &mut Tape,
        tracker: &HistoryTracker,
        snapshot: &Snapshot,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(BTreeMap<usize, NodeId>, BTreeMap<usize, NodeId>)> {
        let incident = snapshot.incident_entities();
        let (pair_tau, fallback_tau) = self.edge_taus(tracker, snapshot);

        let temporal_states: BTreeMap<usize, NodeId> = incident
            .iter()
            .map(|&i| {
                (
                    i,
                    tape.param_row(&self.params, self.ent_temporal_static, i),
                )
            })
            .collect();
        let mut temporal = encode(
            tape,
            &self.params,
            &self.temporal_layers,
            &EncoderInput {
                snapshot,
                node_states: temporal_states,
                mode: WeightingMode::Temporal {
                    pair_tau,
                    fallback_tau,
                },
            },
        )?;

        let structural_states: BTreeMap<usize, NodeId> = incident
            .iter()
            .map(|&i| {
                (
                    i,
                    tape.param_row(&self.params, self.ent_structural_static, i),
                )
            })
            .collect();
        let mut structural = encode(
            tape,
            &self.params,
            &self.structural_layers,
            &EncoderInput {
                snapshot,
                node_states: structural_states,
                mode: WeightingMode::Structural,
            },
        )?;

        if let Some(d) = dropout.as_deref_mut() {
            for node in temporal.values_mut().chain(structural.values_mut()) {
                *node = d.apply(tape, *node);
            }
        }
        Ok((temporal, structural))
    }

    /// Applies the entity recurrences for entities incident to `snapshot`.
    /// Summaries must cover exactly the incident entities.
    pub fn update_entity_states(
        &self,
        tape: &mut Tape,
        state: &mut DynamicState,
        snapshot: &Snapshot,
        temporal_summaries: &BTreeMap<usize, NodeId>,
        structural_summaries: &BTreeMap<usize, NodeId>,
    ) -> Result<()> {
        let incident = snapshot.incident_entities();
        for summaries in [temporal_summaries, structural_summaries] {
            for &i in summaries.keys() {
                if !incident.contains(&i) {
                    return Err(TkgError::Contract(format!(
                        "summary provided for non-incident entity {i}"
                    )));
                }
            }
        }
        let (dt, ds) = (self.cfg.temporal_dim, self.cfg.structural_dim);
        for &i in &incident {
            let input = *temporal_summaries.get(&i).ok_or_else(|| {
                TkgError::Contract(format!("missing temporal summary for entity {i}"))
            })?;
            let prev = self.dyn_or_zero(tape, &state.ent_temporal, i, dt);
            let next = self
                .rnn_temporal_entity
                .step(tape, &self.params, input, prev);
            state.ent_temporal.insert(i, next);

            let input = *structural_summaries.get(&i).ok_or_else(|| {
                TkgError::Contract(format!("missing structural summary for entity {i}"))
            })?;
            let prev = self.dyn_or_zero(tape, &state.ent_structural, i, ds);
            let next = self
                .rnn_structural_entity
                .step(tape, &self.params, input, prev);
            state.ent_structural.insert(i, next);
        }
        Ok(())
    }

    /// Applies the relation recurrences for relations present in
    /// `snapshot`; context is the mean summary over the deduplicated set of
    /// entities incident to that relation's edges.
    pub fn update_relation_states(
        &self,
        tape: &mut Tape,
        state: &mut DynamicState,
        snapshot: &Snapshot,
        temporal_summaries: &BTreeMap<usize, NodeId>,
        structural_summaries: &BTreeMap<usize, NodeId>,
    ) -> Result<()> {
        let (dt, ds) = (self.cfg.temporal_dim, self.cfg.structural_dim);
        for r in snapshot.present_relations() {
            let mut members: Vec<usize> = snapshot
                .events
                .iter()
                .filter(|q| q.relation == r)
                .flat_map(|q| [q.subject, q.object])
                .collect();
            members.sort_unstable();
            members.dedup();

            let gather = |summaries: &BTreeMap<usize, NodeId>| -> Result<Vec<NodeId>> {
                members
                    .iter()
                    .map(|i| {
                        summaries.get(i).copied().ok_or_else(|| {
                            TkgError::Contract(format!("missing summary for entity {i}"))
                        })
                    })
                    .collect()
            };

            let ctx_nodes = gather(temporal_summaries)?;
            let ctx = tape.mean_many(&ctx_nodes);
            let prev = self.dyn_or_zero(tape, &state.rel_temporal, r, dt);
            let next = self
                .rnn_temporal_relation
                .step(tape, &self.params, ctx, prev);
            state.rel_temporal.insert(r, next);

            let ctx_nodes = gather(structural_summaries)?;
            let ctx = tape.mean_many(&ctx_nodes);
            let prev = self.dyn_or_zero(tape, &state.rel_structural, r, ds);
            let next = self
                .rnn_structural_relation
                .step(tape, &self.params, ctx, prev);
            state.rel_structural.insert(r, next);
        }
        Ok(())
    }

    /// Full per-tick state transition: encode, update entity and relation
    /// states, extend the seen set, and record the snapshot in the tracker.
    pub fn propagate(
        &self,
        tape: &mut Tape,
        state: &mut DynamicState,
        tracker: &mut HistoryTracker,
        snapshot: &Snapshot,
        dropout: Option<&mut Dropout>,
    ) -> Result<()> {
        let (temporal, structural) =
            self.encode_snapshot(tape, tracker, snapshot, dropout)?;
        self.update_entity_states(tape, state, snapshot, &temporal, &structural)?;
        self.update_relation_states(tape, state, snapshot, &temporal, &structural)?;
        state.seen_entities.extend(snapshot.incident_entities());
        tracker.observe(snapshot)?;
        Ok(())
    }

    /// Scores every candidate object for a `(s, r)` query at `tick`:
    /// log p(o'|s,r) plus, when enabled, the candidate's own time density.
    pub fn score_objects(
        &self,
        tape: &mut Tape,
        state: &DynamicState,
        tracker: &HistoryTracker,
        subject: usize,
        relation: usize,
        tick: u64,
        use_time_score: bool,
    ) -> Result<Vec<f64>> {
        let summary = self.graph_summary(tape, state);
        let ctx = self.structure_context(tape, state, summary, subject, relation);
        let logits = self
            .structure_head
            .object_logits(tape, &self.params, &ctx, None);
        let lsm = tape.log_softmax(logits);
        let mut scores = tape.value(lsm).to_vec();
        if use_time_score {
            for cand in 0..self.num_entities {
                let probe = crate::store::Quadruple {
                    subject,
                    relation,
                    object: cand,
                    tick,
                };
                let times = tracker.inter_event_times(&probe)?;
                if times.tau_eo.is_none() && times.tau_min.is_none() {
                    continue;
                }
                let alpha = self.cfg.alpha;
                let eo = if alpha > 0.0 {
                    times.tau_eo.map(|t| {
                        (self.mixture_for(tape, state, subject, relation, cand, Branch::Eo), t)
                    })
                } else {
                    None
                };
                let min = if alpha < 1.0 || eo.is_none() {
                    times.tau_min.map(|t| {
                        (self.mixture_for(tape, state, subject, relation, cand, Branch::Min), t)
                    })
                } else {
                    None
                };
                let ld = crate::time_head::combined_log_density(
                    eo.as_ref().map(|(p, t)| (p, *t)),
                    min.as_ref().map(|(p, t)| (p, *t)),
                    alpha,
                )?;
                if let Some(v) = ld {
                    scores[cand] += v;
                }
            }
        }
        Ok(scores)
    }
}
