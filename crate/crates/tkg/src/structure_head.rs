//! Factorized conditional probability of an event triple:
//! `p(s,r,o | history) = p(o|s,r) * p(r|s) * p(s)`, each factor a softmax
//! over its full candidate set.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TkgError};
use crate::nn::{Dropout, Mlp2};
use crate::tape::{NodeId, ParamStore, Tape};

/// Three classifier networks over concatenations of structural state and
/// the graph summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StructureHead {
    /// `[s_bar_s || s_bar_r || g_bar] -> |E|` logits.
    pub f_object: Mlp2,
    /// `[s_bar_s || g_bar] -> |R|` logits.
    pub f_relation: Mlp2,
    /// `[g_bar] -> |E|` logits.
    pub f_subject: Mlp2,
    pub num_entities: usize,
    pub num_relations: usize,
}

/// Inputs to the head for one conditioning context.
#[derive(Debug, Clone, Copy)]
pub struct StructureContext {
    /// Concatenated dynamic+static structural embedding of the subject.
    pub subject_state: NodeId,
    /// Concatenated dynamic+static structural embedding of the relation.
    pub relation_state: NodeId,
    /// Graph summary (element-wise max over seen entities).
    pub summary: NodeId,
}

/// The three log-probability terms of one ground-truth triple.
#[derive(Debug, Clone, Copy)]
pub struct TripleLogProb {
    pub object: NodeId,
    pub relation: NodeId,
    pub subject: NodeId,
}

impl StructureHead {
    /// `d_state` is the concatenated (dynamic + static) structural width.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_state: usize,
        num_entities: usize,
        num_relations: usize,
    ) -> Self {
        let d_obj_in = 3 * d_state;
        let d_rel_in = 2 * d_state;
        let d_sub_in = d_state;
        Self {
            f_object: Mlp2::new(store, rng, "struct.obj", d_obj_in, d_obj_in, num_entities),
            f_relation: Mlp2::new(store, rng, "struct.rel", d_rel_in, d_rel_in, num_relations),
            f_subject: Mlp2::new(store, rng, "struct.subj", d_sub_in, d_sub_in, num_entities),
            num_entities,
            num_relations,
        }
    }

    /// Raw logits over candidate objects for a `(s, r)` context.
    pub fn object_logits(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        ctx: &StructureContext,
        dropout: Option<&mut Dropout>,
    ) -> NodeId {
        let input = tape.concat(&[ctx.subject_state, ctx.relation_state, ctx.summary]);
        self.f_object.apply(tape, params, input, dropout)
    }

    /// Log-softmax terms of the three factors at the ground-truth indices.
    pub fn triple_logprob(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        ctx: &StructureContext,
        subject: usize,
        relation: usize,
        object: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<TripleLogProb> {
        if subject >= self.num_entities || object >= self.num_entities {
            return Err(TkgError::Validation(format!(
                "entity id out of range ({subject} or {object} >= {})",
                self.num_entities
            )));
        }
        if relation >= self.num_relations {
            return Err(TkgError::Validation(format!(
                "relation id {relation} out of range (>= {})",
                self.num_relations
            )));
        }
        let obj_logits = self.object_logits(tape, params, ctx, dropout.as_deref_mut());
        let obj_lsm = tape.log_softmax(obj_logits);
        let obj = tape.index(obj_lsm, object);

        let rel_input = tape.concat(&[ctx.subject_state, ctx.summary]);
        let rel_logits = self
            .f_relation
            .apply(tape, params, rel_input, dropout.as_deref_mut());
        let rel_lsm = tape.log_softmax(rel_logits);
        let rel = tape.index(rel_lsm, relation);

        let sub_logits = self
            .f_subject
            .apply(tape, params, ctx.summary, dropout.as_deref_mut());
        let sub_lsm = tape.log_softmax(sub_logits);
        let sub = tape.index(sub_lsm, subject);

        Ok(TripleLogProb {
            object: obj,
            relation: rel,
            subject: sub,
        })
    }

    /// `L_triple = -(log p(o|s,r) + log p(r|s) + log p(s))`.
    pub fn nll_triple(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        ctx: &StructureContext,
        subject: usize,
        relation: usize,
        object: usize,
        dropout: Option<&mut Dropout>,
    ) -> Result<NodeId> {
        let lp = self.triple_logprob(tape, params, ctx, subject, relation, object, dropout)?;
        let sum = tape.sum_many(&[lp.object, lp.relation, lp.subject]);
        Ok(tape.scale(sum, -1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_grads;
    use ndarray::Array1;
    use rand::SeedableRng;

    fn fixture(d: usize, ne: usize, nr: usize, seed: u64) -> (ParamStore, StructureHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = StructureHead::new(&mut store, &mut rng, d, ne, nr);
        (store, head)
    }

    fn ctx_nodes(tape: &mut Tape, d: usize, scale: f64) -> StructureContext {
        StructureContext {
            subject_state: tape.constant(Array1::from_shape_fn(d, |i| (i as f64 * 0.3).sin() * scale)),
            relation_state: tape.constant(Array1::from_shape_fn(d, |i| (i as f64 * 0.7).cos() * scale)),
            summary: tape.constant(Array1::from_shape_fn(d, |i| (i as f64 * 0.5).sin() * scale)),
        }
    }

    #[test]
    fn singleton_sets_give_zero_logprob() {
        let (store, head) = fixture(4, 1, 1, 1);
        let mut tape = Tape::new();
        let ctx = ctx_nodes(&mut tape, 4, 1.0);
        let lp = head
            .triple_logprob(&mut tape, &store, &ctx, 0, 0, 0, None)
            .unwrap();
        assert_eq!(tape.scalar(lp.object), 0.0);
        assert_eq!(tape.scalar(lp.relation), 0.0);
        assert_eq!(tape.scalar(lp.subject), 0.0);
        let nll = head
            .nll_triple(&mut tape, &store, &ctx, 0, 0, 0, None)
            .unwrap();
        assert_eq!(tape.scalar(nll), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_counts() {
        let (mut store, head) = fixture(4, 6, 3, 2);
        for net in [&head.f_object, &head.f_relation, &head.f_subject] {
            store.get_mut(net.l2.w).fill(0.0);
            store.get_mut(net.l2.b).fill(0.0);
        }
        let mut tape = Tape::new();
        let ctx = ctx_nodes(&mut tape, 4, 1.0);
        let nll = head
            .nll_triple(&mut tape, &store, &ctx, 1, 2, 3, None)
            .unwrap();
        let want = 2.0 * 6f64.ln() + 3f64.ln();
        assert!((tape.scalar(nll) - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let (store, head) = fixture(4, 3, 2, 3);
        let mut tape = Tape::new();
        let ctx = ctx_nodes(&mut tape, 4, 1.0);
        assert!(head
            .triple_logprob(&mut tape, &store, &ctx, 3, 0, 0, None)
            .is_err());
        assert!(head
            .triple_logprob(&mut tape, &store, &ctx, 0, 2, 0, None)
            .is_err());
    }

    #[test]
    fn terms_are_nonpositive_and_factors_normalize() {
        let (store, head) = fixture(4, 5, 3, 4);
        let mut tape = Tape::new();
        let ctx = ctx_nodes(&mut tape, 4, 0.8);
        let lp = head
            .triple_logprob(&mut tape, &store, &ctx, 2, 1, 4, None)
            .unwrap();
        for term in [lp.object, lp.relation, lp.subject] {
            assert!(tape.scalar(term) <= 0.0);
        }
        // exp of each factor over its candidate set sums to 1.
        let logits = head.object_logits(&mut tape, &store, &ctx, None);
        let lsm = tape.log_softmax(logits);
        let total: f64 = tape.value(lsm).mapv(f64::exp).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    /// Full enumeration oracle: summing exp(sum of the three terms) over all
    /// (s, r, o) must give 1. The subject/relation factors are conditioned
    /// on the subject's state, so enumeration varies the context accordingly.
    #[test]
    fn joint_normalizes_by_enumeration() {
        let (store, head) = fixture(4, 3, 2, 5);
        // Fixed per-entity and per-relation states.
        let ent_states: Vec<Array1<f64>> = (0..3)
            .map(|i| Array1::from_shape_fn(4, |k| ((i * 4 + k) as f64 * 0.37).sin()))
            .collect();
        let rel_states: Vec<Array1<f64>> = (0..2)
            .map(|r| Array1::from_shape_fn(4, |k| ((r * 4 + k) as f64 * 0.61).cos()))
            .collect();
        let summary = Array1::from_shape_fn(4, |k| 0.2 * k as f64);
        let mut total = 0.0;
        for s in 0..3 {
            for r in 0..2 {
                for o in 0..3 {
                    let mut tape = Tape::new();
                    let ctx = StructureContext {
                        subject_state: tape.constant(ent_states[s].clone()),
                        relation_state: tape.constant(rel_states[r].clone()),
                        summary: tape.constant(summary.clone()),
                    };
                    let lp = head
                        .triple_logprob(&mut tape, &store, &ctx, s, r, o, None)
                        .unwrap();
                    total += (tape.scalar(lp.object)
                        + tape.scalar(lp.relation)
                        + tape.scalar(lp.subject))
                    .exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "joint mass {total}");
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let (store, head) = fixture(3, 3, 2, 6);
        let f = |p: &ParamStore, tape: &mut Tape| {
            let ctx = StructureContext {
                subject_state: tape.constant(Array1::from_shape_fn(3, |i| 0.4 * i as f64 - 0.3)),
                relation_state: tape.constant(Array1::from_shape_fn(3, |i| 0.2 * i as f64 + 0.1)),
                summary: tape.constant(Array1::from_shape_fn(3, |i| 0.5 - 0.2 * i as f64)),
            };
            head.nll_triple(tape, p, &ctx, 1, 0, 2, None).unwrap()
        };
        let report = check_param_grads(&store, f, 1e-4);
        assert!(report.max_rel_err < 1e-4, "{:?}", report.worst);
    }
}
