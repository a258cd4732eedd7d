//! Deterministic synthetic temporal KG used by the overfit and ablation
//! harnesses: 10 entities, 2 relations, 60 ticks, events a fixed function
//! of `tick mod 3`.
//!
//! Event schedule (subject, relation, object — each pair exclusive to one
//! event type so pair and entity histories coincide):
//!   (0, 0, 1)  phase 0 only        → inter-event time 3
//!   (2, 0, 3)  phase 1 only        → inter-event time 3
//!   (4, 1, 5)  phase 2 only        → inter-event time 3
//!   (6, 0, 7)  every phase         → inter-event time 1
//!   (8, 1, 9)  phases 0 and 1      → inter-event times alternate 2, 1
//! The mix of periods gives the global-mean baseline an irreducible error
//! while each event type's timing stays individually predictable.

use crate::store::{Quadruple, TemporalKG};

pub const NUM_ENTITIES: usize = 10;
pub const NUM_RELATIONS: usize = 2;
pub const NUM_TICKS: u64 = 60;

/// Events of one tick as a function of `tick mod 3`.
pub fn events_at(tick: u64) -> Vec<Quadruple> {
    let q = |s: usize, r: usize, o: usize| Quadruple {
        subject: s,
        relation: r,
        object: o,
        tick,
    };
    let mut events = vec![q(6, 0, 7)];
    match tick % 3 {
        0 => {
            events.push(q(0, 0, 1));
            events.push(q(8, 1, 9));
        }
        1 => {
            events.push(q(2, 0, 3));
            events.push(q(8, 1, 9));
        }
        _ => {
            events.push(q(4, 1, 5));
        }
    }
    events
}

pub fn period3_kg() -> TemporalKG {
    let quads: Vec<Quadruple> = (0..NUM_TICKS).flat_map(events_at).collect();
    TemporalKG::new(quads, NUM_ENTITIES, NUM_RELATIONS, 1.0)
        .expect("synthetic schedule is valid by construction")
}

/// Chronological train/valid/test split at ticks 48 and 54.
pub fn period3_splits() -> (TemporalKG, TemporalKG, TemporalKG) {
    period3_kg()
        .chronological_split(48, 54)
        .expect("split bounds are within range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_periodic() {
        let a = period3_kg();
        let b = period3_kg();
        assert_eq!(a.quadruples(), b.quadruples());
        for t in 0..NUM_TICKS - 3 {
            let now = events_at(t);
            let later = events_at(t + 3);
            assert_eq!(now.len(), later.len());
            for (x, y) in now.iter().zip(&later) {
                assert_eq!((x.subject, x.relation, x.object), (y.subject, y.relation, y.object));
                assert_eq!(y.tick, x.tick + 3);
            }
        }
    }

    #[test]
    fn covers_all_entities_and_relations() {
        let kg = period3_kg();
        let mut ents = std::collections::BTreeSet::new();
        let mut rels = std::collections::BTreeSet::new();
        for q in kg.quadruples() {
            ents.insert(q.subject);
            ents.insert(q.object);
            rels.insert(q.relation);
        }
        assert_eq!(ents.len(), NUM_ENTITIES);
        assert_eq!(rels.len(), NUM_RELATIONS);
    }

    #[test]
    fn subject_relation_determines_object() {
        let kg = period3_kg();
        let mut map = std::collections::BTreeMap::new();
        for q in kg.quadruples() {
            let prev = map.insert((q.subject, q.relation), q.object);
            if let Some(o) = prev {
                assert_eq!(o, q.object);
            }
        }
    }

    #[test]
    fn splits_are_chronological_and_nonempty() {
        let (train, valid, test) = period3_splits();
        assert!(!train.quadruples().is_empty());
        assert!(!valid.quadruples().is_empty());
        assert!(!test.quadruples().is_empty());
        let last_train = train.quadruples().last().unwrap().tick;
        let first_valid = valid.quadruples().first().unwrap().tick;
        let last_valid = valid.quadruples().last().unwrap().tick;
        let first_test = test.quadruples().first().unwrap().tick;
        assert!(last_train < first_valid);
        assert!(last_valid < first_test);
    }
}
