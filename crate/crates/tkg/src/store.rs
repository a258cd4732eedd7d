//! Temporal knowledge graph storage: loading, splitting, snapshot iteration,
//! and per-entity / per-pair interaction history.
//!
//! Timestamps are normalized to integer ticks (raw time divided by the
//! dataset granularity) at load time, so the minimum positive inter-event
//! time is exactly one tick.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, TkgError};

/// One timestamped event `(s, r, o, t)` with `t` in ticks.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub tick: u64,
}

/// All events sharing one tick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub tick: u64,
    pub events: Vec<Quadruple>,
}

impl Snapshot {
    /// Deduplicated, sorted list of entities incident to this snapshot.
    pub fn incident_entities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .events
            .iter()
            .flat_map(|q| [q.subject, q.object])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Deduplicated, sorted list of relations present in this snapshot.
    pub fn present_relations(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.events.iter().map(|q| q.relation).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// An ordered sequence of quadruples with entity/relation counts and the
/// time granularity used to normalize raw timestamps to ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKG {
    quadruples: Vec<Quadruple>,
    pub num_entities: usize,
    pub num_relations: usize,
    /// Hours represented by one tick; used only when reporting MAE in hours.
    pub tick_hours: f64,
}

impl TemporalKG {
    /// Builds a graph from quadruples, sorting stably by tick and validating
    /// ids and the no-exact-duplicate invariant.
    pub fn new(
        mut quadruples: Vec<Quadruple>,
        num_entities: usize,
        num_relations: usize,
        tick_hours: f64,
    ) -> Result<Self> {
        for q in &quadruples {
            if q.subject >= num_entities || q.object >= num_entities {
                return Err(TkgError::Validation(format!(
                    "entity id out of range in ({}, {}, {}, {}): num_entities = {}",
                    q.subject, q.relation, q.object, q.tick, num_entities
                )));
            }
            if q.relation >= num_relations {
                return Err(TkgError::Validation(format!(
                    "relation id {} out of range: num_relations = {}",
                    q.relation, num_relations
                )));
            }
        }
        quadruples.sort_by_key(|q| q.tick);
        let mut seen = std::collections::HashSet::with_capacity(quadruples.len());
        for q in &quadruples {
            if !seen.insert(*q) {
                return Err(TkgError::Validation(format!(
                    "duplicate quadruple ({}, {}, {}, {})",
                    q.subject, q.relation, q.object, q.tick
                )));
            }
        }
        Ok(Self {
            quadruples,
            num_entities,
            num_relations,
            tick_hours,
        })
    }

    pub fn quadruples(&self) -> &[Quadruple] {
        &self.quadruples
    }

    pub fn len(&self) -> usize {
        self.quadruples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quadruples.is_empty()
    }

    pub fn first_tick(&self) -> Option<u64> {
        self.quadruples.first().map(|q| q.tick)
    }

    pub fn last_tick(&self) -> Option<u64> {
        self.quadruples.last().map(|q| q.tick)
    }

    /// Groups quadruples by tick; ticks with no events are skipped and the
    /// returned ticks are strictly increasing.
    pub fn snapshots(&self) -> Vec<Snapshot> {
        let mut out: Vec<Snapshot> = Vec::new();
        for q in &self.quadruples {
            match out.last_mut() {
                Some(s) if s.tick == q.tick => s.events.push(*q),
                _ => out.push(Snapshot {
                    tick: q.tick,
                    events: vec![*q],
                }),
            }
        }
        out
    }

    /// Splits into train (< b1), valid ([b1, b2)), and test (>= b2).
    /// Empty splits are legal.
    pub fn chronological_split(&self, b1: u64, b2: u64) -> Result<(Self, Self, Self)> {
        if b1 > b2 {
            return Err(TkgError::Validation(format!(
                "split boundaries out of order: {} > {}",
                b1, b2
            )));
        }
        let part = |pred: &dyn Fn(u64) -> bool| Self {
            quadruples: self
                .quadruples
                .iter()
                .copied()
                .filter(|q| pred(q.tick))
                .collect(),
            num_entities: self.num_entities,
            num_relations: self.num_relations,
            tick_hours: self.tick_hours,
        };
        Ok((
            part(&|t| t < b1),
            part(&|t| t >= b1 && t < b2),
            part(&|t| t >= b2),
        ))
    }
}

/// Loads a tab-separated `s r o t` file (extra trailing columns ignored).
/// Raw timestamps are divided by `raw_per_tick` to obtain ticks. Entity and
/// relation counts are inferred as max id + 1 unless a `stat.txt` sidecar
/// (`num_entities<TAB>num_relations`) sits next to the file.
pub fn load_quadruple_file(
    path: &Path,
    raw_per_tick: u64,
    tick_hours: f64,
) -> Result<TemporalKG> {
    let text = fs::read_to_string(path).map_err(|e| TkgError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut quads = parse_quadruples(&text, raw_per_tick)?;
    let (mut num_entities, mut num_relations) = (0usize, 0usize);
    for q in &quads {
        num_entities = num_entities.max(q.subject + 1).max(q.object + 1);
        num_relations = num_relations.max(q.relation + 1);
    }
    if let Some((ne, nr)) = read_stat_sidecar(path)? {
        num_entities = ne;
        num_relations = nr;
    }
    quads.sort_by_key(|q| q.tick);
    TemporalKG::new(quads, num_entities, num_relations, tick_hours)
}

/// Parses quadruple lines without constructing a graph; useful for ingest.
pub fn parse_quadruples(text: &str, raw_per_tick: u64) -> Result<Vec<Quadruple>> {
    if raw_per_tick == 0 {
        return Err(TkgError::Validation("granularity must be positive".into()));
    }
    let mut quads = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(TkgError::Parse {
                line: lineno,
                msg: format!("expected at least 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_field = |name: &str, s: &str| -> Result<i64> {
            s.trim().parse::<i64>().map_err(|_| TkgError::Parse {
                line: lineno,
                msg: format!("non-integer {} field {:?}", name, s),
            })
        };
        let s = parse_field("subject", fields[0])?;
        let r = parse_field("relation", fields[1])?;
        let o = parse_field("object", fields[2])?;
        let t = parse_field("timestamp", fields[3])?;
        if s < 0 || r < 0 || o < 0 {
            return Err(TkgError::Validation(format!(
                "negative id at line {}",
                lineno
            )));
        }
        if t < 0 {
            return Err(TkgError::Validation(format!(
                "negative timestamp at line {}",
                lineno
            )));
        }
        quads.push(Quadruple {
            subject: s as usize,
            relation: r as usize,
            object: o as usize,
            tick: t as u64 / raw_per_tick,
        });
    }
    Ok(quads)
}

fn read_stat_sidecar(data_path: &Path) -> Result<Option<(usize, usize)>> {
    let sidecar = match data_path.parent() {
        Some(dir) => dir.join("stat.txt"),
        None => return Ok(None),
    };
    if !sidecar.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&sidecar).map_err(|e| TkgError::Io {
        path: sidecar.clone(),
        source: e,
    })?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(TkgError::Parse {
            line: 1,
            msg: "stat.txt must contain num_entities<TAB>num_relations".into(),
        });
    }
    let ne = fields[0].parse::<usize>().map_err(|_| TkgError::Parse {
        line: 1,
        msg: format!("non-integer entity count {:?} in stat.txt", fields[0]),
    })?;
    let nr = fields[1].parse::<usize>().map_err(|_| TkgError::Parse {
        line: 1,
        msg: format!("non-integer relation count {:?} in stat.txt", fields[1]),
    })?;
    Ok(Some((ne, nr)))
}

/// Unordered entity-pair key: `(min, max)`.
fn pair_key(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Last-interaction tables backing the inter-event-time definitions.
/// Pair keys are unordered: an event (s, r, o) updates the same record as
/// (o, r, s).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryTracker {
    last_pair_time: HashMap<(usize, usize), u64>,
    last_entity_time: HashMap<usize, u64>,
    start_tick: Option<u64>,
    latest_observed: Option<u64>,
}

/// Inter-event times of one query event, in ticks; `None` means no history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterEventTimes {
    /// Ticks since s and o last interacted with each other.
    pub tau_eo: Option<u64>,
    /// Ticks since the more recent of s's / o's last events.
    pub tau_min: Option<u64>,
}

impl HistoryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start_tick(&self) -> Option<u64> {
        self.start_tick
    }

    pub fn latest_observed(&self) -> Option<u64> {
        self.latest_observed
    }

    pub fn last_pair_time(&self, a: usize, b: usize) -> Option<u64> {
        self.last_pair_time.get(&pair_key(a, b)).copied()
    }

    pub fn last_entity_time(&self, i: usize) -> Option<u64> {
        self.last_entity_time.get(&i).copied()
    }

    /// Records all events of one snapshot. Snapshots must arrive in
    /// non-decreasing tick order.
    pub fn observe(&mut self, snapshot: &Snapshot) -> Result<()> {
        if snapshot.events.is_empty() {
            return Ok(());
        }
        if let Some(latest) = self.latest_observed {
            if snapshot.tick < latest {
                return Err(TkgError::Contract(format!(
                    "out-of-order snapshot: tick {} after {}",
                    snapshot.tick, latest
                )));
            }
        }
        for q in &snapshot.events {
            self.last_pair_time
                .insert(pair_key(q.subject, q.object), snapshot.tick);
            self.last_entity_time.insert(q.subject, snapshot.tick);
            self.last_entity_time.insert(q.object, snapshot.tick);
        }
        if self.start_tick.is_none() {
            self.start_tick = Some(snapshot.tick);
        }
        self.latest_observed = Some(snapshot.tick);
        Ok(())
    }

    /// Inter-event times for a query event. The tracker must hold only
    /// history strictly before the query tick.
    pub fn inter_event_times(&self, q: &Quadruple) -> Result<InterEventTimes> {
        if let Some(latest) = self.latest_observed {
            if latest >= q.tick {
                return Err(TkgError::Contract(format!(
                    "tracker observed tick {} but query is at tick {}",
                    latest, q.tick
                )));
            }
        }
        let tau_eo = self.last_pair_time(q.subject, q.object).map(|t| q.tick - t);
        let last_s = self.last_entity_time(q.subject);
        let last_o = self.last_entity_time(q.object);
        let tau_min = match (last_s, last_o) {
            (None, None) => None,
            (a, b) => Some(q.tick - a.into_iter().chain(b).max().unwrap()),
        };
        Ok(InterEventTimes { tau_eo, tau_min })
    }

    /// Serializes the tables as sorted entry lists (checkpoint support).
    pub fn to_entries(&self) -> TrackerEntries {
        let mut pairs: Vec<_> = self
            .last_pair_time
            .iter()
            .map(|(&(a, b), &t)| (a, b, t))
            .collect();
        pairs.sort_unstable();
        let mut entities: Vec<_> = self.last_entity_time.iter().map(|(&i, &t)| (i, t)).collect();
        entities.sort_unstable();
        TrackerEntries {
            pairs,
            entities,
            start_tick: self.start_tick,
            latest_observed: self.latest_observed,
        }
    }

    pub fn from_entries(entries: &TrackerEntries) -> Self {
        Self {
            last_pair_time: entries
                .pairs
                .iter()
                .map(|&(a, b, t)| ((a, b), t))
                .collect(),
            last_entity_time: entries.entities.iter().copied().collect(),
            start_tick: entries.start_tick,
            latest_observed: entries.latest_observed,
        }
    }
}

/// Flat, deterministic serialization form of a [`HistoryTracker`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrackerEntries {
    pub pairs: Vec<(usize, usize, u64)>,
    pub entities: Vec<(usize, u64)>,
    pub start_tick: Option<u64>,
    pub latest_observed: Option<u64>,
}
