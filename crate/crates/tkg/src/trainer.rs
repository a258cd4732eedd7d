//! Chronological training sweep: per-tick joint loss, truncated
//! backpropagation, two-phase loss schedule, early stopping.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Task;
use crate::error::{Result, TkgError};
use crate::eval;
use crate::model::{DynamicState, Model};
use crate::nn::Dropout;
use crate::optim::{Adam, AdamConfig};
use crate::store::{HistoryTracker, TemporalKG};
use crate::tape::Tape;

/// One epoch's loss components (sums over events, plus per-event means).
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: usize,
    pub loss_time_sum: f64,
    pub loss_triple_sum: f64,
    pub events: usize,
    pub time_events: usize,
    pub skipped_time: usize,
    pub optimizer_steps: usize,
    pub seconds: f64,
}

impl EpochStats {
    /// Weighted per-event loss: (λ₁·ΣL_iet + λ₂·ΣL_triple) / events.
    pub fn mean_loss(&self, lambda1: f64, lambda2: f64) -> f64 {
        if self.events == 0 {
            return 0.0;
        }
        (lambda1 * self.loss_time_sum + lambda2 * self.loss_triple_sum) / self.events as f64
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub validation: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

/// Called after each epoch with the stats and validation metric; used for
/// the line-delimited training log.
pub type EpochSink<'a> = &'a mut dyn FnMut(&EpochStats, f64);

struct EpochRun {
    lambda1: f64,
    lambda2: f64,
    epoch: usize,
    phase: usize,
}

fn run_epoch(
    model: &mut Model,
    train: &TemporalKG,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    run: &EpochRun,
) -> Result<EpochStats> {
    let started = Instant::now();
    let snapshots = train.snapshots();
    let mut tape = Tape::new();
    let mut state = DynamicState::new();
    let mut tracker = HistoryTracker::new();
    let mut pending: Vec<crate::tape::NodeId> = Vec::new();
    let mut stats = EpochStats {
        epoch: run.epoch,
        phase: run.phase,
        loss_time_sum: 0.0,
        loss_triple_sum: 0.0,
        events: 0,
        time_events: 0,
        skipped_time: 0,
        optimizer_steps: 0,
        seconds: 0.0,
    };
    let use_dropout = model.cfg.dropout > 0.0;
    let mut ticks_since_cut = 0usize;

    for (idx, snap) in snapshots.iter().enumerate() {
        if idx > 0 {
            let mut dropout = Dropout { rate: model.cfg.dropout, rng };
            let losses = model.tick_losses(
                &mut tape,
                &state,
                &tracker,
                snap,
                if use_dropout { Some(&mut dropout) } else { None },
                run.lambda1 > 0.0,
            )?;
            let time_sum: f64 = losses.iet.iter().map(|&n| tape.value(n)[0]).sum();
            let triple_sum: f64 = losses.triple.iter().map(|&n| tape.value(n)[0]).sum();
            if !time_sum.is_finite() || !triple_sum.is_finite() {
                return Err(TkgError::Numerical(format!(
                    "non-finite loss at tick {}",
                    snap.tick
                )));
            }
            stats.loss_time_sum += time_sum;
            stats.loss_triple_sum += triple_sum;
            stats.events += snap.events.len();
            stats.time_events += losses.iet.len();
            stats.skipped_time += losses.skipped_time;

            let mut terms = Vec::new();
            if run.lambda1 > 0.0 && !losses.iet.is_empty() {
                let s = tape.sum_many(&losses.iet);
                terms.push(tape.scale(s, run.lambda1));
            }
            if run.lambda2 > 0.0 && !losses.triple.is_empty() {
                let s = tape.sum_many(&losses.triple);
                terms.push(tape.scale(s, run.lambda2));
            }
            if !terms.is_empty() {
                let tick_loss = if terms.len() == 1 {
                    terms[0]
                } else {
                    tape.sum_many(&terms)
                };
                if model.cfg.optimize_every_tick {
                    let grads = tape.backward(tick_loss, &model.params)?;
                    opt.step(&mut model.params, &mut { grads });
                    stats.optimizer_steps += 1;
                } else {
                    pending.push(tick_loss);
                }
            }
            ticks_since_cut += 1;
            if ticks_since_cut >= model.cfg.truncation {
                if !pending.is_empty() {
                    let total = tape.sum_many(&pending);
                    let grads = tape.backward(total, &model.params)?;
                    opt.step(&mut model.params, &mut { grads });
                    stats.optimizer_steps += 1;
                    pending.clear();
                }
                let mut fresh = Tape::new();
                state = state.detach(&tape, &mut fresh);
                tape = fresh;
                ticks_since_cut = 0;
            }
        }
        let mut dropout = Dropout { rate: model.cfg.dropout, rng };
        model.propagate(
            &mut tape,
            &mut state,
            &mut tracker,
            snap,
            if use_dropout { Some(&mut dropout) } else { None },
        )?;
    }
    if !pending.is_empty() {
        let total = tape.sum_many(&pending);
        let grads = tape.backward(total, &model.params)?;
        opt.step(&mut model.params, &mut { grads });
        stats.optimizer_steps += 1;
    }
    stats.seconds = started.elapsed().as_secs_f64();
    Ok(stats)
}

/// One training epoch over `train` with the configured λ weights.
/// States and tracker start from zero; truncation severs gradient lineage
/// every `b` ticks while retaining state values.
pub fn train_epoch(
    model: &mut Model,
    train: &TemporalKG,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats> {
    let (l1, l2) = (model.cfg.lambda1, model.cfg.lambda2);
    run_epoch(
        model,
        train,
        opt,
        rng,
        &EpochRun {
            lambda1: l1,
            lambda2: l2,
            epoch,
            phase: 0,
        },
    )
}

/// Validation metric after an epoch: link MRR (higher is better) or mean
/// time NLL (negated so that higher is better uniformly).
fn validation_metric(model: &Model, train: &TemporalKG, valid: &TemporalKG) -> Result<f64> {
    match model.cfg.task {
        Task::Links => {
            let report = eval::evaluate_links(model, train, valid)?;
            Ok(report.mrr)
        }
        Task::Time => Ok(-eval::mean_time_nll(model, train, valid)?),
    }
}

/// Full fit: optional structure-only phase 1 (λ₁ = 0) followed by the
/// joint phase, each with early stopping on the validation metric.
/// Returns the report; the model is left holding the best parameters.
pub fn fit(
    model: &mut Model,
    train: &TemporalKG,
    valid: &TemporalKG,
    sink: Option<EpochSink>,
) -> Result<TrainReport> {
    if train.quadruples().is_empty() {
        return Err(TkgError::Validation("empty training set".into()));
    }
    let cfg = model.cfg.clone();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        model.params.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261696e));
    let mut report = TrainReport {
        epochs: Vec::new(),
        validation: Vec::new(),
        best_epoch: None,
        best_metric: None,
    };
    let mut best_params: Option<crate::tape::ParamStore> = None;
    let mut sink = sink;

    let phases: Vec<(usize, f64, f64)> = if cfg.two_phase {
        vec![(1, 0.0, cfg.lambda2.max(1.0)), (2, cfg.lambda1, cfg.lambda2)]
    } else {
        vec![(1, cfg.lambda1, cfg.lambda2)]
    };

    let mut epoch = 0usize;
    'phases: for (phase, l1, l2) in phases {
        let mut phase_best: Option<f64> = None;
        let mut since_improved = 0usize;
        loop {
            if epoch >= cfg.max_epochs {
                break 'phases;
            }
            epoch += 1;
            let stats = run_epoch(
                model,
                train,
                &mut opt,
                &mut rng,
                &EpochRun {
                    lambda1: l1,
                    lambda2: l2,
                    epoch,
                    phase,
                },
            )?;
            let metric = validation_metric(model, train, valid)?;
            if let Some(s) = sink.as_deref_mut() {
                s(&stats, metric);
            }
            report.epochs.push(stats);
            report.validation.push(metric);
            // Ties prefer the later epoch: with the metric saturated the
            // training loss is still falling.
            if report.best_metric.map_or(true, |b| metric >= b) {
                report.best_metric = Some(metric);
                report.best_epoch = Some(epoch);
                best_params = Some(model.params.clone());
            }
            if phase_best.map_or(true, |b| metric > b) {
                phase_best = Some(metric);
                since_improved = 0;
            } else {
                since_improved += 1;
                if since_improved >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::store::Quadruple;

    fn q(s: usize, r: usize, o: usize, t: u64) -> Quadruple {
        Quadruple {
            subject: s,
            relation: r,
            object: o,
            tick: t,
        }
    }

    fn toy_kg(ticks: u64) -> TemporalKG {
        let mut quads = Vec::new();
        for t in 0..ticks {
            quads.push(q(0, 0, 1, t));
            quads.push(q(1, 1, 2, t));
        }
        TemporalKG::new(quads, 3, 2, 1.0).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            temporal_dim: 4,
            structural_dim: 4,
            layers: 1,
            mixture_components: 2,
            blocks: 2,
            truncation: 2,
            dropout: 0.0,
            max_epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn single_snapshot_takes_no_optimizer_steps() {
        let kg = toy_kg(1);
        let mut model = Model::new(small_cfg(), 3, 2).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), model.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = train_epoch(&mut model, &kg, &mut opt, &mut rng, 1).unwrap();
        assert_eq!(stats.optimizer_steps, 0);
        assert_eq!(stats.events, 0);
    }

    #[test]
    fn lambda1_zero_leaves_time_head_bits_unchanged() {
        let kg = toy_kg(5);
        let mut cfg = small_cfg();
        cfg.lambda1 = 0.0;
        let mut model = Model::new(cfg, 3, 2).unwrap();
        let time_param_ids: Vec<_> = model.time_head.param_ids();
        let before: Vec<_> = time_param_ids
            .iter()
            .map(|&p| model.params.get(p).clone())
            .collect();
        let mut opt = Adam::new(AdamConfig::default(), model.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = train_epoch(&mut model, &kg, &mut opt, &mut rng, 1).unwrap();
        assert!(stats.optimizer_steps > 0);
        for (p, b) in time_param_ids.iter().zip(&before) {
            assert_eq!(model.params.get(*p), b, "time-head param drifted");
        }
        // Other parameters did move.
        let moved = model
            .params
            .iter()
            .any(|(pid, _, arr)| !time_param_ids.contains(&pid) && {
                let probe = Model::new(model.cfg.clone(), 3, 2).unwrap();
                probe.params.get(pid) != arr
            });
        assert!(moved);
    }

    #[test]
    fn truncation_changes_gradients_not_forward_values() {
        // First epoch loss values agree between b=1 and a huge b, because
        // truncation only severs lineage.
        let kg = toy_kg(4);
        let mut stats = Vec::new();
        for b in [1usize, 1000] {
            let mut cfg = small_cfg();
            cfg.truncation = b;
            cfg.learning_rate = 0.0; // freeze params so values stay comparable
            let mut model = Model::new(cfg, 3, 2).unwrap();
            let mut opt = Adam::new(
                AdamConfig {
                    lr: 0.0,
                    weight_decay: 0.0,
                    ..Default::default()
                },
                model.params.len(),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = train_epoch(&mut model, &kg, &mut opt, &mut rng, 1).unwrap();
            stats.push((s.loss_time_sum, s.loss_triple_sum));
        }
        assert!((stats[0].0 - stats[1].0).abs() < 1e-6);
        assert!((stats[0].1 - stats[1].1).abs() < 1e-6);
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let kg = toy_kg(8);
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.01;
        let mut model = Model::new(cfg, 3, 2).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            model.params.len(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = train_epoch(&mut model, &kg, &mut opt, &mut rng, 1).unwrap();
        let mut last = None;
        for e in 2..=15 {
            last = Some(train_epoch(&mut model, &kg, &mut opt, &mut rng, e).unwrap());
        }
        let l0 = first.mean_loss(1.0, 1.0);
        let l1 = last.unwrap().mean_loss(1.0, 1.0);
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }

    #[test]
    fn fit_zero_epochs_returns_empty_report() {
        let kg = toy_kg(4);
        let mut cfg = small_cfg();
        cfg.max_epochs = 0;
        let mut model = Model::new(cfg, 3, 2).unwrap();
        let valid = toy_kg(2);
        let report = fit(&mut model, &kg, &valid, None).unwrap();
        assert!(report.epochs.is_empty());
        assert!(report.best_epoch.is_none());
    }

    #[test]
    fn fit_rejects_empty_training_set() {
        let kg = TemporalKG::new(vec![], 3, 2, 1.0).unwrap();
        let mut model = Model::new(small_cfg(), 3, 2).unwrap();
        let valid = toy_kg(1);
        assert!(matches!(
            fit(&mut model, &kg, &valid, None),
            Err(TkgError::Validation(_))
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let kg = toy_kg(6);
        let valid = TemporalKG::new(
            vec![q(0, 0, 1, 6), q(1, 1, 2, 6), q(0, 0, 1, 7)],
            3,
            2,
            1.0,
        )
        .unwrap();
        let run = || {
            let mut cfg = small_cfg();
            cfg.max_epochs = 3;
            cfg.dropout = 0.2;
            let mut model = Model::new(cfg, 3, 2).unwrap();
            fit(&mut model, &kg, &valid, None).unwrap();
            serde_json::to_string(&model.params.export()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
