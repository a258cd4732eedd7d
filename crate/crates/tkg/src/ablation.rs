//! One-factor-at-a-time sensitivity grids (embedding size, encoder depth,
//! mixture components, truncation window) on the synthetic dataset, with a
//! relative-performance table.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::Model;
use crate::synthetic;
use crate::trainer;

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationResult {
    pub group: String,
    pub setting: String,
    /// Validation MRR after the short fit.
    pub metric: f64,
}

fn base_config(max_epochs: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        temporal_dim: 16,
        structural_dim: 16,
        layers: 1,
        mixture_components: 16,
        blocks: 2,
        truncation: 10,
        dropout: 0.0,
        max_epochs,
        two_phase: false,
        seed,
        ..Default::default()
    }
}

/// The grids, desk-scaled: embedding {16,32,64}, layers {1,2,3},
/// mixture components {16,64,128,256}, truncation {5,10,20,40}.
pub fn grid(max_epochs: usize, seed: u64) -> Vec<(String, String, ModelConfig)> {
    let mut runs = Vec::new();
    for d in [16usize, 32, 64] {
        let mut cfg = base_config(max_epochs, seed);
        cfg.temporal_dim = d;
        cfg.structural_dim = d;
        runs.push(("embedding".to_string(), d.to_string(), cfg));
    }
    for l in [1usize, 2, 3] {
        let mut cfg = base_config(max_epochs, seed);
        cfg.layers = l;
        runs.push(("layers".to_string(), l.to_string(), cfg));
    }
    for k in [16usize, 64, 128, 256] {
        let mut cfg = base_config(max_epochs, seed);
        cfg.mixture_components = k;
        runs.push(("mixture".to_string(), k.to_string(), cfg));
    }
    for b in [5usize, 10, 20, 40] {
        let mut cfg = base_config(max_epochs, seed);
        cfg.truncation = b;
        runs.push(("truncation".to_string(), b.to_string(), cfg));
    }
    runs
}

/// Runs every grid cell on the synthetic TKG; any numerical failure in any
/// cell aborts the harness with that cell's error.
pub fn run(max_epochs: usize, seed: u64) -> Result<Vec<AblationResult>> {
    let (train, valid, _) = synthetic::period3_splits();
    let mut out = Vec::new();
    for (group, setting, cfg) in grid(max_epochs, seed) {
        let mut model = Model::new(cfg, synthetic::NUM_ENTITIES, synthetic::NUM_RELATIONS)?;
        let report = trainer::fit(&mut model, &train, &valid, None)?;
        let metric = report.best_metric.unwrap_or(0.0);
        out.push(AblationResult {
            group,
            setting,
            metric,
        });
    }
    Ok(out)
}

/// Renders results as a table of performance relative to each group's best.
pub fn relative_table(results: &[AblationResult]) -> String {
    let mut out = String::from("group\tsetting\tmetric\trelative\n");
    let mut groups: Vec<&str> = results.iter().map(|r| r.group.as_str()).collect();
    groups.dedup();
    for group in groups {
        let rows: Vec<&AblationResult> =
            results.iter().filter(|r| r.group == group).collect();
        let best = rows
            .iter()
            .map(|r| r.metric)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rows {
            let rel = if best > 0.0 { r.metric / best } else { 0.0 };
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.4}\n",
                r.group, r.setting, r.metric, rel
            ));
        }
    }
    out
}
