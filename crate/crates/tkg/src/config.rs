//! Model and run configuration: every hyperparameter with its documented
//! default, plus a flat `key=value` config-file format.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, TkgError};

/// Which task drives validation metrics and default alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Links,
    Time,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "links" => Ok(Task::Links),
            "time" => Ok(Task::Time),
            other => Err(TkgError::Config(format!(
                "unknown task {other:?} (expected links|time)"
            ))),
        }
    }
}

/// All model and training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Temporal embedding size.
    pub temporal_dim: usize,
    /// Structural embedding size.
    pub structural_dim: usize,
    /// Number of relational aggregation layers.
    pub layers: usize,
    /// Number of mixture components.
    pub mixture_components: usize,
    /// Diagonal blocks in relation weight matrices.
    pub blocks: usize,
    /// Truncation interval in ticks.
    pub truncation: usize,
    /// Weight of the inter-event-time NLL.
    pub lambda1: f64,
    /// Weight of the triple NLL.
    pub lambda2: f64,
    /// Mixing weight between the pair (eo) and entity (min) densities.
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Early-stopping patience, in epochs without improvement.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Two-phase schedule: structure-only first, then the joint loss.
    pub two_phase: bool,
    /// Include the time-density term when ranking candidate objects.
    pub use_time_score: bool,
    /// Apply an optimizer step every tick instead of every `truncation` ticks.
    pub optimize_every_tick: bool,
    pub task: Task,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            temporal_dim: 200,
            structural_dim: 200,
            layers: 2,
            mixture_components: 128,
            blocks: 2,
            truncation: 20,
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 1.0,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            dropout: 0.2,
            patience: 5,
            max_epochs: 100,
            seed: 0,
            two_phase: true,
            use_time_score: true,
            optimize_every_tick: false,
            task: Task::Links,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("temporal_dim", self.temporal_dim),
            ("structural_dim", self.structural_dim),
            ("layers", self.layers),
            ("mixture_components", self.mixture_components),
            ("blocks", self.blocks),
            ("truncation", self.truncation),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TkgError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(TkgError::Config("lambda weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TkgError::Config("alpha must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TkgError::Config("dropout must lie in [0, 1)".into()));
        }
        if self.temporal_dim % self.blocks != 0 || self.structural_dim % self.blocks != 0 {
            return Err(TkgError::Config(
                "embedding sizes must be divisible by the block count".into(),
            ));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TkgError::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "temporal_dim" => self.temporal_dim = num(key, value)?,
            "structural_dim" => self.structural_dim = num(key, value)?,
            "embedding_dim" => {
                let d: usize = num(key, value)?;
                self.temporal_dim = d;
                self.structural_dim = d;
            }
            "layers" => self.layers = num(key, value)?,
            "mixture_components" => self.mixture_components = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "truncation" => self.truncation = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "two_phase" => self.two_phase = num(key, value)?,
            "use_time_score" => self.use_time_score = num(key, value)?,
            "optimize_every_tick" => self.optimize_every_tick = num(key, value)?,
            "task" => self.task = Task::parse(value)?,
            other => {
                return Err(TkgError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Renders every key in a stable order (echo-config support).
    pub fn echo(&self) -> String {
        let task = match self.task {
            Task::Links => "links",
            Task::Time => "time",
        };
        format!(
            "temporal_dim={}\nstructural_dim={}\nlayers={}\nmixture_components={}\n\
             blocks={}\ntruncation={}\nlambda1={}\nlambda2={}\nalpha={}\n\
             learning_rate={}\nweight_decay={}\ndropout={}\npatience={}\n\
             max_epochs={}\nseed={}\ntwo_phase={}\nuse_time_score={}\n\
             optimize_every_tick={}\ntask={}\n",
            self.temporal_dim,
            self.structural_dim,
            self.layers,
            self.mixture_components,
            self.blocks,
            self.truncation,
            self.lambda1,
            self.lambda2,
            self.alpha,
            self.learning_rate,
            self.weight_decay,
            self.dropout,
            self.patience,
            self.max_epochs,
            self.seed,
            self.two_phase,
            self.use_time_score,
            self.optimize_every_tick,
            task,
        )
    }
}

/// Parses a flat `key=value` file (`#` starts a comment).
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| TkgError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| TkgError::Parse {
            line: idx + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
