//! Command-line surface: ingest data, train, evaluate, predict event
//! times, and re-render reports.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tkg::checkpoint::Checkpoint;
use tkg::config::{parse_config_file, ModelConfig};
use tkg::error::TkgError;
use tkg::model::Model;
use tkg::plot::{line_chart, Series};
use tkg::store::{load_quadruple_file, TemporalKG};
use tkg::{ablation, eval, report, synthetic, trainer};

#[derive(Parser)]
#[command(name = "tkg", about = "Temporal knowledge graph modeling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default ".").
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    use_time_score: bool,
    /// Extra config overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataOpts {
    /// Quadruple TSV path, or the literal "synthetic" for the builtin
    /// period-3 dataset.
    #[arg(long)]
    data: String,
    /// Raw timestamp units per tick (Δ); raw times must be multiples.
    #[arg(long, default_value_t = 1)]
    raw_per_tick: u64,
    /// Hours per tick, for MAE reporting.
    #[arg(long, default_value_t = 1.0)]
    tick_hours: f64,
    /// First validation tick (default: 80% of the tick range).
    #[arg(long)]
    valid_from: Option<u64>,
    /// First test tick (default: 90% of the tick range).
    #[arg(long)]
    test_from: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a raw quadruple file; write the canonical sorted file and
    /// a stats block.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataOpts,
    },
    /// Train a model; writes checkpoint, training log, and loss curves.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataOpts,
    },
    /// Evaluate a checkpoint: link ranking or event-time MAE.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, value_parser = ["links", "time"], default_value = "links")]
        task: String,
    },
    /// Per-event expected-time predictions on the test split.
    PredictTime {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataOpts,
    },
    /// Re-render the text summary and plot from an existing metrics CSV.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run the sensitivity grids on the synthetic dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
    },
    /// Print the effective configuration (flag > file > default).
    EchoConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Keep clap's help/version on stdout with success, everything
            // else is a usage error (exit 1).
            let _ = e.print();
            return if e.exit_code() == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &TkgError) -> u8 {
    match e {
        TkgError::Config(_) => 1,
        TkgError::Numerical(_) => 3,
        _ => 2,
    }
}

impl Common {
    fn resolve_config(&self) -> Result<ModelConfig, TkgError> {
        let mut cfg = ModelConfig::default();
        if let Some(path) = &self.config {
            for (k, v) in parse_config_file(path)? {
                cfg.set(&k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                TkgError::Config(format!("--set expects key=value, got '{kv}'"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(l) = self.lambda1 {
            cfg.lambda1 = l;
        }
        if let Some(l) = self.lambda2 {
            cfg.lambda2 = l;
        }
        if self.use_time_score {
            cfg.use_time_score = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf, TkgError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| TkgError::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(dir)
    }
}

impl DataOpts {
    fn load(&self) -> Result<TemporalKG, TkgError> {
        if self.data == "synthetic" {
            Ok(synthetic::period3_kg())
        } else {
            load_quadruple_file(Path::new(&self.data), self.raw_per_tick, self.tick_hours)
        }
    }

    /// (train, valid, test) split bounds, defaulting to 80% / 90% of the
    /// tick range.
    fn split(&self, kg: &TemporalKG) -> Result<(TemporalKG, TemporalKG, TemporalKG), TkgError> {
        let quads = kg.quadruples();
        if quads.is_empty() {
            return Err(TkgError::Validation("dataset is empty".into()));
        }
        let lo = quads.first().unwrap().tick;
        let hi = quads.last().unwrap().tick;
        let b1 = self
            .valid_from
            .unwrap_or_else(|| lo + (hi - lo) * 8 / 10);
        let b2 = self.test_from.unwrap_or_else(|| lo + (hi - lo) * 9 / 10);
        kg.chronological_split(b1, b2)
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), TkgError> {
    fs::write(path, body).map_err(|e| TkgError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), TkgError> {
    match cli.cmd {
        Cmd::Ingest { common, data } => cmd_ingest(&common, &data),
        Cmd::Train { common, data } => cmd_train(&common, &data),
        Cmd::Evaluate { common, data, task } => cmd_evaluate(&common, &data, &task),
        Cmd::PredictTime { common, data } => cmd_predict_time(&common, &data),
        Cmd::Report { common } => cmd_report(&common),
        Cmd::Ablate { common, epochs } => cmd_ablate(&common, epochs),
        Cmd::EchoConfig { common } => {
            print!("{}", common.resolve_config()?.echo());
            Ok(())
        }
    }
}

fn stats_block(kg: &TemporalKG) -> String {
    let quads = kg.quadruples();
    let (lo, hi) = match (quads.first(), quads.last()) {
        (Some(a), Some(b)) => (a.tick, b.tick),
        _ => (0, 0),
    };
    format!(
        "edges: {}\nentities: {}\nrelations: {}\ntick_range: {}..{}\ntick_hours: {}\n",
        quads.len(),
        kg.num_entities,
        kg.num_relations,
        lo,
        hi,
        kg.tick_hours,
    )
}

fn cmd_ingest(common: &Common, data: &DataOpts) -> Result<(), TkgError> {
    let kg = data.load()?;
    let dir = common.out_dir()?;
    let mut canonical = String::new();
    for q in kg.quadruples() {
        canonical.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            q.subject, q.relation, q.object, q.tick
        ));
    }
    write_file(&dir.join("canonical.tsv"), &canonical)?;
    let stats = stats_block(&kg);
    write_file(&dir.join("stats.txt"), &stats)?;
    print!("{stats}");
    Ok(())
}

fn cmd_train(common: &Common, data: &DataOpts) -> Result<(), TkgError> {
    let cfg = common.resolve_config()?;
    let kg = data.load()?;
    let (train, valid, _test) = data.split(&kg)?;
    let dir = common.out_dir()?;
    let mut model = Model::new(cfg.clone(), kg.num_entities, kg.num_relations)?;

    let mut log_lines = String::new();
    {
        let mut sink = |stats: &trainer::EpochStats, metric: f64| {
            let record = serde_json::json!({
                "epoch": stats.epoch,
                "phase": stats.phase,
                "loss_time": stats.loss_time_sum,
                "loss_triple": stats.loss_triple_sum,
                "events": stats.events,
                "skipped_time": stats.skipped_time,
                "validation": metric,
                "seconds": stats.seconds,
            });
            log_lines.push_str(&record.to_string());
            log_lines.push('\n');
            eprintln!(
                "epoch {} phase {} loss_time {:.4} loss_triple {:.4} validation {:.4}",
                stats.epoch, stats.phase, stats.loss_time_sum, stats.loss_triple_sum, metric
            );
        };
        let train_report = trainer::fit(&mut model, &train, &valid, Some(&mut sink))?;

        let ckpt = Checkpoint::from_model(&model);
        ckpt.save(&dir.join("model.ckpt"))?;

        // Wall-clock stays in the log only; the persisted report must be
        // byte-identical across same-seed runs.
        let mut stable = train_report.clone();
        for e in &mut stable.epochs {
            e.seconds = 0.0;
        }
        write_file(
            &dir.join("train_report.json"),
            &serde_json::to_string_pretty(&stable)
                .map_err(|e| TkgError::Validation(format!("report serialization: {e}")))?,
        )?;

        let loss_pts: Vec<(f64, f64)> = train_report
            .epochs
            .iter()
            .map(|s| (s.epoch as f64, s.mean_loss(cfg.lambda1, cfg.lambda2)))
            .collect();
        let valid_pts: Vec<(f64, f64)> = train_report
            .epochs
            .iter()
            .zip(&train_report.validation)
            .map(|(s, &m)| (s.epoch as f64, m))
            .collect();
        let svg = line_chart(
            "training curves",
            "epoch",
            "value",
            &[
                Series {
                    name: "mean loss",
                    points: &loss_pts,
                },
                Series {
                    name: "validation",
                    points: &valid_pts,
                },
            ],
        );
        write_file(&dir.join("loss_curves.svg"), &svg)?;
        if let (Some(be), Some(bm)) = (train_report.best_epoch, train_report.best_metric) {
            println!("best epoch {be} validation {bm:.6}");
        } else {
            println!("no epochs run");
        }
    }
    write_file(&dir.join("train.log"), &log_lines)?;
    Ok(())
}

fn load_model(common: &Common, kg: &TemporalKG) -> Result<Model, TkgError> {
    let path = common
        .checkpoint
        .clone()
        .ok_or_else(|| TkgError::Config("--checkpoint is required".into()))?;
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.num_entities != kg.num_entities || ckpt.num_relations != kg.num_relations {
        return Err(TkgError::Validation(format!(
            "checkpoint is for {} entities / {} relations, data has {} / {}",
            ckpt.num_entities, ckpt.num_relations, kg.num_entities, kg.num_relations
        )));
    }
    let mut model = ckpt.into_model()?;
    // Evaluation-time overrides.
    if let Some(a) = common.alpha {
        model.cfg.alpha = a;
    }
    if common.use_time_score {
        model.cfg.use_time_score = true;
    }
    Ok(model)
}

fn cmd_evaluate(common: &Common, data: &DataOpts, task: &str) -> Result<(), TkgError> {
    let kg = data.load()?;
    let (train, valid, test) = data.split(&kg)?;
    let history = merge(&train, &valid)?;
    let model = load_model(common, &kg)?;
    let dir = common.out_dir()?;
    let metrics = match task {
        "links" => {
            let (m, _) =
                eval::evaluate_links_detailed(&model, &history, &test, model.cfg.use_time_score)?;
            println!(
                "MRR {:.6}  Hits@3 {:.6}  Hits@10 {:.6}  ({} queries)",
                m.mrr, m.hits3, m.hits10, m.queries
            );
            m
        }
        _ => {
            let m = eval::evaluate_times(&model, &history, &test)?;
            let baseline = eval::naive_time_baseline(&history, &test)?;
            if m.queries > 0 {
                println!(
                    "MAE {:.6} hours over {} queries ({} skipped); naive baseline {:.6}",
                    m.mae_hours, m.queries, m.skipped_time, baseline.mae_hours
                );
            } else {
                println!("MAE absent: all {} queries skipped", m.skipped_time);
            }
            m
        }
    };
    write_file(&dir.join("metrics.txt"), &report::metrics_text(&metrics, "test"))?;
    write_file(&dir.join("metrics.csv"), &report::metrics_csv(&metrics, "test"))?;
    let pts: Vec<(f64, f64)> = metrics
        .per_tick
        .iter()
        .map(|b| {
            (
                b.tick as f64,
                if task == "links" { b.mrr } else { b.mae_hours },
            )
        })
        .collect();
    let svg = line_chart(
        if task == "links" {
            "MRR by tick"
        } else {
            "MAE by tick"
        },
        "tick",
        if task == "links" { "MRR" } else { "MAE (hours)" },
        &[Series {
            name: task,
            points: &pts,
        }],
    );
    write_file(&dir.join("metric_by_tick.svg"), &svg)?;
    Ok(())
}

fn merge(a: &TemporalKG, b: &TemporalKG) -> Result<TemporalKG, TkgError> {
    let mut quads = a.quadruples().to_vec();
    quads.extend_from_slice(b.quadruples());
    TemporalKG::new(quads, a.num_entities, a.num_relations, a.tick_hours)
}

fn cmd_predict_time(common: &Common, data: &DataOpts) -> Result<(), TkgError> {
    let kg = data.load()?;
    let (train, valid, test) = data.split(&kg)?;
    let history = merge(&train, &valid)?;
    let model = load_model(common, &kg)?;
    let dir = common.out_dir()?;
    let mut rolling = eval::RollingState::new();
    rolling.advance_all(&model, &history)?;
    let mut csv = String::from("subject,relation,object,true_tick,predicted_tick\n");
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for snap in test.snapshots() {
        for q in &snap.events {
            match eval::predict_event_tick(&model, &mut rolling, q)? {
                Some(pred) => {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        q.subject, q.relation, q.object, q.tick, pred
                    ));
                    abs_sum += (pred - q.tick as f64).abs();
                    count += 1;
                }
                None => {
                    csv.push_str(&format!(
                        "{},{},{},{},\n",
                        q.subject, q.relation, q.object, q.tick
                    ));
                    skipped += 1;
                }
            }
        }
        rolling.advance(&model, &snap)?;
    }
    write_file(&dir.join("predictions.csv"), &csv)?;
    if count > 0 {
        println!(
            "MAE {:.6} hours over {} predictions ({} skipped)",
            abs_sum / count as f64 * kg.tick_hours,
            count,
            skipped
        );
    } else {
        println!("no predictable events ({skipped} skipped)");
    }
    Ok(())
}

fn cmd_report(common: &Common) -> Result<(), TkgError> {
    let dir = common.out_dir()?;
    let path = dir.join("metrics.csv");
    let body = fs::read_to_string(&path).map_err(|e| TkgError::Io {
        path: path.clone(),
        source: e,
    })?;
    let rows = report::parse_metrics_csv(&body)?;
    for (metric, value, split, bucket) in &rows {
        if bucket == "all" {
            println!("{metric} ({split}): {value}");
        }
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(m, _, _, b)| m == "mrr" && b != "all")
        .filter_map(|(_, v, _, b)| b.parse::<f64>().ok().map(|t| (t, *v)))
        .collect();
    if !pts.is_empty() {
        let svg = line_chart(
            "MRR by tick",
            "tick",
            "MRR",
            &[Series {
                name: "mrr",
                points: &pts,
            }],
        );
        write_file(&dir.join("report.svg"), &svg)?;
    }
    Ok(())
}

fn cmd_ablate(common: &Common, epochs: usize) -> Result<(), TkgError> {
    let cfg = common.resolve_config()?;
    let dir = common.out_dir()?;
    let results = ablation::run(epochs, cfg.seed)?;
    let table = ablation::relative_table(&results);
    write_file(&dir.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}
