//! Command-line interface. Flags override the config file, which overrides defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::channel_text::{build_prompt, compose_descriptions, compute_channel_stats, read_semantic_file};
use crate::checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::dataset::split;
use crate::error::{Error, Result};
use crate::evaluation::pearson::min_max_normalize;
use crate::evaluation::report::{matrix_rows, write_matrix, EvalReport, HorizonRow, LayerCka};
use crate::evaluation::variants::{run_variant, Variant};
use crate::pipeline;
use crate::synthetic::{generate, SyntheticSpec};
use crate::training::{log_line, write_history};

#[derive(Debug, Parser)]
#[command(name = "plmcast", version, about = "Dual-branch PLM time-series forecaster")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset preset name, `synthetic`, or a CSV path.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// Forecast horizon F.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Ablation variant tag applied before training (`full`, `ts_only`, ...).
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Seed for training, backbone init and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Fraction of training windows to keep.
    #[arg(long = "few-shot", global = true)]
    pub few_shot: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Analysis {
    Cka,
    Corr,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and save checkpoint, history and test metrics.
    Train,
    /// Evaluate checkpoints on the test split (one row per checkpoint).
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
    /// Train and evaluate ablation variants (`all` for every tag).
    Ablate {
        #[arg(required = true, num_args = 1..)]
        variants: Vec<String>,
    },
    /// Representation (CKA) or channel-correlation analysis of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: Analysis,
        /// Windows sampled from the test split for CKA.
        #[arg(long, default_value_t = 256)]
        max_windows: usize,
    },
    /// Emit the description prompt; validate and compose a description file if given.
    Describe {
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
    /// Write a synthetic dataset CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        rows: usize,
    },
}

/// Effective configuration: defaults, then the config file, then flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(ds) = &common.dataset {
        apply_dataset(&mut cfg.data, ds);
    }
    if let Some(h) = common.horizon {
        cfg.model.horizon = h;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.backbone.seed = s;
        if let Some(syn) = &mut cfg.data.synthetic {
            syn.seed = s;
        }
    }
    if let Some(f) = common.few_shot {
        cfg.data.few_shot = Some(f);
    }
    if let Some(v) = &common.variant {
        cfg.variant = v.clone();
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn apply_dataset(data: &mut DataConfig, ds: &str) {
    let path = Path::new(ds);
    if path.is_file() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
        *data = std::mem::take(data).with_preset(&stem);
        data.path = Some(path.to_path_buf());
        data.synthetic = None;
    } else if ds == "synthetic" {
        data.name = ds.into();
        data.synthetic.get_or_insert_with(SyntheticSpec::default);
        data.path = None;
    } else {
        *data = std::mem::take(data).with_preset(ds);
        data.synthetic = None;
        data.path = Some(PathBuf::from(format!("data/{ds}.csv")));
    }
}

/// Output directory with `config.json`, `run.log` and an `INCOMPLETE` marker that is
/// removed when the command succeeds.
struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    fn open(cfg: &RunConfig, command: &str) -> Result<Self> {
        let dir = cfg.out.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let marker = dir.join("INCOMPLETE");
        std::fs::write(&marker, format!("{command} started; outputs here are partial\n")).map_err(|e| Error::io(&marker, e))?;
        let config = dir.join("config.json");
        std::fs::write(&config, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&config, e))?;
        let rd = Self { dir };
        rd.log(&format!("command={command} config_hash={}", cfg.hash()?))?;
        Ok(rd)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn log(&self, line: &str) -> Result<()> {
        log::info!("{line}");
        log_line(&self.path("run.log"), line)
    }

    fn finish(self) -> Result<()> {
        let marker = self.path("INCOMPLETE");
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cli.common, &cfg, &checkpoint),
        Command::Ablate { variants } => {
            let list = if variants.iter().any(|v| v == "all") {
                Variant::all()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<_>>>()?
            };
            cmd_ablate(&cfg, &list)
        }
        Command::Analyze {
            checkpoint,
            kind,
            max_windows,
        } => cmd_analyze(&cli.common, &cfg, &checkpoint, kind, max_windows),
        Command::Describe { descriptions } => {
            if let Some(d) = descriptions {
                cfg.data.descriptions = Some(d);
            }
            cmd_describe(&cfg)
        }
        Command::Synth { rows } => {
            let spec = SyntheticSpec {
                rows,
                seed: cli.common.seed.unwrap_or(SyntheticSpec::default().seed),
                ..SyntheticSpec::default()
            };
            let out = cli.common.out.unwrap_or_else(|| PathBuf::from("synthetic.csv"));
            generate(&spec)?.write_csv(&out)
        }
    }
}

/// Applies the `variant` key (if not `full`) before training.
fn effective(cfg: &RunConfig) -> Result<RunConfig> {
    let variant: Variant = cfg.variant.parse()?;
    variant.apply(cfg)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let cfg = effective(cfg)?;
    let rd = RunDir::open(&cfg, "train")?;
    let run = pipeline::train(&cfg)?;
    for r in &run.fit.history {
        rd.log(&format!(
            "epoch={} train_loss={:.6} val_mse={:.6} val_mae={:.6}",
            r.epoch, r.train_loss, r.val_mse, r.val_mae
        ))?;
    }
    write_history(&run.fit.history, &rd.path("history.csv"))?;
    checkpoint::save(&run.model, Some(&cfg), &rd.path("checkpoint.safetensors"))?;
    let (mse, mae) = pipeline::test_metrics(&run.model, &run.data.test, 64)?;
    let mut report = EvalReport::new(&cfg.variant, &cfg.data.name, &cfg.hash()?);
    report.rows.push(HorizonRow {
        horizon: cfg.model.horizon,
        mse,
        mae,
    });
    report.validate()?;
    report.write_json(&rd.path("report.json"))?;
    EvalReport::write_csv(&[report], &rd.path("report.csv"))?;
    rd.log(&format!("test mse={mse:.6} mae={mae:.6} steps={}", run.fit.steps))?;
    rd.finish()
}

/// Run config of a checkpoint with this invocation's data flags applied.
fn checkpoint_config(common: &Common, fallback: &RunConfig, meta: &checkpoint::CheckpointMeta) -> Result<RunConfig> {
    let mut cfg = meta.run.clone().unwrap_or_else(|| fallback.clone());
    if common.config.is_some() {
        cfg.data = fallback.data.clone();
    }
    if let Some(ds) = &common.dataset {
        apply_dataset(&mut cfg.data, ds);
    }
    cfg.model = meta.spec.config.clone();
    cfg.out = fallback.out.clone();
    Ok(cfg)
}

pub fn cmd_eval(common: &Common, cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<()> {
    let rd = RunDir::open(cfg, "eval")?;
    let mut report: Option<EvalReport> = None;
    for path in checkpoints {
        let (model, meta) = checkpoint::load(path)?;
        let run_cfg = checkpoint_config(common, cfg, &meta)?;
        let data = pipeline::prepare(&run_cfg)?;
        if data.channel_names != model.spec.channel_names {
            return Err(Error::Config(format!(
                "{} was trained on channels {:?}, dataset has {:?}",
                path.display(),
                model.spec.channel_names,
                data.channel_names
            )));
        }
        let (mse, mae) = pipeline::test_metrics(&model, &data.test, 64)?;
        rd.log(&format!("{}: horizon={} mse={mse:.6} mae={mae:.6}", path.display(), run_cfg.model.horizon))?;
        let r = report.get_or_insert_with(|| {
            EvalReport::new(&run_cfg.variant, &run_cfg.data.name, meta.config_hash.as_deref().unwrap_or(""))
        });
        r.rows.push(HorizonRow {
            horizon: run_cfg.model.horizon,
            mse,
            mae,
        });
    }
    let report = report.unwrap();
    report.validate()?;
    report.write_json(&rd.path("report.json"))?;
    EvalReport::write_csv(&[report], &rd.path("report.csv"))?;
    rd.finish()
}

pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<()> {
    let rd = RunDir::open(cfg, "ablate")?;
    let mut reports = Vec::new();
    for v in variants {
        let started = std::time::Instant::now();
        let report = run_variant(cfg, *v)?;
        rd.log(&format!(
            "variant={v} mse={:.6} mae={:.6} secs={:.1}",
            report.rows[0].mse,
            report.rows[0].mae,
            started.elapsed().as_secs_f64()
        ))?;
        report.write_json(&rd.path(&format!("report_{v}.json")))?;
        reports.push(report);
    }
    EvalReport::write_csv(&reports, &rd.path("reports.csv"))?;
    let all = rd.path("reports.json");
    std::fs::write(&all, serde_json::to_string_pretty(&reports)?).map_err(|e| Error::io(&all, e))?;
    rd.finish()
}

pub fn cmd_analyze(common: &Common, cfg: &RunConfig, ckpt: &Path, kind: Analysis, max_windows: usize) -> Result<()> {
    let rd = RunDir::open(cfg, "analyze")?;
    let (model, meta) = checkpoint::load(ckpt)?;
    let run_cfg = checkpoint_config(common, cfg, &meta)?;
    let data = pipeline::prepare(&run_cfg)?;
    let mut report = EvalReport::new(&run_cfg.variant, &run_cfg.data.name, meta.config_hash.as_deref().unwrap_or(""));
    match kind {
        Analysis::Cka => {
            let values = pipeline::cka_by_layer(&model, &data.test, max_windows)?;
            let mut rows = Vec::new();
            for (i, (ts, plm)) in values.iter().enumerate() {
                rd.log(&format!("layer={} cka_ts={ts:.6} cka_plm={plm:?}", i + 1))?;
                rows.push(LayerCka {
                    layer: i + 1,
                    ts: *ts,
                    plm: *plm,
                });
            }
            let mut w = csv::Writer::from_path(rd.path("cka.csv"))?;
            w.write_record(["layer", "cka_ts", "cka_plm"])?;
            for r in &rows {
                w.write_record([
                    r.layer.to_string(),
                    format!("{:.6}", r.ts),
                    r.plm.map(|v| format!("{v:.6}")).unwrap_or_default(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(rd.path("cka.csv"), e))?;
            report.cka = Some(rows);
        }
        Analysis::Corr => {
            let (pred, truth) = pipeline::correlation_maps(&model, &data.test, model.config().output, 64)?;
            write_matrix(&matrix_rows(&pred), &rd.path("corr_pred.csv"))?;
            write_matrix(&matrix_rows(&truth), &rd.path("corr_true.csv"))?;
            write_matrix(&matrix_rows(&min_max_normalize(&pred)), &rd.path("corr_pred_norm.csv"))?;
            write_matrix(&matrix_rows(&min_max_normalize(&truth)), &rd.path("corr_true_norm.csv"))?;
            report.corr_pred = Some(matrix_rows(&pred));
            report.corr_true = Some(matrix_rows(&truth));
        }
    }
    report.write_json(&rd.path("report.json"))?;
    rd.finish()
}

pub fn cmd_describe(cfg: &RunConfig) -> Result<()> {
    let rd = RunDir::open(cfg, "describe")?;
    let series = pipeline::load_series(&cfg.data)?;
    let prompt = build_prompt(&cfg.data.name, &cfg.data.domain, &series.channel_names)?;
    std::fs::write(rd.path("prompt.txt"), format!("{prompt}\n")).map_err(|e| Error::io(rd.path("prompt.txt"), e))?;
    println!("{prompt}");
    match &cfg.data.descriptions {
        Some(path) => {
            let records = read_semantic_file(path)?;
            let splits = split(&series, &cfg.data.split, cfg.model.input_len + cfg.model.horizon)?;
            let desc = compose_descriptions(&records, &series.channel_names, &compute_channel_stats(&splits.train))?;
            let out = rd.path("descriptions.json");
            std::fs::write(&out, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&out, e))?;
            for (name, text) in desc.channel_names.iter().zip(&desc.combined) {
                println!("{name}: {text}");
            }
            rd.log(&format!("validated {} channel descriptions", desc.combined.len()))?;
        }
        None => {
            rd.log("no description file given; validation skipped")?;
            eprintln!("no description file given; validation skipped");
        }
    }
    rd.finish()
}

/// Machine-readable error record for stderr.
pub fn error_record(e: &Error) -> String {
    json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
