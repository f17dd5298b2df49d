//! The `deepmcp` command line: gen, train, eval, predict, ablate.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, TrainConfig};
use crate::features::{parse_log_line, read_log, FeatureError, FieldSchema, Instance};
use crate::model::{DeepMcp, ModelError, Objective};
use crate::synth::{self, SynthError, WorldConfig};
use crate::training::{
    self, load_checkpoint, save_checkpoint, score_all, CheckpointError, EvalError, TrainError, TRACE_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::Usage(m),
            io => CliError::Data(io.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Config(c),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "deepmcp", version, about = "DeepMCP click-through-rate engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides train.seed and world.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (directory for gen, file otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key=value` override; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory holding train.tsv, val.tsv, test.tsv and schema.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic log (train/val/test.tsv + schema.csv) to --out.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its checkpoint and metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// dnn, deepcp, deepmp or deepmcp.
        #[arg(long, default_value = "deepmcp")]
        model: String,
        /// Metrics CSV path; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print `auc=<v> logloss=<v>` for a checkpoint on a log file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// One pCTR per input instance, prediction subnet only.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train every model on the same data; CSV `model,auc,logloss` on test.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated subset of lr,fm,dnn,deepcp,deepmp,deepmcp.
        #[arg(long, default_value = "lr,fm,dnn,deepcp,deepmp,deepmcp")]
        models: String,
    },
}

/// The rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lr,
    Fm,
    Dnn,
    DeepCp,
    DeepMp,
    DeepMcp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Lr,
        ModelKind::Fm,
        ModelKind::Dnn,
        ModelKind::DeepCp,
        ModelKind::DeepMp,
        ModelKind::DeepMcp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Fm => "fm",
            ModelKind::Dnn => "dnn",
            ModelKind::DeepCp => "deepcp",
            ModelKind::DeepMp => "deepmp",
            ModelKind::DeepMcp => "deepmcp",
        }
    }

    /// Config and objective of the DeepMCP-family variants: DNN is
    /// `alpha = beta = 0` without the auxiliary passes, DeepCP drops
    /// alpha, DeepMP drops beta.
    pub fn variant(self, base: &TrainConfig) -> Option<(TrainConfig, Objective)> {
        let mut cfg = base.clone();
        let objective = match self {
            ModelKind::Lr | ModelKind::Fm => return None,
            ModelKind::Dnn => {
                cfg.alpha = 0.0;
                cfg.beta = 0.0;
                Objective::PredictionOnly
            }
            ModelKind::DeepCp => {
                cfg.alpha = 0.0;
                Objective::Joint
            }
            ModelKind::DeepMp => {
                cfg.beta = 0.0;
                Objective::Joint
            }
            ModelKind::DeepMcp => Objective::Joint,
        };
        Some((cfg, objective))
    }
}

impl FromStr for ModelKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            CliError::Usage(format!("unknown model {s:?}; valid models: {}", names.join(", ")))
        })
    }
}

pub fn parse_models(list: &str) -> Result<Vec<ModelKind>, CliError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Train / validation / test instances sharing one schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FieldSchema,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    /// Generates the synthetic world in memory, through the same text
    /// format `gen` writes.
    pub fn synthetic(world: &WorldConfig, hash_space: usize) -> Result<Self, CliError> {
        let w = synth::generate_world(world)?;
        let log = synth::generate_impressions(&w, world)?;
        let schema = synth::schema();
        let parse = |part: &[synth::Impression]| -> Result<Vec<Instance>, CliError> {
            part.iter()
                .enumerate()
                .map(|(i, imp)| Ok(parse_log_line(&synth::format_line(&w, imp), i + 1, &schema, hash_space)?))
                .collect()
        };
        Ok(Self {
            train: parse(&log.train)?,
            val: parse(&log.val)?,
            test: parse(&log.test)?,
            schema: schema.clone(),
        })
    }

    pub fn load(args: &DataArgs, hash_space: usize, need_test: bool) -> Result<Self, CliError> {
        let pick = |explicit: &Option<PathBuf>, file: &str| -> Result<PathBuf, CliError> {
            match (explicit, &args.data) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(dir)) => Ok(dir.join(file)),
                (None, None) => Err(CliError::Usage(format!(
                    "no data: pass --data DIR or --{}",
                    file.split('.').next().unwrap_or(file)
                ))),
            }
        };
        let schema = FieldSchema::load(&pick(&args.schema, "schema.csv")?)?;
        let train = read_log(&pick(&args.train, "train.tsv")?, &schema, hash_space)?;
        let val = read_log(&pick(&args.val, "val.tsv")?, &schema, hash_space)?;
        let test = if need_test {
            read_log(&pick(&args.test, "test.tsv")?, &schema, hash_space)?
        } else {
            Vec::new()
        };
        Ok(Self {
            schema,
            train,
            val,
            test,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub model: ModelKind,
    pub auc: f64,
    pub logloss: f64,
}

pub const ABLATION_HEADER: &str = "model,auc,logloss";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!("{},{},{}", self.model.name(), self.auc, self.logloss)
    }
}

/// Trains each model with the shared config and scores its best-validation
/// snapshot on the test split.
pub fn run_ablation(data: &Dataset, cfg: &TrainConfig, models: &[ModelKind]) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    for &kind in models {
        let r = match kind {
            ModelKind::Lr => training::evaluate(&training::train_lr(&data.train, &data.val, cfg)?.model, &data.test)?,
            ModelKind::Fm => training::evaluate(&training::train_fm(&data.train, &data.val, cfg)?.model, &data.test)?,
            _ => {
                let (vcfg, objective) = kind.variant(cfg).expect("deep variant");
                let out = training::train(&data.train, &data.val, &data.schema, &vcfg, objective)?;
                training::evaluate(&out.model.model, &data.test)?
            }
        };
        rows.push(AblationRow {
            model: kind,
            auc: r.auc,
            logloss: r.logloss,
        });
    }
    Ok(rows)
}

/// Defaults, then the config file, then `--seed`, then `--set`.
pub fn effective_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.world.seed = seed;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

/// Writes one pCTR per instance using only the prediction subnet.
pub fn write_predictions(model: &DeepMcp<f32>, data: &[Instance], out: &mut dyn Write) -> Result<(), CliError> {
    let scores = score_all(model, data)?;
    for s in scores {
        writeln!(out, "{s}").map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn echo_config(err: &mut dyn Write, text: &str) {
    let _ = writeln!(err, "# effective config");
    let _ = write!(err, "{text}");
}

fn open_out(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn cmd_gen(common: &Common, err: &mut dyn Write) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    echo_config(err, &cfg.to_text());
    cfg.validate()?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let world = synth::generate_world(&cfg.world)?;
    let files = synth::generate_log(&world, &cfg.world, &dir)?;
    let _ = writeln!(err, "wrote {} {} {} {}", files.train.display(), files.val.display(), files.test.display(), files.schema.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    data: &DataArgs,
    model: &str,
    metrics: &Option<PathBuf>,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    echo_config(err, &cfg.to_text());
    cfg.validate()?;
    let kind: ModelKind = model.parse()?;
    let (tcfg, objective) = kind
        .variant(&cfg.train)
        .ok_or_else(|| CliError::Usage(format!("train writes DeepMCP-family checkpoints; {model} has none, use ablate")))?;
    let ds = Dataset::load(data, tcfg.hash_space, false)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let metrics_path = metrics.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".metrics.csv");
        PathBuf::from(p)
    });
    let mut csv = open_out(&metrics_path)?;
    writeln!(csv, "{TRACE_HEADER}").map_err(io_err(&metrics_path))?;
    csv.flush().map_err(io_err(&metrics_path))?;
    let mut write_err = None;
    let result = training::train_observed(&ds.train, &ds.val, &ds.schema, &tcfg, objective, &mut |row| {
        if let Err(e) = writeln!(csv, "{}", row.csv()).and_then(|_| csv.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&metrics_path)(e));
    }
    save_checkpoint(&result.model, &out)?;
    let _ = writeln!(
        err,
        "best val auc {} at batch {}; wrote {} and {}",
        result.best_val_auc,
        result.best_batch,
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn load_for_scoring(common: &Common, checkpoint: &Path, input: &Path, err: &mut dyn Write) -> Result<(DeepMcp<f32>, Vec<Instance>), CliError> {
    if common.config.is_some() || !common.overrides.is_empty() || common.seed.is_some() {
        return Err(CliError::Usage("eval and predict take their config from the checkpoint".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    echo_config(err, &ckpt.config.to_text());
    let data = read_log(input, ckpt.model.schema(), ckpt.config.hash_space)?;
    Ok((ckpt.model, data))
}

fn cmd_eval(common: &Common, checkpoint: &Path, input: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let (model, data) = load_for_scoring(common, checkpoint, input, err)?;
    let r = training::evaluate(&model, &data)?;
    writeln!(out, "auc={} logloss={}", r.auc, r.logloss).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn cmd_predict(common: &Common, checkpoint: &Path, input: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let (model, data) = load_for_scoring(common, checkpoint, input, err)?;
    model.reset_counts();
    write_predictions(&model, &data, out)?;
    let c = model.counts();
    let _ = writeln!(
        err,
        "subnet calls: prediction={} matching={} correlation={}",
        c.prediction, c.matching, c.correlation
    );
    Ok(())
}

fn cmd_ablate(common: &Common, data: &DataArgs, models: &str, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    echo_config(err, &cfg.to_text());
    cfg.validate()?;
    let kinds = parse_models(models)?;
    let ds = if data.data.is_none() && data.train.is_none() {
        Dataset::synthetic(&cfg.world, cfg.train.hash_space)?
    } else {
        Dataset::load(data, cfg.train.hash_space, true)?
    };
    let rows = run_ablation(&ds, &cfg.train, &kinds)?;
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    match &common.out {
        Some(path) => std::fs::write(path, &text).map_err(io_err(path))?,
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::Data(e.to_string()))?,
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen { common } => cmd_gen(common, err),
        Command::Train {
            common,
            data,
            model,
            metrics,
        } => cmd_train(common, data, model, metrics, err),
        Command::Eval { common, checkpoint, input } => cmd_eval(common, checkpoint, input, out, err),
        Command::Predict { common, checkpoint, input } => match &common.out {
            Some(path) => {
                let mut f = open_out(path)?;
                cmd_predict(common, checkpoint, input, &mut f, err)?;
                f.flush().map_err(io_err(path))
            }
            None => cmd_predict(common, checkpoint, input, out, err),
        },
        Command::Ablate { common, data, models } => cmd_ablate(common, data, models, out, err),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names_round_trip() {
        for m in ModelKind::ALL {
            assert_eq!(m.name().parse::<ModelKind>().unwrap(), m);
        }
        let e = "xgb".parse::<ModelKind>().unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
        assert!(e.to_string().contains("lr, fm, dnn, deepcp, deepmp, deepmcp"));
    }

    #[test]
    fn variants_set_the_weights() {
        let base = TrainConfig::default();
        let (dnn, o) = ModelKind::Dnn.variant(&base).unwrap();
        assert_eq!((dnn.alpha, dnn.beta, o), (0.0, 0.0, Objective::PredictionOnly));
        let (cp, _) = ModelKind::DeepCp.variant(&base).unwrap();
        assert_eq!((cp.alpha, cp.beta), (0.0, base.beta));
        let (mp, _) = ModelKind::DeepMp.variant(&base).unwrap();
        assert_eq!((mp.alpha, mp.beta), (base.alpha, 0.0));
        assert!(ModelKind::Fm.variant(&base).is_none());
    }

    #[test]
    fn flag_precedence() {
        let common = Common {
            seed: Some(9),
            overrides: vec!["train.seed=3".into(), "world.n_ads = 40".into()],
            ..Common::default()
        };
        let cfg = effective_config(&common).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.world.seed, 9);
        assert_eq!(cfg.world.n_ads, 40);
    }

    #[test]
    fn bad_override_is_usage_error() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["deepmcp", "gen", "--set", "train.nope=1"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["deepmcp", "frobnicate"], &mut out, &mut err), EXIT_USAGE);
    }
}
