//! Experiment runner: dataset generation, pretraining, test-time training,
//! evaluation and the side-by-side comparison of all adaptation variants.
//!
//! Every command reads an [`ExperimentConfig`], writes its outputs under
//! `config.out` and echoes the effective config to `config.out/config.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::{
    compact_labels, generate_dataset, load_manifest, load_split, manifest_root, strip_labels, DatasetManifest,
    GenConfig, ImageSample, Split,
};
use crate::error::{Error, Result};
use crate::model::{init_params, load_checkpoint, save_checkpoint, ModelDims, ModelParams, TaskKind, ROTNET_CLASSES};
use crate::optim::{classifier_accuracy, pretrain, run_ttt, LossTrace, PretrainConfig, TTTConfig};
use crate::retrieval::{evaluate_protocol, EvalOptions, Metric, MetricsReport, Protocol, DEFAULT_K};

pub const CONFIG_ECHO: &str = "config.json";
pub const PRETRAINED_CHECKPOINT: &str = "pretrained.ckpt";
pub const COMPARE_REPORT: &str = "compare.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct DatasetSection {
    /// Dataset directory holding `manifest.json`; defaults to `<out>/dataset`.
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub generate: GenConfig,
}


/// Encoder widths. The input width follows `dataset.image_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden: usize,
    /// Dimension of the retrieval space.
    pub latent: usize,
    /// Seed of the initial weights.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            hidden: dims.hidden,
            latent: dims.latent,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub k: usize,
    pub metric: Metric,
    pub protocols: Vec<Protocol>,
    pub workers: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            metric: Metric::Euclidean,
            protocols: vec![Protocol::NonGeneralized, Protocol::Generalized],
            workers: 1,
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            k: self.k,
            metric: self.metric,
            workers: self.workers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub ttt: TTTConfig,
    pub eval: EvalSection,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            ttt: TTTConfig::default(),
            eval: EvalSection::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Rejects keys of `user` that have no counterpart in `defaults`.
fn check_known_keys(user: &Value, defaults: &Value, path: &str) -> Result<()> {
    if let (Value::Object(u), Value::Object(d)) = (user, defaults) {
        for (key, value) in u {
            let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
            match d.get(key) {
                Some(default) => check_known_keys(value, default, &full)?,
                None => return Err(config_err(format!("unknown config key {full}"))),
            }
        }
    }
    Ok(())
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_leaf(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("override {path}: {} is not a section", parts[..i].join("."))))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| config_err(format!("unknown config key {path}")))?;
    }
    if node.is_object() {
        return Err(config_err(format!("override {path} names a section, not a value")));
    }
    *node = value;
    Ok(())
}

impl ExperimentConfig {
    /// Builds the effective config: defaults, then the optional JSON file,
    /// then `seed` (applied to every section), then `out`, then the dotted
    /// overrides in order.
    pub fn resolve(
        file: Option<&Path>,
        seed: Option<u64>,
        out: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let defaults = serde_json::to_value(Self::default())?;
        let mut cfg = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
                let user: Value = serde_json::from_str(&text)
                    .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                check_known_keys(&user, &defaults, "")?;
                serde_json::from_value::<Self>(user).map_err(|e| config_err(format!("{}: {e}", path.display())))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.dataset.generate.seed = s;
            cfg.model.seed = s;
            cfg.pretrain.seed = s;
            cfg.ttt.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        if !overrides.is_empty() {
            let mut tree = serde_json::to_value(&cfg)?;
            for (key, raw) in overrides {
                set_path(&mut tree, key, parse_leaf(raw))?;
            }
            cfg = serde_json::from_value(tree).map_err(|e| config_err(format!("override: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.dataset.generate;
        if g.n_classes == 0 || g.n_domains == 0 || g.per_cell == 0 {
            return Err(config_err("dataset.n_classes, n_domains and per_cell must be positive"));
        }
        if g.image_size == 0 || !g.image_size.is_multiple_of(3) {
            return Err(config_err(format!(
                "dataset.image_size {} must be a positive multiple of 3",
                g.image_size
            )));
        }
        if self.model.hidden == 0 || self.model.latent == 0 {
            return Err(config_err("model.hidden and model.latent must be positive"));
        }
        if self.pretrain.batch_size == 0 || !self.pretrain.lr.is_finite() || self.pretrain.lr < 0.0 {
            return Err(config_err("pretrain.batch_size must be positive and pretrain.lr finite and >= 0"));
        }
        self.ttt.validate()?;
        if self.eval.k == 0 || self.eval.workers == 0 {
            return Err(config_err("eval.k and eval.workers must be positive"));
        }
        if self.eval.protocols.is_empty() {
            return Err(config_err("eval.protocols is empty"));
        }
        if self.eval.protocols.contains(&Protocol::CrossDataset) {
            return Err(config_err("eval.protocols accepts non_generalized and generalized only"));
        }
        if let Some(p) = &self.dataset.path {
            if !p.is_dir() {
                return Err(config_err(format!("dataset.path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.path.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    pub fn model_dims(&self, classes: Option<usize>) -> ModelDims {
        let size = self.dataset.generate.image_size;
        ModelDims {
            input_dim: size * size * 3,
            hidden: self.model.hidden,
            latent: self.model.latent,
            head_k: ROTNET_CLASSES,
            classes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Creates the output directory and writes the effective config into it.
    pub fn echo(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(CONFIG_ECHO), self.to_json())?;
        Ok(())
    }
}

/// Splits `--a.b value` / `--a.b=value` pairs into `(path, value)`.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| config_err(format!("unexpected argument {arg}; overrides look like --section.key value")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| config_err(format!("override --{key} has no value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Process exit code for an error: 2 config or input data, 3 checkpoint,
/// 4 divergence, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Manifest { .. } | Error::MissingImage { .. } | Error::Ppm { .. } => 2,
        Error::Checkpoint { .. } | Error::CheckpointTruncated { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Manifest { .. } | Error::MissingImage { .. } | Error::Ppm { .. } => "dataset",
        Error::Checkpoint { .. } | Error::CheckpointTruncated { .. } => "checkpoint",
        Error::Divergence { .. } => "divergence",
        Error::Io(_) => "io",
        _ => "runtime",
    }
}

/// One-line JSON error record for stderr.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({
        "error": error_kind(err),
        "code": exit_code(err),
        "message": err.to_string(),
    })
    .to_string()
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    cfg.echo()?;
    generate_dataset(&cfg.dataset.generate, cfg.dataset_dir())
}

/// A dataset loaded from disk.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> Result<Vec<ImageSample>> {
        load_split(&self.manifest, &self.root, split)
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LoadedDataset> {
    let path = cfg.dataset_dir().join(crate::datagen::MANIFEST_FILE);
    if !path.is_file() {
        return Err(config_err(format!("no dataset manifest at {}; run gen first", path.display())));
    }
    let manifest = load_manifest(&path)?;
    Ok(LoadedDataset {
        root: manifest_root(&path),
        manifest,
    })
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.echo()?;
    let data = load_dataset(cfg)?;
    let seen = &data.manifest.seen_class_ids;
    let train = compact_labels(&data.split(Split::Train)?, seen)?;
    let init = init_params(cfg.model.seed, &cfg.model_dims(Some(seen.len())))?;
    let params = pretrain(&init, &train, &cfg.pretrain)?;
    eprintln!("pretrain: train accuracy {:.4}", classifier_accuracy(&params, &train)?);
    let path = cfg.out.join(PRETRAINED_CHECKPOINT);
    save_checkpoint(&params, &path)?;
    Ok(path)
}

/// Loads a checkpoint and checks it against the model section.
pub fn load_compatible(cfg: &ExperimentConfig, path: &Path) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    let want = cfg.model_dims(None);
    let got = params.dims();
    if got.input_dim != want.input_dim || got.hidden != want.hidden || got.latent != want.latent {
        return Err(Error::Checkpoint {
            field: "dims".into(),
            msg: format!(
                "{} has input {} hidden {} latent {}, config expects {} {} {}",
                path.display(),
                got.input_dim,
                got.hidden,
                got.latent,
                want.input_dim,
                want.hidden,
                want.latent
            ),
        });
    }
    Ok(params)
}

pub fn ttt_checkpoint_name(task: TaskKind) -> String {
    format!("ttt_{}.ckpt", task.name())
}

pub fn ttt_trace_name(task: TaskKind) -> String {
    format!("ttt_{}_trace.csv", task.name())
}

/// Adapts the checkpoint to the label-stripped query split.
pub fn adapt(cfg: &ExperimentConfig, params: &ModelParams, queries: &[ImageSample]) -> Result<(ModelParams, LossTrace)> {
    run_ttt(params, &strip_labels(queries), &cfg.ttt)
}

pub struct TttOutput {
    pub checkpoint: PathBuf,
    pub trace_csv: PathBuf,
    pub trace: LossTrace,
}

pub fn cmd_ttt(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<TttOutput> {
    cfg.echo()?;
    let params = load_compatible(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    let queries = data.split(Split::TestQuery)?;
    let (adapted, trace) = adapt(cfg, &params, &queries)?;
    let out = TttOutput {
        checkpoint: cfg.out.join(ttt_checkpoint_name(cfg.ttt.task)),
        trace_csv: cfg.out.join(ttt_trace_name(cfg.ttt.task)),
        trace,
    };
    save_checkpoint(&adapted, &out.checkpoint)?;
    fs::write(&out.trace_csv, out.trace.to_csv())?;
    Ok(out)
}

/// Metrics of one model under every configured protocol, keyed by protocol name.
pub type ProtocolReports = BTreeMap<String, MetricsReport>;

fn protocol_name(p: Protocol) -> String {
    match serde_json::to_value(p) {
        Ok(Value::String(s)) => s,
        _ => format!("{p:?}"),
    }
}

fn warn_if_clipped(cfg: &ExperimentConfig, gallery: &[ImageSample], seen: &[usize]) {
    for &p in &cfg.eval.protocols {
        let size = match p {
            Protocol::NonGeneralized => gallery.iter().filter(|s| !seen.contains(&s.class_id())).count(),
            _ => gallery.len(),
        };
        if cfg.eval.k > size {
            eprintln!(
                "warning: eval.k {} exceeds the {} search set of {size}; clipped to {size}",
                cfg.eval.k,
                protocol_name(p)
            );
        }
    }
}

pub fn evaluate_all(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    queries: &[ImageSample],
    gallery: &[ImageSample],
    seen: &[usize],
) -> Result<ProtocolReports> {
    cfg.eval
        .protocols
        .iter()
        .map(|&p| Ok((protocol_name(p), evaluate_protocol(params, queries, gallery, seen, p, cfg.eval.options())?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub reports: ProtocolReports,
}

pub fn eval_report_name(checkpoint: &Path) -> String {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    format!("eval_{stem}.json")
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.echo()?;
    let params = load_compatible(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    let queries = data.split(Split::TestQuery)?;
    let gallery = data.split(Split::TestGallery)?;
    let seen = &data.manifest.seen_class_ids;
    warn_if_clipped(cfg, &gallery, seen);
    let report = EvalReport {
        checkpoint: checkpoint
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string(),
        reports: evaluate_all(cfg, &params, &queries, &gallery, seen)?,
    };
    fs::write(cfg.out.join(eval_report_name(checkpoint)), to_json(&report)?)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub map: f64,
    pub prec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub reports: ProtocolReports,
    /// Change against the baseline, per protocol.
    pub delta: BTreeMap<String, Delta>,
    /// Mean task loss over the first and last quarter of full batches.
    pub loss_quarters: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: ProtocolReports,
    pub ttt_rotnet: VariantResult,
    pub ttt_jigsaw: VariantResult,
    pub ttt_barlow: VariantResult,
}

impl CompareReport {
    pub fn variants(&self) -> [(TaskKind, &VariantResult); 3] {
        [
            (TaskKind::Rotnet, &self.ttt_rotnet),
            (TaskKind::Jigsaw, &self.ttt_jigsaw),
            (TaskKind::Barlow, &self.ttt_barlow),
        ]
    }

    /// Plain-text table of every variant's metrics and deltas.
    pub fn table(&self) -> String {
        let mut out = String::from("variant        protocol          mAP@k     Prec@k    dmAP       dPrec\n");
        for (name, r) in &self.baseline {
            let _ = writeln!(
                out,
                "{:<14} {:<17} {:<9.4} {:<9.4} {:<10} -",
                "baseline", name, r.map_at_k, r.prec_at_k, "-"
            );
        }
        for (task, v) in self.variants() {
            for (name, r) in &v.reports {
                let d = v.delta[name];
                let _ = writeln!(
                    out,
                    "{:<14} {:<17} {:<9.4} {:<9.4} {:<+10.4} {:+.4}",
                    format!("ttt_{}", task.name()),
                    name,
                    r.map_at_k,
                    r.prec_at_k,
                    d.map,
                    d.prec
                );
            }
        }
        out
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Runs every adaptation variant from the same checkpoint and reports
/// each against the unadapted baseline.
pub fn cmd_compare(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<CompareReport> {
    cfg.echo()?;
    let params = load_compatible(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    let queries = data.split(Split::TestQuery)?;
    let gallery = data.split(Split::TestGallery)?;
    let seen = &data.manifest.seen_class_ids;
    warn_if_clipped(cfg, &gallery, seen);
    let baseline = evaluate_all(cfg, &params, &queries, &gallery, seen)?;
    let run = |task: TaskKind| -> Result<VariantResult> {
        let variant = ExperimentConfig {
            ttt: TTTConfig { task, ..cfg.ttt.clone() },
            ..cfg.clone()
        };
        let (adapted, trace) = adapt(&variant, &params, &queries)?;
        fs::write(cfg.out.join(format!("compare_{}_trace.csv", task.name())), trace.to_csv())?;
        let reports = evaluate_all(cfg, &adapted, &queries, &gallery, seen)?;
        let delta = reports
            .iter()
            .map(|(name, r)| {
                let b = &baseline[name];
                (
                    name.clone(),
                    Delta {
                        map: r.map_at_k - b.map_at_k,
                        prec: r.prec_at_k - b.prec_at_k,
                    },
                )
            })
            .collect();
        Ok(VariantResult {
            reports,
            delta,
            loss_quarters: trace.quarter_means(),
        })
    };
    let report = CompareReport {
        ttt_rotnet: run(TaskKind::Rotnet)?,
        ttt_jigsaw: run(TaskKind::Jigsaw)?,
        ttt_barlow: run(TaskKind::Barlow)?,
        baseline,
    };
    fs::write(cfg.out.join(COMPARE_REPORT), to_json(&report)?)?;
    Ok(report)
}
