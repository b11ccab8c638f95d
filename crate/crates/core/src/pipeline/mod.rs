//! Batch pipeline stages behind the command-line tool: synthesize or
//! ingest recordings, encode windows (cached), train, evaluate and run the
//! dataset statistics. Every stage writes the resolved [`RunConfig`] next
//! to its outputs.

pub mod cache;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    build_reference_store, eval_classifier, eval_cross_app, eval_overall, export_heatmap,
    load_streams, split_users, windows_of, CellMetric, MetricsReport, SplitSpec,
};
use crate::kinematics::{EncodingConfig, FeatureStream, FeatureWindow, N_FEATURES};
use crate::model::{ModelConfig, ModelKind, SequenceModel};
use crate::motion_io::{write_recording, AppLabel, DatasetManifest, ManifestEntry, SynthConfig, SyntheticDataset};
use crate::stats::analyze;
use crate::training::{class_users_from, train, write_history, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const MODEL_FILE: &str = "model.ckpt";

/// Model and training sizes when not given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Narrow networks and a short schedule; minutes on a laptop.
    Desk,
    /// Full-width networks and the long schedule.
    Full,
}

/// Flat run configuration. Unset optional fields are filled in by
/// [`RunConfig::resolve`] before any stage runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    /// Input dataset; `all` synthesizes one when absent.
    pub manifest: Option<PathBuf>,
    pub users: usize,
    pub minutes: f64,
    pub app_modulation: f64,
    pub apps: Vec<AppLabel>,
    pub scale: Scale,
    pub epochs: Option<usize>,
    pub span_seconds: Option<f64>,
    pub slm: Option<ModelConfig>,
    pub clm: Option<ModelConfig>,
    pub slm_train: Option<TrainConfig>,
    pub clm_train: Option<TrainConfig>,
    /// Window cache directory; defaults to `$XRID_CACHE_DIR`, then
    /// `<out>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: None,
            manifest: None,
            users: 5,
            minutes: 2.0,
            app_modulation: 1.0,
            apps: AppLabel::PLAY_ORDER.to_vec(),
            scale: Scale::Desk,
            epochs: None,
            span_seconds: None,
            slm: None,
            clm: None,
            slm_train: None,
            clm_train: None,
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fills every unset field. `n_users` sizes the classifier head.
    pub fn resolve(mut self, n_users: usize) -> Result<Self> {
        let (slm, clm, train, span) = match self.scale {
            Scale::Desk => {
                let slm = ModelConfig { window_size: 450, frame_step: 50, ..ModelConfig::slm_tiny() };
                let clm = ModelConfig { window_size: 600, frame_step: 100, ..ModelConfig::clm_tiny(n_users) };
                let train = TrainConfig {
                    epochs: 6,
                    batch_size: 16,
                    patience: 3,
                    max_batches_per_epoch: Some(10),
                    ..TrainConfig::default()
                };
                (slm, clm, train, 30.0)
            }
            Scale::Full => (ModelConfig::slm(), ModelConfig::clm(n_users), TrainConfig::default(), 600.0),
        };
        let slm = self.slm.take().unwrap_or(slm);
        let mut clm = self.clm.take().unwrap_or(clm);
        clm.n_classes = Some(n_users);
        slm.validate()?;
        clm.validate()?;
        let fill = |t: Option<TrainConfig>| {
            let mut t = t.unwrap_or_else(|| train.clone());
            t.seed = self.seed;
            if let Some(e) = self.epochs {
                t.epochs = e;
            }
            t.validate().map(|_| t)
        };
        self.slm_train = Some(fill(self.slm_train.take())?);
        self.clm_train = Some(fill(self.clm_train.take())?);
        self.slm = Some(slm);
        self.clm = Some(clm);
        let span = self.span_seconds.unwrap_or(span);
        if !(span > 0.0 && span.is_finite()) {
            return Err(Error::InvalidConfig(format!("span_seconds {span}")));
        }
        self.span_seconds = Some(span);
        if self.apps.is_empty() {
            return Err(Error::InvalidConfig("no applications configured".into()));
        }
        Ok(self)
    }

    fn resolved<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
        v.clone().ok_or_else(|| Error::InvalidConfig(format!("{name} not resolved")))
    }

    pub fn model_config(&self, kind: ModelKind) -> Result<ModelConfig> {
        match kind {
            ModelKind::Slm => Self::resolved(&self.slm, "slm"),
            ModelKind::Clm => Self::resolved(&self.clm, "clm"),
        }
    }

    pub fn train_config(&self, kind: ModelKind) -> Result<TrainConfig> {
        match kind {
            ModelKind::Slm => Self::resolved(&self.slm_train, "slm_train"),
            ModelKind::Clm => Self::resolved(&self.clm_train, "clm_train"),
        }
    }

    pub fn span(&self) -> Result<f64> {
        Self::resolved(&self.span_seconds, "span_seconds")
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    fn cache_dir_for(&self, out: &Path) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(cache::CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| out.join("cache"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Generates the synthetic dataset described by `cfg` into `out`.
pub fn synth_stage(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let synth = SynthConfig {
        apps: cfg.apps.clone(),
        app_modulation: cfg.app_modulation,
        ..SynthConfig::new(cfg.users, cfg.minutes, cfg.seed)
    };
    let manifest = SyntheticDataset::generate(&synth)?.write(out)?;
    cfg.write_to(out)?;
    Ok(manifest)
}

/// Parses and validates every recording listed in `manifest`, writing
/// normalized copies and a fresh manifest into `out`.
pub fn ingest_stage(cfg: &RunConfig, manifest: &DatasetManifest, out: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let rec = manifest.read_entry(e)?;
        let name = format!("{}_{}_{}.csv", e.user, e.app, e.session);
        write_recording(&rec, &out.join(&name))?;
        entries.push(ManifestEntry {
            path: name.into(),
            duration_s: rec.duration(),
            frame_range: None,
            ..e.clone()
        });
    }
    let m = DatasetManifest::new(entries, out);
    m.save(&out.join("manifest.json"))?;
    cfg.write_to(out)?;
    Ok(m)
}

/// Encoded streams and their windows for one manifest.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub streams: Vec<Arc<FeatureStream>>,
    pub windows: Vec<FeatureWindow>,
    pub key: String,
    pub cache_hit: bool,
}

/// Encodes `manifest` into windows, reusing a cached encoding when the
/// inputs and parameters are unchanged.
pub fn preprocess(manifest: &DatasetManifest, enc: &EncodingConfig, cache_dir: &Path) -> Result<Preprocessed> {
    let key = cache::cache_key(manifest, enc)?;
    let path = cache::cache_path(cache_dir, &key);
    let cached = path.is_file().then(|| cache::read_streams(&path, enc)).and_then(Result::ok);
    let cache_hit = cached.is_some();
    let streams = match cached {
        Some(s) => s,
        None => {
            let s = load_streams(manifest)?;
            cache::write_streams(&path, enc, &s)?;
            s
        }
    };
    let windows = windows_of(&streams, enc)?;
    Ok(Preprocessed { streams, windows, key, cache_hit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub cache_key: String,
    pub cache_hit: bool,
    pub encoding: EncodingConfig,
    pub n_streams: usize,
    pub n_windows: usize,
    pub window_shape: [usize; 2],
}

pub fn preprocess_stage(cfg: &RunConfig, manifest: &DatasetManifest, kind: ModelKind, out: &Path) -> Result<(Preprocessed, PreprocessSummary)> {
    let enc = cfg.model_config(kind)?.encoding()?;
    let p = preprocess(manifest, &enc, &cfg.cache_dir_for(out))?;
    let summary = PreprocessSummary {
        cache_key: p.key.clone(),
        cache_hit: p.cache_hit,
        encoding: enc,
        n_streams: p.streams.len(),
        n_windows: p.windows.len(),
        window_shape: [enc.window_size, N_FEATURES],
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("preprocess.json"), &summary)?;
    cfg.write_to(out)?;
    Ok((p, summary))
}

fn absolute(manifest: &DatasetManifest, mut m: DatasetManifest) -> DatasetManifest {
    for e in &mut m.entries {
        e.path = manifest.resolve(e);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub validated_on_train: bool,
    pub epochs_run: usize,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
    pub n_test_windows: usize,
}

/// Splits `manifest` (users for the similarity model, time for the
/// classifier), trains, and writes the checkpoint, loss history and split
/// manifests into `out`.
pub fn train_stage(cfg: &RunConfig, manifest: &DatasetManifest, kind: ModelKind, out: &Path) -> Result<TrainSummary> {
    let mcfg = cfg.model_config(kind)?;
    let enc = mcfg.encoding()?;
    let spec = match kind {
        ModelKind::Slm => SplitSpec::UserDisjoint,
        ModelKind::Clm => SplitSpec::Temporal { window_size: enc.window_size, frame_step: enc.frame_step },
    };
    let split = split_users(manifest, spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, m) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        absolute(manifest, m.clone()).save(&out.join(format!("{name}_manifest.json")))?;
    }
    let cache_dir = cfg.cache_dir_for(out);
    let windows = |m: &DatasetManifest| -> Result<Vec<FeatureWindow>> {
        if m.entries.is_empty() {
            return Ok(Vec::new());
        }
        Ok(preprocess(m, &enc, &cache_dir)?.windows)
    };
    let (tr, va, te) = (windows(&split.train)?, windows(&split.val)?, windows(&split.test)?);
    let mut tcfg = cfg.train_config(kind)?;
    tcfg.checkpoint = Some(out.join(MODEL_FILE));
    let model = SequenceModel::new(mcfg, cfg.seed)?;
    let outcome = train(model, &tr, &va, &tcfg)?;
    write_history(&out.join("history.jsonl"), &outcome.history)?;
    let summary = TrainSummary {
        kind,
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
        validated_on_train: outcome.validated_on_train,
        epochs_run: outcome.history.last().map_or(0, |r| r.epoch),
        n_train_windows: tr.len(),
        n_val_windows: va.len(),
        n_test_windows: te.len(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    cfg.write_to(out)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Overall,
    CrossApp,
    Sequence,
    Top3,
    Classifier,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] =
        [EvalMode::Overall, EvalMode::CrossApp, EvalMode::Sequence, EvalMode::Top3, EvalMode::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Overall => "overall",
            EvalMode::CrossApp => "cross-app",
            EvalMode::Sequence => "sequence",
            EvalMode::Top3 => "top3",
            EvalMode::Classifier => "classifier",
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown evaluation mode {s:?}")))
    }
}

/// Files written by one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub mode: EvalMode,
    pub files: Vec<PathBuf>,
    /// Headline number: overall accuracy or grid diagonal mean.
    pub accuracy: f64,
    pub off_diagonal: Option<f64>,
}

/// Scores the checkpoint in `model_dir` on `test` (defaults to the test
/// split saved by training).
pub fn evaluate_stage(
    cfg: &RunConfig,
    mode: EvalMode,
    model_dir: &Path,
    test: Option<&DatasetManifest>,
    out: &Path,
) -> Result<EvalOutput> {
    let mut r = evaluate_modes(cfg, &[mode], model_dir, test, out)?;
    Ok(r.remove(0))
}

/// Runs several evaluations of one checkpoint, encoding and embedding the
/// test windows once. All modes must suit the same model kind.
pub fn evaluate_modes(
    cfg: &RunConfig,
    modes: &[EvalMode],
    model_dir: &Path,
    test: Option<&DatasetManifest>,
    out: &Path,
) -> Result<Vec<EvalOutput>> {
    let saved;
    let test = match test {
        Some(m) => m,
        None => {
            saved = DatasetManifest::load(&model_dir.join("test_manifest.json"))?;
            &saved
        }
    };
    let grid = |m: &EvalMode| matches!(m, EvalMode::CrossApp | EvalMode::Sequence | EvalMode::Top3);
    if modes.iter().any(grid) {
        let present = test.apps();
        if let Some(missing) = cfg.apps.iter().find(|a| !present.contains(a)) {
            return Err(Error::MissingApp(missing.to_string()));
        }
    }
    let (model, extra) = SequenceModel::load(&model_dir.join(MODEL_FILE))?;
    for mode in modes {
        let want = if *mode == EvalMode::Classifier { ModelKind::Clm } else { ModelKind::Slm };
        if model.config.kind != want {
            return Err(Error::InvalidConfig(format!(
                "mode {} needs a {:?} checkpoint, found {:?}",
                mode.as_str(),
                want,
                model.config.kind
            )));
        }
    }
    let enc = model.config.encoding()?;
    let windows = preprocess(test, &enc, &cfg.cache_dir_for(out))?.windows;
    let span = cfg.span()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = |mode: EvalMode, r: MetricsReport, stem: &str| -> Result<EvalOutput> {
        let json = out.join(format!("{stem}.json"));
        let csv = out.join(format!("{stem}_per_user.csv"));
        r.save_json(&json)?;
        r.write_per_user_csv(&csv)?;
        Ok(EvalOutput { mode, files: vec![json, csv], accuracy: r.overall_accuracy, off_diagonal: None })
    };
    let mut set = None;
    let mut results = Vec::with_capacity(modes.len());
    for &mode in modes {
        let result = match mode {
            EvalMode::Classifier => {
                let users = class_users_from(&extra)?;
                report(mode, eval_classifier(&model, &users, &windows, span)?, "classifier")?
            }
            EvalMode::Overall => {
                let set = match &set {
                    Some(s) => s,
                    None => set.insert(build_reference_store(&model, &windows, &test.apps())?),
                };
                report(mode, eval_overall(set, Some(span))?, "overall")?
            }
            _ => {
                let set = match &set {
                    Some(s) => s,
                    None => set.insert(build_reference_store(&model, &windows, &test.apps())?),
                };
                let metric = match mode {
                    EvalMode::CrossApp => CellMetric::NnAccuracy,
                    EvalMode::Sequence => CellMetric::SequenceAccuracy { span_seconds: span },
                    _ => CellMetric::Top3SequenceAccuracy { span_seconds: span },
                };
                let m = eval_cross_app(set, &cfg.apps, metric)?;
                let path = out.join(format!("cross_app_{}.csv", metric.tag()));
                let raw = export_heatmap(&m, &path)?;
                EvalOutput {
                    mode,
                    files: vec![path, raw],
                    accuracy: m.diagonal_mean(),
                    off_diagonal: Some(m.off_diagonal_mean()),
                }
            }
        };
        results.push(result);
    }
    cfg.write_to(out)?;
    Ok(results)
}

/// Writes the movement/pitch table, ANOVA and post-hoc CSVs.
pub fn stats_stage(cfg: &RunConfig, manifest: &DatasetManifest, out: &Path) -> Result<Vec<PathBuf>> {
    let recordings = manifest
        .entries
        .iter()
        .map(|e| manifest.read_entry(e))
        .collect::<Result<Vec<_>>>()?;
    let report = analyze(&recordings)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = vec![out.join("movement_pitch.csv"), out.join("anova.csv"), out.join("posthoc.csv")];
    report.write_table(&files[0])?;
    report.write_anova(&files[1])?;
    report.write_posthoc(&files[2])?;
    write_json(&out.join("stats.json"), &report)?;
    cfg.write_to(out)?;
    Ok(files)
}

/// Everything `run_all` produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllOutputs {
    pub config: RunConfig,
    pub slm: TrainSummary,
    pub clm: TrainSummary,
    pub evaluations: Vec<EvalOutput>,
    pub stats_files: Vec<PathBuf>,
}

/// Dataset → encoding → both models → every evaluation → statistics.
/// `stage` is called with each stage name before it starts.
pub fn run_all(cfg: RunConfig, out: &Path, mut stage: impl FnMut(&str)) -> Result<AllOutputs> {
    let named = |name: &'static str| move |e: Error| Error::Stage { stage: name, source: Box::new(e) };
    let manifest = match &cfg.manifest {
        Some(p) => DatasetManifest::load(p).map_err(named("ingest"))?,
        None => {
            stage("synth");
            let unresolved = cfg.clone();
            synth_stage(&unresolved, &out.join("data")).map_err(named("synth"))?
        }
    };
    let cfg = cfg.resolve(manifest.users().len())?;
    cfg.write_to(out)?;

    stage("preprocess");
    for (kind, dir) in [(ModelKind::Slm, "preprocess/slm"), (ModelKind::Clm, "preprocess/clm")] {
        preprocess_stage(&cfg, &manifest, kind, &out.join(dir)).map_err(named("preprocess"))?;
    }
    stage("train slm");
    let slm = train_stage(&cfg, &manifest, ModelKind::Slm, &out.join("slm")).map_err(named("train"))?;
    stage("train clm");
    let clm = train_stage(&cfg, &manifest, ModelKind::Clm, &out.join("clm")).map_err(named("train"))?;

    stage("evaluate slm");
    let slm_modes = [EvalMode::Overall, EvalMode::CrossApp, EvalMode::Sequence, EvalMode::Top3];
    let mut evaluations =
        evaluate_modes(&cfg, &slm_modes, &out.join("slm"), None, &out.join("eval")).map_err(named("evaluate"))?;
    stage("evaluate clm");
    evaluations.extend(
        evaluate_modes(&cfg, &[EvalMode::Classifier], &out.join("clm"), None, &out.join("eval"))
            .map_err(named("evaluate"))?,
    );
    stage("stats");
    let stats_files = stats_stage(&cfg, &manifest, &out.join("stats")).map_err(named("stats"))?;
    let all = AllOutputs { config: cfg, slm, clm, evaluations, stats_files };
    write_json(&out.join("summary.json"), &all)?;
    Ok(all)
}
