//! Experiment orchestration.
//!
//! A run covers a grid of (trial, SNR, calibration mode). For every cell the
//! data is loaded (or simulated from audio), calibrated and aligned; the
//! threshold is chosen on the validation split and applied to the test
//! split. Results are aggregated into tables with 95% confidence intervals
//! over trials, and every output directory gets a `manifest.json` from
//! which the run can be repeated.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::calib::{apply_calibration, CalibrationMode, CalibrationSides};
use crate::channel::{simulate, stream_seed, ChannelConfig, SnrSpec};
use crate::detect::{
    evaluate_at, score_grid, sweep_threshold, threshold_gap_analysis, write_eval_report,
    DetectionEvent, EvalReport, FileCurves, GapResult, MatchingConfig, SweepMode, Threshold,
    DEFAULT_GRID_POINTS,
};
use crate::dsp::{hfcc, log_mel, preprocess, spectrogram_to_sequence, SpectrogramKind};
use crate::dtw::{multi_sample_scores, Aggregation, AlignConfig, CostPolicy, Recurrence, StepSizes};
use crate::error::{KwsError, Result};
use crate::fixtures::ToyWorld;
use crate::tensorio::{
    read_annotations, read_center_bank, read_embedding_sequence, read_wav, write_detections,
    AnnotationSet, CenterBank, EmbeddingSequence,
};

/// Replaced by the SNR value in configured paths.
pub const SNR_PLACEHOLDER: &str = "{snr}";
/// Replaced by the trial name in configured paths.
pub const TRIAL_PLACEHOLDER: &str = "{trial}";

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    /// ESEQ files; one directory per SNR via the `{snr}` placeholder.
    #[default]
    Embeddings,
    /// WAV files, passed through the channel at each SNR and turned into
    /// standardized spectral features.
    Audio { features: SpectrogramKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    /// Evenly spaced over the range of validation scores.
    Auto { points: usize },
    Values(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto {
            points: DEFAULT_GRID_POINTS,
        }
    }
}

impl GridSpec {
    pub fn resolve(&self, validation: &[FileCurves]) -> Vec<f64> {
        match self {
            GridSpec::Auto { points } => score_grid(validation, *points),
            GridSpec::Values(v) => v.clone(),
        }
    }
}

fn default_modes() -> Vec<CalibrationMode> {
    vec![CalibrationMode::None, CalibrationMode::Combined]
}

/// Declarative description of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// One sub-directory of templates per keyword.
    pub queries_dir: String,
    pub validation_dir: String,
    pub validation_annotations: String,
    pub test_dir: String,
    pub test_annotations: String,
    #[serde(default)]
    pub bank: Option<String>,
    #[serde(default)]
    pub input: InputKind,
    #[serde(default = "default_modes")]
    pub modes: Vec<CalibrationMode>,
    /// Evaluate all four calibration modes.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default)]
    pub sides: CalibrationSides,
    #[serde(default)]
    pub steps: StepSizes,
    #[serde(default)]
    pub recurrence: Recurrence,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub sweep_mode: SweepMode,
    /// Empty means a single row without channel simulation.
    #[serde(default)]
    pub snr_list: Vec<f64>,
    /// Trial names substituted for `{trial}`; empty means one unnamed trial.
    #[serde(default)]
    pub trials: Vec<String>,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub seed: u64,
    /// Annotation label of non-keyword events, ignored in evaluation.
    #[serde(default)]
    pub open_set_label: Option<String>,
}

impl PipelineConfig {
    pub fn new(
        queries_dir: impl Into<String>,
        validation_dir: impl Into<String>,
        validation_annotations: impl Into<String>,
        test_dir: impl Into<String>,
        test_annotations: impl Into<String>,
    ) -> Self {
        Self {
            queries_dir: queries_dir.into(),
            validation_dir: validation_dir.into(),
            validation_annotations: validation_annotations.into(),
            test_dir: test_dir.into(),
            test_annotations: test_annotations.into(),
            bank: None,
            input: InputKind::default(),
            modes: default_modes(),
            ablation: false,
            sides: CalibrationSides::default(),
            steps: StepSizes::default(),
            recurrence: Recurrence::default(),
            aggregation: Aggregation::default(),
            matching: MatchingConfig::default(),
            grid: GridSpec::default(),
            sweep_mode: SweepMode::default(),
            snr_list: Vec::new(),
            trials: Vec::new(),
            channel: ChannelConfig::default(),
            seed: 0,
            open_set_label: None,
        }
    }

    /// The layout written by [`crate::fixtures::write_world`].
    pub fn for_world_dir(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        let p = |s: &str| root.join(s).to_string_lossy().into_owned();
        Self {
            bank: Some(p("bank.cbnk")),
            ..Self::new(
                p("queries"),
                p("validation"),
                p("validation.tsv"),
                p("test"),
                p("test.tsv"),
            )
        }
    }

    /// Reads a config, or the config stored in a run manifest. Relative paths
    /// are resolved against the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| KwsError::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| KwsError::Config(format!("{}: {e}", path.display())))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        let mut cfg: Self = serde_json::from_value(value)
            .map_err(|e| KwsError::Config(format!("{}: {e}", path.display())))?;
        // absolute, so a manifest written from this config is valid anywhere
        let base = std::path::absolute(path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| KwsError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_relative(&base);
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |s: &mut String| {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        };
        fix(&mut self.queries_dir);
        fix(&mut self.validation_dir);
        fix(&mut self.validation_annotations);
        fix(&mut self.test_dir);
        fix(&mut self.test_annotations);
        if let Some(b) = self.bank.as_mut() {
            fix(b);
        }
    }

    /// Modes in table column order.
    pub fn effective_modes(&self) -> Vec<CalibrationMode> {
        if self.ablation {
            CalibrationMode::ALL.to_vec()
        } else {
            let mut seen = BTreeSet::new();
            self.modes
                .iter()
                .copied()
                .filter(|m| seen.insert(m.as_str()))
                .collect()
        }
    }

    fn paths(&self) -> Vec<&str> {
        let mut p = vec![
            self.queries_dir.as_str(),
            self.validation_dir.as_str(),
            self.validation_annotations.as_str(),
            self.test_dir.as_str(),
            self.test_annotations.as_str(),
        ];
        if let Some(b) = &self.bank {
            p.push(b);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let modes = self.effective_modes();
        if modes.is_empty() {
            return Err(KwsError::Config("no calibration modes selected".into()));
        }
        if self.bank.is_none() && modes.iter().any(|&m| m != CalibrationMode::None) {
            return Err(KwsError::Config("calibration modes other than none need a center bank".into()));
        }
        StepSizes::new(self.steps.as_slice().to_vec()).map_err(|e| KwsError::Config(e.to_string()))?;
        match &self.grid {
            GridSpec::Auto { points } if *points == 0 => {
                return Err(KwsError::Config("grid needs at least one point".into()))
            }
            GridSpec::Values(v)
                if v.is_empty() || v.iter().any(|t| !t.is_finite()) || v.windows(2).any(|w| w[0] > w[1]) =>
            {
                return Err(KwsError::Config("grid values must be finite, sorted and non-empty".into()))
            }
            _ => {}
        }
        if self.snr_list.iter().any(|s| !s.is_finite()) {
            return Err(KwsError::Config("SNR values must be finite".into()));
        }
        if !self.snr_list.is_empty() {
            match self.input {
                InputKind::Embeddings => {
                    let split_paths = [&self.queries_dir, &self.validation_dir, &self.test_dir];
                    if split_paths.iter().any(|p| !p.contains(SNR_PLACEHOLDER)) {
                        return Err(KwsError::Config(format!(
                            "embedding inputs with an SNR list need {SNR_PLACEHOLDER} in the query and split directories"
                        )));
                    }
                }
                InputKind::Audio { .. } => self
                    .channel
                    .validate()
                    .map_err(|e| KwsError::Config(e.to_string()))?,
            }
        }
        if self.trials.len() > 1 && !self.paths().iter().any(|p| p.contains(TRIAL_PLACEHOLDER)) {
            return Err(KwsError::Config(format!(
                "several trials need {TRIAL_PLACEHOLDER} in at least one path"
            )));
        }
        Ok(())
    }

    pub fn experiment_options(&self) -> ExperimentOptions {
        ExperimentOptions {
            sides: self.sides,
            align: AlignConfig {
                steps: self.steps.clone(),
                recurrence: self.recurrence,
                aggregation: self.aggregation,
                cost_policy: CostPolicy::UnitNorm,
            },
            matching: self.matching,
            grid: self.grid.clone(),
            sweep_mode: self.sweep_mode,
        }
    }

    fn trial_names(&self) -> Vec<String> {
        if self.trials.is_empty() {
            vec![String::new()]
        } else {
            self.trials.clone()
        }
    }

    fn snr_rows(&self) -> Vec<Option<f64>> {
        if self.snr_list.is_empty() {
            vec![None]
        } else {
            self.snr_list.iter().copied().map(Some).collect()
        }
    }
}

fn substitute(path: &str, snr: Option<f64>, trial: &str) -> PathBuf {
    let mut s = path.replace(TRIAL_PLACEHOLDER, trial);
    if let Some(v) = snr {
        s = s.replace(SNR_PLACEHOLDER, &v.to_string());
    }
    PathBuf::from(s)
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(KwsError::Config(format!("{} does not exist", path.display())))
    }
}

/// Label used for an SNR row in tables and file names.
pub fn snr_label(snr: Option<f64>) -> String {
    snr.map_or_else(|| "clean".to_string(), |v| v.to_string())
}

/// Recordings of one split with their truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub files: Vec<(String, EmbeddingSequence)>,
    pub truth: AnnotationSet,
}

/// Everything one (trial, SNR) cell needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bank: Option<CenterBank>,
    pub queries: BTreeMap<String, Vec<EmbeddingSequence>>,
    pub validation: SplitData,
    pub test: SplitData,
}

impl From<&ToyWorld> for Dataset {
    fn from(w: &ToyWorld) -> Self {
        let split = |s: &crate::fixtures::Split| SplitData {
            files: s
                .recordings
                .iter()
                .map(|r| (r.label().unwrap_or_default().to_string(), r.clone()))
                .collect(),
            truth: s.truth.clone(),
        };
        Self {
            bank: Some(w.bank.clone()),
            queries: w.queries.clone(),
            validation: split(&w.validation),
            test: split(&w.test),
        }
    }
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| KwsError::io(dir, e))? {
        let p = entry.map_err(|e| KwsError::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Reads an ESEQ file, re-normalizing rows if they are not unit norm already.
pub fn load_sequence(path: &Path) -> Result<EmbeddingSequence> {
    let seq = read_embedding_sequence(path)?;
    if seq.is_unit_norm() {
        Ok(seq)
    } else {
        seq.normalize_rows()
    }
}

/// Channel applied to audio inputs: configuration, target SNR, and the seed
/// of the whole cell.
#[derive(Debug, Clone, Copy)]
pub struct ChannelSetting {
    pub config: ChannelConfig,
    pub snr: SnrSpec,
}

/// WAV file to a standardized feature sequence, optionally through the channel.
pub fn audio_to_sequence(
    path: &Path,
    features: SpectrogramKind,
    channel: Option<ChannelSetting>,
) -> Result<EmbeddingSequence> {
    let pre = preprocess(&read_wav(path)?)?;
    let audio = match channel {
        Some(ch) if !pre.silent => simulate(&pre.audio, &ch.config, ch.snr)?.audio,
        _ => pre.audio,
    };
    let spec = match features {
        SpectrogramKind::LogMel => log_mel(&audio)?,
        SpectrogramKind::Hfcc => hfcc(&audio)?,
    };
    spectrogram_to_sequence(&spec)
}

struct Loader<'a> {
    input: &'a InputKind,
    channel: ChannelConfig,
    snr: Option<f64>,
    seed: u64,
}

impl Loader<'_> {
    fn ext(&self) -> &'static str {
        match self.input {
            InputKind::Embeddings => "eseq",
            InputKind::Audio { .. } => "wav",
        }
    }

    fn load(&self, path: &Path, key: &str) -> Result<EmbeddingSequence> {
        match self.input {
            InputKind::Embeddings => load_sequence(path),
            InputKind::Audio { features } => {
                let channel = self.snr.map(|snr| ChannelSetting {
                    config: ChannelConfig {
                        seed: stream_seed(self.seed, key),
                        ..self.channel
                    },
                    snr: SnrSpec::new(snr),
                });
                audio_to_sequence(path, *features, channel)
            }
        }
    }
}

/// Templates from `dir/<keyword>/*`, labelled with the directory name.
pub fn load_queries(dir: &Path, ext: &str) -> Result<BTreeMap<String, Vec<EmbeddingSequence>>> {
    load_queries_with(dir, ext, &|p, _| load_sequence(p))
}

type LoadFn<'a> = dyn Fn(&Path, &str) -> Result<EmbeddingSequence> + Sync + 'a;

fn load_queries_with(dir: &Path, ext: &str, load: &LoadFn) -> Result<BTreeMap<String, Vec<EmbeddingSequence>>> {
    require_exists(dir)?;
    let mut keyword_dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| KwsError::io(dir, e))? {
        let p = entry.map_err(|e| KwsError::io(dir, e))?.path();
        if p.is_dir() {
            keyword_dirs.push(p);
        }
    }
    keyword_dirs.sort();
    let mut out = BTreeMap::new();
    for kd in keyword_dirs {
        let keyword = kd.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let shots = sorted_entries(&kd, ext)?
            .par_iter()
            .map(|p| Ok(load(p, &format!("query/{keyword}/{}", file_stem(p)))?.with_label(Some(keyword.clone()))))
            .collect::<Result<Vec<_>>>()?;
        if !shots.is_empty() {
            out.insert(keyword, shots);
        }
    }
    if out.is_empty() {
        return Err(KwsError::Config(format!("{}: no query templates", dir.display())));
    }
    Ok(out)
}

/// Recordings `dir/*.<ext>`, keyed by file stem.
pub fn load_recordings(dir: &Path, ext: &str) -> Result<Vec<(String, EmbeddingSequence)>> {
    load_recordings_with(dir, ext, "", &|p, _| load_sequence(p))
}

fn load_recordings_with(dir: &Path, ext: &str, split: &str, load: &LoadFn) -> Result<Vec<(String, EmbeddingSequence)>> {
    require_exists(dir)?;
    let files = sorted_entries(dir, ext)?;
    if files.is_empty() {
        return Err(KwsError::Config(format!("{}: no .{ext} recordings", dir.display())));
    }
    files
        .par_iter()
        .map(|p| {
            let id = file_stem(p);
            Ok((id.clone(), load(p, &format!("{split}/{id}"))?))
        })
        .collect()
}

/// Annotations checked against the known keywords, with open-set events removed.
pub fn load_truth(path: &Path, keywords: &[String], open_set: Option<&str>) -> Result<AnnotationSet> {
    require_exists(path)?;
    let set = read_annotations(path)?;
    set.validate_keywords(keywords, open_set)?;
    Ok(AnnotationSet::new(
        set.events
            .into_iter()
            .filter(|e| Some(e.keyword.as_str()) != open_set)
            .collect(),
    ))
}

/// Loads (or simulates) the data of one grid cell.
pub fn load_dataset(cfg: &PipelineConfig, snr: Option<f64>, trial: &str) -> Result<Dataset> {
    let cell_seed = stream_seed(cfg.seed, &format!("{trial}/{}", snr_label(snr)));
    let loader = Loader {
        input: &cfg.input,
        channel: cfg.channel,
        snr,
        seed: cell_seed,
    };
    let load = |p: &Path, key: &str| loader.load(p, key);
    let path = |p: &str| substitute(p, snr, trial);

    let bank = match &cfg.bank {
        Some(b) => {
            let p = path(b);
            require_exists(&p)?;
            Some(read_center_bank(&p)?)
        }
        None => None,
    };
    let queries = load_queries_with(&path(&cfg.queries_dir), loader.ext(), &load)?;
    let keywords: Vec<String> = queries.keys().cloned().collect();
    if let Some(bank) = &bank {
        if let Some(k) = keywords.iter().find(|k| bank.keyword_index(k).is_none()) {
            return Err(KwsError::Annotation(format!("query keyword {k:?} is not in the center bank")));
        }
    }
    let open = cfg.open_set_label.as_deref();
    let split = |dir: &str, tsv: &str, name: &str| -> Result<SplitData> {
        Ok(SplitData {
            files: load_recordings_with(&path(dir), loader.ext(), name, &load)?,
            truth: load_truth(&path(tsv), &keywords, open)?,
        })
    };
    Ok(Dataset {
        validation: split(&cfg.validation_dir, &cfg.validation_annotations, "validation")?,
        test: split(&cfg.test_dir, &cfg.test_annotations, "test")?,
        bank,
        queries,
    })
}

/// Per-mode options shared by all cells.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct ExperimentOptions {
    pub sides: CalibrationSides,
    pub align: AlignConfig,
    pub matching: MatchingConfig,
    pub grid: GridSpec,
    pub sweep_mode: SweepMode,
}


fn calibrate(seq: &EmbeddingSequence, bank: Option<&CenterBank>, mode: CalibrationMode) -> Result<EmbeddingSequence> {
    match (mode, bank) {
        (CalibrationMode::None, _) => Ok(seq.clone()),
        (m, Some(b)) => apply_calibration(seq, b, m),
        (m, None) => Err(KwsError::Config(format!("mode {m} needs a center bank"))),
    }
}

/// Score curves of every keyword over every recording.
pub fn score_recordings(
    queries: &BTreeMap<String, Vec<EmbeddingSequence>>,
    recordings: &[(String, EmbeddingSequence)],
    align: &AlignConfig,
) -> Result<Vec<FileCurves>> {
    recordings
        .par_iter()
        .map(|(id, seq)| {
            let curves = queries
                .values()
                .map(|q| multi_sample_scores(q, seq, align))
                .collect::<Result<Vec<_>>>()?;
            Ok(FileCurves {
                file_id: id.clone(),
                curves,
            })
        })
        .collect()
}

/// Scores a dataset under one calibration mode.
pub fn score_dataset(
    data: &Dataset,
    mode: CalibrationMode,
    opts: &ExperimentOptions,
) -> Result<(Vec<FileCurves>, Vec<FileCurves>)> {
    let bank = data.bank.as_ref();
    let queries = data
        .queries
        .iter()
        .map(|(k, v)| {
            let cal = v.iter().map(|q| calibrate(q, bank, mode)).collect::<Result<Vec<_>>>()?;
            Ok((k.clone(), cal))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let test_mode = match opts.sides {
        CalibrationSides::Both => mode,
        CalibrationSides::Query => CalibrationMode::None,
    };
    let split = |s: &SplitData| -> Result<Vec<(String, EmbeddingSequence)>> {
        s.files
            .par_iter()
            .map(|(id, seq)| Ok((id.clone(), calibrate(seq, bank, test_mode)?)))
            .collect()
    };
    let align = AlignConfig {
        cost_policy: if mode == CalibrationMode::None {
            CostPolicy::UnitNorm
        } else {
            CostPolicy::Calibrated
        },
        ..opts.align.clone()
    };
    Ok((
        score_recordings(&queries, &split(&data.validation)?, &align)?,
        score_recordings(&queries, &split(&data.test)?, &align)?,
    ))
}

/// Result of one (trial, SNR, mode) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub mode: CalibrationMode,
    /// Validation-estimated threshold.
    pub threshold: Threshold,
    pub validation: EvalReport,
    pub test: EvalReport,
    pub gap: GapResult,
    #[serde(skip)]
    pub detections: Vec<DetectionEvent>,
}

pub fn run_mode(data: &Dataset, mode: CalibrationMode, opts: &ExperimentOptions) -> Result<ModeOutcome> {
    let (val, test) = score_dataset(data, mode, opts)?;
    let grid = opts.grid.resolve(&val);
    let sweep = sweep_threshold(&val, &data.validation.truth, &grid, &opts.matching, opts.sweep_mode)?;
    let test_report = evaluate_at(&test, &data.test.truth, &sweep.best, &opts.matching)?;
    let gap = threshold_gap_analysis(
        (&val, &data.validation.truth),
        (&test, &data.test.truth),
        &grid,
        &opts.matching,
    )?;
    Ok(ModeOutcome {
        mode,
        detections: crate::detect::detect_all(&test, &sweep.best),
        threshold: sweep.best,
        validation: sweep.best_report,
        test: test_report,
        gap,
    })
}

/// One finished grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial: String,
    pub snr_db: Option<f64>,
    pub outcome: ModeOutcome,
}

impl RunRecord {
    fn stem(&self) -> String {
        let trial = if self.trial.is_empty() { "run" } else { &self.trial };
        format!("{trial}_{}_{}", snr_label(self.snr_db), self.outcome.mode)
    }
}

/// Every (trial, SNR, mode) cell, in that nesting order.
pub fn run_grid(cfg: &PipelineConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let opts = cfg.experiment_options();
    let modes = cfg.effective_modes();
    let cells: Vec<(String, Option<f64>)> = cfg
        .trial_names()
        .into_iter()
        .flat_map(|t| cfg.snr_rows().into_iter().map(move |s| (t.clone(), s)))
        .collect();
    let per_cell = cells
        .par_iter()
        .map(|(trial, snr)| {
            let data = load_dataset(cfg, *snr, trial)?;
            modes
                .par_iter()
                .map(|&m| {
                    Ok(RunRecord {
                        trial: trial.clone(),
                        snr_db: *snr,
                        outcome: run_mode(&data, m, &opts)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// Mean and half-width of the 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Interval {
    /// Student-t interval; a single value has half-width 0.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        if n < 2 {
            return Self { mean, half_width: 0.0, n };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        Self {
            mean,
            half_width: t * (var / n as f64).sqrt(),
            n,
        }
    }

    fn cell(&self, scale: f64, digits: usize) -> String {
        format!("{:.*} ± {:.*}", digits, self.mean * scale, digits, self.half_width * scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub snr_db: Option<f64>,
    /// F-score in percent per mode, validation split.
    pub validation: Vec<Interval>,
    /// F-score in percent per mode, test split.
    pub test: Vec<Interval>,
}

/// F-scores per SNR (rows) and calibration mode (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub modes: Vec<CalibrationMode>,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    pub fn from_runs(runs: &[RunRecord], modes: &[CalibrationMode], snrs: &[Option<f64>]) -> Self {
        let collect = |snr: Option<f64>, m: CalibrationMode, pick: fn(&ModeOutcome) -> f64| {
            let v: Vec<f64> = runs
                .iter()
                .filter(|r| r.snr_db == snr && r.outcome.mode == m)
                .map(|r| 100.0 * pick(&r.outcome))
                .collect();
            Interval::from_values(&v)
        };
        Self {
            modes: modes.to_vec(),
            rows: snrs
                .iter()
                .map(|&snr| TableRow {
                    snr_db: snr,
                    validation: modes.iter().map(|&m| collect(snr, m, |o| o.validation.micro_f)).collect(),
                    test: modes.iter().map(|&m| collect(snr, m, |o| o.test.micro_f)).collect(),
                })
                .collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut header = vec!["snr_db".to_string()];
        for split in ["validation", "test"] {
            header.extend(self.modes.iter().map(|m| format!("{split}: {}", m.table_label())));
        }
        let mut out = header.join("\t") + "\n";
        for r in &self.rows {
            let mut cells = vec![snr_label(r.snr_db)];
            cells.extend(r.validation.iter().chain(&r.test).map(|c| c.cell(1.0, 1)));
            out += &(cells.join("\t") + "\n");
        }
        out
    }
}

/// Output of [`run_end_to_end`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub runs: Vec<RunRecord>,
    pub table: ResultTable,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| KwsError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| KwsError::io(path, e))
}

/// Run manifest: the command, its resolved configuration and the tool version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
}

pub fn write_manifest(dir: impl AsRef<Path>, command: &str, config: &impl Serialize) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(config).expect("serializable config"),
    };
    write_text(&dir.join(MANIFEST_FILE), &to_json(&m))
}

/// Runs the whole grid and writes per-cell reports and detections, the
/// aggregate table (`table.tsv`, `table.json`) and the manifest to `out_dir`.
pub fn run_end_to_end(cfg: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<EndToEndReport> {
    let out = out_dir.as_ref();
    let runs = run_grid(cfg)?;
    let table = ResultTable::from_runs(&runs, &cfg.effective_modes(), &cfg.snr_rows());
    write_manifest(out, "end-to-end", cfg)?;
    let runs_dir = out.join("runs");
    create_dir(&runs_dir)?;
    for r in &runs {
        write_text(&runs_dir.join(format!("{}.json", r.stem())), &to_json(r))?;
        write_detections(&r.outcome.detections, runs_dir.join(format!("{}.tsv", r.stem())))?;
    }
    write_text(&out.join("table.tsv"), &table.to_tsv())?;
    write_text(&out.join("table.json"), &to_json(&table))?;
    Ok(EndToEndReport { runs, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub snr_db: Option<f64>,
    pub mode: CalibrationMode,
    pub delta_threshold: Interval,
    pub delta_f: Interval,
}

/// Threshold gaps per SNR and mode, averaged over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
}

impl GapTable {
    pub fn from_runs(runs: &[RunRecord], modes: &[CalibrationMode], snrs: &[Option<f64>]) -> Self {
        let mut rows = Vec::new();
        for &snr in snrs {
            for &mode in modes {
                let cell: Vec<&GapResult> = runs
                    .iter()
                    .filter(|r| r.snr_db == snr && r.outcome.mode == mode)
                    .map(|r| &r.outcome.gap)
                    .collect();
                rows.push(GapRow {
                    snr_db: snr,
                    mode,
                    delta_threshold: Interval::from_values(&cell.iter().map(|g| g.delta_threshold).collect::<Vec<_>>()),
                    delta_f: Interval::from_values(&cell.iter().map(|g| g.delta_f).collect::<Vec<_>>()),
                });
            }
        }
        Self { rows }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("snr_db\tmode\tdelta_threshold\tdelta_f\n");
        for r in &self.rows {
            out += &format!(
                "{}\t{}\t{}\t{}\n",
                snr_label(r.snr_db),
                r.mode,
                r.delta_threshold.cell(1.0, 4),
                r.delta_f.cell(100.0, 2)
            );
        }
        out
    }
}

/// Oracle-vs-estimated threshold analysis over the grid; writes `gap.tsv`,
/// `gap.json` and the manifest.
pub fn run_gap_analysis(cfg: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<GapTable> {
    let out = out_dir.as_ref();
    let runs = run_grid(cfg)?;
    let table = GapTable::from_runs(&runs, &cfg.effective_modes(), &cfg.snr_rows());
    write_manifest(out, "gap-analysis", cfg)?;
    write_text(&out.join("gap.tsv"), &table.to_tsv())?;
    write_text(&out.join("gap.json"), &to_json(&table))?;
    for r in &runs {
        write_eval_report(&r.outcome.test, out.join(format!("{}.json", r.stem())))?;
    }
    Ok(table)
}
