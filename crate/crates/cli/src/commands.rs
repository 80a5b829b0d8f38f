use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use kws_core::calib::{apply_calibration, CalibrationMode, CalibrationSides};
use kws_core::channel::{simulate, stream_seed, ChannelConfig, SnrSpec};
use kws_core::detect::{
    detect_all, event_f_score, score_grid, sweep_threshold, write_eval_report, MatchingConfig, SweepMode,
    Threshold, DEFAULT_GRID_POINTS,
};
use kws_core::dsp::{hfcc, log_mel, preprocess, spectrogram_to_sequence, SpectrogramKind};
use kws_core::dtw::{cost_matrix_with, Aggregation, AlignConfig, CostPolicy, Recurrence, StepSizes};
use kws_core::fixtures::{make_world, write_world, ToyWorldConfig, WorldLayout};
use kws_core::pipeline::{
    load_sequence, load_truth, run_end_to_end, run_gap_analysis, score_recordings, write_manifest, GridSpec,
    PipelineConfig,
};
use kws_core::tensorio::{
    read_annotations, read_center_bank, read_detections, read_wav, write_detections,
    write_embedding_sequence, write_wav, WavEncoding,
};
use kws_core::{CenterBank, EmbeddingSequence, KwsError};

use crate::inputs::{collect, create_parent, read_queries, read_recordings};

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturesArgs {
    /// WAV files or directories, searched recursively.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// log_mel or hfcc.
    #[arg(long, default_value = "log_mel")]
    pub kind: SpectrogramKind,
    /// Keep the raw spectrogram instead of standardized unit-norm rows.
    #[arg(long)]
    pub raw: bool,
}

pub fn features(a: &FeaturesArgs) -> Result<()> {
    let files = collect(&a.inputs, "wav")?;
    files.par_iter().try_for_each(|f| -> Result<()> {
        let audio = preprocess(&read_wav(&f.path)?)?.audio;
        let spec = match a.kind {
            SpectrogramKind::LogMel => log_mel(&audio)?,
            SpectrogramKind::Hfcc => hfcc(&audio)?,
        };
        let seq = if a.raw {
            spec.to_raw_sequence()?
        } else {
            spectrogram_to_sequence(&spec)?
        };
        let out = a.out_dir.join(&f.relative).with_extension("eseq");
        create_parent(&out)?;
        write_embedding_sequence(&seq, &out).with_context(|| f.path.display().to_string())?;
        Ok(())
    })?;
    write_manifest(&a.out_dir, "features", a)?;
    eprintln!("wrote {} feature files to {}", files.len(), a.out_dir.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ChannelArgs {
    /// WAV files or directories, searched recursively.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Target SNR against the faded signal.
    #[arg(long, allow_negative_numbers = true, required_unless_present = "clean", conflicts_with = "clean")]
    pub snr_db: Option<f64>,
    /// Fading only, no noise.
    #[arg(long)]
    pub clean: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Delay between successive paths.
    #[arg(long, default_value_t = 1.0)]
    pub delay_ms: f64,
    /// Doppler spread (two-sided, Hz).
    #[arg(long, default_value_t = 0.5)]
    pub doppler_hz: f64,
    #[arg(long, default_value_t = 2)]
    pub paths: usize,
}

#[derive(Serialize)]
struct ChannelRow {
    file: String,
    seed: u64,
    noise_power: f64,
    clipped: usize,
}

pub fn simulate_channel(a: &ChannelArgs) -> Result<()> {
    let base = ChannelConfig {
        differential_delay_seconds: a.delay_ms / 1000.0,
        doppler_spread_hz: a.doppler_hz,
        num_paths: a.paths,
        seed: a.seed,
    };
    base.validate()?;
    let snr = a.snr_db.map_or_else(SnrSpec::clean, SnrSpec::new);
    let files = collect(&a.inputs, "wav")?;
    let rows = files
        .par_iter()
        .map(|f| -> Result<ChannelRow> {
            let pre = preprocess(&read_wav(&f.path)?)?;
            let cfg = ChannelConfig {
                seed: stream_seed(a.seed, &f.key()),
                ..base
            };
            // silence would make the SNR undefined; it passes through unchanged
            let (audio, noise_power, clipped) = if pre.silent {
                (pre.audio, 0.0, 0)
            } else {
                let n = simulate(&pre.audio, &cfg, snr).with_context(|| f.path.display().to_string())?;
                (n.audio, n.noise_power, n.clipped)
            };
            let out = a.out_dir.join(&f.relative);
            create_parent(&out)?;
            write_wav(&audio, &out, WavEncoding::Float32)?;
            Ok(ChannelRow {
                file: f.key(),
                seed: cfg.seed,
                noise_power,
                clipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tsv = String::from("file\tseed\tnoise_power\tclipped\n");
    for r in &rows {
        tsv += &format!("{}\t{}\t{:e}\t{}\n", r.file, r.seed, r.noise_power, r.clipped);
    }
    write_text(&a.out_dir.join("channel.tsv"), &tsv)?;
    write_manifest(&a.out_dir, "simulate-channel", a)?;
    let clipped: usize = rows.iter().map(|r| r.clipped).sum();
    if clipped > 0 {
        eprintln!("warning: {clipped} samples clipped to [-1, 1]");
    }
    eprintln!("wrote {} recordings to {}", rows.len(), a.out_dir.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub keywords: usize,
    /// Positional centers per keyword.
    #[arg(long, default_value_t = 4)]
    pub positions: usize,
    /// Centers per position.
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub frames_per_keyword: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_spread: f64,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    #[arg(long, default_value_t = 4)]
    pub validation_files: usize,
    #[arg(long, default_value_t = 4)]
    pub test_files: usize,
    #[arg(long, default_value_t = 300)]
    pub frames_per_file: usize,
    #[arg(long, default_value_t = 4)]
    pub keywords_per_file: usize,
}

/// Name of the ready-to-run pipeline config written next to a fixture world.
pub const FIXTURE_CONFIG: &str = "pipeline.json";

pub fn make_fixtures(a: &FixtureArgs) -> Result<()> {
    let cfg = ToyWorldConfig {
        n_keywords: a.keywords,
        n_pos: a.positions,
        n_clusters: a.clusters,
        dim: a.dim,
        frames_per_keyword: a.frames_per_keyword,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    let layout = WorldLayout {
        shots: a.shots,
        validation_files: a.validation_files,
        test_files: a.test_files,
        frames_per_file: a.frames_per_file,
        keywords_per_file: a.keywords_per_file,
        noise_spread: a.noise_spread,
    };
    let world = make_world(&cfg, &layout)?;
    write_world(&world, &a.out_dir)?;
    // relative paths, resolved against this file's directory when loaded
    write_text(&a.out_dir.join(FIXTURE_CONFIG), &json(&PipelineConfig::for_world_dir("")))?;
    write_manifest(&a.out_dir, "make-fixtures", a)?;
    eprintln!("wrote fixture world to {}", a.out_dir.display());
    Ok(())
}

fn load_bank(path: Option<&Path>, mode: CalibrationMode) -> Result<Option<CenterBank>> {
    match (path, mode) {
        (Some(p), _) => Ok(Some(read_center_bank(p)?)),
        (None, CalibrationMode::None) => Ok(None),
        (None, m) => Err(KwsError::Config(format!("calibration mode {m} needs --bank")).into()),
    }
}

fn unit(seq: EmbeddingSequence) -> Result<EmbeddingSequence> {
    if seq.is_unit_norm() {
        Ok(seq)
    } else {
        Ok(seq.normalize_rows()?)
    }
}

fn calibrated(seq: EmbeddingSequence, bank: Option<&CenterBank>, mode: CalibrationMode) -> Result<EmbeddingSequence> {
    match (mode, bank) {
        (CalibrationMode::None, _) => Ok(seq),
        (m, Some(b)) => Ok(apply_calibration(&unit(seq)?, b, m)?),
        (m, None) => Err(KwsError::Config(format!("calibration mode {m} needs --bank")).into()),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// none, quantize, normalize or combined.
    #[arg(long)]
    pub mode: CalibrationMode,
    /// both, or query to leave recordings unchanged.
    #[arg(long, default_value = "both")]
    pub sides: CalibrationSides,
    /// Query templates, one sub-directory per keyword.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Recording ESEQ files or directories.
    #[arg(long, num_args = 1..)]
    pub recordings: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    if a.queries.is_none() && a.recordings.is_empty() {
        return Err(KwsError::Config("nothing to calibrate: give --queries and/or --recordings".into()).into());
    }
    let bank = read_center_bank(&a.bank)?;
    let mut written = 0;
    if let Some(q) = &a.queries {
        for (keyword, shots) in read_queries(q)? {
            for (stem, seq) in shots {
                let out = calibrated(seq, Some(&bank), a.mode)?;
                let path = a.out_dir.join("queries").join(&keyword).join(format!("{stem}.eseq"));
                create_parent(&path)?;
                write_embedding_sequence(&out, &path)?;
                written += 1;
            }
        }
    }
    if !a.recordings.is_empty() {
        let mode = match a.sides {
            CalibrationSides::Both => a.mode,
            CalibrationSides::Query => CalibrationMode::None,
        };
        let files = collect(&a.recordings, "eseq")?;
        files.par_iter().try_for_each(|f| -> Result<()> {
            let out = calibrated(load_sequence(&f.path)?, Some(&bank), mode)?;
            let path = a.out_dir.join("recordings").join(&f.relative);
            create_parent(&path)?;
            write_embedding_sequence(&out, &path)?;
            Ok(())
        })?;
        written += files.len();
    }
    write_manifest(&a.out_dir, "calibrate", a)?;
    eprintln!("wrote {written} calibrated sequences to {}", a.out_dir.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    /// Query templates, one sub-directory per keyword.
    #[arg(long)]
    pub queries: PathBuf,
    /// Recording ESEQ files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub recordings: Vec<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Calibration applied before alignment. With none, inputs are used as
    /// stored; rows that are not unit norm are treated as pre-calibrated.
    #[arg(long, default_value = "none")]
    pub calibration: CalibrationMode,
    #[arg(long, default_value = "both")]
    pub sides: CalibrationSides,
    /// Steps as dq,dt pairs in tie-break order.
    #[arg(long, default_value = "1,1;2,1;1,2")]
    pub steps: StepSizes,
    /// exact or greedy.
    #[arg(long, default_value = "exact")]
    pub recurrence: Recurrence,
    /// max or mean over templates.
    #[arg(long, default_value = "max")]
    pub aggregation: Aggregation,
}

struct Aligned {
    queries: BTreeMap<String, Vec<EmbeddingSequence>>,
    recordings: Vec<(String, EmbeddingSequence)>,
    align: AlignConfig,
}

impl AlignArgs {
    fn prepare(&self) -> Result<Aligned> {
        let bank = load_bank(self.bank.as_deref(), self.calibration)?;
        let mode = self.calibration;
        let test_mode = match self.sides {
            CalibrationSides::Both => mode,
            CalibrationSides::Query => CalibrationMode::None,
        };
        let queries = read_queries(&self.queries)?
            .into_iter()
            .map(|(k, shots)| {
                let cal = shots
                    .into_iter()
                    .map(|(_, s)| calibrated(s, bank.as_ref(), mode))
                    .collect::<Result<Vec<_>>>()?;
                Ok((k, cal))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let recordings = read_recordings(&self.recordings)?
            .into_par_iter()
            .map(|(id, s)| {
                let s = if test_mode == CalibrationMode::None && mode != CalibrationMode::None {
                    unit(s)?
                } else {
                    calibrated(s, bank.as_ref(), test_mode)?
                };
                Ok((id, s))
            })
            .collect::<Result<Vec<_>>>()?;
        let all_unit = queries.values().flatten().all(EmbeddingSequence::is_unit_norm)
            && recordings.iter().all(|(_, s)| s.is_unit_norm());
        let align = AlignConfig {
            steps: self.steps.clone(),
            recurrence: self.recurrence,
            aggregation: self.aggregation,
            cost_policy: if all_unit { CostPolicy::UnitNorm } else { CostPolicy::Calibrated },
        };
        Ok(Aligned {
            queries,
            recordings,
            align,
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub align: AlignArgs,
    /// Global decision threshold on the score (1 - normalized cost).
    #[arg(
        long,
        allow_negative_numbers = true,
        required_unless_present = "threshold_file",
        conflicts_with = "threshold_file"
    )]
    pub threshold: Option<f64>,
    /// Threshold JSON as written by sweep-threshold.
    #[arg(long)]
    pub threshold_file: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also dump every cost matrix as raw little-endian float32 with a JSON sidecar.
    #[arg(long)]
    pub dump_costs: bool,
}

fn read_threshold(path: &Path) -> Result<Threshold> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let t: Threshold = serde_json::from_str(&text)
        .map_err(|e| KwsError::Config(format!("{}: {e}", path.display())))?;
    t.validate()?;
    Ok(t)
}

#[derive(Serialize)]
struct CostSidecar<'a> {
    recording: &'a str,
    keyword: &'a str,
    template: usize,
    rows: usize,
    cols: usize,
    dtype: &'static str,
    layout: &'static str,
}

fn dump_costs(data: &Aligned, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    data.recordings.par_iter().try_for_each(|(id, rec)| -> Result<()> {
        for (kw, shots) in &data.queries {
            for (s, q) in shots.iter().enumerate() {
                let cost = cost_matrix_with(q, rec, data.align.cost_policy)?;
                let stem = format!("{id}.{kw}.{s:02}");
                let raw = dir.join(format!("{stem}.f32"));
                let bytes: Vec<u8> = cost.as_slice().iter().flat_map(|&c| (c as f32).to_le_bytes()).collect();
                fs::write(&raw, bytes).with_context(|| raw.display().to_string())?;
                let sidecar = CostSidecar {
                    recording: id,
                    keyword: kw,
                    template: s,
                    rows: cost.rows(),
                    cols: cost.cols(),
                    dtype: "float32",
                    layout: "row-major, query frames by test frames",
                };
                write_text(&dir.join(format!("{stem}.json")), &json(&sidecar))?;
            }
        }
        Ok(())
    })
}

pub fn detect(a: &DetectArgs) -> Result<()> {
    let threshold = match (&a.threshold_file, a.threshold) {
        (Some(p), _) => read_threshold(p)?,
        (None, Some(t)) => {
            let t = Threshold::Global(t);
            t.validate()?;
            t
        }
        (None, None) => unreachable!("clap requires one of the threshold flags"),
    };
    let data = a.align.prepare()?;
    let curves = score_recordings(&data.queries, &data.recordings, &data.align)?;
    let events = detect_all(&curves, &threshold);
    create_dir(&a.out_dir)?;
    write_detections(&events, a.out_dir.join("detections.tsv"))?;
    if a.dump_costs {
        dump_costs(&data, &a.out_dir.join("costs"))?;
    }
    write_manifest(&a.out_dir, "detect", a)?;
    eprintln!("{} detections in {} recordings", events.len(), curves.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, Args, Serialize)]
pub struct MatchArgs {
    #[arg(long, default_value_t = 0.25)]
    pub onset_collar: f64,
    #[arg(long, default_value_t = 0.25)]
    pub offset_collar: f64,
    /// Offset tolerance as a fraction of the true duration, if larger than the collar.
    #[arg(long, default_value_t = 0.5)]
    pub offset_ratio: f64,
}

impl MatchArgs {
    fn config(&self) -> Result<MatchingConfig> {
        let v = [self.onset_collar, self.offset_collar, self.offset_ratio];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(KwsError::Config("collars must be finite and non-negative".into()).into());
        }
        Ok(MatchingConfig {
            onset_collar_seconds: self.onset_collar,
            offset_collar_seconds: self.offset_collar,
            offset_ratio: self.offset_ratio,
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub align: AlignArgs,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Points spanning the observed score range.
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    /// Explicit comma-separated grid, overriding --grid-points.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub grid: Vec<f64>,
    /// global or per_keyword.
    #[arg(long, default_value = "global")]
    pub sweep_mode: SweepMode,
    /// Annotation label of non-keyword events.
    #[arg(long)]
    pub open_set_label: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub matching: MatchArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let matching = a.matching.config()?;
    let data = a.align.prepare()?;
    let keywords: Vec<String> = data.queries.keys().cloned().collect();
    let truth = load_truth(&a.annotations, &keywords, a.open_set_label.as_deref())?;
    let curves = score_recordings(&data.queries, &data.recordings, &data.align)?;
    let grid = if a.grid.is_empty() {
        if a.grid_points == 0 {
            return Err(KwsError::Config("--grid-points must be at least 1".into()).into());
        }
        score_grid(&curves, a.grid_points)
    } else {
        a.grid.clone()
    };
    let result = sweep_threshold(&curves, &truth, &grid, &matching, a.sweep_mode)?;
    create_dir(&a.out_dir)?;
    let mut tsv = String::from("threshold\ttp\tfp\tfn\tmicro_f\tmacro_f\n");
    for p in &result.points {
        let r = &p.report;
        tsv += &format!("{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n", p.threshold, r.tp, r.fp, r.fn_, r.micro_f, r.macro_f);
    }
    write_text(&a.out_dir.join("sweep.tsv"), &tsv)?;
    write_text(&a.out_dir.join("threshold.json"), &json(&result.best))?;
    write_eval_report(&result.best_report, a.out_dir.join("report.json"))?;
    write_manifest(&a.out_dir, "sweep-threshold", a)?;
    println!("best threshold {:?}: F = {:.4}", result.best, result.best_report.micro_f);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Detection TSV (annotation columns plus a score).
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub matching: MatchArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let matching = a.matching.config()?;
    let dets = read_detections(&a.detections)?;
    let truth = read_annotations(&a.annotations)?;
    let report = event_f_score(&dets, &truth, &matching)?;
    create_dir(&a.out_dir)?;
    write_eval_report(&report, a.out_dir.join("report.json"))?;
    write_manifest(&a.out_dir, "evaluate", a)?;
    println!(
        "tp {} fp {} fn {}  micro-F {:.4}  macro-F {:.4}",
        report.tp, report.fp, report.fn_, report.micro_f, report.macro_f
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    /// Pipeline config JSON, or the manifest of an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Evaluate all four calibration modes.
    #[arg(long)]
    pub ablation: bool,
    /// Comma-separated calibration modes.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<CalibrationMode>,
    /// Comma-separated SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub snr_list: Vec<f64>,
    /// Comma-separated trial names substituted for {trial}.
    #[arg(long, value_delimiter = ',')]
    pub trials: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sides: Option<CalibrationSides>,
    #[arg(long)]
    pub recurrence: Option<Recurrence>,
    #[arg(long)]
    pub sweep_mode: Option<SweepMode>,
    #[arg(long)]
    pub grid_points: Option<usize>,
}

impl RunArgs {
    fn resolved(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::from_file(&self.config)?;
        cfg.ablation |= self.ablation;
        if !self.modes.is_empty() {
            cfg.modes = self.modes.clone();
        }
        if !self.snr_list.is_empty() {
            cfg.snr_list = self.snr_list.clone();
        }
        if !self.trials.is_empty() {
            cfg.trials = self.trials.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.sides {
            cfg.sides = s;
        }
        if let Some(r) = self.recurrence {
            cfg.recurrence = r;
        }
        if let Some(m) = self.sweep_mode {
            cfg.sweep_mode = m;
        }
        if let Some(points) = self.grid_points {
            cfg.grid = GridSpec::Auto { points };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn end_to_end(a: &RunArgs) -> Result<()> {
    let report = run_end_to_end(&a.resolved()?, &a.out_dir)?;
    print!("{}", report.table.to_tsv());
    Ok(())
}

pub fn gap_analysis(a: &RunArgs) -> Result<()> {
    let table = run_gap_analysis(&a.resolved()?, &a.out_dir)?;
    print!("{}", table.to_tsv());
    Ok(())
}

