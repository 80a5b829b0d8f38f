use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use kws_core::calib::CalibrationMode;
use kws_core::dsp::SpectrogramKind;
use kws_core::fixtures::{make_world, write_world, ToyWorldConfig, WorldLayout};
use kws_core::pipeline::{
    run_end_to_end, run_gap_analysis, run_grid, InputKind, PipelineConfig, MANIFEST_FILE,
};
use kws_core::tensorio::{write_annotations, write_wav, Annotation, WavEncoding};
use kws_core::{AnnotationSet, AudioBuffer, KwsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_world(root: &Path, seed: u64, sigma: f64) {
    let cfg = ToyWorldConfig {
        noise_sigma: sigma,
        seed,
        ..ToyWorldConfig::default()
    };
    let layout = WorldLayout {
        validation_files: 2,
        test_files: 2,
        ..WorldLayout::default()
    };
    write_world(&make_world(&cfg, &layout).unwrap(), root).unwrap();
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn rerun_from_manifest_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_world(&dir.path().join("w"), 3, 0.1);
    let cfg = PipelineConfig {
        ablation: true,
        ..PipelineConfig::for_world_dir(dir.path().join("w"))
    };
    run_end_to_end(&cfg, dir.path().join("a")).unwrap();
    let again = PipelineConfig::from_file(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    assert_eq!(again, cfg);
    run_end_to_end(&again, dir.path().join("b")).unwrap();
    for f in ["table.tsv", "table.json", "runs/run_clean_combined.json", "runs/run_clean_none.tsv"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn ablation_table_has_four_columns() {
    let dir = tempfile::tempdir().unwrap();
    small_world(&dir.path().join("w"), 4, 0.1);
    let cfg = PipelineConfig {
        ablation: true,
        ..PipelineConfig::for_world_dir(dir.path().join("w"))
    };
    let report = run_end_to_end(&cfg, dir.path().join("out")).unwrap();
    assert_eq!(report.table.modes, CalibrationMode::ALL.to_vec());
    assert_eq!(report.table.rows.len(), 1);
    let tsv = read(dir.path().join("out/table.tsv"));
    let header: Vec<&str> = tsv.lines().next().unwrap().split('\t').collect();
    assert_eq!(header.len(), 1 + 2 * 4);
}

#[test]
fn one_row_per_snr_and_one_cell_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    for (k, snr) in ["10", "20", "30"].iter().enumerate() {
        small_world(&dir.path().join(snr), 5 + k as u64, 0.05 * (3 - k) as f64);
    }
    let root = dir.path().join("{snr}");
    let mut cfg = PipelineConfig::for_world_dir(&root);
    cfg.bank = Some(dir.path().join("10/bank.cbnk").to_string_lossy().into_owned());
    cfg.snr_list = vec![10.0, 20.0, 30.0];
    cfg.modes = vec![CalibrationMode::None, CalibrationMode::Quantize, CalibrationMode::Combined];
    let runs = run_grid(&cfg).unwrap();
    assert_eq!(runs.len(), 3 * 3);
    let report = run_end_to_end(&cfg, dir.path().join("out")).unwrap();
    assert_eq!(report.table.rows.len(), 3);
    assert_eq!(read(dir.path().join("out/table.tsv")).lines().count(), 1 + 3);
    assert!(dir.path().join("out/runs/run_20_quantize.json").exists());
}

#[test]
fn identical_splits_have_no_threshold_gap() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    small_world(&w, 6, 0.15);
    let cfg = PipelineConfig {
        test_dir: w.join("validation").to_string_lossy().into_owned(),
        test_annotations: w.join("validation.tsv").to_string_lossy().into_owned(),
        ablation: true,
        ..PipelineConfig::for_world_dir(&w)
    };
    let table = run_gap_analysis(&cfg, dir.path().join("gap")).unwrap();
    assert_eq!(table.rows.len(), 4);
    for r in &table.rows {
        assert_eq!(r.delta_threshold.mean, 0.0);
        assert_eq!(r.delta_f.mean, 0.0);
    }
    assert!(dir.path().join("gap").join(MANIFEST_FILE).exists());
    assert!(read(dir.path().join("gap/gap.tsv")).starts_with("snr_db\tmode"));
}

#[test]
fn missing_split_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    small_world(&dir.path().join("w"), 7, 0.0);
    let cfg = PipelineConfig {
        test_dir: dir.path().join("w/nowhere").to_string_lossy().into_owned(),
        ..PipelineConfig::for_world_dir(dir.path().join("w"))
    };
    let err = run_grid(&cfg).unwrap_err();
    assert!(matches!(err, KwsError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    fs::write(
        &p,
        r#"{"queries_dir":"q","validation_dir":"v","validation_annotations":"v.tsv",
            "test_dir":"t","test_annotations":"t.tsv","thresold":0.5}"#,
    )
    .unwrap();
    assert!(matches!(PipelineConfig::from_file(&p), Err(KwsError::Config(_))));
}

fn chirp(rng: &mut ChaCha8Rng, seconds: f64, at: Option<f64>) -> Vec<f32> {
    let fs = 16000.0;
    let n = (seconds * fs) as usize;
    let mut x: Vec<f32> = (0..n).map(|_| rng.random_range(-0.01f32..0.01)).collect();
    if let Some(at) = at {
        let len = (0.4 * fs) as usize;
        let start = (at * fs) as usize;
        for k in 0..len {
            let t = k as f64 / fs;
            let phase = 2.0 * PI * (500.0 * t + 0.5 * 2500.0 * t * t);
            x[start + k] += (0.5 * phase.sin()) as f32;
        }
    }
    x
}

fn audio_corpus(root: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let wav = |p: &Path, x: Vec<f32>| {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        write_wav(&AudioBuffer::new(x, 16000).unwrap(), p, WavEncoding::Pcm16).unwrap();
    };
    for s in 0..2 {
        wav(&root.join(format!("queries/chirp/{s:02}.wav")), chirp(&mut rng, 0.4, Some(0.0)));
    }
    for split in ["validation", "test"] {
        let mut truth = Vec::new();
        for f in 0..2 {
            let id = format!("{split}_{f}");
            let at = 0.8 + 0.5 * f as f64;
            wav(&root.join(format!("{split}/{id}.wav")), chirp(&mut rng, 3.0, Some(at)));
            truth.push(Annotation::new(&id, "chirp", at, at + 0.4).unwrap());
        }
        write_annotations(&AnnotationSet::new(truth), root.join(format!("{split}.tsv"))).unwrap();
    }
}

#[test]
fn audio_inputs_run_through_features_and_channel() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("audio");
    audio_corpus(&root);
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let mut cfg = PipelineConfig::new(p("queries"), p("validation"), p("validation.tsv"), p("test"), p("test.tsv"));
    cfg.modes = vec![CalibrationMode::None];
    cfg.input = InputKind::Audio {
        features: SpectrogramKind::LogMel,
    };

    let clean = run_grid(&cfg).unwrap();
    assert_eq!(clean.len(), 1);
    assert_eq!(clean[0].outcome.validation.micro_f, 1.0);

    cfg.snr_list = vec![20.0, -6.0];
    let a = run_grid(&cfg).unwrap();
    let b = run_grid(&cfg).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    assert_ne!(a[0].outcome.gap, a[1].outcome.gap);
}
