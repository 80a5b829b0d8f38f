//! Synthetic embedding-level data for end-to-end tests.
//!
//! A keyword occurrence walks through its positional centers in order, one
//! randomly chosen cluster per position, with isotropic Gaussian noise added
//! to every frame before re-normalization. Everything else is random unit
//! vectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::stream_seed;
use crate::error::{KwsError, Result};
use crate::tensorio::{
    dot, write_annotations, write_center_bank, write_embedding_sequence, Annotation,
    AnnotationSet, CenterBank, EmbeddingSequence,
};

/// Largest inner product allowed between two generated centers.
pub const MAX_CENTER_SIMILARITY: f64 = 0.8;

const MAX_ATTEMPTS_PER_CENTER: usize = 1000;

/// Frame hop of generated sequences.
pub const FIXTURE_HOP_SECONDS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub n_keywords: usize,
    pub n_pos: usize,
    pub n_clusters: usize,
    pub dim: usize,
    pub frames_per_keyword: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            n_keywords: 3,
            n_pos: 4,
            n_clusters: 2,
            dim: 128,
            frames_per_keyword: 20,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keywords == 0
            || self.n_pos == 0
            || self.n_clusters == 0
            || self.dim == 0
            || self.frames_per_keyword == 0
        {
            return Err(KwsError::Parameter("toy world sizes must all be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(KwsError::Parameter(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn keyword_names(&self) -> Vec<String> {
        (0..self.n_keywords).map(|k| format!("kw{k}")).collect()
    }
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Random unit centers with pairwise inner products below
/// [`MAX_CENTER_SIMILARITY`].
pub fn make_center_bank(cfg: &ToyWorldConfig) -> Result<CenterBank> {
    cfg.validate()?;
    let total = cfg.n_keywords * cfg.n_pos * cfg.n_clusters;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "bank"));
    let mut centers: Vec<Vec<f32>> = Vec::with_capacity(total);
    while centers.len() < total {
        let mut accepted = false;
        for _ in 0..MAX_ATTEMPTS_PER_CENTER {
            let c = to_unit_f32(&random_unit(cfg.dim, &mut rng));
            if centers.iter().all(|o| dot(o, &c) < MAX_CENTER_SIMILARITY) {
                centers.push(c);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(KwsError::Parameter(format!(
                "cannot place {total} centers with similarity < {MAX_CENTER_SIMILARITY} in dimension {}",
                cfg.dim
            )));
        }
    }
    CenterBank::new(
        centers.concat(),
        cfg.dim,
        cfg.n_pos,
        cfg.n_clusters,
        cfg.keyword_names(),
    )
}

/// Frames of one keyword occurrence, `len` frames long.
fn keyword_frames(
    cfg: &ToyWorldConfig,
    bank: &CenterBank,
    kw: usize,
    len: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f32>> {
    let clusters: Vec<usize> = (0..cfg.n_pos).map(|_| rng.random_range(0..cfg.n_clusters)).collect();
    (0..len)
        .map(|k| {
            let pos = k * cfg.n_pos / len;
            let c = &bank.cell(kw, pos)[clusters[pos] * cfg.dim..(clusters[pos] + 1) * cfg.dim];
            if sigma == 0.0 {
                return c.to_vec();
            }
            let noisy: Vec<f64> = c
                .iter()
                .map(|&x| x as f64 + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            to_unit_f32(&noisy)
        })
        .collect()
}

/// One planted keyword: index into the bank and start frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub keyword: usize,
    pub start_frame: usize,
}

/// A recording of `n_frames` with `script` planted. Randomness is keyed by
/// `(cfg.seed, file_id)`.
pub fn make_recording(
    cfg: &ToyWorldConfig,
    bank: &CenterBank,
    script: &[Placement],
    n_frames: usize,
    file_id: &str,
) -> Result<(EmbeddingSequence, AnnotationSet)> {
    make_recording_with_sigma(cfg, bank, script, n_frames, file_id, cfg.noise_sigma)
}

fn make_recording_with_sigma(
    cfg: &ToyWorldConfig,
    bank: &CenterBank,
    script: &[Placement],
    n_frames: usize,
    file_id: &str,
    sigma: f64,
) -> Result<(EmbeddingSequence, AnnotationSet)> {
    cfg.validate()?;
    let len = cfg.frames_per_keyword;
    let mut sorted = script.to_vec();
    sorted.sort_by_key(|p| p.start_frame);
    for w in sorted.windows(2) {
        if w[0].start_frame + len > w[1].start_frame {
            return Err(KwsError::Parameter(format!(
                "planted keywords at frames {} and {} overlap",
                w[0].start_frame, w[1].start_frame
            )));
        }
    }
    if let Some(p) = sorted.iter().find(|p| p.keyword >= bank.n_kw() || p.start_frame + len > n_frames) {
        return Err(KwsError::Parameter(format!(
            "planted keyword {} at frame {} does not fit",
            p.keyword, p.start_frame
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, file_id));
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n_frames);
    let mut events = Vec::with_capacity(sorted.len());
    for p in &sorted {
        while rows.len() < p.start_frame {
            rows.push(to_unit_f32(&random_unit(cfg.dim, &mut rng)));
        }
        rows.extend(keyword_frames(cfg, bank, p.keyword, len, sigma, &mut rng));
        events.push(Annotation::new(
            file_id,
            bank.keyword_names()[p.keyword].clone(),
            p.start_frame as f64 * FIXTURE_HOP_SECONDS,
            (p.start_frame + len) as f64 * FIXTURE_HOP_SECONDS,
        )?);
    }
    while rows.len() < n_frames {
        rows.push(to_unit_f32(&random_unit(cfg.dim, &mut rng)));
    }
    let seq = EmbeddingSequence::from_rows(&rows, FIXTURE_HOP_SECONDS, Some(file_id.to_string()))?;
    Ok((seq, AnnotationSet::new(events)))
}

/// Query template: one isolated keyword occurrence.
pub fn make_query(cfg: &ToyWorldConfig, bank: &CenterBank, keyword: usize, shot: usize) -> Result<EmbeddingSequence> {
    make_query_with_sigma(cfg, bank, keyword, shot, cfg.noise_sigma)
}

fn make_query_with_sigma(
    cfg: &ToyWorldConfig,
    bank: &CenterBank,
    keyword: usize,
    shot: usize,
    sigma: f64,
) -> Result<EmbeddingSequence> {
    cfg.validate()?;
    let name = &bank.keyword_names()[keyword];
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &format!("query/{name}/{shot}")));
    let rows = keyword_frames(cfg, bank, keyword, cfg.frames_per_keyword, sigma, &mut rng);
    EmbeddingSequence::from_rows(&rows, FIXTURE_HOP_SECONDS, Some(name.clone()))
}

/// Size of the splits in a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldLayout {
    pub shots: usize,
    pub validation_files: usize,
    pub test_files: usize,
    pub frames_per_file: usize,
    pub keywords_per_file: usize,
    /// Each recording draws its noise scale uniformly from
    /// `noise_sigma * [1 - spread, 1 + spread]`.
    pub noise_spread: f64,
}

impl Default for WorldLayout {
    fn default() -> Self {
        Self {
            shots: 5,
            validation_files: 4,
            test_files: 4,
            frames_per_file: 300,
            keywords_per_file: 4,
            noise_spread: 0.0,
        }
    }
}

/// Recordings of one split with their annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub recordings: Vec<EmbeddingSequence>,
    pub truth: AnnotationSet,
}

impl Split {
    pub fn file_ids(&self) -> Vec<&str> {
        self.recordings.iter().map(|r| r.label().unwrap_or_default()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub config: ToyWorldConfig,
    pub layout: WorldLayout,
    pub bank: CenterBank,
    /// Templates per keyword name.
    pub queries: BTreeMap<String, Vec<EmbeddingSequence>>,
    pub validation: Split,
    pub test: Split,
}

/// `count` non-overlapping placements with random keywords and free gaps.
fn random_script(
    cfg: &ToyWorldConfig,
    n_frames: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Placement>> {
    let len = cfg.frames_per_keyword;
    // at least half a keyword of background between and around occurrences
    let gap = len.div_ceil(2);
    let needed = count * len + (count + 1) * gap;
    if needed > n_frames {
        return Err(KwsError::Parameter(format!(
            "{count} keywords of {len} frames do not fit into {n_frames} frames"
        )));
    }
    let slack = n_frames - needed;
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    Ok(cuts
        .iter()
        .enumerate()
        .map(|(k, &c)| Placement {
            keyword: rng.random_range(0..cfg.n_keywords),
            start_frame: c + gap + k * (len + gap),
        })
        .collect())
}

fn make_split(cfg: &ToyWorldConfig, layout: &WorldLayout, bank: &CenterBank, name: &str, files: usize) -> Result<Split> {
    let mut recordings = Vec::with_capacity(files);
    let mut events = Vec::new();
    for f in 0..files {
        let file_id = format!("{name}_{f:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &format!("script/{file_id}")));
        let script = random_script(cfg, layout.frames_per_file, layout.keywords_per_file, &mut rng)?;
        let scale = 1.0 + layout.noise_spread * (2.0 * rng.random::<f64>() - 1.0);
        let (seq, truth) = make_recording_with_sigma(
            cfg,
            bank,
            &script,
            layout.frames_per_file,
            &file_id,
            cfg.noise_sigma * scale,
        )?;
        recordings.push(seq);
        events.extend(truth.events);
    }
    Ok(Split {
        recordings,
        truth: AnnotationSet::new(events),
    })
}

/// Bank, query templates, and annotated validation and test splits.
pub fn make_world(cfg: &ToyWorldConfig, layout: &WorldLayout) -> Result<ToyWorld> {
    if layout.shots == 0 || !(0.0..=1.0).contains(&layout.noise_spread) {
        return Err(KwsError::Parameter("layout needs shots >= 1 and noise_spread in [0, 1]".into()));
    }
    let bank = make_center_bank(cfg)?;
    let mut queries = BTreeMap::new();
    for (k, name) in bank.keyword_names().iter().enumerate() {
        let shots = (0..layout.shots)
            .map(|s| make_query(cfg, &bank, k, s))
            .collect::<Result<Vec<_>>>()?;
        queries.insert(name.clone(), shots);
    }
    let validation = make_split(cfg, layout, &bank, "val", layout.validation_files)?;
    let test = make_split(cfg, layout, &bank, "test", layout.test_files)?;
    Ok(ToyWorld {
        config: cfg.clone(),
        layout: layout.clone(),
        bank,
        queries,
        validation,
        test,
    })
}

/// Writes `bank.cbnk`, `queries/<keyword>/<shot>.eseq`, and for each split
/// `<split>/<file_id>.eseq` plus `<split>.tsv`.
pub fn write_world(world: &ToyWorld, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| KwsError::io(p, e));
    mkdir(root)?;
    write_center_bank(&world.bank, root.join("bank.cbnk"))?;
    for (name, shots) in &world.queries {
        let dir = root.join("queries").join(name);
        mkdir(&dir)?;
        for (s, q) in shots.iter().enumerate() {
            write_embedding_sequence(q, dir.join(format!("{s:02}.eseq")))?;
        }
    }
    for (name, split) in [("validation", &world.validation), ("test", &world.test)] {
        let dir = root.join(name);
        mkdir(&dir)?;
        for r in &split.recordings {
            write_embedding_sequence(r, dir.join(format!("{}.eseq", r.label().unwrap_or_default())))?;
        }
        write_annotations(&split.truth, root.join(format!("{name}.tsv")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::kappa;

    fn small() -> ToyWorldConfig {
        ToyWorldConfig {
            n_keywords: 3,
            n_pos: 4,
            n_clusters: 2,
            dim: 128,
            ..ToyWorldConfig::default()
        }
    }

    #[test]
    fn bank_is_well_separated() {
        let bank = make_center_bank(&small()).unwrap();
        assert_eq!(bank.len(), 24);
        let c: Vec<&[f32]> = bank.centers().collect();
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                assert!(dot(c[i], c[j]) < MAX_CENTER_SIMILARITY);
            }
        }
        assert_eq!(bank, make_center_bank(&small()).unwrap());
    }

    #[test]
    fn infeasible_packing() {
        let cfg = ToyWorldConfig {
            n_keywords: 10,
            n_pos: 5,
            n_clusters: 2,
            dim: 2,
            ..ToyWorldConfig::default()
        };
        assert!(matches!(make_center_bank(&cfg), Err(KwsError::Parameter(_))));
    }

    #[test]
    fn zero_noise_frames_are_centers() {
        let cfg = small();
        let bank = make_center_bank(&cfg).unwrap();
        let script = [Placement { keyword: 1, start_frame: 100 }];
        let (seq, truth) = make_recording(&cfg, &bank, &script, 200, "f").unwrap();
        let planted = EmbeddingSequence::from_rows(
            &(100..120).map(|t| seq.row(t).to_vec()).collect::<Vec<_>>(),
            FIXTURE_HOP_SECONDS,
            None,
        )
        .unwrap();
        assert_eq!(kappa(&planted, &bank).unwrap(), planted);
        assert_eq!(truth.events[0].onset, 100.0 * FIXTURE_HOP_SECONDS);
        assert_eq!(truth.events[0].offset, 120.0 * FIXTURE_HOP_SECONDS);
        // positions advance in order through kw1's cells
        for (k, t) in (100..120).enumerate() {
            let pos = k * cfg.n_pos / 20;
            assert!(bank.cell(1, pos).chunks(cfg.dim).any(|c| c == seq.row(t)));
        }
    }

    #[test]
    fn empty_script_is_background() {
        let cfg = small();
        let bank = make_center_bank(&cfg).unwrap();
        let (seq, truth) = make_recording(&cfg, &bank, &[], 50, "bg").unwrap();
        assert_eq!(seq.len(), 50);
        assert!(truth.is_empty());
        assert!(seq.is_unit_norm());
    }

    #[test]
    fn overlapping_script_rejected() {
        let cfg = small();
        let bank = make_center_bank(&cfg).unwrap();
        let script = [
            Placement { keyword: 0, start_frame: 10 },
            Placement { keyword: 1, start_frame: 25 },
        ];
        assert!(make_recording(&cfg, &bank, &script, 100, "f").is_err());
    }

    #[test]
    fn world_is_deterministic() {
        let cfg = ToyWorldConfig {
            noise_sigma: 0.1,
            ..small()
        };
        let a = make_world(&cfg, &WorldLayout::default()).unwrap();
        let b = make_world(&cfg, &WorldLayout::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.queries["kw0"].len(), 5);
        assert_eq!(a.validation.truth.len(), 16);
    }
}
