use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kws_core::tensorio::read_embedding_sequence;
use kws_core::{EmbeddingSequence, KwsError};
use walkdir::WalkDir;

/// An input file and the path its output takes below the output directory.
pub struct InputFile {
    pub path: PathBuf,
    pub relative: PathBuf,
}

impl InputFile {
    /// Relative path with `/` separators, used as an RNG stream key.
    pub fn key(&self) -> String {
        self.relative
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn stem(&self) -> String {
        self.path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
    }
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext))
}

/// Files given directly, plus every `*.ext` below the given directories.
pub fn collect(inputs: &[PathBuf], ext: &str) -> Result<Vec<InputFile>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_file() {
            out.push(InputFile {
                path: input.clone(),
                relative: PathBuf::from(input.file_name().unwrap_or_default()),
            });
        } else if input.is_dir() {
            let mut found: Vec<PathBuf> = WalkDir::new(input)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file() && has_ext(e.path(), ext))
                .map(|e| e.into_path())
                .collect();
            found.sort();
            for path in found {
                let relative = path.strip_prefix(input).unwrap_or(&path).to_path_buf();
                out.push(InputFile { path, relative });
            }
        } else {
            return Err(KwsError::Config(format!("{} does not exist", input.display())).into());
        }
    }
    if out.is_empty() {
        return Err(KwsError::Config(format!("no .{ext} inputs found")).into());
    }
    Ok(out)
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Templates from `dir/<keyword>/*.eseq`, read as stored.
pub fn read_queries(dir: &Path) -> Result<BTreeMap<String, Vec<(String, EmbeddingSequence)>>> {
    if !dir.is_dir() {
        return Err(KwsError::Config(format!("{} is not a directory", dir.display())).into());
    }
    let mut out = BTreeMap::new();
    let mut keyword_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    keyword_dirs.sort();
    for kd in keyword_dirs {
        let keyword = kd.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut shots = Vec::new();
        for f in collect(std::slice::from_ref(&kd), "eseq").unwrap_or_default() {
            let seq = read_embedding_sequence(&f.path)?.with_label(Some(keyword.clone()));
            shots.push((f.stem(), seq));
        }
        if !shots.is_empty() {
            out.insert(keyword, shots);
        }
    }
    if out.is_empty() {
        return Err(KwsError::Config(format!("{}: no query templates", dir.display())).into());
    }
    Ok(out)
}

/// Recordings keyed by file stem, read as stored.
pub fn read_recordings(inputs: &[PathBuf]) -> Result<Vec<(String, EmbeddingSequence)>> {
    let files = collect(inputs, "eseq")?;
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = files.iter().map(InputFile::stem).find(|s| !seen.insert(s.clone())) {
        return Err(KwsError::Config(format!("two recordings share the file id {dup:?}")).into());
    }
    files
        .into_iter()
        .map(|f| Ok((f.stem(), read_embedding_sequence(&f.path)?)))
        .collect()
}
