//! TSV annotations (`file_id, onset_s, offset_s, keyword`) and detections
//! (the same columns plus a trailing score).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::DetectionEvent;
use crate::error::{KwsError, Result};

/// One ground-truth keyword occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub file_id: String,
    pub keyword: String,
    pub onset: f64,
    pub offset: f64,
}

impl Annotation {
    pub fn new(
        file_id: impl Into<String>,
        keyword: impl Into<String>,
        onset: f64,
        offset: f64,
    ) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite()) || onset < 0.0 || onset >= offset {
            return Err(KwsError::Annotation(format!(
                "invalid event span [{onset}, {offset})"
            )));
        }
        Ok(Self {
            file_id: file_id.into(),
            keyword: keyword.into(),
            onset,
            offset,
        })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub events: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn new(events: Vec<Annotation>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn for_file<'a>(&'a self, file_id: &'a str) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.events.iter().filter(move |e| e.file_id == file_id)
    }

    /// Checks every keyword against `keyword_names`, also admitting `open_set_label`.
    pub fn validate_keywords(
        &self,
        keyword_names: &[String],
        open_set_label: Option<&str>,
    ) -> Result<()> {
        for e in &self.events {
            let known = keyword_names.iter().any(|k| k == &e.keyword)
                || open_set_label == Some(e.keyword.as_str());
            if !known {
                return Err(KwsError::Annotation(format!(
                    "{}: keyword {:?} is not in the center bank",
                    e.file_id, e.keyword
                )));
            }
        }
        Ok(())
    }
}

fn parse_f64(field: &str, line_no: usize, what: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| {
        KwsError::Format(format!("line {line_no}: {what} {field:?} is not a number"))
    })
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').collect::<Vec<_>>()))
        .enumerate()
        // an optional header is recognized by a non-numeric second field
        .filter(|(k, (_, f))| !(*k == 0 && f.len() > 1 && f[1].trim().parse::<f64>().is_err()))
        .map(|(_, v)| v)
}

pub(crate) fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let mut events = Vec::new();
    for (line_no, f) in data_lines(text) {
        if f.len() != 4 {
            return Err(KwsError::Format(format!(
                "line {line_no}: expected 4 tab-separated fields, got {}",
                f.len()
            )));
        }
        let onset = parse_f64(f[1], line_no, "onset")?;
        let offset = parse_f64(f[2], line_no, "offset")?;
        events.push(
            Annotation::new(f[0], f[3].trim(), onset, offset)
                .map_err(|e| KwsError::Annotation(format!("line {line_no}: {e}")))?,
        );
    }
    Ok(AnnotationSet { events })
}

pub(crate) fn parse_detections(text: &str) -> Result<Vec<DetectionEvent>> {
    let mut out = Vec::new();
    for (line_no, f) in data_lines(text) {
        if f.len() != 5 {
            return Err(KwsError::Format(format!(
                "line {line_no}: expected 5 tab-separated fields, got {}",
                f.len()
            )));
        }
        let onset = parse_f64(f[1], line_no, "onset")?;
        let offset = parse_f64(f[2], line_no, "offset")?;
        let score = parse_f64(f[4], line_no, "score")?;
        if !(onset < offset) || !score.is_finite() {
            return Err(KwsError::Format(format!("line {line_no}: invalid detection")));
        }
        out.push(DetectionEvent {
            file_id: f[0].to_string(),
            keyword: f[3].trim().to_string(),
            onset,
            offset,
            score,
        });
    }
    Ok(out)
}

pub(crate) fn format_annotations(set: &AnnotationSet) -> String {
    let mut s = String::from("file_id\tonset\toffset\tkeyword\n");
    for e in &set.events {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.file_id, e.onset, e.offset, e.keyword);
    }
    s
}

pub(crate) fn format_detections(events: &[DetectionEvent]) -> String {
    let mut s = String::from("file_id\tonset\toffset\tkeyword\tscore\n");
    for e in events {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            e.file_id, e.onset, e.offset, e.keyword, e.score
        );
    }
    s
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
    parse_annotations(&text)
}

pub fn write_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_annotations(set)).map_err(|e| KwsError::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionEvent>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
    parse_detections(&text)
}

pub fn write_detections(events: &[DetectionEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_detections(events)).map_err(|e| KwsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_optional() {
        let with = "file_id\tonset\toffset\tkeyword\nf1\t0.5\t1.25\tcash\n";
        let without = "f1\t0.5\t1.25\tcash\n";
        assert_eq!(parse_annotations(with).unwrap(), parse_annotations(without).unwrap());
        let set = parse_annotations(without).unwrap();
        assert_eq!(set.events[0].keyword, "cash");
        assert_eq!(set.events[0].offset, 1.25);
    }

    #[test]
    fn rejects_inverted_span() {
        assert!(matches!(
            parse_annotations("f1\t2.0\t1.0\tcash\n"),
            Err(KwsError::Annotation(_))
        ));
    }

    #[test]
    fn rejects_bad_number_after_header() {
        assert!(parse_annotations("f\tonset\toffset\tk\nf1\tx\t1\tcash\n").is_err());
    }

    #[test]
    fn annotation_round_trip() {
        let set = AnnotationSet::new(vec![
            Annotation::new("a", "visa", 0.1, 0.7).unwrap(),
            Annotation::new("b", "yuan", 3.0, 3.016).unwrap(),
        ]);
        assert_eq!(parse_annotations(&format_annotations(&set)).unwrap(), set);
    }

    #[test]
    fn keyword_validation() {
        let set = AnnotationSet::new(vec![Annotation::new("a", "other", 0.0, 1.0).unwrap()]);
        let names = vec!["cash".to_string()];
        assert!(set.validate_keywords(&names, None).is_err());
        assert!(set.validate_keywords(&names, Some("other")).is_ok());
    }

    #[test]
    fn detections_round_trip() {
        let d = vec![DetectionEvent {
            file_id: "f".into(),
            keyword: "cash".into(),
            onset: 0.25,
            offset: 0.75,
            score: 0.875,
        }];
        assert_eq!(parse_detections(&format_detections(&d)).unwrap(), d);
    }
}
