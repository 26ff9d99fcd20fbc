//! CSV dataset manifests: `path,id,color,type,camera,split`.
//!
//! Paths are relative to the manifest's directory. `color`, `type` and
//! `camera` may be empty. Training identities are relabelled densely to
//! `0..num_train_ids` in ascending raw-id order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{RamError, Result};

use super::ppm;

pub const MANIFEST_HEADER: [&str; 6] = ["path", "id", "color", "type", "camera", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
    /// Held-out images without a fixed query/gallery assignment.
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
            Split::Test => "test",
        })
    }
}

/// Label vocabulary: raw token to dense index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    labels: Vec<String>,
}

impl Vocab {
    /// Sorted numerically when every token is an integer, else lexically.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = tokens.into_iter().collect();
        let mut labels: Vec<String> = set.into_iter().map(str::to_string).collect();
        if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
            labels.sort_by_key(|l| l.parse::<i64>().expect("checked"));
        }
        Vocab { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == token)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Path as written in the manifest.
    pub image_path: String,
    pub vehicle_id: u64,
    pub color_id: Option<usize>,
    pub type_id: Option<usize>,
    pub camera_id: Option<String>,
    pub split: Split,
}

impl Sample {
    /// Dense attribute label by attribute name (`color` or `type`).
    pub fn attribute(&self, name: &str) -> Option<usize> {
        match name {
            "color" => self.color_id,
            "type" => self.type_id,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    /// Raw training vehicle id -> dense classifier label.
    pub train_ids: BTreeMap<u64, usize>,
    pub colors: Vocab,
    pub types: Vocab,
    /// `(C, H, W)` of the first image, when the manifest is non-empty.
    pub image_dims: Option<(usize, usize, usize)>,
}

impl DatasetManifest {
    pub fn num_train_ids(&self) -> usize {
        self.train_ids.len()
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.image_path)
    }

    pub fn train_label(&self, sample: &Sample) -> Option<usize> {
        (sample.split == Split::Train)
            .then(|| self.train_ids.get(&sample.vehicle_id).copied())
            .flatten()
    }

    pub fn indices(&self, splits: &[Split]) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| splits.contains(&self.samples[i].split))
            .collect()
    }

    /// Vocabulary size for a named attribute.
    pub fn attribute_classes(&self, name: &str) -> Option<usize> {
        match name {
            "color" => Some(self.colors.len()),
            "type" => Some(self.types.len()),
            _ => None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for s in &self.samples {
            let label = |v: &Vocab, i: Option<usize>| {
                i.and_then(|i| v.label(i)).unwrap_or_default().to_string()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.image_path,
                s.vehicle_id,
                label(&self.colors, s.color_id),
                label(&self.types, s.type_id),
                s.camera_id.as_deref().unwrap_or_default(),
                s.split
            ));
        }
        out
    }
}

struct RawRow {
    line: usize,
    path: String,
    id: u64,
    color: Option<String>,
    kind: Option<String>,
    camera: Option<String>,
    split: Split,
}

/// Parses manifest text; `root` resolves image paths. With `check_files`,
/// every referenced image must exist.
pub fn parse_manifest(text: &str, root: &Path, source: &str, check_files: bool) -> Result<DatasetManifest> {
    let perr = |line: usize, message: String| RamError::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(perr(
            1,
            format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or_default();
        let opt = |i: usize| Some(field(i).to_string()).filter(|s| !s.is_empty());
        if field(0).is_empty() {
            return Err(perr(line, "empty image path".into()));
        }
        let id = field(1)
            .parse::<u64>()
            .map_err(|_| perr(line, format!("vehicle id must be a non-negative integer, got `{}`", field(1))))?;
        let split = field(5).parse::<Split>().map_err(|m| perr(line, m))?;
        rows.push(RawRow {
            line,
            path: field(0).to_string(),
            id,
            color: opt(2),
            kind: opt(3),
            camera: opt(4),
            split,
        });
    }

    let train: BTreeSet<u64> = rows.iter().filter(|r| r.split == Split::Train).map(|r| r.id).collect();
    if let Some(r) = rows.iter().find(|r| r.split != Split::Train && train.contains(&r.id)) {
        return Err(perr(
            r.line,
            format!("vehicle {} appears in both the training and the {} split", r.id, r.split),
        ));
    }
    let train_ids: BTreeMap<u64, usize> = train.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    let colors = Vocab::from_tokens(rows.iter().filter_map(|r| r.color.as_deref()));
    let types = Vocab::from_tokens(rows.iter().filter_map(|r| r.kind.as_deref()));

    let mut samples = Vec::with_capacity(rows.len());
    for r in &rows {
        if check_files && !root.join(&r.path).is_file() {
            return Err(perr(r.line, format!("image `{}` does not exist", r.path)));
        }
        samples.push(Sample {
            image_path: r.path.clone(),
            vehicle_id: r.id,
            color_id: r.color.as_deref().and_then(|c| colors.index(c)),
            type_id: r.kind.as_deref().and_then(|t| types.index(t)),
            camera_id: r.camera.clone(),
            split: r.split,
        });
    }
    let image_dims = match (check_files, samples.first()) {
        (true, Some(s)) => {
            let h = ppm::read_header(&root.join(&s.image_path))?;
            Some((h.channels, h.height, h.width))
        }
        _ => None,
    };
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        samples,
        train_ids,
        colors,
        types,
        image_dims,
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| RamError::io(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, root, &path.display().to_string(), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(text, Path::new("."), "m.csv", false)
    }

    #[test]
    fn two_line_manifest() {
        let m = parse("path,id,color,type,camera,split\na.ppm,17,red,,c1,train\nb.ppm,4,,sedan,,train\n").unwrap();
        assert_eq!(m.num_train_ids(), 2);
        assert_eq!(m.train_ids.values().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(m.train_label(&m.samples[0]), Some(1));
        assert_eq!(m.train_label(&m.samples[1]), Some(0));
        assert_eq!(m.samples[0].color_id, Some(0));
        assert_eq!(m.samples[0].type_id, None);
        assert_eq!(m.samples[1].attribute("type"), Some(0));
    }

    #[test]
    fn unknown_split_is_rejected_with_line() {
        let err = parse("path,id,color,type,camera,split\na.ppm,1,,,,train\nb.ppm,2,,,,probe\n").unwrap_err();
        match err {
            RamError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("probe"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_rows() {
        assert!(parse("path,id\na,1\n").is_err());
        assert!(parse("path,id,color,type,camera,split\na.ppm,-3,,,,train\n").is_err());
        assert!(parse("path,id,color,type,camera,split\na.ppm,1,,,,train\na.ppm,1,,,,query\n").is_err());
    }

    #[test]
    fn dangling_path_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let text = "path,id,color,type,camera,split\nmissing.ppm,1,,,,train\n";
        let err = parse_manifest(text, dir.path(), "m.csv", true).unwrap_err();
        assert!(err.to_string().contains("missing.ppm"), "{err}");
    }

    #[test]
    fn numeric_vocab_sorts_numerically() {
        let v = Vocab::from_tokens(["10", "9", "2"]);
        assert_eq!(v.index("2"), Some(0));
        assert_eq!(v.index("10"), Some(2));
    }

    #[test]
    fn csv_round_trip() {
        let text = "path,id,color,type,camera,split\na.ppm,3,1,0,,query\nb.ppm,3,,,c2,gallery\nc.ppm,1,0,1,,train\n";
        let m = parse(text).unwrap();
        assert_eq!(m.to_csv(), text);
    }
}
