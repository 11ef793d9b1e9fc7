use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::taxonomy::LesionClass;

/// How a record's label was established.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroundTruth {
    Histopathology,
    Consensus,
    Confocal,
}

impl GroundTruth {
    pub fn as_str(self) -> &'static str {
        match self {
            GroundTruth::Histopathology => "histopathology",
            GroundTruth::Consensus => "consensus",
            GroundTruth::Confocal => "confocal",
        }
    }
}

impl FromStr for GroundTruth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "histopathology" => Ok(GroundTruth::Histopathology),
            "consensus" => Ok(GroundTruth::Consensus),
            "confocal" => Ok(GroundTruth::Confocal),
            other => Err(Error::Format(format!("unknown ground-truth source {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub label: LesionClass,
    pub source: GroundTruth,
    pub split: Split,
}

/// Labeled image records with unique paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<Record>,
    /// Directory that relative image paths are resolved against.
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Duplicate(format!("image path {:?} listed twice", r.path)));
            }
        }
        Ok(DatasetManifest {
            records,
            root: PathBuf::new(),
        })
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub(crate) fn records_mut(&mut self) -> &mut [Record] {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per class, in class-index order.
    pub fn class_counts(&self) -> [usize; 7] {
        let mut counts = [0; 7];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }

    /// Per-class counts restricted to one split.
    pub fn split_counts(&self, split: Split) -> [usize; 7] {
        let mut counts = [0; 7];
        for r in self.records.iter().filter(|r| r.split == split) {
            counts[r.label.index()] += 1;
        }
        counts
    }

    pub fn subset(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "source", "split"]).unwrap();
        for r in &self.records {
            w.write_record([&r.path, r.label.as_str(), r.source.as_str(), r.split.as_str()])
                .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses manifest CSV text. Columns may appear in any order; extra columns
/// are ignored.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("manifest header: {e}")))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("manifest lacks a {name:?} column")))
    };
    let (path, label, source, split) =
        (column("path")?, column("label")?, column("source")?, column("split")?);
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Format(format!("manifest row {}: {e}", i + 1)))?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let record = Record {
            path: field(path).to_string(),
            label: field(label).parse()?,
            source: field(source).parse()?,
            split: field(split).parse()?,
        };
        if record.path.is_empty() {
            return Err(Error::Format(format!("manifest row {} has an empty path", i + 1)));
        }
        records.push(record);
    }
    DatasetManifest::new(records)
}

/// Reads a manifest; relative image paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(parse_manifest(&text)?.with_root(root))
}
