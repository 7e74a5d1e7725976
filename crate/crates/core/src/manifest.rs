//! Plain-text object manifest.
//!
//! One object per line, tab-separated:
//! `object_id  label  split  points_path  views_path  [views.precomputed=true]`.
//! Paths are relative to the manifest's directory. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numkit::io::read_tensor;
use crate::numkit::Tensor;
use crate::pointbranch::PointCloud;
use crate::viewbranch::ViewStack;

pub const PRECOMPUTED_FLAG: &str = "views.precomputed=true";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split `{s}` (train|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub object_id: String,
    pub label: u32,
    pub split: Split,
    pub points: PathBuf,
    pub views: PathBuf,
    pub precomputed_views: bool,
}

/// The view input of one object: rendered images or external feature maps.
#[derive(Clone, Debug)]
pub enum ViewInput {
    Images(ViewStack),
    /// `M × C × H × W` feature maps.
    Features(Tensor),
}

impl ViewInput {
    pub fn num_views(&self) -> usize {
        match self {
            ViewInput::Images(v) => v.num_views(),
            ViewInput::Features(t) => t.shape()[0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedObject {
    pub object_id: String,
    pub label: u32,
    pub split: Split,
    pub cloud: PointCloud,
    pub views: ViewInput,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::contract(format!("manifest line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if !(5..=6).contains(&fields.len()) {
                return Err(bad(format!("expected 5 or 6 tab-separated fields, got {}", fields.len())));
            }
            let label = fields[1]
                .parse::<u32>()
                .map_err(|_| bad(format!("label `{}` is not a non-negative integer", fields[1])))?;
            let split = fields[2].parse::<Split>().map_err(|e| bad(e.to_string()))?;
            let precomputed_views = match fields.get(5) {
                None => false,
                Some(&PRECOMPUTED_FLAG) => true,
                Some(&"views.precomputed=false") => false,
                Some(other) => return Err(bad(format!("unknown flag `{other}`"))),
            };
            if fields[0].is_empty() {
                return Err(bad("empty object id".into()));
            }
            entries.push(ManifestEntry {
                object_id: fields[0].to_string(),
                label,
                split,
                points: PathBuf::from(fields[3]),
                views: PathBuf::from(fields[4]),
                precomputed_views,
            });
        }
        let m = Manifest {
            root: root.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root)
    }

    /// Unique ids and a contiguous `0..K` label range.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::contract("manifest has no entries"));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.object_id.as_str()) {
                return Err(Error::contract(format!("duplicate object id `{}`", e.object_id)));
            }
        }
        let k = self.num_classes();
        let labels: HashSet<u32> = self.entries.iter().map(|e| e.label).collect();
        if labels.len() != k {
            return Err(Error::contract(format!(
                "labels are not contiguous: {} distinct values with maximum {}",
                labels.len(),
                k - 1
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label as usize + 1).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# object_id\tlabel\tsplit\tpoints\tviews\tflags\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}",
                e.object_id,
                e.label,
                e.split,
                e.points.display(),
                e.views.display()
            ));
            if e.precomputed_views {
                s.push('\t');
                s.push_str(PRECOMPUTED_FLAG);
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<LoadedObject> {
        let points = read_tensor(self.root.join(&entry.points))?;
        let cloud = PointCloud::from_tensor(entry.object_id.clone(), &points)?;
        let raw = read_tensor(self.root.join(&entry.views))?;
        let views = if entry.precomputed_views {
            if raw.rank() != 4 {
                return Err(Error::shape("precomputed views", raw.shape(), &[0, 0, 0, 0]));
            }
            ViewInput::Features(raw)
        } else {
            ViewInput::Images(ViewStack::new(raw)?)
        };
        Ok(LoadedObject {
            object_id: entry.object_id.clone(),
            label: entry.label,
            split: entry.split,
            cloud,
            views,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedObject>> {
        self.split(split).map(|e| self.load(e)).collect()
    }
}
