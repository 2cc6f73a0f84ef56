//! Tab-separated video manifests: `id  frame_dir  n_frames  label  split`.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub frame_dir: PathBuf,
    pub n_frames: usize,
    pub label: usize,
    pub split: Split,
}

/// Reads a manifest. Relative frame directories resolve against the
/// manifest's own directory; blank lines and `#` comments are skipped.
/// With `num_classes`, labels outside `0..num_classes` are rejected.
pub fn load_manifest(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Vec<VideoRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let records = parse_manifest(&text, base, path, num_classes)?;
    if records.is_empty() {
        log::warn!("manifest {} lists no videos", path.display());
    }
    Ok(records)
}

pub fn parse_manifest(
    text: &str,
    base: &Path,
    path: &Path,
    num_classes: Option<usize>,
) -> Result<Vec<VideoRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(err(format!("duplicate id `{id}`")));
        }
        let n_frames: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad frame count `{}`", fields[2])))?;
        if n_frames == 0 {
            return Err(err("frame count must be at least 1".into()));
        }
        let label: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("bad label `{}`", fields[3])))?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(err(format!("label {label} out of range for {c} classes")));
            }
        }
        let split = fields[4].parse().map_err(|e: Error| err(e.to_string()))?;
        let frame_dir = base.join(fields[1]);
        if !frame_dir.is_dir() {
            return Err(err(format!("frame directory {} does not exist", frame_dir.display())));
        }
        records.push(VideoRecord {
            id,
            frame_dir,
            n_frames,
            label,
            split,
        });
    }
    Ok(records)
}

/// Writes records with frame directories as given.
pub fn write_manifest(path: impl AsRef<Path>, records: &[VideoRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            r.frame_dir.display(),
            r.n_frames,
            r.label,
            r.split
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn filter_split(records: &[VideoRecord], split: Split) -> Vec<VideoRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}
