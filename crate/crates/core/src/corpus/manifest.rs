use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::defects::DefectSpec;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "hwid-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Calibrate,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Calibrate => "calibrate",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Claimed writer. For forged samples this is not the writer whose style was used.
    pub writer_id: u32,
    pub split: Split,
    #[serde(default)]
    pub defect: Option<DefectSpec>,
    #[serde(default)]
    pub forged: bool,
    /// Writer whose (jittered) style actually produced a forged sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_writer_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgery_seed: Option<u64>,
    /// Relative to the manifest's directory.
    pub image_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    corpus_seed: u64,
    num_writers: u32,
    image_height: usize,
    image_width: usize,
    band: usize,
    #[serde(default)]
    provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub corpus_seed: u64,
    pub num_writers: u32,
    pub image_height: usize,
    pub image_width: usize,
    /// Writing-band height used by the renderer (the patch size at generation time).
    pub band: usize,
    pub provenance: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn writers(&self) -> Vec<u32> {
        (0..self.num_writers).collect()
    }

    /// Check every structural invariant. With `base_dir`, image files must also exist.
    pub fn validate(&self, base_dir: Option<&Path>) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate sample_id `{}`",
                    s.sample_id
                )));
            }
            if s.writer_id >= self.num_writers {
                return Err(Error::Manifest(format!(
                    "sample `{}` has writer_id {} but the corpus has {} writers",
                    s.sample_id, s.writer_id, self.num_writers
                )));
            }
            if s.forged {
                match s.true_writer_id {
                    Some(t) if t != s.writer_id && t < self.num_writers => {}
                    _ => {
                        return Err(Error::Manifest(format!(
                            "forged sample `{}` needs a true_writer_id different from its claimed writer",
                            s.sample_id
                        )))
                    }
                }
            } else if s.true_writer_id.is_some() {
                return Err(Error::Manifest(format!(
                    "sample `{}` carries true_writer_id but is not flagged forged",
                    s.sample_id
                )));
            }
            if let Some(d) = &s.defect {
                d.validate()
                    .map_err(|e| Error::Manifest(format!("sample `{}`: {e}", s.sample_id)))?;
            }
            if let Some(dir) = base_dir {
                let p = dir.join(&s.image_path);
                if !p.is_file() {
                    return Err(Error::Manifest(format!(
                        "sample `{}`: missing image file {}",
                        s.sample_id,
                        p.display()
                    )));
                }
            }
        }
        let mut counts: BTreeMap<u32, usize> = (0..self.num_writers).map(|w| (w, 0)).collect();
        for s in self.split(Split::Calibrate) {
            *counts.entry(s.writer_id).or_default() += 1;
        }
        let expected = counts.values().copied().max().unwrap_or(0);
        if expected == 0 {
            return Err(Error::Manifest("calibrate split is empty".into()));
        }
        if let Some((w, n)) = counts.iter().find(|(_, &n)| n != expected) {
            let (ew, _) = counts
                .iter()
                .find(|(_, &n)| n == expected)
                .expect("max exists");
            return Err(Error::Manifest(format!(
                "unbalanced calibrate split: writer {w} has {n} samples, writer {ew} has {expected}"
            )));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            corpus_seed: self.corpus_seed,
            num_writers: self.num_writers,
            image_height: self.image_height,
            image_width: self.image_width,
            band: self.band,
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| Error::Manifest(format!("line 1: bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let samples = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<SampleRecord>>>()?;
        Ok(Self {
            corpus_seed: header.corpus_seed,
            num_writers: header.num_writers,
            image_height: header.image_height,
            image_width: header.image_width,
            band: header.band,
            provenance: header.provenance,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn image_path(&self, base_dir: &Path, record: &SampleRecord) -> PathBuf {
        base_dir.join(&record.image_path)
    }
}

/// Read and fully validate a manifest; image paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = CorpusManifest::from_jsonl(&text)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.validate(Some(dir))?;
    Ok(manifest)
}

/// Write through a sibling temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
