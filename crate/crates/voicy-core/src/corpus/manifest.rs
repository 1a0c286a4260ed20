use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Result};

/// Degradation condition of one audio rendition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Reverb,
    NoisyReverb,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clean, Condition::Reverb, Condition::NoisyReverb];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Reverb => "reverb",
            Condition::NoisyReverb => "noisy_reverb",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clean" => Ok(Condition::Clean),
            "reverb" => Ok(Condition::Reverb),
            "noisy_reverb" => Ok(Condition::NoisyReverb),
            other => Err(format!("unknown condition {other:?}")),
        }
    }
}

/// One rendition of one utterance. `snr_db` is absent for conditions without
/// added noise, `t60_s` for conditions without a room. `error` marks entries
/// the dataset builder had to skip, with the cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker_id: String,
    pub condition: Condition,
    pub audio_path: String,
    pub alignment_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t60_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    manifest: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    toy_spec_hash: Option<String>,
}

const MANIFEST_KIND: &str = "voicy-corpus";
const MANIFEST_VERSION: u32 = 1;

/// An ordered collection of manifest records plus provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
    pub toy_spec_hash: Option<String>,
}

impl CorpusManifest {
    /// Rejects duplicate (id, condition) pairs and records without paths.
    pub fn validate(&self) -> Result<()> {
        let mut seen: Vec<(&str, Condition)> = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if r.audio_path.is_empty() {
                return Err(CorpusError::BadManifest {
                    path: String::new(),
                    line: 0,
                    detail: format!("record {} has no audio path", r.id),
                });
            }
            let key = (r.id.as_str(), r.condition);
            if seen.contains(&key) {
                return Err(CorpusError::DuplicateRecord {
                    id: r.id.clone(),
                    condition: r.condition.to_string(),
                });
            }
            seen.push(key);
        }
        Ok(())
    }

    pub fn by_condition(&self, condition: Condition) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.condition == condition)
    }
}

/// Reads a manifest line by line (no full-file preload). The first line is a
/// header carrying format version and optional toy-spec hash.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut manifest = CorpusManifest::default();
    let mut lines = reader.lines().enumerate();

    let (_, first) = match lines.next() {
        Some((i, line)) => (
            i,
            line.map_err(|source| CorpusError::Io {
                path: display.clone(),
                source,
            })?,
        ),
        None => return Ok(manifest),
    };
    let header: ManifestHeader =
        serde_json::from_str(&first).map_err(|e| CorpusError::BadManifest {
            path: display.clone(),
            line: 1,
            detail: format!("bad header: {e}"),
        })?;
    if header.manifest != MANIFEST_KIND || header.version != MANIFEST_VERSION {
        return Err(CorpusError::BadManifest {
            path: display,
            line: 1,
            detail: format!(
                "unsupported manifest {}/{}, expected {MANIFEST_KIND}/{MANIFEST_VERSION}",
                header.manifest, header.version
            ),
        });
    }
    manifest.toy_spec_hash = header.toy_spec_hash;

    for (i, line) in lines {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::BadManifest {
                path: display.clone(),
                line: i + 1,
                detail: e.to_string(),
            })?;
        manifest.records.push(record);
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let display = path.display().to_string();
    let wrap = |source: std::io::Error| CorpusError::Io {
        path: display.clone(),
        source,
    };
    let mut out = fs::File::create(path).map_err(wrap)?;
    let header = ManifestHeader {
        manifest: MANIFEST_KIND.into(),
        version: MANIFEST_VERSION,
        toy_spec_hash: manifest.toy_spec_hash.clone(),
    };
    let mut text = serde_json::to_string(&header).expect("header serialises");
    text.push('\n');
    for record in &manifest.records {
        text.push_str(&serde_json::to_string(record).expect("record serialises"));
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(wrap)
}
