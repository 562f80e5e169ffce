//! Dataset manifests and the small-scale / few-shot split samplers.
//!
//! Manifest JSONL: an optional leading `{"meta": ...}` line with provenance,
//! then one entry object per line. Both samplers reduce the train split only
//! and are deterministic in `(manifest, percentage, seed)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<i64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ManifestMeta {
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub meta: ManifestMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    SmallScale,
    FewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub mode: SamplerMode,
    /// Fraction in (0, 1].
    pub percentage: f64,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentage > 0.0 && self.percentage <= 1.0) {
            return Err(Error::invalid(
                "sampler spec",
                format!("percentage {} outside (0, 1]", self.percentage),
            ));
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, meta: ManifestMeta) -> Self {
        DatasetManifest { entries, meta }
    }

    pub fn validate(&self) -> Result<()> {
        let mut refs = BTreeSet::new();
        for (i, entry) in self.entries.iter().enumerate() {
            if !refs.insert(entry.image_ref.as_str()) {
                return Err(Error::ManifestLine {
                    line: i + 1,
                    detail: format!("duplicate image_ref `{}`", entry.image_ref),
                });
            }
            if entry.split == Split::Train && entry.person_id.is_none() {
                return Err(Error::ManifestLine {
                    line: i + 1,
                    detail: format!("train entry `{}` missing person_id", entry.image_ref),
                });
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON serialization of the entries.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for entry in &self.entries {
            hasher.update(serde_json::to_string(entry).expect("entry serializes"));
            hasher.update(b"\n");
        }
        hex_string(&hasher.finalize())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct train person ids in ascending order.
    pub fn train_ids(&self) -> Vec<i64> {
        let set: BTreeSet<i64> =
            self.entries_in(Split::Train).filter_map(|e| e.person_id).collect();
        set.into_iter().collect()
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    let mut meta = ManifestMeta::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::ManifestLine { line: i + 1, detail: e.to_string() })?;
        if let Some(meta_value) = value.get("meta") {
            if i != 0 {
                return Err(Error::ManifestLine {
                    line: i + 1,
                    detail: "meta line allowed only as the first line".into(),
                });
            }
            meta = serde_json::from_value(meta_value.clone())
                .map_err(|e| Error::ManifestLine { line: i + 1, detail: e.to_string() })?;
            continue;
        }
        let entry: ManifestEntry = serde_json::from_value(value)
            .map_err(|e| Error::ManifestLine { line: i + 1, detail: e.to_string() })?;
        if entry.split == Split::Train && entry.person_id.is_none() {
            return Err(Error::ManifestLine {
                line: i + 1,
                detail: format!("train entry `{}` missing person_id", entry.image_ref),
            });
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest { entries, meta };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let write_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(out, "{}", serde_json::json!({ "meta": manifest.meta })).map_err(write_err)?;
    for entry in &manifest.entries {
        writeln!(out, "{}", serde_json::to_string(entry)?).map_err(write_err)?;
    }
    Ok(())
}

/// Keep `floor(percentage * num_train_ids)` person ids, drawn uniformly, and
/// every train image of the chosen ids; query/gallery entries pass through.
pub fn sample_small_scale(
    manifest: &DatasetManifest,
    spec: &SamplerSpec,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if spec.mode != SamplerMode::SmallScale {
        return Err(Error::invalid("sample_small_scale", "spec mode is not small_scale"));
    }
    let ids = manifest.train_ids();
    let keep = ((spec.percentage * ids.len() as f64).floor()) as usize;
    if keep == 0 {
        return Err(Error::invalid(
            "sample_small_scale",
            format!("percentage {} of {} ids selects zero ids", spec.percentage, ids.len()),
        ));
    }
    let mut shuffled = ids.clone();
    let mut rng = StreamKey::from_seed(spec.seed).child(0).stream();
    shuffled.shuffle(&mut rng);
    let chosen: BTreeSet<i64> = shuffled.into_iter().take(keep).collect();

    let entries: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| {
            e.split != Split::Train || e.person_id.map(|id| chosen.contains(&id)).unwrap_or(false)
        })
        .cloned()
        .collect();
    Ok(DatasetManifest {
        entries,
        meta: ManifestMeta {
            source: "sample_small_scale".into(),
            seed: Some(spec.seed),
            parent_digest: Some(manifest.digest()),
        },
    })
}

/// Round-half-up of `x`.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Keep every train person id, sampling `max(1, round(percentage * n))`
/// images per id uniformly; query/gallery entries pass through.
pub fn sample_few_shot(manifest: &DatasetManifest, spec: &SamplerSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    if spec.mode != SamplerMode::FewShot {
        return Err(Error::invalid("sample_few_shot", "spec mode is not few_shot"));
    }
    // Positions of each id's train images, in manifest order.
    let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        if entry.split == Split::Train {
            if let Some(id) = entry.person_id {
                by_id.entry(id).or_default().push(i);
            }
        }
    }
    let root = StreamKey::from_seed(spec.seed);
    let mut keep_positions = BTreeSet::new();
    for (&id, positions) in &by_id {
        let n = positions.len();
        let k = round_half_up(spec.percentage * n as f64).clamp(1, n);
        let mut order = positions.clone();
        let mut rng = root.child(id as u64).stream();
        order.shuffle(&mut rng);
        keep_positions.extend(order.into_iter().take(k));
    }
    let entries: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(i, e)| e.split != Split::Train || keep_positions.contains(i))
        .map(|(_, e)| e.clone())
        .collect();
    Ok(DatasetManifest {
        entries,
        meta: ManifestMeta {
            source: "sample_few_shot".into(),
            seed: Some(spec.seed),
            parent_digest: Some(manifest.digest()),
        },
    })
}
