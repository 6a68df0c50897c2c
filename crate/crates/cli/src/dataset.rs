//! Dataset files (JSON) and checksum manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pdvae::motion::{ConditioningFeatures, GroupSample, MotionSequence};

use crate::error::CliError;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceFile {
    joints: usize,
    frames: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupFile {
    group_id: usize,
    cond_dim: usize,
    conditioning: Vec<f64>,
    beats: Vec<usize>,
    dancers: Vec<SequenceFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    groups: Vec<GroupFile>,
}

const FORMAT: &str = "pdvae-dataset-1";

pub fn dataset_to_json(groups: &[GroupSample]) -> String {
    let file = DatasetFile {
        format: FORMAT.into(),
        groups: groups
            .iter()
            .map(|g| GroupFile {
                group_id: g.group_id,
                cond_dim: g.conditioning.dim(),
                conditioning: g.conditioning.data().to_vec(),
                beats: g.conditioning.beats().to_vec(),
                dancers: g
                    .dancers
                    .iter()
                    .map(|d| SequenceFile { joints: d.joints(), frames: d.frames(), data: d.data().to_vec() })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("dataset serialises")
}

pub fn dataset_from_json(text: &str) -> Result<Vec<GroupSample>, CliError> {
    let bad = |e: String| CliError::Runtime(format!("dataset: {e}"));
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if file.format != FORMAT {
        return Err(bad(format!("unknown format '{}'", file.format)));
    }
    file.groups
        .into_iter()
        .map(|g| {
            let dancers = g
                .dancers
                .into_iter()
                .map(|d| MotionSequence::new(d.joints, d.frames, d.data))
                .collect::<pdvae::Result<Vec<_>>>()?;
            let frames = dancers.first().map_or(0, |d| d.frames());
            let cond = ConditioningFeatures::new(frames, g.cond_dim, g.conditioning, g.beats)?;
            Ok(GroupSample::new(g.group_id, dancers, cond)?)
        })
        .collect::<Result<Vec<_>, CliError>>()
}

pub fn read_dataset(path: &Path) -> Result<Vec<GroupSample>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read dataset {}: {e}", path.display())))?;
    dataset_from_json(&text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a sequence's values as little-endian `f64` bytes.
pub fn sequence_digest(m: &MotionSequence) -> String {
    let bytes: Vec<u8> = m.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
}

/// File list with checksums written next to every produced artifact set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Runtime(format!("manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdvae::motion::{synth_group_dataset, SkeletonKind, SynthConfig};

    #[test]
    fn dataset_round_trip() {
        let cfg = SynthConfig { groups: 2, dancers: 2, frames: 16, skeleton: SkeletonKind::Toy8, ..SynthConfig::default() };
        let data = synth_group_dataset(&cfg, 3).unwrap();
        let back = dataset_from_json(&dataset_to_json(&data)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.dancers, b.dancers);
            assert_eq!(a.conditioning, b.conditioning);
        }
        assert!(dataset_from_json("{\"format\":\"x\",\"groups\":[]}").is_err());
        assert!(dataset_from_json("not json").is_err());
    }
}
