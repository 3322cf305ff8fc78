use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::LossBreakdown;
use crate::registration::{RegistrationConfig, Stage, Termination};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(role: &str, path: &Path) -> Result<Self> {
        Ok(Self {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: digest_file(path)?,
        })
    }

    pub fn verify(&self) -> Result<bool> {
        Ok(digest_file(Path::new(&self.path))? == self.sha256)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub iterations_run: usize,
    pub termination: Termination,
    pub seconds: f64,
    pub loss_history: Vec<LossBreakdown>,
}

/// Everything needed to audit or repeat a registration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub status: String,
    pub config: RegistrationConfig,
    pub threads: usize,
    pub inputs: Vec<InputDigest>,
    pub stages: Vec<StageRecord>,
    pub outputs: BTreeMap<String, String>,
    pub total_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_displacement_voxels: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::BadHeader {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::BadHeader {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// True when every recorded input still hashes to its digest.
    pub fn verify_inputs(&self) -> Result<bool> {
        for input in &self.inputs {
            if !input.verify()? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = Sha256::digest(&bytes);
    Ok(hash.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Whitespace-separated table, one row per iteration, for external plotting.
pub fn write_loss_table(path: impl AsRef<Path>, history: &[LossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration\ttotal\tsimilarity\tregularizer\tdistill\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{}\t{}\t{}\t{}", l.total, l.similarity, l.regularizer, l.distill);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            digest_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.frg");
        std::fs::write(&input, b"payload").unwrap();
        let m = RunManifest {
            tool_version: "0.1.0".into(),
            status: "ok".into(),
            config: RegistrationConfig::default(),
            threads: 1,
            inputs: vec![InputDigest::of("moving", &input).unwrap()],
            stages: vec![StageRecord {
                stage: Stage::Coarse,
                iterations_run: 1,
                termination: Termination::Diverged("nan".into()),
                seconds: 0.5,
                loss_history: vec![LossBreakdown::new(0.5, 0.25, 0.0, 0.1)],
            }],
            outputs: BTreeMap::from([("field".to_string(), "s_final.frg".to_string())]),
            total_seconds: 1.0,
            mean_displacement_voxels: Some(0.01),
            error: None,
        };
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
        assert!(m.verify_inputs().unwrap());
        std::fs::write(&input, b"changed").unwrap();
        assert!(!m.verify_inputs().unwrap());

        let table = dir.path().join("loss.txt");
        write_loss_table(&table, &m.stages[0].loss_history).unwrap();
        let text = std::fs::read_to_string(&table).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("0\t0.525\t0.5\t0.25\t0"));
    }
}
