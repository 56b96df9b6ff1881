use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::adapter::{BaseWeights, LoraAdapter, DEFAULT_TARGET_PATTERNS};
use crate::concept::{load_concept_spec, BenignProbeSet};
use crate::container::write_bytes_atomic;
use crate::edit::{edit_adapter, EditConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Adapter,
    Report,
}

impl ArtifactKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adapter" => Some(ArtifactKind::Adapter),
            "report" => Some(ArtifactKind::Report),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Adapter => "adapter",
            ArtifactKind::Report => "report",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ArtifactKind::Adapter => "edited.safetensors",
            ArtifactKind::Report => "report.json",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            ArtifactKind::Adapter => "application/octet-stream",
            ArtifactKind::Report => "application/json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub url: String,
    /// Hex SHA-256 of the file, also served as the ETag.
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub code: String,
    pub message: String,
}

impl From<&Error> for JobFailure {
    fn from(e: &Error) -> Self {
        Self {
            code: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub job_id: String,
    pub state: JobState,
    pub submitted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<DateTime<Utc>>,
    pub base: String,
    pub patterns: Vec<String>,
    pub config: EditConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<JobFailure>,
    /// Keyed by `adapter` / `report`; present only once the job succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<BTreeMap<String, Artifact>>,
}

/// The `config` part of a submission: `base` and optional `patterns` next
/// to the [`EditConfig`] fields.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRequest {
    pub base: String,
    pub patterns: Vec<String>,
    pub config: EditConfig,
}

impl JobRequest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut map: Map<String, Value> = serde_json::from_slice(bytes)
            .map_err(|e| Error::invalid_config("config", format!("not a JSON object: {e}")))?;
        let base = match map.remove("base") {
            Some(Value::String(s)) if !s.is_empty() => s,
            Some(_) => return Err(Error::invalid_config("base", "must be a non-empty string")),
            None => return Err(Error::invalid_config("base", "missing")),
        };
        let patterns = match map.remove("patterns") {
            None | Some(Value::Null) => DEFAULT_TARGET_PATTERNS.iter().map(|s| s.to_string()).collect(),
            Some(v) => serde_json::from_value::<Vec<String>>(v)
                .map_err(|_| Error::invalid_config("patterns", "must be an array of strings"))?,
        };
        let config: EditConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::invalid_config("config", e.to_string()))?;
        config.validate()?;
        Ok(Self {
            base,
            patterns,
            config,
        })
    }
}

const STATE_FILE: &str = "state.json";
const ADAPTER_INPUT: &str = "adapter.safetensors";
const CONCEPT_INPUT: &str = "concept.safetensors";
const PROBES_INPUT: &str = "probes.safetensors";

/// One directory per job holding its inputs, outputs and `state.json`.
#[derive(Debug, Clone)]
pub struct Spool {
    root: PathBuf,
}

impl Spool {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn artifact_path(&self, id: &str, kind: ArtifactKind) -> PathBuf {
        self.job_dir(id).join(kind.file_name())
    }

    pub fn write_inputs(&self, id: &str, adapter: &[u8], concept: &[u8], probes: Option<&[u8]>) -> Result<()> {
        let dir = self.job_dir(id);
        fs::create_dir_all(&dir)?;
        write_bytes_atomic(dir.join(ADAPTER_INPUT), adapter)?;
        write_bytes_atomic(dir.join(CONCEPT_INPUT), concept)?;
        if let Some(p) = probes {
            write_bytes_atomic(dir.join(PROBES_INPUT), p)?;
        }
        Ok(())
    }

    pub fn save_state(&self, job: &EditJob) -> Result<()> {
        let json = serde_json::to_vec_pretty(job).expect("job serializes");
        write_bytes_atomic(self.job_dir(&job.job_id).join(STATE_FILE), &json)
    }

    /// Every job with a readable state file. Directories without one (a crash
    /// between creating the directory and the first state write) are skipped.
    pub fn load_all(&self) -> Result<Vec<EditJob>> {
        let mut jobs = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path().join(STATE_FILE);
            let Ok(bytes) = fs::read(&path) else { continue };
            match serde_json::from_slice::<EditJob>(&bytes) {
                Ok(job) => jobs.push(job),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        jobs.sort_by(|a, b| (a.submitted_at, &a.job_id).cmp(&(b.submitted_at, &b.job_id)));
        Ok(jobs)
    }

    pub fn remove(&self, id: &str) -> Result<()> {
        match fs::remove_dir_all(self.job_dir(id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    /// Runs the edit for `job` from its spooled inputs and writes both
    /// artifacts.
    pub fn execute(&self, job: &EditJob, base: &BaseWeights) -> Result<BTreeMap<String, Artifact>> {
        let dir = self.job_dir(&job.job_id);
        let adapter = LoraAdapter::load(dir.join(ADAPTER_INPUT))?;
        let spec = load_concept_spec(dir.join(CONCEPT_INPUT))?;
        let probes_path = dir.join(PROBES_INPUT);
        let probes = probes_path
            .exists()
            .then(|| BenignProbeSet::load(&probes_path))
            .transpose()?;
        let outcome = edit_adapter(&adapter, base, &spec, &job.config, &job.patterns, probes.as_ref())?;

        let adapter_bytes = crate::container::write_container(&outcome.adapter.to_tensor_map()?)?;
        let report_bytes = outcome.report.to_json().into_bytes();
        let mut artifacts = BTreeMap::new();
        for (kind, bytes) in [(ArtifactKind::Adapter, adapter_bytes), (ArtifactKind::Report, report_bytes)] {
            write_bytes_atomic(self.artifact_path(&job.job_id, kind), &bytes)?;
            artifacts.insert(
                kind.as_str().to_string(),
                Artifact {
                    url: format!("/v1/edits/{}/artifacts/{}", job.job_id, kind.as_str()),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                },
            );
        }
        Ok(artifacts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_parsing() {
        let r = JobRequest::from_json(br#"{"base": "sd15", "steps": 3}"#).unwrap();
        assert_eq!(r.base, "sd15");
        assert_eq!(r.config.steps, 3);
        assert_eq!(r.patterns, DEFAULT_TARGET_PATTERNS);

        let field = |json: &str| match JobRequest::from_json(json.as_bytes()) {
            Err(Error::InvalidConfig { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(r#"{"steps": 3}"#), "base");
        assert_eq!(field(r#"{"base": "x", "steps": 0}"#), "steps");
        assert_eq!(field(r#"{"base": "x", "patterns": "*"}"#), "patterns");
        assert_eq!(field(r#"{"base": "x", "bogus": 1}"#), "config");
        assert_eq!(field("[1]"), "config");
    }

    #[test]
    fn state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spool = Spool::open(dir.path()).unwrap();
        let job = EditJob {
            job_id: "abc".into(),
            state: JobState::Queued,
            submitted_at: Utc::now(),
            started_at: None,
            completed_at: None,
            base: "b".into(),
            patterns: vec!["*".into()],
            config: EditConfig::default(),
            failure: None,
            artifacts: None,
        };
        fs::create_dir_all(spool.job_dir("abc")).unwrap();
        fs::create_dir_all(spool.job_dir("orphan")).unwrap();
        spool.save_state(&job).unwrap();
        assert_eq!(spool.load_all().unwrap(), vec![job]);
        spool.remove("abc").unwrap();
        spool.remove("abc").unwrap();
        assert!(spool.load_all().unwrap().is_empty());
    }
}
