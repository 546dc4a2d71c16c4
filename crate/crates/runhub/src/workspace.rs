//! On-disk workspace: artifacts with metadata sidecars, run manifests,
//! selection sets and reviews.
//!
//! ```text
//! <root>/artifacts/<id>.json          metadata and config echo
//! <root>/artifacts/<kind>-<id>.<ext>  payload (checkpoint, json, csv or dataset dir)
//! <root>/manifests/<run id>.json
//! <root>/selections/<id>.json
//! <root>/reviews/<id>.json
//! ```
//!
//! Artifact ids are content addressed over stage, config and inputs, so a
//! re-executed config echo yields the same id. An id is never reused: when
//! the natural id is taken the next free `-N` suffix is used.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use scrub_core::genmodels::{ModelCheckpoint, ModelKind};
use scrub_core::latentfeat::TargetVector;
use scrub_core::synthdata::{load_dataset, DatasetManifest, FeatureName, LabeledImage};

use crate::error::RunError;

pub const WORKSPACE_ENV: &str = "LATENT_SCRUB_WORKSPACE";
pub const DEFAULT_ROOT: &str = "workspace";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Dataset,
    Gan,
    Vae,
    Probe,
    Target,
    Unlearn,
    Eval,
    Attack,
    Ablation,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Dataset => "dataset",
            ArtifactKind::Gan => "gan",
            ArtifactKind::Vae => "vae",
            ArtifactKind::Probe => "probe",
            ArtifactKind::Target => "target",
            ArtifactKind::Unlearn => "unlearn",
            ArtifactKind::Eval => "eval",
            ArtifactKind::Attack => "attack",
            ArtifactKind::Ablation => "ablation",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            ArtifactKind::Dataset => "",
            ArtifactKind::Gan | ArtifactKind::Vae | ArtifactKind::Probe => ".ckpt",
            ArtifactKind::Ablation => ".csv",
            _ => ".json",
        }
    }

    pub fn is_generator(self) -> bool {
        matches!(self, ArtifactKind::Gan | ArtifactKind::Vae)
    }
}

impl From<ModelKind> for ArtifactKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Gan => ArtifactKind::Gan,
            ModelKind::Vae => ArtifactKind::Vae,
            ModelKind::Probe => ArtifactKind::Probe,
        }
    }
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub id: String,
    pub kind: ArtifactKind,
    /// Payload name inside `artifacts/`.
    pub file: String,
    pub stage: String,
    pub run_id: String,
    /// Creation order within the workspace.
    pub sequence: u64,
    pub created_at: String,
    /// Input artifacts by role, e.g. `dataset`, `model`, `target`.
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureName>,
}

/// What to write for a new artifact.
pub enum Payload<'a> {
    Dataset(&'a DatasetManifest, &'a [LabeledImage]),
    Checkpoint(&'a ModelCheckpoint),
    Json(Value),
    Text(String),
}

/// Identity of a new artifact before it is written.
#[derive(Clone, Debug)]
pub struct NewArtifact {
    pub kind: ArtifactKind,
    pub stage: String,
    pub run_id: String,
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
    pub feature: Option<FeatureName>,
    /// Distinguishes several outputs of one run with the same kind.
    pub role: String,
}

/// A user's labelling of generated samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSet {
    pub model_id: String,
    pub selections: Vec<SelectionEntry>,
    #[serde(default)]
    pub annotator: Option<String>,
    pub feature: FeatureName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionEntry {
    pub latent_id: String,
    pub selected: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: String,
    pub command: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub started_at: String,
    pub finished_at: String,
    pub metrics: Value,
}

/// Monotonic even within one millisecond, so ids sort in creation order.
pub fn new_run_id() -> String {
    static GENERATOR: Mutex<ulid::Generator> = Mutex::new(ulid::Generator::new());
    let mut gen = GENERATOR.lock().unwrap_or_else(|e| e.into_inner());
    gen.generate().unwrap_or_else(|_| ulid::Ulid::new()).to_string()
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Sha256 over canonical JSON; object keys are already sorted by serde_json.
fn digest(value: &Value) -> String {
    let mut h = Sha256::new();
    h.update(value.to_string().as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
    write_lock: Arc<Mutex<()>>,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RunError> {
        let root = root.into();
        for sub in ["artifacts", "manifests", "selections", "reviews"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self {
            root,
            write_lock: Arc::new(Mutex::new(())),
        })
    }

    /// Root from the environment, falling back to `./workspace`.
    pub fn default_root() -> PathBuf {
        std::env::var_os(WORKSPACE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    pub fn manifests_dir(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn selections_dir(&self) -> PathBuf {
        self.root.join("selections")
    }

    pub fn reviews_dir(&self) -> PathBuf {
        self.root.join("reviews")
    }

    fn lock(&self) -> MutexGuard<'_, ()> {
        self.write_lock.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn payload_path(&self, meta: &ArtifactMeta) -> PathBuf {
        self.artifacts_dir().join(&meta.file)
    }

    /// Writes the payload first and the sidecar last, so a listed artifact is
    /// always complete.
    pub fn write_artifact(&self, new: NewArtifact, payload: Payload<'_>) -> Result<ArtifactMeta, RunError> {
        let _guard = self.lock();
        let natural = digest(&serde_json::json!({
            "kind": new.kind,
            "stage": new.stage,
            "config": new.config,
            "inputs": new.inputs,
            "role": new.role,
        }));
        let dir = self.artifacts_dir();
        let mut id = natural.clone();
        let mut suffix = 2;
        while dir.join(format!("{id}.json")).exists() {
            id = format!("{natural}-{suffix}");
            suffix += 1;
        }
        let file = format!("{}-{}{}", new.kind, id, new.kind.extension());
        let path = dir.join(&file);
        match payload {
            Payload::Dataset(manifest, data) => {
                scrub_core::synthdata::export_dataset(&path, manifest, data)?
            }
            Payload::Checkpoint(ckpt) => ckpt.save(&path)?,
            Payload::Json(v) => fs::write(&path, serde_json::to_vec_pretty(&v)?)?,
            Payload::Text(t) => fs::write(&path, t)?,
        }
        let meta = ArtifactMeta {
            id: id.clone(),
            kind: new.kind,
            file,
            stage: new.stage,
            run_id: new.run_id,
            sequence: self.count_artifacts()? as u64 + 1,
            created_at: timestamp(),
            inputs: new.inputs,
            config: new.config,
            feature: new.feature,
        };
        fs::write(dir.join(format!("{id}.json")), serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }

    fn count_artifacts(&self) -> Result<usize, RunError> {
        Ok(self.sidecars()?.len())
    }

    fn sidecars(&self) -> Result<Vec<PathBuf>, RunError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.artifacts_dir())? {
            let p = entry?.path();
            if p.is_file() && p.extension().is_some_and(|e| e == "json") {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                if is_artifact_id(stem) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    pub fn meta(&self, id: &str) -> Result<ArtifactMeta, RunError> {
        let path = self.artifacts_dir().join(format!("{id}.json"));
        if !is_artifact_id(id) || !path.is_file() {
            return Err(RunError::UnknownId {
                kind: "artifact",
                id: id.to_string(),
            });
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Like [`Workspace::meta`] but also checks the kind.
    pub fn meta_of(&self, id: &str, kinds: &[ArtifactKind]) -> Result<ArtifactMeta, RunError> {
        let meta = self.meta(id)?;
        if !kinds.contains(&meta.kind) {
            return Err(RunError::invalid(format!(
                "artifact `{id}` is a {}, expected {}",
                meta.kind,
                kind_list(kinds)
            )));
        }
        Ok(meta)
    }

    /// All artifacts in creation order, optionally restricted to some kinds.
    pub fn list(&self, kinds: Option<&[ArtifactKind]>) -> Result<Vec<ArtifactMeta>, RunError> {
        let mut metas = Vec::new();
        for p in self.sidecars()? {
            let meta: ArtifactMeta = serde_json::from_slice(&fs::read(&p)?)?;
            if kinds.is_none_or(|k| k.contains(&meta.kind)) {
                metas.push(meta);
            }
        }
        metas.sort_by(|a, b| (a.sequence, &a.id).cmp(&(b.sequence, &b.id)));
        Ok(metas)
    }

    pub fn latest(&self, kinds: &[ArtifactKind]) -> Result<Option<ArtifactMeta>, RunError> {
        Ok(self.list(Some(kinds))?.pop())
    }

    /// Explicit id if given, else the newest artifact of the kinds. `what`
    /// names the missing input in the error.
    pub fn resolve(
        &self,
        id: Option<&str>,
        kinds: &[ArtifactKind],
        what: &str,
        hint: &str,
    ) -> Result<ArtifactMeta, RunError> {
        match id {
            Some(id) => self.meta_of(id, kinds),
            None => self.latest(kinds)?.ok_or_else(|| RunError::Missing {
                what: what.to_string(),
                detail: format!("no {} artifact in {} ({hint})", kind_list(kinds), self.root.display()),
            }),
        }
    }

    pub fn load_checkpoint(&self, meta: &ArtifactMeta) -> Result<ModelCheckpoint, RunError> {
        Ok(ModelCheckpoint::load(&self.payload_path(meta))?)
    }

    pub fn load_dataset(&self, meta: &ArtifactMeta) -> Result<Vec<LabeledImage>, RunError> {
        Ok(load_dataset(&self.payload_path(meta))?.1)
    }

    pub fn load_json<T: serde::de::DeserializeOwned>(&self, meta: &ArtifactMeta) -> Result<T, RunError> {
        Ok(serde_json::from_slice(&fs::read(self.payload_path(meta))?)?)
    }

    pub fn load_target(&self, meta: &ArtifactMeta) -> Result<TargetVector, RunError> {
        self.load_json(meta)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<PathBuf, RunError> {
        let _guard = self.lock();
        let path = self.manifests_dir().join(format!("{}.json", manifest.run_id));
        fs::write(&path, serde_json::to_vec_pretty(manifest)?)?;
        Ok(path)
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest, RunError> {
        let path = self.manifests_dir().join(format!("{run_id}.json"));
        if !is_token(run_id) || !path.is_file() {
            return Err(RunError::UnknownId {
                kind: "run",
                id: run_id.to_string(),
            });
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Stores a record under a fresh ULID in `selections/` or `reviews/`.
    fn put_record(&self, dir: PathBuf, value: &impl Serialize) -> Result<String, RunError> {
        let _guard = self.lock();
        let id = new_run_id();
        fs::write(dir.join(format!("{id}.json")), serde_json::to_vec_pretty(value)?)?;
        Ok(id)
    }

    pub fn put_selection(&self, set: &SelectionSet) -> Result<String, RunError> {
        self.put_record(self.selections_dir(), set)
    }

    pub fn selection(&self, id: &str) -> Result<SelectionSet, RunError> {
        let path = self.selections_dir().join(format!("{id}.json"));
        if !is_token(id) || !path.is_file() {
            return Err(RunError::UnknownId {
                kind: "selection",
                id: id.to_string(),
            });
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn put_review(&self, review: &Value) -> Result<String, RunError> {
        self.put_record(self.reviews_dir(), review)
    }

    pub fn review(&self, id: &str) -> Result<Value, RunError> {
        let path = self.reviews_dir().join(format!("{id}.json"));
        if !is_token(id) || !path.is_file() {
            return Err(RunError::UnknownId {
                kind: "review",
                id: id.to_string(),
            });
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

const DIGEST_HEX: usize = 16;

/// `<16 hex digits>` optionally followed by `-<n>`.
pub fn is_artifact_id(s: &str) -> bool {
    let (hash, suffix) = match s.split_once('-') {
        Some((h, n)) => (h, Some(n)),
        None => (s, None),
    };
    hash.len() == DIGEST_HEX
        && hash.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase())
        && suffix.is_none_or(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric())
}

fn kind_list(kinds: &[ArtifactKind]) -> String {
    kinds
        .iter()
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join(" or ")
}

/// Latent ids name a position in a seeded latent stream: `s<seed>-<index>`.
pub fn latent_id(seed: u64, index: u64) -> String {
    format!("s{seed}-{index}")
}

pub fn parse_latent_id(id: &str) -> Option<(u64, u64)> {
    let (seed, index) = id.strip_prefix('s')?.split_once('-')?;
    let ok = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_digit());
    if !ok(seed) || !ok(index) {
        return None;
    }
    Some((seed.parse().ok()?, index.parse().ok()?))
}
