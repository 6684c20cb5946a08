//! The running system: corpus store, featurizer, review desk and consent gate
//! behind one writer, plus search, explanations and on-disk persistence.
//!
//! Every method that mutates takes `&mut self`; the HTTP layer wraps the
//! [`System`] in a lock so all writes are serialized through the desk's audit
//! log. Timestamps are passed in, so drivers with a synthetic clock stay
//! deterministic.
//!
//! A data directory holds:
//!
//! | path | contents |
//! |---|---|
//! | `audit.log` | the hash-chained event log (authoritative) |
//! | `assets/<id>.png` | registered images |
//! | `meshes/<name>.stl` | registered meshes, binary STL |
//! | `moderators.toml` | moderator ids, groups and header tokens |
//! | `model.json` | snapshot of the current model (informational) |

pub mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    self, Category, ClassifierError, LabeledExample, ModelState, Prediction, DEFAULT_LEARNING_RATE, DEFAULT_TOP_K,
};
use crate::consent::{ConsentPolicy, GateStatus, ReasonCode};
use crate::corpus::{
    AssetKind, CorpusError, CorpusFiles, CorpusStore, IngestStatus, MediaAsset, RawDocument, SeedSet, ThingDocument,
};
use crate::features::{FeatureError, FeatureVector, Featurizer, FeaturizerConfig};
use crate::mesh::{self, MeshError, TriangleMesh};
use crate::moderation::audit::{AuditError, AuditLog};
use crate::moderation::{
    self, Annotation, Desk, DeskConfig, DisagreementRecord, Event, ModerationError, ModeratorProfile, ReviewCase,
    ReviewDecision, ReviewTask, TaskState, ThresholdProfile, DEFAULT_GROUP,
};

pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 100;
pub const DATA_DIR_ENV: &str = "MOD_DATA_DIR";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("threshold {0} is not a probability")]
    BadThreshold(f64),
    #[error("unknown audience group `{0}`")]
    UnknownGroup(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("missing or unknown moderator token")]
    Unauthorized,
    #[error("no model has been trained yet")]
    NoModel,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Moderation(#[from] ModerationError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("{path}: {reason}")]
    Storage { path: PathBuf, reason: String },
}

impl ServiceError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "NOT_FOUND",
            ServiceError::BadThreshold(_) => "BAD_THRESHOLD",
            ServiceError::UnknownGroup(_) => "UNKNOWN_GROUP",
            ServiceError::BadRequest(_) => "BAD_REQUEST",
            ServiceError::Unauthorized => "UNAUTHORIZED",
            ServiceError::NoModel => "NO_MODEL",
            ServiceError::Corpus(e) => match e {
                CorpusError::MissingId => "MISSING_ID",
                CorpusError::EmptyDocument(_) => "EMPTY_DOCUMENT",
                CorpusError::MalformedField(_) => "MALFORMED_FIELD",
                CorpusError::UnknownThing(_) => "NOT_FOUND",
                CorpusError::InsufficientPositives { .. } => "INSUFFICIENT_POSITIVES",
                CorpusError::InsufficientNegatives { .. } => "INSUFFICIENT_NEGATIVES",
                _ => "CORPUS_ERROR",
            },
            ServiceError::Moderation(e) => match e {
                ModerationError::DuplicateTaskForThing(_) => "DUPLICATE_TASK_FOR_THING",
                ModerationError::QueueEmpty => "QUEUE_EMPTY",
                ModerationError::UnknownModerator(_) => "UNAUTHORIZED",
                ModerationError::UnknownTask(_) | ModerationError::UnknownThing(_) => "NOT_FOUND",
                ModerationError::LeaseViolation { .. } => "LEASE_VIOLATION",
                ModerationError::StaleTask(_) => "STALE_TASK",
                ModerationError::InvalidDecision(_) => "INVALID_DECISION",
                ModerationError::UnknownCategory(_) => "UNKNOWN_CATEGORY",
                ModerationError::UnknownGroup(_) => "UNKNOWN_GROUP",
                _ => "MODERATION_ERROR",
            },
            ServiceError::Classifier(ClassifierError::HashParamMismatch { .. }) => "HASH_PARAM_MISMATCH",
            ServiceError::Classifier(_) => "CLASSIFIER_ERROR",
            ServiceError::Feature(_) => "FEATURE_ERROR",
            ServiceError::Mesh(_) => "MALFORMED_STL",
            ServiceError::Audit(_) => "AUDIT_ERROR",
            ServiceError::Storage { .. } => "STORAGE_ERROR",
        }
    }
}

type Result<T, E = ServiceError> = std::result::Result<T, E>;

fn storage(path: &Path, reason: impl ToString) -> ServiceError {
    ServiceError::Storage { path: path.to_owned(), reason: reason.to_string() }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub desk: DeskConfig,
    pub featurizer: FeaturizerConfig,
    pub consent: ConsentPolicy,
    pub learning_rate: f64,
    pub top_k: usize,
    /// Seeds the audit-draw generator used by enqueueing.
    pub rng_seed: u64,
    /// Retrain as soon as a task collects all its reviews.
    pub auto_retrain: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            featurizer: FeaturizerConfig::default(),
            consent: ConsentPolicy::default(),
            learning_rate: DEFAULT_LEARNING_RATE,
            top_k: DEFAULT_TOP_K,
            rng_seed: 0,
            auto_retrain: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Response types

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reason {
    pub code: ReasonCode,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThingSummary {
    pub id: String,
    pub version: u32,
    pub title: String,
    pub tags: BTreeSet<String>,
    pub images: Vec<String>,
}

impl ThingSummary {
    fn of(doc: &ThingDocument) -> Self {
        Self {
            id: doc.id.clone(),
            version: doc.version,
            title: doc.title.clone(),
            tags: doc.tags.clone(),
            images: doc.images.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IngestOutcome {
    pub id: String,
    pub version: u32,
    pub status: IngestStatus,
    pub gate: GateStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advisory: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub created: usize,
    pub replaced: usize,
    pub unchanged: usize,
    pub images: usize,
    pub meshes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedReport {
    pub positives: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub model_version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReviewOutcome {
    pub review_id: String,
    pub task: ReviewTask,
    pub examples_emitted: usize,
    pub disagreements: Vec<DisagreementRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrained_to: Option<u64>,
}

/// Who is asking. Moderators see consent-blocked items, with the reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Requester {
    EndUser,
    Moderator(ModeratorProfile),
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
pub struct SearchQuery {
    #[serde(default, rename = "q")]
    pub terms: String,
    #[serde(default, rename = "threshold")]
    pub threshold_override: Option<f64>,
    #[serde(default, rename = "group")]
    pub audience_group: Option<String>,
    /// 1-based.
    #[serde(default)]
    pub page: Option<usize>,
    #[serde(default)]
    pub page_size: Option<usize>,
    /// Leave flagged items out instead of marking them.
    #[serde(default)]
    pub hide_flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchItem {
    pub thing: ThingSummary,
    pub probabilities: BTreeMap<Category, f64>,
    pub flags: BTreeSet<Category>,
    pub gate: GateStatus,
    pub reasons: Vec<Reason>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HiddenNotice {
    pub code: ReasonCode,
    pub count: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchResult {
    pub items: Vec<SearchItem>,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub audience_group: String,
    pub applied_thresholds: BTreeMap<Category, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_version: Option<u64>,
    pub hidden: Vec<HiddenNotice>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleItem {
    pub thing: ThingSummary,
    pub max_probability: f64,
    pub probabilities: BTreeMap<Category, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdExamples {
    pub threshold: f64,
    pub qualifying: usize,
    pub items: Vec<ExampleItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotationView {
    pub review_id: String,
    #[serde(flatten)]
    pub annotation: Annotation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReviewView {
    pub review_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moderator_id: Option<String>,
    pub audience_group: String,
    pub case: ReviewCase,
    pub selected_categories: BTreeSet<Category>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Explanation {
    pub thing: ThingSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_version: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    pub audience_group: String,
    pub flags: BTreeSet<Category>,
    pub gate: GateStatus,
    pub reasons: Vec<Reason>,
    pub needs_discussion: bool,
    pub reviews: Vec<ReviewView>,
    pub annotations: Vec<AnnotationView>,
    /// Every rationale on record for this thing, verbatim, in submission order.
    pub rationales: Vec<String>,
}

// ---------------------------------------------------------------------------
// Persistence helpers

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModeratorsFile {
    #[serde(default)]
    pub moderators: Vec<ModeratorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeratorEntry {
    pub id: String,
    pub audience_group: String,
    /// Value expected in the `X-Moderator` header; defaults to the id.
    #[serde(default)]
    pub token: Option<String>,
}

impl ModeratorsFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::BadRequest(format!("moderators file: {e}")))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File stem for an id: the id itself when it is filesystem-safe, else a digest.
pub fn file_stem(id: &str) -> String {
    let safe = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if safe {
        id.to_owned()
    } else {
        format!("x{}", &sha256_hex(id.as_bytes())[..32])
    }
}

fn asset_path(dir: &Path, asset_id: &str) -> PathBuf {
    dir.join("assets").join(format!("{}.png", file_stem(asset_id)))
}

fn mesh_path(dir: &Path, reference: &str) -> PathBuf {
    dir.join("meshes").join(format!("{}.stl", file_stem(reference)))
}

fn replay_store_event(store: &mut CorpusStore, dir: &Path, seq: u64, event: &Event) -> Result<(), ModerationError> {
    let fail = |reason: String| ModerationError::ReplayMismatch { seq, reason };
    match event {
        Event::DocumentIngested { document, .. } => {
            store.put(document.clone());
        }
        Event::AssetRegistered { asset_id, thing_id, asset_kind, pixels_sha256, .. } => {
            let path = asset_path(dir, asset_id);
            let image = image::open(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?.to_rgb8();
            if sha256_hex(image.as_raw()) != *pixels_sha256 {
                return Err(fail(format!("{} does not match the registered pixels", path.display())));
            }
            store
                .add_asset(MediaAsset { id: asset_id.clone(), thing_id: thing_id.clone(), kind: *asset_kind, image })
                .map_err(|e| fail(e.to_string()))?;
        }
        Event::MeshRegistered { reference, stl_sha256, .. } => {
            let path = mesh_path(dir, reference);
            let bytes = std::fs::read(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
            if sha256_hex(&bytes) != *stl_sha256 {
                return Err(fail(format!("{} does not match the registered mesh", path.display())));
            }
            store.add_mesh(reference.clone(), mesh::parse_stl(&bytes).map_err(|e| fail(e.to_string()))?);
        }
        _ => {}
    }
    Ok(())
}

/// Seed labels: platform-NSFW things are sexual/suggestive positives; every
/// other category, and every category of a negative, is labeled 0.
pub fn seed_labels(positive: bool) -> BTreeMap<Category, bool> {
    Category::ALL.into_iter().map(|c| (c, positive && c == Category::SexualSuggestive)).collect()
}

// ---------------------------------------------------------------------------
// System

pub struct System {
    config: ServiceConfig,
    store: CorpusStore,
    desk: Desk,
    featurizer: Featurizer,
    features: BTreeMap<String, Arc<FeatureVector>>,
    tokens: BTreeMap<String, String>,
    rng: ChaCha8Rng,
    data_dir: Option<PathBuf>,
}

impl System {
    /// In-memory system with a fresh log.
    pub fn new(config: ServiceConfig, at: DateTime<Utc>) -> Result<Self> {
        let desk = Desk::new(config.desk.clone(), at)?;
        Ok(Self::assemble(config, CorpusStore::new(), desk, None))
    }

    fn assemble(config: ServiceConfig, store: CorpusStore, desk: Desk, data_dir: Option<PathBuf>) -> Self {
        let seed = config.rng_seed ^ desk.log().len() as u64;
        Self {
            featurizer: Featurizer::new(config.featurizer.clone()),
            config,
            store,
            desk,
            features: BTreeMap::new(),
            tokens: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            data_dir,
        }
    }

    /// Opens a data directory, replaying its audit log if there is one, then
    /// registers any moderators listed in `moderators.toml`.
    pub fn open(dir: &Path, config: ServiceConfig, at: DateTime<Utc>) -> Result<Self> {
        for sub in ["assets", "meshes"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| storage(&p, e))?;
        }
        let (log, existing) = AuditLog::open(&dir.join("audit.log"))?;
        let mut store = CorpusStore::new();
        let desk = if existing.is_empty() {
            Desk::with_log(config.desk.clone(), log, at)?
        } else {
            Desk::replay_with(&existing, log, |body, e| replay_store_event(&mut store, dir, e.seq, &body.event))?
        };
        let mut system = Self::assemble(config, store, desk, Some(dir.to_owned()));
        let ids: Vec<String> = system.store.documents().map(|d| d.id.clone()).collect();
        for id in ids {
            system.refresh_features(&id)?;
        }
        let mods = dir.join("moderators.toml");
        if mods.exists() {
            let text = std::fs::read_to_string(&mods).map_err(|e| storage(&mods, e))?;
            for m in ModeratorsFile::parse(&text)?.moderators {
                system.register_moderator(
                    ModeratorProfile { id: m.id, audience_group: m.audience_group },
                    m.token,
                    at,
                )?;
            }
        }
        Ok(system)
    }

    /// Data directory from `MOD_DATA_DIR`, defaulting to `./data`.
    pub fn data_dir_from_env() -> PathBuf {
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
    }

    // -- reads

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &CorpusStore {
        &self.store
    }

    pub fn desk(&self) -> &Desk {
        &self.desk
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn thresholds(&self) -> &BTreeMap<String, ThresholdProfile> {
        self.desk.profiles()
    }

    pub fn model(&self) -> Result<&Arc<ModelState>> {
        self.desk.model().ok_or(ServiceError::NoModel)
    }

    pub fn moderator_for_token(&self, token: &str) -> Option<&ModeratorProfile> {
        self.tokens.get(token).and_then(|id| self.desk.moderator(id))
    }

    fn document(&self, thing_id: &str) -> Result<&Arc<ThingDocument>> {
        self.store.get(thing_id).ok_or_else(|| ServiceError::NotFound(format!("thing `{thing_id}`")))
    }

    pub fn features(&self, thing_id: &str) -> Result<&FeatureVector> {
        self.features
            .get(thing_id)
            .map(|f| f.as_ref())
            .ok_or_else(|| ServiceError::NotFound(format!("thing `{thing_id}`")))
    }

    pub fn probabilities(&self, thing_id: &str) -> Result<BTreeMap<Category, f64>> {
        let model = self.model()?;
        let fv = self.features(thing_id)?;
        Ok(Category::ALL.into_iter().map(|c| (c, model.probability(c, fv))).collect())
    }

    /// Current prediction with attributions and a localization grid per image.
    pub fn predict(&self, thing_id: &str) -> Result<Prediction> {
        let model = self.model()?;
        let doc = self.document(thing_id)?;
        let fv = self.features(thing_id)?;
        let mut p = model.predict(thing_id, fv)?;
        p.attributions = model.attribute(fv, self.config.top_k);
        for asset in doc.images.iter().filter_map(|id| self.store.asset(id)) {
            if asset.width() >= 3 && asset.height() >= 3 {
                p.regions.insert(asset.id.clone(), model.localize(&asset.image)?);
            }
        }
        Ok(p)
    }

    // -- corpus writes

    fn refresh_features(&mut self, thing_id: &str) -> Result<()> {
        if let Some(doc) = self.store.get(thing_id) {
            let fv = self.featurizer.document(doc, &self.store)?;
            self.features.insert(thing_id.to_owned(), Arc::new(fv));
        }
        Ok(())
    }

    pub fn ingest(&mut self, raw: RawDocument, at: DateTime<Utc>) -> Result<IngestOutcome> {
        let plan = self.store.plan_ingest(raw, at)?;
        let id = plan.document.id.clone();
        if plan.status != IngestStatus::Unchanged {
            self.desk
                .record(at, Event::DocumentIngested { document: plan.document.clone(), status: plan.status.clone() })?;
            self.store.put(plan.document);
            self.refresh_features(&id)?;
        }
        let doc = self.document(&id)?;
        Ok(IngestOutcome {
            id: id.clone(),
            version: doc.version,
            status: plan.status,
            gate: self.config.consent.evaluate_gate(doc),
            advisory: self.config.consent.ingest_advisory(doc).map(str::to_owned),
            task_id: None,
        })
    }

    /// Ingest as the API does it: store the document, pick up any of its
    /// images already present under `assets/`, then queue it for review if a
    /// model exists.
    pub fn ingest_and_enqueue(&mut self, raw: RawDocument, at: DateTime<Utc>) -> Result<IngestOutcome> {
        let refs: Vec<(String, AssetKind)> = raw.images.iter().map(|r| (r.id().to_owned(), r.kind())).collect();
        let mut out = self.ingest(raw, at)?;
        if let Some(dir) = self.data_dir.clone() {
            for (asset_id, kind) in refs {
                let path = asset_path(&dir, &asset_id);
                if self.store.asset(&asset_id).is_none() && path.exists() {
                    let image = image::open(&path).map_err(|e| storage(&path, e))?.to_rgb8();
                    self.register_asset(MediaAsset { id: asset_id, thing_id: out.id.clone(), kind, image }, at)?;
                }
            }
        }
        if self.desk.model().is_some() && self.desk.open_task_for(&out.id).is_none() {
            out.task_id = self.enqueue_thing(&out.id, at)?.map(|t| t.task_id);
        }
        Ok(out)
    }

    pub fn register_asset(&mut self, asset: MediaAsset, at: DateTime<Utc>) -> Result<()> {
        if !self.store.contains(&asset.thing_id) {
            return Err(CorpusError::UnknownThing(asset.thing_id).into());
        }
        if asset.width() == 0 || asset.height() == 0 {
            return Err(CorpusError::EmptyAsset(asset.id).into());
        }
        if let Some(dir) = &self.data_dir {
            let path = asset_path(dir, &asset.id);
            if !path.exists() {
                asset.image.save(&path).map_err(|e| storage(&path, e))?;
            }
        }
        self.desk.record(
            at,
            Event::AssetRegistered {
                asset_id: asset.id.clone(),
                thing_id: asset.thing_id.clone(),
                asset_kind: asset.kind,
                width: asset.width(),
                height: asset.height(),
                pixels_sha256: sha256_hex(asset.image.as_raw()),
            },
        )?;
        let thing = asset.thing_id.clone();
        self.store.add_asset(asset)?;
        self.refresh_features(&thing)
    }

    pub fn register_mesh(&mut self, reference: &str, mesh: TriangleMesh, at: DateTime<Utc>) -> Result<()> {
        let bytes = mesh::serialize_stl(&mesh);
        if let Some(dir) = &self.data_dir {
            let path = mesh_path(dir, reference);
            std::fs::write(&path, &bytes).map_err(|e| storage(&path, e))?;
        }
        self.desk.record(
            at,
            Event::MeshRegistered {
                reference: reference.to_owned(),
                triangle_count: mesh.triangle_count(),
                stl_sha256: sha256_hex(&bytes),
            },
        )?;
        self.store.add_mesh(reference.to_owned(), mesh);
        let users: Vec<String> =
            self.store.documents().filter(|d| d.meshes.iter().any(|m| m == reference)).map(|d| d.id.clone()).collect();
        for id in users {
            self.refresh_features(&id)?;
        }
        Ok(())
    }

    /// Loads documents, then meshes, then images.
    pub fn load_corpus_files(&mut self, files: CorpusFiles, at: DateTime<Utc>) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        for raw in files.records {
            match self.ingest(raw, at)?.status {
                IngestStatus::Created => report.created += 1,
                IngestStatus::Replaced { .. } => report.replaced += 1,
                IngestStatus::Unchanged => report.unchanged += 1,
            }
        }
        for (reference, mesh) in files.meshes {
            if self.store.mesh(&reference).is_none() {
                self.register_mesh(&reference, mesh, at)?;
                report.meshes += 1;
            }
        }
        for (thing_id, asset_id, kind, image) in files.images {
            if self.store.asset(&asset_id).is_none() {
                self.register_asset(MediaAsset { id: asset_id, thing_id, kind, image }, at)?;
                report.images += 1;
            }
        }
        Ok(report)
    }

    pub fn register_moderator(
        &mut self,
        profile: ModeratorProfile,
        token: Option<String>,
        at: DateTime<Utc>,
    ) -> Result<()> {
        let token = token.unwrap_or_else(|| profile.id.clone());
        let id = profile.id.clone();
        self.desk.register_moderator(profile, at)?;
        self.tokens.insert(token, id);
        Ok(())
    }

    // -- model

    pub fn labeled_examples(&self, seed: &SeedSet) -> Result<Vec<LabeledExample>> {
        let pos = seed.positives.iter().map(|id| (id, true));
        let neg = seed.negatives.iter().map(|id| (id, false));
        pos.chain(neg)
            .map(|(id, positive)| {
                Ok(LabeledExample { features: self.features(id)?.clone(), labels: seed_labels(positive) })
            })
            .collect()
    }

    /// Samples the seed set, trains the initial model and publishes it.
    pub fn seed_train(
        &mut self,
        n_pos: usize,
        n_neg: usize,
        rng_seed: u64,
        epochs: usize,
        at: DateTime<Utc>,
    ) -> Result<SeedReport> {
        let seed = self.store.build_seed_set(n_pos, n_neg, rng_seed)?;
        let examples = self.labeled_examples(&seed)?;
        let model = classifier::train_seed(
            &examples,
            self.featurizer.hash_params(),
            epochs,
            self.config.learning_rate,
            rng_seed,
        )?;
        let report = SeedReport { positives: n_pos, negatives: n_neg, epochs, model_version: model.version };
        self.desk.initialize_model(model, Some(seed), epochs, at)?;
        self.snapshot_model()?;
        Ok(report)
    }

    /// Publishes an externally trained model.
    pub fn install_model(&mut self, model: ModelState, at: DateTime<Utc>) -> Result<()> {
        if model.hash_params != self.featurizer.hash_params() {
            return Err(ClassifierError::HashParamMismatch {
                expected: self.featurizer.hash_params(),
                found: model.hash_params,
            }
            .into());
        }
        self.desk.initialize_model(model, None, 0, at)?;
        self.snapshot_model()
    }

    fn snapshot_model(&self) -> Result<()> {
        if let (Some(dir), Some(model)) = (&self.data_dir, self.desk.model()) {
            let path = dir.join("model.json");
            model.save(&path).map_err(|e| storage(&path, e))?;
        }
        Ok(())
    }

    pub fn retrain(&mut self, at: DateTime<Utc>) -> Result<Option<u64>> {
        let v = self.desk.retrain(at)?;
        if v.is_some() {
            self.snapshot_model()?;
        }
        Ok(v)
    }

    // -- review flow

    pub fn enqueue_thing(&mut self, thing_id: &str, at: DateTime<Utc>) -> Result<Option<ReviewTask>> {
        let prediction = self.predict(thing_id)?;
        Ok(self.desk.enqueue(prediction, &mut self.rng, at)?)
    }

    /// Predicts every stored thing without an open task and queues those that qualify.
    pub fn enqueue_all(&mut self, at: DateTime<Utc>) -> Result<usize> {
        let ids: Vec<String> = self
            .store
            .documents()
            .filter(|d| self.desk.open_task_for(&d.id).is_none() && !self.desk.is_frozen(&d.id))
            .map(|d| d.id.clone())
            .collect();
        let mut n = 0;
        for id in ids {
            n += usize::from(self.enqueue_thing(&id, at)?.is_some());
        }
        Ok(n)
    }

    pub fn next_task(&mut self, moderator_id: &str, at: DateTime<Utc>) -> Result<ReviewTask> {
        Ok(self.desk.next_task(moderator_id, at)?)
    }

    /// Submits a decision, then records any disagreements it creates (raising
    /// thresholds), and retrains if configured to and the task is complete.
    pub fn submit_review(&mut self, decision: ReviewDecision, at: DateTime<Utc>) -> Result<ReviewOutcome> {
        let receipt = self.desk.submit_review(decision, &self.store, &self.featurizer, at)?;
        let disagreements = self.desk.process_disagreements(&receipt.task.thing_id, at)?;
        let retrained_to = if self.config.auto_retrain && receipt.task.state == TaskState::Completed {
            self.retrain(at)?
        } else {
            None
        };
        let task = self.desk.task(&receipt.task.task_id).expect("task exists").clone();
        Ok(ReviewOutcome {
            review_id: receipt.review_id,
            task,
            examples_emitted: receipt.examples_emitted,
            disagreements,
            retrained_to,
        })
    }

    // -- queries

    fn resolve_thresholds(
        &self,
        threshold_override: Option<f64>,
        group: Option<&str>,
        requester: &Requester,
    ) -> Result<(String, ThresholdProfile)> {
        let group = match (group, requester) {
            (Some(g), _) => g.to_owned(),
            (None, Requester::Moderator(m)) => m.audience_group.clone(),
            (None, Requester::EndUser) => DEFAULT_GROUP.to_owned(),
        };
        let profile = self.desk.profile(&group).ok_or_else(|| ServiceError::UnknownGroup(group.clone()))?;
        let profile = match threshold_override {
            None => profile.clone(),
            Some(t) if t.is_finite() && (0.0..=1.0).contains(&t) => ThresholdProfile::uniform(&group, t),
            Some(t) => return Err(ServiceError::BadThreshold(t)),
        };
        Ok((group, profile))
    }

    fn reasons(
        &self,
        doc: &ThingDocument,
        gate: &GateStatus,
        flags: &BTreeSet<Category>,
        probs: &BTreeMap<Category, f64>,
        profile: &ThresholdProfile,
    ) -> Vec<Reason> {
        let mut out = Vec::new();
        if let GateStatus::Blocked { reason, explanation } = gate {
            out.push(Reason { code: *reason, text: explanation.clone() });
        }
        for c in flags {
            out.push(Reason {
                code: ReasonCode::SensitiveAboveThreshold,
                text: format!(
                    "`{}` is marked {c}: the classifier scores it {:.3}, at or above the {} threshold of {:.2}",
                    doc.id,
                    probs[c],
                    profile.audience_group,
                    profile.threshold(*c)
                ),
            });
        }
        out
    }

    fn matches(&self, doc: &ThingDocument, terms: &[String]) -> bool {
        if terms.is_empty() {
            return true;
        }
        let tok = &self.featurizer.config.tokenizer;
        let mut words: BTreeSet<String> = tok.tokenize(&doc.title).into_iter().collect();
        words.extend(tok.tokenize(&doc.description));
        for t in &doc.tags {
            words.insert(t.clone());
            words.extend(tok.tokenize(t));
        }
        terms.iter().all(|t| words.contains(t))
    }

    /// Term search with per-category flags. Consent-blocked items are left out
    /// for end users and shown with their reason to moderators.
    pub fn search(&self, query: &SearchQuery, requester: &Requester) -> Result<SearchResult> {
        let (group, profile) =
            self.resolve_thresholds(query.threshold_override, query.audience_group.as_deref(), requester)?;
        let page = query.page.unwrap_or(1);
        if page == 0 {
            return Err(ServiceError::BadRequest("page numbers start at 1".into()));
        }
        let page_size = query.page_size.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, MAX_PAGE_SIZE);
        let terms = self.featurizer.config.tokenizer.tokenize(&query.terms);
        let model = self.desk.model();

        let mut visible = Vec::new();
        let mut hidden_blocked = 0;
        let mut hidden_flagged = 0;
        for doc in self.store.documents().filter(|d| self.matches(d, &terms)) {
            let gate = self.config.consent.evaluate_gate(doc);
            if gate.is_blocked() && *requester == Requester::EndUser {
                hidden_blocked += 1;
                continue;
            }
            let probabilities = match model {
                Some(_) => self.probabilities(&doc.id)?,
                None => BTreeMap::new(),
            };
            let flags: BTreeSet<Category> =
                probabilities.iter().filter(|(c, p)| **p >= profile.threshold(**c)).map(|(c, _)| *c).collect();
            if query.hide_flagged && !flags.is_empty() {
                hidden_flagged += 1;
                continue;
            }
            let reasons = self.reasons(doc, &gate, &flags, &probabilities, &profile);
            visible.push(SearchItem { thing: ThingSummary::of(doc), probabilities, flags, gate, reasons });
        }
        let total = visible.len();
        let items = visible.into_iter().skip((page - 1).saturating_mul(page_size)).take(page_size).collect();
        let mut hidden = Vec::new();
        if hidden_blocked > 0 {
            hidden.push(HiddenNotice {
                code: ReasonCode::ConsentMissing,
                count: hidden_blocked,
                text: crate::consent::CONSENT_MISSING_EXPLANATION.to_owned(),
            });
        }
        if hidden_flagged > 0 {
            hidden.push(HiddenNotice {
                code: ReasonCode::SensitiveAboveThreshold,
                count: hidden_flagged,
                text: "Hidden because the classifier scores them at or above your threshold in at least one category."
                    .into(),
            });
        }
        Ok(SearchResult {
            items,
            total,
            page,
            page_size,
            audience_group: group,
            applied_thresholds: profile.thresholds.clone(),
            model_version: model.map(|m| m.version),
            hidden,
        })
    }

    /// A seeded uniform sample of up to `n` publicly visible things whose top
    /// score reaches `threshold`, to show what a threshold choice means.
    pub fn threshold_examples(&self, threshold: f64, n: usize, rng_seed: u64) -> Result<ThresholdExamples> {
        if !(threshold.is_finite() && (moderation::MIN_THRESHOLD..=moderation::MAX_THRESHOLD).contains(&threshold)) {
            return Err(ServiceError::BadThreshold(threshold));
        }
        if n == 0 {
            return Err(ServiceError::BadRequest("n must be at least 1".into()));
        }
        let mut qualifying = Vec::new();
        for doc in self.store.documents() {
            if self.config.consent.evaluate_gate(doc).is_blocked() {
                continue;
            }
            let probabilities = self.probabilities(&doc.id)?;
            let max_probability = probabilities.values().copied().fold(0.0, f64::max);
            if max_probability >= threshold {
                qualifying.push(ExampleItem { thing: ThingSummary::of(doc), max_probability, probabilities });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let count = qualifying.len();
        let mut picked: Vec<usize> = index::sample(&mut rng, count, n.min(count)).into_vec();
        picked.sort_unstable();
        let items = picked.into_iter().map(|i| qualifying[i].clone()).collect();
        Ok(ThresholdExamples { threshold, qualifying: count, items })
    }

    pub fn explanation(&self, thing_id: &str, requester: &Requester) -> Result<Explanation> {
        let doc = self.document(thing_id)?;
        let (group, profile) = self.resolve_thresholds(None, None, requester)?;
        let prediction = match self.desk.model() {
            Some(_) => Some(self.predict(thing_id)?),
            None => None,
        };
        let probabilities = prediction.as_ref().map(|p| p.probabilities.clone()).unwrap_or_default();
        let flags = match &prediction {
            Some(p) => moderation::apply_threshold(p, &profile),
            None => BTreeSet::new(),
        };
        let gate = self.config.consent.evaluate_gate(doc);
        let reasons = self.reasons(doc, &gate, &flags, &probabilities, &profile);
        let is_moderator = matches!(requester, Requester::Moderator(_));

        let mut reviews = Vec::new();
        let mut annotations = Vec::new();
        let mut rationales = Vec::new();
        for r in self.desk.reviews_for(thing_id) {
            let d = &r.decision;
            reviews.push(ReviewView {
                review_id: r.review_id.clone(),
                moderator_id: is_moderator.then(|| d.moderator_id.clone()),
                audience_group: r.audience_group.clone(),
                case: d.case,
                selected_categories: d.selected_categories.clone(),
                rationale: d.rationale.clone(),
                at: r.at,
            });
            rationales.extend(d.rationale.iter().cloned());
            for a in &d.annotations {
                rationales.push(a.rationale.clone());
                annotations.push(AnnotationView { review_id: r.review_id.clone(), annotation: a.clone() });
            }
        }
        Ok(Explanation {
            thing: ThingSummary::of(doc),
            model_version: prediction.as_ref().map(|p| p.model_version),
            prediction,
            audience_group: group,
            flags,
            gate,
            reasons,
            needs_discussion: self.desk.is_frozen(thing_id),
            reviews,
            annotations,
            rationales,
        })
    }

    pub fn export_audit(&self, out: &mut impl Write) -> Result<()> {
        Ok(self.desk.log().export_jsonl(out)?)
    }

    /// Copies the audit log in its binary file format.
    pub fn write_audit_file(&self, path: &Path) -> Result<()> {
        Ok(moderation::audit::write_file(path, self.desk.log().events())?)
    }
}

#[cfg(test)]
mod tests;
