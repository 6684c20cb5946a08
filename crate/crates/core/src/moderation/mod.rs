//! Review queue, moderator decisions, disagreement handling and threshold
//! calibration.
//!
//! All state lives in a [`Desk`], which is event-sourced: every mutation is
//! validated, appended to the [`audit::AuditLog`] as an [`Event`], and only
//! then applied. [`Desk::replay`] rebuilds the same state from a log, checking
//! recomputed thresholds and model versions against what was recorded.

pub mod audit;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, TimeDelta, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Category, CategoryTaxonomy, ClassifierError, ModelState, Prediction};
use crate::corpus::{AssetKind, CorpusStore, IngestStatus, SeedSet, ThingDocument};
use crate::features::{self, FeatureError, FeatureVector, Featurizer, Region};
use audit::{AuditError, AuditEvent, AuditLog};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MIN_THRESHOLD: f64 = 0.05;
pub const MAX_THRESHOLD: f64 = 0.95;
pub const DEFAULT_GROUP: &str = "general";
/// Level assumed for a category that was finalized without an annotation.
pub const FINALIZE_LEVEL: u8 = 3;

#[derive(Debug, Error)]
pub enum ModerationError {
    #[error("thing `{0}` already has an open review task")]
    DuplicateTaskForThing(String),
    #[error("no pending review task")]
    QueueEmpty,
    #[error("unknown moderator `{0}`")]
    UnknownModerator(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown thing `{0}`")]
    UnknownThing(String),
    #[error("task `{task_id}` is not leased to `{moderator_id}`")]
    LeaseViolation { task_id: String, moderator_id: String },
    #[error("task `{0}` is no longer open for this review")]
    StaleTask(String),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown audience group `{0}`")]
    UnknownGroup(String),
    #[error("disagreement belongs to group `{found}`, profile is `{expected}`")]
    GroupMismatch { expected: String, found: String },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("replay diverged at event {seq}: {reason}")]
    ReplayMismatch { seq: u64, reason: String },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

type Result<T, E = ModerationError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Decisions

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPath {
    pub top: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub asset_id: String,
    pub bbox: Region,
    pub category_path: CategoryPath,
    pub level: u8,
    pub rationale: String,
}

/// One cell of an asset's 3x3 localization grid that the moderator judged not sensitive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRegion {
    pub asset_id: String,
    pub cell: usize,
    pub category: Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewCase {
    AgreeFinalize,
    MissedPart,
    /// The model flagged something the moderator considers harmless.
    RejectDetection,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewDecision {
    pub task_id: String,
    pub moderator_id: String,
    pub case: ReviewCase,
    #[serde(default)]
    pub selected_categories: BTreeSet<Category>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub rejected_regions: Vec<RejectedRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

/// A submitted decision as stored on the desk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredReview {
    pub review_id: String,
    pub thing_id: String,
    pub audience_group: String,
    pub decision: ReviewDecision,
    pub at: DateTime<Utc>,
}

impl StoredReview {
    pub fn flags(&self, category: Category) -> bool {
        self.decision.selected_categories.contains(&category) || self.annotates(category)
    }

    fn annotates(&self, category: Category) -> bool {
        self.decision.annotations.iter().any(|a| a.category_path.top == category)
    }

    pub fn rejects(&self, category: Category) -> bool {
        !self.flags(category) && self.decision.rejected_regions.iter().any(|r| r.category == category)
    }

    /// Highest annotated level for the category, or [`FINALIZE_LEVEL`] if it was only selected.
    pub fn max_level(&self, category: Category) -> Option<u8> {
        if !self.flags(category) {
            return None;
        }
        self.decision
            .annotations
            .iter()
            .filter(|a| a.category_path.top == category)
            .map(|a| a.level)
            .max()
            .or(Some(FINALIZE_LEVEL))
    }
}

// ---------------------------------------------------------------------------
// Tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Leased,
    Completed,
    NeedsDiscussion,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub moderator_id: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub thing_id: String,
    pub prediction: Prediction,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease: Option<Lease>,
    #[serde(default)]
    pub reviewed_by: Vec<String>,
    /// Enqueued by the random audit draw rather than the score floor.
    #[serde(default)]
    pub audit: bool,
    pub created_at: DateTime<Utc>,
}

impl ReviewTask {
    pub fn is_open(&self) -> bool {
        matches!(self.state, TaskState::Pending | TaskState::Leased)
    }

    fn available_to(&self, moderator_id: &str, at: DateTime<Utc>) -> bool {
        let free = match self.state {
            TaskState::Pending => true,
            TaskState::Leased => self.lease.as_ref().is_some_and(|l| l.expires_at <= at),
            _ => false,
        };
        free && !self.reviewed_by.iter().any(|m| m == moderator_id)
    }
}

pub fn task_id(seq: u64) -> String {
    format!("task-{seq:06}")
}

// ---------------------------------------------------------------------------
// Thresholds and disagreements

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub audience_group: String,
    pub thresholds: BTreeMap<Category, f64>,
    pub update_count: u64,
}

impl ThresholdProfile {
    pub fn new(audience_group: impl Into<String>) -> Self {
        Self {
            audience_group: audience_group.into(),
            thresholds: Category::ALL.into_iter().map(|c| (c, DEFAULT_THRESHOLD)).collect(),
            update_count: 0,
        }
    }

    pub fn threshold(&self, category: Category) -> f64 {
        self.thresholds.get(&category).copied().unwrap_or(DEFAULT_THRESHOLD)
    }

    /// Same threshold for every category, clamped to the allowed range.
    pub fn uniform(audience_group: impl Into<String>, theta: f64) -> Self {
        let theta = clamp_threshold(theta);
        let mut p = Self::new(audience_group);
        p.thresholds.values_mut().for_each(|t| *t = theta);
        p
    }
}

pub fn clamp_threshold(theta: f64) -> f64 {
    theta.clamp(MIN_THRESHOLD, MAX_THRESHOLD)
}

/// The disagreement rule: θ + step·level/5, capped.
pub fn raised_threshold(theta: f64, level: u8, step: f64) -> f64 {
    clamp_threshold((theta + step * f64::from(level) / 5.0).min(MAX_THRESHOLD))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRef {
    pub review_id: String,
    pub moderator_id: String,
    pub audience_group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementRecord {
    pub thing_id: String,
    pub category: Category,
    pub flagging: ReviewRef,
    pub rejecting: ReviewRef,
    pub at: DateTime<Utc>,
}

impl DisagreementRecord {
    pub fn level(&self) -> u8 {
        self.flagging.level.unwrap_or(FINALIZE_LEVEL)
    }
}

/// Categories at or above the profile's threshold.
pub fn apply_threshold(prediction: &Prediction, profile: &ThresholdProfile) -> BTreeSet<Category> {
    prediction.probabilities.iter().filter(|(c, p)| **p >= profile.threshold(**c)).map(|(c, _)| *c).collect()
}

pub fn update_threshold(
    profile: &ThresholdProfile,
    record: &DisagreementRecord,
    step: f64,
) -> Result<ThresholdProfile> {
    if record.rejecting.audience_group != profile.audience_group {
        return Err(ModerationError::GroupMismatch {
            expected: profile.audience_group.clone(),
            found: record.rejecting.audience_group.clone(),
        });
    }
    let mut next = profile.clone();
    let theta = next
        .thresholds
        .get_mut(&record.category)
        .ok_or_else(|| ModerationError::UnknownCategory(record.category.to_string()))?;
    *theta = raised_threshold(*theta, record.level(), step);
    next.update_count += 1;
    Ok(next)
}

/// Every (flagging, rejecting) pair of reviews by different moderators on this thing and category.
pub fn detect_disagreements(
    reviews: &[StoredReview],
    thing_id: &str,
    category: Category,
    at: DateTime<Utc>,
) -> Vec<DisagreementRecord> {
    let on_thing = || reviews.iter().filter(|r| r.thing_id == thing_id);
    let mut out = Vec::new();
    for f in on_thing().filter(|r| r.flags(category)) {
        for r in on_thing().filter(|r| r.rejects(category)) {
            if f.decision.moderator_id == r.decision.moderator_id {
                continue;
            }
            out.push(DisagreementRecord {
                thing_id: thing_id.to_owned(),
                category,
                flagging: ReviewRef {
                    review_id: f.review_id.clone(),
                    moderator_id: f.decision.moderator_id.clone(),
                    audience_group: f.audience_group.clone(),
                    level: f.max_level(category),
                },
                rejecting: ReviewRef {
                    review_id: r.review_id.clone(),
                    moderator_id: r.decision.moderator_id.clone(),
                    audience_group: r.audience_group.clone(),
                    level: None,
                },
                at,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training examples

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ExampleSource {
    Finalized,
    Annotation { asset_id: String },
    RejectedRegion { asset_id: String, cell: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub thing_id: String,
    pub category: Category,
    pub label: bool,
    pub weight: f64,
    pub features: FeatureVector,
    #[serde(flatten)]
    pub source: ExampleSource,
}

pub fn annotation_weight(level: u8) -> f64 {
    f64::from(level) / 3.0
}

/// Sequential weighted updates, in order. An empty batch returns the model unchanged.
pub fn retrain(model: &ModelState, examples: &[TrainingExample]) -> Result<ModelState> {
    let mut next = model.clone();
    for ex in examples {
        next.update_in_place(&ex.features, ex.category, ex.label, ex.weight)?;
    }
    Ok(next)
}

fn invalid(msg: impl Into<String>) -> ModerationError {
    ModerationError::InvalidDecision(msg.into())
}

/// Checks a decision's content against the thing it reviews.
pub fn validate_decision(
    decision: &ReviewDecision,
    doc: &ThingDocument,
    store: &CorpusStore,
    taxonomy: &CategoryTaxonomy,
) -> Result<()> {
    match decision.case {
        ReviewCase::AgreeFinalize => {}
        ReviewCase::MissedPart if decision.annotations.is_empty() => {
            return Err(invalid("missed_part needs at least one annotation"));
        }
        ReviewCase::RejectDetection if decision.rejected_regions.is_empty() => {
            return Err(invalid("reject_detection needs at least one rejected region"));
        }
        ReviewCase::RejectDetection if decision.rationale.as_deref().is_none_or(|r| r.trim().is_empty()) => {
            return Err(invalid("reject_detection needs a rationale"));
        }
        _ => {}
    }
    let asset = |id: &str| {
        if !doc.images.iter().any(|a| a == id) {
            return Err(invalid(format!("asset `{id}` does not belong to `{}`", doc.id)));
        }
        store.asset(id).ok_or_else(|| invalid(format!("asset `{id}` is not stored")))
    };
    for a in &decision.annotations {
        if !(1..=5).contains(&a.level) {
            return Err(invalid(format!("level {} outside 1..=5", a.level)));
        }
        if a.rationale.trim().is_empty() {
            return Err(invalid("annotation rationale is empty"));
        }
        if !taxonomy.is_valid(a.category_path.top, a.category_path.second.as_deref()) {
            return Err(invalid(format!(
                "`{}/{}` is not in the taxonomy",
                a.category_path.top,
                a.category_path.second.as_deref().unwrap_or("")
            )));
        }
        let img = asset(&a.asset_id)?;
        if !a.bbox.fits(img.width(), img.height()) {
            return Err(invalid(format!(
                "bbox {:?} outside {}x{} asset `{}`",
                a.bbox,
                img.width(),
                img.height(),
                a.asset_id
            )));
        }
    }
    for r in &decision.rejected_regions {
        if r.cell >= 9 {
            return Err(invalid(format!("grid cell {} outside 0..9", r.cell)));
        }
        let img = asset(&r.asset_id)?;
        if img.width() < 3 || img.height() < 3 {
            return Err(invalid(format!("asset `{}` is too small for a grid", r.asset_id)));
        }
        if decision.selected_categories.contains(&r.category)
            || decision.annotations.iter().any(|a| a.category_path.top == r.category)
        {
            return Err(invalid(format!("`{}` is both flagged and rejected", r.category)));
        }
    }
    Ok(())
}

/// Examples a validated decision contributes to the next retrain.
pub fn decision_examples(
    decision: &ReviewDecision,
    doc: &ThingDocument,
    store: &CorpusStore,
    featurizer: &Featurizer,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    let example = |category, label, weight, features, source| TrainingExample {
        thing_id: doc.id.clone(),
        category,
        label,
        weight,
        features,
        source,
    };
    if !decision.selected_categories.is_empty() {
        let fv = featurizer.document(doc, store)?;
        for &c in &decision.selected_categories {
            out.push(example(c, true, 1.0, fv.clone(), ExampleSource::Finalized));
        }
    }
    let image =
        |id: &str| store.asset(id).map(|a| a.image.clone()).ok_or_else(|| invalid(format!("asset `{id}` missing")));
    if !decision.annotations.is_empty() {
        let text = featurizer.text(doc);
        for a in &decision.annotations {
            let crop = features::image_features(&image(&a.asset_id)?, Some(a.bbox))?;
            out.push(example(
                a.category_path.top,
                true,
                annotation_weight(a.level),
                features::fuse([&text, &crop])?,
                ExampleSource::Annotation { asset_id: a.asset_id.clone() },
            ));
        }
    }
    for r in &decision.rejected_regions {
        let img = image(&r.asset_id)?;
        let cell = Region::grid_cell(img.width(), img.height(), r.cell);
        let crop = features::image_features(&img, Some(cell))?;
        out.push(example(
            r.category,
            false,
            1.0,
            features::fuse([&crop])?,
            ExampleSource::RejectedRegion { asset_id: r.asset_id.clone(), cell: r.cell },
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Events

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub enqueue_floor: f64,
    pub audit_rate: f64,
    pub lease_seconds: i64,
    pub reviews_per_task: usize,
    pub threshold_step: f64,
    /// Distinct conflicting reviews on one thing that freeze it for discussion.
    pub discussion_after: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            enqueue_floor: 0.3,
            audit_rate: 0.02,
            lease_seconds: 15 * 60,
            reviews_per_task: 2,
            threshold_step: 0.1,
            discussion_after: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeratorProfile {
    pub id: String,
    pub audience_group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    DeskConfigured {
        config: DeskConfig,
    },
    DocumentIngested {
        document: ThingDocument,
        status: IngestStatus,
    },
    AssetRegistered {
        asset_id: String,
        thing_id: String,
        asset_kind: AssetKind,
        width: u32,
        height: u32,
        pixels_sha256: String,
    },
    MeshRegistered {
        reference: String,
        triangle_count: usize,
        stl_sha256: String,
    },
    ModeratorRegistered {
        moderator: ModeratorProfile,
    },
    ModelInitialized {
        model: ModelState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed_set: Option<SeedSet>,
        epochs: usize,
    },
    TaskEnqueued {
        task: ReviewTask,
    },
    TaskLeased {
        task_id: String,
        lease: Lease,
    },
    ReviewSubmitted {
        review: StoredReview,
        examples: Vec<TrainingExample>,
    },
    DisagreementRecorded {
        record: DisagreementRecord,
    },
    ThresholdUpdated {
        audience_group: String,
        category: Category,
        level: u8,
        before: f64,
        after: f64,
    },
    ThingFrozen {
        thing_id: String,
        conflicting_reviews: usize,
    },
    ModelRetrained {
        base_version: u64,
        example_count: usize,
        new_version: u64,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::DeskConfigured { .. } => "desk_configured",
            Event::DocumentIngested { .. } => "document_ingested",
            Event::AssetRegistered { .. } => "asset_registered",
            Event::MeshRegistered { .. } => "mesh_registered",
            Event::ModeratorRegistered { .. } => "moderator_registered",
            Event::ModelInitialized { .. } => "model_initialized",
            Event::TaskEnqueued { .. } => "task_enqueued",
            Event::TaskLeased { .. } => "task_leased",
            Event::ReviewSubmitted { .. } => "review_submitted",
            Event::DisagreementRecorded { .. } => "disagreement_recorded",
            Event::ThresholdUpdated { .. } => "threshold_updated",
            Event::ThingFrozen { .. } => "thing_frozen",
            Event::ModelRetrained { .. } => "model_retrained",
        }
    }
}

/// What gets hashed into the log for each event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventBody {
    pub at: DateTime<Utc>,
    pub event: Event,
}

impl EventBody {
    pub fn decode(e: &AuditEvent) -> Result<Self> {
        serde_json::from_str(&e.payload)
            .map_err(|err| ModerationError::Audit(AuditError::Decode { seq: e.seq, reason: err.to_string() }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReviewReceipt {
    pub review_id: String,
    pub task: ReviewTask,
    pub examples_emitted: usize,
}

// ---------------------------------------------------------------------------
// Desk

/// The serialized writer for review, threshold and model state.
#[derive(Debug)]
pub struct Desk {
    config: DeskConfig,
    taxonomy: CategoryTaxonomy,
    log: AuditLog,
    model: Option<Arc<ModelState>>,
    moderators: BTreeMap<String, ModeratorProfile>,
    profiles: BTreeMap<String, ThresholdProfile>,
    tasks: BTreeMap<String, ReviewTask>,
    open_by_thing: BTreeMap<String, String>,
    next_task_seq: u64,
    reviews: Vec<StoredReview>,
    handled_pairs: BTreeSet<(String, String, Category)>,
    disagreements: Vec<DisagreementRecord>,
    conflicting: BTreeMap<String, BTreeSet<String>>,
    frozen: BTreeSet<String>,
    pending_examples: Vec<TrainingExample>,
}

impl Desk {
    fn empty(config: DeskConfig, log: AuditLog) -> Self {
        let mut profiles = BTreeMap::new();
        profiles.insert(DEFAULT_GROUP.to_owned(), ThresholdProfile::new(DEFAULT_GROUP));
        Self {
            config,
            taxonomy: CategoryTaxonomy::default(),
            log,
            model: None,
            moderators: BTreeMap::new(),
            profiles,
            tasks: BTreeMap::new(),
            open_by_thing: BTreeMap::new(),
            next_task_seq: 1,
            reviews: Vec::new(),
            handled_pairs: BTreeSet::new(),
            disagreements: Vec::new(),
            conflicting: BTreeMap::new(),
            frozen: BTreeSet::new(),
            pending_examples: Vec::new(),
        }
    }

    /// A fresh desk whose first event records `config`.
    pub fn new(config: DeskConfig, at: DateTime<Utc>) -> Result<Self> {
        Self::with_log(config, AuditLog::new(), at)
    }

    /// Like [`Desk::new`], writing to an already opened (empty) log.
    pub fn with_log(config: DeskConfig, log: AuditLog, at: DateTime<Utc>) -> Result<Self> {
        validate_config(&config)?;
        let mut desk = Self::empty(config.clone(), log);
        desk.record(at, Event::DeskConfigured { config })?;
        Ok(desk)
    }

    /// Rebuilds a desk from a verified event sequence. Events that concern the
    /// document store are skipped; [`Desk::replay_with`] exposes them.
    pub fn replay(events: &[AuditEvent]) -> Result<Self> {
        Self::replay_with(events, AuditLog::new(), |_, _| Ok(()))
    }

    pub fn replay_with(
        events: &[AuditEvent],
        log: AuditLog,
        mut on_event: impl FnMut(&EventBody, &AuditEvent) -> Result<()>,
    ) -> Result<Self> {
        audit::verify_chain(events)?;
        let mut desk: Option<Desk> = None;
        let mut log = Some(log);
        for e in events {
            let body = EventBody::decode(e)?;
            on_event(&body, e)?;
            if desk.is_none() {
                let Event::DeskConfigured { config } = &body.event else {
                    return Err(ModerationError::ReplayMismatch {
                        seq: e.seq,
                        reason: "log does not start with desk_configured".into(),
                    });
                };
                desk = Some(Self::empty(config.clone(), log.take().expect("log moved once")));
            }
            let d = desk.as_mut().expect("initialized above");
            d.apply(e.seq, &body.event)?;
            d.log.push_verified(e.clone());
        }
        desk.ok_or(ModerationError::ReplayMismatch { seq: 0, reason: "empty log".into() })
    }

    /// Appends an event and applies it.
    pub fn record(&mut self, at: DateTime<Utc>, event: Event) -> Result<u64> {
        let payload = serde_json::to_string(&EventBody { at, event: event.clone() }).expect("events serialize");
        let seq = self.log.append(event.kind(), payload)?.seq;
        self.apply(seq, &event)?;
        Ok(seq)
    }

    fn apply(&mut self, seq: u64, event: &Event) -> Result<()> {
        let mismatch = |reason: String| ModerationError::ReplayMismatch { seq, reason };
        match event {
            Event::DeskConfigured { config } => {
                if *config != self.config {
                    return Err(mismatch("desk reconfigured mid-log".into()));
                }
            }
            Event::DocumentIngested { .. } | Event::AssetRegistered { .. } | Event::MeshRegistered { .. } => {}
            Event::ModeratorRegistered { moderator } => {
                self.profiles
                    .entry(moderator.audience_group.clone())
                    .or_insert_with(|| ThresholdProfile::new(&moderator.audience_group));
                self.moderators.insert(moderator.id.clone(), moderator.clone());
            }
            Event::ModelInitialized { model, .. } => {
                self.model = Some(Arc::new(model.clone()));
            }
            Event::TaskEnqueued { task } => {
                self.open_by_thing.insert(task.thing_id.clone(), task.task_id.clone());
                self.tasks.insert(task.task_id.clone(), task.clone());
                self.next_task_seq += 1;
            }
            Event::TaskLeased { task_id, lease } => {
                let task =
                    self.tasks.get_mut(task_id).ok_or_else(|| mismatch(format!("lease on unknown {task_id}")))?;
                task.state = TaskState::Leased;
                task.lease = Some(lease.clone());
            }
            Event::ReviewSubmitted { review, examples } => {
                let task = self
                    .tasks
                    .get_mut(&review.decision.task_id)
                    .ok_or_else(|| mismatch(format!("review of unknown {}", review.decision.task_id)))?;
                task.reviewed_by.push(review.decision.moderator_id.clone());
                task.lease = None;
                if task.reviewed_by.len() >= self.config.reviews_per_task {
                    task.state = TaskState::Completed;
                    self.open_by_thing.remove(&task.thing_id);
                } else {
                    task.state = TaskState::Pending;
                }
                self.reviews.push(review.clone());
                self.pending_examples.extend(examples.iter().cloned());
            }
            Event::DisagreementRecorded { record } => {
                self.handled_pairs.insert((
                    record.flagging.review_id.clone(),
                    record.rejecting.review_id.clone(),
                    record.category,
                ));
                let ids = self.conflicting.entry(record.thing_id.clone()).or_default();
                ids.insert(record.flagging.review_id.clone());
                ids.insert(record.rejecting.review_id.clone());
                self.disagreements.push(record.clone());
            }
            Event::ThresholdUpdated { audience_group, category, level, before, after } => {
                let step = self.config.threshold_step;
                let profile = self
                    .profiles
                    .get_mut(audience_group)
                    .ok_or_else(|| ModerationError::UnknownGroup(audience_group.clone()))?;
                let theta = profile
                    .thresholds
                    .get_mut(category)
                    .ok_or_else(|| ModerationError::UnknownCategory(category.to_string()))?;
                let expected = raised_threshold(*theta, *level, step);
                if theta.to_bits() != before.to_bits() || expected.to_bits() != after.to_bits() {
                    return Err(mismatch(format!(
                        "threshold {audience_group}/{category}: recorded {before}->{after}, recomputed {theta}->{expected}"
                    )));
                }
                *theta = expected;
                profile.update_count += 1;
            }
            Event::ThingFrozen { thing_id, .. } => {
                self.frozen.insert(thing_id.clone());
                if let Some(task_id) = self.open_by_thing.get(thing_id) {
                    let task = self.tasks.get_mut(task_id).expect("open task exists");
                    task.state = TaskState::NeedsDiscussion;
                    task.lease = None;
                }
            }
            Event::ModelRetrained { base_version, example_count, new_version } => {
                let model = self.model.as_ref().ok_or_else(|| mismatch("retrain before model init".into()))?;
                if model.version != *base_version || self.pending_examples.len() != *example_count {
                    return Err(mismatch(format!(
                        "retrain from v{base_version} with {example_count} examples, desk has v{} with {}",
                        model.version,
                        self.pending_examples.len()
                    )));
                }
                let next = retrain(model, &self.pending_examples)?;
                if next.version != *new_version {
                    return Err(mismatch(format!("retrain produced v{}, recorded v{new_version}", next.version)));
                }
                self.model = Some(Arc::new(next));
                self.pending_examples.clear();
            }
        }
        Ok(())
    }

    // -- reads

    pub fn config(&self) -> &DeskConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &CategoryTaxonomy {
        &self.taxonomy
    }

    pub fn log(&self) -> &AuditLog {
        &self.log
    }

    pub fn model(&self) -> Option<&Arc<ModelState>> {
        self.model.as_ref()
    }

    pub fn moderator(&self, id: &str) -> Option<&ModeratorProfile> {
        self.moderators.get(id)
    }

    pub fn profiles(&self) -> &BTreeMap<String, ThresholdProfile> {
        &self.profiles
    }

    pub fn profile(&self, group: &str) -> Option<&ThresholdProfile> {
        self.profiles.get(group)
    }

    pub fn task(&self, task_id: &str) -> Option<&ReviewTask> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &ReviewTask> + '_ {
        self.tasks.values()
    }

    pub fn open_task_for(&self, thing_id: &str) -> Option<&ReviewTask> {
        self.open_by_thing.get(thing_id).and_then(|id| self.tasks.get(id))
    }

    pub fn reviews(&self) -> &[StoredReview] {
        &self.reviews
    }

    pub fn reviews_for<'a>(&'a self, thing_id: &'a str) -> impl Iterator<Item = &'a StoredReview> + 'a {
        self.reviews.iter().filter(move |r| r.thing_id == thing_id)
    }

    pub fn disagreements(&self) -> &[DisagreementRecord] {
        &self.disagreements
    }

    pub fn is_frozen(&self, thing_id: &str) -> bool {
        self.frozen.contains(thing_id)
    }

    pub fn pending_examples(&self) -> &[TrainingExample] {
        &self.pending_examples
    }

    // -- writes

    pub fn register_moderator(&mut self, moderator: ModeratorProfile, at: DateTime<Utc>) -> Result<()> {
        if moderator.id.trim().is_empty() || moderator.audience_group.trim().is_empty() {
            return Err(ModerationError::BadParameter("moderator id and group must be nonempty".into()));
        }
        if self.moderators.get(&moderator.id) == Some(&moderator) {
            return Ok(());
        }
        self.record(at, Event::ModeratorRegistered { moderator })?;
        Ok(())
    }

    pub fn initialize_model(
        &mut self,
        model: ModelState,
        seed_set: Option<SeedSet>,
        epochs: usize,
        at: DateTime<Utc>,
    ) -> Result<()> {
        self.record(at, Event::ModelInitialized { model, seed_set, epochs })?;
        Ok(())
    }

    /// Enqueues with the configured floor and audit rate.
    pub fn enqueue(
        &mut self,
        prediction: Prediction,
        rng: &mut impl Rng,
        at: DateTime<Utc>,
    ) -> Result<Option<ReviewTask>> {
        let (floor, rate) = (self.config.enqueue_floor, self.config.audit_rate);
        self.enqueue_with(prediction, floor, rate, rng, at)
    }

    /// Creates a task if the top score reaches `floor` or an audit draw picks it.
    /// Frozen things are never requeued. The audit draw is always taken, so
    /// the generator advances identically whatever the score.
    pub fn enqueue_with(
        &mut self,
        prediction: Prediction,
        floor: f64,
        audit_rate: f64,
        rng: &mut impl Rng,
        at: DateTime<Utc>,
    ) -> Result<Option<ReviewTask>> {
        if !(0.0..=1.0).contains(&audit_rate) {
            return Err(ModerationError::BadParameter(format!("audit_rate {audit_rate} outside [0, 1]")));
        }
        let audit = rng.random_bool(audit_rate);
        if self.open_by_thing.contains_key(&prediction.thing_id) {
            return Err(ModerationError::DuplicateTaskForThing(prediction.thing_id));
        }
        if self.frozen.contains(&prediction.thing_id) {
            return Ok(None);
        }
        let above = prediction.max_probability() >= floor;
        if !above && !audit {
            return Ok(None);
        }
        let task = ReviewTask {
            task_id: task_id(self.next_task_seq),
            thing_id: prediction.thing_id.clone(),
            prediction,
            state: TaskState::Pending,
            lease: None,
            reviewed_by: Vec::new(),
            audit: !above,
            created_at: at,
        };
        self.record(at, Event::TaskEnqueued { task: task.clone() })?;
        Ok(Some(task))
    }

    /// Leases the oldest task this moderator has not reviewed yet. A moderator
    /// already holding a live lease gets that task back.
    pub fn next_task(&mut self, moderator_id: &str, at: DateTime<Utc>) -> Result<ReviewTask> {
        if !self.moderators.contains_key(moderator_id) {
            return Err(ModerationError::UnknownModerator(moderator_id.to_owned()));
        }
        let held = self.tasks.values().find(|t| {
            t.state == TaskState::Leased
                && t.lease.as_ref().is_some_and(|l| l.moderator_id == moderator_id && l.expires_at > at)
        });
        if let Some(t) = held {
            return Ok(t.clone());
        }
        let task_id = self
            .tasks
            .values()
            .find(|t| t.available_to(moderator_id, at))
            .map(|t| t.task_id.clone())
            .ok_or(ModerationError::QueueEmpty)?;
        let lease = Lease {
            moderator_id: moderator_id.to_owned(),
            expires_at: at + TimeDelta::seconds(self.config.lease_seconds),
        };
        self.record(at, Event::TaskLeased { task_id: task_id.clone(), lease })?;
        Ok(self.tasks[&task_id].clone())
    }

    pub fn submit_review(
        &mut self,
        decision: ReviewDecision,
        store: &CorpusStore,
        featurizer: &Featurizer,
        at: DateTime<Utc>,
    ) -> Result<ReviewReceipt> {
        let task =
            self.tasks.get(&decision.task_id).ok_or_else(|| ModerationError::UnknownTask(decision.task_id.clone()))?;
        if !task.is_open() {
            return Err(ModerationError::StaleTask(task.task_id.clone()));
        }
        let lease_violation = || ModerationError::LeaseViolation {
            task_id: decision.task_id.clone(),
            moderator_id: decision.moderator_id.clone(),
        };
        match &task.lease {
            Some(l) if task.state == TaskState::Leased && l.moderator_id == decision.moderator_id => {
                if l.expires_at <= at {
                    return Err(ModerationError::StaleTask(task.task_id.clone()));
                }
            }
            _ => return Err(lease_violation()),
        }
        if task.reviewed_by.contains(&decision.moderator_id) {
            return Err(invalid("moderator already reviewed this task"));
        }
        let moderator = self
            .moderators
            .get(&decision.moderator_id)
            .ok_or_else(|| ModerationError::UnknownModerator(decision.moderator_id.clone()))?;
        let doc = store.get(&task.thing_id).ok_or_else(|| ModerationError::UnknownThing(task.thing_id.clone()))?;
        validate_decision(&decision, doc, store, &self.taxonomy)?;
        let examples = decision_examples(&decision, doc, store, featurizer)?;

        let review = StoredReview {
            review_id: format!("{}#{}", decision.task_id, decision.moderator_id),
            thing_id: task.thing_id.clone(),
            audience_group: moderator.audience_group.clone(),
            decision,
            at,
        };
        let review_id = review.review_id.clone();
        let task_id = review.decision.task_id.clone();
        let examples_emitted = examples.len();
        self.record(at, Event::ReviewSubmitted { review, examples })?;
        Ok(ReviewReceipt { review_id, task: self.tasks[&task_id].clone(), examples_emitted })
    }

    /// Records every not yet handled disagreement on the thing, raises the
    /// rejecting group's threshold for each, and freezes the thing once enough
    /// distinct reviews conflict.
    pub fn process_disagreements(&mut self, thing_id: &str, at: DateTime<Utc>) -> Result<Vec<DisagreementRecord>> {
        let mut fresh = Vec::new();
        for c in Category::ALL {
            for record in detect_disagreements(&self.reviews, thing_id, c, at) {
                let key = (record.flagging.review_id.clone(), record.rejecting.review_id.clone(), c);
                if !self.handled_pairs.contains(&key) {
                    fresh.push(record);
                }
            }
        }
        for record in &fresh {
            self.record(at, Event::DisagreementRecorded { record: record.clone() })?;
            let group = &record.rejecting.audience_group;
            let profile = self.profiles.get(group).ok_or_else(|| ModerationError::UnknownGroup(group.clone()))?;
            let updated = update_threshold(profile, record, self.config.threshold_step)?;
            self.record(
                at,
                Event::ThresholdUpdated {
                    audience_group: group.clone(),
                    category: record.category,
                    level: record.level(),
                    before: profile.threshold(record.category),
                    after: updated.threshold(record.category),
                },
            )?;
        }
        let conflicting = self.conflicting.get(thing_id).map_or(0, BTreeSet::len);
        if conflicting >= self.config.discussion_after && !self.frozen.contains(thing_id) {
            self.record(at, Event::ThingFrozen { thing_id: thing_id.to_owned(), conflicting_reviews: conflicting })?;
        }
        Ok(fresh)
    }

    /// Applies all pending examples in submission order and publishes the result.
    /// Returns the new version, or `None` when nothing was pending.
    pub fn retrain(&mut self, at: DateTime<Utc>) -> Result<Option<u64>> {
        let Some(model) = self.model.as_ref() else {
            return Err(ModerationError::BadParameter("no model initialized".into()));
        };
        if self.pending_examples.is_empty() {
            return Ok(None);
        }
        let base_version = model.version;
        let example_count = self.pending_examples.len();
        let new_version = base_version + example_count as u64;
        self.record(at, Event::ModelRetrained { base_version, example_count, new_version })?;
        Ok(Some(new_version))
    }
}

fn validate_config(c: &DeskConfig) -> Result<()> {
    let bad = |m: &str| Err(ModerationError::BadParameter(m.into()));
    if !(0.0..=1.0).contains(&c.enqueue_floor) || !(0.0..=1.0).contains(&c.audit_rate) {
        return bad("enqueue_floor and audit_rate must lie in [0, 1]");
    }
    if c.lease_seconds <= 0 || c.reviews_per_task == 0 || c.discussion_after == 0 {
        return bad("lease, reviews_per_task and discussion_after must be positive");
    }
    if !(c.threshold_step.is_finite() && c.threshold_step >= 0.0) {
        return bad("threshold_step must be finite and nonnegative");
    }
    Ok(())
}

#[cfg(test)]
mod tests;
