//! Thing documents, their media, and the labeled seed set.
//!
//! The store keeps every version of a document. Iteration is always sorted by
//! id so that anything computed over the corpus is reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use image::RgbImage;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consent::ConsentMetadata;
use crate::mesh::{self, MeshError, TriangleMesh};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document has no id")]
    MissingId,
    #[error("document `{0}` has no description, images or meshes")]
    EmptyDocument(String),
    #[error("malformed field: {0}")]
    MalformedField(String),
    #[error("unknown thing `{0}`")]
    UnknownThing(String),
    #[error("asset `{0}` has zero width or height")]
    EmptyAsset(String),
    #[error("requested {requested} positives but only {available} are labeled NSFW")]
    InsufficientPositives { requested: usize, available: usize },
    #[error("requested {requested} negatives but only {available} are available")]
    InsufficientNegatives { requested: usize, available: usize },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("mesh {path}: {source}")]
    Mesh { path: PathBuf, source: MeshError },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    #[default]
    RenderedPreview,
    UserPhoto,
}

/// Image reference in an input record: a bare asset id or `{id, kind}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawImageRef {
    Id(String),
    Full {
        id: String,
        #[serde(default)]
        kind: AssetKind,
    },
}

impl RawImageRef {
    pub fn id(&self) -> &str {
        match self {
            RawImageRef::Id(id) | RawImageRef::Full { id, .. } => id,
        }
    }

    pub fn kind(&self) -> AssetKind {
        match self {
            RawImageRef::Id(_) => AssetKind::default(),
            RawImageRef::Full { kind, .. } => *kind,
        }
    }
}

/// One line of the JSON-lines corpus format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDocument {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub images: Vec<RawImageRef>,
    #[serde(default)]
    pub meshes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform_nsfw: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent: Option<ConsentMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

impl RawDocument {
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        serde_json::from_str(text).map_err(|e| CorpusError::MalformedField(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThingDocument {
    pub id: String,
    pub version: u32,
    pub title: String,
    pub description: String,
    pub tags: BTreeSet<String>,
    pub images: Vec<String>,
    pub meshes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent: Option<ConsentMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform_nsfw: Option<bool>,
    pub created_at: DateTime<Utc>,
}

impl ThingDocument {
    fn same_content(&self, other: &ThingDocument) -> bool {
        self.title == other.title
            && self.description == other.description
            && self.tags == other.tags
            && self.images == other.images
            && self.meshes == other.meshes
            && self.consent == other.consent
            && self.platform_nsfw == other.platform_nsfw
    }

    pub fn is_platform_nsfw(&self) -> bool {
        self.platform_nsfw == Some(true)
    }
}

pub fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase()
}

/// Validates and normalizes a raw record. The result has version 1;
/// [`CorpusStore::plan_ingest`] assigns the real version.
pub fn normalize(raw: RawDocument, now: DateTime<Utc>) -> Result<ThingDocument, CorpusError> {
    let id = raw.id.map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).ok_or(CorpusError::MissingId)?;
    let description = raw.description.unwrap_or_default();
    if description.trim().is_empty() && raw.images.is_empty() && raw.meshes.is_empty() {
        return Err(CorpusError::EmptyDocument(id));
    }
    if let Some(c) = &raw.consent {
        c.validate().map_err(|e| CorpusError::MalformedField(format!("consent: {e}")))?;
    }
    let mut images = Vec::with_capacity(raw.images.len());
    for r in &raw.images {
        let asset = r.id().trim();
        if asset.is_empty() {
            return Err(CorpusError::MalformedField("empty image id".into()));
        }
        images.push(asset.to_owned());
    }
    if raw.meshes.iter().any(|m| m.trim().is_empty()) {
        return Err(CorpusError::MalformedField("empty mesh reference".into()));
    }
    Ok(ThingDocument {
        id,
        version: 1,
        title: raw.title.unwrap_or_default(),
        description,
        tags: raw.tags.iter().map(|t| normalize_tag(t)).filter(|t| !t.is_empty()).collect(),
        images,
        meshes: raw.meshes,
        consent: raw.consent,
        platform_nsfw: raw.platform_nsfw,
        created_at: raw.created_at.unwrap_or(now),
    })
}

#[derive(Clone, Debug)]
pub struct MediaAsset {
    pub id: String,
    pub thing_id: String,
    pub kind: AssetKind,
    pub image: RgbImage,
}

impl MediaAsset {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestStatus {
    Created,
    Replaced { previous_version: u32 },
    Unchanged,
}

#[derive(Clone, Debug)]
pub struct IngestPlan {
    pub document: ThingDocument,
    pub status: IngestStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub rng_seed: u64,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct CorpusStore {
    docs: BTreeMap<String, Vec<Arc<ThingDocument>>>,
    assets: BTreeMap<String, Arc<MediaAsset>>,
    meshes: BTreeMap<String, Arc<TriangleMesh>>,
}

impl CorpusStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Normalizes `raw` and decides what storing it would do, without storing it.
    pub fn plan_ingest(&self, raw: RawDocument, now: DateTime<Utc>) -> Result<IngestPlan, CorpusError> {
        let mut doc = normalize(raw, now)?;
        let status = match self.get(&doc.id) {
            Some(prev) if prev.same_content(&doc) => {
                return Ok(IngestPlan { document: prev.as_ref().clone(), status: IngestStatus::Unchanged })
            }
            Some(prev) => {
                doc.version = prev.version + 1;
                IngestStatus::Replaced { previous_version: prev.version }
            }
            None => IngestStatus::Created,
        };
        Ok(IngestPlan { document: doc, status })
    }

    /// Stores a document version produced by [`plan_ingest`](Self::plan_ingest).
    pub fn put(&mut self, doc: ThingDocument) -> Arc<ThingDocument> {
        let doc = Arc::new(doc);
        self.docs.entry(doc.id.clone()).or_default().push(doc.clone());
        doc
    }

    pub fn ingest(
        &mut self,
        raw: RawDocument,
        now: DateTime<Utc>,
    ) -> Result<(Arc<ThingDocument>, IngestStatus), CorpusError> {
        let plan = self.plan_ingest(raw, now)?;
        let doc = match plan.status {
            IngestStatus::Unchanged => self.get(&plan.document.id).expect("unchanged implies stored").clone(),
            _ => self.put(plan.document),
        };
        Ok((doc, plan.status))
    }

    /// Latest version.
    pub fn get(&self, id: &str) -> Option<&Arc<ThingDocument>> {
        self.docs.get(id).and_then(|v| v.last())
    }

    pub fn versions(&self, id: &str) -> &[Arc<ThingDocument>] {
        self.docs.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.docs.contains_key(id)
    }

    /// Latest versions, sorted by id.
    pub fn documents(&self) -> impl Iterator<Item = &Arc<ThingDocument>> + '_ {
        self.docs.values().filter_map(|v| v.last())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn add_asset(&mut self, asset: MediaAsset) -> Result<(), CorpusError> {
        if !self.contains(&asset.thing_id) {
            return Err(CorpusError::UnknownThing(asset.thing_id));
        }
        if asset.width() == 0 || asset.height() == 0 {
            return Err(CorpusError::EmptyAsset(asset.id));
        }
        self.assets.insert(asset.id.clone(), Arc::new(asset));
        Ok(())
    }

    pub fn asset(&self, id: &str) -> Option<&Arc<MediaAsset>> {
        self.assets.get(id)
    }

    pub fn add_mesh(&mut self, reference: impl Into<String>, mesh: TriangleMesh) {
        self.meshes.insert(reference.into(), Arc::new(mesh));
    }

    pub fn mesh(&self, reference: &str) -> Option<&Arc<TriangleMesh>> {
        self.meshes.get(reference)
    }

    /// Uniform sample without replacement of `n_pos` platform-NSFW documents and
    /// `n_neg` others, deterministic for a given store and seed.
    pub fn build_seed_set(&self, n_pos: usize, n_neg: usize, rng_seed: u64) -> Result<SeedSet, CorpusError> {
        let (pos, neg): (Vec<&Arc<ThingDocument>>, Vec<&Arc<ThingDocument>>) =
            self.documents().partition(|d| d.is_platform_nsfw());
        if pos.len() < n_pos {
            return Err(CorpusError::InsufficientPositives { requested: n_pos, available: pos.len() });
        }
        if neg.len() < n_neg {
            return Err(CorpusError::InsufficientNegatives { requested: n_neg, available: neg.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let pick = |rng: &mut ChaCha8Rng, pool: &[&Arc<ThingDocument>], n: usize| -> Vec<String> {
            index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i].id.clone()).collect()
        };
        let positives = pick(&mut rng, &pos, n_pos);
        let negatives = pick(&mut rng, &neg, n_neg);
        Ok(SeedSet { positives, negatives, rng_seed })
    }
}

/// Input corpus read from disk: raw records plus the media they reference.
#[derive(Debug, Default)]
pub struct CorpusFiles {
    pub records: Vec<RawDocument>,
    /// `(thing id, asset id, kind, pixels)`
    pub images: Vec<(String, String, AssetKind, RgbImage)>,
    pub meshes: Vec<(String, TriangleMesh)>,
}

pub fn images_dir(corpus_path: &Path) -> PathBuf {
    corpus_path.parent().unwrap_or(Path::new(".")).join("images")
}

/// Reads a JSON-lines corpus. Images come from `images/<asset id>.png` next to
/// the corpus file; mesh references are paths relative to it. Missing image
/// files are skipped, malformed ones are errors.
pub fn load_corpus(path: &Path) -> Result<CorpusFiles, CorpusError> {
    let io = |source| CorpusError::Io { path: path.to_owned(), source };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = CorpusFiles::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw = RawDocument::from_json(line)
            .map_err(|e| CorpusError::MalformedField(format!("line {}: {e}", lineno + 1)))?;
        let thing = raw.id.clone().unwrap_or_default();
        for r in &raw.images {
            let file = images_dir(path).join(format!("{}.png", r.id()));
            if !file.exists() {
                continue;
            }
            let img = image::open(&file).map_err(|source| CorpusError::Image { path: file.clone(), source })?;
            out.images.push((thing.clone(), r.id().to_owned(), r.kind(), img.to_rgb8()));
        }
        for m in &raw.meshes {
            let file = base.join(m);
            let bytes = std::fs::read(&file).map_err(|source| CorpusError::Io { path: file.clone(), source })?;
            let mesh = mesh::parse_stl(&bytes).map_err(|source| CorpusError::Mesh { path: file.clone(), source })?;
            out.meshes.push((m.clone(), mesh));
        }
        out.records.push(raw);
    }
    Ok(out)
}
