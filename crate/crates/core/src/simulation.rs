//! Synthetic corpus with hidden per-category sensitivity, scripted moderators,
//! and a round driver for studying how group thresholds evolve.
//!
//! A simulated moderator with tolerance `τ` considers category `C` objectionable
//! when the thing's hidden sensitivity `s_C ≥ τ`. Everything is driven by
//! seeded ChaCha8 streams and a synthetic clock, so a run is reproducible
//! event for event.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use image::{Rgb, RgbImage};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, Category, CategoryTaxonomy, LabeledExample, DEFAULT_LEARNING_RATE};
use crate::corpus::{AssetKind, MediaAsset, RawDocument, RawImageRef};
use crate::features::Region;
use crate::metrics;
use crate::moderation::{
    apply_threshold, Annotation, CategoryPath, ModerationError, ModeratorProfile, RejectedRegion, ReviewCase,
    ReviewDecision, ReviewTask, ThresholdProfile,
};
use crate::service::{seed_labels, ServiceConfig, ServiceError, System};

pub const IMAGE_SIZE: u32 = 24;

pub const SENSITIVE_WORDS: [&str; 12] = [
    "nude",
    "erotic",
    "lingerie",
    "pinup",
    "topless",
    "boudoir",
    "sensual",
    "busty",
    "naked",
    "risque",
    "nsfw",
    "seductive",
];

pub const NEUTRAL_WORDS: [&str; 24] = [
    "vase",
    "gear",
    "bracket",
    "planter",
    "hook",
    "organizer",
    "lamp",
    "stand",
    "clip",
    "coaster",
    "holder",
    "mount",
    "tray",
    "hinge",
    "knob",
    "spool",
    "enclosure",
    "figurine",
    "bust",
    "statue",
    "miniature",
    "cosplay",
    "sculpture",
    "dragon",
];

/// Background and shape colours. None of them, even after jitter, lands in the
/// histogram bin of the signature colour.
const PALETTE: [[u8; 3]; 8] = [
    [40, 90, 200],
    [30, 140, 60],
    [120, 120, 120],
    [200, 200, 210],
    [60, 60, 70],
    [180, 40, 40],
    [230, 210, 60],
    [90, 50, 120],
];

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("population: {0}")]
    Population(String),
    #[error("unknown simulated thing `{0}`")]
    UnknownThing(String),
    #[error("{path}: {reason}")]
    Output { path: String, reason: String },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

fn output_err(path: &Path, e: impl ToString) -> SimError {
    SimError::Output { path: path.display().to_string(), reason: e.to_string() }
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Clone, Debug)]
pub struct SimThing {
    pub raw: RawDocument,
    pub asset_id: String,
    pub image: RgbImage,
    pub sensitivity: BTreeMap<Category, f64>,
    /// Grid cell (row-major, 3×3) painted with the signature colour.
    pub signature_cell: Option<usize>,
}

impl SimThing {
    pub fn id(&self) -> &str {
        self.raw.id.as_deref().unwrap_or_default()
    }

    pub fn sensitivity(&self, category: Category) -> f64 {
        self.sensitivity.get(&category).copied().unwrap_or(0.0)
    }

    pub fn is_positive(&self) -> bool {
        self.raw.platform_nsfw == Some(true)
    }
}

/// Hidden ground truth, one JSON line per thing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub sensitivity: BTreeMap<Category, f64>,
    pub signature_cell: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SimCorpus {
    pub rng_seed: u64,
    pub things: Vec<SimThing>,
}

pub fn signature_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [u8; 3]) -> Rgb<u8> {
    Rgb(rgb.map(|c| (i16::from(c) + rng.random_range(-8i16..=8)).clamp(0, 255) as u8))
}

fn paint(image: &mut RgbImage, region: Region, mut colour: impl FnMut() -> Rgb<u8>) {
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            image.put_pixel(x, y, colour());
        }
    }
}

fn render(rng: &mut ChaCha8Rng, signature_cell: Option<usize>) -> RgbImage {
    let bg = *PALETTE.choose(rng).expect("palette");
    let mut image = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
    paint(&mut image, Region::full(IMAGE_SIZE, IMAGE_SIZE), || Rgb(bg));
    let shape = *PALETTE.choose(rng).expect("palette");
    let (w, h) = (rng.random_range(4..=12), rng.random_range(4..=12));
    let (x, y) = (rng.random_range(0..=IMAGE_SIZE - w), rng.random_range(0..=IMAGE_SIZE - h));
    let mut pixels = Vec::new();
    for _ in 0..w * h {
        pixels.push(jitter(rng, shape));
    }
    let mut it = pixels.into_iter();
    paint(&mut image, Region { x, y, w, h }, || it.next().expect("sized"));
    if let Some(cell) = signature_cell {
        let region = Region::grid_cell(IMAGE_SIZE, IMAGE_SIZE, cell);
        let mut skin = Vec::new();
        for _ in 0..region.w * region.h {
            skin.push(Rgb([rng.random_range(200..=255), rng.random_range(160..=191), rng.random_range(128..=159)]));
        }
        let mut it = skin.into_iter();
        paint(&mut image, region, || it.next().expect("sized"));
    }
    image
}

fn words(rng: &mut ChaCha8Rng, sensitive: usize, neutral: usize) -> Vec<&'static str> {
    let mut out: Vec<&str> = SENSITIVE_WORDS.choose_multiple(rng, sensitive).copied().collect();
    out.extend(NEUTRAL_WORDS.choose_multiple(rng, neutral).copied());
    out.shuffle(rng);
    out
}

fn make_thing(rng: &mut ChaCha8Rng, index: usize, positive: bool) -> SimThing {
    let id = format!("thing-{index:05}");
    let asset_id = format!("{id}-preview");
    let (title_sensitive, desc_sensitive) = if positive { (1, 3) } else { (0, 0) };
    let title = words(rng, title_sensitive, 2 - title_sensitive).join(" ");
    let description = words(rng, desc_sensitive, 8 - desc_sensitive).join(" ");
    let tags = words(rng, usize::from(positive), 2 - usize::from(positive)).into_iter().map(String::from).collect();
    let mut sensitivity: BTreeMap<Category, f64> =
        Category::ALL.into_iter().map(|c| (c, rng.random_range(0.0..0.15))).collect();
    let signature_cell = if positive {
        sensitivity.insert(Category::SexualSuggestive, rng.random_range(0.6..=1.0));
        Some(rng.random_range(0..9))
    } else {
        None
    };
    let image = render(rng, signature_cell);
    let raw = RawDocument {
        id: Some(id),
        title: Some(title),
        description: Some(description),
        tags,
        images: vec![RawImageRef::Id(asset_id.clone())],
        platform_nsfw: positive.then_some(true),
        created_at: Some(signature_epoch() + TimeDelta::seconds(index as i64)),
        ..Default::default()
    };
    SimThing { raw, asset_id, image, sensitivity, signature_cell }
}

/// `n_pos` platform-NSFW things and `n_neg` others, in shuffled id order.
pub fn generate_corpus(rng_seed: u64, n_pos: usize, n_neg: usize) -> SimCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut labels: Vec<bool> = std::iter::repeat_n(true, n_pos).chain(std::iter::repeat_n(false, n_neg)).collect();
    labels.shuffle(&mut rng);
    let things = labels.into_iter().enumerate().map(|(i, positive)| make_thing(&mut rng, i, positive)).collect();
    SimCorpus { rng_seed, things }
}

impl SimCorpus {
    pub fn len(&self) -> usize {
        self.things.len()
    }

    pub fn is_empty(&self) -> bool {
        self.things.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SimThing> {
        self.things.binary_search_by(|t| t.id().cmp(id)).ok().map(|i| &self.things[i])
    }

    pub fn positives(&self) -> usize {
        self.things.iter().filter(|t| t.is_positive()).count()
    }

    /// Ingests every document and registers its preview image.
    pub fn load_into(&self, system: &mut System, at: DateTime<Utc>) -> Result<()> {
        for t in &self.things {
            system.ingest(t.raw.clone(), at)?;
            let asset = MediaAsset {
                id: t.asset_id.clone(),
                thing_id: t.id().to_owned(),
                kind: AssetKind::RenderedPreview,
                image: t.image.clone(),
            };
            system.register_asset(asset, at)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.things.iter().map(|t| serde_json::to_string(&t.raw).expect("serializable") + "\n").collect()
    }

    pub fn truth(&self) -> Vec<TruthRecord> {
        self.things
            .iter()
            .map(|t| TruthRecord {
                id: t.id().to_owned(),
                sensitivity: t.sensitivity.clone(),
                signature_cell: t.signature_cell,
            })
            .collect()
    }

    /// Writes `corpus.jsonl`, `images/<asset>.png` and `truth.jsonl` into `dir`,
    /// in the layout [`crate::corpus::load_corpus`] reads.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| output_err(&images, e))?;
        let corpus = dir.join("corpus.jsonl");
        std::fs::write(&corpus, self.to_jsonl()).map_err(|e| output_err(&corpus, e))?;
        let truth: String =
            self.truth().iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
        let path = dir.join("truth.jsonl");
        std::fs::write(&path, truth).map_err(|e| output_err(&path, e))?;
        for t in &self.things {
            let path = images.join(format!("{}.png", t.asset_id));
            t.image.save(&path).map_err(|e| output_err(&path, e))?;
        }
        Ok(())
    }
}

/// Held-out quality of a seed model on the platform label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub train: usize,
    pub test: usize,
    pub accuracy: f64,
    pub auc: f64,
}

/// Loads `corpus` into a fresh system, trains on a seeded random
/// `1 - test_fraction` share and scores the sexual/suggestive probability
/// against the platform label on the rest.
pub fn seed_holdout(corpus: &SimCorpus, rng_seed: u64, epochs: usize, test_fraction: f64) -> Result<HoldoutReport> {
    let at = signature_epoch();
    let mut system = System::new(ServiceConfig::default(), at)?;
    corpus.load_into(&mut system, at)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let n_test = (corpus.len() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    let labeled = |i: &usize| -> Result<LabeledExample> {
        let t = &corpus.things[*i];
        Ok(LabeledExample { features: system.features(t.id())?.clone(), labels: seed_labels(t.is_positive()) })
    };
    let examples = train.iter().map(labeled).collect::<Result<Vec<_>>>()?;
    let model =
        classifier::train_seed(&examples, system.featurizer().hash_params(), epochs, DEFAULT_LEARNING_RATE, rng_seed)
            .map_err(ServiceError::from)?;
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for &i in test {
        let t = &corpus.things[i];
        scores.push(model.probability(Category::SexualSuggestive, system.features(t.id())?));
        labels.push(t.is_positive());
    }
    Ok(HoldoutReport {
        train: train.len(),
        test: test.len(),
        accuracy: metrics::accuracy(&scores, &labels, 0.5),
        auc: metrics::roc_auc(&scores, &labels).unwrap_or(f64::NAN),
    })
}

// ---------------------------------------------------------------------------
// Moderators

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimModerator {
    pub id: String,
    pub audience_group: String,
    pub tolerance: f64,
}

impl SimModerator {
    pub fn new(id: impl Into<String>, audience_group: impl Into<String>, tolerance: f64) -> Self {
        assert!((0.0..=1.0).contains(&tolerance), "tolerance {tolerance} outside [0, 1]");
        Self { id: id.into(), audience_group: audience_group.into(), tolerance }
    }

    pub fn objects_to(&self, thing: &SimThing, category: Category) -> bool {
        thing.sensitivity(category) >= self.tolerance
    }
}

/// Two groups of two moderators, everyone at the same tolerance.
pub fn homogeneous(tolerance: f64) -> Vec<SimModerator> {
    vec![
        SimModerator::new("a1", "group-a", tolerance),
        SimModerator::new("a2", "group-a", tolerance),
        SimModerator::new("b1", "group-b", tolerance),
        SimModerator::new("b2", "group-b", tolerance),
    ]
}

/// A strict group and a permissive group.
pub fn mixed(strict: f64, permissive: f64) -> Vec<SimModerator> {
    vec![
        SimModerator::new("s1", "strict", strict),
        SimModerator::new("s2", "strict", strict),
        SimModerator::new("p1", "permissive", permissive),
        SimModerator::new("p2", "permissive", permissive),
    ]
}

/// Severity a moderator assigns when `s ≥ τ`: how far past their tolerance the
/// content sits, on 1..=5.
pub fn sensitivity_level(s: f64, tolerance: f64) -> Option<u8> {
    if s < tolerance {
        return None;
    }
    if tolerance >= 1.0 {
        return Some(5);
    }
    // the epsilon keeps exact multiples of 1/5 from rounding up a level
    let x = 5.0 * (s - tolerance) / (1.0 - tolerance) - 1e-9;
    Some(x.ceil().clamp(1.0, 5.0) as u8)
}

/// The decision a scripted moderator submits for `task`, judged against the
/// model flags under their group's `profile`.
pub fn simulate_review(
    moderator: &SimModerator,
    task: &ReviewTask,
    thing: &SimThing,
    profile: &ThresholdProfile,
    taxonomy: &CategoryTaxonomy,
) -> ReviewDecision {
    let model_flags = apply_threshold(&task.prediction, profile);
    let objectionable: BTreeSet<Category> =
        Category::ALL.into_iter().filter(|&c| moderator.objects_to(thing, c)).collect();
    let (w, h) = thing.image.dimensions();
    let bbox = thing.signature_cell.map_or(Region::full(w, h), |k| Region::grid_cell(w, h, k));
    let annotations: Vec<Annotation> = objectionable
        .iter()
        .map(|&c| Annotation {
            asset_id: thing.asset_id.clone(),
            bbox,
            category_path: CategoryPath { top: c, second: taxonomy.children(c).first().cloned() },
            level: sensitivity_level(thing.sensitivity(c), moderator.tolerance).expect("objectionable"),
            rationale: format!("{c} content beyond what {} accepts", moderator.audience_group),
        })
        .collect();
    let localization = task.prediction.regions.get(&thing.asset_id);
    let mut rejected_regions = Vec::new();
    for &c in model_flags.difference(&objectionable) {
        let theta = profile.threshold(c);
        let cells: Vec<usize> = match localization {
            Some(loc) => {
                let hot: Vec<usize> = (0..9).filter(|&k| loc.cells[&c][k] >= theta).collect();
                if hot.is_empty() {
                    vec![loc.argmax(c)]
                } else {
                    hot
                }
            }
            None => vec![4],
        };
        rejected_regions.extend(cells.into_iter().map(|cell| RejectedRegion {
            asset_id: thing.asset_id.clone(),
            cell,
            category: c,
        }));
    }
    let missed = objectionable.difference(&model_flags).next().is_some();
    let case = if missed {
        ReviewCase::MissedPart
    } else if !rejected_regions.is_empty() {
        ReviewCase::RejectDetection
    } else {
        ReviewCase::AgreeFinalize
    };
    let rationale =
        (!rejected_regions.is_empty()).then(|| format!("detections are acceptable for {}", moderator.audience_group));
    ReviewDecision {
        task_id: task.task_id.clone(),
        moderator_id: moderator.id.clone(),
        case,
        selected_categories: objectionable.intersection(&model_flags).copied().collect(),
        annotations,
        rejected_regions,
        rationale,
    }
}

// ---------------------------------------------------------------------------
// Driver

/// Monotone synthetic clock, one second per reading.
#[derive(Clone, Debug)]
pub struct SimClock {
    now: DateTime<Utc>,
}

impl Default for SimClock {
    fn default() -> Self {
        Self { now: signature_epoch() }
    }
}

impl SimClock {
    pub fn tick(&mut self) -> DateTime<Utc> {
        self.now += TimeDelta::seconds(1);
        self.now
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: usize,
    pub things_per_round: usize,
    pub eval_size: usize,
    pub rng_seed: u64,
    pub seed_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { rounds: 100, things_per_round: 8, eval_size: 256, rng_seed: 42, seed_epochs: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub enqueued: usize,
    pub reviews: usize,
    pub disagreements: usize,
    pub cumulative_disagreements: usize,
    pub model_version: u64,
    pub frozen: usize,
    /// Agreement of `p ≥ 0.5` with `s ≥ 0.5` over the evaluation sample.
    pub accuracy: f64,
    pub thresholds: BTreeMap<String, BTreeMap<Category, f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub rounds: Vec<RoundMetrics>,
}

impl SimMetrics {
    pub fn total_disagreements(&self) -> usize {
        self.rounds.last().map_or(0, |r| r.cumulative_disagreements)
    }

    pub fn last(&self) -> Option<&RoundMetrics> {
        self.rounds.last()
    }

    pub fn threshold_trajectory(&self, group: &str, category: Category) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.thresholds.get(group)?.get(&category).copied()).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.rounds.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
    }

    /// One row per round; thresholds become `theta:<group>:<category>` columns.
    pub fn to_csv(&self) -> String {
        let mut columns: Vec<(String, Category)> = Vec::new();
        if let Some(first) = self.rounds.first() {
            for (g, ts) in &first.thresholds {
                columns.extend(ts.keys().map(|c| (g.clone(), *c)));
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "round",
            "enqueued",
            "reviews",
            "disagreements",
            "cumulative_disagreements",
            "model_version",
            "frozen",
            "accuracy",
        ]
        .map(String::from)
        .to_vec();
        header.extend(columns.iter().map(|(g, c)| format!("theta:{g}:{c}")));
        w.write_record(&header).expect("in-memory");
        for r in &self.rounds {
            let mut row = vec![
                r.round.to_string(),
                r.enqueued.to_string(),
                r.reviews.to_string(),
                r.disagreements.to_string(),
                r.cumulative_disagreements.to_string(),
                r.model_version.to_string(),
                r.frozen.to_string(),
                r.accuracy.to_string(),
            ];
            row.extend(
                columns
                    .iter()
                    .map(|(g, c)| r.thresholds.get(g).and_then(|t| t.get(c)).map_or(String::new(), f64::to_string)),
            );
            w.write_record(&row).expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
        for (name, text) in [("metrics.jsonl", self.to_jsonl()), ("metrics.csv", self.to_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| output_err(&path, e))?;
        }
        Ok(())
    }
}

/// A system loaded with `corpus`, seed-trained on every thing in it, with the
/// population registered. Retraining happens once per round, not per task.
pub fn build_system(
    corpus: &SimCorpus,
    population: &[SimModerator],
    run: &RunConfig,
    clock: &mut SimClock,
) -> Result<System> {
    let config = ServiceConfig { auto_retrain: false, rng_seed: run.rng_seed, ..ServiceConfig::default() };
    let mut system = System::new(config, clock.tick())?;
    populate(&mut system, corpus, population, run, clock)?;
    Ok(system)
}

/// Like [`build_system`] but onto an existing (typically empty, data-dir
/// backed) system.
pub fn populate(
    system: &mut System,
    corpus: &SimCorpus,
    population: &[SimModerator],
    run: &RunConfig,
    clock: &mut SimClock,
) -> Result<()> {
    corpus.load_into(system, clock.tick())?;
    let n_pos = corpus.positives();
    system.seed_train(n_pos, corpus.len() - n_pos, run.rng_seed, run.seed_epochs, clock.tick())?;
    for m in population {
        let profile = ModeratorProfile { id: m.id.clone(), audience_group: m.audience_group.clone() };
        system.register_moderator(profile, None, clock.tick())?;
    }
    Ok(())
}

fn pick_pair<'a>(rng: &mut ChaCha8Rng, population: &'a [SimModerator]) -> Result<[&'a SimModerator; 2]> {
    let mut groups: BTreeMap<&str, Vec<&SimModerator>> = BTreeMap::new();
    for m in population {
        groups.entry(m.audience_group.as_str()).or_default().push(m);
    }
    let groups: Vec<Vec<&SimModerator>> = groups.into_values().collect();
    if groups.len() >= 2 {
        let g = index::sample(rng, groups.len(), 2);
        let a = *groups[g.index(0)].choose(rng).expect("non-empty group");
        let b = *groups[g.index(1)].choose(rng).expect("non-empty group");
        return Ok([a, b]);
    }
    if population.len() < 2 {
        return Err(SimError::Population("need at least two moderators".into()));
    }
    let i = index::sample(rng, population.len(), 2);
    Ok([&population[i.index(0)], &population[i.index(1)]])
}

fn snapshot(system: &System, corpus: &SimCorpus, eval: &[usize], round: usize) -> Result<RoundMetrics> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for &i in eval {
        let thing = &corpus.things[i];
        let p = system.probabilities(thing.id())?;
        for c in Category::ALL {
            scores.push(p[&c]);
            labels.push(thing.sensitivity(c) >= 0.5);
        }
    }
    let desk = system.desk();
    Ok(RoundMetrics {
        round,
        enqueued: 0,
        reviews: 0,
        disagreements: 0,
        cumulative_disagreements: desk.disagreements().len(),
        model_version: desk.model().map_or(0, |m| m.version),
        frozen: corpus.things.iter().filter(|t| desk.is_frozen(t.id())).count(),
        accuracy: metrics::accuracy(&scores, &labels, 0.5),
        thresholds: system
            .thresholds()
            .iter()
            .map(|(g, p)| (g.clone(), Category::ALL.into_iter().map(|c| (c, p.threshold(c))).collect()))
            .collect(),
    })
}

/// Runs `run.rounds` rounds. Each round samples things for prediction and
/// enqueueing, pairs two moderators (from two distinct groups when the
/// population has them), has each drain the queue, then retrains once.
/// Round 0 in the result is the state before the first round.
pub fn run_rounds(
    system: &mut System,
    corpus: &SimCorpus,
    population: &[SimModerator],
    run: &RunConfig,
    clock: &mut SimClock,
) -> Result<SimMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.rng_seed);
    let eval: Vec<usize> = index::sample(&mut rng, corpus.len(), run.eval_size.min(corpus.len())).into_vec();
    let mut out = SimMetrics { rounds: vec![snapshot(system, corpus, &eval, 0)?] };
    let taxonomy = system.desk().taxonomy().clone();
    for round in 1..=run.rounds {
        let before = system.desk().disagreements().len();
        let mut enqueued = 0;
        for i in index::sample(&mut rng, corpus.len(), run.things_per_round.min(corpus.len())) {
            match system.enqueue_thing(corpus.things[i].id(), clock.tick()) {
                Ok(task) => enqueued += usize::from(task.is_some()),
                Err(ServiceError::Moderation(ModerationError::DuplicateTaskForThing(_))) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let mut reviews = 0;
        for moderator in pick_pair(&mut rng, population)? {
            loop {
                let task = match system.next_task(&moderator.id, clock.tick()) {
                    Ok(t) => t,
                    Err(ServiceError::Moderation(ModerationError::QueueEmpty)) => break,
                    Err(e) => return Err(e.into()),
                };
                let thing = corpus.get(&task.thing_id).ok_or_else(|| SimError::UnknownThing(task.thing_id.clone()))?;
                let profile = system
                    .thresholds()
                    .get(&moderator.audience_group)
                    .cloned()
                    .unwrap_or_else(|| ThresholdProfile::new(moderator.audience_group.clone()));
                let decision = simulate_review(moderator, &task, thing, &profile, &taxonomy);
                system.submit_review(decision, clock.tick())?;
                reviews += 1;
            }
        }
        system.retrain(clock.tick())?;
        let mut m = snapshot(system, corpus, &eval, round)?;
        m.enqueued = enqueued;
        m.reviews = reviews;
        m.disagreements = m.cumulative_disagreements - before;
        tracing::debug!(round, enqueued, reviews, disagreements = m.disagreements, "round done");
        out.rounds.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::histogram_bin;
    use crate::moderation::TaskState;

    const SIGNATURE_BIN: usize = 58;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(7, 20, 30);
        let b = generate_corpus(7, 20, 30);
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.truth(), b.truth());
        assert!(a.things.iter().zip(&b.things).all(|(x, y)| x.image == y.image));
        assert_ne!(a.to_jsonl(), generate_corpus(8, 20, 30).to_jsonl());
        assert_eq!(a.len(), 50);
        assert_eq!(a.positives(), 20);
        assert_eq!(generate_corpus(1, 1, 1).len(), 2);
    }

    #[test]
    fn ground_truth_shape() {
        let corpus = generate_corpus(3, 40, 40);
        for t in &corpus.things {
            let skin = t.image.pixels().filter(|p| histogram_bin(p.0) == SIGNATURE_BIN).count();
            if t.is_positive() {
                assert!((0.6..=1.0).contains(&t.sensitivity(Category::SexualSuggestive)));
                let cell = Region::grid_cell(IMAGE_SIZE, IMAGE_SIZE, t.signature_cell.unwrap());
                assert_eq!(skin as u32, cell.w * cell.h);
                let text = format!("{} {}", t.raw.title.as_deref().unwrap(), t.raw.description.as_deref().unwrap());
                assert!(SENSITIVE_WORDS.iter().any(|w| text.split(' ').any(|x| x == *w)));
            } else {
                assert_eq!(skin, 0);
                assert!(t.signature_cell.is_none());
                assert!(Category::ALL.iter().all(|&c| t.sensitivity(c) < 0.15));
            }
            assert!(Category::ALL
                .iter()
                .filter(|&&c| c != Category::SexualSuggestive)
                .all(|&c| t.sensitivity(c) < 0.15));
        }
        assert!(corpus.things.windows(2).all(|w| w[0].id() < w[1].id()));
        assert_eq!(corpus.get("thing-00005").unwrap().id(), "thing-00005");
    }

    #[test]
    fn holdout_on_a_small_corpus() {
        let r = seed_holdout(&generate_corpus(4, 100, 100), 4, 5, 0.2).unwrap();
        assert_eq!((r.train, r.test), (160, 40));
        assert!(r.accuracy > 0.9, "{r:?}");
    }

    #[test]
    fn levels() {
        assert_eq!(sensitivity_level(0.4, 0.5), None);
        assert_eq!(sensitivity_level(0.5, 0.2), Some(2));
        assert_eq!(sensitivity_level(0.5, 0.5), Some(1));
        assert_eq!(sensitivity_level(0.6, 0.5), Some(1));
        assert_eq!(sensitivity_level(0.61, 0.5), Some(2));
        assert_eq!(sensitivity_level(1.0, 0.5), Some(5));
        assert_eq!(sensitivity_level(0.9, 0.0), Some(5));
        assert_eq!(sensitivity_level(1.0, 1.0), Some(5));
    }

    fn small_run(population: &[SimModerator], rounds: usize) -> (System, SimMetrics) {
        let corpus = generate_corpus(11, 60, 60);
        let run = RunConfig { rounds, eval_size: 64, rng_seed: 5, ..RunConfig::default() };
        let mut clock = SimClock::default();
        let mut system = build_system(&corpus, population, &run, &mut clock).unwrap();
        let metrics = run_rounds(&mut system, &corpus, population, &run, &mut clock).unwrap();
        (system, metrics)
    }

    #[test]
    fn homogeneous_population_never_disagrees() {
        let (system, metrics) = small_run(&homogeneous(0.5), 15);
        assert_eq!(metrics.total_disagreements(), 0);
        assert!(metrics.rounds.iter().map(|r| r.reviews).sum::<usize>() > 0);
        for g in ["group-a", "group-b"] {
            assert!(metrics.threshold_trajectory(g, Category::SexualSuggestive).iter().all(|&t| t == 0.5));
        }
        assert!(system.desk().tasks().all(|t| t.state == TaskState::Completed));
    }

    #[test]
    fn mixed_population_raises_only_the_permissive_group() {
        let (_, metrics) = small_run(&mixed(0.2, 0.8), 15);
        assert!(metrics.total_disagreements() > 0);
        let permissive = metrics.threshold_trajectory("permissive", Category::SexualSuggestive);
        assert!(permissive.windows(2).all(|w| w[1] >= w[0]));
        assert!(*permissive.last().unwrap() > 0.5);
        assert!(metrics.threshold_trajectory("strict", Category::SexualSuggestive).iter().all(|&t| t == 0.5));
        assert_eq!(metrics.rounds.len(), 16);
        assert!(metrics.rounds.windows(2).all(|w| w[1].model_version >= w[0].model_version));
    }

    #[test]
    fn decisions_follow_tolerance() {
        let corpus = generate_corpus(2, 10, 10);
        let run = RunConfig { eval_size: 8, ..RunConfig::default() };
        let mut clock = SimClock::default();
        let pop = mixed(0.2, 0.8);
        let mut system = build_system(&corpus, &pop, &run, &mut clock).unwrap();
        let thing = corpus.things.iter().find(|t| t.is_positive()).unwrap();
        let task = system.enqueue_thing(thing.id(), clock.tick()).unwrap().unwrap();
        let taxonomy = CategoryTaxonomy::default();
        let strict = simulate_review(&pop[0], &task, thing, &ThresholdProfile::new("strict"), &taxonomy);
        assert!(strict.annotations.iter().any(|a| a.category_path.top == Category::SexualSuggestive));
        assert!(strict.rejected_regions.is_empty());
        // A fully permissive moderator objects to nothing and rejects whatever the model flags.
        let lax = SimModerator::new("x", "permissive", 1.0);
        let lenient = simulate_review(&lax, &task, thing, &ThresholdProfile::uniform("permissive", 0.05), &taxonomy);
        assert!(lenient.annotations.iter().all(|a| thing.sensitivity(a.category_path.top) >= 1.0));
        assert_eq!(lenient.case, ReviewCase::RejectDetection);
        assert!(lenient.rationale.is_some());
    }

    #[test]
    fn metrics_serialize() {
        let (_, metrics) = small_run(&mixed(0.2, 0.8), 3);
        let csv = metrics.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("round,enqueued,reviews"));
        assert!(header.contains("theta:permissive:sexual_suggestive"));
        assert_eq!(csv.lines().count(), 5);
        let back: Vec<RoundMetrics> = metrics.to_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, metrics.rounds);
    }
}
