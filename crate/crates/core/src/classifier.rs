//! Online multi-label classifier over the sensitivity taxonomy.
//!
//! Each top-level category is an independent logistic regression over the
//! sparse fused features, so probabilities need not sum to one and every
//! prediction decomposes exactly into per-feature contributions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError, FeatureVector, HashParams, Region};
use crate::hexfloat;

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_TOP_K: usize = 5;
pub const MODEL_FORMAT: &str = "hitl3d-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("seed set is empty")]
    EmptySeedSet,
    #[error("feature vector hashed with {found:?}, model expects {expected:?}")]
    HashParamMismatch { expected: HashParams, found: HashParams },
    #[error("sample weight must be positive, got {0}")]
    NonpositiveWeight(f64),
    #[error("asset is {width}x{height}, localization needs at least 3x3")]
    AssetTooSmall { width: u32, height: u32 },
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SexualSuggestive,
    Weaponry,
    DrugSmoke,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::SexualSuggestive, Category::Weaponry, Category::DrugSmoke];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::SexualSuggestive => "sexual_suggestive",
            Category::Weaponry => "weaponry",
            Category::DrugSmoke => "drug_smoke",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ClassifierError::UnknownCategory(s.to_owned()))
    }
}

/// Two-level taxonomy. Second-level labels are annotation metadata only; the
/// classifier scores top-level categories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryTaxonomy {
    children: BTreeMap<Category, Vec<String>>,
}

impl Default for CategoryTaxonomy {
    fn default() -> Self {
        let labels = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            children: BTreeMap::from([
                (
                    Category::SexualSuggestive,
                    labels(&["explicit_nudity", "adult_toys", "sexual_activity", "suggestive"]),
                ),
                (Category::Weaponry, labels(&["firearms", "weapon_parts", "bladed_weapons"])),
                (Category::DrugSmoke, labels(&["drugs", "drug_paraphernalia", "tobacco_smoking"])),
            ]),
        }
    }
}

impl CategoryTaxonomy {
    pub fn children(&self, top: Category) -> &[String] {
        self.children.get(&top).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parent_of(&self, label: &str) -> Option<Category> {
        self.children.iter().find(|(_, ls)| ls.iter().any(|l| l == label)).map(|(c, _)| *c)
    }

    pub fn is_valid(&self, top: Category, second: Option<&str>) -> bool {
        second.is_none_or(|s| self.parent_of(s) == Some(top))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryModel {
    #[serde(with = "hexfloat")]
    pub bias: f64,
    #[serde(with = "hexfloat::map")]
    pub weights: BTreeMap<String, f64>,
}

impl CategoryModel {
    pub fn logit(&self, fv: &FeatureVector) -> f64 {
        let mut z = self.bias;
        for (id, x) in fv.iter() {
            if let Some(w) = self.weights.get(id) {
                z += w * x;
            }
        }
        z
    }
}

/// Versioned classifier weights. Snapshots are immutable once published.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub hash_params: HashParams,
    pub learning_rate: f64,
    pub version: u64,
    pub update_count: u64,
    pub categories: BTreeMap<Category, CategoryModel>,
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    format: &'static str,
    format_version: u32,
    hash_params: HashParams,
    #[serde(serialize_with = "hexfloat::serialize")]
    learning_rate: f64,
    version: u64,
    update_count: u64,
    categories: &'a BTreeMap<Category, CategoryModel>,
}

#[derive(Deserialize)]
struct ModelFile {
    format: String,
    format_version: u32,
    hash_params: HashParams,
    #[serde(deserialize_with = "hexfloat::deserialize")]
    learning_rate: f64,
    version: u64,
    update_count: u64,
    categories: BTreeMap<Category, CategoryModel>,
}

impl Serialize for ModelState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ModelFileRef {
            format: MODEL_FORMAT,
            format_version: MODEL_FORMAT_VERSION,
            hash_params: self.hash_params,
            learning_rate: self.learning_rate,
            version: self.version,
            update_count: self.update_count,
            categories: &self.categories,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let f = ModelFile::deserialize(d)?;
        if f.format != MODEL_FORMAT || f.format_version != MODEL_FORMAT_VERSION {
            return Err(D::Error::custom(format!("unsupported model format {} v{}", f.format, f.format_version)));
        }
        let mut categories = f.categories;
        for c in Category::ALL {
            categories.entry(c).or_default();
        }
        Ok(ModelState {
            hash_params: f.hash_params,
            learning_rate: f.learning_rate,
            version: f.version,
            update_count: f.update_count,
            categories,
        })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub value: f64,
}

/// Per-category probabilities for the 3x3 cells of one image, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub width: u32,
    pub height: u32,
    pub cells: BTreeMap<Category, [f64; 9]>,
}

impl Localization {
    /// Index of the highest-probability cell for `category` (first one on ties).
    pub fn argmax(&self, category: Category) -> usize {
        let cells = &self.cells[&category];
        (0..9).fold(0, |best, i| if cells[i] > cells[best] { i } else { best })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub thing_id: String,
    pub model_version: u64,
    pub probabilities: BTreeMap<Category, f64>,
    pub attributions: BTreeMap<Category, Vec<Contribution>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub regions: BTreeMap<String, Localization>,
}

impl Prediction {
    pub fn max_probability(&self) -> f64 {
        self.probabilities.values().copied().fold(0.0, f64::max)
    }

    pub fn probability(&self, category: Category) -> f64 {
        self.probabilities.get(&category).copied().unwrap_or(0.0)
    }
}

/// Seed-training example with a binary label for some or all categories.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: FeatureVector,
    pub labels: BTreeMap<Category, bool>,
}

/// Gradient of the logistic loss for one category.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
}

impl ModelState {
    /// All-zero weights at version 0.
    pub fn zero(hash_params: HashParams, learning_rate: f64) -> Self {
        Self {
            hash_params,
            learning_rate,
            version: 0,
            update_count: 0,
            categories: Category::ALL.into_iter().map(|c| (c, CategoryModel::default())).collect(),
        }
    }

    fn check(&self, fv: &FeatureVector) -> Result<(), ClassifierError> {
        match fv.hash_params() {
            Some(found) if found != self.hash_params => {
                Err(ClassifierError::HashParamMismatch { expected: self.hash_params, found })
            }
            _ => Ok(()),
        }
    }

    pub fn category(&self, category: Category) -> &CategoryModel {
        &self.categories[&category]
    }

    pub fn logit(&self, category: Category, fv: &FeatureVector) -> f64 {
        self.category(category).logit(fv)
    }

    pub fn probability(&self, category: Category, fv: &FeatureVector) -> f64 {
        sigmoid(self.logit(category, fv))
    }

    pub fn predict(&self, thing_id: &str, fv: &FeatureVector) -> Result<Prediction, ClassifierError> {
        self.check(fv)?;
        let probabilities = Category::ALL.into_iter().map(|c| (c, self.probability(c, fv))).collect();
        Ok(Prediction {
            thing_id: thing_id.to_owned(),
            model_version: self.version,
            probabilities,
            attributions: self.attribute(fv, DEFAULT_TOP_K),
            regions: BTreeMap::new(),
        })
    }

    /// Every nonzero `w_j * x_j` for a category, sorted by magnitude (descending),
    /// ties broken by feature id.
    pub fn contributions(&self, category: Category, fv: &FeatureVector) -> Vec<Contribution> {
        let model = self.category(category);
        let mut out: Vec<Contribution> = fv
            .iter()
            .filter_map(|(id, x)| model.weights.get(id).map(|w| (id, w * x)))
            .filter(|(_, v)| *v != 0.0)
            .map(|(id, value)| Contribution { feature: id.to_owned(), value })
            .collect();
        out.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()).then_with(|| a.feature.cmp(&b.feature)));
        out
    }

    /// Top-`k` contributions per category.
    pub fn attribute(&self, fv: &FeatureVector, k: usize) -> BTreeMap<Category, Vec<Contribution>> {
        Category::ALL
            .into_iter()
            .map(|c| {
                let mut v = self.contributions(c, fv);
                v.truncate(k);
                (c, v)
            })
            .collect()
    }

    /// Logistic loss `-[y ln p + (1-y) ln(1-p)]`.
    pub fn loss(&self, category: Category, fv: &FeatureVector, label: bool) -> f64 {
        let z = self.logit(category, fv);
        // ln(1 + e^z) - y z, written to avoid overflow
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        softplus - if label { z } else { 0.0 }
    }

    /// Analytic gradient of [`loss`](Self::loss): `(p - y) x` and `(p - y)`.
    pub fn gradient(&self, category: Category, fv: &FeatureVector, label: bool) -> Gradient {
        let residual = self.probability(category, fv) - if label { 1.0 } else { 0.0 };
        Gradient { weights: fv.iter().map(|(id, x)| (id.to_owned(), residual * x)).collect(), bias: residual }
    }

    fn sgd_step(&mut self, fv: &FeatureVector, category: Category, label: bool, weight: f64) {
        let step = self.learning_rate * weight;
        let grad = self.gradient(category, fv, label);
        let model = self.categories.get_mut(&category).expect("all categories present");
        for (id, g) in grad.weights {
            *model.weights.entry(id).or_insert(0.0) -= step * g;
        }
        model.bias -= step * grad.bias;
    }

    /// One weighted SGD step on a single category; bumps version and update count.
    pub fn update_in_place(
        &mut self,
        fv: &FeatureVector,
        category: Category,
        label: bool,
        sample_weight: f64,
    ) -> Result<(), ClassifierError> {
        if !(sample_weight > 0.0 && sample_weight.is_finite()) {
            return Err(ClassifierError::NonpositiveWeight(sample_weight));
        }
        self.check(fv)?;
        self.sgd_step(fv, category, label, sample_weight);
        self.version += 1;
        self.update_count += 1;
        Ok(())
    }

    pub fn update(
        &self,
        fv: &FeatureVector,
        category: Category,
        label: bool,
        sample_weight: f64,
    ) -> Result<ModelState, ClassifierError> {
        let mut next = self.clone();
        next.update_in_place(fv, category, label, sample_weight)?;
        Ok(next)
    }

    /// Scores each cell of the 3x3 partition from its image features alone.
    pub fn localize(&self, image: &RgbImage) -> Result<Localization, ClassifierError> {
        let (width, height) = image.dimensions();
        if width < 3 || height < 3 {
            return Err(ClassifierError::AssetTooSmall { width, height });
        }
        let mut cells: BTreeMap<Category, [f64; 9]> = Category::ALL.into_iter().map(|c| (c, [0.0; 9])).collect();
        for k in 0..9 {
            let crop = features::image_features(image, Some(Region::grid_cell(width, height, k)))?;
            let fv = features::fuse([&crop])?;
            for (c, grid) in cells.iter_mut() {
                grid[k] = self.probability(*c, &fv);
            }
        }
        Ok(Localization { width, height, cells })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifierError> {
        serde_json::from_str(text).map_err(|e| ClassifierError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Plain logistic-loss SGD over shuffled examples. The shuffle order comes from
/// one ChaCha8 stream seeded with `rng_seed`, so identical inputs give a
/// bit-identical model. The result is published as version 1.
pub fn train_seed(
    examples: &[LabeledExample],
    hash_params: HashParams,
    epochs: usize,
    learning_rate: f64,
    rng_seed: u64,
) -> Result<ModelState, ClassifierError> {
    if examples.is_empty() {
        return Err(ClassifierError::EmptySeedSet);
    }
    let mut model = ModelState::zero(hash_params, learning_rate);
    for ex in examples {
        model.check(&ex.features)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            for (&c, &label) in &ex.labels {
                model.sgd_step(&ex.features, c, label, 1.0);
            }
        }
    }
    model.version = 1;
    Ok(model)
}
