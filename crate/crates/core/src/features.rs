//! Feature extraction.
//!
//! Every extractor produces a sparse [`FeatureVector`] whose ids carry one of
//! three namespaces: `text:`, `img:` or `mesh:`. Vectors from different
//! extractors are combined with [`fuse`], which L2-normalizes each namespace on
//! its own so that token counts and histogram mass end up on the same scale.
//!
//! Text tokens are hashed with 64-bit FNV-1a reduced modulo `2^hash_bits`. The
//! hash parameters travel with the vector so a model can reject input that was
//! featurized under a different tokenizer table.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStore, ThingDocument};
use crate::mesh::{self, TriangleMesh};

pub const TEXT_NS: &str = "text:";
pub const IMG_NS: &str = "img:";
pub const MESH_NS: &str = "mesh:";
pub const NAMESPACES: [&str; 3] = [TEXT_NS, IMG_NS, MESH_NS];

/// Histogram bins per colour channel.
pub const HIST_BINS: u32 = 4;
/// Luminance gradient magnitude above which a pixel counts as an edge.
pub const EDGE_THRESHOLD: f64 = 64.0;

const BUILTIN_TOKENIZER: &str = include_str!("../data/tokenizer.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature id `{0}` has no known namespace")]
    UnknownNamespace(String),
    #[error("feature `{id}` has non-finite weight {value}")]
    NonFinite { id: String, value: f64 },
    #[error("region {region:?} exceeds image bounds {width}x{height}")]
    RegionOutOfBounds { region: Region, width: u32, height: u32 },
    #[error("cannot fuse vectors built with different hash parameters")]
    HashParamConflict,
    #[error("invalid tokenizer config: {0}")]
    Config(String),
}

/// Parameters that determine the text feature id space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HashParams {
    pub bits: u32,
    pub ngram_order: u8,
    pub tokenizer_version: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    entries: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hash_params: Option<HashParams>,
}

impl FeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_hash_params(mut self, params: HashParams) -> Self {
        self.hash_params = Some(params);
        self
    }

    pub fn hash_params(&self) -> Option<HashParams> {
        self.hash_params
    }

    /// Adds `weight` to the entry `id`, creating it if needed.
    pub fn add(&mut self, id: impl Into<String>, weight: f64) -> Result<(), FeatureError> {
        let id = id.into();
        if !NAMESPACES.iter().any(|ns| id.starts_with(ns)) {
            return Err(FeatureError::UnknownNamespace(id));
        }
        if !weight.is_finite() {
            return Err(FeatureError::NonFinite { id, value: weight });
        }
        let total = self.get(&id) + weight;
        if !total.is_finite() {
            return Err(FeatureError::NonFinite { id, value: total });
        }
        self.entries.insert(id, total);
        Ok(())
    }

    pub fn get(&self, id: &str) -> f64 {
        self.entries.get(id).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn namespace_norm(&self, ns: &str) -> f64 {
        self.entries.iter().filter(|(k, _)| k.starts_with(ns)).map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries.values().map(|v| v * v).sum()
    }
}

/// Pixel rectangle inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Region {
    pub fn full(width: u32, height: u32) -> Self {
        Self { x: 0, y: 0, w: width, h: height }
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }

    /// Cell `index` (row-major, 0..9) of the 3x3 partition of a `width` x `height` image.
    pub fn grid_cell(width: u32, height: u32, index: usize) -> Self {
        let (row, col) = ((index / 3) as u64, (index % 3) as u64);
        let (w, h) = (width as u64, height as u64);
        let x0 = col * w / 3;
        let x1 = (col + 1) * w / 3;
        let y0 = row * h / 3;
        let y1 = (row + 1) * h / 3;
        Self { x: x0 as u32, y: y0 as u32, w: (x1 - x0) as u32, h: (y1 - y0) as u32 }
    }
}

#[derive(Debug, Deserialize)]
struct TokenizerFile {
    version: u32,
    ngram_order: u8,
    hash_bits: u32,
    stopwords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub version: u32,
    pub stopwords: BTreeSet<String>,
    pub ngram_order: u8,
    pub hash_bits: u32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::from_toml(BUILTIN_TOKENIZER).expect("builtin tokenizer config is valid")
    }
}

impl TokenizerConfig {
    pub fn from_toml(text: &str) -> Result<Self, FeatureError> {
        let file: TokenizerFile = toml::from_str(text).map_err(|e| FeatureError::Config(e.to_string()))?;
        if !(1..=2).contains(&file.ngram_order) {
            return Err(FeatureError::Config(format!("ngram_order {} not in 1..=2", file.ngram_order)));
        }
        if !(1..=32).contains(&file.hash_bits) {
            return Err(FeatureError::Config(format!("hash_bits {} not in 1..=32", file.hash_bits)));
        }
        if file.stopwords.len() > 50 {
            return Err(FeatureError::Config("more than 50 stopwords".into()));
        }
        Ok(Self {
            version: file.version,
            stopwords: file.stopwords.into_iter().map(|w| w.to_lowercase()).collect(),
            ngram_order: file.ngram_order,
            hash_bits: file.hash_bits,
        })
    }

    pub fn hash_params(&self) -> HashParams {
        HashParams { bits: self.hash_bits, ngram_order: self.ngram_order, tokenizer_version: self.version }
    }

    /// Lowercases, splits on anything that is not alphanumeric and drops stopwords.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && !self.stopwords.contains(*t))
            .map(str::to_owned)
            .collect()
    }

    fn bucket(&self, key: &str) -> u64 {
        fnv1a64(key.as_bytes()) % (1u64 << self.hash_bits)
    }

    fn add_ngrams(&self, tokens: &[String], out: &mut FeatureVector) {
        for t in tokens {
            out.add(format!("{TEXT_NS}h{}", self.bucket(t)), 1.0).expect("text namespace");
        }
        if self.ngram_order >= 2 {
            for pair in tokens.windows(2) {
                let key = format!("{} {}", pair[0], pair[1]);
                out.add(format!("{TEXT_NS}h{}", self.bucket(&key)), 1.0).expect("text namespace");
            }
        }
    }

    /// Hashed unigram and bigram counts from title and description, plus one
    /// exact `text:tag=<tag>` feature per tag. Bigrams do not span fields.
    pub fn text_features<'a>(
        &self,
        title: &str,
        description: &str,
        tags: impl IntoIterator<Item = &'a str>,
    ) -> FeatureVector {
        let mut out = FeatureVector::new().with_hash_params(self.hash_params());
        self.add_ngrams(&self.tokenize(title), &mut out);
        self.add_ngrams(&self.tokenize(description), &mut out);
        for tag in tags {
            out.add(format!("{TEXT_NS}tag={tag}"), 1.0).expect("text namespace");
        }
        out
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn histogram_bin(rgb: [u8; 3]) -> usize {
    let q = |c: u8| (c as usize * HIST_BINS as usize) / 256;
    q(rgb[0]) * 16 + q(rgb[1]) * 4 + q(rgb[2])
}

pub fn hist_feature_id(bin: usize) -> String {
    format!("{IMG_NS}hist/{bin:02}")
}

pub fn edge_feature_id(row: usize, col: usize) -> String {
    format!("{IMG_NS}edge/{row}{col}")
}

fn luminance(px: &image::Rgb<u8>) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

/// 4x4x4 RGB histogram (L1-normalized) plus a 3x3 grid of edge densities.
///
/// With `region` set, the crop is featurized as if it were a standalone image:
/// gradients clamp at the crop border and the edge grid partitions the crop.
pub fn image_features(image: &RgbImage, region: Option<Region>) -> Result<FeatureVector, FeatureError> {
    let (width, height) = image.dimensions();
    let region = region.unwrap_or(Region::full(width, height));
    if !region.fits(width, height) {
        return Err(FeatureError::RegionOutOfBounds { region, width, height });
    }
    let (w, h) = (region.w as usize, region.h as usize);
    let pixel = |x: usize, y: usize| image.get_pixel(region.x + x as u32, region.y + y as u32);

    let mut hist = [0u64; 64];
    let mut luma = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let px = pixel(x, y);
            hist[histogram_bin(px.0)] += 1;
            luma[y * w + x] = luminance(px);
        }
    }

    let mut edges = [[0u64; 3]; 3];
    let mut cell_pixels = [[0u64; 3]; 3];
    for y in 0..h {
        for x in 0..w {
            let gx = luma[y * w + (x + 1).min(w - 1)] - luma[y * w + x.saturating_sub(1)];
            let gy = luma[(y + 1).min(h - 1) * w + x] - luma[y.saturating_sub(1) * w + x];
            let (row, col) = (y * 3 / h, x * 3 / w);
            cell_pixels[row][col] += 1;
            if (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD {
                edges[row][col] += 1;
            }
        }
    }

    let total = (w * h) as f64;
    let mut out = FeatureVector::new();
    for (bin, count) in hist.iter().enumerate().filter(|(_, c)| **c > 0) {
        out.add(hist_feature_id(bin), *count as f64 / total)?;
    }
    for row in 0..3 {
        for col in 0..3 {
            if edges[row][col] > 0 {
                let density = edges[row][col] as f64 / cell_pixels[row][col] as f64;
                out.add(edge_feature_id(row, col), density)?;
            }
        }
    }
    Ok(out)
}

/// Sums the inputs and L2-normalizes every namespace independently.
///
/// The per-id sum is taken over values sorted by magnitude order, so the result
/// does not depend on the order of `vectors`.
pub fn fuse<'a>(vectors: impl IntoIterator<Item = &'a FeatureVector>) -> Result<FeatureVector, FeatureError> {
    let mut params = None;
    let mut parts: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for v in vectors {
        match (params, v.hash_params) {
            (Some(a), Some(b)) if a != b => return Err(FeatureError::HashParamConflict),
            (None, Some(b)) => params = Some(b),
            _ => {}
        }
        for (k, x) in v.iter() {
            parts.entry(k).or_default().push(x);
        }
    }

    let mut summed = BTreeMap::new();
    for (k, mut xs) in parts {
        xs.sort_by(f64::total_cmp);
        let s: f64 = xs.iter().sum();
        if s != 0.0 {
            summed.insert(k.to_owned(), s);
        }
    }

    let mut out = FeatureVector { entries: BTreeMap::new(), hash_params: params };
    for ns in NAMESPACES {
        let norm = summed.iter().filter(|(k, _)| k.starts_with(ns)).map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for (k, v) in summed.iter().filter(|(k, _)| k.starts_with(ns)) {
            out.add(k.clone(), v / norm)?;
        }
    }
    Ok(out)
}

/// Which extractors feed the document-level vector the classifier sees.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturizerConfig {
    pub tokenizer: TokenizerConfig,
    pub use_text: bool,
    pub use_images: bool,
    pub use_meshes: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self { tokenizer: TokenizerConfig::default(), use_text: true, use_images: true, use_meshes: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Featurizer {
    pub config: FeaturizerConfig,
}

impl Featurizer {
    pub fn new(config: FeaturizerConfig) -> Self {
        Self { config }
    }

    pub fn hash_params(&self) -> HashParams {
        self.config.tokenizer.hash_params()
    }

    pub fn text(&self, doc: &ThingDocument) -> FeatureVector {
        self.config.tokenizer.text_features(&doc.title, &doc.description, doc.tags.iter().map(String::as_str))
    }

    /// Full fused vector for a stored document. Missing assets or meshes are skipped.
    pub fn document(&self, doc: &ThingDocument, store: &CorpusStore) -> Result<FeatureVector, FeatureError> {
        let mut parts = Vec::new();
        if self.config.use_text {
            parts.push(self.text(doc));
        }
        if self.config.use_images {
            for asset in doc.images.iter().filter_map(|id| store.asset(id)) {
                parts.push(image_features(&asset.image, None)?);
            }
        }
        if self.config.use_meshes {
            let meshes: Vec<&TriangleMesh> =
                doc.meshes.iter().filter_map(|r| store.mesh(r)).map(|m| m.as_ref()).collect();
            if !meshes.is_empty() {
                let merged = TriangleMesh::merge(meshes.iter().copied());
                if let Ok(fv) = mesh::mesh_features(&merged) {
                    parts.push(fv);
                }
            }
        }
        let mut fused = fuse(parts.iter())?;
        if fused.hash_params.is_none() {
            fused.hash_params = Some(self.hash_params());
        }
        Ok(fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn tok() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tok().tokenize("Adult Toy v2!"), vec!["adult", "toy", "v2"]);
        assert!(tok().tokenize("").is_empty());
        assert_eq!(tok().tokenize("the model of a body"), vec!["model", "body"]);
    }

    #[test]
    fn builtin_config_is_small_and_fixed() {
        let cfg = tok();
        assert!(cfg.stopwords.len() <= 50);
        assert_eq!(cfg.hash_bits, 18);
        assert_eq!(cfg.ngram_order, 2);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tag_features_are_exact() {
        let fv = tok().text_features("", "", ["3d_scan"]);
        assert_eq!(fv.get("text:tag=3d_scan"), 1.0);
        assert_eq!(fv.len(), 1);
    }

    #[test]
    fn repeated_description_doubles_counts() {
        let once = tok().text_features("", "nude statue", []);
        let twice = tok().text_features("", "nude statue nude statue", []);
        let id = format!("text:h{}", fnv1a64(b"nude") % (1 << 18));
        assert_eq!(once.get(&id), 1.0);
        assert_eq!(twice.get(&id), 2.0);
        assert_eq!(tok().text_features("", "nude statue", []), once);
    }

    #[test]
    fn uniform_gray_histogram() {
        let img = RgbImage::from_pixel(12, 12, Rgb([128, 128, 128]));
        let fv = image_features(&img, None).unwrap();
        assert_eq!(fv.get(&hist_feature_id(histogram_bin([128, 128, 128]))), 1.0);
        assert_eq!(fv.len(), 1);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(fv.get(&edge_feature_id(r, c)), 0.0);
            }
        }
    }

    #[test]
    fn crop_out_of_bounds() {
        let img = RgbImage::new(10, 10);
        let err = image_features(&img, Some(Region { x: 5, y: 0, w: 6, h: 2 })).unwrap_err();
        assert!(matches!(err, FeatureError::RegionOutOfBounds { .. }));
        assert!(image_features(&img, Some(Region { x: 0, y: 0, w: 0, h: 2 })).is_err());
    }

    // Independent oracle: recompute edge pixels with an explicit 3x3 neighbour lookup
    // on the luminance plane, then bucket them per cell.
    fn edge_oracle(img: &RgbImage) -> [[f64; 3]; 3] {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let lum = |x: i64, y: i64| {
            let p = img.get_pixel(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32);
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        };
        let mut hits = [[0.0; 3]; 3];
        let mut counts = [[0.0; 3]; 3];
        for y in 0..h {
            for x in 0..w {
                let gx = lum(x + 1, y) - lum(x - 1, y);
                let gy = lum(x, y + 1) - lum(x, y - 1);
                let (r, c) = ((y * 3 / h) as usize, (x * 3 / w) as usize);
                counts[r][c] += 1.0;
                if gx.hypot(gy) > EDGE_THRESHOLD {
                    hits[r][c] += 1.0;
                }
            }
        }
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = hits[r][c] / counts[r][c];
            }
        }
        out
    }

    #[test]
    fn vertical_split_edges_in_center_column() {
        let img = RgbImage::from_fn(30, 30, |x, _| if x < 15 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let fv = image_features(&img, None).unwrap();
        let oracle = edge_oracle(&img);
        for (r, row) in oracle.iter().enumerate() {
            for (c, &want) in row.iter().enumerate() {
                assert_eq!(fv.get(&edge_feature_id(r, c)), want);
            }
            assert!(row[1] > 0.0);
            assert_eq!(row[0], 0.0);
            assert_eq!(row[2], 0.0);
        }
        // two edge columns out of ten in the middle third
        assert!((oracle[0][1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn grid_cells_tile_the_image() {
        for (w, h) in [(3, 3), (10, 7), (31, 64)] {
            let mut area = 0;
            for k in 0..9 {
                let r = Region::grid_cell(w, h, k);
                assert!(r.fits(w, h));
                area += r.w * r.h;
            }
            assert_eq!(area, w * h);
        }
    }

    #[test]
    fn fuse_identity_and_norms() {
        let mut v = FeatureVector::new();
        v.add("text:h1", 3.0).unwrap();
        v.add("text:h2", 4.0).unwrap();
        v.add("img:hist/00", 2.0).unwrap();
        let fused = fuse([&v, &FeatureVector::new()]).unwrap();
        assert_eq!(fused, fuse([&v]).unwrap());
        assert!((fused.get("text:h1") - 0.6).abs() < 1e-12);
        assert!((fused.namespace_norm(TEXT_NS) - 1.0).abs() < 1e-9);
        assert!((fused.namespace_norm(IMG_NS) - 1.0).abs() < 1e-9);
        assert_eq!(fused.namespace_norm(MESH_NS), 0.0);
    }

    #[test]
    fn fuse_rejects_conflicting_hash_params() {
        let a = tok().text_features("x", "", []);
        let mut other = tok();
        other.hash_bits = 10;
        let b = other.text_features("x", "", []);
        assert_eq!(fuse([&a, &b]).unwrap_err(), FeatureError::HashParamConflict);
    }

    #[test]
    fn rejects_bad_entries() {
        let mut v = FeatureVector::new();
        assert!(matches!(v.add("foo", 1.0), Err(FeatureError::UnknownNamespace(_))));
        assert!(matches!(v.add("text:x", f64::NAN), Err(FeatureError::NonFinite { .. })));
    }

    fn arb_vector() -> impl proptest::strategy::Strategy<Value = FeatureVector> {
        use proptest::prelude::*;
        proptest::collection::btree_map(
            (0usize..3, 0u32..20).prop_map(|(ns, i)| format!("{}f{}", NAMESPACES[ns], i)),
            -10.0f64..10.0,
            0..12,
        )
        .prop_map(|m| {
            let mut v = FeatureVector::new();
            for (k, x) in m {
                v.add(k, x).unwrap();
            }
            v
        })
    }

    proptest::proptest! {
        #[test]
        fn fuse_is_order_invariant(a in arb_vector(), b in arb_vector(), c in arb_vector()) {
            let abc = fuse([&a, &b, &c]).unwrap();
            let cba = fuse([&c, &b, &a]).unwrap();
            let bac = fuse([&b, &a, &c]).unwrap();
            proptest::prop_assert_eq!(&abc, &cba);
            proptest::prop_assert_eq!(&abc, &bac);
            for ns in NAMESPACES {
                let n = abc.namespace_norm(ns);
                proptest::prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
        }
    }
}
