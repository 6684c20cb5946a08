//! Turn a thing (text plus a preview image) into a hashed sparse feature vector.

use chrono::Utc;
use hitl3d::corpus::{AssetKind, CorpusStore, MediaAsset, RawDocument, RawImageRef};
use hitl3d::features::{self, Featurizer, Region, IMG_NS, TEXT_NS};
use image::{Rgb, RgbImage};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = RawDocument {
        id: Some("demo".into()),
        title: Some("Articulated dragon".into()),
        description: Some("Print-in-place dragon, no supports needed".into()),
        tags: vec!["Dragon".into(), "print_in_place".into()],
        images: vec![RawImageRef::Id("demo-1".into())],
        ..Default::default()
    };
    let mut store = CorpusStore::new();
    let (doc, _) = store.ingest(raw, Utc::now())?;
    let image =
        RgbImage::from_fn(24, 24, |x, y| if x < 12 && y < 12 { Rgb([220, 170, 140]) } else { Rgb([40, 90, 200]) });
    store.add_asset(MediaAsset {
        id: "demo-1".into(),
        thing_id: "demo".into(),
        kind: AssetKind::RenderedPreview,
        image: image.clone(),
    })?;

    let featurizer = Featurizer::default();
    println!("tokens: {:?}", featurizer.config.tokenizer.tokenize(&doc.description));
    let fv = featurizer.document(&doc, &store)?;
    println!("features: {}", fv.len());
    for ns in [TEXT_NS, IMG_NS] {
        println!("  {ns:<6} norm {:.3}", fv.namespace_norm(ns));
    }

    let corner = features::image_features(&image, Some(Region::grid_cell(24, 24, 0)))?;
    let mut top: Vec<(&str, f64)> = corner.iter().collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("top-left cell, strongest features:");
    for (id, w) in top.iter().take(5) {
        println!("  {id:<16} {w:.3}");
    }
    Ok(())
}
