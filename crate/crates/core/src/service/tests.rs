use super::*;
use crate::consent::ConsentMetadata;
use crate::corpus::RawImageRef;
use chrono::TimeZone;
use image::{Rgb, RgbImage};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap()
}

fn raw(id: &str, title: &str, tags: &[&str]) -> RawDocument {
    RawDocument {
        id: Some(id.into()),
        title: Some(title.into()),
        description: Some(format!("{title} printable model")),
        tags: tags.iter().map(|s| s.to_string()).collect(),
        images: vec![RawImageRef::Id(format!("{id}-img"))],
        ..Default::default()
    }
}

fn consent() -> ConsentMetadata {
    ConsentMetadata {
        subject_consent: true,
        statement: Some("the subject agreed".into()),
        attested_by: Some("creator".into()),
        attested_at: Some(t0()),
    }
}

/// Tag `hot` pushes sexual/suggestive up by `strength` per unit of the tag feature.
fn tag_model(system: &System, strength: f64) -> ModelState {
    let mut m = ModelState::zero(system.featurizer().hash_params(), 0.1);
    for c in m.categories.values_mut() {
        c.bias = -2.0;
    }
    let c = m.categories.get_mut(&Category::SexualSuggestive).unwrap();
    c.weights.insert("text:tag=hot".into(), strength);
    m
}

fn system() -> System {
    let mut s = System::new(ServiceConfig::default(), t0()).unwrap();
    let docs = [
        raw("a-statue", "marble statue", &["hot"]),
        raw("b-vase", "spiral vase", &[]),
        raw("c-scan", "body statue", &["3d_scan", "hot"]),
        RawDocument { consent: Some(consent()), ..raw("d-scan", "portrait statue", &["3d_scan"]) },
        raw("e-gear", "gear statue", &[]),
    ];
    for d in docs {
        let id = d.id.clone().unwrap();
        s.ingest(d, t0()).unwrap();
        let image = RgbImage::from_pixel(12, 12, Rgb([90, 120, 30]));
        s.register_asset(MediaAsset { id: format!("{id}-img"), thing_id: id, kind: AssetKind::UserPhoto, image }, t0())
            .unwrap();
    }
    let m = tag_model(&s, 40.0);
    s.install_model(m, t0()).unwrap();
    s.register_moderator(
        ModeratorProfile { id: "mo".into(), audience_group: "staff".into() },
        Some("tok".into()),
        t0(),
    )
    .unwrap();
    s
}

fn mod_requester(s: &System) -> Requester {
    Requester::Moderator(s.moderator_for_token("tok").unwrap().clone())
}

fn ids(r: &SearchResult) -> Vec<&str> {
    r.items.iter().map(|i| i.thing.id.as_str()).collect()
}

#[test]
fn search_terms_and_gate() {
    let s = system();
    let q = SearchQuery { terms: "statue".into(), ..Default::default() };
    let end = s.search(&q, &Requester::EndUser).unwrap();
    assert_eq!(ids(&end), ["a-statue", "d-scan", "e-gear"]);
    assert_eq!(end.hidden.len(), 1);
    assert_eq!(end.hidden[0].code, ReasonCode::ConsentMissing);
    assert_eq!(end.hidden[0].count, 1);

    let modr = s.search(&q, &mod_requester(&s)).unwrap();
    assert_eq!(ids(&modr), ["a-statue", "c-scan", "d-scan", "e-gear"]);
    let c = &modr.items[1];
    assert!(c.gate.is_blocked());
    assert_eq!(c.reasons[0].code, ReasonCode::ConsentMissing);
    assert!(!c.reasons[0].text.is_empty());
    assert_eq!(modr.audience_group, "staff");
}

#[test]
fn search_flags_and_reasons() {
    let s = system();
    let r = s.search(&SearchQuery::default(), &Requester::EndUser).unwrap();
    let a = r.items.iter().find(|i| i.thing.id == "a-statue").unwrap();
    assert_eq!(a.flags, BTreeSet::from([Category::SexualSuggestive]));
    assert!(a.reasons.iter().any(|x| x.code == ReasonCode::SensitiveAboveThreshold));
    let b = r.items.iter().find(|i| i.thing.id == "b-vase").unwrap();
    assert!(b.flags.is_empty() && b.reasons.is_empty());

    let hide = SearchQuery { hide_flagged: true, ..Default::default() };
    let r = s.search(&hide, &Requester::EndUser).unwrap();
    assert!(r.items.iter().all(|i| i.flags.is_empty()));
    assert!(r.hidden.iter().any(|h| h.code == ReasonCode::SensitiveAboveThreshold));
}

#[test]
fn threshold_override_monotone_and_validated() {
    let s = system();
    let at = |t| SearchQuery { threshold_override: Some(t), ..Default::default() };
    let lo = s.search(&at(0.5), &Requester::EndUser).unwrap();
    let hi = s.search(&at(0.95), &Requester::EndUser).unwrap();
    for (l, h) in lo.items.iter().zip(&hi.items) {
        assert!(h.flags.is_subset(&l.flags));
    }
    assert_eq!(hi.applied_thresholds[&Category::Weaponry], 0.95);
    let clamped = s.search(&at(1.0), &Requester::EndUser).unwrap();
    assert_eq!(clamped.applied_thresholds[&Category::Weaponry], 0.95);
    assert!(matches!(s.search(&at(1.5), &Requester::EndUser), Err(ServiceError::BadThreshold(_))));
    assert!(matches!(s.search(&at(f64::NAN), &Requester::EndUser), Err(ServiceError::BadThreshold(_))));
    let g = SearchQuery { audience_group: Some("nobody".into()), ..Default::default() };
    assert!(matches!(s.search(&g, &Requester::EndUser), Err(ServiceError::UnknownGroup(_))));
}

#[test]
fn pagination() {
    let s = system();
    let q = |page, size| SearchQuery { page: Some(page), page_size: Some(size), ..Default::default() };
    let r = s.search(&q(2, 2), &Requester::EndUser).unwrap();
    assert_eq!(r.total, 4);
    assert_eq!(ids(&r), ["d-scan", "e-gear"]);
    assert_eq!(s.search(&q(1, 1000), &Requester::EndUser).unwrap().page_size, MAX_PAGE_SIZE);
    assert!(s.search(&q(0, 2), &Requester::EndUser).is_err());
    assert_eq!(s.search(&SearchQuery::default(), &Requester::EndUser).unwrap().page_size, DEFAULT_PAGE_SIZE);
}

#[test]
fn examples_sample() {
    let s = system();
    // only a-statue is public and above 0.5 (c-scan is consent-blocked)
    let r = s.threshold_examples(0.5, 5, 1).unwrap();
    assert_eq!(r.qualifying, 1);
    assert_eq!(r.items.len(), 1);
    let all = s.threshold_examples(0.05, 5, 3).unwrap();
    assert_eq!(all, s.threshold_examples(0.05, 5, 3).unwrap());
    let hi: BTreeSet<String> =
        s.threshold_examples(0.95, 5, 3).unwrap().items.into_iter().map(|i| i.thing.id).collect();
    let lo_set: BTreeSet<String> =
        s.threshold_examples(0.5, 5, 3).unwrap().items.into_iter().map(|i| i.thing.id).collect();
    assert!(hi.is_subset(&lo_set));
    assert!(s.threshold_examples(0.99, 5, 3).is_err());
    assert!(s.threshold_examples(0.5, 0, 3).is_err());
}

#[test]
fn explanation_contents() {
    let mut s = system();
    let e = s.explanation("b-vase", &Requester::EndUser).unwrap();
    assert!(e.rationales.is_empty() && e.reviews.is_empty());
    let p = e.prediction.unwrap();
    assert_eq!(p.regions["b-vase-img"].cells.len(), 3);

    let blocked = s.explanation("c-scan", &Requester::EndUser).unwrap();
    assert!(blocked.reasons.iter().any(|r| r.text == crate::consent::CONSENT_MISSING_EXPLANATION));

    let task = s.enqueue_thing("a-statue", t0()).unwrap().unwrap();
    s.next_task("mo", t0()).unwrap();
    let text = "Marble nude; the sculpted torso reads as explicit at thumbnail size.";
    let decision = ReviewDecision {
        task_id: task.task_id,
        moderator_id: "mo".into(),
        case: ReviewCase::MissedPart,
        selected_categories: BTreeSet::new(),
        annotations: vec![Annotation {
            asset_id: "a-statue-img".into(),
            bbox: crate::features::Region { x: 2, y: 2, w: 5, h: 5 },
            category_path: moderation::CategoryPath { top: Category::SexualSuggestive, second: None },
            level: 4,
            rationale: text.into(),
        }],
        rejected_regions: vec![],
        rationale: None,
    };
    s.submit_review(decision, t0()).unwrap();
    let e = s.explanation("a-statue", &Requester::EndUser).unwrap();
    assert_eq!(e.rationales, [text]);
    assert_eq!(e.annotations[0].annotation.level, 4);
    assert_eq!(e.reviews[0].moderator_id, None);
    let e = s.explanation("a-statue", &mod_requester(&s)).unwrap();
    assert_eq!(e.reviews[0].moderator_id.as_deref(), Some("mo"));
    assert!(matches!(s.explanation("zzz", &Requester::EndUser), Err(ServiceError::NotFound(_))));
}

#[test]
fn ingest_advisory_and_versions() {
    let mut s = system();
    let out = s.ingest(raw("f-scan", "scan", &["3D_Scan"]), t0()).unwrap();
    assert!(out.advisory.is_some());
    assert!(out.gate.is_blocked());
    let again = s.ingest(raw("f-scan", "scan", &["3D_Scan"]), t0()).unwrap();
    assert_eq!(again.status, IngestStatus::Unchanged);
    let n = s.desk().log().len();
    let fixed =
        s.ingest(RawDocument { consent: Some(consent()), ..raw("f-scan", "scan", &["3D_Scan"]) }, t0()).unwrap();
    assert_eq!(fixed.status, IngestStatus::Replaced { previous_version: 1 });
    assert_eq!(fixed.version, 2);
    assert!(fixed.advisory.is_none());
    assert_eq!(s.desk().log().len(), n + 1);
}

#[test]
fn data_dir_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("moderators.toml"),
        "[[moderators]]\nid = \"ana\"\naudience_group = \"strict\"\ntoken = \"secret\"\n",
    )
    .unwrap();
    let probs;
    let head;
    {
        let mut s = System::open(dir.path(), ServiceConfig::default(), t0()).unwrap();
        assert_eq!(s.moderator_for_token("secret").unwrap().id, "ana");
        s.ingest(raw("a", "figure", &["hot"]), t0()).unwrap();
        let image = RgbImage::from_fn(9, 9, |x, _| Rgb([x as u8 * 20, 10, 10]));
        s.register_asset(
            MediaAsset { id: "a-img".into(), thing_id: "a".into(), kind: AssetKind::RenderedPreview, image },
            t0(),
        )
        .unwrap();
        let cube = TriangleMesh::from_facets(&mesh::box_facets([0.0; 3], [1.0; 3])).unwrap();
        s.register_mesh("parts/cube one.stl", cube, t0()).unwrap();
        s.ingest(RawDocument { meshes: vec!["parts/cube one.stl".into()], ..raw("a", "figure", &["hot"]) }, t0())
            .unwrap();
        let m = tag_model(&s, 3.0);
        s.install_model(m, t0()).unwrap();
        probs = s.probabilities("a").unwrap();
        head = s.desk().log().head_hash().to_owned();
        assert!(dir.path().join("model.json").exists());
    }
    let s = System::open(dir.path(), ServiceConfig::default(), t0()).unwrap();
    assert_eq!(s.probabilities("a").unwrap(), probs);
    assert_eq!(s.store().get("a").unwrap().version, 2);
    assert!(s.features("a").unwrap().get("mesh:components") > 0.0);
    // reopening only re-registered the already known moderator, so nothing was appended
    assert_eq!(s.desk().log().head_hash(), head);

    std::fs::write(dir.path().join("assets").join("a-img.png"), b"garbage").unwrap();
    assert!(System::open(dir.path(), ServiceConfig::default(), t0()).is_err());
}

#[test]
fn error_codes() {
    assert_eq!(ServiceError::from(ModerationError::QueueEmpty).code(), "QUEUE_EMPTY");
    assert_eq!(ServiceError::BadThreshold(2.0).code(), "BAD_THRESHOLD");
    assert_eq!(ServiceError::from(CorpusError::MissingId).code(), "MISSING_ID");
    assert_eq!(file_stem("abc-1.png"), "abc-1.png");
    assert!(file_stem("../etc").starts_with('x'));
    assert!(file_stem("a b").starts_with('x'));
}
