//! How the consent gate treats scan-tagged designs, and what search shows.

use chrono::Utc;
use hitl3d::consent::{ConsentMetadata, ConsentPolicy};
use hitl3d::corpus::{normalize, RawDocument};
use hitl3d::moderation::ModeratorProfile;
use hitl3d::service::{Requester, SearchQuery, ServiceConfig, System};

fn doc(id: &str, tags: &[&str], consent: Option<ConsentMetadata>) -> RawDocument {
    RawDocument {
        id: Some(id.into()),
        title: Some(format!("bust {id}")),
        description: Some("head and shoulders bust".into()),
        tags: tags.iter().map(|t| t.to_string()).collect(),
        consent,
        ..Default::default()
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let now = Utc::now();
    let consented = ConsentMetadata {
        subject_consent: true,
        statement: Some("Subject agreed to publication".into()),
        attested_by: Some("uploader".into()),
        attested_at: Some(now),
    };
    let docs = [
        doc("scan-no-consent", &["3D_Scan", "bust"], None),
        doc("scan-consented", &["3d_scan"], Some(consented)),
        doc("sculpt", &["bust"], None),
    ];

    let policy = ConsentPolicy::default();
    for raw in &docs {
        let d = normalize(raw.clone(), now)?;
        println!("{:<16} {}", d.id, serde_json::to_string(&policy.evaluate_gate(&d))?);
    }

    let mut system = System::new(ServiceConfig::default(), now)?;
    for raw in docs {
        let out = system.ingest(raw, now)?;
        if let Some(advice) = out.advisory {
            println!("\nadvisory for {}: {advice}", out.id);
        }
    }
    let staff = ModeratorProfile { id: "mod".into(), audience_group: "staff".into() };
    system.register_moderator(staff.clone(), None, now)?;

    let query = SearchQuery { terms: "bust".into(), ..Default::default() };
    let ids = |who: &Requester| -> Result<Vec<String>, Box<dyn std::error::Error>> {
        Ok(system.search(&query, who)?.items.into_iter().map(|i| i.thing.id).collect())
    };
    println!("\nend user sees:  {:?}", ids(&Requester::EndUser)?);
    println!("moderator sees: {:?}", ids(&Requester::Moderator(staff.clone()))?);
    Ok(())
}
