//! One thing, two moderators from different audience groups, and what their
//! disagreement does to thresholds and to the model.

use hitl3d::classifier::Category;
use hitl3d::features::Region;
use hitl3d::moderation::{Annotation, CategoryPath, ModeratorProfile, RejectedRegion, ReviewCase, ReviewDecision};
use hitl3d::service::Requester;
use hitl3d::simulation::{self, RunConfig, SimClock};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = simulation::generate_corpus(9, 40, 40);
    let run = RunConfig { rng_seed: 9, ..RunConfig::default() };
    let mut clock = SimClock::default();
    let mut system = simulation::build_system(&corpus, &simulation::mixed(0.2, 0.8), &run, &mut clock)?;

    let thing = corpus.things.iter().find(|t| t.is_positive()).expect("corpus has positives");
    let task = system.enqueue_thing(thing.id(), clock.tick())?.expect("positive things clear the floor");
    println!(
        "queued {} for {} (p = {:.3})",
        task.task_id,
        task.thing_id,
        task.prediction.probability(Category::SexualSuggestive)
    );

    // strict reviewer: the model was right; the annotation says where
    let leased = system.next_task("s1", clock.tick())?;
    let cell = thing.signature_cell.expect("positives carry a signature");
    let strict = ReviewDecision {
        task_id: leased.task_id.clone(),
        moderator_id: "s1".into(),
        case: ReviewCase::AgreeFinalize,
        selected_categories: [Category::SexualSuggestive].into(),
        annotations: vec![Annotation {
            asset_id: thing.asset_id.clone(),
            bbox: Region::grid_cell(thing.image.width(), thing.image.height(), cell),
            category_path: CategoryPath { top: Category::SexualSuggestive, second: Some("suggestive".into()) },
            level: 4,
            rationale: "pin-up pose, clearly adult".into(),
        }],
        rejected_regions: vec![],
        rationale: None,
    };
    println!("\nstrict decision:\n{}", serde_json::to_string_pretty(&strict)?);
    let out = system.submit_review(strict, clock.tick())?;
    println!("-> {} examples, task now {:?}", out.examples_emitted, out.task.state);

    // permissive reviewer: acceptable for this audience
    let leased = system.next_task("p1", clock.tick())?;
    let lenient = ReviewDecision {
        task_id: leased.task_id.clone(),
        moderator_id: "p1".into(),
        case: ReviewCase::RejectDetection,
        selected_categories: Default::default(),
        annotations: vec![],
        rejected_regions: vec![RejectedRegion {
            asset_id: thing.asset_id.clone(),
            cell,
            category: Category::SexualSuggestive,
        }],
        rationale: Some("artistic figure, fine for our members".into()),
    };
    let out = system.submit_review(lenient, clock.tick())?;
    println!("-> {} examples, task now {:?}", out.examples_emitted, out.task.state);
    for d in &out.disagreements {
        println!("disagreement on {}: level {} raises `{}`", d.category, d.level(), d.rejecting.audience_group);
    }

    for (group, profile) in system.thresholds() {
        println!("θ[{group}] = {:.2}", profile.threshold(Category::SexualSuggestive));
    }
    let before = system.model()?.version;
    let after = system.retrain(clock.tick())?;
    println!("model v{before} -> {after:?}");

    let staff = ModeratorProfile { id: "s1".into(), audience_group: "strict".into() };
    let explanation = system.explanation(thing.id(), &Requester::Moderator(staff))?;
    println!("\nrationales on record: {:?}", explanation.rationales);
    Ok(())
}
