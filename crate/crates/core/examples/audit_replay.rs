//! Write the audit log of a short simulation to disk, read it back, verify the
//! hash chain, and rebuild moderation state from it.

use hitl3d::moderation::audit;
use hitl3d::moderation::Desk;
use hitl3d::simulation::{self, RunConfig, SimClock};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = simulation::generate_corpus(3, 150, 150);
    let population = simulation::mixed(0.2, 0.8);
    let run = RunConfig { rounds: 30, rng_seed: 3, ..RunConfig::default() };
    let mut clock = SimClock::default();
    let mut system = simulation::build_system(&corpus, &population, &run, &mut clock)?;
    simulation::run_rounds(&mut system, &corpus, &population, &run, &mut clock)?;

    let path = std::env::temp_dir().join(format!("hitl3d-audit-{}.log", std::process::id()));
    system.write_audit_file(&path)?;
    let events = audit::read_file(&path)?;
    println!("{} events, head {}", events.len(), &events.last().expect("non-empty").hash[..16]);
    audit::verify_chain(&events)?;

    let replayed = Desk::replay(&events)?;
    let live = system.desk();
    let same_model = replayed.model().map(|m| m.to_json()) == live.model().map(|m| m.to_json());
    println!("model identical after replay:      {same_model}");
    println!("thresholds identical after replay: {}", replayed.profiles() == live.profiles());

    let mut tampered = events.clone();
    tampered[5].hash = "0".repeat(64);
    println!("tampered log rejected: {}", audit::verify_chain(&tampered).is_err());
    std::fs::remove_file(path)?;
    Ok(())
}
