//! Threshold dynamics for a homogeneous and a mixed moderator population.
//!
//! ```text
//! cargo run --release --example simulate -- 100 42
//! ```

use hitl3d::classifier::Category;
use hitl3d::simulation::{self, RunConfig, SimClock, SimModerator};

fn run(name: &str, population: &[SimModerator], rounds: usize, seed: u64) -> Result<(), Box<dyn std::error::Error>> {
    let corpus = simulation::generate_corpus(seed, 1077, 1077);
    let run = RunConfig { rounds, rng_seed: seed, ..RunConfig::default() };
    let mut clock = SimClock::default();
    let mut system = simulation::build_system(&corpus, population, &run, &mut clock)?;
    let metrics = simulation::run_rounds(&mut system, &corpus, population, &run, &mut clock)?;
    let last = metrics.last().expect("round 0 is always present");
    println!(
        "{name}: {} disagreements, model v{}, accuracy {:.3}",
        last.cumulative_disagreements, last.model_version, last.accuracy
    );
    let mut groups: Vec<&str> = population.iter().map(|m| m.audience_group.as_str()).collect();
    groups.dedup();
    for g in groups {
        let t = metrics.threshold_trajectory(g, Category::SexualSuggestive);
        let every = (t.len() / 10).max(1);
        let sampled: Vec<String> = t.iter().step_by(every).map(|x| format!("{x:.2}")).collect();
        println!("  θ[{g}] {}", sampled.join(" "));
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let rounds = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(42);
    run("homogeneous", &simulation::homogeneous(0.5), rounds, seed)?;
    run("mixed", &simulation::mixed(0.2, 0.8), rounds, seed)?;
    Ok(())
}
