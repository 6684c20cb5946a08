//! Train the seed model on a synthetic corpus and report held-out quality.
//!
//! ```text
//! cargo run --release --example seed_training -- 42
//! ```

use std::time::Instant;

use hitl3d::simulation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(42);
    let corpus = simulation::generate_corpus(seed, 1077, 1077);
    let start = Instant::now();
    let report = simulation::seed_holdout(&corpus, seed, 5, 0.2)?;
    println!("train {} / test {}", report.train, report.test);
    println!("accuracy {:.4}", report.accuracy);
    println!("auc      {:.4}", report.auc);
    println!("elapsed  {:.2?}", start.elapsed());
    Ok(())
}
