//! Decomposes one concept under several seeds and reports how much the
//! top-k tokens of the first run overlap with the others.
//!
//! ```text
//! cargo run --release -p concept-lab --example robustness -- subject.cpsm gleeb [runs]
//! ```

use concept_lab::analysis::robustness::{robustness_study, TOY_KS};
use concept_lab::conceptor::DecompositionConfig;
use concept_lab::oracle::PooledCosine;
use concept_lab::persist::load_subject;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let subject = load_subject(args.get(1).map_or("subject.cpsm", String::as_str))?;
    let concept = args.get(2).map_or("gleeb", String::as_str);
    let runs: u64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let seeds: Vec<u64> = (0..runs).map(|i| 1024 + i).collect();

    let config = DecompositionConfig::default();
    let (report, _) = robustness_study(&subject, concept, &seeds, &config, &TOY_KS, &PooledCosine::default(), &mut |step, total| {
        if step % 250 == 0 {
            eprintln!("{step}/{total}");
        }
    })?;
    for run in &report.runs {
        println!("seed {}: {}", run.seed, run.tokens.join(" "));
    }
    for k in &report.per_k {
        println!("k = {}: intersections {:?}, mean {:.2} ({:.0}%)", k.k, k.counts, k.mean, 100.0 * k.fraction);
    }
    Ok(())
}
