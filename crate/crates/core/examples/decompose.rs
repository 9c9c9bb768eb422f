//! Learns a decomposition of one concept and prints its ranked tokens.
//!
//! ```text
//! cargo run --release -p concept-lab --example decompose -- subject.cpsm gleeb [seed] [lambda]
//! ```

use std::time::Instant;

use concept_lab::conceptor::{decompose, DecompositionConfig};
use concept_lab::oracle::PooledCosine;
use concept_lab::persist::load_subject;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "subject.cpsm".into());
    let concept = args.next().unwrap_or_else(|| "gleeb".into());
    let mut config = DecompositionConfig::default();
    if let Some(seed) = args.next() {
        config.seed = seed.parse()?;
    }
    if let Some(lambda) = args.next() {
        config.lambda_sparsity = lambda.parse()?;
    }
    let subject = load_subject(&ckpt)?;

    let start = Instant::now();
    let dec = decompose(&subject, &concept, &config, &PooledCosine::default(), &mut |step, total| {
        if step % 100 == 0 {
            println!("step {step}/{total}  {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    for v in &dec.training_log.validations {
        println!("validation at step {:>3}: {:.4}", v.step, v.score);
    }
    println!("selected step {}", dec.training_log.selected_step);
    for (rank, r) in dec.ranked.iter().enumerate() {
        println!("{:>2} {:<10} {:.5}", rank + 1, r.token, r.coefficient);
    }
    let out = format!("{concept}-{}.json", config.seed);
    dec.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
