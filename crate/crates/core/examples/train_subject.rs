//! Trains the toy subject model on the default concept suite and saves a
//! checkpoint.
//!
//! ```text
//! cargo run --release -p concept-lab --example train_subject -- [out.cpsm] [steps]
//! ```

use std::time::Instant;

use concept_lab::concepts::ConceptSuite;
use concept_lab::persist::save_subject;
use concept_lab::subject::train::{train_toy_subject, SubjectTrainConfig};
use concept_lab::subject::vocab::VocabConfig;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "subject.cpsm".into());
    let mut config = SubjectTrainConfig::default();
    if let Some(steps) = args.next() {
        config.steps = steps.parse()?;
    }
    println!("training for {} steps", config.steps);
    let start = Instant::now();
    let trained = train_toy_subject(&ConceptSuite::default_suite(), &VocabConfig::default(), &config, |step, loss| {
        println!("step {step:>6}  loss {loss:.5}  {:.1}s", start.elapsed().as_secs_f64());
    })?;
    save_subject(&trained.subject, &out)?;
    println!("saved {out} (weights {})", trained.subject.weights_hash());
    Ok(())
}
