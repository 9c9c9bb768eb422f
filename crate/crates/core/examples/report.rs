//! Collects saved decompositions into a study report with tables and plots.
//!
//! ```text
//! cargo run --release -p concept-lab --example report -- subject.cpsm out_dir gleeb-1024.json [more.json ...]
//! ```

use std::collections::BTreeMap;

use concept_lab::analysis::report::{emit_report, DecompositionSummary, StudyReport};
use concept_lab::analysis::robustness::intersection_report;
use concept_lab::conceptor::Decomposition;
use concept_lab::persist::load_subject;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 4 {
        anyhow::bail!("usage: report subject.cpsm out_dir decomposition.json...");
    }
    let subject = load_subject(&args[1])?;
    let mut report = StudyReport::new(subject.weights_hash(), subject.vocab_hash());
    let mut by_concept: BTreeMap<String, Vec<Decomposition>> = BTreeMap::new();
    for path in &args[3..] {
        let dec = Decomposition::load(path)?;
        dec.verify_against(&subject)?;
        report.decompositions.push(DecompositionSummary::of(&dec)?);
        report.seeds.entry("decomposition".into()).or_default().push(dec.seed);
        by_concept.entry(dec.concept.clone()).or_default().push(dec);
    }
    // runs of the same concept are compared as a robustness study
    for decs in by_concept.values().filter(|d| d.len() >= 2) {
        let k = decs.iter().map(|d| d.ranked.len()).min().unwrap_or(0).min(3);
        report.robustness.push(intersection_report(decs, &[k])?);
    }
    report.refresh_summary();
    for path in emit_report(&report, &args[2])? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
