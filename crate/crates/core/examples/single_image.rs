//! Greedy removal of a decomposition's tokens for one generated image:
//! prints the trace and writes the reference and reduced images.
//!
//! ```text
//! cargo run --release -p concept-lab --example single_image -- subject.cpsm gleeb-1024.json [seed] [tau]
//! ```

use concept_lab::conceptor::Decomposition;
use concept_lab::decomposer::{generate, single_image_decompose, RemovalOrder, DEFAULT_TAU};
use concept_lab::oracle::PooledCosine;
use concept_lab::persist::load_subject;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let subject = load_subject(args.get(1).map_or("subject.cpsm", String::as_str))?;
    let dec = Decomposition::load(args.get(2).map_or("gleeb-1024.json", String::as_str))?;
    let seed: u64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let tau: f64 = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(DEFAULT_TAU);

    let res = single_image_decompose(&subject, &dec, seed, tau, RemovalOrder::AscendingCoefficient, &PooledCosine::default())?;
    for e in &res.trace {
        let verdict = if e.removed { "removed" } else { "kept" };
        println!("pass {} {:<10} {:.4} {verdict}", e.pass_index, e.token, e.similarity);
    }
    let kept: Vec<&str> = res.surviving.iter().map(|r| r.token.as_str()).collect();
    println!("{} passes; kept {} (final similarity {:.4})", res.passes, kept.join(" "), res.final_similarity);

    let all: Vec<_> = dec.ranked.iter().map(|r| (r.token_id, r.coefficient)).collect();
    let left: Vec<_> = res.surviving.iter().map(|r| (r.token_id, r.coefficient)).collect();
    generate(&subject, &dec, &all, &[seed])?[0].save_png(format!("{}-{seed}-reference.png", dec.concept))?;
    generate(&subject, &dec, &left, &[seed])?[0].save_png(format!("{}-{seed}-reduced.png", dec.concept))?;
    Ok(())
}
