//! Held-out denoising loss of a decomposition's pseudo-token against the
//! concept token, an unconstrained optimized vector and a random token.
//!
//! ```text
//! cargo run --release -p concept-lab --example generalization -- subject.cpsm gleeb-1024.json [test_images]
//! ```

use concept_lab::analysis::generalization::{run_generalization, GeneralizationConfig};
use concept_lab::conceptor::Decomposition;
use concept_lab::persist::load_subject;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let subject = load_subject(args.get(1).map_or("subject.cpsm", String::as_str))?;
    let dec = Decomposition::load(args.get(2).map_or("gleeb-1024.json", String::as_str))?;
    let mut config = GeneralizationConfig::default();
    if let Some(n) = args.get(3) {
        config.test_images = n.parse()?;
    }
    let (curve, w_o) = run_generalization(&subject, &dec, &config, &mut |_, _| {})?;
    println!("w_o final training loss {:.5}", w_o.losses.last().copied().unwrap_or(f64::NAN));
    println!("random token: {}", subject.vocab().token(curve.random_token));
    for c in &curve.curves {
        println!("{:<8} normalized {:+.5} ± {:.5}", c.name, c.overall_mean, c.overall_stderr);
    }
    for t in [1, 10, 25, 50, 75, 100] {
        let row: Vec<String> = curve.curves.iter().map(|c| format!("{:+.4}", c.mean[t - 1])).collect();
        println!("t={t:>3} {}", row.join(" "));
    }
    Ok(())
}
