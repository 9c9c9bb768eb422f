//! Fits PCA, NMF and k-means bases to a concept's hidden activations and
//! compares basis-constrained samples with unmodified ones.
//!
//! ```text
//! cargo run --release -p concept-lab --example baselines -- subject.cpsm gleeb [n_components]
//! ```

use concept_lab::analysis::baselines::{fit_activation_basis, sample_with_basis, BasisConfig, BasisMethod};
use concept_lab::conceptor::{concept_images, paired_similarity};
use concept_lab::image::Image;
use concept_lab::oracle::PooledCosine;
use concept_lab::persist::load_subject;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let subject = load_subject(args.get(1).map_or("subject.cpsm", String::as_str))?;
    let concept = args.get(2).map_or("gleeb", String::as_str);
    let n: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(8);

    let token = subject.vocab().id(concept)?;
    let cond = subject.token_cond(token)?;
    let seeds = [0, 1, 2, 3];
    let config = BasisConfig { n_components: n, ..BasisConfig::default() };
    let plain = concept_images(&subject, token, &seeds, config.guidance, None)?;
    let mut rows = plain.clone();
    for method in [BasisMethod::Pca, BasisMethod::Nmf, BasisMethod::Kmeans] {
        let basis = fit_activation_basis(&subject, concept, &BasisConfig { method, ..config.clone() })?;
        let images = sample_with_basis(&subject, cond.view(), &basis, &seeds, config.guidance)?;
        let sim = paired_similarity(&PooledCosine::default(), &images, &plain)?;
        // NMF fits the activations with negatives clipped, so its error is
        // not on the same target as the other two
        let target = if method == BasisMethod::Nmf { " (clipped)" } else { "" };
        println!(
            "{:<7} {n} components: fit error{target} {:.3e}, similarity to unmodified {sim:.4}",
            method.name(),
            basis.meta.error
        );
        for w in &basis.meta.warnings {
            println!("  warning: {w}");
        }
        rows.extend(images);
    }
    let out = format!("{concept}-baselines.png");
    Image::grid(&rows, seeds.len())?.save_png(&out)?;
    println!("wrote {out} (rows: unmodified, PCA, NMF, k-means)");
    Ok(())
}
