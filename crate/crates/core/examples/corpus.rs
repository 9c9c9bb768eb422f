//! Renders the synthetic concept suite and writes its manifest, which is
//! enough to regenerate every image.
//!
//! ```text
//! cargo run --release -p concept-lab --example corpus -- [out_dir] [per_concept] [seed]
//! ```

use concept_lab::concepts::{build_corpus, ConceptSuite, CorpusManifest};
use concept_lab::image::Image;
use concept_lab::persist::save_json;
use concept_lab::subject::vocab::{VocabConfig, Vocabulary};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let per_concept: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let suite = ConceptSuite::default_suite();
    let vocab = Vocabulary::toy(&suite, &VocabConfig::default())?;
    let specs = suite.specs(&vocab)?;
    let samples = build_corpus(&specs, per_concept, seed)?;
    std::fs::create_dir_all(&out)?;
    for spec in &specs {
        let images: Vec<Image> = samples.iter().filter(|s| s.concept_token_id == spec.concept_token_id()).map(|s| s.pixels.clone()).collect();
        Image::grid(&images, per_concept.min(8))?.save_png(out.join(format!("{}.png", spec.name())))?;
        let atoms: Vec<&str> = spec.composition().attributes().iter().map(|a| a.name()).collect();
        println!("{:<6} {}", spec.name(), atoms.join(" "));
    }
    save_json(out.join("manifest.json"), &CorpusManifest::new(&suite, per_concept, seed))?;
    println!("wrote {} images to {}", samples.len(), out.display());
    Ok(())
}
