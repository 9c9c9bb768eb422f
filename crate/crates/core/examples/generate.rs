//! Samples every concept of the default suite from a saved subject and
//! writes one grid per prompt kind.
//!
//! ```text
//! cargo run --release -p concept-lab --example generate -- subject.cpsm [out_dir] [guidance]
//! ```

use concept_lab::concepts::ConceptSuite;
use concept_lab::image::Image;
use concept_lab::persist::load_subject;
use concept_lab::subject::{encode_prompt, Prompt};
use ndarray::Array2;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "subject.cpsm".into());
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| ".".into()));
    let guidance: f64 = args.next().map(|g| g.parse()).transpose()?.unwrap_or(3.0);
    let subject = load_subject(&ckpt)?;
    let vocab = subject.vocab();
    let suite = ConceptSuite::default_suite();
    let seeds: Vec<u64> = (0..6).collect();
    let steps = subject.schedule().steps();

    let mut by_token = Vec::new();
    let mut by_atoms = Vec::new();
    for spec in suite.specs(vocab)? {
        let token = subject.token_cond(spec.concept_token_id())?;
        by_token.extend(subject.sample_seeds(token.view(), &seeds, guidance, steps)?);
        let mut ids = vec![vocab.template_id()];
        ids.extend(spec.atom_token_ids());
        let atoms = encode_prompt(vocab, &Prompt::new(ids))?;
        by_atoms.extend(subject.sample_seeds(atoms.view(), &seeds, guidance, steps)?);
        println!("sampled {}", spec.name());
    }
    std::fs::create_dir_all(&out)?;
    Image::grid(&by_token, seeds.len())?.save_png(out.join("concept_tokens.png"))?;
    Image::grid(&by_atoms, seeds.len())?.save_png(out.join("attribute_prompts.png"))?;

    let null = subject.unconditional()?;
    let conds = Array2::from_shape_fn((seeds.len(), null.len()), |(_, j)| null[j]);
    let uncond = subject.sample_conditioned(conds.view(), &seeds, 1.0, steps)?;
    Image::grid(&uncond, seeds.len())?.save_png(out.join("unconditional.png"))?;
    println!("wrote grids to {}", out.display());
    Ok(())
}
