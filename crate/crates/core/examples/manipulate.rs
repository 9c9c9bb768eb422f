//! Scales one token's coefficient from 0 to 2 and writes a grid of the
//! edited images (one row per scale), then writes a debiased copy of the
//! decomposition with that token at half strength.
//!
//! ```text
//! cargo run --release -p concept-lab --example manipulate -- subject.cpsm gleeb-1024.json [rank]
//! ```

use concept_lab::analysis::sweep::{default_scales, manipulation_sweep};
use concept_lab::conceptor::Decomposition;
use concept_lab::decomposer::debias;
use concept_lab::image::Image;
use concept_lab::oracle::PooledCosine;
use concept_lab::persist::load_subject;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let subject = load_subject(args.get(1).map_or("subject.cpsm", String::as_str))?;
    let dec = Decomposition::load(args.get(2).map_or("gleeb-1024.json", String::as_str))?;
    let rank: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let token = dec.ranked.get(rank - 1).ok_or_else(|| anyhow::anyhow!("rank {rank} outside 1..={}", dec.ranked.len()))?;

    let seeds = [0, 1, 2, 3];
    let (sweep, images) = manipulation_sweep(&subject, &dec, token.token_id, &default_scales(), &seeds, &PooledCosine::default())?;
    for (s, sim) in sweep.scales.iter().zip(&sweep.similarity) {
        println!("{} x {s:.2}: similarity to unedited {sim:.4}", sweep.token);
    }
    let rows: Vec<Image> = images.into_iter().flatten().collect();
    let grid = format!("{}-{}-sweep.png", dec.concept, sweep.token);
    Image::grid(&rows, seeds.len())?.save_png(&grid)?;
    println!("wrote {grid}");

    let half = debias(&subject, &dec, &[token.token_id], 0.5)?;
    let out = format!("{}-without-half-{}.json", dec.concept, sweep.token);
    half.save(&out)?;
    println!("wrote {out} ({})", half.content_id()?);
    Ok(())
}
