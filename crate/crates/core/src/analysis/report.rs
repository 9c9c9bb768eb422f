//! Study results on disk: `report.json`, CSV tables and PNG plots.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::baselines::BasisMethod;
use crate::analysis::generalization::GeneralizationCurve;
use crate::analysis::robustness::{summarize, IntersectionReport, KSummary};
use crate::analysis::sweep::ManipulationSweep;
use crate::conceptor::{Decomposition, RankedToken, TrainingLog};
use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::persist::{save_json, write_atomic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSummary {
    pub concept: String,
    pub decomposition_id: String,
    pub seed: u64,
    pub lambda_sparsity: f64,
    pub ranked: Vec<RankedToken>,
    pub training_log: TrainingLog,
}

impl DecompositionSummary {
    pub fn of(dec: &Decomposition) -> Result<Self> {
        Ok(Self {
            concept: dec.concept.clone(),
            decomposition_id: dec.content_id()?,
            seed: dec.seed,
            lambda_sparsity: dec.lambda_sparsity,
            ranked: dec.ranked.clone(),
            training_log: dec.training_log.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub concept: String,
    pub method: BasisMethod,
    pub n_components: usize,
    pub fit_error: f64,
    /// Mean oracle similarity between basis-constrained and unmodified
    /// samples at the same seeds.
    pub similarity_to_unmodified: f64,
    pub seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Everything a study produced. Sections may be empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub subject_hash: String,
    pub vocab_hash: String,
    /// Every seed the study used, by purpose.
    pub seeds: std::collections::BTreeMap<String, Vec<u64>>,
    pub decompositions: Vec<DecompositionSummary>,
    pub robustness: Vec<IntersectionReport>,
    pub robustness_summary: Vec<KSummary>,
    pub generalization: Vec<GeneralizationCurve>,
    pub baselines: Vec<BaselineSummary>,
    pub sweeps: Vec<ManipulationSweep>,
}

impl StudyReport {
    pub fn new(subject_hash: &str, vocab_hash: &str) -> Self {
        Self {
            subject_hash: subject_hash.to_string(),
            vocab_hash: vocab_hash.to_string(),
            ..Default::default()
        }
    }

    /// Recomputes the cross-concept robustness summary.
    pub fn refresh_summary(&mut self) {
        self.robustness_summary = summarize(&self.robustness);
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn generalization_table(curve: &GeneralizationCurve) -> Result<Vec<u8>> {
    let mut header = vec!["t".to_string()];
    for c in &curve.curves {
        header.push(format!("{}_mean", c.name));
        header.push(format!("{}_stderr", c.name));
    }
    header.push("random_raw".into());
    let rows = (0..curve.steps())
        .map(|i| {
            let mut r = vec![(i + 1).to_string()];
            for c in &curve.curves {
                r.push(c.mean[i].to_string());
                r.push(c.stderr[i].to_string());
            }
            r.push(curve.random_raw[i].to_string());
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(&header, rows)
}

const PLOT_SIZE: (u32, u32) = (480, 320);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let (lo, hi) = if lo.is_finite() && hi.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad)..(hi + pad)
}

/// Line plot of several series; no text, series colors follow the CSV
/// column order.
fn line_plot(series: &[Vec<(f64, f64)>], zero_line: bool) -> Result<Vec<u8>> {
    let (w, h) = PLOT_SIZE;
    let mut buf = vec![255u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        let pts = series.iter().flatten();
        let (x0, x1) = pts.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (mut y0, mut y1) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        if zero_line {
            y0 = y0.min(0.0);
            y1 = y1.max(0.0);
        }
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .build_cartesian_2d(padded(x0, x1), padded(y0, y1))
            .map_err(plot_err)?;
        let area = chart.plotting_area();
        let (xr, yr) = (area.get_x_range(), area.get_y_range());
        area.draw(&Rectangle::new([(xr.start, yr.start), (xr.end, yr.end)], BLACK.stroke_width(1)))
            .map_err(plot_err)?;
        if zero_line {
            chart
                .draw_series(LineSeries::new([(xr.start, 0.0), (xr.end, 0.0)], RGBColor(160, 160, 160)))
                .map_err(plot_err)?;
        }
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart.draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2))).map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Image::from_u8(ImageShape::new(h as usize, w as usize, 3), &buf)?.encode_png()
}

/// Grouped bars: one group per entry of `groups`, one bar per value.
fn bar_plot(groups: &[Vec<f64>]) -> Result<Vec<u8>> {
    let (w, h) = PLOT_SIZE;
    let mut buf = vec![255u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        let per = groups.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let top = groups.iter().flatten().fold(0.0f64, |a, &b| a.max(b)).max(1e-9);
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .build_cartesian_2d(0.0..(groups.len() * (per + 1)) as f64, 0.0..top * 1.05)
            .map_err(plot_err)?;
        let area = chart.plotting_area();
        let (xr, yr) = (area.get_x_range(), area.get_y_range());
        area.draw(&Rectangle::new([(xr.start, yr.start), (xr.end, yr.end)], BLACK.stroke_width(1)))
            .map_err(plot_err)?;
        for (g, vals) in groups.iter().enumerate() {
            let base = (g * (per + 1)) as f64 + 0.5;
            chart
                .draw_series(vals.iter().enumerate().map(|(i, &v)| {
                    let x = base + i as f64;
                    Rectangle::new([(x, 0.0), (x + 0.9, v)], PALETTE[i % PALETTE.len()].filled())
                }))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Image::from_u8(ImageShape::new(h as usize, w as usize, 3), &buf)?.encode_png()
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `report.json`, `tables/*.csv` and `plots/*.png` under `out_dir`;
/// returns the written paths in order. Re-emitting the same report gives
/// byte-identical files.
pub fn emit_report(report: &StudyReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out.join("tables"))?;
    std::fs::create_dir_all(out.join("plots"))?;
    let mut written = Vec::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(rel);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };

    let json = out.join("report.json");
    save_json(&json, report)?;
    let mut files = vec![json];

    if !report.decompositions.is_empty() {
        let rows = report
            .decompositions
            .iter()
            .flat_map(|d| {
                d.ranked.iter().enumerate().map(move |(i, r)| {
                    vec![
                        d.concept.clone(),
                        d.seed.to_string(),
                        d.lambda_sparsity.to_string(),
                        (i + 1).to_string(),
                        r.token_id.to_string(),
                        r.token.clone(),
                        r.coefficient.to_string(),
                    ]
                })
            })
            .collect();
        put(
            "tables/decompositions.csv".into(),
            csv_bytes(&["concept", "seed", "lambda_sparsity", "rank", "token_id", "token", "coefficient"], rows)?,
        )?;
        for d in &report.decompositions {
            let name = format!("{}_{}", slug(&d.concept), d.seed);
            let log = &d.training_log;
            let rows = log
                .steps
                .iter()
                .map(|s| vec![s.step.to_string(), s.reconstruction.to_string(), s.sparsity.to_string(), s.total.to_string()])
                .collect();
            put(format!("tables/loss_{name}.csv"), csv_bytes(&["step", "reconstruction", "sparsity", "total"], rows)?)?;
            let total: Vec<(f64, f64)> = log.steps.iter().map(|s| (s.step as f64, s.total)).collect();
            let rec: Vec<(f64, f64)> = log.steps.iter().map(|s| (s.step as f64, s.reconstruction)).collect();
            if !total.is_empty() {
                put(format!("plots/loss_{name}.png"), line_plot(&[total, rec], false)?)?;
            }
        }
    }

    if !report.robustness.is_empty() {
        let rows = report
            .robustness
            .iter()
            .flat_map(|r| {
                r.per_k.iter().map(move |p| {
                    let counts: Vec<String> = p.counts.iter().map(usize::to_string).collect();
                    vec![r.concept.clone(), p.k.to_string(), p.mean.to_string(), p.fraction.to_string(), counts.join(" ")]
                })
            })
            .collect();
        put("tables/intersections.csv".into(), csv_bytes(&["concept", "k", "mean", "fraction", "counts"], rows)?)?;
        let rows = report
            .robustness_summary
            .iter()
            .map(|s| vec![s.k.to_string(), s.mean.to_string(), s.fraction.to_string(), s.std_across_concepts.to_string()])
            .collect();
        put("tables/intersection_summary.csv".into(), csv_bytes(&["k", "mean", "fraction", "std_across_concepts"], rows)?)?;
        let groups: Vec<Vec<f64>> = report.robustness.iter().map(|r| r.per_k.iter().map(|p| p.fraction).collect()).collect();
        put("plots/intersections.png".into(), bar_plot(&groups)?)?;
    }

    for g in &report.generalization {
        let name = slug(&g.concept);
        put(format!("tables/generalization_{name}.csv"), generalization_table(g)?)?;
        let series: Vec<Vec<(f64, f64)>> = g
            .curves
            .iter()
            .map(|c| c.mean.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect())
            .collect();
        put(format!("plots/generalization_{name}.png"), line_plot(&series, true)?)?;
    }

    if !report.baselines.is_empty() {
        let rows = report
            .baselines
            .iter()
            .map(|b| {
                vec![
                    b.concept.clone(),
                    b.method.name().to_string(),
                    b.n_components.to_string(),
                    b.fit_error.to_string(),
                    b.similarity_to_unmodified.to_string(),
                ]
            })
            .collect();
        put(
            "tables/baselines.csv".into(),
            csv_bytes(&["concept", "method", "n_components", "fit_error", "similarity_to_unmodified"], rows)?,
        )?;
    }

    if !report.sweeps.is_empty() {
        let rows = report
            .sweeps
            .iter()
            .flat_map(|s| {
                s.scales
                    .iter()
                    .zip(&s.similarity)
                    .map(move |(a, b)| vec![s.concept.clone(), s.token.clone(), a.to_string(), b.to_string()])
            })
            .collect();
        put("tables/sweeps.csv".into(), csv_bytes(&["concept", "token", "scale", "similarity"], rows)?)?;
        for s in &report.sweeps {
            let pts: Vec<(f64, f64)> = s.scales.iter().copied().zip(s.similarity.iter().copied()).collect();
            put(format!("plots/sweep_{}_{}.png", slug(&s.concept), slug(&s.token)), line_plot(&[pts], false)?)?;
        }
    }

    files.extend(written);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::generalization::{normalized_curves, Curve};
    use crate::subject::TokenId;

    fn curve(steps: usize) -> GeneralizationCurve {
        let raw: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|c| (0..steps).map(|t| (0..3).map(|i| (c * 7 + t * 3 + i) as f64 * 0.01).collect()).collect())
            .collect();
        GeneralizationCurve {
            concept: "gleeb".into(),
            random_token: TokenId(3),
            test_images: 3,
            draws_per_t: 1,
            seed: 0,
            random_raw: vec![0.5; steps],
            curves: normalized_curves(&raw, &["w_star", "concept", "w_opt", "random"]),
        }
    }

    fn report() -> StudyReport {
        let mut r = StudyReport::new("aa", "bb");
        r.generalization.push(curve(100));
        r.sweeps.push(ManipulationSweep {
            concept: "gleeb".into(),
            token_id: TokenId(2),
            token: "circle".into(),
            scales: vec![0.0, 1.0, 2.0],
            seeds: vec![1],
            similarity: vec![0.6, 1.0, 0.8],
        });
        r
    }

    #[test]
    fn generalization_table_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report(), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("tables/generalization_gleeb.csv")).unwrap();
        assert_eq!(text.lines().count(), 101);
        assert!(text.starts_with("t,w_star_mean,w_star_stderr"));
    }

    #[test]
    fn re_emission_is_byte_identical_and_plots_decode() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = emit_report(&report(), a.path()).unwrap();
        let fb = emit_report(&report(), b.path()).unwrap();
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{x:?}");
        }
        let plot = a.path().join("plots/generalization_gleeb.png");
        let img = Image::load_png(plot).unwrap();
        assert_eq!(img.shape(), ImageShape::new(320, 480, 3));
        assert!(img.data().iter().any(|&v| v < 0.9));
    }

    #[test]
    fn unwritable_path_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        assert!(emit_report(&report(), file.join("sub")).is_err());
    }

    #[test]
    fn curve_lookup() {
        let c = curve(5);
        let r: &Curve = c.curve("random").unwrap();
        assert!(r.mean.iter().all(|&v| v == 0.0));
    }
}
