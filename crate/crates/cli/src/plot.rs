use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use plotters::prelude::*;

use erl_core::env::Split;
use erl_core::harness::{read_metrics, smooth, Phase};

/// One curve: iterations and smoothed rewards.
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn label_for(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Smoothed curves per (file, split, phase), in file order.
pub fn curves(files: &[PathBuf], window: usize) -> Result<Vec<Curve>> {
    if window == 0 {
        bail!("--window must be at least 1");
    }
    let mut out = Vec::new();
    for path in files {
        let rows = read_metrics(path).with_context(|| format!("reading {}", path.display()))?;
        let mut series: BTreeMap<Phase, (Split, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows {
            let (_, xs, ys) = series.entry(r.phase).or_insert_with(|| (r.split, Vec::new(), Vec::new()));
            xs.push(r.iteration as f64);
            ys.push(r.mean_reward);
        }
        let name = label_for(path);
        for (phase, (split, xs, ys)) in series {
            let phase = match phase {
                Phase::Attempt1 => "attempt1",
                Phase::Attempt2 => "attempt2",
                Phase::Deploy => "deploy",
            };
            let smoothed = smooth(&ys, window);
            out.push(Curve { label: format!("{name} {split}/{phase}"), points: xs.into_iter().zip(smoothed).collect() });
        }
    }
    Ok(out)
}

pub fn plot(files: &[PathBuf], window: usize, out: &Path) -> Result<()> {
    let curves = curves(files, window)?;
    if curves.iter().all(|c| c.points.is_empty()) {
        bail!("no metrics rows to plot");
    }
    let max_x = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).fold(1.0, f64::max);
    let root = SVGBackend::new(out, (960, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Reward (trailing mean over {window})"), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..max_x, 0.0..1.0)?;
    chart.configure_mesh().x_desc("iteration").y_desc("mean reward").draw()?;
    for (i, c) in curves.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(c.points, color.stroke_width(2)))?
            .label(c.label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    println!("{}", out.display());
    Ok(())
}
