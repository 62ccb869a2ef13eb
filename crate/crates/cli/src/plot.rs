use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use dcl_core::adapt::generator_from_checkpoint;
use dcl_core::checkpoint::Checkpoint;
use dcl_core::data::save_grid;
use dcl_core::models::LatentBatch;
use dcl_core::{Error, Result};
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system sans-serif font once; charts lose their labels
/// when none is found.
fn font_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        for p in FONT_CANDIDATES {
            if let Ok(bytes) = fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; charts are drawn without labels");
        false
    })
}

/// One named line of (x, y) points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A chart: a title, an x label and one panel per y quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub panels: Vec<(String, Vec<Series>)>,
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Option<usize> {
    header.iter().position(|h| h == name)
}

fn num(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<f64> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Input(format!("{}: non-numeric field in row {rec:?}", path.display())))
}

/// Builds a chart from a metric, probe or bound-report CSV.
pub fn chart_from_csv(path: &Path) -> Result<Chart> {
    let (header, rows) = read_csv(path)?;
    let title = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let has = |c: &str| column(&header, c).is_some();

    if has("method") && has("iteration") {
        // Probe log: one line per method.
        let (m, it) = (column(&header, "method").unwrap(), column(&header, "iteration").unwrap());
        let mut panels = Vec::new();
        for q in ["p_t", "intra_lpips"] {
            let Some(qi) = column(&header, q) else { continue };
            let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                by.entry(r[m].to_string()).or_default().push((num(r, it, path)?, num(r, qi, path)?));
            }
            panels.push((q.to_string(), by.into_iter().map(|(name, points)| Series { name, points }).collect()));
        }
        return Ok(Chart { title, x_label: "iteration".into(), panels });
    }
    if has("iteration") {
        let it = column(&header, "iteration").unwrap();
        let mut panels = Vec::new();
        for (qi, q) in header.iter().enumerate().filter(|(i, _)| *i != it) {
            let points = rows.iter().map(|r| Ok((num(r, it, path)?, num(r, qi, path)?))).collect::<Result<_>>()?;
            panels.push((q.clone(), vec![Series { name: q.clone(), points }]));
        }
        return Ok(Chart { title, x_label: "iteration".into(), panels });
    }
    if has("batch_size") && has("bound_value") {
        let n = column(&header, "batch_size").unwrap();
        let mut series = Vec::new();
        for q in ["bound_value", "exact_mi"] {
            let qi = column(&header, q).unwrap_or(n);
            let mut points = rows.iter().map(|r| Ok((num(r, n, path)?, num(r, qi, path)?))).collect::<Result<Vec<_>>>()?;
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            series.push(Series { name: q.into(), points });
        }
        let ln: Vec<_> = series[0].points.iter().map(|&(x, _)| (x, x.ln())).collect();
        series.push(Series { name: "ln N".into(), points: ln });
        return Ok(Chart { title, x_label: "batch size".into(), panels: vec![("nats".into(), series)] });
    }
    Err(Error::Input(format!(
        "{}: unrecognised CSV; expected an iteration or batch_size column",
        path.display()
    )))
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b + 0.05 * (b - a)) };
    (pad(x0, x1), pad(y0.min(0.0).max(y0 - 0.05 * (y1 - y0).abs()), y1))
}

fn draw_error<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Input(format!("drawing failed: {e}"))
}

/// Renders `chart` as a PNG with one panel per quantity.
pub fn render(chart: &Chart, out: &Path) -> Result<()> {
    let labels = font_ready();
    let rows = chart.panels.len().max(1) as u32;
    let root = BitMapBackend::new(out, (720, 260 * rows)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_error)?;
    let areas = root.split_evenly((rows as usize, 1));
    for ((name, series), area) in chart.panels.iter().zip(areas) {
        let ((x0, x1), (y0, y1)) = bounds(series);
        let mut b = ChartBuilder::on(&area);
        b.margin(12).x_label_area_size(if labels { 30 } else { 0 }).y_label_area_size(if labels { 50 } else { 0 });
        if labels {
            b.caption(format!("{} {name}", chart.title), ("sans-serif", 16));
        }
        let mut ctx = b.build_cartesian_2d(x0..x1, y0..y1).map_err(draw_error)?;
        let mut mesh = ctx.configure_mesh();
        mesh.x_desc(chart.x_label.as_str()).y_desc(name.as_str());
        if !labels {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(draw_error)?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let line = ctx
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(draw_error)?;
            if labels {
                line.label(s.name.clone()).legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
            }
        }
        if labels && series.len() > 1 {
            ctx.configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(draw_error)?;
        }
    }
    root.present().map_err(draw_error)?;
    Ok(())
}

/// Sample grid of the generator stored in a checkpoint.
fn render_checkpoint(path: &Path, out: &Path) -> Result<()> {
    let g = generator_from_checkpoint(&Checkpoint::load(path)?)?;
    let z = LatentBatch::sample(&mut ChaCha8Rng::seed_from_u64(3), 64, g.config.z_dim);
    save_grid(&g.generate(&z, 64)?, 8, 4, out)
}

/// Plots every input next to itself or into `to`; returns the directory
/// holding the last figure.
pub fn plot(inputs: &[PathBuf], to: Option<&Path>) -> Result<PathBuf> {
    if let Some(dir) = to {
        fs::create_dir_all(dir)?;
    }
    let mut last = PathBuf::from(".");
    for input in inputs {
        if !input.exists() {
            return Err(Error::Missing(input.clone()));
        }
        let dir = to.map(Path::to_path_buf).unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
        let out = dir.join(format!("{stem}.png"));
        match input.extension().and_then(|e| e.to_str()) {
            Some("csv") => render(&chart_from_csv(input)?, &out)?,
            Some("ckpt") => render_checkpoint(input, &out)?,
            _ => return Err(Error::Input(format!("{}: expected a .csv or .ckpt file", input.display()))),
        }
        log::info!("wrote {}", out.display());
        last = dir;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_csv_groups_by_method() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("probe.csv");
        fs::write(&p, "method,iteration,p_t,intra_lpips\ndcl,0,0.1,0.9\ntgan,0,0.2,0.8\ndcl,5,0.5,0.7\n").unwrap();
        let c = chart_from_csv(&p).unwrap();
        assert_eq!(c.panels.len(), 2);
        let dcl = &c.panels[0].1[0];
        assert_eq!(dcl.name, "dcl");
        assert_eq!(dcl.points, vec![(0.0, 0.1), (5.0, 0.5)]);
        render(&c, &dir.path().join("probe.png")).unwrap();
        assert!(dir.path().join("probe.png").exists());
    }

    #[test]
    fn rejects_unknown_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert_eq!(chart_from_csv(&p).unwrap_err().class(), "input");
    }
}
