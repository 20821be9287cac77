//! Static chart rendering. All images are rendered in memory first, so a
//! bad input leaves no files behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use oceanprompt::evaluator::CSV_HEADER;
use oceanprompt::{Error, Result};
use plotters::prelude::*;

use crate::commands::FieldDump;

const METRICS: [(&str, usize); 3] = [("rmse", 3), ("mae", 4), ("pcc", 5)];

struct Row {
    variant: String,
    mask: String,
    depth: String,
    values: [Option<f64>; 3],
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| malformed(path, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(malformed(path, format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(path, e.to_string()))?;
        let mut values = [None; 3];
        for (slot, (name, col)) in values.iter_mut().zip(METRICS) {
            let cell = record[col].trim();
            if cell.is_empty() && name == "pcc" {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| malformed(path, format!("row {}: {name} {cell:?} is not a number", line + 2)))?;
            *slot = Some(v);
        }
        rows.push(Row {
            variant: record[0].to_string(),
            mask: record[1].to_string(),
            depth: record[2].to_string(),
            values,
        });
    }
    if rows.is_empty() {
        return Err(malformed(path, "no metric rows"));
    }
    Ok(rows)
}

fn chart_error<E: std::fmt::Debug>(e: E) -> Error {
    Error::Data(format!("chart rendering failed: {e:?}"))
}

/// One SVG per metric: metric against observation subset, one line per depth
/// (and per variant when the report holds several).
fn line_charts(rows: &[Row]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut masks: Vec<&str> = Vec::new();
    for r in rows {
        if !masks.contains(&r.mask.as_str()) {
            masks.push(&r.mask);
        }
    }
    let multi_variant = rows.iter().any(|r| r.variant != rows[0].variant);
    let mut out = Vec::new();
    for (m, (metric, _)) in METRICS.iter().enumerate() {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rows {
            let key = if multi_variant {
                format!("{} {}", r.variant, r.depth)
            } else {
                r.depth.clone()
            };
            let entry = series.entry(key).or_default();
            if let Some(v) = r.values[m] {
                let x = masks.iter().position(|k| *k == r.mask).expect("mask listed") as f64;
                entry.push((x, v));
            }
        }
        let all: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
        let (lo, hi) = match all.iter().copied().fold(None, |acc: Option<(f64, f64)>, v| {
            Some(acc.map_or((v, v), |(a, b)| (a.min(v), b.max(v))))
        }) {
            Some((a, b)) if b > a => (a - 0.05 * (b - a), b + 0.05 * (b - a)),
            Some((a, _)) => (a - 0.5 * a.abs().max(1e-12), a + 0.5 * a.abs().max(1e-12)),
            None => (0.0, 1.0),
        };
        let mut svg = String::new();
        {
            let root = SVGBackend::with_string(&mut svg, (720, 440)).into_drawing_area();
            root.fill(&WHITE).map_err(chart_error)?;
            let x_max = (masks.len() as f64 - 1.0).max(1.0);
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("{} by observed subset", metric.to_uppercase()), ("sans-serif", 20))
                .margin(16)
                .x_label_area_size(40)
                .y_label_area_size(80)
                .build_cartesian_2d(-0.2..x_max + 0.2, lo..hi)
                .map_err(chart_error)?;
            chart
                .configure_mesh()
                .x_labels(masks.len())
                .x_label_formatter(&|x| {
                    let i = x.round();
                    if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < masks.len() {
                        masks[i as usize].to_string()
                    } else {
                        String::new()
                    }
                })
                .y_label_formatter(&|y| format!("{y:.3e}"))
                .y_desc(*metric)
                .draw()
                .map_err(chart_error)?;
            for (i, (name, points)) in series.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                chart
                    .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                    .map_err(chart_error)?
                    .label(name.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
                chart
                    .draw_series(points.iter().map(|&p| Circle::new(p, 4, color.filled())))
                    .map_err(chart_error)?;
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(chart_error)?;
            root.present().map_err(chart_error)?;
        }
        out.push((format!("{metric}.svg"), svg.into_bytes()));
    }
    Ok(out)
}

/// Diverging blue-white-red map of `v / vmax`.
fn diverging(v: f32, vmax: f32) -> Rgb<u8> {
    let t = if vmax > 0.0 { (v / vmax).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |a: f32| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(-t), fade(-t), 255])
    }
}

const CELL: u32 = 4;
const GAP: u32 = 6;

/// PNG with prediction, target, and error side by side on a shared scale.
fn heatmap_panel(dump: &FieldDump, level: usize) -> Result<Vec<u8>> {
    let (h, w) = (dump.height as u32, dump.width as u32);
    let pred = &dump.prediction[level];
    let target = &dump.target[level];
    let err: Vec<f32> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let vmax = pred.iter().chain(target).fold(0.0f32, |m, v| m.max(v.abs()));
    let panels = [pred.as_slice(), target.as_slice(), err.as_slice()];
    let mut img = RgbImage::from_pixel(3 * w * CELL + 2 * GAP, h * CELL, Rgb([255, 255, 255]));
    for (p, field) in panels.iter().enumerate() {
        let x0 = p as u32 * (w * CELL + GAP);
        for y in 0..h * CELL {
            for x in 0..w * CELL {
                let v = field[((y / CELL) * w + x / CELL) as usize];
                img.put_pixel(x0 + x, y, diverging(v, vmax));
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(bytes)
}

fn read_dumps(path: &Path) -> Result<Vec<FieldDump>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dumps: Vec<FieldDump> = serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;
    if dumps.is_empty() {
        return Err(malformed(path, "no dumped fields"));
    }
    for d in &dumps {
        let plane = d.height * d.width;
        let ok = d.prediction.len() == d.levels.len()
            && d.target.len() == d.levels.len()
            && d.prediction.iter().chain(&d.target).all(|p| p.len() == plane);
        if !ok || plane == 0 {
            return Err(malformed(path, format!("fields for {} do not match their declared shape", d.mask)));
        }
    }
    Ok(dumps)
}

pub fn run(csv: Option<&Path>, fields: Option<&Path>, out: &Path) -> Result<()> {
    if csv.is_none() && fields.is_none() {
        return Err(Error::Config("plot needs --csv, --fields, or both".into()));
    }
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    if let Some(path) = csv {
        files.extend(line_charts(&read_rows(path)?)?);
    }
    if let Some(path) = fields {
        for d in read_dumps(path)? {
            for (k, level) in d.levels.iter().enumerate() {
                let name = format!("fields_{}_t{}_{}.png", d.mask.replace('+', "-"), d.time_index, level);
                files.push((name, heatmap_panel(&d, k)?));
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, bytes) in &files {
        let path: PathBuf = out.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
