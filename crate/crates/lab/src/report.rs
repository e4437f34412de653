//! Report files: CSV summaries, the results JSON with raw image arrays,
//! reconstruction grids as PNG and trajectory plots as SVG.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gradleak_core::attacks::TrajectoryRecord;
use gradleak_core::fedsim::RoundLog;

use crate::error::{LabError, Result};
use crate::experiment::ResultsBundle;

pub const SUMMARY_HEADER: [&str; 7] = ["defense", "params", "ssim_mean", "ssim_std", "asr", "psnr_mean", "accuracy"];
pub const RESULTS_JSON: &str = "results.json";
pub const TRUTH_FILE: &str = "truth.f32";

/// Files written by [`emit_report`].
#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub victims: PathBuf,
    pub rounds: PathBuf,
    pub results: PathBuf,
    pub grids: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

fn file_stem(i: usize, name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("attack{i}_{clean}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or(String::new(), |x| format!("{x}"))
}

pub fn summary_rows(bundle: &ResultsBundle) -> Vec<[String; 7]> {
    bundle
        .attacks
        .iter()
        .map(|a| {
            [
                format!("{}/{}", bundle.defense.name(), a.name),
                bundle.defense.params_label(),
                fmt_opt(Some(a.summary.ssim_mean)),
                fmt_opt(Some(a.summary.ssim_std)),
                format!("{}", a.summary.asr),
                fmt_opt(a.summary.psnr_mean),
                fmt_opt(bundle.accuracy.map(|x| 100.0 * x)),
            ]
        })
        .collect()
}

fn write_summary(path: &Path, bundles: &[&ResultsBundle]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for b in bundles {
        for row in summary_rows(b) {
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> LabError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LabError::Io(io),
        other => LabError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Summary CSV over several bundles, e.g. the grid points of a sweep.
pub fn emit_sweep_summary(bundles: &[ResultsBundle], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_summary(path, &bundles.iter().collect::<Vec<_>>())
}

fn write_raw(path: &Path, arrays: &[Vec<f32>]) -> Result<()> {
    let mut bytes = Vec::with_capacity(arrays.iter().map(|a| a.len() * 4).sum());
    for v in arrays.iter().flatten() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_raw(path: &Path, count: usize, len: usize) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(path)?;
    if bytes.len() != count * len * 4 {
        return Err(LabError::Config(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            count * len * 4
        )));
    }
    let flat: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(flat.chunks(len.max(1)).map(<[f32]>::to_vec).collect())
}

/// One row per federated round; client losses are averaged.
pub fn write_rounds(path: &Path, rounds: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["round", "train_loss", "val_loss", "test_accuracy", "wall_time"]).map_err(csv_err)?;
    for r in rounds {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        w.write_record([
            r.round.to_string(),
            mean(&r.train_loss).to_string(),
            r.mean_val_loss().to_string(),
            r.test_accuracy.to_string(),
            format!("{:.3}", r.wall_time),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every report file for `bundle` into `dir`.
pub fn emit_report(bundle: &ResultsBundle, dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir)?;
    let mut files = ReportFiles {
        summary: dir.join("summary.csv"),
        victims: dir.join("victims.csv"),
        rounds: dir.join("rounds.csv"),
        results: dir.join(RESULTS_JSON),
        ..Default::default()
    };
    write_summary(&files.summary, &[bundle])?;

    let mut w = csv::Writer::from_path(&files.victims).map_err(csv_err)?;
    w.write_record([
        "attack",
        "victim",
        "index",
        "label",
        "ssim",
        "psnr",
        "mse",
        "iterations",
        "stop",
        "final_loss",
        "best_loss",
        "error",
    ])
    .map_err(csv_err)?;
    for a in &bundle.attacks {
        for (i, v) in a.victims.iter().enumerate() {
            let m = v.metrics;
            w.write_record([
                a.name.clone(),
                i.to_string(),
                v.index.to_string(),
                v.label.to_string(),
                fmt_opt(m.map(|m| m.ssim)),
                m.map_or(String::new(), |m| m.psnr.map_or("inf".into(), |p| p.to_string())),
                fmt_opt(m.map(|m| m.mse)),
                v.iterations.to_string(),
                v.stop.map_or(String::new(), |s| format!("{s:?}")),
                fmt_opt(v.final_loss),
                fmt_opt(v.best_loss),
                v.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    write_rounds(&files.rounds, &bundle.rounds)?;

    serde_json::to_writer_pretty(BufWriter::new(fs::File::create(&files.results)?), bundle)?;
    write_raw(&dir.join(TRUTH_FILE), &bundle.truths)?;
    for (i, a) in bundle.attacks.iter().enumerate() {
        let stem = file_stem(i, &a.name);
        write_raw(&dir.join(format!("{stem}.f32")), &a.reconstructions)?;
        let grid = dir.join(format!("{stem}_grid.png"));
        write_grid(&grid, bundle.image_shape, &bundle.truths, &a.reconstructions, 16)?;
        files.grids.push(grid);
        if let Some(t) = a.victims.iter().find_map(|v| v.trajectory.as_ref()) {
            let plot = dir.join(format!("{stem}_trajectory.svg"));
            fs::write(&plot, trajectory_svg(t, &format!("{} / {}", bundle.defense.name(), a.name)))?;
            files.plots.push(plot);
        }
    }
    Ok(files)
}

/// Reads a bundle written by [`emit_report`], including the raw arrays.
pub fn load_bundle(dir: &Path) -> Result<ResultsBundle> {
    let mut bundle: ResultsBundle =
        serde_json::from_reader(std::io::BufReader::new(fs::File::open(dir.join(RESULTS_JSON))?))?;
    let len: usize = bundle.image_shape.iter().product();
    let n = bundle.victims.len();
    bundle.truths = read_raw(&dir.join(TRUTH_FILE), n, len)?;
    for (i, a) in bundle.attacks.iter_mut().enumerate() {
        a.reconstructions = read_raw(&dir.join(format!("{}.f32", file_stem(i, &a.name))), a.victims.len(), len)?;
    }
    Ok(bundle)
}

/// Two rows per block of `per_row` victims: originals above their
/// reconstructions, separated by a one-pixel gap.
pub fn write_grid(
    path: &Path,
    shape: [usize; 3],
    truths: &[Vec<f32>],
    recons: &[Vec<f32>],
    per_row: usize,
) -> Result<()> {
    let [c, h, w] = shape;
    let n = truths.len().min(recons.len());
    let cols = n.clamp(1, per_row);
    let blocks = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, blocks * 2 * (h + 1) + 1);
    let mut img = vec![255u8; gw * gh * 3];
    let put = |img: &mut [u8], src: &[f32], ox: usize, oy: usize| {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = src[(ch.min(c - 1)) * h * w + y * w + x];
                    img[((oy + y) * gw + ox + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    };
    for i in 0..n {
        let (bx, by) = (i % cols, i / cols);
        let ox = 1 + bx * (w + 1);
        let oy = 1 + by * 2 * (h + 1);
        put(&mut img, &truths[i], ox, oy);
        put(&mut img, &recons[i], ox, oy + h + 1);
    }
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, gw as u32, gh as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&img)?;
    writer.finish()?;
    Ok(())
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Per-layer cosine similarity over attack iterations, one polyline per
/// layer.
pub fn trajectory_svg(t: &TrajectoryRecord, title: &str) -> String {
    let (width, height, left, top, right, bottom) = (720.0, 400.0, 60.0, 30.0, 150.0, 40.0);
    let (pw, ph) = (width - left - right, height - top - bottom);
    let n = t.len().max(2);
    let step = n.div_ceil(1000).max(1);
    let xs = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let ys = |c: f64| top + ph * (1.0 - (c.clamp(-1.0, 1.0) + 1.0) / 2.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for c in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let y = ys(c);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{c}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration (0..{})</text>"#,
        left + pw / 2.0,
        height - 10.0,
        t.len()
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">cosine similarity</text>"#,
        top + ph / 2.0
    );
    for (l, (name, series)) in t.layers.iter().zip(&t.cosines).enumerate() {
        let color = PALETTE[l % PALETTE.len()];
        let pts: Vec<String> =
            series.iter().enumerate().step_by(step).map(|(i, &c)| format!("{:.1},{:.1}", xs(i), ys(c))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-layer="{}" fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            escape(name),
            pts.join(" ")
        );
        let ly = top + 14.0 * l as f64 + 8.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
