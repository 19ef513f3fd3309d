//! Heatmap rendering of attention and importance dumps.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use dhicm_core::analysis::AttentionDump;
use image::{ImageBuffer, Rgb};

use crate::manifest::write_atomic;

/// Pixels per matrix cell.
const CELL: u32 = 24;

/// White-to-dark-blue ramp for values in [0, 1].
fn color(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)])
}

/// One cell per entry, scaled so the largest value is darkest.
pub fn heatmap(dump: &AttentionDump) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let [rows, cols] = dump.shape();
    let peak = dump
        .values
        .iter()
        .flatten()
        .copied()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    ImageBuffer::from_fn(cols.max(1) as u32 * CELL, rows.max(1) as u32 * CELL, |x, y| {
        let (r, c) = ((y / CELL) as usize, (x / CELL) as usize);
        let v = dump.values.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0.0);
        color(v / peak)
    })
}

/// Gnuplot `matrix with image` data with labels in comments.
pub fn gnuplot_matrix(dump: &AttentionDump) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# site {} ({:?})", dump.site, dump.kind);
    let _ = writeln!(s, "# columns: {}", dump.col_labels.join(" "));
    let _ = writeln!(s, "# rows: {}", dump.row_labels.join(" "));
    for row in &dump.values {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

/// Writes a PNG for `.png` outputs and a gnuplot matrix otherwise.
pub fn render(dump_csv: &Path, out: &Path) -> Result<()> {
    let dump = AttentionDump::load(dump_csv).with_context(|| format!("loading {}", dump_csv.display()))?;
    let is_png = out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let mut bytes = Vec::new();
        heatmap(&dump)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageOutputFormat::Png)
            .context("encoding PNG")?;
        write_atomic(out, &bytes)
    } else {
        write_atomic(out, gnuplot_matrix(&dump).as_bytes())
    }
}
