//! Minimal PNG line charts for training curves and robustness sweeps: axes,
//! ticks, grid, legend, and a built-in 5x7 bitmap font. No plotting
//! dependency, just the `image` crate the data pipeline already uses.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{GaeError, Result};

/// One polyline. Colors are picked from [`PALETTE`] when `color` is `None`.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: Option<[u8; 3]>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            color: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: u32,
    pub height: u32,
    /// Plot y on a log10 axis (requires strictly positive values).
    pub log_y: bool,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            title: String::new(),
            x_label: "x".into(),
            y_label: "y".into(),
            width: 640,
            height: 420,
            log_y: false,
        }
    }
}

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// 5x7 glyphs, one byte per row, low 5 bits used.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_lowercase() {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        'a' => [0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f],
        'b' => [0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x1e],
        'c' => [0x00, 0x00, 0x0e, 0x11, 0x10, 0x11, 0x0e],
        'd' => [0x01, 0x01, 0x0f, 0x11, 0x11, 0x11, 0x0f],
        'e' => [0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e],
        'f' => [0x06, 0x08, 0x1c, 0x08, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0f, 0x11, 0x0f, 0x01, 0x11, 0x0e],
        'h' => [0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0c],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'm' => [0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x1e, 0x11, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e],
        'p' => [0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'q' => [0x00, 0x0f, 0x11, 0x0f, 0x01, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0f, 0x10, 0x0e, 0x01, 0x1e],
        't' => [0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'w' => [0x00, 0x00, 0x15, 0x15, 0x15, 0x15, 0x0a],
        'x' => [0x00, 0x00, 0x11, 0x0a, 0x04, 0x0a, 0x11],
        'y' => [0x00, 0x11, 0x11, 0x0f, 0x01, 0x11, 0x0e],
        'z' => [0x00, 0x00, 0x1f, 0x02, 0x04, 0x08, 0x1f],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0c, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '=' => [0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f],
        ':' => [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        ' ' => [0; 7],
        _ => [0x1f, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1f],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for bit in 0..5 {
                if row & (1 << (4 - bit)) != 0 {
                    let (px, py) = (cx + bit as i64, y + ry as i64);
                    if px >= 0 && py >= 0 && px < img.width() as i64 && py < img.height() as i64 {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cx += 6;
    }
}

fn text_width(text: &str) -> i64 {
    6 * text.chars().count() as i64
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && x0 < img.width() as i64 && y0 < img.height() as i64 {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_marker(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1i64 {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && px < img.width() as i64 && py < img.height() as i64 {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Option<Range> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            return None;
        }
        if lo == hi {
            let pad = lo.abs().max(1.0) * 0.05;
            lo -= pad;
            hi += pad;
        } else {
            let pad = (hi - lo) * 0.05;
            lo -= pad;
            hi += pad;
        }
        Some(Range { lo, hi })
    }

    fn to_unit(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

/// Render `series` to a PNG at `path`.
pub fn line_plot(path: &Path, spec: &PlotSpec, series: &[Series]) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(GaeError::config("line_plot needs at least one point"));
    }
    if spec.log_y
        && series
            .iter()
            .any(|s| s.points.iter().any(|&(_, y)| y <= 0.0))
    {
        return Err(GaeError::config("log_y requires strictly positive values"));
    }
    let map_y = |y: f64| if spec.log_y { y.log10() } else { y };
    let xs = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)))
        .ok_or_else(|| GaeError::config("no finite x values to plot"))?;
    let ys = Range::of(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| map_y(p.1))),
    )
    .ok_or_else(|| GaeError::config("no finite y values to plot"))?;

    let (w, h) = (spec.width.max(160), spec.height.max(120));
    let (left, right, top, bottom) = (64i64, 16i64, 24i64, 40i64);
    let (pw, ph) = (w as i64 - left - right, h as i64 - top - bottom);
    let mut img = RgbImage::from_pixel(w, h, BG);

    let px = |ux: f64| left + (ux * pw as f64).round() as i64;
    let py = |uy: f64| top + ((1.0 - uy) * ph as f64).round() as i64;

    // Grid and ticks.
    let ticks = 5;
    for i in 0..=ticks {
        let f = i as f64 / ticks as f64;
        let gx = px(f);
        let gy = py(f);
        draw_line(&mut img, (gx, top), (gx, top + ph), GRID);
        draw_line(&mut img, (left, gy), (left + pw, gy), GRID);
        let xv = xs.lo + f * (xs.hi - xs.lo);
        let raw_y = ys.lo + f * (ys.hi - ys.lo);
        let yv = if spec.log_y { 10f64.powf(raw_y) } else { raw_y };
        let xt = format_tick(xv);
        draw_text(&mut img, gx - text_width(&xt) / 2, top + ph + 6, &xt, AXIS);
        let yt = format_tick(yv);
        draw_text(&mut img, left - 6 - text_width(&yt), gy - 3, &yt, AXIS);
    }
    // Axes on top of the grid.
    draw_line(&mut img, (left, top), (left, top + ph), AXIS);
    draw_line(&mut img, (left, top + ph), (left + pw, top + ph), AXIS);

    // Series.
    for (si, s) in series.iter().enumerate() {
        let c = Rgb(s.color.unwrap_or(PALETTE[si % PALETTE.len()]));
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (px(xs.to_unit(x)), py(ys.to_unit(map_y(y)))))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], c);
        }
        for &(x, y) in &pts {
            draw_marker(&mut img, x, y, c);
        }
    }

    // Title, labels, legend.
    draw_text(
        &mut img,
        left + (pw - text_width(&spec.title)) / 2,
        6,
        &spec.title,
        AXIS,
    );
    draw_text(
        &mut img,
        left + (pw - text_width(&spec.x_label)) / 2,
        top + ph + 20,
        &spec.x_label,
        AXIS,
    );
    draw_text(&mut img, 4, 6, &spec.y_label, AXIS);
    let mut ly = top + 6;
    for (si, s) in series.iter().enumerate() {
        if s.name.is_empty() {
            continue;
        }
        let c = Rgb(s.color.unwrap_or(PALETTE[si % PALETTE.len()]));
        let lx = left + pw - text_width(&s.name) - 18;
        for dy in 0..5 {
            draw_line(&mut img, (lx, ly + 1 + dy), (lx + 10, ly + 1 + dy), c);
        }
        draw_text(&mut img, lx + 14, ly, &s.name, AXIS);
        ly += 11;
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| GaeError::io(parent, e))?;
        }
    }
    img.save(path)
        .map_err(|e| GaeError::Other(format!("plot save {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_decodable_png_with_series_colors() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("curve.png");
        let series = vec![
            Series::new("train", (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect()),
            Series::new("val", (0..50).map(|i| (i as f64, 0.5 + i as f64 * 0.01)).collect()),
        ];
        let spec = PlotSpec {
            title: "loss".into(),
            x_label: "step".into(),
            y_label: "l1".into(),
            ..Default::default()
        };
        line_plot(&path, &spec, &series).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (640, 420));
        // Both palette colors must appear somewhere.
        for want in [PALETTE[0], PALETTE[1]] {
            assert!(
                img.pixels().any(|p| p.0 == want),
                "series color {want:?} not drawn"
            );
        }
    }

    #[test]
    fn rejects_empty_and_bad_log_input() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.png");
        let err = line_plot(&path, &PlotSpec::default(), &[Series::new("a", vec![])]);
        assert!(err.is_err());
        let spec = PlotSpec {
            log_y: true,
            ..Default::default()
        };
        let err = line_plot(&path, &spec, &[Series::new("a", vec![(0.0, -1.0)])]);
        assert!(err.is_err());
    }

    #[test]
    fn single_point_and_constant_series_render() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("flat.png");
        line_plot(
            &path,
            &PlotSpec::default(),
            &[Series::new("c", vec![(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)])],
        )
        .unwrap();
        assert!(path.exists());
    }
}
