//! Minimal raster plots: enough to eyeball a learning curve or a metric
//! bar chart without pulling in a plotting stack. Output is PNG via the
//! same encoder the dataset uses for sprites.

use std::path::Path;

use crate::{Error, Result};

const WIDTH: usize = 640;
const HEIGHT: usize = 400;
const MARGIN: usize = 48;
const BG: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [220, 220, 220];
const PALETTE: [[u8; 3]; 4] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
];

/// 3×5 glyphs for axis tick labels; one bit per pixel, top row first.
const GLYPHS: [(char, [u8; 5]); 15] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
    ('e', [0b000, 0b111, 0b110, 0b100, 0b111]),
    ('+', [0b000, 0b010, 0b111, 0b010, 0b000]),
    (' ', [0b000; 5]),
];

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        let mut px = vec![0u8; WIDTH * HEIGHT * 3];
        for chunk in px.chunks_exact_mut(3) {
            chunk.copy_from_slice(&BG);
        }
        Canvas { px }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let at = (y as usize * WIDTH + x as usize) * 3;
        self.px[at..at + 3].copy_from_slice(&color);
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, color);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) else {
                continue;
            };
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if bits >> (2 - rx) & 1 == 1 {
                        self.set(x + (i * 4 + rx) as i64, y + ry as i64, color);
                    }
                }
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(WIDTH as u32, HEIGHT as u32, self.px.clone())
                .expect("buffer sized to dims");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("write plot {}: {e}", path.display())))
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.abs() >= 0.01 && v.abs() < 100_000.0 {
        format!("{v:.3}")
    } else {
        format!("{v:.1e}")
    }
}

struct Axes {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Axes {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        if !x_min.is_finite() {
            (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
        }
        if x_max - x_min < 1e-12 {
            x_max = x_min + 1.0;
        }
        if y_max - y_min < 1e-12 {
            y_max = y_min + 1.0;
            y_min -= 1.0;
        }
        Axes { x_min, x_max, y_min, y_max }
    }

    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        let sx = MARGIN as f64 + (x - self.x_min) / (self.x_max - self.x_min) * w;
        let sy = (HEIGHT - MARGIN) as f64 - (y - self.y_min) / (self.y_max - self.y_min) * h;
        (sx.round() as i64, sy.round() as i64)
    }
}

fn draw_frame(c: &mut Canvas, ax: &Axes) {
    let (x0, y0) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    let (x1, y1) = ((WIDTH - MARGIN) as i64, MARGIN as i64);
    for i in 0..=4 {
        let fy = ax.y_min + (ax.y_max - ax.y_min) * i as f64 / 4.0;
        let (_, py) = ax.px(ax.x_min, fy);
        c.line(x0, py, x1, py, GRID);
        c.text(2, py - 2, &tick_label(fy), AXIS);
        let fx = ax.x_min + (ax.x_max - ax.x_min) * i as f64 / 4.0;
        let (px, _) = ax.px(fx, ax.y_min);
        c.text(px - 8, y0 + 6, &tick_label(fx), AXIS);
    }
    c.line(x0, y0, x1, y0, AXIS);
    c.line(x0, y0, x0, y1, AXIS);
}

/// Polyline chart of one or more named series (the names pick the palette
/// slot; rendering is label-free beyond the axis ticks).
pub fn line_chart(path: &Path, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::argument("line_chart needs at least one point"));
    }
    let ax = Axes::fit(series.iter().flat_map(|(_, pts)| pts.iter().copied()));
    let mut c = Canvas::new();
    draw_frame(&mut c, &ax);
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for pair in pts.windows(2) {
            let (x0, y0) = ax.px(pair[0].0, pair[0].1);
            let (x1, y1) = ax.px(pair[1].0, pair[1].1);
            c.line(x0, y0, x1, y1, color);
        }
        if let [only] = pts.as_slice() {
            let (px, py) = ax.px(only.0, only.1);
            c.fill_rect(px - 1, py - 1, px + 1, py + 1, color);
        }
    }
    c.save(path)
}

/// Bar chart over the given values; bars sit on the zero line when the
/// range spans it.
pub fn bar_chart(path: &Path, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::argument("bar_chart needs at least one value"));
    }
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let ax = Axes::fit([(0.0, lo), (values.len() as f64, hi)].into_iter());
    let mut c = Canvas::new();
    draw_frame(&mut c, &ax);
    let (_, zero_y) = ax.px(0.0, 0.0_f64.clamp(ax.y_min, ax.y_max));
    for (i, &v) in values.iter().enumerate() {
        let (x0, y) = ax.px(i as f64 + 0.15, v);
        let (x1, _) = ax.px(i as f64 + 0.85, v);
        c.fill_rect(x0, y, x1, zero_y, PALETTE[i % PALETTE.len()]);
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_write_decodable_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("curve.png");
        line_chart(
            &line,
            &[("a", vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.75)])],
        )
        .unwrap();
        let img = image::open(&line).unwrap();
        assert_eq!(img.width() as usize, WIDTH);

        let bars = dir.path().join("bars.png");
        bar_chart(&bars, &[0.3, 0.9, 0.5]).unwrap();
        assert!(image::open(&bars).is_ok());
        assert!(line_chart(&dir.path().join("x.png"), &[("e", vec![])]).is_err());
    }
}
