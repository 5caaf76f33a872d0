//! Minimal deterministic rasterizer for the pipeline's figures.
//!
//! Images carry no text; the CSV twin emitted next to every figure holds
//! the labels, so plots stay diffable and the renderer stays tiny. Same
//! input always produces byte-identical PNG output.

use super::{BoxPlotSummary, EvalError};
use image::{Rgb, RgbImage};
use std::io::Write;
use std::path::Path;

pub const WIDTH: u32 = 800;
pub const HEIGHT: u32 = 600;
const MARGIN_LEFT: u32 = 70;
const MARGIN_RIGHT: u32 = 30;
const MARGIN_TOP: u32 = 30;
const MARGIN_BOTTOM: u32 = 60;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// Class/series palette; indexes wrap.
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([127, 127, 127]),
];

pub fn palette_color(index: usize) -> Rgb<u8> {
    PALETTE[index % PALETTE.len()]
}

/// Linear data-to-pixel mapping with 5% padding; degenerate ranges widen
/// by one unit so a single value still lands mid-plot.
#[derive(Debug, Clone, Copy)]
struct Scale {
    min: f64,
    max: f64,
}

impl Scale {
    fn from_range(mut min: f64, mut max: f64) -> Self {
        if !(min.is_finite() && max.is_finite()) {
            min = 0.0;
            max = 1.0;
        }
        if min == max {
            min -= 1.0;
            max += 1.0;
        }
        let pad = 0.05 * (max - min);
        Scale {
            min: min - pad,
            max: max + pad,
        }
    }

    fn unit(&self, v: f64) -> f64 {
        ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut img = RgbImage::new(WIDTH, HEIGHT);
        for px in img.pixels_mut() {
            *px = BACKGROUND;
        }
        Canvas { img }
    }

    fn plot_left(&self) -> u32 {
        MARGIN_LEFT
    }

    fn plot_right(&self) -> u32 {
        WIDTH - MARGIN_RIGHT
    }

    fn plot_top(&self) -> u32 {
        MARGIN_TOP
    }

    fn plot_bottom(&self) -> u32 {
        HEIGHT - MARGIN_BOTTOM
    }

    fn x_px(&self, s: Scale, v: f64) -> i64 {
        let w = (self.plot_right() - self.plot_left()) as f64;
        self.plot_left() as i64 + (s.unit(v) * w).round() as i64
    }

    fn y_px(&self, s: Scale, v: f64) -> i64 {
        let h = (self.plot_bottom() - self.plot_top()) as f64;
        self.plot_bottom() as i64 - (s.unit(v) * h).round() as i64
    }

    fn set(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
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

    fn dot(&mut self, x: i64, y: i64, radius: i64, color: Rgb<u8>) {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.set(x + dx, y + dy, color);
                }
            }
        }
    }

    fn frame(&mut self) {
        let (l, r) = (self.plot_left() as i64, self.plot_right() as i64);
        let (t, b) = (self.plot_top() as i64, self.plot_bottom() as i64);
        for i in 1..5 {
            let gx = l + (r - l) * i / 5;
            let gy = t + (b - t) * i / 5;
            self.line(gx, t, gx, b, GRID);
            self.line(l, gy, r, gy, GRID);
        }
        self.line(l, t, r, t, FRAME);
        self.line(l, b, r, b, FRAME);
        self.line(l, t, l, b, FRAME);
        self.line(r, t, r, b, FRAME);
    }

    fn save(self, path: &Path) -> Result<(), EvalError> {
        self.img.save(path).map_err(|source| EvalError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn minmax<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    (min, max)
}

/// Scatter of (x, y, class index) points, colored by class.
pub fn render_scatter(path: &Path, points: &[(f64, f64, usize)]) -> Result<(), EvalError> {
    let mut canvas = Canvas::new();
    canvas.frame();
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (x_min, x_max) = minmax(xs.iter());
    let (y_min, y_max) = minmax(ys.iter());
    let sx = Scale::from_range(x_min, x_max);
    let sy = Scale::from_range(y_min, y_max);
    for &(x, y, class) in points {
        let px = canvas.x_px(sx, x);
        let py = canvas.y_px(sy, y);
        canvas.dot(px, py, 3, palette_color(class));
    }
    canvas.save(path)
}

/// One polyline per series over a shared axis.
pub fn render_series(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<(), EvalError> {
    let mut canvas = Canvas::new();
    canvas.frame();
    let (x_min, x_max) = minmax(series.iter().flatten().map(|p| &p.0));
    let (y_min, y_max) = minmax(series.iter().flatten().map(|p| &p.1));
    let sx = Scale::from_range(x_min, x_max);
    let sy = Scale::from_range(y_min, y_max);
    for (idx, line) in series.iter().enumerate() {
        let color = palette_color(idx);
        for pair in line.windows(2) {
            let (x0, y0) = pair[0];
            let (x1, y1) = pair[1];
            canvas.line(
                canvas.x_px(sx, x0),
                canvas.y_px(sy, y0),
                canvas.x_px(sx, x1),
                canvas.y_px(sy, y1),
                color,
            );
        }
        if line.len() == 1 {
            canvas.dot(canvas.x_px(sx, line[0].0), canvas.y_px(sy, line[0].1), 2, color);
        }
    }
    canvas.save(path)
}

/// Standard box-and-whisker rendering, one box per group in input order.
pub fn render_box_plot(path: &Path, groups: &[BoxPlotSummary]) -> Result<(), EvalError> {
    let mut canvas = Canvas::new();
    canvas.frame();
    let lo = groups.iter().map(|g| g.min).fold(f64::INFINITY, f64::min);
    let hi = groups.iter().map(|g| g.max).fold(f64::NEG_INFINITY, f64::max);
    let sy = Scale::from_range(lo, hi);
    let n = groups.len().max(1) as i64;
    let left = canvas.plot_left() as i64;
    let right = canvas.plot_right() as i64;
    let slot = (right - left) / n;
    for (i, g) in groups.iter().enumerate() {
        let color = palette_color(i);
        let cx = left + slot * i as i64 + slot / 2;
        let half = (slot * 35 / 100).min(40).max(4);
        let q1 = canvas.y_px(sy, g.q1);
        let q3 = canvas.y_px(sy, g.q3);
        let med = canvas.y_px(sy, g.median);
        let wl = canvas.y_px(sy, g.lower_whisker);
        let wu = canvas.y_px(sy, g.upper_whisker);
        // Box.
        canvas.line(cx - half, q1, cx + half, q1, color);
        canvas.line(cx - half, q3, cx + half, q3, color);
        canvas.line(cx - half, q1, cx - half, q3, color);
        canvas.line(cx + half, q1, cx + half, q3, color);
        // Median and whiskers with caps.
        canvas.line(cx - half, med, cx + half, med, FRAME);
        canvas.line(cx, q3, cx, wu, color);
        canvas.line(cx, q1, cx, wl, color);
        canvas.line(cx - half / 2, wu, cx + half / 2, wu, color);
        canvas.line(cx - half / 2, wl, cx + half / 2, wl, color);
        for &o in &g.outliers {
            canvas.dot(cx, canvas.y_px(sy, o), 2, color);
        }
    }
    canvas.save(path)
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, EvalError> {
    let file = std::fs::File::create(path).map_err(|source| EvalError::Io {
        action: "create",
        path: path.to_path_buf(),
        source,
    })?;
    Ok(std::io::BufWriter::new(file))
}

fn finish(path: &Path, res: std::io::Result<()>) -> Result<(), EvalError> {
    res.map_err(|source| EvalError::Io {
        action: "write",
        path: path.to_path_buf(),
        source,
    })
}

/// (x, y, label) rows, e.g. the PCA scatter's `pc1,pc2,label`.
pub fn write_xy_csv(
    path: &Path,
    header: &str,
    rows: &[(f64, f64, String)],
) -> Result<(), EvalError> {
    let mut out = csv_writer(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(out, "{header}")?;
        for (x, y, label) in rows {
            writeln!(out, "{x},{y},{label}")?;
        }
        out.flush()
    })();
    finish(path, res)
}

/// (x, y) rows, e.g. loss curves and per-point absolute error series.
pub fn write_series_csv(path: &Path, header: &str, rows: &[(f64, f64)]) -> Result<(), EvalError> {
    let mut out = csv_writer(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(out, "{header}")?;
        for (x, y) in rows {
            writeln!(out, "{x},{y}")?;
        }
        out.flush()
    })();
    finish(path, res)
}

/// Raw per-trajectory values behind a box plot: `group,agent_id,rmse`.
pub fn write_box_plot_csv(
    path: &Path,
    groups: &[(String, Vec<(u64, f64)>)],
) -> Result<(), EvalError> {
    let mut out = csv_writer(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(out, "group,agent_id,rmse")?;
        for (name, values) in groups {
            for (agent_id, rmse) in values {
                writeln!(out, "{name},{agent_id},{rmse}")?;
            }
        }
        out.flush()
    })();
    finish(path, res)
}
