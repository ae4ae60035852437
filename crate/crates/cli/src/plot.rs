//! Loss-curve PNG for `inspect`: curves over a light grid, no text. The
//! colour legend is printed instead.

use std::path::Path;

use image::{Rgb, RgbImage};

use usaad::history::LossRow;
use usaad::Error;

const WIDTH: u32 = 960;
const HEIGHT: u32 = 540;
const MARGIN: f64 = 24.0;
const GRID: u32 = 10;

pub struct Series {
    pub iters: Vec<f64>,
    pub lines: Vec<(&'static str, [u8; 3], Vec<f64>)>,
}

impl Series {
    /// Per-iteration total rows (summed over scales).
    pub fn from_rows(rows: &[&LossRow]) -> Self {
        let col = |f: fn(&LossRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
        Self {
            iters: col(|r| r.iter as f64),
            lines: vec![
                ("total", [0, 0, 0], col(|r| r.total)),
                ("gan_bs", [214, 39, 40], col(|r| r.terms.gan_bs)),
                ("gan_sb", [255, 127, 14], col(|r| r.terms.gan_sb)),
                ("cyc_b", [31, 119, 180], col(|r| r.terms.cyc_b)),
                ("cyc_s", [44, 160, 44], col(|r| r.terms.cyc_s)),
            ],
        }
    }

    fn y_range(&self) -> (f64, f64) {
        let all = self.lines.iter().flat_map(|(_, _, v)| v.iter().copied()).filter(|v| v.is_finite());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return (-1.0, 1.0);
        }
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo - pad, hi + pad)
    }
}

pub fn legend(series: &Series) -> String {
    let parts: Vec<String> =
        series.lines.iter().map(|(name, [r, g, b], _)| format!("\"{name}\":\"#{r:02x}{g:02x}{b:02x}\"")).collect();
    format!("{{\"legend\":{{{}}}}}", parts.join(","))
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0.0, 0.0), (0.0, 1.0)] {
            let (px, py) = ((x + dx).round(), (y + dy).round());
            if px >= 0.0 && py >= 0.0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

pub fn render(series: &Series, out: &Path) -> Result<(), Error> {
    let fail = |e: String| Error::Data(format!("{}: {e}", out.display()));
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as f64 - 2.0 * MARGIN, HEIGHT as f64 - 2.0 * MARGIN);
    let grey = Rgb([225, 225, 225]);
    for k in 0..=GRID {
        let f = k as f64 / GRID as f64;
        line(&mut img, (MARGIN + f * w, MARGIN), (MARGIN + f * w, MARGIN + h), grey);
        line(&mut img, (MARGIN, MARGIN + f * h), (MARGIN + w, MARGIN + f * h), grey);
    }

    let x_lo = series.iters[0];
    let x_hi = series.iters.last().copied().unwrap_or(x_lo).max(x_lo + 1.0);
    let (y_lo, y_hi) = series.y_range();
    let to_px = |x: f64, y: f64| (MARGIN + (x - x_lo) / (x_hi - x_lo) * w, MARGIN + (y_hi - y) / (y_hi - y_lo) * h);
    for (_, rgb, values) in &series.lines {
        let points: Vec<(f64, f64)> = series
            .iters
            .iter()
            .zip(values)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| to_px(x, y))
            .collect();
        for pair in points.windows(2) {
            line(&mut img, pair[0], pair[1], Rgb(*rgb));
        }
        if let [only] = points[..] {
            line(&mut img, only, only, Rgb(*rgb));
        }
    }

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
    }
    img.save_with_format(out, image::ImageFormat::Png).map_err(|e| fail(e.to_string()))
}
