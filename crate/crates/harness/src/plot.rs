//! Minimal line charts rendered straight to PNG.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;

/// One polyline of `(x, accuracy %)` points.
#[derive(Clone, Debug)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, dash: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut step = 0u32;
    loop {
        if !dash || (step / 5).is_multiple_of(2) {
            for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
                let (px, py) = (x + ox, y + oy);
                if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                    img.put_pixel(px as u32, py as u32, c);
                }
            }
        }
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
        step += 1;
    }
}

/// Accuracy curves on a fixed 0–100 % axis, with optional dashed vertical
/// marker (the end of the FL rounds). Horizontal grid lines every 25 %.
pub fn plot_curves(series: &[Series], marker: Option<f64>, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (0.0, 1.0)
    };
    let (left, right, top, bottom) = (
        MARGIN as f64,
        (W - MARGIN / 2) as f64,
        (MARGIN / 2) as f64,
        (H - MARGIN) as f64,
    );
    let px = |x: f64| (left + (x - lo) / (hi - lo) * (right - left)).round() as i64;
    let py = |y: f64| (bottom - y.clamp(0.0, 100.0) / 100.0 * (bottom - top)).round() as i64;
    let grid = Rgb([225, 225, 225]);
    for g in [25.0, 50.0, 75.0, 100.0] {
        line(&mut img, (px(lo), py(g)), (px(hi), py(g)), grid, false);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (px(lo), py(0.0)), (px(hi), py(0.0)), axis, false);
    line(&mut img, (px(lo), py(0.0)), (px(lo), py(100.0)), axis, false);
    if let Some(m) = marker.filter(|m| *m > lo && *m < hi) {
        line(&mut img, (px(m), py(0.0)), (px(m), py(100.0)), Rgb([90, 90, 90]), true);
    }
    for s in series {
        for w in s.points.windows(2) {
            line(
                &mut img,
                (px(w[0].0), py(w[0].1)),
                (px(w[1].0), py(w[1].1)),
                Rgb(s.color),
                false,
            );
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_and_marker() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.png");
        let s = Series {
            points: vec![(1.0, 10.0), (2.0, 50.0), (3.0, 90.0)],
            color: [255, 0, 0],
        };
        plot_curves(&[s], Some(2.5), &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|px| *px == Rgb([255, 0, 0])));
        assert!(img.pixels().any(|px| *px == Rgb([90, 90, 90])));
    }
}
