//! Minimal PNG chart rendering: grouped bars and scatter plots with
//! bitmap-font labels. Deterministic output for identical inputs.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};

use crate::font::{glyph, GLYPH_W};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FG: Rgb<u8> = Rgb([30, 30, 30]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([66, 110, 180]),
    Rgb([214, 96, 77]),
    Rgb([85, 160, 100]),
    Rgb([150, 110, 180]),
    Rgb([220, 170, 60]),
    Rgb([100, 100, 100]),
];

pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(w: u32, h: u32) -> Self {
        let mut img = RgbImage::new(w, h);
        for p in img.pixels_mut() {
            *p = BG;
        }
        Canvas { img }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    pub fn hline(&mut self, x0: i64, x1: i64, y: i64, c: Rgb<u8>) {
        for x in x0.min(x1)..=x0.max(x1) {
            self.put(x, y, c);
        }
    }

    pub fn vline(&mut self, x: i64, y0: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.put(x, y, c);
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
        for yy in y..y + h {
            self.hline(x, x + w - 1, yy, c);
        }
    }

    pub fn disc(&mut self, cx: i64, cy: i64, r: i64, c: Rgb<u8>) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        let mut cx = x;
        for ch in s.chars() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                        self.put(cx + col as i64, y + row as i64, c);
                    }
                }
            }
            cx += GLYPH_W as i64 + 1;
        }
    }

    pub fn text_w(s: &str) -> i64 {
        (s.chars().count() * (GLYPH_W + 1)) as i64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// Grouped bar chart: one group per x label, one bar per series.
pub fn grouped_bars(
    path: &Path,
    title: &str,
    ylabel: &str,
    group_labels: &[String],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    let (w, h) = (760u32, 420u32);
    let (left, right, top, bottom) = (70i64, 20i64, 40i64, 70i64);
    let plot_w = w as i64 - left - right;
    let plot_h = h as i64 - top - bottom;
    let mut cv = Canvas::new(w, h);

    let max_v = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = plot_h as f64 / (max_v * 1.1);

    cv.text(left, 14, title, FG);
    cv.text(8, top - 20, ylabel, FG);
    cv.hline(left, left + plot_w, top + plot_h, FG);
    cv.vline(left, top, top + plot_h, FG);
    for i in 0..=4 {
        let v = max_v * 1.1 * i as f64 / 4.0;
        let y = top + plot_h - (v * scale) as i64;
        cv.hline(left - 3, left, y, FG);
        cv.text(6, y - 3, &format!("{v:.3}"), FG);
    }

    let groups = group_labels.len() as i64;
    let group_w = plot_w / groups.max(1);
    let bar_w = ((group_w - 10) / series.len().max(1) as i64).max(2);
    for (gi, glabel) in group_labels.iter().enumerate() {
        let gx = left + gi as i64 * group_w;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(gi).copied().unwrap_or(0.0);
            let bh = (v * scale) as i64;
            let x = gx + 5 + si as i64 * bar_w;
            cv.fill_rect(x, top + plot_h - bh, bar_w - 1, bh, PALETTE[si % PALETTE.len()]);
        }
        let lw = Canvas::text_w(glabel);
        cv.text(gx + (group_w - lw) / 2, top + plot_h + 8, glabel, FG);
    }
    // legend
    let mut lx = left;
    let ly = h as i64 - 28;
    for (si, (name, _)) in series.iter().enumerate() {
        cv.fill_rect(lx, ly, 10, 10, PALETTE[si % PALETTE.len()]);
        cv.text(lx + 14, ly + 1, name, FG);
        lx += 14 + Canvas::text_w(name) + 18;
    }
    cv.save(path)
}

/// Scatter plot with per-point labels.
pub fn scatter(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    points: &[(f64, f64, String)],
) -> Result<()> {
    let (w, h) = (720u32, 420u32);
    let (left, right, top, bottom) = (80i64, 30i64, 40i64, 60i64);
    let plot_w = w as i64 - left - right;
    let plot_h = h as i64 - top - bottom;
    let mut cv = Canvas::new(w, h);

    let max_x = points.iter().map(|p| p.0).fold(0.0f64, f64::max).max(1e-12) * 1.15;
    let max_y = points.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1e-12) * 1.15;

    cv.text(left, 14, title, FG);
    cv.text(8, top - 20, ylabel, FG);
    let xw = Canvas::text_w(xlabel);
    cv.text(left + (plot_w - xw) / 2, h as i64 - 16, xlabel, FG);
    cv.hline(left, left + plot_w, top + plot_h, FG);
    cv.vline(left, top, top + plot_h, FG);
    for i in 0..=4 {
        let vx = max_x * i as f64 / 4.0;
        let x = left + (vx / max_x * plot_w as f64) as i64;
        cv.vline(x, top + plot_h, top + plot_h + 3, FG);
        cv.text(x - 10, top + plot_h + 8, &format!("{vx:.1}"), FG);
        let vy = max_y * i as f64 / 4.0;
        let y = top + plot_h - (vy / max_y * plot_h as f64) as i64;
        cv.hline(left - 3, left, y, FG);
        cv.text(6, y - 3, &format!("{vy:.3}"), FG);
    }
    for (i, (x, y, label)) in points.iter().enumerate() {
        let px = left + (x / max_x * plot_w as f64) as i64;
        let py = top + plot_h - (y / max_y * plot_h as f64) as i64;
        cv.disc(px, py, 4, PALETTE[i % PALETTE.len()]);
        cv.text(px + 8, py - 3, label, FG);
    }
    cv.save(path)
}
