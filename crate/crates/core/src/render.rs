//! Scene rendering: the ground-truth power map as a color raster with
//! ground-truth rings, prediction crosses, and existence-probability
//! annotations, written as PNG.
//!
//! Conventions follow the reported visualization: green rings mark true
//! emitter cells, a red `+` marks a prediction with existence probability at
//! or above the threshold, a white `+` marks one below it, and each cross is
//! annotated with its probability. Rendering is a pure function of its
//! inputs, so repeated calls produce byte-identical files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{ImageEncoder, ImageError, Rgb, RgbImage};

use crate::grid::CellIndex;
use crate::loss::SlotPred;
use crate::propagation::{dbm_from_mw, GridMap, MapStage};
use crate::{Error, Result};

/// Default edge length in pixels of one grid cell in the output image.
pub const DEFAULT_SCALE: usize = 8;

const GREEN: Rgb<u8> = Rgb([0, 220, 60]);
const RED: Rgb<u8> = Rgb([255, 40, 40]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

/// Blue (low) through cyan, yellow, and red (high); `t` clamped to [0, 1].
fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let seg = |a: f64, b: f64| ((t - a) / (b - a)).clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.25 {
        (0.0, seg(0.0, 0.25), 1.0)
    } else if t < 0.5 {
        (0.0, 1.0, 1.0 - seg(0.25, 0.5))
    } else if t < 0.75 {
        (seg(0.5, 0.75), 1.0, 0.0)
    } else {
        (1.0, 1.0 - seg(0.75, 1.0), 0.0)
    };
    Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8])
}

/// 3x5 glyphs for probability annotations; rows are 3-bit masks.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0b000, 0b000, 0b000, 0b000, 0b000],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_text(img: &mut RgbImage, x0: i64, y0: i64, text: &str, color: Rgb<u8>) {
    let mut x = x0;
    for c in text.chars() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3 {
                if row & (0b100 >> dx) != 0 {
                    // One-pixel shadow keeps digits readable on any backdrop.
                    put(img, x + dx + 1, y0 + dy as i64 + 1, BLACK);
                    put(img, x + dx, y0 + dy as i64, color);
                }
            }
        }
        x += 4;
    }
}

fn draw_ring(img: &mut RgbImage, cy: f64, cx: f64, radius: f64, thickness: f64, color: Rgb<u8>) {
    let lo = (radius - thickness).max(0.0);
    let hi = radius + thickness;
    let y_min = (cy - hi).floor() as i64;
    let y_max = (cy + hi).ceil() as i64;
    let x_min = (cx - hi).floor() as i64;
    let x_max = (cx + hi).ceil() as i64;
    for y in y_min..=y_max {
        for x in x_min..=x_max {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d >= lo && d <= hi {
                put(img, x, y, color);
            }
        }
    }
}

fn draw_cross(img: &mut RgbImage, cy: f64, cx: f64, arm: i64, color: Rgb<u8>) {
    let y = cy.round() as i64;
    let x = cx.round() as i64;
    for d in -arm..=arm {
        put(img, x + d, y, color);
        put(img, x, y + d, color);
    }
}

/// Render one scene. `power` is the full ground-truth map (linear
/// milliwatts are converted to dBm for display; any other stage is shown
/// as-is), `truths` the true emitter cells, `slots` the localizer output,
/// and `gamma` the existence threshold. A probability of exactly `gamma`
/// draws the confident marker; the metrics-side detection rule stays
/// strictly greater.
pub fn render_scene(
    power: &GridMap,
    truths: &[CellIndex],
    slots: &[SlotPred],
    gamma: f64,
    scale: usize,
) -> Result<RgbImage> {
    if scale == 0 {
        return Err(Error::Config("render scale must be at least 1 pixel per cell".to_string()));
    }
    let (h, w) = (power.h, power.w);
    let display: Vec<f64> = match power.stage {
        MapStage::RawLinear => power.values.iter().map(|&mw| dbm_from_mw(mw)).collect(),
        _ => power.values.clone(),
    };
    let finite = display.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;

    let s = scale as i64;
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for u in 0..h {
        for v in 0..w {
            let val = display[u * w + v];
            let t = if !val.is_finite() || span <= 0.0 { 0.0 } else { (val - lo) / span };
            let color = colormap(t);
            for dy in 0..s {
                for dx in 0..s {
                    put(&mut img, v as i64 * s + dx, u as i64 * s + dy, color);
                }
            }
        }
    }

    let ring_radius = 1.4 * scale as f64;
    let ring_thickness = (scale as f64 / 6.0).max(0.7);
    for cell in truths {
        let cy = (cell.u as f64 - 0.5) * scale as f64;
        let cx = (cell.v as f64 - 0.5) * scale as f64;
        draw_ring(&mut img, cy, cx, ring_radius, ring_thickness, GREEN);
    }

    let arm = s.max(2);
    for slot in slots {
        let cy = slot.qu_hat * h as f64 * scale as f64;
        let cx = slot.qv_hat * w as f64 * scale as f64;
        let color = if slot.b_hat >= gamma { RED } else { WHITE };
        draw_cross(&mut img, cy, cx, arm, color);
        let label = format!("{:.2}", slot.b_hat);
        draw_text(&mut img, cx.round() as i64 + arm + 3, cy.round() as i64 - 2, &label, color);
    }
    Ok(img)
}

/// Text listing of all slots: exactly one line per slot, with the
/// denormalized pixel position and the strict-threshold detection verdict.
pub fn listing(slots: &[SlotPred], grid_h: usize, grid_w: usize, gamma: f64) -> String {
    slots
        .iter()
        .enumerate()
        .map(|(i, p)| {
            format!(
                "slot {i}: b={:.3} u={:.2}px v={:.2}px {}",
                p.b_hat,
                p.qu_hat * grid_h as f64,
                p.qv_hat * grid_w as f64,
                if p.b_hat > gamma { "detected" } else { "suppressed" }
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let encoder = image::codecs::png::PngEncoder::new(BufWriter::new(file));
    encoder
        .write_image(img.as_raw(), img.width(), img.height(), image::ColorType::Rgb8)
        .map_err(|e| match e {
            ImageError::IoError(io) => Error::Io(io),
            other => Error::Config(format!("png encoding failed: {other}")),
        })
}

/// In-memory PNG bytes; used by determinism checks.
pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut buf);
    encoder
        .write_image(img.as_raw(), img.width(), img.height(), image::ColorType::Rgb8)
        .map_err(|e| Error::Config(format!("png encoding failed: {e}")))?;
    Ok(buf)
}
