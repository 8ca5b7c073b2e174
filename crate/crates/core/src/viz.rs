//! Raster views of partitions and merge plans, one pixel per token.

use std::io::Write;

use crate::error::{Error, Result};
use crate::matching::MergePlan;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_ppm())
    }

    /// Row-major RGBA bytes, as used by canvas image data.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|&[r, g, b]| [r, g, b, 255])
            .collect()
    }
}

const DST: [u8; 3] = [255, 255, 255];
const SRC: [u8; 3] = [0, 0, 0];
const KEPT: [u8; 3] = [64, 64, 64];

fn check(len: usize, height: usize, width: usize) -> Result<()> {
    if len != height * width {
        return Err(Error::Shape(format!(
            "{len} tokens cannot be drawn on a {height}x{width} grid"
        )));
    }
    Ok(())
}

/// `dst` tokens white, `src` tokens black.
pub fn render_mask(dst_mask: &[bool], height: usize, width: usize) -> Result<RgbImage> {
    check(dst_mask.len(), height, width)?;
    let mut img = RgbImage::new(width, height);
    for (i, &d) in dst_mask.iter().enumerate() {
        img.set(i % width, i / width, if d { DST } else { SRC });
    }
    Ok(img)
}

/// Evenly spread hue for group `k`.
fn group_color(k: usize) -> [u8; 3] {
    let h = (k as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let f = h.fract();
    let (hi, lo) = (230.0, 60.0);
    let up = lo + (hi - lo) * f;
    let down = hi - (hi - lo) * f;
    let rgb = match h as usize {
        0 => [hi, up, lo],
        1 => [down, hi, lo],
        2 => [lo, hi, up],
        3 => [lo, down, hi],
        4 => [up, lo, hi],
        _ => [hi, lo, down],
    };
    rgb.map(|v: f64| v.round() as u8)
}

/// Every merged group (a `dst` and the `src` tokens folded into it) in its
/// own colour; untouched `dst` tokens dark grey, kept `src` tokens black.
pub fn render_merge_map(plan: &MergePlan, height: usize, width: usize) -> Result<RgbImage> {
    check(plan.token_count(), height, width)?;
    let mut img = RgbImage::new(width, height);
    let mut color_of = vec![None; plan.token_count()];
    let mut groups = 0;
    for e in plan.edges() {
        let c = *color_of[e.dst].get_or_insert_with(|| {
            groups += 1;
            group_color(groups - 1)
        });
        color_of[e.src] = Some(c);
    }
    for &d in plan.dst_indices() {
        color_of[d].get_or_insert(KEPT);
    }
    for (i, c) in color_of.into_iter().enumerate() {
        img.set(i % width, i / width, c.unwrap_or(SRC));
    }
    Ok(img)
}
