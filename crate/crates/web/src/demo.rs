//! Plain-Rust operations behind the browser demo.

use tomesd::config::ToMeConfig;
use tomesd::matching::{build_merge_plan, RatioPolicy};
use tomesd::merging::{apply_merge, apply_prune, apply_unmerge};
use tomesd::metrics::{speedup_estimate, FlopTotals};
use tomesd::partition::{make_partition, GridShape, PartitionScheme, PartitionVariant};
use tomesd::rng::{Purpose, Rng};
use tomesd::unet::{flop_count, ComponentFlops, UNetSpec};
use tomesd::viz::{render_mask, render_merge_map, RgbImage};
use tomesd::Matrix;

fn variant(scheme: &str) -> Result<PartitionVariant, String> {
    scheme.parse().map_err(|e: tomesd::Error| e.to_string())
}

/// RGBA of the `dst` mask `scheme` draws on a `height x width` grid.
pub fn partition_rgba(scheme: &str, height: usize, width: usize, seed: u64, step: usize) -> Result<Vec<u8>, String> {
    let shape = GridShape::new(1, height, width).map_err(|e| e.to_string())?;
    let plan = make_partition(shape, &PartitionScheme::new(variant(scheme)?), &Rng::new(seed), step, 0)
        .map_err(|e| e.to_string())?;
    Ok(render_mask(plan.dst_mask(0), height, width)
        .map_err(|e| e.to_string())?
        .to_rgba())
}

/// A small procedural scene, one RGB token per pixel in `[0, 1]`.
pub fn scene(height: usize, width: usize, seed: u64) -> Matrix {
    let mut noise = Rng::new(seed).stream(Purpose::Demo, 0, 0);
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (v, u) = (y as f32 / height as f32, x as f32 / width as f32);
            let sun = ((u - 0.7).powi(2) + (v - 0.25).powi(2)).sqrt() < 0.12;
            let rgb = if sun {
                [1.0, 0.85, 0.3]
            } else if v < 0.6 {
                [0.25 + 0.3 * v, 0.45 + 0.3 * v, 0.9]
            } else {
                let stripe = if ((u * 8.0 + v * 4.0) as usize) % 2 == 0 { 0.1 } else { 0.0 };
                [0.2 + stripe, 0.55 - v * 0.3, 0.15]
            };
            data.extend(rgb.map(|c| (c + 0.03 * noise.normal() as f32).clamp(0.0, 1.0)));
        }
    }
    Matrix::from_vec(height * width, 3, data).expect("scene dimensions")
}

fn to_image(tokens: &Matrix, height: usize, width: usize) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    for (i, row) in tokens.iter_rows().enumerate() {
        let px = [row[0], row[1], row[2]].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        img.set(i % width, i / width, px);
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeView {
    pub source: Vec<u8>,
    pub merge_map: Vec<u8>,
    pub reconstruction: Vec<u8>,
    pub removed: usize,
    pub relative_error: f64,
}

/// Merges (or prunes) the scene's tokens at `ratio` and restores them.
pub fn merge_view(
    scheme: &str,
    ratio: f64,
    height: usize,
    width: usize,
    seed: u64,
    prune: bool,
) -> Result<MergeView, String> {
    let x = scene(height, width, seed);
    let shape = GridShape::new(1, height, width).map_err(|e| e.to_string())?;
    let partition = make_partition(shape, &PartitionScheme::new(variant(scheme)?), &Rng::new(seed), 0, 0)
        .map_err(|e| e.to_string())?;
    let policy = RatioPolicy::new(ratio).map_err(|e| e.to_string())?;
    let plan = build_merge_plan(&x, &partition, 0, policy).map_err(|e| e.to_string())?;
    let restored = if prune {
        apply_prune(&x, &plan)
    } else {
        apply_merge(&x, &plan).map(|m| apply_unmerge(&m))
    }
    .map_err(|e| e.to_string())?;
    let diff = restored.sub(&x).map_err(|e| e.to_string())?;
    Ok(MergeView {
        source: to_image(&x, height, width).to_rgba(),
        merge_map: render_merge_map(&plan, height, width)
            .map_err(|e| e.to_string())?
            .to_rgba(),
        reconstruction: to_image(&restored, height, width).to_rgba(),
        removed: plan.removed(),
        relative_error: diff.frobenius_norm() / x.frobenius_norm(),
    })
}

/// Analytic speedup of a toy U-Net over ratios `0, step, 2 step, ...` up to
/// the partition's capacity.
pub fn speedup_curve(
    latent: usize,
    channels: usize,
    components: &str,
    scheme: &str,
    step: f64,
) -> Result<Vec<f64>, String> {
    if !(step > 0.0) {
        return Err("step must be positive".into());
    }
    let spec = UNetSpec::pyramid(latent, latent, 3, 2, channels, 4);
    spec.validate().map_err(|e| e.to_string())?;
    let mut tome = ToMeConfig {
        partition: PartitionScheme::new(variant(scheme)?),
        apply_self: false,
        min_tokens: latent * latent,
        ..ToMeConfig::default()
    };
    for c in components.split(',').map(str::trim) {
        match c {
            "self" => tome.apply_self = true,
            "cross" => tome.apply_cross = true,
            "mlp" => tome.apply_mlp = true,
            other => return Err(format!("unknown component {other:?}")),
        }
    }
    let capacity = tome.partition.variant.src_count(latent, latent) as f64 / (latent * latent) as f64;
    let mut curve = Vec::new();
    let mut i = 0;
    loop {
        let ratio = i as f64 * step;
        if ratio >= capacity.min(1.0) {
            break;
        }
        let blocks = flop_count(&spec, &tome, ratio);
        let sum = |f: fn(&tomesd::unet::BlockFlops) -> ComponentFlops| {
            blocks.iter().fold(ComponentFlops::default(), |a, b| a.add(&f(b)))
        };
        let (baseline, merged) = (sum(|b| b.baseline), sum(|b| b.merged));
        curve.push(speedup_estimate(&FlopTotals {
            baseline_total: baseline.total(),
            merged_total: merged.total(),
            merge_overhead: 0,
            baseline,
            merged,
        }));
        i += 1;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_image_has_one_dst_per_tile() {
        let rgba = partition_rgba("rand2x2", 8, 8, 3, 0).unwrap();
        assert_eq!(rgba.len(), 8 * 8 * 4);
        let white = rgba.chunks(4).filter(|p| p[0] == 255).count();
        assert_eq!(white, 16);
        assert!(partition_rgba("bogus", 8, 8, 0, 0).is_err());
    }

    #[test]
    fn merge_view_reports_error() {
        let none = merge_view("rand2x2", 0.0, 16, 16, 1, false).unwrap();
        assert_eq!(none.removed, 0);
        assert_eq!(none.relative_error, 0.0);
        assert_eq!(none.source, none.reconstruction);

        let merged = merge_view("rand2x2", 0.5, 16, 16, 1, false).unwrap();
        let pruned = merge_view("rand2x2", 0.5, 16, 16, 1, true).unwrap();
        assert_eq!(merged.removed, 128);
        assert!(merged.relative_error > 0.0);
        assert!(pruned.relative_error > merged.relative_error);
        assert!(merge_view("strided:2x2", 0.9, 16, 16, 1, false).is_err());
    }

    #[test]
    fn speedup_curve_is_monotone() {
        let curve = speedup_curve(32, 64, "self,cross,mlp", "rand2x2", 0.1).unwrap();
        assert_eq!(curve.len(), 8);
        assert_eq!(curve[0], 1.0);
        assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        assert!(speedup_curve(32, 64, "attn", "rand2x2", 0.1).is_err());
    }
}
