//! Source/destination splits of a token grid.
//!
//! Tokens are indexed row-major, `y * width + x`. Every scheme marks a set of
//! `dst` tokens; the rest are `src` and may merge into a `dst` token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(batch: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "grid dimensions must be positive, got batch {batch}, {height}x{width}"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
        })
    }

    /// Tokens per batch element.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionVariant {
    /// `dst` at odd flat indices.
    Alternating,
    /// `dst` where `y % sy == 0 && x % sx == 0`.
    Strided { sy: usize, sx: usize },
    /// `round(f * N)` uniformly drawn `dst` tokens.
    Random { dst_fraction: f64 },
    /// One uniformly drawn `dst` token per `ty x tx` tile.
    RandTile { ty: usize, tx: usize },
}

impl PartitionVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PartitionVariant::Alternating => Ok(()),
            PartitionVariant::Strided { sy, sx } if sy == 0 || sx == 0 => Err(Error::Partition(
                format!("strides must be at least 1, got {sy}x{sx}"),
            )),
            PartitionVariant::RandTile { ty, tx } if ty == 0 || tx == 0 => Err(Error::Partition(
                format!("tile dimensions must be at least 1, got {ty}x{tx}"),
            )),
            PartitionVariant::Random { dst_fraction }
                if !(dst_fraction > 0.0 && dst_fraction < 1.0) =>
            {
                Err(Error::Partition(format!(
                    "random dst fraction must lie in (0, 1), got {dst_fraction}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Number of `dst` tokens this scheme yields on a `height x width` grid.
    /// Every scheme yields a count that does not depend on the random draw.
    pub fn dst_count(&self, height: usize, width: usize) -> usize {
        let n = height * width;
        match *self {
            PartitionVariant::Alternating => n / 2,
            PartitionVariant::Strided { sy, sx } => height.div_ceil(sy) * width.div_ceil(sx),
            PartitionVariant::Random { dst_fraction } => {
                (dst_fraction * n as f64).round_ties_even() as usize
            }
            PartitionVariant::RandTile { ty, tx } => height.div_ceil(ty) * width.div_ceil(tx),
        }
    }

    /// Number of `src` tokens, the most a single block can merge away.
    pub fn src_count(&self, height: usize, width: usize) -> usize {
        (height * width).saturating_sub(self.dst_count(height, width))
    }

    pub fn is_random(&self) -> bool {
        matches!(
            self,
            PartitionVariant::Random { .. } | PartitionVariant::RandTile { .. }
        )
    }
}

impl fmt::Display for PartitionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PartitionVariant::Alternating => write!(f, "alt"),
            PartitionVariant::Strided { sy, sx } => write!(f, "strided:{sy}x{sx}"),
            PartitionVariant::Random { dst_fraction } => write!(f, "rand:{dst_fraction}"),
            PartitionVariant::RandTile { ty: 2, tx: 2 } => write!(f, "rand2x2"),
            PartitionVariant::RandTile { ty, tx } => write!(f, "randtile:{ty}x{tx}"),
        }
    }
}

fn parse_dims(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('x')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl FromStr for PartitionVariant {
    type Err = Error;

    /// Accepts `alt`, `strided:SYxSX`, `rand`, `rand:F`, `rand2x2` and `randtile:TYxTX`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Partition(format!("unrecognised partition scheme `{s}`"));
        let variant = match s {
            "alt" | "alternating" => PartitionVariant::Alternating,
            "rand" => PartitionVariant::Random { dst_fraction: 0.25 },
            "rand2x2" => PartitionVariant::RandTile { ty: 2, tx: 2 },
            _ => match s.split_once(':') {
                Some(("strided", dims)) => {
                    let (sy, sx) = parse_dims(dims).ok_or_else(bad)?;
                    PartitionVariant::Strided { sy, sx }
                }
                Some(("randtile", dims)) => {
                    let (ty, tx) = parse_dims(dims).ok_or_else(bad)?;
                    PartitionVariant::RandTile { ty, tx }
                }
                Some(("rand", f)) => PartitionVariant::Random {
                    dst_fraction: f.trim().parse().map_err(|_| bad())?,
                },
                _ => return Err(bad()),
            },
        };
        variant.validate()?;
        Ok(variant)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub variant: PartitionVariant,
    /// Share one random draw across the batch (required under guidance).
    pub batch_fix: bool,
}

impl PartitionScheme {
    pub fn new(variant: PartitionVariant) -> Self {
        Self {
            variant,
            batch_fix: true,
        }
    }

    pub fn with_batch_fix(mut self, batch_fix: bool) -> Self {
        self.batch_fix = batch_fix;
        self
    }
}

impl Default for PartitionScheme {
    fn default() -> Self {
        Self::new(PartitionVariant::RandTile { ty: 2, tx: 2 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    shape: GridShape,
    masks: Vec<Vec<bool>>,
    dst_count: usize,
}

impl PartitionPlan {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// `true` marks a `dst` token.
    pub fn dst_mask(&self, batch_index: usize) -> &[bool] {
        &self.masks[batch_index]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn dst_count(&self) -> usize {
        self.dst_count
    }

    pub fn src_count(&self) -> usize {
        self.shape.tokens() - self.dst_count
    }

    pub fn dst_fraction(&self) -> f64 {
        self.dst_count as f64 / self.shape.tokens() as f64
    }

    /// Keeps the first `batch` elements.
    pub fn truncate_batch(&self, batch: usize) -> Result<PartitionPlan> {
        if batch == 0 || batch > self.shape.batch {
            return Err(Error::Shape(format!(
                "cannot keep {batch} of {} batch elements",
                self.shape.batch
            )));
        }
        Ok(PartitionPlan {
            shape: GridShape {
                batch,
                ..self.shape
            },
            masks: self.masks[..batch].to_vec(),
            dst_count: self.dst_count,
        })
    }
}

/// Splits every batch element of `shape` into `src` and `dst`.
///
/// Randomness is drawn from the `(seed, step, layer)` stream. With
/// `batch_fix` every element reuses lane 0; without it element `b` draws
/// from lane `b + 1`.
pub fn make_partition(
    shape: GridShape,
    scheme: &PartitionScheme,
    rng: &Rng,
    step: usize,
    layer: usize,
) -> Result<PartitionPlan> {
    scheme.variant.validate()?;
    let n = shape.tokens();
    let dst_count = scheme.variant.dst_count(shape.height, shape.width);
    if dst_count == 0 || dst_count >= n {
        return Err(Error::Partition(format!(
            "{} on a {}x{} grid leaves {} dst and {} src tokens",
            scheme.variant,
            shape.height,
            shape.width,
            dst_count,
            n.saturating_sub(dst_count)
        )));
    }

    let draw = |lane: u64| -> Vec<bool> {
        let mut stream = rng.lane_stream(Purpose::Partition, step as u64, layer as u64, lane);
        let mut mask = vec![false; n];
        match scheme.variant {
            PartitionVariant::Alternating => {
                for (i, m) in mask.iter_mut().enumerate() {
                    *m = i % 2 == 1;
                }
            }
            PartitionVariant::Strided { sy, sx } => {
                for y in (0..shape.height).step_by(sy) {
                    for x in (0..shape.width).step_by(sx) {
                        mask[shape.index(y, x)] = true;
                    }
                }
            }
            PartitionVariant::Random { .. } => {
                for i in stream.sample_without_replacement(n, dst_count) {
                    mask[i] = true;
                }
            }
            PartitionVariant::RandTile { ty, tx } => {
                for y0 in (0..shape.height).step_by(ty) {
                    for x0 in (0..shape.width).step_by(tx) {
                        let th = ty.min(shape.height - y0);
                        let tw = tx.min(shape.width - x0);
                        let k = stream.below(th * tw);
                        mask[shape.index(y0 + k / tw, x0 + k % tw)] = true;
                    }
                }
            }
        }
        mask
    };

    let masks = if scheme.batch_fix || !scheme.variant.is_random() {
        vec![draw(0); shape.batch]
    } else {
        (0..shape.batch).map(|b| draw(b as u64 + 1)).collect()
    };
    Ok(PartitionPlan {
        shape,
        masks,
        dst_count,
    })
}

/// Fraction of each batch element's tokens assigned to `dst`.
pub fn dst_fraction(plan: &PartitionPlan) -> f64 {
    plan.dst_fraction()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn plan(b: usize, h: usize, w: usize, variant: PartitionVariant, seed: u64) -> PartitionPlan {
        make_partition(
            GridShape::new(b, h, w).unwrap(),
            &PartitionScheme::new(variant),
            &Rng::new(seed),
            0,
            0,
        )
        .unwrap()
    }

    fn dst_indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, &d)| d.then_some(i))
            .collect()
    }

    #[test]
    fn alternating_picks_odd_indices() {
        let p = plan(1, 1, 4, PartitionVariant::Alternating, 0);
        assert_eq!(dst_indices(p.dst_mask(0)), vec![1, 3]);
        assert_eq!(plan(1, 4, 4, PartitionVariant::Alternating, 0).dst_fraction(), 0.5);
    }

    #[test]
    fn alternating_forms_columns_on_even_width() {
        let p = plan(1, 4, 4, PartitionVariant::Alternating, 0);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(p.dst_mask(0)[y * 4 + x], x % 2 == 1);
            }
        }
    }

    #[test]
    fn strided_fractions() {
        let p = plan(1, 4, 4, PartitionVariant::Strided { sy: 2, sx: 2 }, 0);
        assert_eq!(p.dst_count(), 4);
        assert_eq!(dst_indices(p.dst_mask(0)), vec![0, 2, 8, 10]);
        assert_eq!(
            dst_fraction(&plan(1, 8, 8, PartitionVariant::Strided { sy: 2, sx: 4 }, 0)),
            0.125
        );
        assert_eq!(
            dst_fraction(&plan(1, 8, 8, PartitionVariant::Strided { sy: 4, sx: 4 }, 0)),
            0.0625
        );
    }

    #[test]
    fn rand_tile_one_dst_per_tile() {
        let p = plan(1, 4, 4, PartitionVariant::RandTile { ty: 2, tx: 2 }, 11);
        assert_eq!(p.dst_count(), 4);
        for ty in 0..2 {
            for tx in 0..2 {
                let n = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                    .filter(|(dy, dx)| p.dst_mask(0)[(ty * 2 + dy) * 4 + tx * 2 + dx])
                    .count();
                assert_eq!(n, 1);
            }
        }
    }

    #[test]
    fn rand_tile_edge_tiles_get_one_dst() {
        let p = plan(1, 5, 3, PartitionVariant::RandTile { ty: 2, tx: 2 }, 4);
        assert_eq!(p.dst_count(), 3 * 2);
        assert_eq!(p.dst_mask(0).iter().filter(|&&d| d).count(), 6);
    }

    #[test]
    fn random_count_rounds_half_to_even() {
        // 0.25 * 10 = 2.5 rounds to 2.
        let p = plan(1, 2, 5, PartitionVariant::Random { dst_fraction: 0.25 }, 1);
        assert_eq!(p.dst_count(), 2);
        assert_eq!(p.dst_mask(0).iter().filter(|&&d| d).count(), 2);
    }

    #[test]
    fn batch_fix_replicates_the_draw() {
        let p = plan(2, 8, 8, PartitionVariant::Random { dst_fraction: 0.25 }, 3);
        assert_eq!(p.dst_mask(0), p.dst_mask(1));
    }

    #[test]
    fn without_batch_fix_elements_differ() {
        let shape = GridShape::new(2, 8, 8).unwrap();
        let scheme =
            PartitionScheme::new(PartitionVariant::Random { dst_fraction: 0.25 }).with_batch_fix(false);
        let p = make_partition(shape, &scheme, &Rng::new(3), 0, 0).unwrap();
        assert_ne!(p.dst_mask(0), p.dst_mask(1));
    }

    #[test]
    fn empty_sets_are_rejected() {
        let shape = GridShape::new(1, 1, 1).unwrap();
        let err = make_partition(shape, &PartitionScheme::new(PartitionVariant::Alternating), &Rng::new(0), 0, 0);
        assert!(matches!(err, Err(Error::Partition(_))));
        let shape = GridShape::new(1, 4, 4).unwrap();
        let all_dst = PartitionScheme::new(PartitionVariant::Strided { sy: 1, sx: 1 });
        assert!(matches!(
            make_partition(shape, &all_dst, &Rng::new(0), 0, 0),
            Err(Error::Partition(_))
        ));
        assert!("rand:1.5".parse::<PartitionVariant>().is_err());
        assert!("strided:0x2".parse::<PartitionVariant>().is_err());
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["alt", "strided:2x4", "rand:0.25", "rand2x2", "randtile:3x2"] {
            let v: PartitionVariant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert_eq!(
            "rand".parse::<PartitionVariant>().unwrap(),
            PartitionVariant::Random { dst_fraction: 0.25 }
        );
    }

    fn any_variant() -> impl Strategy<Value = PartitionVariant> {
        prop_oneof![
            Just(PartitionVariant::Alternating),
            (1usize..5, 1usize..5).prop_map(|(sy, sx)| PartitionVariant::Strided { sy, sx }),
            (0.05f64..0.95).prop_map(|f| PartitionVariant::Random { dst_fraction: f }),
            (1usize..5, 1usize..5).prop_map(|(ty, tx)| PartitionVariant::RandTile { ty, tx }),
        ]
    }

    proptest! {
        #[test]
        fn mask_count_matches_dst_count(
            variant in any_variant(), h in 1usize..12, w in 1usize..12, seed: u64, fix: bool
        ) {
            let shape = GridShape::new(3, h, w).unwrap();
            let scheme = PartitionScheme::new(variant).with_batch_fix(fix);
            if let Ok(p) = make_partition(shape, &scheme, &Rng::new(seed), 1, 2) {
                for b in 0..3 {
                    let dst = p.dst_mask(b).iter().filter(|&&d| d).count();
                    prop_assert_eq!(dst, p.dst_count());
                    prop_assert!(dst >= 1 && dst < h * w);
                }
            }
        }

        #[test]
        fn rand_tile_full_tiles(seed: u64, ty in 1usize..4, tx in 1usize..4, a in 1usize..5, b in 1usize..5) {
            prop_assume!(ty * tx > 1);
            let p = plan(1, ty * a, tx * b, PartitionVariant::RandTile { ty, tx }, seed);
            prop_assert_eq!(p.dst_count(), a * b);
        }

        #[test]
        fn batch_fixed_plans_slice_consistently(variant in any_variant(), seed: u64, fix: bool) {
            let scheme = PartitionScheme::new(variant).with_batch_fix(fix);
            let rng = Rng::new(seed);
            let big = make_partition(GridShape::new(8, 6, 6).unwrap(), &scheme, &rng, 4, 1);
            let small = make_partition(GridShape::new(2, 6, 6).unwrap(), &scheme, &rng, 4, 1);
            if let (Ok(big), Ok(small)) = (big, small) {
                prop_assert_eq!(big.truncate_batch(2).unwrap(), small);
            }
        }

        #[test]
        fn deterministic(variant in any_variant(), seed: u64, step in 0usize..50, layer in 0usize..8) {
            let shape = GridShape::new(2, 7, 5).unwrap();
            let scheme = PartitionScheme::new(variant).with_batch_fix(false);
            let a = make_partition(shape, &scheme, &Rng::new(seed), step, layer);
            let b = make_partition(shape, &scheme, &Rng::new(seed), step, layer);
            prop_assert_eq!(a, b);
        }
    }
}
