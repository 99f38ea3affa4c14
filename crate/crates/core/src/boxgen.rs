//! Box prompts derived from instance masks: tight boxes and seeded
//! random-offset boxes that imitate hand-placed annotations.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csvio::{read_csv, write_csv};
use crate::dataset::{CellClass, Corpus, InstanceMask};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    Tight,
    Random,
}

impl fmt::Display for BoxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxKind::Tight => "tight",
            BoxKind::Random => "random",
        })
    }
}

/// Axis-aligned box with inclusive bounds. One row of `boxes.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub patch_id: String,
    pub instance_id: String,
    pub cell_class: CellClass,
    pub kind: BoxKind,
    pub r_min: usize,
    pub c_min: usize,
    pub r_max: usize,
    pub c_max: usize,
    pub seed: u64,
    pub draw_index: u32,
}

impl BoxPrompt {
    pub fn height(&self) -> usize {
        self.r_max - self.r_min + 1
    }

    pub fn width(&self) -> usize {
        self.c_max - self.c_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    #[inline]
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r_min..=self.r_max).contains(&r) && (self.c_min..=self.c_max).contains(&c)
    }

    pub fn coords(&self) -> (usize, usize, usize, usize) {
        (self.r_min, self.c_min, self.r_max, self.c_max)
    }

    /// Checks ordering and that the box fits an image of `dims`.
    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        if self.r_min > self.r_max
            || self.c_min > self.c_max
            || self.r_max >= dims.0
            || self.c_max >= dims.1
        {
            return Err(Error::Invalid(format!(
                "box {}/{} ({},{},{},{}) invalid for {}x{} image",
                self.patch_id,
                self.instance_id,
                self.r_min,
                self.c_min,
                self.r_max,
                self.c_max,
                dims.0,
                dims.1
            )));
        }
        Ok(())
    }
}

/// Offset magnitude: absolute pixels, or a fraction of the tight box side
/// along the same axis (rounded, at least 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxOffset {
    Pixels(u32),
    Fraction(f64),
}

impl Default for MaxOffset {
    fn default() -> Self {
        MaxOffset::Fraction(0.1)
    }
}

impl MaxOffset {
    fn for_side(self, side: usize) -> i64 {
        match self {
            MaxOffset::Pixels(p) => i64::from(p),
            MaxOffset::Fraction(f) => ((f * side as f64).round() as i64).max(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub max_offset: MaxOffset,
    pub seed: u64,
    pub samples_per_instance: u32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            max_offset: MaxOffset::default(),
            seed: 0,
            samples_per_instance: 1,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if let MaxOffset::Fraction(f) = self.max_offset {
            if !(f.is_finite() && f >= 0.0) {
                return Err(Error::Invalid(format!("max_offset fraction {f} must be >= 0")));
            }
        }
        if self.samples_per_instance == 0 {
            return Err(Error::Invalid("samples_per_instance must be >= 1".into()));
        }
        Ok(())
    }
}

/// Minimal box containing every foreground pixel of `mask`.
pub fn tight_box(mask: &InstanceMask) -> Result<BoxPrompt> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (r, c, &on) in mask.mask.iter_indexed() {
        if !on {
            continue;
        }
        bounds = Some(match bounds {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    let (r_min, c_min, r_max, c_max) =
        bounds.ok_or_else(|| Error::EmptyMask(mask.instance_id.clone()))?;
    Ok(BoxPrompt {
        patch_id: mask.patch_id.clone(),
        instance_id: mask.instance_id.clone(),
        cell_class: mask.cell_class,
        kind: BoxKind::Tight,
        r_min,
        c_min,
        r_max,
        c_max,
        seed: 0,
        draw_index: 0,
    })
}

/// Perturbs each coordinate of a tight box by an independent uniform integer
/// offset, swaps an inverted axis, then clamps into the image.
///
/// The stream is keyed by `(cfg.seed, patch_id, instance_id, draw_index)`, so
/// the result does not depend on the order in which boxes are generated.
pub fn random_box(
    tight: &BoxPrompt,
    cfg: &PerturbConfig,
    draw_index: u32,
    dims: (usize, usize),
) -> Result<BoxPrompt> {
    if tight.kind != BoxKind::Tight {
        return Err(Error::Invalid(format!(
            "random_box expects a tight box, got {} for {}",
            tight.kind, tight.instance_id
        )));
    }
    tight.validate(dims)?;
    let mut rng = seeding::stream(
        cfg.seed,
        &[
            b"random_box",
            tight.patch_id.as_bytes(),
            tight.instance_id.as_bytes(),
            &draw_index.to_le_bytes(),
        ],
    );
    let row_off = cfg.max_offset.for_side(tight.height());
    let col_off = cfg.max_offset.for_side(tight.width());
    let mut draw = |m: i64| if m == 0 { 0 } else { rng.gen_range(-m..=m) };
    let mut r0 = tight.r_min as i64 + draw(row_off);
    let mut c0 = tight.c_min as i64 + draw(col_off);
    let mut r1 = tight.r_max as i64 + draw(row_off);
    let mut c1 = tight.c_max as i64 + draw(col_off);
    if r0 > r1 {
        std::mem::swap(&mut r0, &mut r1);
    }
    if c0 > c1 {
        std::mem::swap(&mut c0, &mut c1);
    }
    let clamp = |v: i64, len: usize| v.clamp(0, len as i64 - 1) as usize;
    Ok(BoxPrompt {
        kind: BoxKind::Random,
        r_min: clamp(r0, dims.0),
        c_min: clamp(c0, dims.1),
        r_max: clamp(r1, dims.0),
        c_max: clamp(c1, dims.1),
        seed: cfg.seed,
        draw_index,
        ..tight.clone()
    })
}

/// One tight box per instance, or `samples_per_instance` random boxes per
/// instance, sorted by `(patch_id, instance_id, draw_index)`.
pub fn boxes_for_corpus(corpus: &Corpus, mode: BoxKind, cfg: &PerturbConfig) -> Result<Vec<BoxPrompt>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for inst in corpus.instances() {
        let mut tight = tight_box(inst)?;
        tight.seed = cfg.seed;
        match mode {
            BoxKind::Tight => out.push(tight),
            BoxKind::Random => {
                let dims = inst.mask.dims();
                for d in 0..cfg.samples_per_instance {
                    out.push(random_box(&tight, cfg, d, dims)?);
                }
            }
        }
    }
    out.sort_by(|a, b| {
        (a.patch_id.as_str(), a.instance_id.as_str(), a.draw_index)
            .cmp(&(b.patch_id.as_str(), b.instance_id.as_str(), b.draw_index))
    });
    Ok(out)
}

pub fn write_boxes_csv(path: &Path, boxes: &[BoxPrompt]) -> Result<()> {
    write_csv(path, boxes)
}

pub fn read_boxes_csv(path: &Path) -> Result<Vec<BoxPrompt>> {
    read_csv(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn inst(dims: (usize, usize), pixels: &[(usize, usize)]) -> InstanceMask {
        let mut g = Grid::filled(dims.0, dims.1, false);
        for &(r, c) in pixels {
            g.set(r, c, true);
        }
        InstanceMask::new("i", "p", CellClass::Podocyte, g).unwrap()
    }

    #[test]
    fn tight_box_of_two_pixels() {
        let b = tight_box(&inst((8, 8), &[(2, 3), (5, 7)])).unwrap();
        assert_eq!(b.coords(), (2, 3, 5, 7));
        assert_eq!(b.kind, BoxKind::Tight);
    }

    #[test]
    fn tight_box_single_pixel_and_full_frame() {
        assert_eq!(tight_box(&inst((8, 8), &[(4, 4)])).unwrap().coords(), (4, 4, 4, 4));
        let full = InstanceMask::new("f", "p", CellClass::Mesangial, Grid::filled(512, 512, true))
            .unwrap();
        assert_eq!(tight_box(&full).unwrap().coords(), (0, 0, 511, 511));
    }

    #[test]
    fn zero_offset_is_identity() {
        let t = tight_box(&inst((20, 20), &[(3, 4), (9, 12)])).unwrap();
        let cfg = PerturbConfig {
            max_offset: MaxOffset::Pixels(0),
            seed: 5,
            samples_per_instance: 1,
        };
        for d in 0..10 {
            let b = random_box(&t, &cfg, d, (20, 20)).unwrap();
            assert_eq!(b.coords(), t.coords());
            assert_eq!(b.kind, BoxKind::Random);
        }
    }

    #[test]
    fn huge_offset_is_clamped() {
        let t = tight_box(&inst((10, 10), &[(0, 0), (5, 5)])).unwrap();
        let cfg = PerturbConfig {
            max_offset: MaxOffset::Pixels(100),
            seed: 1,
            samples_per_instance: 1,
        };
        for d in 0..200 {
            let b = random_box(&t, &cfg, d, (10, 10)).unwrap();
            b.validate((10, 10)).unwrap();
        }
    }

    #[test]
    fn deterministic_per_draw() {
        let t = tight_box(&inst((64, 64), &[(10, 10), (30, 40)])).unwrap();
        let cfg = PerturbConfig {
            max_offset: MaxOffset::Pixels(6),
            seed: 42,
            samples_per_instance: 1,
        };
        let a = random_box(&t, &cfg, 3, (64, 64)).unwrap();
        let b = random_box(&t, &cfg, 3, (64, 64)).unwrap();
        assert_eq!(a, b);
        let draws: std::collections::BTreeSet<_> = (0..20)
            .map(|d| random_box(&t, &cfg, d, (64, 64)).unwrap().coords())
            .collect();
        assert!(draws.len() > 1);
    }

    #[test]
    fn default_offset_scales_with_side() {
        assert_eq!(MaxOffset::Fraction(0.1).for_side(40), 4);
        assert_eq!(MaxOffset::Fraction(0.1).for_side(3), 1);
        assert_eq!(MaxOffset::Pixels(7).for_side(3), 7);
    }

    #[test]
    fn random_requires_tight_input() {
        let mut t = tight_box(&inst((8, 8), &[(1, 1)])).unwrap();
        t.kind = BoxKind::Random;
        assert!(random_box(&t, &PerturbConfig::default(), 0, (8, 8)).is_err());
    }

    fn random_mask() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
        (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), proptest::collection::vec(any::<bool>(), h * w))
        })
    }

    proptest! {
        #[test]
        fn tight_box_contains_and_is_minimal((h, w, mut bits) in random_mask()) {
            if !bits.iter().any(|&b| b) { bits[0] = true; }
            let m = InstanceMask::new("i", "p", CellClass::Podocyte, Grid::from_vec(h, w, bits).unwrap()).unwrap();
            let b = tight_box(&m).unwrap();
            let on: Vec<(usize, usize)> = m.mask.iter_indexed().filter(|t| *t.2).map(|t| (t.0, t.1)).collect();
            prop_assert!(on.iter().all(|&(r, c)| b.contains(r, c)));
            prop_assert!(on.iter().any(|&(r, _)| r == b.r_min));
            prop_assert!(on.iter().any(|&(r, _)| r == b.r_max));
            prop_assert!(on.iter().any(|&(_, c)| c == b.c_min));
            prop_assert!(on.iter().any(|&(_, c)| c == b.c_max));
        }

        #[test]
        fn random_box_always_valid((h, w, mut bits) in random_mask(), seed in any::<u64>(),
                                   off in 0u32..40, draw in 0u32..1000) {
            if !bits.iter().any(|&b| b) { bits[0] = true; }
            let m = InstanceMask::new("i", "p", CellClass::Mesangial, Grid::from_vec(h, w, bits).unwrap()).unwrap();
            let t = tight_box(&m).unwrap();
            let cfg = PerturbConfig { max_offset: MaxOffset::Pixels(off), seed, samples_per_instance: 1 };
            let b = random_box(&t, &cfg, draw, (h, w)).unwrap();
            prop_assert!(b.validate((h, w)).is_ok());
            prop_assert!(b.area() >= 1);
            prop_assert_eq!(b, random_box(&t, &cfg, draw, (h, w)).unwrap());
        }
    }
}
