//! Synthetic blob corpora: disjoint disks of two cell classes on a textured
//! background, plus a copy whose instance masks are partly corrupted by
//! dilation or erosion.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csvio::write_csv;
use crate::dataset::{write_corpus, CellClass, Corpus, InstanceMask, Modality, Patch, Rgb, Stratum};
use crate::error::{Error, Result};
use crate::grid::{BoolGrid, Grid};
use crate::morph;
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Fraction of all instances whose annotation is corrupted.
    pub corruption_fraction: f64,
    pub dilate_px: u32,
    pub erode_px: u32,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            corruption_fraction: 0.0,
            dilate_px: 2,
            erode_px: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_patches: usize,
    pub patch_size: usize,
    /// Inclusive range of blobs per class per patch.
    pub blobs_per_class: (usize, usize),
    /// Inclusive range of disk radii in pixels.
    pub radius: (usize, usize),
    /// Fraction of patches in the injured stratum.
    pub injured_fraction: f64,
    pub n_annotators: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_patches: 50,
            patch_size: 64,
            blobs_per_class: (1, 3),
            radius: (4, 7),
            injured_fraction: 0.4,
            n_annotators: 1,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patches == 0 || self.patch_size == 0 {
            return bad("n_patches and patch_size must be positive".into());
        }
        if self.blobs_per_class.0 > self.blobs_per_class.1 {
            return bad(format!("blobs_per_class {:?} is not a range", self.blobs_per_class));
        }
        if self.radius.0 == 0 || self.radius.0 > self.radius.1 {
            return bad(format!("radius {:?} must be a positive range", self.radius));
        }
        if !(0.0..=1.0).contains(&self.injured_fraction) {
            return bad(format!("injured_fraction {} not in [0, 1]", self.injured_fraction));
        }
        if !(0.0..=1.0).contains(&self.noise.corruption_fraction) {
            return bad(format!(
                "corruption_fraction {} not in [0, 1]",
                self.noise.corruption_fraction
            ));
        }
        if self.noise.corruption_fraction > 0.0 && self.noise.dilate_px == 0 && self.noise.erode_px == 0 {
            return bad("corruption needs dilate_px or erode_px > 0".into());
        }
        if self.n_annotators == 0 {
            return bad("n_annotators must be at least 1".into());
        }
        Ok(())
    }

    /// Blobs are kept this far apart so corrupted masks of neighbors stay disjoint.
    fn gap(&self) -> usize {
        2 * self.noise.dilate_px as usize + 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    None,
    Dilate,
    Erode,
}

/// One row of `corruption.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub patch_id: String,
    pub instance_id: String,
    pub cell_class: CellClass,
    pub corruption: Corruption,
    pub radius_px: u32,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub clean: Corpus,
    pub noisy: Corpus,
    pub corruption: Vec<CorruptionRow>,
}

struct Disk {
    r: usize,
    c: usize,
    radius: usize,
    class: CellClass,
}

fn disk_mask(size: usize, d: &Disk) -> BoolGrid {
    let rr = (d.radius * d.radius) as i64;
    BoolGrid::from_fn(size, size, |r, c| {
        let (dr, dc) = (r as i64 - d.r as i64, c as i64 - d.c as i64);
        dr * dr + dc * dc <= rr
    })
}

/// Rejection-samples non-overlapping disks fully inside the patch.
fn place_disks(spec: &SyntheticSpec, rng: &mut impl Rng, patch_id: &str) -> Result<Vec<Disk>> {
    let size = spec.patch_size;
    let mut wanted = Vec::new();
    for class in CellClass::ALL {
        let n = rng.gen_range(spec.blobs_per_class.0..=spec.blobs_per_class.1);
        wanted.extend(std::iter::repeat(class).take(n));
    }
    wanted.shuffle(rng);
    let gap = spec.gap();
    let mut disks: Vec<Disk> = Vec::with_capacity(wanted.len());
    for class in wanted {
        let mut placed = false;
        for _ in 0..2000 {
            let radius = rng.gen_range(spec.radius.0..=spec.radius.1);
            if 2 * radius + 1 > size {
                break;
            }
            let r = rng.gen_range(radius..size - radius);
            let c = rng.gen_range(radius..size - radius);
            let clear = disks.iter().all(|d| {
                let (dr, dc) = (r as f64 - d.r as f64, c as f64 - d.c as f64);
                (dr * dr + dc * dc).sqrt() > (radius + d.radius + gap) as f64
            });
            if clear {
                disks.push(Disk { r, c, radius, class });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasiblePacking(format!(
                "could not place {} disks of radius {:?} with gap {gap} in a {size}x{size} patch ({patch_id})",
                spec.blobs_per_class.1 * 2,
                spec.radius
            )));
        }
    }
    Ok(disks)
}

/// Class 1 is bright, red and speckled; class 2 is dark, blue and smooth.
fn render(spec: &SyntheticSpec, disks: &[Disk], stratum: Stratum, rng: &mut impl Rng) -> Grid<Rgb> {
    let size = spec.patch_size;
    let noise = Normal::new(0.0, 6.0).expect("valid std");
    let speckle = Normal::new(0.0, 28.0).expect("valid std");
    let base: [f64; 3] = match stratum {
        Stratum::Normal => [226.0, 190.0, 214.0],
        Stratum::Injured => [210.0, 176.0, 204.0],
    };
    let mut label = Grid::filled(size, size, 0u8);
    for d in disks {
        for (r, c, &on) in disk_mask(size, d).iter_indexed() {
            if on {
                label.set(r, c, d.class.index());
            }
        }
    }
    Grid::from_fn(size, size, |r, c| {
        let (mean, tex) = match *label.get(r, c) {
            1 => ([205.0, 95.0, 120.0], speckle.sample(rng)),
            2 => ([95.0, 70.0, 170.0], 0.0),
            _ => (base, 0.0),
        };
        let mut px = [0u8; 3];
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (mean[ch] + tex + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
        px
    })
}

/// Builds the clean and corrupted corpora in memory. Deterministic in
/// `spec.seed`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let n_injured = (spec.injured_fraction * spec.n_patches as f64).round() as usize;
    let mut strata: Vec<Stratum> = (0..spec.n_patches)
        .map(|i| if i < n_injured { Stratum::Injured } else { Stratum::Normal })
        .collect();
    strata.shuffle(&mut seeding::stream(spec.seed, &[b"strata"]));

    let mut patches = Vec::with_capacity(spec.n_patches);
    let mut instances = Vec::new();
    for (i, &stratum) in strata.iter().enumerate() {
        let patch_id = format!("p{i:05}");
        let mut rng = seeding::stream(spec.seed, &[b"patch", patch_id.as_bytes()]);
        let disks = place_disks(spec, &mut rng, &patch_id)?;
        let image = render(spec, &disks, stratum, &mut rng);
        for (j, d) in disks.iter().enumerate() {
            instances.push(InstanceMask::new(
                format!("i{j:03}"),
                patch_id.clone(),
                d.class,
                disk_mask(spec.patch_size, d),
            )?);
        }
        patches.push(Patch {
            patch_id,
            image,
            modality: Modality::Pas,
            stratum,
            source_wsi: format!("wsi{:02}", i % 11),
            annotator_id: format!("a{}", i % spec.n_annotators),
        });
    }
    let clean = Corpus::new(patches.clone(), instances, Default::default())?;

    let n = clean.instances().len();
    let n_corrupt = (spec.noise.corruption_fraction * n as f64).round() as usize;
    let mut rng = seeding::stream(spec.seed, &[b"corruption"]);
    let mut chosen = vec![false; n];
    for k in sample(&mut rng, n, n_corrupt) {
        chosen[k] = true;
    }
    let mut noisy_instances = Vec::with_capacity(n);
    let mut corruption = Vec::with_capacity(n);
    for (inst, &corrupt) in clean.instances().iter().zip(&chosen) {
        let (mask, kind, radius) = if corrupt {
            corrupt_mask(&inst.mask, &spec.noise, &mut rng)
        } else {
            (inst.mask.clone(), Corruption::None, 0)
        };
        corruption.push(CorruptionRow {
            patch_id: inst.patch_id.clone(),
            instance_id: inst.instance_id.clone(),
            cell_class: inst.cell_class,
            corruption: kind,
            radius_px: radius,
        });
        noisy_instances.push(InstanceMask::new(
            inst.instance_id.clone(),
            inst.patch_id.clone(),
            inst.cell_class,
            mask,
        )?);
    }
    let noisy = Corpus::new(patches, noisy_instances, Default::default())?;
    Ok(SyntheticCorpus {
        clean,
        noisy,
        corruption,
    })
}

/// Dilates or erodes (coin flip among the enabled operations). Erosion
/// shrinks its radius until the mask stays non-empty and falls back to
/// dilation when even radius 1 would empty it.
fn corrupt_mask(mask: &BoolGrid, noise: &NoiseSpec, rng: &mut impl Rng) -> (BoolGrid, Corruption, u32) {
    let erode_first = match (noise.dilate_px, noise.erode_px) {
        (0, _) => true,
        (_, 0) => false,
        _ => rng.gen_bool(0.5),
    };
    if erode_first {
        for radius in (1..=noise.erode_px).rev() {
            let m = morph::erode(mask, radius as usize);
            if m.count_true() > 0 {
                return (m, Corruption::Erode, radius);
            }
        }
    }
    let radius = noise.dilate_px.max(1);
    (morph::dilate(mask, radius as usize), Corruption::Dilate, radius)
}

/// Writes `<root>/clean/`, `<root>/noisy/` (standard corpus layout, label
/// maps included) and `<root>/corruption.csv`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticCorpus> {
    let mut synth = synthesize(spec)?;
    synth.clean.fill_labelmaps(Default::default())?;
    synth.noisy.fill_labelmaps(Default::default())?;
    write_corpus(&synth.clean, &root.join("clean"))?;
    write_corpus(&synth.noisy, &root.join("noisy"))?;
    write_csv(&root.join("corruption.csv"), &synth.corruption)?;
    Ok(synth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_patches: 12,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synthesize(&spec()).unwrap();
        let b = synthesize(&spec()).unwrap();
        assert_eq!(a.clean.patches(), b.clean.patches());
        assert_eq!(a.noisy.instances(), b.noisy.instances());
        let c = synthesize(&SyntheticSpec { seed: 1, ..spec() }).unwrap();
        assert_ne!(a.clean.patches(), c.clean.patches());
    }

    #[test]
    fn zero_corruption_keeps_masks() {
        let s = synthesize(&spec()).unwrap();
        assert_eq!(s.clean.instances(), s.noisy.instances());
        assert!(s.corruption.iter().all(|r| r.corruption == Corruption::None));
    }

    #[test]
    fn corrupts_exactly_the_requested_fraction() {
        let mut sp = SyntheticSpec {
            n_patches: 25,
            blobs_per_class: (2, 2),
            patch_size: 64,
            ..Default::default()
        };
        sp.noise.corruption_fraction = 0.3;
        let s = synthesize(&sp).unwrap();
        assert_eq!(s.clean.instances().len(), 100);
        let flagged = s.corruption.iter().filter(|r| r.corruption != Corruption::None).count();
        assert_eq!(flagged, 30);
        let changed = s
            .clean
            .instances()
            .iter()
            .zip(s.noisy.instances())
            .filter(|(a, b)| a.mask != b.mask)
            .count();
        assert_eq!(changed, 30);
    }

    #[test]
    fn clean_instances_are_disjoint_and_cover_both_classes() {
        let s = synthesize(&spec()).unwrap();
        let counts = s.clean.counts();
        assert_eq!(counts.patches, 12);
        for p in s.clean.patches() {
            let insts: Vec<_> = s.clean.instances_of(&p.patch_id).collect();
            let total: usize = insts.iter().map(|i| i.area()).sum();
            let lm = s.clean.labelmap(&p.patch_id).unwrap();
            assert_eq!(total, lm.count(1) + lm.count(2));
            assert!(lm.count(1) > 0 && lm.count(2) > 0);
        }
    }

    #[test]
    fn erosion_never_empties_a_mask() {
        let mut sp = SyntheticSpec {
            radius: (1, 2),
            ..spec()
        };
        sp.noise = NoiseSpec {
            corruption_fraction: 1.0,
            dilate_px: 1,
            erode_px: 3,
        };
        let s = synthesize(&sp).unwrap();
        assert!(s.noisy.instances().iter().all(|i| i.area() > 0));
    }

    #[test]
    fn overfull_patch_is_infeasible() {
        let sp = SyntheticSpec {
            patch_size: 16,
            blobs_per_class: (10, 10),
            ..spec()
        };
        assert!(matches!(synthesize(&sp), Err(Error::InfeasiblePacking(_))));
    }

    #[test]
    fn written_corpus_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(&spec(), dir.path()).unwrap();
        let back = crate::dataset::load_corpus(&dir.path().join("clean")).unwrap();
        assert_eq!(back.patches(), s.clean.patches());
        assert!(dir.path().join("noisy/meta.csv").is_file());
        let rows: Vec<CorruptionRow> = crate::csvio::read_csv(&dir.path().join("corruption.csv")).unwrap();
        assert_eq!(rows, s.corruption);
    }
}
