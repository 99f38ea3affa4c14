//! Patches, per-instance masks and multi-class label maps.

mod io;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoolGrid, Grid};

pub use io::{load_corpus, read_labelmap_png, write_corpus, write_labelmap_png};
pub use split::{
    read_splits_csv, stratified_split, write_splits_csv, Split, SplitAssignment, SplitRatios,
};

/// Default patch edge length in pixels.
pub const DEFAULT_PATCH_SIZE: usize = 512;

pub const BACKGROUND: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "PAS")]
    Pas,
    #[serde(rename = "IF")]
    If,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Injured,
    Normal,
}

impl Stratum {
    pub const ALL: [Stratum; 2] = [Stratum::Injured, Stratum::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Injured => "injured",
            Stratum::Normal => "normal",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Foreground cell class. Label-map coding: 0 background, 1 podocyte, 2 mesangial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    Podocyte,
    Mesangial,
}

impl CellClass {
    pub const ALL: [CellClass; 2] = [CellClass::Podocyte, CellClass::Mesangial];

    #[inline]
    pub fn index(self) -> u8 {
        match self {
            CellClass::Podocyte => 1,
            CellClass::Mesangial => 2,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(CellClass::Podocyte),
            2 => Some(CellClass::Mesangial),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellClass::Podocyte => "podocyte",
            CellClass::Mesangial => "mesangial",
        }
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "podocyte" => Ok(CellClass::Podocyte),
            "mesangial" => Ok(CellClass::Mesangial),
            other => Err(Error::Invalid(format!("unknown cell class `{other}`"))),
        }
    }
}

pub type Rgb = [u8; 3];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub patch_id: String,
    pub image: Grid<Rgb>,
    pub modality: Modality,
    pub stratum: Stratum,
    pub source_wsi: String,
    pub annotator_id: String,
}

impl Patch {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.height() == 0 || self.image.width() == 0 {
            return Err(Error::Invalid(format!(
                "patch {} has an empty image",
                self.patch_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    pub instance_id: String,
    pub patch_id: String,
    pub cell_class: CellClass,
    pub mask: BoolGrid,
}

impl InstanceMask {
    /// Rejects masks without any foreground pixel.
    pub fn new(
        instance_id: impl Into<String>,
        patch_id: impl Into<String>,
        cell_class: CellClass,
        mask: BoolGrid,
    ) -> Result<Self> {
        let instance_id = instance_id.into();
        if mask.count_true() == 0 {
            return Err(Error::EmptyMask(instance_id));
        }
        Ok(InstanceMask {
            instance_id,
            patch_id: patch_id.into(),
            cell_class,
            mask,
        })
    }

    pub fn area(&self) -> usize {
        self.mask.count_true()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub patch_id: String,
    classes: Grid<u8>,
}

impl LabelMap {
    pub fn new(patch_id: impl Into<String>, classes: Grid<u8>) -> Result<Self> {
        let patch_id = patch_id.into();
        if let Some(&bad) = classes.as_slice().iter().find(|&&v| v > 2) {
            return Err(Error::UnknownClass {
                what: format!("label map {patch_id}"),
                value: bad,
            });
        }
        Ok(LabelMap { patch_id, classes })
    }

    pub fn background(patch_id: impl Into<String>, height: usize, width: usize) -> Self {
        LabelMap {
            patch_id: patch_id.into(),
            classes: Grid::filled(height, width, BACKGROUND),
        }
    }

    pub fn classes(&self) -> &Grid<u8> {
        &self.classes
    }

    pub fn dims(&self) -> (usize, usize) {
        self.classes.dims()
    }

    pub fn class_mask(&self, class: u8) -> BoolGrid {
        self.classes.map(|&v| v == class)
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.as_slice().iter().filter(|&&v| v == class).count()
    }
}

/// How to label a pixel covered by several instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// Smaller instance wins; equal areas go to the lower class index.
    #[default]
    SmallerAreaWins,
    /// Larger instance wins; equal areas go to the lower class index.
    LargerAreaWins,
    /// Lower class index wins regardless of area.
    LowerClassWins,
}

impl OverlapPolicy {
    /// Sort key: the instance with the smallest key claims a contested pixel.
    fn key(self, area: usize, class: u8) -> (i64, u8) {
        match self {
            OverlapPolicy::SmallerAreaWins => (area as i64, class),
            OverlapPolicy::LargerAreaWins => (-(area as i64), class),
            OverlapPolicy::LowerClassWins => (i64::from(class), 0),
        }
    }
}

/// Rasterizes instance masks of one patch into a label map.
pub fn instances_to_labelmap(
    patch_id: &str,
    dims: (usize, usize),
    instances: &[&InstanceMask],
    policy: OverlapPolicy,
) -> Result<LabelMap> {
    let mut order: Vec<(&InstanceMask, (i64, u8))> = Vec::with_capacity(instances.len());
    for inst in instances {
        if inst.patch_id != patch_id {
            return Err(Error::Invalid(format!(
                "instance {} belongs to patch {}, not {patch_id}",
                inst.instance_id, inst.patch_id
            )));
        }
        if inst.mask.dims() != dims {
            return Err(Error::DimensionMismatch {
                what: format!("mask {}", inst.instance_id),
                expected: dims,
                actual: inst.mask.dims(),
            });
        }
        order.push((inst, policy.key(inst.area(), inst.cell_class.index())));
    }
    // Paint losers first so winners overwrite them.
    order.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| b.0.instance_id.cmp(&a.0.instance_id))
    });
    let mut classes = Grid::filled(dims.0, dims.1, BACKGROUND);
    for (inst, _) in order {
        let class = inst.cell_class.index();
        for (dst, &on) in classes
            .as_mut_slice()
            .iter_mut()
            .zip(inst.mask.as_slice())
        {
            if on {
                *dst = class;
            }
        }
    }
    LabelMap::new(patch_id, classes)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusCounts {
    pub patches: usize,
    pub instances: usize,
    /// Number of patches containing at least one instance of the class.
    pub patches_with_class: BTreeMap<CellClass, usize>,
    pub instances_per_class: BTreeMap<CellClass, usize>,
    pub patches_per_stratum: BTreeMap<Stratum, usize>,
}

/// A validated set of patches with their instance masks and label maps.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    patches: Vec<Patch>,
    instances: Vec<InstanceMask>,
    labelmaps: BTreeMap<String, LabelMap>,
}

impl Corpus {
    /// Builds and validates a corpus. Patches are sorted by id, instances by
    /// `(patch_id, instance_id)`.
    pub fn new(
        mut patches: Vec<Patch>,
        mut instances: Vec<InstanceMask>,
        labelmaps: BTreeMap<String, LabelMap>,
    ) -> Result<Self> {
        patches.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        instances.sort_by(|a, b| {
            (a.patch_id.as_str(), a.instance_id.as_str())
                .cmp(&(b.patch_id.as_str(), b.instance_id.as_str()))
        });
        let corpus = Corpus {
            patches,
            instances,
            labelmaps,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        let mut dims = BTreeMap::new();
        for pair in self.patches.windows(2) {
            if pair[0].patch_id == pair[1].patch_id {
                return Err(Error::Invalid(format!(
                    "duplicate patch id {}",
                    pair[0].patch_id
                )));
            }
        }
        for p in &self.patches {
            p.validate()?;
            dims.insert(p.patch_id.as_str(), p.dims());
        }
        for pair in self.instances.windows(2) {
            if pair[0].patch_id == pair[1].patch_id && pair[0].instance_id == pair[1].instance_id
            {
                return Err(Error::Invalid(format!(
                    "duplicate instance {}/{}",
                    pair[0].patch_id, pair[0].instance_id
                )));
            }
        }
        for inst in &self.instances {
            let Some(&d) = dims.get(inst.patch_id.as_str()) else {
                return Err(Error::OrphanMask {
                    instance_id: inst.instance_id.clone(),
                    patch_id: inst.patch_id.clone(),
                });
            };
            if inst.mask.dims() != d {
                return Err(Error::DimensionMismatch {
                    what: format!("mask {}/{}", inst.patch_id, inst.instance_id),
                    expected: d,
                    actual: inst.mask.dims(),
                });
            }
            if inst.area() == 0 {
                return Err(Error::EmptyMask(inst.instance_id.clone()));
            }
        }
        for (id, lm) in &self.labelmaps {
            let Some(&d) = dims.get(id.as_str()) else {
                return Err(Error::Invalid(format!(
                    "label map {id} has no matching patch"
                )));
            };
            if lm.dims() != d {
                return Err(Error::DimensionMismatch {
                    what: format!("label map {id}"),
                    expected: d,
                    actual: lm.dims(),
                });
            }
        }
        Ok(())
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn instances(&self) -> &[InstanceMask] {
        &self.instances
    }

    pub fn labelmaps(&self) -> &BTreeMap<String, LabelMap> {
        &self.labelmaps
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, patch_id: &str) -> Option<&Patch> {
        self.patches
            .binary_search_by(|p| p.patch_id.as_str().cmp(patch_id))
            .ok()
            .map(|i| &self.patches[i])
    }

    pub fn instances_of(&self, patch_id: &str) -> std::slice::Iter<'_, InstanceMask> {
        let start = self
            .instances
            .partition_point(|i| i.patch_id.as_str() < patch_id);
        let end = self
            .instances
            .partition_point(|i| i.patch_id.as_str() <= patch_id);
        self.instances[start..end].iter()
    }

    pub fn instance(&self, patch_id: &str, instance_id: &str) -> Option<&InstanceMask> {
        self.instances_of(patch_id)
            .find(|i| i.instance_id == instance_id)
    }

    /// Stored label map, or one rasterized from the instances with the
    /// default overlap policy.
    pub fn labelmap(&self, patch_id: &str) -> Option<LabelMap> {
        if let Some(lm) = self.labelmaps.get(patch_id) {
            return Some(lm.clone());
        }
        let patch = self.patch(patch_id)?;
        let insts: Vec<&InstanceMask> = self.instances_of(patch_id).collect();
        instances_to_labelmap(patch_id, patch.dims(), &insts, OverlapPolicy::default()).ok()
    }

    /// Rasterizes and stores label maps for every patch that lacks one.
    pub fn fill_labelmaps(&mut self, policy: OverlapPolicy) -> Result<()> {
        let mut filled = Vec::new();
        for p in &self.patches {
            if self.labelmaps.contains_key(&p.patch_id) {
                continue;
            }
            let insts: Vec<&InstanceMask> = self.instances_of(&p.patch_id).collect();
            let lm = instances_to_labelmap(&p.patch_id, p.dims(), &insts, policy)?;
            filled.push(lm);
        }
        for lm in filled {
            self.labelmaps.insert(lm.patch_id.clone(), lm);
        }
        Ok(())
    }

    pub fn counts(&self) -> CorpusCounts {
        let mut counts = CorpusCounts {
            patches: self.patches.len(),
            instances: self.instances.len(),
            ..Default::default()
        };
        for class in CellClass::ALL {
            counts.patches_with_class.insert(class, 0);
            counts.instances_per_class.insert(class, 0);
        }
        for p in &self.patches {
            *counts.patches_per_stratum.entry(p.stratum).or_default() += 1;
            for class in CellClass::ALL {
                if self.instances_of(&p.patch_id).any(|i| i.cell_class == class) {
                    *counts.patches_with_class.entry(class).or_default() += 1;
                }
            }
        }
        for inst in &self.instances {
            *counts.instances_per_class.entry(inst.cell_class).or_default() += 1;
        }
        counts
    }

    /// Restricts the corpus to the given patch ids.
    pub fn subset(&self, keep: impl Fn(&Patch) -> bool) -> Corpus {
        let patches: Vec<Patch> = self.patches.iter().filter(|p| keep(p)).cloned().collect();
        let ids: std::collections::BTreeSet<&str> =
            patches.iter().map(|p| p.patch_id.as_str()).collect();
        let instances = self
            .instances
            .iter()
            .filter(|i| ids.contains(i.patch_id.as_str()))
            .cloned()
            .collect();
        let labelmaps = self
            .labelmaps
            .iter()
            .filter(|(k, _)| ids.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Corpus {
            patches,
            instances,
            labelmaps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(dims: (usize, usize), pixels: &[(usize, usize)]) -> BoolGrid {
        let mut g = Grid::filled(dims.0, dims.1, false);
        for &(r, c) in pixels {
            g.set(r, c, true);
        }
        g
    }

    fn rect(dims: (usize, usize), r0: usize, c0: usize, h: usize, w: usize) -> BoolGrid {
        Grid::from_fn(dims.0, dims.1, |r, c| {
            (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c)
        })
    }

    #[test]
    fn empty_instance_is_rejected() {
        let err = InstanceMask::new("i", "p", CellClass::Podocyte, Grid::filled(3, 3, false));
        assert!(matches!(err, Err(Error::EmptyMask(_))));
    }

    #[test]
    fn labelmap_rejects_unknown_class() {
        let g = Grid::from_vec(1, 3, vec![0, 1, 3]).unwrap();
        assert!(matches!(
            LabelMap::new("p", g),
            Err(Error::UnknownClass { value: 3, .. })
        ));
    }

    #[test]
    fn disjoint_instances_merge_to_union() {
        let dims = (6, 6);
        let a = InstanceMask::new("a", "p", CellClass::Podocyte, rect(dims, 0, 0, 2, 2)).unwrap();
        let b = InstanceMask::new("b", "p", CellClass::Mesangial, rect(dims, 3, 3, 3, 3)).unwrap();
        let lm = instances_to_labelmap("p", dims, &[&a, &b], OverlapPolicy::default()).unwrap();
        assert_eq!(lm.count(1), 4);
        assert_eq!(lm.count(2), 9);
        assert_eq!(lm.count(0), 36 - 13);
        assert_eq!(*lm.classes().get(1, 1), 1);
        assert_eq!(*lm.classes().get(5, 5), 2);
    }

    #[test]
    fn empty_instance_list_is_all_background() {
        let lm = instances_to_labelmap("p", (4, 5), &[], OverlapPolicy::default()).unwrap();
        assert_eq!(lm.count(0), 20);
    }

    #[test]
    fn smaller_instance_claims_overlap() {
        let dims = (10, 16);
        let pod = rect(dims, 0, 0, 2, 5); // 10 px
        let mes = rect(dims, 0, 3, 5, 10); // 50 px, overlaps rows 0..2 x cols 3..5 = 4 px
        let a = InstanceMask::new("a", "p", CellClass::Podocyte, pod.clone()).unwrap();
        let b = InstanceMask::new("b", "p", CellClass::Mesangial, mes.clone()).unwrap();
        assert_eq!(a.area(), 10);
        assert_eq!(b.area(), 50);
        let shared: Vec<(usize, usize)> = pod
            .iter_indexed()
            .filter(|&(r, c, &v)| v && *mes.get(r, c))
            .map(|(r, c, _)| (r, c))
            .collect();
        assert_eq!(shared.len(), 4);
        for order in [[&a, &b], [&b, &a]] {
            let lm = instances_to_labelmap("p", dims, &order, OverlapPolicy::default()).unwrap();
            for &(r, c) in &shared {
                assert_eq!(*lm.classes().get(r, c), 1);
            }
            assert_eq!(lm.count(1), 10);
            assert_eq!(lm.count(2), 46);
        }
        let lm = instances_to_labelmap("p", dims, &[&a, &b], OverlapPolicy::LargerAreaWins).unwrap();
        assert_eq!(lm.count(2), 50);
    }

    #[test]
    fn equal_area_tie_goes_to_lower_class() {
        let dims = (4, 4);
        let a = InstanceMask::new("a", "p", CellClass::Mesangial, rect(dims, 0, 0, 2, 2)).unwrap();
        let b = InstanceMask::new("b", "p", CellClass::Podocyte, rect(dims, 1, 1, 2, 2)).unwrap();
        let lm = instances_to_labelmap("p", dims, &[&a, &b], OverlapPolicy::default()).unwrap();
        assert_eq!(*lm.classes().get(1, 1), 1);
    }

    #[test]
    fn labelmap_back_to_masks_is_stable_without_overlap() {
        let dims = (8, 8);
        let a = InstanceMask::new("a", "p", CellClass::Podocyte, mask_from(dims, &[(0, 0), (0, 1)]))
            .unwrap();
        let b = InstanceMask::new("b", "p", CellClass::Mesangial, mask_from(dims, &[(5, 5)]))
            .unwrap();
        let lm = instances_to_labelmap("p", dims, &[&a, &b], OverlapPolicy::default()).unwrap();
        let rebuilt: Vec<InstanceMask> = CellClass::ALL
            .iter()
            .map(|&c| InstanceMask::new(c.as_str(), "p", c, lm.class_mask(c.index())).unwrap())
            .collect();
        let refs: Vec<&InstanceMask> = rebuilt.iter().collect();
        let again = instances_to_labelmap("p", dims, &refs, OverlapPolicy::default()).unwrap();
        assert_eq!(lm, again);
    }

    #[test]
    fn corpus_rejects_orphans_and_mismatches() {
        let patch = Patch {
            patch_id: "p".into(),
            image: Grid::filled(4, 4, [0, 0, 0]),
            modality: Modality::Pas,
            stratum: Stratum::Normal,
            source_wsi: "w".into(),
            annotator_id: "a".into(),
        };
        let orphan =
            InstanceMask::new("i", "q", CellClass::Podocyte, rect((4, 4), 0, 0, 1, 1)).unwrap();
        match Corpus::new(vec![patch.clone()], vec![orphan], BTreeMap::new()) {
            Err(Error::OrphanMask { instance_id, .. }) => assert_eq!(instance_id, "i"),
            other => panic!("expected orphan error, got {other:?}"),
        }
        let wrong =
            InstanceMask::new("i", "p", CellClass::Podocyte, rect((2, 2), 0, 0, 1, 1)).unwrap();
        assert!(matches!(
            Corpus::new(vec![patch], vec![wrong], BTreeMap::new()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
