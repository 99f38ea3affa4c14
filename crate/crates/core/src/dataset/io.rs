//! On-disk corpus layout:
//!
//! ```text
//! <root>/patches/<patch_id>.png                 RGB
//! <root>/masks/<patch_id>/<instance_id>.png     8-bit, 0/255
//! <root>/labelmaps/<patch_id>.png               8-bit, values 0/1/2
//! <root>/meta.csv        patch_id,modality,stratum,source_wsi,annotator_id
//! <root>/instances.csv   instance_id,patch_id,cell_class
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CellClass, Corpus, InstanceMask, LabelMap, Modality, Patch, Stratum};
use crate::csvio::{read_csv, write_csv};
use crate::error::{Error, Result};
use crate::grid::{BoolGrid, Grid};

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    patch_id: String,
    modality: Modality,
    stratum: Stratum,
    source_wsi: String,
    annotator_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRow {
    instance_id: String,
    patch_id: String,
    cell_class: CellClass,
}

fn read_rgb(path: &Path) -> Result<Grid<[u8; 3]>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(h, w, data).expect("decoded buffer matches dimensions"))
}

fn read_gray(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::Invalid(format!(
            "{} must be an 8-bit single-channel PNG, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let img = img.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_vec(h, w, img.into_raw()).expect("decoded buffer matches dimensions"))
}

fn write_gray(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let img = GrayImage::from_raw(
        grid.width() as u32,
        grid.height() as u32,
        grid.as_slice().to_vec(),
    )
    .expect("buffer matches dimensions");
    save_png(path, |tmp| img.save_with_format(tmp, image::ImageFormat::Png))
}

fn write_rgb(path: &Path, grid: &Grid<[u8; 3]>) -> Result<()> {
    let raw: Vec<u8> = grid.as_slice().iter().flatten().copied().collect();
    let img = RgbImage::from_raw(grid.width() as u32, grid.height() as u32, raw)
        .expect("buffer matches dimensions");
    save_png(path, |tmp| img.save_with_format(tmp, image::ImageFormat::Png))
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
fn save_png(
    path: &Path,
    save: impl FnOnce(&Path) -> image::ImageResult<()>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("png.partial");
    save(&tmp).map_err(|e| Error::image(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_mask_png(path: &Path) -> Result<BoolGrid> {
    let g = read_gray(path)?;
    if let Some(&bad) = g.as_slice().iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Invalid(format!(
            "mask {} contains value {bad}; expected 0 or 255",
            path.display()
        )));
    }
    Ok(g.map(|&v| v == 255))
}

pub(crate) fn write_mask_png(path: &Path, mask: &BoolGrid) -> Result<()> {
    write_gray(path, &mask.map(|&b| if b { 255 } else { 0 }))
}

pub fn read_labelmap_png(path: &Path, patch_id: &str) -> Result<LabelMap> {
    let g = read_gray(path)?;
    if let Some(&bad) = g.as_slice().iter().find(|&&v| v > 2) {
        return Err(Error::UnknownClass {
            what: path.display().to_string(),
            value: bad,
        });
    }
    LabelMap::new(patch_id, g)
}

pub fn write_labelmap_png(path: &Path, lm: &LabelMap) -> Result<()> {
    write_gray(path, lm.classes())
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned());
            }
        }
    }
    Ok(out)
}

/// Loads and validates a corpus rooted at `root`.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::CorpusNotFound(root.to_path_buf()));
    }
    let patch_dir = root.join("patches");
    let images = png_stems(&patch_dir)?;
    let meta_path = root.join("meta.csv");
    if images.is_empty() && !meta_path.exists() {
        return Err(Error::NoPatches(root.to_path_buf()));
    }
    let meta: Vec<MetaRow> = read_csv(&meta_path)?;
    if meta.is_empty() {
        return Err(Error::NoPatches(root.to_path_buf()));
    }
    let known: BTreeSet<String> = meta.iter().map(|m| m.patch_id.clone()).collect();
    for m in &meta {
        if !images.contains(&m.patch_id) {
            return Err(Error::Invalid(format!(
                "patch {} listed in meta.csv has no image at {}",
                m.patch_id,
                patch_dir.join(format!("{}.png", m.patch_id)).display()
            )));
        }
    }

    let patches: Vec<Patch> = meta
        .into_par_iter()
        .map(|m| {
            let image = read_rgb(&patch_dir.join(format!("{}.png", m.patch_id)))?;
            let patch = Patch {
                patch_id: m.patch_id,
                image,
                modality: m.modality,
                stratum: m.stratum,
                source_wsi: m.source_wsi,
                annotator_id: m.annotator_id,
            };
            patch.validate()?;
            Ok(patch)
        })
        .collect::<Result<_>>()?;

    let inst_path = root.join("instances.csv");
    let rows: Vec<InstanceRow> = if inst_path.exists() {
        read_csv(&inst_path)?
    } else {
        Vec::new()
    };
    let mask_root = root.join("masks");
    for row in &rows {
        if !known.contains(row.patch_id.as_str()) {
            return Err(Error::OrphanMask {
                instance_id: row.instance_id.clone(),
                patch_id: row.patch_id.clone(),
            });
        }
    }
    // Mask directories without a patch image are orphans as well.
    if mask_root.is_dir() {
        for entry in fs::read_dir(&mask_root).map_err(|e| Error::io(&mask_root, e))? {
            let path = entry.map_err(|e| Error::io(&mask_root, e))?.path();
            if let Some(name) = path.file_name().and_then(|s| s.to_str()) {
                if path.is_dir() && !known.contains(name) {
                    let first = png_stems(&path)?.into_iter().next().unwrap_or_default();
                    return Err(Error::OrphanMask {
                        instance_id: first,
                        patch_id: name.to_owned(),
                    });
                }
            }
        }
    }
    let instances: Vec<InstanceMask> = rows
        .into_par_iter()
        .map(|row| {
            let path: PathBuf = mask_root
                .join(&row.patch_id)
                .join(format!("{}.png", row.instance_id));
            let mask = read_mask_png(&path)?;
            InstanceMask::new(row.instance_id, row.patch_id, row.cell_class, mask)
        })
        .collect::<Result<_>>()?;

    let lm_dir = root.join("labelmaps");
    let lm_ids = png_stems(&lm_dir)?;
    let labelmaps: BTreeMap<String, LabelMap> = lm_ids
        .into_par_iter()
        .map(|id| {
            let lm = read_labelmap_png(&lm_dir.join(format!("{id}.png")), &id)?;
            Ok((id, lm))
        })
        .collect::<Result<_>>()?;

    let corpus = Corpus::new(patches, instances, labelmaps)?;
    let counts = corpus.counts();
    log::info!(
        "loaded {} patches, {} instances from {} (patches with podocyte: {}, with mesangial: {})",
        counts.patches,
        counts.instances,
        root.display(),
        counts.patches_with_class[&CellClass::Podocyte],
        counts.patches_with_class[&CellClass::Mesangial],
    );
    Ok(corpus)
}

/// Writes `corpus` in the documented layout under `root`.
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    corpus
        .patches()
        .par_iter()
        .try_for_each(|p| write_rgb(&root.join("patches").join(format!("{}.png", p.patch_id)), &p.image))?;
    corpus.instances().par_iter().try_for_each(|i| {
        write_mask_png(
            &root
                .join("masks")
                .join(&i.patch_id)
                .join(format!("{}.png", i.instance_id)),
            &i.mask,
        )
    })?;
    corpus.labelmaps().par_iter().try_for_each(|(id, lm)| {
        write_labelmap_png(&root.join("labelmaps").join(format!("{id}.png")), lm)
    })?;
    write_csv(
        &root.join("meta.csv"),
        corpus.patches().iter().map(|p| MetaRow {
            patch_id: p.patch_id.clone(),
            modality: p.modality,
            stratum: p.stratum,
            source_wsi: p.source_wsi.clone(),
            annotator_id: p.annotator_id.clone(),
        }),
    )?;
    write_csv(
        &root.join("instances.csv"),
        corpus.instances().iter().map(|i| InstanceRow {
            instance_id: i.instance_id.clone(),
            patch_id: i.patch_id.clone(),
            cell_class: i.cell_class,
        }),
    )
}
