//! Pixel-level F1 / Dice per class, aggregated by stratum and annotator into
//! report tables (Injured, Normal, Average x Podocyte, Mesangial).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csvio::write_csv;
use crate::dataset::{CellClass, LabelMap, Stratum};
use crate::error::{Error, Result};
use crate::grid::BoolGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub f1: f64,
    pub dice: f64,
    /// Neither prediction nor reference contains the class; scored 1.0.
    pub both_empty: bool,
}

impl ClassScore {
    pub fn from_counts(class: u8, tp: u64, fp: u64, fn_: u64, pred_size: u64, ref_size: u64) -> Self {
        let denom = 2 * tp + fp + fn_;
        let both_empty = denom == 0;
        let f1 = if both_empty {
            1.0
        } else {
            (2 * tp) as f64 / denom as f64
        };
        let dice = if pred_size + ref_size == 0 {
            1.0
        } else {
            (2 * tp) as f64 / (pred_size + ref_size) as f64
        };
        ClassScore {
            class,
            tp,
            fp,
            fn_,
            f1,
            dice,
            both_empty,
        }
    }
}

/// Pixel counts for membership in `class`.
pub fn class_f1(pred: &LabelMap, reference: &LabelMap, class: u8) -> Result<ClassScore> {
    if pred.dims() != reference.dims() {
        return Err(Error::DimensionMismatch {
            what: format!("prediction for {}", reference.patch_id),
            expected: reference.dims(),
            actual: pred.dims(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &r) in pred
        .classes()
        .as_slice()
        .iter()
        .zip(reference.classes().as_slice())
    {
        match (p == class, r == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let score = ClassScore::from_counts(class, tp, fp, fn_, tp + fp, tp + fn_);
    debug_assert!((score.f1 - score.dice).abs() < 1e-12);
    Ok(score)
}

/// `2|A∩B| / (|A| + |B|)`; 1.0 when both are empty.
pub fn binary_dice(a: &BoolGrid, b: &BoolGrid) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            what: "dice operands".into(),
            expected: b.dims(),
            actual: a.dims(),
        });
    }
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += u64::from(x && y);
        na += u64::from(x);
        nb += u64::from(y);
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        (2 * inter) as f64 / (na + nb) as f64
    })
}

/// Score of one class on one patch, tagged for aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScore {
    pub method: String,
    pub group: String,
    pub annotator_id: String,
    pub stratum: Stratum,
    pub patch_id: String,
    pub class: CellClass,
    pub score: ClassScore,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Pixel counts pooled over the patches of a stratum.
    #[default]
    Micro,
    /// Per-patch scores averaged over the patches of a stratum.
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratumColumn {
    Injured,
    Normal,
    Average,
}

impl From<Stratum> for StratumColumn {
    fn from(s: Stratum) -> Self {
        match s {
            Stratum::Injured => StratumColumn::Injured,
            Stratum::Normal => StratumColumn::Normal,
        }
    }
}

impl fmt::Display for StratumColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StratumColumn::Injured => "injured",
            StratumColumn::Normal => "normal",
            StratumColumn::Average => "average",
        })
    }
}

/// One row of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub group: String,
    pub stratum: StratumColumn,
    pub cell_class: CellClass,
    /// Pooled-count F1 per annotator, then mean over annotators.
    pub f1_micro: f64,
    /// Mean per-patch F1 per annotator, then mean over annotators.
    pub f1_macro: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub n_annotators: usize,
    pub n_patches: usize,
}

impl ReportRow {
    pub fn value(&self, pooling: Pooling) -> f64 {
        match pooling {
            Pooling::Micro => self.f1_micro,
            Pooling::Macro => self.f1_macro,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Pooling used for the text table; both columns are always in the rows.
    pub pooling: Pooling,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn get(
        &self,
        method: &str,
        group: &str,
        stratum: StratumColumn,
        class: CellClass,
    ) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.method == method && r.group == group && r.stratum == stratum && r.cell_class == class
        })
    }

    /// Distinct `(method, group)` pairs in first-appearance order.
    pub fn methods(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            if !out.iter().any(|(m, g)| *m == r.method && *g == r.group) {
                out.push((r.method.clone(), r.group.clone()));
            }
        }
        out
    }

    pub fn header(&self) -> String {
        format!(
            "pooling: {} within stratum; arithmetic mean across annotators; average = mean of stratum cells",
            match self.pooling {
                Pooling::Micro => "micro (pooled pixel counts)",
                Pooling::Macro => "macro (mean of per-patch scores)",
            }
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    /// Text table with columns Injured, Normal, Average x Podocyte, Mesangial.
    pub fn to_table(&self) -> String {
        let cols = [
            StratumColumn::Injured,
            StratumColumn::Normal,
            StratumColumn::Average,
        ];
        let methods = self.methods();
        let mw = methods
            .iter()
            .map(|(m, _)| m.len())
            .chain([6])
            .max()
            .unwrap_or(6);
        let gw = methods
            .iter()
            .map(|(_, g)| g.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.header());
        let _ = write!(s, "{:<mw$}  {:<gw$}", "", "");
        for c in cols {
            let title = match c {
                StratumColumn::Injured => "Injured glomeruli",
                StratumColumn::Normal => "Normal glomeruli",
                StratumColumn::Average => "Average",
            };
            let _ = write!(s, "  {title:<21}");
        }
        s.push('\n');
        let _ = write!(s, "{:<mw$}  {:<gw$}", "Method", "Group");
        for _ in cols {
            let _ = write!(s, "  {:<10} {:<10}", "Podocyte", "Mesangial");
        }
        s.push('\n');
        for (m, g) in &methods {
            let _ = write!(s, "{m:<mw$}  {g:<gw$}");
            for col in cols {
                let cell = |class| {
                    self.get(m, g, col, class)
                        .map_or("-".to_owned(), |r| format!("{:.4}", r.value(self.pooling)))
                };
                let _ = write!(
                    s,
                    "  {:<10} {:<10}",
                    cell(CellClass::Podocyte),
                    cell(CellClass::Mesangial)
                );
            }
            s.push('\n');
        }
        s
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Aggregates per-patch scores into stratum rows and an average row per
/// `(method, group, class)`.
///
/// Within a stratum each annotator's pixel counts are pooled (micro) and its
/// per-patch F1 averaged (macro); both are then averaged across annotators.
/// The average row is the arithmetic mean of the stratum rows that exist.
pub fn aggregate_report(scores: &[PatchScore], pooling: Pooling) -> EvalReport {
    #[derive(Default)]
    struct Acc {
        tp: u64,
        fp: u64,
        fn_: u64,
        per_patch: Vec<f64>,
    }
    let mut order: Vec<(String, String)> = Vec::new();
    // (method, group) -> (stratum, class) -> annotator -> counts
    let mut acc: BTreeMap<(String, String), BTreeMap<(Stratum, CellClass), BTreeMap<String, Acc>>> =
        BTreeMap::new();
    for s in scores {
        let key = (s.method.clone(), s.group.clone());
        if !order.contains(&key) {
            order.push(key.clone());
        }
        let a = acc
            .entry(key)
            .or_default()
            .entry((s.stratum, s.class))
            .or_default()
            .entry(s.annotator_id.clone())
            .or_default();
        a.tp += s.score.tp;
        a.fp += s.score.fp;
        a.fn_ += s.score.fn_;
        a.per_patch.push(s.score.f1);
    }

    let mut rows = Vec::new();
    for key in &order {
        let cells = &acc[key];
        for class in CellClass::ALL {
            let mut stratum_rows = Vec::new();
            for stratum in Stratum::ALL {
                let Some(by_annot) = cells.get(&(stratum, class)) else {
                    log::warn!(
                        "no scores for {}/{} {stratum} {class}; row omitted",
                        key.0,
                        key.1
                    );
                    continue;
                };
                let micro: Vec<f64> = by_annot
                    .values()
                    .map(|a| ClassScore::from_counts(0, a.tp, a.fp, a.fn_, a.tp + a.fp, a.tp + a.fn_).f1)
                    .collect();
                let macro_: Vec<f64> = by_annot.values().map(|a| mean(&a.per_patch)).collect();
                let row = ReportRow {
                    method: key.0.clone(),
                    group: key.1.clone(),
                    stratum: stratum.into(),
                    cell_class: class,
                    f1_micro: mean(&micro),
                    f1_macro: mean(&macro_),
                    tp: by_annot.values().map(|a| a.tp).sum(),
                    fp: by_annot.values().map(|a| a.fp).sum(),
                    fn_: by_annot.values().map(|a| a.fn_).sum(),
                    n_annotators: by_annot.len(),
                    n_patches: by_annot.values().map(|a| a.per_patch.len()).sum(),
                };
                stratum_rows.push(row);
            }
            if stratum_rows.is_empty() {
                continue;
            }
            let avg = ReportRow {
                method: key.0.clone(),
                group: key.1.clone(),
                stratum: StratumColumn::Average,
                cell_class: class,
                f1_micro: mean(&stratum_rows.iter().map(|r| r.f1_micro).collect::<Vec<_>>()),
                f1_macro: mean(&stratum_rows.iter().map(|r| r.f1_macro).collect::<Vec<_>>()),
                tp: stratum_rows.iter().map(|r| r.tp).sum(),
                fp: stratum_rows.iter().map(|r| r.fp).sum(),
                fn_: stratum_rows.iter().map(|r| r.fn_).sum(),
                n_annotators: stratum_rows.iter().map(|r| r.n_annotators).max().unwrap_or(0),
                n_patches: stratum_rows.iter().map(|r| r.n_patches).sum(),
            };
            rows.extend(stratum_rows);
            rows.push(avg);
        }
    }
    EvalReport { pooling, rows }
}

/// Scores each annotator's (or method's) label maps against the reference
/// label maps, per foreground class. Patches absent from the reference or
/// from `strata` are skipped with a warning.
pub fn annotation_scores(
    method: &str,
    group: &str,
    candidates: &BTreeMap<String, BTreeMap<String, LabelMap>>,
    reference: &BTreeMap<String, LabelMap>,
    strata: &BTreeMap<String, Stratum>,
) -> Result<Vec<PatchScore>> {
    let mut out = Vec::new();
    for (annotator, maps) in candidates {
        for (patch_id, pred) in maps {
            let (Some(reference), Some(&stratum)) = (reference.get(patch_id), strata.get(patch_id))
            else {
                log::warn!("patch {patch_id} from {annotator} has no reference; excluded");
                continue;
            };
            for class in CellClass::ALL {
                out.push(PatchScore {
                    method: method.to_owned(),
                    group: group.to_owned(),
                    annotator_id: annotator.clone(),
                    stratum,
                    patch_id: patch_id.clone(),
                    class,
                    score: class_f1(pred, reference, class.index())?,
                });
            }
        }
    }
    Ok(out)
}

/// Per-class F1 of candidate annotations against the reference, aggregated
/// like [`aggregate_report`].
pub fn annotation_accuracy(
    method: &str,
    group: &str,
    candidates: &BTreeMap<String, BTreeMap<String, LabelMap>>,
    reference: &BTreeMap<String, LabelMap>,
    strata: &BTreeMap<String, Stratum>,
    pooling: Pooling,
) -> Result<EvalReport> {
    let scores = annotation_scores(method, group, candidates, reference, strata)?;
    Ok(aggregate_report(&scores, pooling))
}
