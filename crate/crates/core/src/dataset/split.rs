use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::csvio::{read_csv, write_csv};
use super::{Corpus, Stratum};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Integer split weights; the realized fractions are `w / (train + val + test)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 6,
            val: 1,
            test: 3,
        }
    }
}

impl SplitRatios {
    fn weights(&self) -> [u64; 3] {
        [
            u64::from(self.train),
            u64::from(self.val),
            u64::from(self.test),
        ]
    }

    /// Largest-remainder apportionment of `n` items. Exact integer arithmetic;
    /// every count is the floor or ceiling of its exact quota. Remainder ties
    /// go to the larger weight, then to the earlier split.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let w = self.weights();
        let total: u64 = w.iter().sum();
        let n64 = n as u64;
        let mut counts = [0usize; 3];
        let mut rems = [(0u64, 0u64, 0usize); 3];
        for i in 0..3 {
            counts[i] = (n64 * w[i] / total) as usize;
            rems[i] = (n64 * w[i] % total, w[i], i);
        }
        let mut left = n - counts.iter().sum::<usize>();
        rems.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        for &(_, _, i) in &rems {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn get(&self, patch_id: &str) -> Option<Split> {
        self.assignments.get(patch_id).copied()
    }
}

/// Shuffles each stratum with a seeded stream and cuts it by
/// largest-remainder apportionment, so every stratum is within one patch of
/// the exact ratio.
pub fn stratified_split(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    if ratios.train == 0 || ratios.val == 0 || ratios.test == 0 {
        return Err(Error::Invalid("split ratios must all be positive".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot split an empty corpus".into()));
    }
    let mut assignments = BTreeMap::new();
    for stratum in Stratum::ALL {
        let mut ids: Vec<&str> = corpus
            .patches()
            .iter()
            .filter(|p| p.stratum == stratum)
            .map(|p| p.patch_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < 3 {
            log::warn!(
                "stratum {stratum} has {} patch(es), fewer than the 3 splits; assigning by largest weight",
                ids.len()
            );
        }
        let mut rng = seeding::stream(seed, &[b"split", stratum.as_str().as_bytes()]);
        ids.shuffle(&mut rng);
        let counts = ratios.apportion(ids.len());
        let mut it = ids.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for id in it.by_ref().take(n) {
                assignments.insert(id.to_owned(), split);
            }
        }
    }
    Ok(SplitAssignment {
        assignments,
        seed,
        ratios,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    patch_id: String,
    split: Split,
}

pub fn write_splits_csv(path: &Path, split: &SplitAssignment) -> Result<()> {
    write_csv(
        path,
        split.assignments.iter().map(|(k, &v)| SplitRow {
            patch_id: k.clone(),
            split: v,
        }),
    )
}

/// Reads `splits.csv`. Seed and ratios are not stored in the file and come
/// back as given.
pub fn read_splits_csv(path: &Path, seed: u64, ratios: SplitRatios) -> Result<SplitAssignment> {
    let rows: Vec<SplitRow> = read_csv(path)?;
    Ok(SplitAssignment {
        assignments: rows.into_iter().map(|r| (r.patch_id, r.split)).collect(),
        seed,
        ratios,
    })
}
