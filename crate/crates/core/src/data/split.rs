use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must lie in [0,1]: {self:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Disjoint train/val/test id lists.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl DatasetSplit {
    pub fn ids(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `<id>\t<split>` lines, grouped train/val/test, ids sorted within each
    /// group.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for name in SplitName::ALL {
            let mut ids: Vec<&String> = self.ids(name).iter().collect();
            ids.sort();
            for id in ids {
                out.push_str(id);
                out.push('\t');
                out.push_str(name.as_str());
                out.push('\n');
            }
        }
        out
    }

    /// Parses a manifest. Seed and ratios are not stored in the file and come
    /// back as 0 and the observed proportions.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut groups: BTreeMap<SplitName, Vec<String>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, split) = line.split_once('\t').ok_or_else(|| {
                Error::Dataset(format!(
                    "manifest line {}: expected `<id><TAB><split>`",
                    lineno + 1
                ))
            })?;
            let split: SplitName = split.trim().parse()?;
            if !seen.insert(id.to_owned()) {
                return Err(Error::Dataset(format!(
                    "manifest line {}: id `{id}` listed twice",
                    lineno + 1
                )));
            }
            groups.entry(split).or_default().push(id.to_owned());
        }
        let mut take = |n| groups.remove(&n).unwrap_or_default();
        let (train, val, test) = (
            take(SplitName::Train),
            take(SplitName::Val),
            take(SplitName::Test),
        );
        let total = (train.len() + val.len() + test.len()).max(1) as f64;
        let ratios = SplitRatios {
            train: train.len() as f64 / total,
            val: val.len() as f64 / total,
            test: test.len() as f64 / total,
        };
        Ok(Self {
            train,
            val,
            test,
            seed: 0,
            ratios,
        })
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_manifest()).map_err(|e| Error::path(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::from_manifest(&text)
    }
}

fn part_size(ratio: f64, n: usize) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    ((ratio * n as f64).round() as usize).max(1)
}

/// Sorts the ids, shuffles them with `seed`, then cuts val and test blocks of
/// `round(ratio·N)` (at least one each when their ratio is positive); the
/// remainder is train.
pub fn split_ids(ids: &[String], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    let n = ids.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 samples to split, got {n}"
        )));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    if order.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate sample ids".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let val_n = part_size(ratios.val, n);
    let test_n = part_size(ratios.test, n);
    if val_n + test_n > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples with ratios {ratios:?}"
        )));
    }
    let test = order.split_off(n - test_n);
    let val = order.split_off(n - test_n - val_n);
    Ok(DatasetSplit {
        train: order,
        val,
        test,
        seed,
        ratios,
    })
}

pub fn split_dataset(samples: &[Sample], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    split_ids(&ids, ratios, seed)
}

/// Samples named by `ids`, in that order.
pub fn select(samples: &[Sample], ids: &[String]) -> Result<Vec<Sample>> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::Dataset(format!("split refers to unknown sample `{id}`")))
        })
        .collect()
}
