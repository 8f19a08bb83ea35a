//! File names inside a prepared-data directory, and loading it back.

use std::path::Path;

use anyhow::{anyhow, Context};

use fedfair_core::data::{load_ratings, read_assignment, DatasetFormat, SensitiveAssignment, SensitiveAttribute, SplitTable};

use crate::manifest::DatasetFingerprint;

pub const RATINGS: &str = "ratings.tsv";
pub const TRAIN: &str = "train.tsv";
pub const VALIDATION: &str = "validation.tsv";
pub const TEST: &str = "test.tsv";
pub const STATS: &str = "stats.json";

pub fn groups_file(attribute: SensitiveAttribute) -> String {
    format!("groups-{attribute}.tsv")
}

pub struct Prepared {
    pub split: SplitTable,
    pub groups: SensitiveAssignment,
    pub fingerprint: DatasetFingerprint,
}

/// Read the splits and one group assignment written by `prepare`.
pub fn load(dir: &Path, attribute: SensitiveAttribute) -> anyhow::Result<Prepared> {
    let groups_path = dir.join(groups_file(attribute));
    let files = [dir.join(TRAIN), dir.join(VALIDATION), dir.join(TEST), groups_path.clone()];
    if let Some(missing) = files.iter().find(|p| !p.is_file()) {
        return Err(anyhow!(
            "prepared data not found: {} is missing; run `fedfair prepare` first or pass --data <dir>",
            missing.display()
        ));
    }
    let read = |p: &Path| load_ratings(p, DatasetFormat::Ml100kTab).with_context(|| format!("reading {}", p.display()));
    let split = SplitTable {
        train: read(&files[0])?,
        validation: read(&files[1])?,
        test: read(&files[2])?,
    };
    let groups = read_assignment(&groups_path).with_context(|| format!("reading {}", groups_path.display()))?;
    if groups.attribute != attribute {
        return Err(anyhow!(
            "{} holds the {} attribute, expected {attribute}",
            groups_path.display(),
            groups.attribute
        ));
    }
    let fingerprint = DatasetFingerprint::of_files(split.total(), &files)?;
    Ok(Prepared {
        split,
        groups,
        fingerprint,
    })
}
