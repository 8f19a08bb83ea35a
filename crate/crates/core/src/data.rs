//! Rating datasets: loading, n-core filtering, chronological splits and
//! sensitive-group assignment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

pub type UserId = u32;
pub type ItemId = u32;

/// Inclusive rating range shared by every supported dataset.
pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown dataset format `{0}` (expected ml100k-tab, ml1m-coloncolon or amazon-csv)")]
    UnknownFormat(String),
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("{n}-core filtering removed every rating")]
    EmptyResult { n: usize },
    #[error("users missing from demographics: {0:?}")]
    MissingDemographics(Vec<UserId>),
    #[error("duplicate rating for user {user}, item {item}")]
    DuplicatePair { user: UserId, item: ItemId },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    pub timestamp: i64,
}

/// An ordered collection of ratings with unique `(user, item)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingTable {
    records: Vec<RatingRecord>,
    user_count: usize,
    item_count: usize,
}

impl RatingTable {
    /// Build a table, rejecting duplicate pairs and out-of-range ratings.
    pub fn new(records: Vec<RatingRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !(RATING_MIN..=RATING_MAX).contains(&r.rating) {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("rating {} outside [{RATING_MIN}, {RATING_MAX}]", r.rating),
                });
            }
            if !seen.insert((r.user, r.item)) {
                return Err(DataError::DuplicatePair {
                    user: r.user,
                    item: r.item,
                });
            }
        }
        Ok(Self::from_valid(records))
    }

    fn from_valid(records: Vec<RatingRecord>) -> Self {
        let users: HashSet<UserId> = records.iter().map(|r| r.user).collect();
        let items: HashSet<ItemId> = records.iter().map(|r| r.item).collect();
        Self {
            user_count: users.len(),
            item_count: items.len(),
            records,
        }
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn rating_count(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct users in ascending order.
    pub fn users(&self) -> Vec<UserId> {
        let mut u: Vec<UserId> = self.records.iter().map(|r| r.user).collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    /// Distinct items in ascending order.
    pub fn items(&self) -> Vec<ItemId> {
        let mut i: Vec<ItemId> = self.records.iter().map(|r| r.item).collect();
        i.sort_unstable();
        i.dedup();
        i
    }

    /// Per-user ratings, each user's list in table order.
    pub fn by_user(&self) -> BTreeMap<UserId, UserRatings> {
        let mut out: BTreeMap<UserId, UserRatings> = BTreeMap::new();
        for r in &self.records {
            let e = out.entry(r.user).or_default();
            e.items.push(r.item);
            e.ratings.push(r.rating);
        }
        out
    }

    /// Records sorted by `(user, item)`, for order-insensitive comparison.
    pub fn canonical(&self) -> Vec<RatingRecord> {
        let mut v = self.records.clone();
        v.sort_by_key(|r| (r.user, r.item));
        v
    }
}

impl fmt::Display for RatingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} ratings={}",
            self.user_count,
            self.item_count,
            self.rating_count()
        )
    }
}

/// One user's rated items with the matching ratings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserRatings {
    pub items: Vec<ItemId>,
    pub ratings: Vec<f64>,
}

impl UserRatings {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Column positions for comma-separated Amazon-style exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvColumns {
    pub item: usize,
    pub user: usize,
    pub rating: usize,
    pub timestamp: usize,
    pub has_header: bool,
}

impl Default for CsvColumns {
    /// `item,user,rating,timestamp` without a header row.
    fn default() -> Self {
        Self {
            item: 0,
            user: 1,
            rating: 2,
            timestamp: 3,
            has_header: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `user \t item \t rating \t timestamp` (MovieLens 100K `u.data`).
    Ml100kTab,
    /// `user::item::rating::timestamp` (MovieLens 1M `ratings.dat`).
    Ml1mColonColon,
    /// Comma separated with string user/item keys.
    AmazonCsv(CsvColumns),
}

impl FromStr for DatasetFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ml100k-tab" => Ok(DatasetFormat::Ml100kTab),
            "ml1m-coloncolon" => Ok(DatasetFormat::Ml1mColonColon),
            "amazon-csv" => Ok(DatasetFormat::AmazonCsv(CsvColumns::default())),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| DataError::io(path, e))
}

pub fn load_ratings(path: &Path, format: DatasetFormat) -> Result<RatingTable, DataError> {
    let reader = open(path)?;
    read_ratings(reader, format).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::io(path, source),
        other => other,
    })
}

pub fn read_ratings<R: Read>(reader: R, format: DatasetFormat) -> Result<RatingTable, DataError> {
    match format {
        DatasetFormat::Ml100kTab => read_delimited(reader, "\t"),
        DatasetFormat::Ml1mColonColon => read_delimited(reader, "::"),
        DatasetFormat::AmazonCsv(cols) => read_amazon(reader, cols),
    }
}

fn parse_field<T: FromStr>(fields: &[&str], idx: usize, line: usize, what: &str) -> Result<T, DataError> {
    let raw = fields.get(idx).ok_or_else(|| DataError::Parse {
        line,
        message: format!("missing {what} field (column {idx})"),
    })?;
    raw.trim().parse().map_err(|_| DataError::Parse {
        line,
        message: format!("cannot parse {what} from `{raw}`"),
    })
}

fn check_rating(rating: f64, line: usize) -> Result<(), DataError> {
    if (RATING_MIN..=RATING_MAX).contains(&rating) {
        Ok(())
    } else {
        Err(DataError::Parse {
            line,
            message: format!("rating {rating} outside [{RATING_MIN}, {RATING_MAX}]"),
        })
    }
}

fn read_delimited<R: Read>(reader: R, sep: &str) -> Result<RatingTable, DataError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::io(Path::new("<reader>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() < 4 {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let record = RatingRecord {
            user: parse_field(&fields, 0, lineno, "user")?,
            item: parse_field(&fields, 1, lineno, "item")?,
            rating: parse_field(&fields, 2, lineno, "rating")?,
            timestamp: parse_field(&fields, 3, lineno, "timestamp")?,
        };
        check_rating(record.rating, lineno)?;
        if !seen.insert((record.user, record.item)) {
            return Err(DataError::DuplicatePair {
                user: record.user,
                item: record.item,
            });
        }
        records.push(record);
    }
    Ok(RatingTable::from_valid(records))
}

/// Amazon exports key users and items by strings; they are interned to
/// integers by ascending string order so ids do not depend on line order.
/// Repeated `(user, item)` pairs keep the latest timestamp.
fn read_amazon<R: Read>(reader: R, cols: CsvColumns) -> Result<RatingTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(cols.has_header)
        .flexible(true)
        .from_reader(reader);
    let mut raw: Vec<(String, String, f64, i64)> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let lineno = i + 1 + usize::from(cols.has_header);
        let row = row.map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = row.iter().collect();
        if fields.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let user: String = parse_field(&fields, cols.user, lineno, "user")?;
        let item: String = parse_field(&fields, cols.item, lineno, "item")?;
        let rating: f64 = parse_field(&fields, cols.rating, lineno, "rating")?;
        let timestamp: i64 = parse_field(&fields, cols.timestamp, lineno, "timestamp")?;
        check_rating(rating, lineno)?;
        raw.push((user, item, rating, timestamp));
    }
    let intern = |keys: Vec<&String>| -> HashMap<String, u32> {
        let mut k: Vec<&String> = keys;
        k.sort();
        k.dedup();
        k.into_iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32 + 1))
            .collect()
    };
    let users = intern(raw.iter().map(|r| &r.0).collect());
    let items = intern(raw.iter().map(|r| &r.1).collect());

    let mut latest: HashMap<(UserId, ItemId), usize> = HashMap::new();
    let mut records: Vec<RatingRecord> = Vec::with_capacity(raw.len());
    let mut duplicates = 0usize;
    for (u, i, rating, timestamp) in &raw {
        let rec = RatingRecord {
            user: users[u],
            item: items[i],
            rating: *rating,
            timestamp: *timestamp,
        };
        match latest.get(&(rec.user, rec.item)) {
            Some(&pos) => {
                duplicates += 1;
                if rec.timestamp >= records[pos].timestamp {
                    records[pos] = rec;
                }
            }
            None => {
                latest.insert((rec.user, rec.item), records.len());
                records.push(rec);
            }
        }
    }
    if duplicates > 0 {
        warn!("amazon-csv: collapsed {duplicates} repeated user/item ratings to the latest");
    }
    Ok(RatingTable::from_valid(records))
}

/// Iteratively drop users and items with fewer than `n` ratings until every
/// survivor has at least `n`.
pub fn ncore_filter(table: &RatingTable, n: usize) -> Result<RatingTable, DataError> {
    if n == 0 {
        return Err(DataError::Config("n-core threshold must be at least 1".into()));
    }
    let mut alive: Vec<bool> = vec![true; table.records.len()];
    loop {
        let mut user_deg: HashMap<UserId, usize> = HashMap::new();
        let mut item_deg: HashMap<ItemId, usize> = HashMap::new();
        for (r, _) in table.records.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_deg.entry(r.user).or_default() += 1;
            *item_deg.entry(r.item).or_default() += 1;
        }
        let mut removed = false;
        for (r, a) in table.records.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[&r.user] < n || item_deg[&r.item] < n) {
                *a = false;
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
    let kept: Vec<RatingRecord> = table
        .records
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(r, _)| *r)
        .collect();
    if kept.is_empty() && !table.is_empty() {
        return Err(DataError::EmptyResult { n });
    }
    Ok(RatingTable::from_valid(kept))
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    /// Validation and test sizes for a user with `count` ratings; the train
    /// split takes the remainder.
    pub fn holdout_sizes(&self, count: usize) -> (usize, usize) {
        // The epsilon keeps e.g. 0.1 * 30 from flooring to 2.
        let floor = |f: f64| ((f * count as f64) + 1e-9).floor() as usize;
        (floor(self.validation), floor(self.test))
    }

    fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Config(format!("split fractions out of range: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

/// Per-user chronological partition of a table.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTable {
    pub train: RatingTable,
    pub validation: RatingTable,
    pub test: RatingTable,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserSplit {
    pub train: UserRatings,
    pub validation: UserRatings,
    pub test: UserRatings,
}

impl SplitTable {
    pub fn total(&self) -> usize {
        self.train.rating_count() + self.validation.rating_count() + self.test.rating_count()
    }

    pub fn per_user(&self) -> BTreeMap<UserId, UserSplit> {
        let mut out: BTreeMap<UserId, UserSplit> = BTreeMap::new();
        for (u, r) in self.train.by_user() {
            out.entry(u).or_default().train = r;
        }
        for (u, r) in self.validation.by_user() {
            out.entry(u).or_default().validation = r;
        }
        for (u, r) in self.test.by_user() {
            out.entry(u).or_default().test = r;
        }
        out
    }
}

/// Sort each user's history by timestamp (ties by item id) and cut it into
/// train / validation / test using [`SplitFractions::holdout_sizes`].
pub fn temporal_split(table: &RatingTable, fractions: SplitFractions) -> Result<SplitTable, DataError> {
    fractions.validate()?;
    let mut per_user: BTreeMap<UserId, Vec<RatingRecord>> = BTreeMap::new();
    for r in &table.records {
        per_user.entry(r.user).or_default().push(*r);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut recs) in per_user {
        recs.sort_by_key(|r| (r.timestamp, r.item));
        let (n_val, n_test) = fractions.holdout_sizes(recs.len());
        let n_train = recs.len() - n_val - n_test;
        train.extend_from_slice(&recs[..n_train]);
        val.extend_from_slice(&recs[n_train..n_train + n_val]);
        test.extend_from_slice(&recs[n_train + n_val..]);
    }
    Ok(SplitTable {
        train: RatingTable::from_valid(train),
        validation: RatingTable::from_valid(val),
        test: RatingTable::from_valid(test),
    })
}

/// Binary sensitive group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    S0,
    S1,
}

impl Group {
    pub fn index(self) -> usize {
        match self {
            Group::S0 => 0,
            Group::S1 => 1,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::S0 => Group::S1,
            Group::S1 => Group::S0,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::S0 => "S0",
            Group::S1 => "S1",
        })
    }
}

impl FromStr for Group {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S0" => Ok(Group::S0),
            "S1" => Ok(Group::S1),
            other => Err(DataError::Config(format!("unknown group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitiveAttribute {
    Gender,
    Activity,
}

impl FromStr for SensitiveAttribute {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gender" | "G" => Ok(SensitiveAttribute::Gender),
            "activity" | "A" => Ok(SensitiveAttribute::Activity),
            other => Err(DataError::Config(format!("unknown sensitive attribute `{other}`"))),
        }
    }
}

impl fmt::Display for SensitiveAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensitiveAttribute::Gender => "gender",
            SensitiveAttribute::Activity => "activity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    /// Female users form S0, male users S1.
    pub fn group(self) -> Group {
        match self {
            Gender::Female => Group::S0,
            Gender::Male => Group::S1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemographicsFormat {
    /// `u.user`: `id|age|gender|occupation|zip`.
    Ml100kPipe,
    /// `users.dat`: `id::gender::age::occupation::zip`.
    Ml1mColonColon,
}

pub type Demographics = HashMap<UserId, Gender>;

pub fn load_demographics(path: &Path, format: DemographicsFormat) -> Result<Demographics, DataError> {
    read_demographics(open(path)?, format)
}

pub fn read_demographics<R: Read>(reader: R, format: DemographicsFormat) -> Result<Demographics, DataError> {
    let (sep, gender_idx) = match format {
        DemographicsFormat::Ml100kPipe => ("|", 2),
        DemographicsFormat::Ml1mColonColon => ("::", 1),
    };
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::io(Path::new("<reader>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        let user: UserId = parse_field(&fields, 0, lineno, "user")?;
        let gender = match fields.get(gender_idx).map(|g| g.trim()) {
            Some("F") => Gender::Female,
            Some("M") => Gender::Male,
            other => {
                return Err(DataError::Parse {
                    line: lineno,
                    message: format!("expected gender F or M, found {other:?}"),
                })
            }
        };
        out.insert(user, gender);
    }
    Ok(out)
}

/// Total map from user to sensitive group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensitiveAssignment {
    pub attribute: SensitiveAttribute,
    group_of: BTreeMap<UserId, Group>,
}

impl SensitiveAssignment {
    pub fn new(attribute: SensitiveAttribute, group_of: BTreeMap<UserId, Group>) -> Self {
        Self { attribute, group_of }
    }

    pub fn group(&self, user: UserId) -> Option<Group> {
        self.group_of.get(&user).copied()
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn count(&self, group: Group) -> usize {
        self.group_of.values().filter(|g| **g == group).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, Group)> + '_ {
        self.group_of.iter().map(|(u, g)| (*u, *g))
    }
}

/// Linear-interpolation quantile of a non-empty sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Assign every user of `train` to S0 or S1.
///
/// Gender maps female to S0 and male to S1. Activity marks a user active
/// (S1) when their training-rating count is strictly above the
/// `activity_quantile` of the per-user counts.
pub fn assign_sensitive(
    train: &RatingTable,
    attribute: SensitiveAttribute,
    demographics: Option<&Demographics>,
    activity_quantile: f64,
) -> Result<SensitiveAssignment, DataError> {
    let mut group_of = BTreeMap::new();
    match attribute {
        SensitiveAttribute::Gender => {
            let demo = demographics.ok_or_else(|| {
                DataError::Config("gender attribute requires a demographics file".into())
            })?;
            let mut missing = Vec::new();
            for u in train.users() {
                match demo.get(&u) {
                    Some(g) => {
                        group_of.insert(u, g.group());
                    }
                    None => missing.push(u),
                }
            }
            if !missing.is_empty() {
                return Err(DataError::MissingDemographics(missing));
            }
        }
        SensitiveAttribute::Activity => {
            if !(activity_quantile > 0.0 && activity_quantile < 1.0) {
                return Err(DataError::Config(format!(
                    "activity quantile must lie in (0, 1), got {activity_quantile}"
                )));
            }
            let mut counts: BTreeMap<UserId, usize> = BTreeMap::new();
            for r in train.records() {
                *counts.entry(r.user).or_default() += 1;
            }
            if counts.is_empty() {
                return Ok(SensitiveAssignment::new(attribute, group_of));
            }
            let mut sorted: Vec<f64> = counts.values().map(|c| *c as f64).collect();
            sorted.sort_by(f64::total_cmp);
            let threshold = quantile_sorted(&sorted, activity_quantile);
            for (u, c) in counts {
                let g = if c as f64 > threshold { Group::S1 } else { Group::S0 };
                group_of.insert(u, g);
            }
        }
    }
    Ok(SensitiveAssignment::new(attribute, group_of))
}

/// Write a table in the tab-separated `u.data` layout.
pub fn write_table(path: &Path, table: &RatingTable) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in table.records() {
        writeln!(w, "{}\t{}\t{}\t{}", r.user, r.item, r.rating, r.timestamp)
            .map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Write `user \t group` lines, plus a header naming the attribute.
pub fn write_assignment(path: &Path, groups: &SensitiveAssignment) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| DataError::io(path, e);
    writeln!(w, "# attribute={}", groups.attribute).map_err(io)?;
    for (u, g) in groups.iter() {
        writeln!(w, "{u}\t{g}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_assignment(path: &Path) -> Result<SensitiveAssignment, DataError> {
    let reader = open(path)?;
    let mut attribute = None;
    let mut group_of = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        if let Some(rest) = line.strip_prefix("# attribute=") {
            attribute = Some(rest.trim().parse()?);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let user: UserId = parse_field(&fields, 0, lineno, "user")?;
        let group: Group = fields
            .get(1)
            .ok_or_else(|| DataError::Parse {
                line: lineno,
                message: "missing group".into(),
            })?
            .trim()
            .parse()
            .map_err(|_| DataError::Parse {
                line: lineno,
                message: format!("bad group in `{line}`"),
            })?;
        group_of.insert(user, group);
    }
    let attribute = attribute.ok_or_else(|| DataError::Parse {
        line: 1,
        message: "missing `# attribute=` header".into(),
    })?;
    Ok(SensitiveAssignment::new(attribute, group_of))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(user: UserId, item: ItemId, rating: f64, timestamp: i64) -> RatingRecord {
        RatingRecord {
            user,
            item,
            rating,
            timestamp,
        }
    }

    #[test]
    fn parses_three_line_tab_fixture() {
        let raw = "1\t10\t3\t100\n2\t10\t4\t90\n1\t11\t5\t120\n";
        let t = read_ratings(raw.as_bytes(), DatasetFormat::Ml100kTab).unwrap();
        assert_eq!(
            t.records(),
            &[rec(1, 10, 3.0, 100), rec(2, 10, 4.0, 90), rec(1, 11, 5.0, 120)]
        );
        assert_eq!((t.user_count(), t.item_count(), t.rating_count()), (2, 2, 3));
    }

    #[test]
    fn empty_input_gives_empty_table() {
        let t = read_ratings("".as_bytes(), DatasetFormat::Ml100kTab).unwrap();
        assert_eq!((t.user_count(), t.item_count(), t.rating_count()), (0, 0, 0));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let raw = "1\t10\t3\t100\n2\tx\t4\t90\n";
        match read_ratings(raw.as_bytes(), DatasetFormat::Ml100kTab) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let raw = "1::10::3::100\n1::11::7::100\n";
        match read_ratings(raw.as_bytes(), DatasetFormat::Ml1mColonColon) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!(
            "parquet".parse::<DatasetFormat>(),
            Err(DataError::UnknownFormat(_))
        ));
    }

    #[test]
    fn duplicate_pair_rejected() {
        let raw = "1\t10\t3\t100\n1\t10\t4\t200\n";
        assert!(matches!(
            read_ratings(raw.as_bytes(), DatasetFormat::Ml100kTab),
            Err(DataError::DuplicatePair { user: 1, item: 10 })
        ));
    }

    #[test]
    fn amazon_interns_and_keeps_latest() {
        let raw = "B2,ua,4.0,10\nB1,ub,2.0,11\nB2,ua,5.0,20\n";
        let t = read_ratings(
            raw.as_bytes(),
            DatasetFormat::AmazonCsv(CsvColumns::default()),
        )
        .unwrap();
        // users: ua=1, ub=2; items: B1=1, B2=2
        assert_eq!(t.canonical(), vec![rec(1, 2, 5.0, 20), rec(2, 1, 2.0, 11)]);
    }

    #[test]
    fn amazon_custom_columns() {
        let cols = CsvColumns {
            user: 0,
            item: 1,
            rating: 2,
            timestamp: 3,
            has_header: true,
        };
        let raw = "reviewer,asin,overall,unixReviewTime\nu1,i1,3,5\n";
        let t = read_ratings(raw.as_bytes(), DatasetFormat::AmazonCsv(cols)).unwrap();
        assert_eq!(t.records(), &[rec(1, 1, 3.0, 5)]);
    }

    /// Naive oracle: remove one offending record at a time, recounting from
    /// scratch after every removal.
    fn brute_force_ncore(records: &[RatingRecord], n: usize) -> Vec<RatingRecord> {
        let mut cur: Vec<RatingRecord> = records.to_vec();
        'outer: loop {
            for idx in 0..cur.len() {
                let r = cur[idx];
                let ud = cur.iter().filter(|x| x.user == r.user).count();
                let id = cur.iter().filter(|x| x.item == r.item).count();
                if ud < n || id < n {
                    cur.remove(idx);
                    continue 'outer;
                }
            }
            break;
        }
        cur.sort_by_key(|r| (r.user, r.item));
        cur
    }

    fn six_by_six() -> RatingTable {
        // Dense-ish core among users 1..4 / items 1..4 plus a fringe that
        // only collapses through cascading removals.
        let mut v = Vec::new();
        for u in 1..=4 {
            for i in 1..=4 {
                if (u + i) % 4 != 0 {
                    v.push(rec(u, i, 3.0, (u * 10 + i) as i64));
                }
            }
        }
        v.push(rec(5, 5, 4.0, 1));
        v.push(rec(5, 1, 4.0, 2));
        v.push(rec(6, 5, 2.0, 3));
        v.push(rec(6, 6, 2.0, 4));
        v.push(rec(1, 6, 1.0, 5));
        RatingTable::new(v).unwrap()
    }

    #[test]
    fn ncore_matches_brute_force_fixture() {
        let t = six_by_six();
        for n in 1..=4 {
            let got = ncore_filter(&t, n).map(|t| t.canonical()).unwrap_or_default();
            assert_eq!(got, brute_force_ncore(t.records(), n), "n={n}");
        }
        let two = ncore_filter(&t, 2).unwrap();
        assert_eq!(two.user_count(), 6);
        let three = ncore_filter(&t, 3).unwrap();
        assert_eq!((three.user_count(), three.item_count()), (4, 4));
    }

    #[test]
    fn ncore_empty_result_is_signalled() {
        let t = six_by_six();
        assert!(matches!(ncore_filter(&t, 10), Err(DataError::EmptyResult { n: 10 })));
        assert!(matches!(ncore_filter(&t, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        let f = SplitFractions::default();
        assert_eq!(f.holdout_sizes(20), (2, 2));
        assert_eq!(f.holdout_sizes(21), (2, 2));
        assert_eq!(f.holdout_sizes(30), (3, 3));
        assert_eq!(f.holdout_sizes(9), (0, 0));

        let recs: Vec<RatingRecord> = (0..21).map(|i| rec(1, i, 3.0, 100 - i as i64)).collect();
        let s = temporal_split(&RatingTable::new(recs).unwrap(), f).unwrap();
        assert_eq!(
            (s.train.rating_count(), s.validation.rating_count(), s.test.rating_count()),
            (17, 2, 2)
        );
        // newest timestamps (smallest item ids here) land in test
        let test_items: Vec<ItemId> = s.test.records().iter().map(|r| r.item).collect();
        assert_eq!(test_items, vec![1, 0]);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let f = SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.2,
        };
        assert!(matches!(
            temporal_split(&six_by_six(), f),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn activity_matches_count_and_compare_oracle() {
        let counts = [3usize, 8, 1, 5, 5, 12, 2, 7, 9, 4];
        let mut v = Vec::new();
        for (u, c) in counts.iter().enumerate() {
            for i in 0..*c {
                v.push(rec(u as u32 + 1, i as u32, 3.0, 0));
            }
        }
        let t = RatingTable::new(v).unwrap();
        let got = assign_sensitive(&t, SensitiveAttribute::Activity, None, 0.5).unwrap();
        // oracle: sorted counts 1 2 3 4 5 5 7 8 9 12 -> median (5+5)/2 = 5
        let mut sorted = counts.to_vec();
        sorted.sort();
        let median = (sorted[4] + sorted[5]) as f64 / 2.0;
        for (u, c) in counts.iter().enumerate() {
            let want = if *c as f64 > median { Group::S1 } else { Group::S0 };
            assert_eq!(got.group(u as u32 + 1), Some(want));
        }
        assert_eq!(got.count(Group::S1), 4);
    }

    #[test]
    fn clearly_active_user_is_s1() {
        let mut v = Vec::new();
        for u in 1..=4u32 {
            for i in 0..50 {
                v.push(rec(u, i, 3.0, 0));
            }
        }
        for i in 0..200 {
            v.push(rec(9, i, 3.0, 0));
        }
        let t = RatingTable::new(v).unwrap();
        let g = assign_sensitive(&t, SensitiveAttribute::Activity, None, 0.5).unwrap();
        assert_eq!(g.group(9), Some(Group::S1));
        assert_eq!(g.group(1), Some(Group::S0));
    }

    #[test]
    fn gender_mapping_and_missing_users() {
        let demo = read_demographics(
            "1|24|M|technician|85711\n2|53|F|other|94043\n".as_bytes(),
            DemographicsFormat::Ml100kPipe,
        )
        .unwrap();
        let t = RatingTable::new(vec![rec(1, 1, 3.0, 0), rec(2, 1, 3.0, 0)]).unwrap();
        let g = assign_sensitive(&t, SensitiveAttribute::Gender, Some(&demo), 0.5).unwrap();
        assert_eq!(g.group(1), Some(Group::S1));
        assert_eq!(g.group(2), Some(Group::S0));

        let t3 = RatingTable::new(vec![rec(3, 1, 3.0, 0)]).unwrap();
        assert!(matches!(
            assign_sensitive(&t3, SensitiveAttribute::Gender, Some(&demo), 0.5),
            Err(DataError::MissingDemographics(ref u)) if u == &vec![3]
        ));
        assert!(matches!(
            assign_sensitive(&t, SensitiveAttribute::Gender, None, 0.5),
            Err(DataError::Config(_))
        ));

        let ml1m = read_demographics("7::F::1::10::48067\n".as_bytes(), DemographicsFormat::Ml1mColonColon)
            .unwrap();
        assert_eq!(ml1m[&7], Gender::Female);
    }

    #[test]
    fn assignment_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("groups.tsv");
        let mut m = BTreeMap::new();
        m.insert(3, Group::S1);
        m.insert(1, Group::S0);
        let a = SensitiveAssignment::new(SensitiveAttribute::Activity, m);
        write_assignment(&p, &a).unwrap();
        assert_eq!(read_assignment(&p).unwrap(), a);
    }

    fn arb_table() -> impl Strategy<Value = Vec<RatingRecord>> {
        proptest::collection::btree_map((1u32..12, 1u32..12), (1u8..=5, 0i64..50), 0..80).prop_map(|m| {
            m.into_iter()
                .map(|((u, i), (r, t))| rec(u, i, r as f64, t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn ncore_idempotent_and_order_free(recs in arb_table(), n in 1usize..5, seed in any::<u64>()) {
            let t = RatingTable::new(recs.clone()).unwrap();
            match ncore_filter(&t, n) {
                Ok(once) => {
                    let twice = ncore_filter(&once, n).unwrap();
                    prop_assert_eq!(once.canonical(), twice.canonical());
                    for r in once.records() {
                        prop_assert!(once.records().iter().filter(|x| x.user == r.user).count() >= n);
                        prop_assert!(once.records().iter().filter(|x| x.item == r.item).count() >= n);
                    }
                    let mut shuffled = recs.clone();
                    let len = shuffled.len();
                    if len > 1 {
                        let k = (seed % len as u64) as usize;
                        shuffled.rotate_left(k);
                        shuffled.reverse();
                    }
                    let other = ncore_filter(&RatingTable::new(shuffled).unwrap(), n).unwrap();
                    prop_assert_eq!(once.canonical(), other.canonical());
                    prop_assert_eq!(once.canonical(), brute_force_ncore(&recs, n));
                }
                Err(DataError::EmptyResult { .. }) => {
                    prop_assert!(brute_force_ncore(&recs, n).is_empty());
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn split_conserves_and_orders(recs in arb_table()) {
            let t = RatingTable::new(recs).unwrap();
            let s = temporal_split(&t, SplitFractions::default()).unwrap();
            prop_assert_eq!(s.total(), t.rating_count());
            for (_, us) in s.per_user() {
                let n = us.train.len() + us.validation.len() + us.test.len();
                let (v, te) = SplitFractions::default().holdout_sizes(n);
                prop_assert_eq!((us.validation.len(), us.test.len()), (v, te));
            }
            let by_user_time = |tab: &RatingTable| {
                let mut m: BTreeMap<UserId, (i64, i64)> = BTreeMap::new();
                for r in tab.records() {
                    let e = m.entry(r.user).or_insert((i64::MAX, i64::MIN));
                    e.0 = e.0.min(r.timestamp);
                    e.1 = e.1.max(r.timestamp);
                }
                m
            };
            let (tr, va, te) = (by_user_time(&s.train), by_user_time(&s.validation), by_user_time(&s.test));
            for (u, (_, tr_max)) in &tr {
                if let Some((va_min, _)) = va.get(u) { prop_assert!(tr_max <= va_min); }
                if let Some((te_min, _)) = te.get(u) { prop_assert!(tr_max <= te_min); }
            }
            for (u, (_, va_max)) in &va {
                if let Some((te_min, _)) = te.get(u) { prop_assert!(va_max <= te_min); }
            }
        }

        #[test]
        fn activity_invariant_to_permutation(recs in arb_table(), k in 0usize..80) {
            prop_assume!(!recs.is_empty());
            let t = RatingTable::new(recs.clone()).unwrap();
            let mut rotated = recs.clone();
            let len = rotated.len();
            rotated.rotate_left(k % len);
            let t2 = RatingTable::new(rotated).unwrap();
            let a = assign_sensitive(&t, SensitiveAttribute::Activity, None, 0.5).unwrap();
            let b = assign_sensitive(&t2, SensitiveAttribute::Activity, None, 0.5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
