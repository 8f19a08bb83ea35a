//! `fedfair prepare`: raw dataset files to filtered, split, grouped TSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use serde::Serialize;

use fedfair_core::data::{
    assign_sensitive, load_demographics, load_ratings, ncore_filter, temporal_split, write_assignment, write_table,
    CsvColumns, DatasetFormat, DemographicsFormat, Group, SensitiveAttribute, SplitFractions,
};

use crate::exit::{fail, Classify, CmdResult, ExitKind};
use crate::layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetName {
    #[value(name = "ml-100k")]
    Ml100k,
    #[value(name = "ml-1m")]
    Ml1m,
    #[value(name = "amazon-movies")]
    AmazonMovies,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Ml100k => "ml-100k",
            DatasetName::Ml1m => "ml-1m",
            DatasetName::AmazonMovies => "amazon-movies",
        }
    }

    fn ratings_file(self) -> &'static str {
        match self {
            DatasetName::Ml100k => "u.data",
            DatasetName::Ml1m => "ratings.dat",
            DatasetName::AmazonMovies => "ratings.csv",
        }
    }

    fn demographics(self) -> Option<(&'static str, DemographicsFormat)> {
        match self {
            DatasetName::Ml100k => Some(("u.user", DemographicsFormat::Ml100kPipe)),
            DatasetName::Ml1m => Some(("users.dat", DemographicsFormat::Ml1mColonColon)),
            DatasetName::AmazonMovies => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetName,
    /// Minimum interactions per user and per item.
    #[arg(long, default_value_t = 20)]
    pub ncore: usize,
    /// Directory holding the raw files [default: data/<dataset>].
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Output directory [default: prepared/<dataset>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sensitive attributes to materialize; every available one by default.
    #[arg(long, value_delimiter = ',')]
    pub attribute: Vec<String>,
    /// Users whose training-rating count is above this quantile are active.
    #[arg(long, default_value_t = 0.5)]
    pub activity_quantile: f64,
    /// Column order of the Amazon CSV, e.g. `user,item,rating,timestamp`.
    #[arg(long, default_value = "item,user,rating,timestamp")]
    pub columns: String,
    /// The Amazon CSV starts with a header row.
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Serialize)]
struct Stats {
    dataset: &'static str,
    ncore: usize,
    users: usize,
    items: usize,
    ratings: usize,
    train: usize,
    validation: usize,
    test: usize,
    groups: BTreeMap<String, BTreeMap<String, usize>>,
}

fn parse_columns(spec: &str, header: bool) -> anyhow::Result<CsvColumns> {
    let names: Vec<&str> = spec.split(',').map(str::trim).collect();
    let find = |want: &str| {
        names
            .iter()
            .position(|n| *n == want)
            .ok_or_else(|| anyhow!("--columns must name `{want}`, got `{spec}`"))
    };
    if names.len() != 4 {
        return Err(anyhow!("--columns needs exactly four names, got `{spec}`"));
    }
    Ok(CsvColumns {
        item: find("item")?,
        user: find("user")?,
        rating: find("rating")?,
        timestamp: find("timestamp")?,
        has_header: header,
    })
}

pub fn run(args: &PrepareArgs) -> CmdResult {
    let name = args.dataset;
    let raw = args.raw.clone().unwrap_or_else(|| Path::new("data").join(name.as_str()));
    let out = args.out.clone().unwrap_or_else(|| Path::new("prepared").join(name.as_str()));

    let attributes: Vec<SensitiveAttribute> = if args.attribute.is_empty() {
        match name.demographics() {
            Some(_) => vec![SensitiveAttribute::Gender, SensitiveAttribute::Activity],
            None => vec![SensitiveAttribute::Activity],
        }
    } else {
        args.attribute
            .iter()
            .map(|a| a.parse::<SensitiveAttribute>())
            .collect::<Result<_, _>>()
            .usage()?
    };
    if attributes.contains(&SensitiveAttribute::Gender) && name.demographics().is_none() {
        return fail(
            ExitKind::Usage,
            anyhow!("{} has no demographics; only --attribute activity is available", name.as_str()),
        );
    }
    if args.ncore == 0 {
        return fail(ExitKind::Usage, anyhow!("--ncore must be at least 1"));
    }
    let format = match name {
        DatasetName::Ml100k => DatasetFormat::Ml100kTab,
        DatasetName::Ml1m => DatasetFormat::Ml1mColonColon,
        DatasetName::AmazonMovies => DatasetFormat::AmazonCsv(parse_columns(&args.columns, args.header).usage()?),
    };

    let ratings_path = raw.join(name.ratings_file());
    let demo = name
        .demographics()
        .filter(|_| attributes.contains(&SensitiveAttribute::Gender))
        .map(|(f, fmt)| (raw.join(f), fmt));
    let missing: Vec<String> = std::iter::once(&ratings_path)
        .chain(demo.as_ref().map(|(p, _)| p))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        let hint = match name {
            DatasetName::Ml100k => "run scripts/fetch_ml100k.sh or pass --raw <dir>".to_string(),
            _ => format!("download the raw files into {} or pass --raw <dir>", raw.display()),
        };
        return fail(
            ExitKind::Data,
            anyhow!("missing raw file(s): {}; {hint}", missing.join(", ")),
        );
    }

    let table = load_ratings(&ratings_path, format).data()?;
    log::info!("raw {}: {table}", name.as_str());
    let filtered = ncore_filter(&table, args.ncore).data()?;
    let split = temporal_split(&filtered, SplitFractions::default()).data()?;
    let demographics = match &demo {
        Some((p, fmt)) => Some(load_demographics(p, *fmt).data()?),
        None => None,
    };

    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    write_table(&out.join(layout::RATINGS), &filtered).runtime()?;
    write_table(&out.join(layout::TRAIN), &split.train).runtime()?;
    write_table(&out.join(layout::VALIDATION), &split.validation).runtime()?;
    write_table(&out.join(layout::TEST), &split.test).runtime()?;

    let mut groups = BTreeMap::new();
    for attr in &attributes {
        let assignment =
            assign_sensitive(&split.train, *attr, demographics.as_ref(), args.activity_quantile).data()?;
        write_assignment(&out.join(layout::groups_file(*attr)), &assignment).runtime()?;
        groups.insert(
            attr.to_string(),
            [Group::S0, Group::S1]
                .into_iter()
                .map(|g| (g.to_string(), assignment.count(g)))
                .collect(),
        );
    }

    let stats = Stats {
        dataset: name.as_str(),
        ncore: args.ncore,
        users: filtered.user_count(),
        items: filtered.item_count(),
        ratings: filtered.rating_count(),
        train: split.train.rating_count(),
        validation: split.validation.rating_count(),
        test: split.test.rating_count(),
        groups,
    };
    let text = serde_json::to_string_pretty(&stats).runtime()?;
    fs::write(out.join(layout::STATS), text + "\n").runtime()?;

    println!(
        "{} ncore={}: {} users, {} items, {} ratings (train {}, validation {}, test {})",
        stats.dataset,
        stats.ncore,
        stats.users,
        stats.items,
        stats.ratings,
        stats.train,
        stats.validation,
        stats.test
    );
    for (attr, counts) in &stats.groups {
        let parts: Vec<String> = counts.iter().map(|(g, n)| format!("{g}={n}")).collect();
        println!("groups {attr}: {}", parts.join(" "));
    }
    Ok(())
}
