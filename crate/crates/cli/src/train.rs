//! `fedfair train`: one experiment, written to a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;

use fedfair_core::checkpoint::Checkpoint;
use fedfair_core::data::Group;
use fedfair_core::eval::run_experiment;
use fedfair_core::expansion::write_histogram_csv;
use fedfair_core::federation::{ExperimentConfig, RoundRecord};
use fedfair_core::privacy::privacy_budget;

use crate::config::Overrides;
use crate::exit::{Classify, CmdResult};
use crate::layout;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Run directory [default: runs/<manifest hash>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the server's item-digest histogram to `digests.csv`.
    #[arg(long)]
    pub dump_digests: bool,
}

pub const ROUNDS_HEADER: [&str; 11] = [
    "manifest",
    "epoch",
    "train_rmse",
    "val_rmse",
    "val_disparity",
    "test_rmse",
    "test_disparity",
    "p",
    "q",
    "participants",
    "wall_time",
];

pub fn write_rounds(path: &Path, stamp: &str, history: &[RoundRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(ROUNDS_HEADER)?;
    for r in history {
        w.write_record([
            stamp.to_string(),
            r.epoch.to_string(),
            r.train_rmse.to_string(),
            r.val_rmse.to_string(),
            r.val_disparity.to_string(),
            r.test_rmse.to_string(),
            r.test_disparity.to_string(),
            r.p.to_string(),
            r.q.to_string(),
            r.participants.to_string(),
            format!("{:.3}", r.wall_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything in here is a pure function of the manifest, so two runs with
/// the same manifest write identical bytes.
pub struct Summary {
    pub epochs_run: usize,
    pub val_rmse: f64,
    pub test_rmse: f64,
    pub test_disparity: f64,
    pub group_rmse: [f64; 2],
}

pub fn write_summary(path: &Path, stamp: &str, config: &ExperimentConfig, s: &Summary) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "manifest",
        "dataset",
        "attribute",
        "seed",
        "beta",
        "alpha",
        "sigma",
        "K",
        "eta",
        "hidden",
        "layers",
        "ldp",
        "delta",
        "lambda",
        "epsilon",
        "epochs_run",
        "val_rmse",
        "test_rmse",
        "test_disparity",
        "test_rmse_s0",
        "test_rmse_s1",
    ])?;
    let epsilon = if config.ldp.enabled {
        privacy_budget(&config.ldp).to_string()
    } else {
        "inf".into()
    };
    w.write_record([
        stamp.to_string(),
        config.dataset.name.clone(),
        config.dataset.attribute.to_string(),
        config.seed.to_string(),
        config.fairness.beta.to_string(),
        config.fairness.alpha.exponent().to_string(),
        config.fairness.sigma.to_string(),
        config.batch_dropout.to_string(),
        config.eta.to_string(),
        config.model.hidden.to_string(),
        config.model.layers.to_string(),
        config.ldp.enabled.to_string(),
        config.ldp.delta.to_string(),
        config.ldp.lambda.to_string(),
        epsilon,
        s.epochs_run.to_string(),
        s.val_rmse.to_string(),
        s.test_rmse.to_string(),
        s.test_disparity.to_string(),
        s.group_rmse[Group::S0.index()].to_string(),
        s.group_rmse[Group::S1.index()].to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> CmdResult {
    let config = args.overrides.resolve().usage()?;
    let data_dir = args.overrides.data_dir(&config);
    let prepared = layout::load(&data_dir, config.dataset.attribute).data()?;

    let mut manifest = RunManifest::new(config.clone(), prepared.fingerprint, PathBuf::new());
    let stamp = manifest.hash();
    let out = args.out.clone().unwrap_or_else(|| Path::new("runs").join(&stamp));
    manifest.output_dir = out.clone();
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    manifest.write(&out.join("manifest.json")).runtime()?;
    fs::write(out.join("config.toml"), config.to_toml()).runtime()?;

    log::info!(
        "training {} ({}) seed={} beta={} for {} epochs, manifest {stamp}",
        config.dataset.name,
        config.dataset.attribute,
        config.seed,
        config.fairness.beta,
        config.epochs
    );
    let result = run_experiment(&config, &prepared.split, &prepared.groups).runtime()?;
    let history = &result.outcome.history;
    write_rounds(&out.join("rounds.csv"), &stamp, history).runtime()?;
    let summary = Summary {
        epochs_run: history.len(),
        val_rmse: history.last().map_or(f64::NAN, |r| r.val_rmse),
        test_rmse: result.test.rmse,
        test_disparity: result.test.disparity,
        group_rmse: result.test.group_rmse,
    };
    write_summary(&out.join("summary.csv"), &stamp, &config, &summary).runtime()?;
    Checkpoint {
        state: result.outcome.state,
        seed: config.seed,
        epoch: history.len(),
        stats: result.outcome.stats,
    }
    .save(&out.join("model.ckpt"))
    .runtime()?;
    if args.dump_digests {
        write_histogram_csv(&result.outcome.digest_histogram, &out.join("digests.csv")).runtime()?;
    }

    println!(
        "test rmse {:.4} disparity {:.4} (S0 {:.4}, S1 {:.4}) after {} epochs -> {}",
        summary.test_rmse,
        summary.test_disparity,
        summary.group_rmse[0],
        summary.group_rmse[1],
        summary.epochs_run,
        out.display()
    );
    Ok(())
}
