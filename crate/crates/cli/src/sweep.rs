//! `fedfair sweep`: β sweeps and (δ, λ) grids over one or more seeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;

use fedfair_core::eval::{
    beta_sweep, ldp_grid, percent_changes, write_figure3, write_ldp_grid, write_percent_changes, write_table1,
    SweepCell,
};

use crate::config::Overrides;
use crate::exit::{fail, Classify, CmdResult, ExitKind};
use crate::layout;
use crate::manifest::{RunManifest, SweepSpec};

const DEFAULT_BETAS: &str = "0,0.3,0.5,0.7,0.9";

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Comma separated fairness budgets [default: 0,0.3,0.5,0.7,0.9, or
    /// none when a (δ, λ) grid is requested].
    #[arg(long)]
    pub betas: Option<String>,
    /// Comma separated seeds [default: the config seed].
    #[arg(long)]
    pub seeds: Option<String>,
    /// Clipping thresholds of the LDP grid.
    #[arg(long)]
    pub deltas: Option<String>,
    /// Noise scales of the LDP grid.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Output directory [default: sweeps/<manifest hash>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("--{flag}: `{s}`: {e}")))
        .collect()
}

impl SweepArgs {
    fn spec(&self, default_seed: u64) -> anyhow::Result<SweepSpec> {
        let grid = self.deltas.is_some() || self.lambdas.is_some();
        let betas = match (&self.betas, grid) {
            (Some(b), _) => parse_list("betas", b)?,
            (None, false) => parse_list("betas", DEFAULT_BETAS)?,
            (None, true) => Vec::new(),
        };
        let deltas: Vec<f64> = self.deltas.as_deref().map(|d| parse_list("deltas", d)).transpose()?.unwrap_or_default();
        let lambdas: Vec<f64> = self.lambdas.as_deref().map(|l| parse_list("lambdas", l)).transpose()?.unwrap_or_default();
        if grid && (deltas.is_empty() || lambdas.is_empty()) {
            return Err(anyhow!("an LDP grid needs both --deltas and --lambdas"));
        }
        let seeds = match &self.seeds {
            Some(s) => parse_list("seeds", s)?,
            None => vec![default_seed],
        };
        if seeds.is_empty() {
            return Err(anyhow!("--seeds is empty"));
        }
        if betas.is_empty() && deltas.is_empty() {
            return Err(anyhow!("empty sweep: give --betas or --deltas with --lambdas"));
        }
        Ok(SweepSpec {
            seeds,
            betas,
            deltas,
            lambdas,
        })
    }
}

pub fn run(args: &SweepArgs) -> CmdResult {
    let config = args.overrides.resolve().usage()?;
    let spec = args.spec(config.seed).usage()?;
    for &b in &spec.betas {
        let mut c = config.clone();
        c.fairness.beta = b;
        c.validate().map_err(|e| anyhow!("beta {b}: {e}")).usage()?;
    }
    let data_dir = args.overrides.data_dir(&config);
    let prepared = layout::load(&data_dir, config.dataset.attribute).data()?;

    let mut manifest = RunManifest::new(config.clone(), prepared.fingerprint, PathBuf::new());
    manifest.sweep = Some(spec.clone());
    let stamp = manifest.hash();
    let out = args.out.clone().unwrap_or_else(|| Path::new("sweeps").join(&stamp));
    manifest.output_dir = out.clone();
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    manifest.write(&out.join("manifest.json")).runtime()?;
    fs::write(out.join("config.toml"), config.to_toml()).runtime()?;

    let dataset = config.dataset.name.as_str();
    let attribute = config.dataset.attribute.to_string();
    let mut failed = 0;
    let mut beta_cells: Vec<SweepCell> = Vec::new();
    let mut grid_cells: Vec<SweepCell> = Vec::new();
    for &seed in &spec.seeds {
        let mut base = config.clone();
        base.seed = seed;
        if !spec.betas.is_empty() {
            let cells = beta_sweep(&base, &spec.betas, &prepared.split, &prepared.groups).usage()?;
            for c in &cells {
                report(c);
            }
            beta_cells.extend(cells);
        }
        if !spec.deltas.is_empty() {
            let cells = ldp_grid(&base, &spec.deltas, &spec.lambdas, &prepared.split, &prepared.groups).usage()?;
            for c in &cells {
                report(c);
            }
            grid_cells.extend(cells);
        }
    }
    failed += beta_cells.iter().chain(&grid_cells).filter(|c| c.result.is_err()).count();

    if !beta_cells.is_empty() {
        write_table1(&out.join("table1.csv"), &stamp, dataset, &attribute, &beta_cells).runtime()?;
        write_figure3(&out.join("figure3.csv"), &stamp, &beta_cells).runtime()?;
        write_percent_changes(&out.join("percent_change.csv"), &stamp, &percent_changes(&beta_cells)).runtime()?;
    }
    if !grid_cells.is_empty() {
        write_ldp_grid(&out.join("figure5.csv"), &stamp, &grid_cells).runtime()?;
    }
    println!("wrote {}", out.display());
    if failed > 0 {
        return fail(ExitKind::Runtime, anyhow!("{failed} sweep cell(s) failed; see the status column"));
    }
    Ok(())
}

fn report(c: &SweepCell) {
    let ldp = if c.ldp {
        format!(" delta={} lambda={} eps={:.3}", c.delta, c.lambda, c.epsilon())
    } else {
        String::new()
    };
    match &c.result {
        Ok(s) => println!("seed={} beta={}{ldp}: rmse {:.4} disparity {:.4}", c.seed, c.beta, s.rmse, s.disparity),
        Err(e) => println!("seed={} beta={}{ldp}: FAILED {e}", c.seed, c.beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(betas: Option<&str>, deltas: Option<&str>, lambdas: Option<&str>) -> SweepArgs {
        SweepArgs {
            overrides: Overrides::default(),
            betas: betas.map(Into::into),
            seeds: None,
            deltas: deltas.map(Into::into),
            lambdas: lambdas.map(Into::into),
            out: None,
        }
    }

    #[test]
    fn default_spec_is_the_beta_grid() {
        let s = args(None, None, None).spec(4).unwrap();
        assert_eq!(s.betas, vec![0.0, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(s.seeds, vec![4]);
        assert!(s.deltas.is_empty());
    }

    #[test]
    fn grid_alone_skips_betas() {
        let s = args(None, Some("0.2,0.4"), Some("0.1")).spec(0).unwrap();
        assert!(s.betas.is_empty());
        assert_eq!((s.deltas.len(), s.lambdas.len()), (2, 1));
    }

    #[test]
    fn empty_specs_are_errors() {
        assert!(args(Some(""), None, None).spec(0).is_err());
        assert!(args(Some(" , "), None, None).spec(0).is_err());
        assert!(args(None, Some("0.2"), None).spec(0).is_err());
        assert!(args(None, Some(""), Some("0.1")).spec(0).is_err());
        assert!(args(Some("0,x"), None, None).spec(0).is_err());
    }
}
