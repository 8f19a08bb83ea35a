//! `fedfair verify`: the property suites, one line each.

use anyhow::anyhow;
use clap::{Args, ValueEnum};

use fedfair_core::model::{backward, ForwardTrace, GradientSet, LocalSubgraph, ModelConfig, ModelState};
use fedfair_core::verify::{run_all_with, BackwardFn};

use crate::exit::{fail, CmdResult, ExitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negate the attention-vector gradient.
    Gradient,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Comma separated seeds; every suite runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0", alias = "seed")]
    pub seeds: Vec<u64>,
    /// Deliberately break a component to check that the suites notice.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

fn flipped_attention(t: &ForwardTrace, y: &[f64], g: &LocalSubgraph, p: &ModelState, c: &ModelConfig) -> GradientSet {
    let mut out = backward(t, y, g, p, c);
    for l in &mut out.layers {
        for x in l.attention.iter_mut() {
            *x = -*x;
        }
    }
    out
}

pub fn run(args: &VerifyArgs) -> CmdResult {
    let grad: &BackwardFn = match args.inject_fault {
        None => &backward,
        Some(Fault::Gradient) => &flipped_attention,
    };
    let mut failed: Vec<String> = Vec::new();
    for &seed in &args.seeds {
        for r in run_all_with(seed, grad) {
            println!("seed={seed} {r}");
            if !r.passed && !failed.iter().any(|f| f == r.name) {
                failed.push(r.name.to_string());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        fail(ExitKind::Runtime, anyhow!("failing suites: {}", failed.join(", ")))
    }
}
