//! Config file loading plus the command-line overrides shared by `train`
//! and `sweep`.

use std::path::PathBuf;

use anyhow::anyhow;
use clap::{Args, ValueEnum};

use fedfair_core::data::SensitiveAttribute;
use fedfair_core::fairness::Smoothness;
use fedfair_core::federation::ExperimentConfig;
use fedfair_core::model::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    LeakyRelu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Activation {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::LeakyRelu => Activation::LeakyRelu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prepared data directory [default: prepared/<dataset.name>].
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fairness budget, 0 <= beta < 1.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Disparity smoothness exponent, 1 or 2.
    #[arg(long)]
    pub alpha: Option<u8>,
    /// Noise std of the group statistics.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Batch dropout rate.
    #[arg(long = "K")]
    pub k: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    /// Gradient clipping threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Laplace noise scale.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub ldp: Option<Switch>,
    #[arg(long, value_enum)]
    pub expansion: Option<Switch>,
    /// Most neighbor users attached per client, 0 for no cap.
    #[arg(long)]
    pub neighbor_cap: Option<usize>,
    /// Stop after this many epochs without validation improvement; 0 never stops.
    #[arg(long)]
    pub early_stop: Option<usize>,
    #[arg(long)]
    pub attribute: Option<String>,
}

impl Overrides {
    /// Load the config file (or defaults), apply every given flag, validate.
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag {
                    $field = v.into();
                }
            };
        }
        set!(self.seed => c.seed);
        set!(self.epochs => c.epochs);
        set!(self.beta => c.fairness.beta);
        set!(self.sigma => c.fairness.sigma);
        set!(self.k => c.batch_dropout);
        set!(self.eta => c.eta);
        set!(self.hidden => c.model.hidden);
        set!(self.layers => c.model.layers);
        set!(self.dropout => c.model.dropout);
        set!(self.activation => c.model.activation);
        set!(self.delta => c.ldp.delta);
        set!(self.lambda => c.ldp.lambda);
        set!(self.ldp => c.ldp.enabled);
        set!(self.expansion => c.expansion);
        set!(self.neighbor_cap => c.neighbor_cap);
        set!(self.early_stop => c.early_stop);
        if let Some(a) = self.alpha {
            c.fairness.alpha = Smoothness::try_from(a)?;
        }
        if let Some(a) = &self.attribute {
            c.dataset.attribute = a.parse::<SensitiveAttribute>()?;
        }
        c.validate().map_err(|e| anyhow!(e))?;
        Ok(c)
    }

    pub fn data_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.data
            .clone()
            .unwrap_or_else(|| PathBuf::from("prepared").join(&config.dataset.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_defaults() {
        let o = Overrides {
            beta: Some(0.5),
            k: Some(0.5),
            alpha: Some(2),
            ldp: Some(Switch::On),
            attribute: Some("activity".into()),
            ..Overrides::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!(c.fairness.beta, 0.5);
        assert_eq!(c.batch_dropout, 0.5);
        assert_eq!(c.fairness.alpha, Smoothness::Squared);
        assert!(c.ldp.enabled);
        assert_eq!(c.dataset.attribute, SensitiveAttribute::Activity);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for o in [
            Overrides { beta: Some(1.0), ..Overrides::default() },
            Overrides { alpha: Some(3), ..Overrides::default() },
            Overrides { k: Some(1.0), ..Overrides::default() },
            Overrides { attribute: Some("age".into()), ..Overrides::default() },
        ] {
            assert!(o.resolve().is_err(), "{o:?}");
        }
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "eta = 0.05\n[fairness]\nbeta = 0.3\n").unwrap();
        let o = Overrides {
            config: Some(p),
            beta: Some(0.7),
            ..Overrides::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!((c.eta, c.fairness.beta), (0.05, 0.7));
    }
}
