//! Run configuration: built-in defaults, dataset-aware defaults, a plain
//! `key=value` config file, and command-line overrides, in increasing
//! precedence.

use std::fmt;
use std::path::Path;

use gzsl_core::data::dataset_profile;
use gzsl_core::models::HChoice;
use gzsl_core::pipeline::{FeatureVariant, TrainConfig};
use gzsl_core::Precision;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Optional override for every tunable field. Flags and config files both
/// produce one of these; later layers win field by field.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub n_critic: Option<usize>,
    pub lr: Option<f64>,
    pub lr_classifier: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub lambda_gp: Option<f64>,
    pub lambda_samc: Option<f64>,
    pub lambda_ra: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub n_syn: Option<usize>,
    pub h_choice: Option<HChoice>,
    pub precision: Option<Precision>,
    pub eg_hidden: Option<usize>,
    pub fr_hidden: Option<usize>,
    pub latent_dim: Option<usize>,
    pub classifier_epochs: Option<usize>,
    pub classifier_batch: Option<usize>,
    pub samc_on_synthetic: Option<bool>,
    pub fr_enabled: Option<bool>,
    pub feature_variant: Option<FeatureVariant>,
    pub slope: Option<f64>,
}

impl Overrides {
    /// Parse a `key=value` file with `#` comments. Unknown keys are
    /// rejected.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut o = Overrides::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("{}:{}: expected key=value", path.display(), ln + 1))
            })?;
            o.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("{}:{}: {}", path.display(), ln + 1, e.0)))?;
        }
        Ok(o)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| ConfigError(format!("bad value '{value}' for {key}: {e}")))
        }
        match key {
            "seed" => self.seed = Some(parse(key, value)?),
            "iterations" => self.iterations = Some(parse(key, value)?),
            "batch_size" => self.batch_size = Some(parse(key, value)?),
            "n_critic" => self.n_critic = Some(parse(key, value)?),
            "lr" => self.lr = Some(parse(key, value)?),
            "lr_classifier" => self.lr_classifier = Some(parse(key, value)?),
            "beta1" => self.beta1 = Some(parse(key, value)?),
            "beta2" => self.beta2 = Some(parse(key, value)?),
            "adam_eps" => self.adam_eps = Some(parse(key, value)?),
            "lambda_gp" => self.lambda_gp = Some(parse(key, value)?),
            "lambda_samc" => self.lambda_samc = Some(parse(key, value)?),
            "lambda_ra" => self.lambda_ra = Some(parse(key, value)?),
            "gamma" => self.gamma = Some(parse(key, value)?),
            "delta" => self.delta = Some(parse(key, value)?),
            "n_syn" => self.n_syn = Some(parse(key, value)?),
            "h_choice" => self.h_choice = Some(parse_h_choice(value)?),
            "precision" => self.precision = Some(parse_precision(value)?),
            "eg_hidden" => self.eg_hidden = Some(parse(key, value)?),
            "fr_hidden" => self.fr_hidden = Some(parse(key, value)?),
            "latent_dim" => self.latent_dim = Some(parse(key, value)?),
            "classifier_epochs" => self.classifier_epochs = Some(parse(key, value)?),
            "classifier_batch" => self.classifier_batch = Some(parse(key, value)?),
            "samc_on_synthetic" => self.samc_on_synthetic = Some(parse(key, value)?),
            "fr_enabled" => self.fr_enabled = Some(parse(key, value)?),
            "feature_variant" => self.feature_variant = Some(parse_feature_variant(value)?),
            "slope" => self.slope = Some(parse(key, value)?),
            other => return Err(ConfigError(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Merge: fields set in `flags` replace fields set here.
    pub fn merged_with(mut self, flags: &Overrides) -> Self {
        macro_rules! take {
            ($($f:ident),* $(,)?) => {
                $( if flags.$f.is_some() { self.$f = flags.$f.clone(); } )*
            };
        }
        take!(
            seed,
            iterations,
            batch_size,
            n_critic,
            lr,
            lr_classifier,
            beta1,
            beta2,
            adam_eps,
            lambda_gp,
            lambda_samc,
            lambda_ra,
            gamma,
            delta,
            n_syn,
            h_choice,
            precision,
            eg_hidden,
            fr_hidden,
            latent_dim,
            classifier_epochs,
            classifier_batch,
            samc_on_synthetic,
            fr_enabled,
            feature_variant,
            slope,
        );
        self
    }

    /// Resolve onto the built-in defaults, filling dataset-aware defaults
    /// (`gamma`, `lambda_ra`, `n_syn`) from the bundle name when not set
    /// explicitly.
    pub fn resolve(&self, dataset_name: &str) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        let profile = dataset_profile(dataset_name).map(|(name, ..)| name);
        // coarse-grained animal benchmarks favor inter-class push
        cfg.weights.gamma = match profile {
            Some("AWA1") | Some("AWA2") => 0.1,
            _ => 0.8,
        };
        cfg.weights.lambda_ra = match profile {
            Some("SUN") => 0.1,
            _ => 0.001,
        };
        if let Some((_, _, _, _, n_syn)) = dataset_profile(dataset_name) {
            cfg.n_syn = n_syn;
        }

        macro_rules! apply {
            ($($f:ident),* $(,)?) => {
                $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )*
            };
        }
        apply!(
            seed,
            iterations,
            batch_size,
            n_critic,
            lr,
            lr_classifier,
            beta1,
            beta2,
            adam_eps,
            n_syn,
            h_choice,
            precision,
            eg_hidden,
            fr_hidden,
            classifier_epochs,
            classifier_batch,
            samc_on_synthetic,
            fr_enabled,
            feature_variant,
            slope,
        );
        if let Some(v) = self.latent_dim {
            cfg.latent_dim = Some(v);
        }
        if let Some(v) = self.lambda_gp {
            cfg.weights.lambda_gp = v;
        }
        if let Some(v) = self.lambda_samc {
            cfg.weights.lambda_samc = v;
        }
        if let Some(v) = self.lambda_ra {
            cfg.weights.lambda_ra = v;
        }
        if let Some(v) = self.gamma {
            cfg.weights.gamma = v;
        }
        if let Some(v) = self.delta {
            cfg.weights.delta = v;
        }
        cfg
    }
}

pub fn parse_h_choice(value: &str) -> Result<HChoice, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "h1" => Ok(HChoice::H1),
        "mu" => Ok(HChoice::Mu),
        other => Err(ConfigError(format!(
            "h_choice must be h1 or mu, got '{other}'"
        ))),
    }
}

pub fn parse_precision(value: &str) -> Result<Precision, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => Err(ConfigError(format!(
            "precision must be f32 or f64, got '{other}'"
        ))),
    }
}

pub fn parse_feature_variant(value: &str) -> Result<FeatureVariant, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "x" => Ok(FeatureVariant::X),
        "xh" => Ok(FeatureVariant::Xh),
        "xha" => Ok(FeatureVariant::Xha),
        other => Err(ConfigError(format!(
            "feature_variant must be x, xh or xha, got '{other}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nseed=9\nlr=0.01 # trailing\ngamma=0.3\n").unwrap();
        let file = Overrides::from_file(&path).unwrap();
        let flags = Overrides {
            lr: Some(0.5),
            ..Overrides::default()
        };
        let cfg = file.merged_with(&flags).resolve("synthetic");
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.weights.gamma, 0.3);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "bogus=1\n").unwrap();
        assert!(Overrides::from_file(&path).is_err());
    }

    #[test]
    fn dataset_defaults_fill_unset_fields() {
        let o = Overrides::default();
        let sun = o.resolve("SUN-like");
        assert_eq!(sun.weights.lambda_ra, 0.1);
        assert_eq!(sun.weights.gamma, 0.8);
        assert_eq!(sun.n_syn, 300);
        let awa = o.resolve("AWA2");
        assert_eq!(awa.weights.gamma, 0.1);
        assert_eq!(awa.weights.lambda_ra, 0.001);
        assert_eq!(awa.n_syn, 4600);
        let cub = o.resolve("CUB");
        assert_eq!(cub.n_syn, 700);
        let other = o.resolve("synthetic");
        assert_eq!(other.weights.gamma, 0.8);
        assert_eq!(other.n_syn, 300);

        // explicit values beat the dataset defaults
        let o = Overrides {
            gamma: Some(0.55),
            n_syn: Some(17),
            ..Overrides::default()
        };
        let awa = o.resolve("AWA1");
        assert_eq!(awa.weights.gamma, 0.55);
        assert_eq!(awa.n_syn, 17);
    }
}
