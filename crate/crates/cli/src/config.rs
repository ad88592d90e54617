//! Flat `key = value` configuration with dotted section keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use harforge_core::align::{AlignConfig, ProfileScope};
use harforge_core::dataset::{DatasetConfig, SplitMode, SplitSpec};
use harforge_core::impute::ImputeConfig;
use harforge_core::model::{LossConfig, ModelConfig, Pooling, TrainConfig};
use harforge_core::synth::CohortConfig;
use harforge_core::taxonomy::Taxonomy;
use harforge_core::viz::BandMode;
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::Stage;

pub const CONFIG_ENV: &str = "HARFORGE_CONFIG";

/// Every recognised key with its default. Empty means "unset".
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("taxonomy", ""),
    ("tz_offset_minutes", "120"),
    ("input.hr", ""),
    ("input.activity", ""),
    ("input.sleep", ""),
    ("input.schedule", ""),
    ("input.truth", ""),
    ("synth.preset", "default"),
    ("synth.users", "20"),
    ("synth.days", "30"),
    ("synth.start_date", "2024-01-01"),
    ("synth.sleep_dropout", "0.40"),
    ("synth.hr_dropout", "0.02"),
    ("synth.fitness_sd", ""),
    ("synth.intensity_sd", ""),
    ("align.profile_scope", "day"),
    ("impute.night_start_minute", "1260"),
    ("impute.night_end_minute", "419"),
    ("impute.night_sleep_factor", "1.05"),
    ("impute.day_sleep_factor", "1.2"),
    ("impute.awake_factor", "1.2"),
    ("impute.max_gap_minutes", "120"),
    ("dataset.widths", "15,30,45,60"),
    ("dataset.label_threshold", "0.7"),
    ("dataset.stratify", "true"),
    ("dataset.oversample", "true"),
    ("dataset.oversample_sd", "0.0003"),
    ("dataset.oversample_target", ""),
    ("split.mode", "temporal"),
    ("split.train", "0.70"),
    ("split.val", "0.15"),
    ("split.test", "0.15"),
    ("model.hidden", "256"),
    ("model.layers", "2"),
    ("model.dropout", "0.1"),
    ("model.pooling", "final"),
    ("loss.lambda_l1", "0.3"),
    ("loss.lambda_l2", "1.0"),
    ("loss.alpha", "2.0"),
    ("loss.gamma", "2.0"),
    ("train.batch_size", "256"),
    ("train.learning_rate", "0.001"),
    ("train.weight_decay", "0.01"),
    ("train.max_epochs", "100"),
    ("train.early_stopping_patience", "10"),
    ("train.scheduler_factor", "0.5"),
    ("train.scheduler_patience", "3"),
    ("train.min_lr", "0.000001"),
    ("viz.band", "sd"),
];

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub widths: Vec<usize>,
    pub split: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
    /// Directory that relative input paths resolve against.
    base: PathBuf,
    taxonomy: Taxonomy,
}

/// Parses the file text. Blank lines and `#` comments are skipped.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected `key = value`", i + 1)));
        };
        let key = key.trim();
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", i + 1)));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

impl PipelineConfig {
    /// Defaults, then the file (explicit path, else `HARFORGE_CONFIG`), then flags.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let path = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        let (file_values, base) = match &path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| CliError::MissingInput(p.clone()))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (parse_text(&text)?, base)
            }
            None => (BTreeMap::new(), PathBuf::new()),
        };
        Self::from_values(file_values, base, overrides)
    }

    pub fn from_values(
        file_values: BTreeMap<String, String>,
        base: PathBuf,
        overrides: &Overrides,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        values.extend(file_values);
        if let Some(seed) = overrides.seed {
            values.insert("seed".into(), seed.to_string());
        }
        if !overrides.widths.is_empty() {
            let list: Vec<String> = overrides.widths.iter().map(|w| w.to_string()).collect();
            values.insert("dataset.widths".into(), list.join(","));
        }
        if let Some(split) = &overrides.split {
            values.insert("split.mode".into(), split.clone());
        }
        let mut config = PipelineConfig {
            values,
            base,
            taxonomy: Taxonomy::default(),
        };
        if let Some(path) = config.path("taxonomy") {
            let file = std::fs::File::open(&path).map_err(|_| CliError::MissingInput(path.clone()))?;
            config.taxonomy = Taxonomy::from_reader(file)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.cohort()?.validate(&self.taxonomy)?;
        self.impute()?.validate()?;
        self.split()?.validate()?;
        self.model()?.validate()?;
        self.loss()?.validate()?;
        self.train()?.validate()?;
        self.widths()?;
        self.align()?;
        self.band()?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| CliError::Validation(format!("config `{key}`: cannot parse `{raw}`")))
    }

    fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    /// A path-valued key, resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.get(key);
        (!raw.is_empty()).then(|| self.base.join(raw))
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn cohort(&self) -> Result<CohortConfig, CliError> {
        let mut c = match self.get("synth.preset") {
            "default" => CohortConfig::default(),
            "separable" => CohortConfig::separable(),
            other => return Err(CliError::Validation(format!("unknown synth preset `{other}`"))),
        };
        c.seed = self.seed()?;
        c.n_users = self.parse("synth.users")?;
        c.n_days = self.parse("synth.days")?;
        c.start_date = self.parse::<NaiveDate>("synth.start_date")?;
        c.tz_offset_minutes = self.parse("tz_offset_minutes")?;
        c.sleep_dropout = self.parse("synth.sleep_dropout")?;
        c.hr_dropout = self.parse("synth.hr_dropout")?;
        if let Some(v) = self.parse_opt("synth.fitness_sd")? {
            c.user_fitness_sd = v;
        }
        if let Some(v) = self.parse_opt("synth.intensity_sd")? {
            c.user_intensity_sd = v;
        }
        Ok(c)
    }

    pub fn align(&self) -> Result<AlignConfig, CliError> {
        let profile_scope = match self.get("align.profile_scope") {
            "day" => ProfileScope::Day,
            "global" => ProfileScope::Global,
            other => return Err(CliError::Validation(format!("unknown profile scope `{other}`"))),
        };
        Ok(AlignConfig {
            tz_offset_minutes: self.parse("tz_offset_minutes")?,
            profile_scope,
        })
    }

    pub fn impute(&self) -> Result<ImputeConfig, CliError> {
        Ok(ImputeConfig {
            night_start_minute: self.parse("impute.night_start_minute")?,
            night_end_minute: self.parse("impute.night_end_minute")?,
            night_sleep_factor: self.parse("impute.night_sleep_factor")?,
            day_sleep_factor: self.parse("impute.day_sleep_factor")?,
            awake_factor: self.parse("impute.awake_factor")?,
            max_gap_minutes: self.parse("impute.max_gap_minutes")?,
        })
    }

    pub fn widths(&self) -> Result<Vec<usize>, CliError> {
        let mut widths = Vec::new();
        for part in self.get("dataset.widths").split(',') {
            let w: usize = part.trim().parse().map_err(|_| {
                CliError::Validation(format!("config `dataset.widths`: cannot parse `{part}`"))
            })?;
            harforge_core::dataset::check_width(w)?;
            if !widths.contains(&w) {
                widths.push(w);
            }
        }
        Ok(widths)
    }

    pub fn dataset(&self) -> Result<DatasetConfig, CliError> {
        Ok(DatasetConfig {
            label_threshold: self.parse("dataset.label_threshold")?,
            stratify: self.parse("dataset.stratify")?,
            oversample: self.parse("dataset.oversample")?,
            oversample_sd: self.parse("dataset.oversample_sd")?,
            oversample_target: self.parse_opt("dataset.oversample_target")?,
        })
    }

    pub fn split(&self) -> Result<SplitSpec, CliError> {
        Ok(SplitSpec {
            mode: self.get("split.mode").parse::<SplitMode>()?,
            train: self.parse("split.train")?,
            val: self.parse("split.val")?,
            test: self.parse("split.test")?,
            seed: self.seed()?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let mut m = ModelConfig::new(self.taxonomy.len());
        m.hidden = self.parse("model.hidden")?;
        m.layers = self.parse("model.layers")?;
        m.dropout = self.parse("model.dropout")?;
        m.pooling = self.get("model.pooling").parse::<Pooling>()?;
        Ok(m)
    }

    pub fn loss(&self) -> Result<LossConfig, CliError> {
        Ok(LossConfig {
            lambda_l1: self.parse("loss.lambda_l1")?,
            lambda_l2: self.parse("loss.lambda_l2")?,
            alpha: self.parse("loss.alpha")?,
            gamma: self.parse("loss.gamma")?,
            ..LossConfig::default()
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let mut t = TrainConfig::default();
        t.batch_size = self.parse("train.batch_size")?;
        t.learning_rate = self.parse("train.learning_rate")?;
        t.adamw.weight_decay = self.parse("train.weight_decay")?;
        t.max_epochs = self.parse("train.max_epochs")?;
        t.early_stopping_patience = self.parse("train.early_stopping_patience")?;
        t.scheduler.factor = self.parse("train.scheduler_factor")?;
        t.scheduler.patience = self.parse("train.scheduler_patience")?;
        t.scheduler.min_lr = self.parse("train.min_lr")?;
        t.seed = self.seed()?;
        Ok(t)
    }

    pub fn band(&self) -> Result<BandMode, CliError> {
        Ok(self.get("viz.band").parse::<BandMode>()?)
    }

    /// SHA-256 over the keys a stage depends on, plus the taxonomy.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let prefixes: &[&str] = match stage {
            Stage::Synth => &["seed", "tz_offset_minutes", "synth."],
            Stage::Ingest => &["input."],
            Stage::Align => &["tz_offset_minutes", "align."],
            Stage::Impute => &["impute.", "input.truth"],
            Stage::Dataset => &["seed", "dataset.", "split."],
            Stage::Train => &["seed", "dataset.widths", "model.", "loss.", "train."],
            Stage::Eval => &["dataset.widths"],
            Stage::Viz => &["viz."],
            Stage::Pipeline => &[""],
        };
        let mut h = Sha256::new();
        h.update(stage.as_str().as_bytes());
        h.update(b"\n");
        for (k, v) in &self.values {
            if prefixes.iter().any(|p| k == p || (p.ends_with('.') || p.is_empty()) && k.starts_with(p)) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.update(self.taxonomy.hash().as_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str, overrides: &Overrides) -> Result<PipelineConfig, CliError> {
        PipelineConfig::from_values(parse_text(text)?, PathBuf::new(), overrides)
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let v = parse_text("# c\n\nseed = 4\n  model.hidden=8  \n").unwrap();
        assert_eq!(v["seed"], "4");
        assert_eq!(v["model.hidden"], "8");
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let err = parse_text("model.hiden = 8\n").unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_equals_is_a_usage_error() {
        assert!(matches!(parse_text("seed 4\n"), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_override_file_values() {
        let o = Overrides {
            seed: Some(9),
            widths: vec![30, 15],
            split: Some("user".into()),
        };
        let c = config("seed = 4\ndataset.widths = 60\nsplit.mode = temporal\n", &o).unwrap();
        assert_eq!(c.seed().unwrap(), 9);
        assert_eq!(c.widths().unwrap(), vec![30, 15]);
        assert_eq!(c.split().unwrap().mode, SplitMode::User);
    }

    #[test]
    fn defaults_build_valid_module_configs() {
        let c = config("", &Overrides::default()).unwrap();
        assert_eq!(c.widths().unwrap(), vec![15, 30, 45, 60]);
        assert_eq!(c.impute().unwrap(), ImputeConfig::default());
        assert_eq!(c.loss().unwrap(), LossConfig::default());
        assert_eq!(c.model().unwrap(), ModelConfig::new(c.taxonomy().len()));
        assert_eq!(c.cohort().unwrap(), CohortConfig::default());
        assert_eq!(c.dataset().unwrap(), DatasetConfig::default());
        assert_eq!(c.train().unwrap(), TrainConfig::default());
    }

    #[test]
    fn bad_values_are_validation_errors() {
        for text in [
            "model.hidden = many\n",
            "dataset.widths = 20\n",
            "split.train = 0.9\n",
            "viz.band = wide\n",
            "impute.awake_factor = 0.5\n",
        ] {
            let err = config(text, &Overrides::default()).unwrap_err();
            assert_eq!(err.exit_code(), 3, "{text}");
        }
    }

    #[test]
    fn stage_hash_tracks_only_relevant_keys() {
        let a = config("", &Overrides::default()).unwrap();
        let b = config("train.max_epochs = 3\n", &Overrides::default()).unwrap();
        assert_eq!(a.stage_hash(Stage::Align), b.stage_hash(Stage::Align));
        assert_eq!(a.stage_hash(Stage::Dataset), b.stage_hash(Stage::Dataset));
        assert_ne!(a.stage_hash(Stage::Train), b.stage_hash(Stage::Train));
        assert_ne!(a.stage_hash(Stage::Align), a.stage_hash(Stage::Impute));
    }
}
