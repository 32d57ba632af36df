//! Experiment configuration: a sectioned TOML file, optional environment
//! overrides, defaults for everything except `seed`, and validation.
//!
//! ```toml
//! seed = 7
//! workers = 4
//!
//! [federation]
//! users = 20
//! selected = 16
//!
//! [defense]
//! kind = "vert"
//! successive = "krum"
//!
//! [vert]
//! kappa = 4
//! ```
//!
//! Environment variables named `VERTFL_<SECTION>__<KEY>` (or `VERTFL_<KEY>`
//! for top-level keys) override file values. Values are read as TOML
//! literals, falling back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::baselines::{AggregatorKind, RuleParams};
use crate::error::{Error, Result};
use crate::vert::VertConfig;

pub const ENV_PREFIX: &str = "VERTFL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Threads for per-user work. Never changes results.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub vert: VertConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Total users `K`.
    pub users: usize,
    /// Users drawn per round `|C_t|`.
    pub selected: usize,
    pub rounds: usize,
    /// Leading rounds aggregated with plain FedAvg before VERT starts.
    pub warmup: usize,
    /// Global learning rate `η`.
    pub eta: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            users: 100,
            selected: 80,
            rounds: 200,
            warmup: 2,
            eta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Fraction of users that are compromised.
    pub pr: f64,
    /// Chance that a selected compromised user attacks in a given round.
    pub probability: f64,
    pub start_round: usize,
    /// ALIE deviation multiplier.
    pub z_max: f64,
    /// Min-Max uses every selected user's honest gradient as reference.
    pub omniscient: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Gn,
            pr: 0.8,
            probability: 0.9,
            start_round: 3,
            z_max: 1.0,
            omniscient: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Fedavg,
    Krum,
    MultiKrum,
    Median,
    TrimmedMean,
    Vert,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::Fedavg,
        DefenseKind::Krum,
        DefenseKind::MultiKrum,
        DefenseKind::Median,
        DefenseKind::TrimmedMean,
        DefenseKind::Vert,
    ];

    /// The horizontal rule, or `None` for VERT.
    pub fn aggregator(self) -> Option<AggregatorKind> {
        match self {
            DefenseKind::Fedavg => Some(AggregatorKind::Fedavg),
            DefenseKind::Krum => Some(AggregatorKind::Krum),
            DefenseKind::MultiKrum => Some(AggregatorKind::MultiKrum),
            DefenseKind::Median => Some(AggregatorKind::Median),
            DefenseKind::TrimmedMean => Some(AggregatorKind::TrimmedMean),
            DefenseKind::Vert => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Rule applied to the VERT-selected set.
    pub successive: AggregatorKind,
    /// Krum's assumed attacker count. Unset: the true compromised count for
    /// a standalone rule, `⌊(n − 1)/2⌋` after VERT.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub krum_f: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_krum_m: Option<usize>,
    pub trim_fraction: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::Vert,
            successive: AggregatorKind::Fedavg,
            krum_f: None,
            multi_krum_m: None,
            trim_fraction: 0.2,
        }
    }
}

impl DefenseConfig {
    pub fn rule_params(&self) -> RuleParams {
        RuleParams {
            f: self.krum_f,
            m_sel: self.multi_krum_m,
            trim_fraction: self.trim_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    /// Feature count (synthetic only; IDX uses the image size).
    pub dims: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Dirichlet concentration; small values give skewed shards.
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 10,
            dims: 64,
            per_class: 200,
            test_per_class: 50,
            beta: 100.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Local epochs per round.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Hidden layer widths of the global model.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch: 50,
            lr: 0.001,
            hidden: vec![32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Defaults everywhere.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            workers: default_workers(),
            federation: FederationConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            vert: VertConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Layer sizes of the global model.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let input = match self.data.source {
            DataSource::Synthetic => self.data.dims,
            DataSource::Idx => 28 * 28,
        };
        let mut sizes = vec![input];
        sizes.extend(&self.train.hidden);
        sizes.push(self.data.classes);
        sizes
    }

    /// Parameter count `d` of the global model.
    pub fn model_dim(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Number of compromised users, `round(pr · K)`.
    /// `round(pr · K)`, or 0 when no attack is configured.
    pub fn compromised_count(&self) -> usize {
        if self.attack.kind == AttackKind::None {
            return 0;
        }
        (self.attack.pr * self.federation.users as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        let bad = |field: &str, reason: String| Err(Error::config(field, reason));
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        if f.users == 0 {
            return bad("federation.users", "must be at least 1".into());
        }
        if f.selected == 0 || f.selected > f.users {
            return bad("federation.selected", format!("must be in 1..={}, got {}", f.users, f.selected));
        }
        if f.rounds == 0 {
            return bad("federation.rounds", "must be at least 1".into());
        }
        if f.warmup >= f.rounds {
            return bad("federation.warmup", format!("must be below rounds ({}), got {}", f.rounds, f.warmup));
        }
        if !f.eta.is_finite() {
            return bad("federation.eta", "must be finite".into());
        }
        let a = &self.attack;
        if !(0.0..=1.0).contains(&a.pr) {
            return bad("attack.pr", format!("must be in [0, 1], got {}", a.pr));
        }
        if !(0.0..=1.0).contains(&a.probability) {
            return bad("attack.probability", format!("must be in [0, 1], got {}", a.probability));
        }
        if !a.z_max.is_finite() {
            return bad("attack.z_max", "must be finite".into());
        }
        let d = &self.defense;
        if !(0.0..0.5).contains(&d.trim_fraction) {
            return bad("defense.trim_fraction", format!("must be in [0, 0.5), got {}", d.trim_fraction));
        }
        let krum_like = |k: AggregatorKind| matches!(k, AggregatorKind::Krum | AggregatorKind::MultiKrum);
        match d.kind.aggregator() {
            Some(k) if krum_like(k) && f.selected < 3 => {
                return bad("defense.kind", format!("{} needs at least 3 selected users", k.name()));
            }
            None => self.validate_vert()?,
            _ => {}
        }
        let t = &self.train;
        if t.epochs == 0 {
            return bad("train.epochs", "must be at least 1".into());
        }
        if t.batch == 0 {
            return bad("train.batch", "must be at least 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("train.lr", format!("must be positive, got {}", t.lr));
        }
        if t.hidden.contains(&0) {
            return bad("train.hidden", "layer widths must be positive".into());
        }
        let data = &self.data;
        if data.classes < 2 {
            return bad("data.classes", "must be at least 2".into());
        }
        if !(data.beta > 0.0 && data.beta.is_finite()) {
            return bad("data.beta", format!("must be positive, got {}", data.beta));
        }
        match data.source {
            DataSource::Synthetic => {
                if data.dims < 2 {
                    return bad("data.dims", "must be at least 2".into());
                }
                if data.per_class == 0 || data.test_per_class == 0 {
                    return bad("data.per_class", "per-class counts must be positive".into());
                }
                if data.classes * data.per_class < f.users {
                    return bad("data.per_class", format!("{} samples cannot cover {} users", data.classes * data.per_class, f.users));
                }
            }
            DataSource::Idx => {
                for (name, p) in [
                    ("data.train_images", &data.train_images),
                    ("data.train_labels", &data.train_labels),
                    ("data.test_images", &data.test_images),
                    ("data.test_labels", &data.test_labels),
                ] {
                    if p.is_none() {
                        return bad(name, "required when source = \"idx\"".into());
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_vert(&self) -> Result<()> {
        let v = &self.vert;
        let bad = |field: &str, reason: String| Err(Error::config(field, reason));
        if v.m < 2 {
            return bad("vert.m", format!("must be at least 2, got {}", v.m));
        }
        if v.epochs == 0 {
            return bad("vert.epochs", "must be at least 1".into());
        }
        if v.kappa == 0 || v.kappa > self.federation.selected {
            return bad(
                "vert.kappa",
                format!("must be in 1..={} (federation.selected), got {}", self.federation.selected, v.kappa),
            );
        }
        let d = self.model_dim();
        if v.s == 0 || v.s * 4 > d {
            return bad("vert.s", format!("must be in 1..={} (d/4 with d = {d}), got {}", d / 4, v.s));
        }
        if !(v.lr > 0.0 && v.lr.is_finite()) {
            return bad("vert.lr", format!("must be positive, got {}", v.lr));
        }
        for (name, act) in [
            ("vert.output_activation", v.output_activation),
            ("vert.projector_activation", v.projector_activation),
        ] {
            if act == crate::tensor::Activation::Relu {
                return bad(name, "must be none or softmax".into());
            }
        }
        let s = self.defense.successive;
        if matches!(s, AggregatorKind::Krum | AggregatorKind::MultiKrum) && v.kappa < 3 {
            return bad("defense.successive", format!("{} after VERT needs kappa >= 3", s.name()));
        }
        Ok(())
    }

    /// Sets one field from its textual value, e.g. `("vert.kappa", "4")`.
    /// See [`resolve_axis`] for accepted field names.
    pub fn set_field(&self, field: &str, value: &str) -> Result<Self> {
        let path = resolve_axis(field)?;
        let mut table = self.to_table()?;
        set_path(&mut table, &path, parse_value(value))?;
        let cfg = from_table(table, Path::new(field))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))
    }
}

const SECTIONS: [&str; 7] = ["federation", "attack", "defense", "vert", "data", "train", "output"];
const TOP_LEVEL: [&str; 2] = ["seed", "workers"];

/// Maps a field name to a path: `section.key`, a bare section (meaning
/// `section.kind`), a top-level key, or a key name that occurs in exactly
/// one section.
pub fn resolve_axis(field: &str) -> Result<Vec<String>> {
    let unknown = || Error::config(field, "not a config field");
    if let Some((section, key)) = field.split_once('.') {
        let defaults = ExperimentConfig::with_seed(0).to_table()?;
        let known = matches!(defaults.get(section), Some(toml::Value::Table(t)) if t.contains_key(key))
            || (SECTIONS.contains(&section) && is_optional_key(section, key));
        return if known { Ok(vec![section.into(), key.into()]) } else { Err(unknown()) };
    }
    if TOP_LEVEL.contains(&field) {
        return Ok(vec![field.into()]);
    }
    if matches!(field, "attack" | "defense") {
        return Ok(vec![field.into(), "kind".into()]);
    }
    let defaults = ExperimentConfig::with_seed(0).to_table()?;
    let hits: Vec<&str> = SECTIONS
        .iter()
        .copied()
        .filter(|s| {
            matches!(defaults.get(*s), Some(toml::Value::Table(t)) if t.contains_key(field)) || is_optional_key(s, field)
        })
        .collect();
    match hits.as_slice() {
        [one] => Ok(vec![(*one).into(), field.into()]),
        [] => Err(unknown()),
        many => Err(Error::config(field, format!("ambiguous; qualify it as one of {}", many.join(", ")))),
    }
}

fn is_optional_key(section: &str, key: &str) -> bool {
    matches!(
        (section, key),
        ("defense", "krum_f" | "multi_krum_m")
            | ("data", "train_images" | "train_labels" | "test_images" | "test_labels")
    )
}

/// A TOML literal if `raw` parses as one, otherwise the string itself.
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    match path {
        [key] => {
            table.insert(key.clone(), value);
            Ok(())
        }
        [section, rest @ ..] => {
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => set_path(t, rest, value),
                _ => Err(Error::config(section.clone(), "is not a section")),
            }
        }
        [] => Err(Error::InvalidArgument("empty field path".into())),
    }
}

fn from_table(table: toml::Table, origin: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })
}

/// Applies `VERTFL_*` variables from `vars` onto a parsed table.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.to_lowercase().split("__").map(str::to_string).collect();
        if path.iter().any(String::is_empty) || path.len() > 2 {
            return Err(Error::config(name.clone(), "expected VERTFL_<SECTION>__<KEY> or VERTFL_<KEY>"));
        }
        set_path(table, &path, parse_value(&raw))?;
    }
    Ok(())
}

/// Parses `text` (attributed to `origin` in errors), applies overrides from
/// `vars`, fills defaults and validates.
pub fn parse_config<I>(text: &str, origin: &Path, vars: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    apply_env_overrides(&mut table, vars)?;
    let cfg = from_table(table, origin)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a config file, honouring `VERTFL_*` environment
/// overrides.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, path, std::env::vars())
}
