//! Flat `key = value` run configuration.
//!
//! Keys are grouped by prefix (`synth.`, `arch.`, `train.`, `transfer.`,
//! `paths.`). Every key has a documented default except the three seeds, which
//! must be given explicitly (in the file or through `--seed`).

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use hydrodeep::model::{ArchSpec, Variant};
use hydrodeep::synth::{
    default_start, ClimateParams, RoutingParams, SoilParams, SynthSpec, TargetDecl, DEFAULT_TARGETS,
};
use hydrodeep::train::TrainConfig;
use hydrodeep::transfer::{TransferMode, DEFAULT_FINETUNE_ITERATIONS};

/// Keys that have no default.
pub const SEED_KEYS: [&str; 3] = ["synth.seed", "arch.seed", "train.seed"];

pub struct KeyDoc {
    pub key: &'static str,
    /// `None` marks a required key.
    pub default: Option<String>,
    pub doc: &'static str,
}

/// The documented key table, in canonical order.
pub fn key_table() -> Vec<KeyDoc> {
    let climate = ClimateParams::default();
    let soil = SoilParams::default();
    let routing = RoutingParams::default();
    let arch = ArchSpec::default();
    let train = TrainConfig::default();
    let modes = TransferMode::ALL.map(|m| m.label()).join(",");
    let k = |key, default: Option<String>, doc| KeyDoc { key, default, doc };
    vec![
        k("synth.seed", None, "seed of the source watershed; target i uses synth.seed + 1 + i"),
        k("synth.source.name", Some("w13".into()), "source watershed name"),
        k("synth.source.grids", Some("29".into()), "source grid count"),
        k("synth.source.days", Some("6200".into()), "source record length in days"),
        k("synth.start", Some(default_start().to_string()), "first date of every generated record"),
        k("synth.climate.annual_precip_mm", Some(climate.annual_precip_mm.to_string()), "annual mean precipitation"),
        k("synth.climate.seasonal_amplitude", Some(climate.seasonal_amplitude.to_string()), "seasonal amplitude in [0, 1]"),
        k("synth.climate.seasonal_phase_days", Some(climate.seasonal_phase_days.to_string()), "seasonal phase"),
        k("synth.climate.storm_rate", Some(climate.storm_rate.to_string()), "daily storm probability"),
        k("synth.climate.storm_scale_mm", Some(climate.storm_scale_mm.to_string()), "mean storm depth"),
        k("synth.soil.capacity_mm", Some(soil.capacity_mm.to_string()), "bucket capacity"),
        k("synth.soil.threshold", Some(soil.threshold.to_string()), "quickflow threshold as a fraction of capacity"),
        k("synth.soil.quickflow", Some(soil.quickflow.to_string()), "quickflow coefficient"),
        k("synth.soil.baseflow", Some(soil.baseflow.to_string()), "baseflow coefficient"),
        k("synth.routing.delay_per_unit_days", Some(routing.delay_per_unit_days.to_string()), "routing delay per distance unit"),
        k("synth.routing.noise_fraction", Some(routing.noise_fraction.to_string()), "log-normal gauge noise"),
        k("synth.routing.unit_conversion", Some(routing.unit_conversion.to_string()), "runoff to discharge constant"),
        k("synth.targets", Some(DEFAULT_TARGETS.into()), "comma-separated name:grids:related|distant"),
        k("synth.target.days", Some("730".into()), "target record length in days"),
        k("arch.seed", None, "model initialization seed (also used for the from-scratch baseline)"),
        k("arch.variant", Some(arch.variant.name().into()), "hydrodeep | cnn_only | lstm_only"),
        k("arch.conv", Some(ArchSpec::format_conv(&arch.conv)), "conv layers as CHANNELSxKERNEL"),
        k("arch.lstm", Some(ArchSpec::format_widths(&arch.lstm)), "LSTM hidden sizes"),
        k("arch.target_branch", Some(arch.target_branch_units.to_string()), "target-day branch width"),
        k("arch.head", Some(ArchSpec::format_widths(&arch.head)), "dense head widths, ending in 1"),
        k("train.seed", None, "shuffle seed"),
        k("train.iterations", Some(train.iterations.to_string()), "pretraining epochs"),
        k("train.batch_size", Some(train.batch_size.to_string()), "mini-batch size"),
        k("train.learning_rate", Some(train.learning_rate.to_string()), "Adam step size"),
        k("train.beta1", Some(train.beta1.to_string()), "Adam first-moment decay"),
        k("train.beta2", Some(train.beta2.to_string()), "Adam second-moment decay"),
        k("train.epsilon", Some(train.epsilon.to_string()), "Adam denominator offset"),
        k("train.fraction", Some("0.7".into()), "leading share of dates used for training"),
        k("transfer.iterations", Some(DEFAULT_FINETUNE_ITERATIONS.to_string()), "finetune and baseline epochs"),
        k("transfer.modes", Some(modes), "transfer modes to run"),
        k("transfer.parallel", Some("true".into()), "run matrix cells on the thread pool"),
        k("paths.run_dir", Some("run".into()), "directory holding every output"),
    ]
}

/// The explicitly set keys of a config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

fn is_known(key: &str) -> bool {
    key_table().iter().any(|k| k.key == key)
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment line. Unknown and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if cfg.entries.contains_key(key) {
                bail!("line {}: key `{key}` given twice", i + 1);
            }
            cfg.set(key, value).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            bail!("unknown config key `{key}`");
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// The explicit entries as config text, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Replaces all three seeds.
    pub fn override_seeds(&mut self, seed: u64) {
        for key in SEED_KEYS {
            self.entries.insert(key.to_string(), seed.to_string());
        }
    }

    /// Every key with its explicit or default value, in table order. Fails on
    /// the first missing required key.
    pub fn effective_text(&self) -> Result<String> {
        let mut out = String::new();
        for k in key_table() {
            let value = match (self.get(k.key), &k.default) {
                (Some(v), _) => v.to_string(),
                (None, Some(d)) => d.clone(),
                (None, None) => bail!("missing required config key `{}`", k.key),
            };
            out.push_str(&format!("{} = {value}\n", k.key));
        }
        Ok(out)
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub source: SynthSpec,
    pub targets: Vec<TargetDecl>,
    pub target_days: usize,
    pub arch: ArchSpec,
    pub arch_seed: u64,
    /// Pretraining settings; transfer cells reuse everything but the iteration count.
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub transfer_iterations: usize,
    pub transfer_modes: Vec<TransferMode>,
    pub transfer_parallel: bool,
    pub run_dir: PathBuf,
    /// Canonical text of every key, hashed into the run manifest.
    pub effective_text: String,
}

struct Resolver<'a> {
    cfg: &'a RunConfig,
    table: Vec<KeyDoc>,
}

impl Resolver<'_> {
    fn raw(&self, key: &str) -> Result<String> {
        if let Some(v) = self.cfg.get(key) {
            return Ok(v.to_string());
        }
        let doc = self.table.iter().find(|k| k.key == key).expect("key in table");
        doc.default
            .clone()
            .ok_or_else(|| anyhow!("missing required config key `{key}`"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }
}

impl Settings {
    pub fn resolve(cfg: &RunConfig) -> Result<Self> {
        let r = Resolver { cfg, table: key_table() };
        let effective_text = cfg.effective_text()?;
        let key_err = |key: &'static str| move |e: String| anyhow!("config key `{key}`: {e}");

        let source = SynthSpec {
            name: r.raw("synth.source.name")?,
            grids: r.parse("synth.source.grids")?,
            seed: r.parse("synth.seed")?,
            days: r.parse("synth.source.days")?,
            start: r.parse::<NaiveDate>("synth.start")?,
            climate: ClimateParams {
                annual_precip_mm: r.parse("synth.climate.annual_precip_mm")?,
                seasonal_amplitude: r.parse("synth.climate.seasonal_amplitude")?,
                seasonal_phase_days: r.parse("synth.climate.seasonal_phase_days")?,
                storm_rate: r.parse("synth.climate.storm_rate")?,
                storm_scale_mm: r.parse("synth.climate.storm_scale_mm")?,
            },
            soil: SoilParams {
                capacity_mm: r.parse("synth.soil.capacity_mm")?,
                threshold: r.parse("synth.soil.threshold")?,
                quickflow: r.parse("synth.soil.quickflow")?,
                baseflow: r.parse("synth.soil.baseflow")?,
            },
            routing: RoutingParams {
                delay_per_unit_days: r.parse("synth.routing.delay_per_unit_days")?,
                noise_fraction: r.parse("synth.routing.noise_fraction")?,
                unit_conversion: r.parse("synth.routing.unit_conversion")?,
            },
        };
        source.validate().context("synth.* keys")?;
        let targets =
            TargetDecl::parse_list(&r.raw("synth.targets")?).map_err(|e| key_err("synth.targets")(e.to_string()))?;

        let arch = ArchSpec {
            variant: Variant::parse(&r.raw("arch.variant")?).map_err(|e| key_err("arch.variant")(e.to_string()))?,
            conv: ArchSpec::parse_conv(&r.raw("arch.conv")?).map_err(|e| key_err("arch.conv")(e.to_string()))?,
            lstm: ArchSpec::parse_widths(&r.raw("arch.lstm")?, "lstm").map_err(|e| key_err("arch.lstm")(e.to_string()))?,
            target_branch_units: r.parse("arch.target_branch")?,
            head: ArchSpec::parse_widths(&r.raw("arch.head")?, "head").map_err(|e| key_err("arch.head")(e.to_string()))?,
        };
        arch.validate().context("arch.* keys")?;

        let train = TrainConfig {
            iterations: r.parse("train.iterations")?,
            batch_size: r.parse("train.batch_size")?,
            learning_rate: r.parse("train.learning_rate")?,
            beta1: r.parse("train.beta1")?,
            beta2: r.parse("train.beta2")?,
            epsilon: r.parse("train.epsilon")?,
            seed: r.parse("train.seed")?,
            ..TrainConfig::default()
        };
        train.validate().context("train.* keys")?;
        let train_fraction: f64 = r.parse("train.fraction")?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            bail!("config key `train.fraction` must lie in (0, 1), got {train_fraction}");
        }

        let transfer_modes = r
            .raw("transfer.modes")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(TransferMode::parse)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| key_err("transfer.modes")(e.to_string()))?;

        Ok(Self {
            source,
            targets,
            target_days: r.parse("synth.target.days")?,
            arch,
            arch_seed: r.parse("arch.seed")?,
            train,
            train_fraction,
            transfer_iterations: r.parse("transfer.iterations")?,
            transfer_modes,
            transfer_parallel: r.parse("transfer.parallel")?,
            run_dir: PathBuf::from(r.raw("paths.run_dir")?),
            effective_text,
        })
    }

    /// Target specs derived from the source; target `i` is seeded with `synth.seed + 1 + i`.
    pub fn target_specs(&self) -> Vec<SynthSpec> {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let seed = self.source.seed.wrapping_add(1 + i as u64);
                self.source.derive(t.relation, t.name.clone(), t.grids, self.target_days, seed)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> RunConfig {
        RunConfig::parse("synth.seed = 1\narch.seed = 2\ntrain.seed = 3\n").unwrap()
    }

    #[test]
    fn defaults_resolve_to_library_defaults() {
        let s = Settings::resolve(&seeded()).unwrap();
        assert_eq!(s.arch, ArchSpec::default());
        assert_eq!(s.source, SynthSpec::new("w13", 29, 6200, 1));
        assert_eq!(s.train.iterations, 300);
        assert_eq!(s.targets.len(), 5);
        assert_eq!(s.transfer_modes, TransferMode::ALL.to_vec());
        assert_eq!((s.arch_seed, s.train.seed), (2, 3));
    }

    #[test]
    fn missing_seed_names_the_key() {
        let err = Settings::resolve(&RunConfig::parse("arch.seed = 1\ntrain.seed = 1").unwrap()).unwrap_err();
        assert!(err.to_string().contains("synth.seed"), "{err}");
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_lines() {
        assert!(RunConfig::parse("synth.foo = 1").unwrap_err().chain().any(|e| e.to_string().contains("synth.foo")));
        assert!(RunConfig::parse("synth.seed = 1\nsynth.seed = 2").is_err());
        assert!(RunConfig::parse("synth.seed 1").is_err());
        let mut bad = seeded();
        bad.set("train.batch_size", "lots").unwrap();
        let err = Settings::resolve(&bad).unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{err}");
    }

    #[test]
    fn comments_and_whitespace_are_ignored() {
        let cfg = RunConfig::parse("# run\n\n  synth.seed=4  \n").unwrap();
        assert_eq!(cfg.get("synth.seed"), Some("4"));
    }

    #[test]
    fn seed_override_replaces_all_seeds() {
        let mut cfg = seeded();
        cfg.override_seeds(9);
        let s = Settings::resolve(&cfg).unwrap();
        assert_eq!((s.source.seed, s.arch_seed, s.train.seed), (9, 9, 9));
    }

    #[test]
    fn effective_text_lists_every_key_and_reparses() {
        let cfg = seeded();
        let text = cfg.effective_text().unwrap();
        assert_eq!(text.lines().count(), key_table().len());
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(Settings::resolve(&again).unwrap(), Settings::resolve(&cfg).unwrap());
    }

    #[test]
    fn target_specs_follow_declarations() {
        let s = Settings::resolve(&seeded()).unwrap();
        let specs = s.target_specs();
        let grids: Vec<usize> = specs.iter().map(|t| t.grids).collect();
        assert_eq!(grids, [34, 39, 61, 65, 32]);
        assert!(specs.iter().all(|t| t.days == 730));
        assert_eq!(specs[0].soil, s.source.soil);
        assert_ne!(specs[2].soil, s.source.soil);
    }
}
