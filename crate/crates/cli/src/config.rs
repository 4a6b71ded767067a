//! Experiment configuration: one TOML file of dotted keys layered over the
//! built-in defaults.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sevstep::attack::SimConfig;
use sevstep::classifier::{TrainConfig, CANDIDATE_MASS};
use sevstep::keyrec::SearchConfig;
use sevstep::latency::LatencyModel;
use sevstep::pipeline::PipelineConfig;
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Calibrate,
    StepBench,
    PfTrace,
    AttackAes,
    TrainClassifier,
    Nemesis,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Calibrate => "calibrate",
            Scenario::StepBench => "step-bench",
            Scenario::PfTrace => "pf-trace",
            Scenario::AttackAes => "attack-aes",
            Scenario::TrainClassifier => "train-classifier",
            Scenario::Nemesis => "nemesis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateConfig {
    pub slide: usize,
    pub step_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBenchConfig {
    pub slide: usize,
    pub max_timer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfTraceConfig {
    pub sectors: usize,
    pub control_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub sectors: usize,
    pub known: usize,
    pub sector_size: usize,
    /// Existing fixture JSON; empty generates one from the seed.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub profile_ops: usize,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub rows: Vec<u8>,
    pub denoise_window: usize,
    pub candidate_mass: f64,
    pub search: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NemesisConfig {
    pub slide: usize,
    pub reps: usize,
    /// Classification trials of the add/rdrand experiment.
    pub trials: usize,
    pub trial_slide: usize,
    pub model: LatencyModel,
    pub div_quotient_bits: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads of the key search; 0 uses every core.
    pub threads: usize,
    pub sim: SimConfig,
    pub calibrate: CalibrateConfig,
    pub step_bench: StepBenchConfig,
    pub pf_trace: PfTraceConfig,
    pub fixture: FixtureConfig,
    pub attack: AttackConfig,
    pub nemesis: NemesisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        ExperimentConfig {
            scenario: Scenario::Calibrate,
            seed: 1,
            out: PathBuf::from("out"),
            threads: 0,
            sim: SimConfig::default(),
            calibrate: CalibrateConfig {
                slide: 4000,
                step_budget: 20_000,
            },
            step_bench: StepBenchConfig {
                slide: 4000,
                max_timer: 12,
            },
            pf_trace: PfTraceConfig {
                sectors: 1,
                control_length: 5000,
            },
            fixture: FixtureConfig {
                sectors: 70,
                known: 34,
                sector_size: 512,
                path: String::new(),
            },
            attack: AttackConfig {
                profile_ops: p.profile_ops,
                test_fraction: p.test_fraction,
                train: TrainConfig::default(),
                rows: p.rows,
                denoise_window: p.denoise_window,
                candidate_mass: CANDIDATE_MASS,
                search: SearchConfig::default(),
            },
            nemesis: NemesisConfig {
                slide: 1000,
                reps: 100,
                trials: 100,
                trial_slide: 50,
                model: LatencyModel::default(),
                div_quotient_bits: vec![0, 18, 45, 64],
            },
        }
    }
}

impl ExperimentConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        let a = &self.attack;
        PipelineConfig {
            sim: self.sim,
            profile_ops: a.profile_ops,
            test_fraction: a.test_fraction,
            train: TrainConfig {
                seed: self.seed,
                ..a.train
            },
            rows: a.rows.clone(),
            denoise_window: a.denoise_window,
            candidate_mass: a.candidate_mass,
            search: a.search,
            seed: self.seed,
        }
    }

    /// Defaults overlaid with `text`; keys the defaults lack are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: Table = text.parse().context("config is not valid TOML")?;
        let mut base = Table::try_from(ExperimentConfig::default()).context("serializing defaults")?;
        overlay(&mut base, user, "")?;
        Value::Table(base).try_into().context("config values have the wrong type")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every setting as a `dotted.key = value` line.
    pub fn reference(&self) -> Result<String> {
        let table = Table::try_from(self).context("serializing config")?;
        let mut lines = Vec::new();
        flatten(&table, "", &mut lines);
        Ok(lines.join("\n") + "\n")
    }
}

fn overlay(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    let open = is_keyed_by_class(base);
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(u)) => overlay(b, u, &path)?,
            (Some(slot), v) => *slot = v,
            (None, v) if open => {
                base.insert(key, v);
            }
            (None, _) => bail!("unknown config key `{path}`"),
        }
    }
    Ok(())
}

/// Per-class latency tables accept classes the defaults leave out.
fn is_keyed_by_class(t: &Table) -> bool {
    !t.is_empty() && t.keys().all(|k| k.parse::<sevstep::guest::OpcodeClass>().is_ok())
}

fn flatten(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in table {
        let key = if key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            key.clone()
        } else {
            format!("{key:?}")
        };
        let path = if prefix.is_empty() { key } else { format!("{prefix}.{key}") };
        match value {
            Value::Table(t) => flatten(t, &path, out),
            v => out.push(format!("{path} = {v}")),
        }
    }
}
