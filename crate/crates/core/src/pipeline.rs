//! End-to-end attack: profile, train, trace the victim, classify, recover.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{profile_operations, trace_xts_decryptions, AttackError, AttackTraces, SimConfig, StepStats, TracedOp};
use crate::classifier::{ClassifierError, ClassifierSet, Prediction, TableReport, TrainConfig, CANDIDATE_MASS};
use crate::crypto::aes::Direction;
use crate::fixture::DiskFixture;
use crate::keyrec::{recover_xts_keys, KeyRecError, Measurement, RecoveredKeys, SearchConfig, SectorObservation};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    KeyRec(#[from] KeyRecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    /// Encrypt calls traced for classifier training and testing.
    pub profile_ops: usize,
    pub test_fraction: f64,
    pub train: TrainConfig,
    /// Table rows that get a model; the rest use the rule denoiser.
    pub rows: Vec<u8>,
    pub denoise_window: usize,
    pub candidate_mass: f64,
    pub search: SearchConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sim: SimConfig::default(),
            profile_ops: 2000,
            test_fraction: 0.15,
            train: TrainConfig::default(),
            rows: (0..5).collect(),
            denoise_window: 4,
            candidate_mass: CANDIDATE_MASS,
            search: SearchConfig::default(),
            seed: 0,
        }
    }
}

/// Profiles the encrypt direction and trains the per-row models.
pub fn train_classifiers(cfg: &PipelineConfig) -> Result<(ClassifierSet, Vec<TableReport>), PipelineError> {
    let ops = profile_operations(&cfg.sim, Direction::Encrypt, cfg.profile_ops, cfg.seed ^ 0x9f0f)?;
    let split = ((ops.len() as f64) * (1.0 - cfg.test_fraction)).round() as usize;
    let (train, test) = ops.split_at(split.min(ops.len()));
    Ok(ClassifierSet::train(train, test, &cfg.rows, &cfg.train)?)
}

/// Measurements of one traced call; lost and outlier lookups are skipped.
pub fn measurements_of(op: &TracedOp, predictions: &[Option<Prediction>], mass: f64) -> Vec<Measurement> {
    op.accesses
        .iter()
        .zip(predictions)
        .filter_map(|(a, p)| {
            p.as_ref().map(|p| Measurement {
                round: a.round,
                table: a.table,
                position: a.position,
                candidates: p.candidates(mass),
            })
        })
        .collect()
}

pub fn observe(traces: &AttackTraces, set: &ClassifierSet, cfg: &PipelineConfig) -> Result<Vec<SectorObservation>, PipelineError> {
    traces
        .ops
        .iter()
        .map(|op| {
            let preds = set.classify(op, cfg.denoise_window)?;
            Ok(SectorObservation {
                direction: op.direction,
                slot: op.slot,
                block: op.block,
                measurements: measurements_of(op, &preds, cfg.candidate_mass),
            })
        })
        .collect()
}

/// Share of measurements whose candidates contain the true line, and the
/// mean candidate count.
pub fn candidate_quality(traces: &AttackTraces, observations: &[SectorObservation]) -> (f64, f64) {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut size = 0usize;
    for (op, o) in traces.ops.iter().zip(observations) {
        for m in &o.measurements {
            let truth = op
                .accesses
                .iter()
                .find(|a| a.round == m.round && a.table == m.table && a.position == m.position)
                .and_then(|a| a.truth);
            if let Some(t) = truth {
                total += 1;
                size += m.candidates.len();
                if m.candidates.iter().any(|c| c.0 == t) {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        return (0.0, 0.0);
    }
    (hits as f64 / total as f64, size as f64 / total as f64)
}

#[derive(Debug)]
pub struct AttackReport {
    pub tables: Vec<TableReport>,
    pub step_stats: StepStats,
    pub observations: Vec<SectorObservation>,
    /// Fraction of measurements containing the true line.
    pub candidate_recall: f64,
    pub mean_candidates: f64,
    pub keys: Result<RecoveredKeys, KeyRecError>,
    pub train_time: Duration,
    pub trace_time: Duration,
    pub search_time: Duration,
}

/// Runs the whole attack against `fixture`. Key-search failures are part of
/// the report rather than an error.
pub fn attack_fixture(fixture: &DiskFixture, cfg: &PipelineConfig) -> Result<AttackReport, PipelineError> {
    let t = Instant::now();
    let (set, tables) = train_classifiers(cfg)?;
    let train_time = t.elapsed();
    let t = Instant::now();
    let traces = trace_xts_decryptions(fixture, &cfg.sim, cfg.seed)?;
    let observations = observe(&traces, &set, cfg)?;
    let trace_time = t.elapsed();
    let (candidate_recall, mean_candidates) = candidate_quality(&traces, &observations);
    let t = Instant::now();
    let keys = recover_xts_keys(&observations, fixture, &cfg.search);
    Ok(AttackReport {
        tables,
        step_stats: traces.stats,
        observations,
        candidate_recall,
        mean_candidates,
        keys,
        train_time,
        trace_time,
        search_time: t.elapsed(),
    })
}
