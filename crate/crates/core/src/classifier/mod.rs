//! Per-access classification of noisy table traces into the accessed line.

mod denoise;
mod mlp;
mod window;

pub use denoise::rule_denoise;
pub use mlp::{cross_entropy, Gradients, Mlp, TrainConfig};
pub use window::{encode_window, AccessWindow, FEATURES, RADIUS, ROWS};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{region_of, ObservedAccess, TracedOp};
use crate::cache::TRACE_SETS;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("input has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("bad model: {0}")]
    BadModel(String),
}

/// Hidden widths of the default network.
pub const HIDDEN: [usize; 2] = [182, 64];
/// Traces with more hot sets than this are treated as outliers.
pub const MAX_HOT: u32 = 8;
/// Measurements with more candidate lines are discarded.
pub const MAX_CANDIDATES: usize = 7;
/// Probability mass the candidate list has to cover.
pub const CANDIDATE_MASS: f64 = 0.95;

pub fn default_sizes() -> Vec<usize> {
    let mut s = vec![FEATURES];
    s.extend(HIDDEN);
    s.push(TRACE_SETS);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; TRACE_SETS],
    /// Sets by decreasing probability (ties by index).
    pub ranking: [u8; TRACE_SETS],
}

impl Prediction {
    pub fn from_probs(probs: [f64; TRACE_SETS]) -> Self {
        let mut ranking: [u8; TRACE_SETS] = std::array::from_fn(|i| i as u8);
        ranking.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
        Prediction { probs, ranking }
    }

    /// Uniform over the sets of `mask` (every set when empty).
    pub fn from_mask(mask: u16) -> Self {
        let mask = if mask == 0 { 0xffff } else { mask };
        let n = mask.count_ones() as f64;
        Self::from_probs(std::array::from_fn(|i| if mask >> i & 1 == 1 { 1.0 / n } else { 0.0 }))
    }

    pub fn top(&self) -> u8 {
        self.ranking[0]
    }

    /// Leading sets of the ranking until their probability reaches `mass`.
    pub fn candidates(&self, mass: f64) -> Vec<(u8, f64)> {
        let mut out = Vec::new();
        let mut total = 0.0;
        for &s in &self.ranking {
            let p = self.probs[s as usize];
            if p <= 0.0 && !out.is_empty() {
                break;
            }
            out.push((s, p));
            total += p;
            if total >= mass {
                break;
            }
        }
        out
    }
}

pub fn predict(model: &Mlp, window: &AccessWindow) -> Result<Prediction, ClassifierError> {
    let x = Array2::from_shape_vec((1, FEATURES), window.features()).expect("feature length");
    let p = model.forward(x.view())?;
    Ok(Prediction::from_probs(std::array::from_fn(|i| p[[0, i]])))
}

/// Masks of one table's accesses in program order.
pub fn table_masks(accesses: &[ObservedAccess], table: u8) -> Vec<Option<u16>> {
    accesses.iter().filter(|a| a.table == table).map(|a| a.mask).collect()
}

pub fn is_outlier(mask: u16) -> bool {
    mask.count_ones() > MAX_HOT
}

/// Labelled windows of every access to `table`; lost accesses and outliers
/// are skipped. Returns the windows and the outlier count.
pub fn labelled_windows(ops: &[TracedOp], table: u8) -> (Vec<AccessWindow>, usize) {
    let mut out = Vec::new();
    let mut outliers = 0;
    for op in ops {
        let seq: Vec<&ObservedAccess> = op.accesses.iter().filter(|a| a.table == table).collect();
        let masks: Vec<Option<u16>> = seq.iter().map(|a| a.mask).collect();
        for (i, a) in seq.iter().enumerate() {
            let (Some(mask), Some(truth)) = (a.mask, a.truth) else { continue };
            if is_outlier(mask) {
                outliers += 1;
                continue;
            }
            let mut w = encode_window(&masks, i);
            w.label = Some(truth);
            out.push(w);
        }
    }
    (out, outliers)
}

pub fn to_matrix(windows: &[AccessWindow]) -> (Array2<f64>, Vec<u8>) {
    let mut x = Array2::zeros((windows.len(), FEATURES));
    for (mut row, w) in x.rows_mut().into_iter().zip(windows) {
        w.write_features(row.as_slice_mut().expect("standard layout"));
    }
    let labels = windows.iter().map(|w| w.label.unwrap_or(0)).collect();
    (x, labels)
}

/// Fraction of windows whose top prediction equals the label.
pub fn accuracy(model: &Mlp, windows: &[AccessWindow]) -> Result<f64, ClassifierError> {
    if windows.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let (x, labels) = to_matrix(windows);
    let p = model.forward(x.view())?;
    let correct = p
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(row, &y)| {
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == y as usize
        })
        .count();
    Ok(correct as f64 / windows.len() as f64)
}

pub fn train(windows: &[AccessWindow], sizes: &[usize], cfg: &TrainConfig) -> Result<Mlp, ClassifierError> {
    if windows.is_empty() || windows.iter().any(|w| w.label.is_none()) {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut model = Mlp::new(sizes, cfg.dropout, &mut rng)?;
    let (x, labels) = to_matrix(windows);
    model.train(x.view(), &labels, cfg)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    /// Row of the table within its direction (0..4; 4 is the final table).
    pub table: u8,
    pub train: usize,
    pub test: usize,
    pub outliers: usize,
    pub accuracy: f64,
}

/// One model per table row, shared by both directions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassifierSet {
    pub models: Vec<Option<Mlp>>,
}

impl ClassifierSet {
    /// Trains a model for each requested table row from profiling traces and
    /// reports held-out accuracy on `test`.
    pub fn train(train_ops: &[TracedOp], test_ops: &[TracedOp], rows: &[u8], cfg: &TrainConfig) -> Result<(Self, Vec<TableReport>), ClassifierError> {
        let mut models = vec![None; 5];
        let mut reports = Vec::new();
        for &row in rows {
            let table_of = |ops: &[TracedOp]| ops.first().map(|o| o.direction.table_id(row)).unwrap_or(row);
            let (train_w, outliers) = labelled_windows(train_ops, table_of(train_ops));
            let (test_w, test_out) = labelled_windows(test_ops, table_of(test_ops));
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(row as u64),
                ..*cfg
            };
            let model = train(&train_w, &default_sizes(), &cfg)?;
            let acc = if test_w.is_empty() { f64::NAN } else { accuracy(&model, &test_w)? };
            reports.push(TableReport {
                table: row,
                train: train_w.len(),
                test: test_w.len(),
                outliers: outliers + test_out,
                accuracy: acc,
            });
            models[row as usize] = Some(model);
        }
        Ok((ClassifierSet { models }, reports))
    }

    /// Per access of `op`: a prediction, or `None` for lost and outlier
    /// accesses. Tables without a model fall back to the rule denoiser.
    pub fn classify(&self, op: &TracedOp, window: usize) -> Result<Vec<Option<Prediction>>, ClassifierError> {
        let mut out = vec![None; op.accesses.len()];
        let mut tables: Vec<u8> = op.accesses.iter().map(|a| a.table).collect();
        tables.sort_unstable();
        tables.dedup();
        for table in tables {
            let idx: Vec<usize> = (0..op.accesses.len()).filter(|&i| op.accesses[i].table == table).collect();
            let masks: Vec<Option<u16>> = idx.iter().map(|&i| op.accesses[i].mask).collect();
            let model = self.models.get(region_of(table)).and_then(|m| m.as_ref());
            let rule = rule_denoise(&masks, window);
            for (k, &i) in idx.iter().enumerate() {
                let Some(mask) = masks[k] else { continue };
                if is_outlier(mask) {
                    continue;
                }
                out[i] = Some(match model {
                    Some(m) => predict(m, &encode_window(&masks, k))?,
                    None => Prediction::from_mask(rule[k]),
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_is_a_permutation() {
        let p = Prediction::from_probs(std::array::from_fn(|i| ((i * 7) % 16) as f64 / 120.0));
        let mut seen = p.ranking;
        seen.sort_unstable();
        assert_eq!(seen, std::array::from_fn(|i| i as u8));
        assert_eq!(p.top(), 9);
    }

    #[test]
    fn candidates_cover_mass() {
        let mut probs = [0.0; 16];
        probs[3] = 0.6;
        probs[5] = 0.3;
        probs[7] = 0.1;
        let p = Prediction::from_probs(probs);
        assert_eq!(p.candidates(0.95).iter().map(|c| c.0).collect::<Vec<_>>(), vec![3, 5, 7]);
        assert_eq!(p.candidates(0.5).len(), 1);
        assert_eq!(Prediction::from_mask(0).candidates(0.95).len(), 16);
    }

    #[test]
    fn uniform_zero_window_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&default_sizes(), 0.0, &mut rng).unwrap();
        for w in &mut net.weights {
            w.mapv_inplace(|v| v * 0.01);
        }
        let p = predict(&net, &encode_window(&[Some(0)], 0)).unwrap();
        for q in p.probs {
            assert!((q - 1.0 / 16.0).abs() < 1e-3);
        }
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let windows: Vec<AccessWindow> = (0..1600)
            .map(|i| {
                let label = (i % 16) as u8;
                let mut w = encode_window(&[Some(1 << label)], 0);
                w.label = Some(label);
                w
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let net = train(&windows, &default_sizes(), &cfg).unwrap();
        let acc = accuracy(&net, &windows).unwrap();
        assert!(acc <= 0.2, "{acc}");
    }

    #[test]
    fn clean_singletons_learned() {
        let windows: Vec<AccessWindow> = (0..1600)
            .map(|i| {
                let label = (i % 16) as u8;
                let mut w = encode_window(&[Some(1 << ((i / 16) % 16)), Some(1 << label)], 1);
                w.label = Some(label);
                w
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let net = train(&windows, &default_sizes(), &cfg).unwrap();
        for s in 0..16u8 {
            let p = predict(&net, &encode_window(&[Some(1 << s)], 0)).unwrap();
            assert_eq!(p.top(), s);
        }
    }
}
