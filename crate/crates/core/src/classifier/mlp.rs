//! Feed-forward network: ReLU hidden layers with inverted dropout, softmax
//! output, mean cross-entropy loss, Adam updates.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ClassifierError;

const MAGIC: &[u8; 6] = b"SSMLP\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l] x sizes[l+1]`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 1e-3,
            dropout: 0.2,
            seed: 0,
        }
    }
}

fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Mlp {
    /// He-initialized weights, zero biases.
    pub fn new(sizes: &[usize], dropout: f64, rng: &mut impl Rng) -> Result<Self, ClassifierError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ClassifierError::BadModel("need at least two nonzero layer sizes".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(ClassifierError::BadModel(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive width");
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| normal.sample(rng)));
            biases.push(Array1::zeros(w[1]));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            dropout,
        })
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), ClassifierError> {
        if x.ncols() != self.inputs() {
            return Err(ClassifierError::Dimension {
                expected: self.inputs(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Activations of every layer (input first, probabilities last). Dropout
    /// masks, when given, scale the hidden activations.
    fn activations(&self, x: ArrayView2<f64>, masks: Option<&[Array2<f64>]>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w) + b;
            if l < last {
                relu(&mut z);
                if let Some(m) = masks {
                    z *= &m[l];
                }
            } else {
                softmax_rows(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    /// Class probabilities with dropout disabled.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ClassifierError> {
        self.check_input(&x)?;
        Ok(self.activations(x, None).pop().expect("output layer"))
    }

    /// Mean cross-entropy of the inference-mode network.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[u8]) -> Result<f64, ClassifierError> {
        let p = self.forward(x)?;
        Ok(cross_entropy(&p, labels))
    }

    /// Loss and analytic gradients with dropout disabled.
    pub fn gradients(&self, x: ArrayView2<f64>, labels: &[u8]) -> Result<(f64, Gradients), ClassifierError> {
        self.check_input(&x)?;
        Ok(self.backprop(x, labels, None))
    }

    fn backprop(&self, x: ArrayView2<f64>, labels: &[u8], masks: Option<&[Array2<f64>]>) -> (f64, Gradients) {
        let acts = self.activations(x, masks);
        let n = x.nrows() as f64;
        let probs = acts.last().expect("output layer");
        let loss = cross_entropy(probs, labels);
        let mut delta = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            delta[[i, y as usize]] -= 1.0;
        }
        delta /= n;
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            gw[l] = acts[l].t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                // acts[l] is post-ReLU (and post-mask); zero where the unit was off.
                Zip::from(&mut back).and(&acts[l]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                if let Some(m) = masks {
                    back *= &m[l - 1];
                }
                delta = back;
            }
        }
        (loss, Gradients { weights: gw, biases: gb })
    }

    fn dropout_masks(&self, rows: usize, rng: &mut impl Rng) -> Vec<Array2<f64>> {
        let keep = 1.0 - self.dropout;
        self.sizes[1..self.sizes.len() - 1]
            .iter()
            .map(|&w| Array2::from_shape_fn((rows, w), |_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }))
            .collect()
    }

    /// Mini-batch Adam over `x`/`labels`. Returns the mean training loss of
    /// the last epoch (NaN for zero epochs).
    pub fn train(&mut self, x: ArrayView2<f64>, labels: &[u8], cfg: &TrainConfig) -> Result<f64, ClassifierError> {
        self.check_input(&x)?;
        if x.nrows() == 0 || labels.len() != x.nrows() {
            return Err(ClassifierError::EmptyDataset);
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= self.outputs()) {
            return Err(ClassifierError::BadModel(format!("label {bad} out of range")));
        }
        self.dropout = cfg.dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(self);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        let mut last = f64::NAN;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let xb = x.select(Axis(0), chunk);
                let yb: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
                let masks = (self.dropout > 0.0).then(|| self.dropout_masks(chunk.len(), &mut rng));
                let (loss, g) = self.backprop(xb.view(), &yb, masks.as_deref());
                total += loss * chunk.len() as f64;
                adam.step(self, &g, cfg.learning_rate);
            }
            last = total / x.nrows() as f64;
        }
        Ok(last)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.dropout.to_le_bytes());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter().chain(b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClassifierError> {
        let mut r = bytes;
        let bad = |m: &str| ClassifierError::BadModel(m.to_string());
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |r: &mut &[u8]| -> Result<u32, ClassifierError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_at(&mut r)?;
        if version != VERSION {
            return Err(ClassifierError::BadModel(format!("unsupported version {version}")));
        }
        let n = u32_at(&mut r)? as usize;
        if !(2..=16).contains(&n) {
            return Err(bad("implausible layer count"));
        }
        let sizes = (0..n).map(|_| u32_at(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let f64_at = |r: &mut &[u8]| -> Result<f64, ClassifierError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated weights"))?;
            Ok(f64::from_le_bytes(b))
        };
        let dropout = f64_at(&mut r)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let vals = (0..w[0] * w[1]).map(|_| f64_at(&mut r)).collect::<Result<Vec<_>, _>>()?;
            weights.push(Array2::from_shape_vec((w[0], w[1]), vals).map_err(|e| bad(&e.to_string()))?);
            biases.push(Array1::from(
                (0..w[1]).map(|_| f64_at(&mut r)).collect::<Result<Vec<_>, _>>()?,
            ));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Mlp {
            sizes,
            weights,
            biases,
            dropout,
        })
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

pub fn cross_entropy(probs: &Array2<f64>, labels: &[u8]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y as usize]].max(1e-300).ln())
        .sum();
    total / labels.len().max(1) as f64
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(net: &Mlp) -> Self {
        let zeros = Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        };
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Mlp, g: &Gradients, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        };
        for l in 0..net.weights.len() {
            Zip::from(&mut net.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&g.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut net.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&g.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}
