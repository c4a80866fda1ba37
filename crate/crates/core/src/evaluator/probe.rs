//! Multinomial logistic regression on frozen embeddings.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub l2: f64,
    /// Model selection runs every this many iterations.
    pub eval_every: usize,
    /// Stop after this many selections without improvement.
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            max_iters: 500,
            l2: 1e-4,
            eval_every: 10,
            patience: 10,
        }
    }
}

/// Centering and global rescaling fitted on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: f64,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        let n = rows.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let ms: f64 = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / n;
        let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).map(|(x, m)| (x - m) * self.scale).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    classes: usize,
    dim: usize,
    /// Row-major `classes × dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    standardizer: Standardizer,
}

impl LinearProbe {
    /// Fits on the training rows only. `select` scores a candidate model
    /// (higher is better) and drives early stopping; the best-scoring
    /// snapshot is returned. Without a selector the last iterate is kept.
    pub fn fit(
        rows: &[&[f64]],
        labels: &[u32],
        classes: usize,
        config: &ProbeConfig,
        mut select: Option<&mut dyn FnMut(&LinearProbe) -> f64>,
    ) -> Result<Self> {
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(Error::Validation("probe needs matching, non-empty rows and labels".into()));
        }
        let mut distinct: Vec<u32> = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Validation("probe training set has a single class".into()));
        }
        if let Some(&c) = labels.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::Validation(format!("label {c} outside {classes} classes")));
        }
        let dim = rows[0].len();
        let standardizer = Standardizer::fit(rows);
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
        let mut model = Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            standardizer,
        };
        let n = xs.len() as f64;
        let mut best: Option<(f64, LinearProbe)> = None;
        let mut since_best = 0;
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for iter in 1..=config.max_iters {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for (x, &y) in xs.iter().zip(labels) {
                let p = softmax_probs(&model.logits_std(x));
                for c in 0..classes {
                    let d = p[c] - if c == y as usize { 1.0 } else { 0.0 };
                    if d == 0.0 {
                        continue;
                    }
                    gb[c] += d;
                    let row = &mut gw[c * dim..(c + 1) * dim];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let lr = config.learning_rate;
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * (g / n + config.l2 * *w);
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= lr * g / n;
            }
            if let Some(sel) = select.as_deref_mut() {
                if iter % config.eval_every.max(1) == 0 {
                    let score = sel(&model);
                    if best.as_ref().is_none_or(|(s, _)| score > *s) {
                        best = Some((score, model.clone()));
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= config.patience {
                            break;
                        }
                    }
                }
            }
        }
        Ok(best.map_or(model, |(_, m)| m))
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let w = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        self.logits_std(&self.standardizer.apply(row))
    }

    /// Highest-logit class, lowest index on ties.
    pub fn predict(&self, row: &[f64]) -> u32 {
        let l = self.logits(row);
        let mut best = 0;
        for c in 1..l.len() {
            if l[c] > l[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn accuracy(&self, rows: &[&[f64]], labels: &[u32]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let hits = rows.iter().zip(labels).filter(|(r, &y)| self.predict(r) == y).count();
        hits as f64 / rows.len() as f64
    }
}

fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
