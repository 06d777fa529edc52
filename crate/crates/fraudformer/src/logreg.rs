//! L2-regularized logistic regression over a flat per-sequence feature
//! vector built from the same tokenized columns the transformer sees:
//! one-hot last token per column, per-column distinct counts, mean
//! inter-event gap, and event count. Fitting is damped Newton on the convex
//! weighted-BCE-plus-ridge objective with a (C, class weight) grid selected
//! by validation PRAUC.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::FraudSubtype;
use crate::error::{Error, Result};
use crate::metrics::{auroc, prauc, subtype_eval, ScoredSet};
use crate::nn::{bce_scalar, sigmoid};
use crate::tokenizer::{TokenizedSequence, Vocabulary};
use crate::training::SubtypeMetrics;

#[derive(Debug, Clone)]
pub struct FlatDataset {
    pub x: Array2<f64>,
    pub y: Vec<bool>,
    pub subtypes: Vec<FraudSubtype>,
    pub feature_names: Vec<String>,
}

/// Unstandardized features; the standardizer is fitted on Train separately.
pub fn flat_features(seqs: &[TokenizedSequence], vocab: &Vocabulary) -> FlatDataset {
    let mut names = Vec::new();
    let mut one_hot_offsets = Vec::new();
    let mut width = 0usize;
    for col in &vocab.columns {
        one_hot_offsets.push(width);
        let n_tokens = match &col.tokens {
            crate::tokenizer::ColumnTokens::Categorical { n_tokens, .. } => *n_tokens,
            crate::tokenizer::ColumnTokens::Numerical { n_bins } => *n_bins,
        };
        for t in 0..n_tokens {
            names.push(format!("{}:last={t}", col.name));
        }
        width += n_tokens;
    }
    let distinct_offset = width;
    for col in &vocab.columns {
        names.push(format!("{}:distinct", col.name));
    }
    width += vocab.columns.len();
    let gap_idx = width;
    names.push("mean_log_gap".into());
    let count_idx = width + 1;
    names.push("n_events".into());
    width += 2;

    let mut x = Array2::zeros((seqs.len(), width));
    let mut y = Vec::with_capacity(seqs.len());
    let mut subtypes = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let mut distinct: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); vocab.columns.len()];
        let mut last: Vec<Option<usize>> = vec![None; vocab.columns.len()];
        for (t, &tok) in seq.token_ids.iter().enumerate() {
            let c = seq.column_ids[t];
            if c < vocab.columns.len() {
                distinct[c].insert(tok);
                last[c] = Some(tok);
            }
        }
        for (c, col) in vocab.columns.iter().enumerate() {
            if let Some(tok) = last[c] {
                x[[i, one_hot_offsets[c] + (tok - col.base_id)]] = 1.0;
            }
            x[[i, distinct_offset + c]] = distinct[c].len() as f64;
        }
        // Log scale: gaps are heavy-tailed, a raw-ms mean is all noise.
        let mut gaps = Vec::new();
        let mut events = BTreeSet::new();
        for (t, &e) in seq.event_index.iter().enumerate() {
            if events.insert(e) && events.len() > 1 {
                gaps.push((1.0 + seq.event_gap_ms[t] as f64).ln());
            }
        }
        x[[i, gap_idx]] = if gaps.is_empty() {
            0.0
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        };
        x[[i, count_idx]] = events.len() as f64;
        y.push(seq.label);
        subtypes.push(seq.subtype);
    }
    FlatDataset {
        x,
        y,
        subtypes,
        feature_names: names,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Per-feature moments from the Train matrix; constant features keep
    /// std 1 so they standardize to exactly zero.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegOptions {
    pub c_grid: Vec<f64>,
    pub class_weight_grid: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        LogRegOptions {
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            class_weight_grid: vec![1.0, 2.0, 5.0],
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    /// Intercept first, then one weight per standardized feature.
    pub weights: Vec<f64>,
    pub c: f64,
    pub class_weight: f64,
    pub standardizer: Standardizer,
}

impl LogRegModel {
    pub fn decision(&self, features: &Array2<f64>) -> Vec<f64> {
        let z = self.standardizer.transform(features);
        z.rows()
            .into_iter()
            .map(|row| {
                self.weights[0]
                    + row
                        .iter()
                        .zip(&self.weights[1..])
                        .map(|(x, w)| x * w)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Design matrix with an intercept column of ones in front.
fn with_intercept(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((x.nrows(), x.ncols() + 1));
    out.slice_mut(ndarray::s![.., 1..]).assign(x);
    out
}

/// J(w) = (1/n) sum_i w_i BCE(z_i, y_i) + (1/C) (1/2)||w_1..||^2; the
/// intercept is unregularized.
fn objective(xd: &Array2<f64>, y: &[bool], omega: &[f64], c: f64, w: &Array1<f64>) -> f64 {
    let n = xd.nrows() as f64;
    let z = xd.dot(w);
    let data: f64 = z
        .iter()
        .zip(y)
        .zip(omega)
        .map(|((&z, &y), &om)| om * bce_scalar(z, if y { 1.0 } else { 0.0 }))
        .sum();
    let ridge: f64 = w.iter().skip(1).map(|v| v * v).sum();
    data / n + ridge / (2.0 * c)
}

fn gradient(xd: &Array2<f64>, y: &[bool], omega: &[f64], c: f64, w: &Array1<f64>) -> Array1<f64> {
    let n = xd.nrows() as f64;
    let z = xd.dot(w);
    let resid: Array1<f64> = z
        .iter()
        .zip(y)
        .zip(omega)
        .map(|((&z, &y), &om)| om * (sigmoid(z) - if y { 1.0 } else { 0.0 }))
        .collect();
    let mut g = xd.t().dot(&resid) / n;
    for j in 1..g.len() {
        g[j] += w[j] / c;
    }
    g
}

fn cholesky_solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut z = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * z[k];
        }
        z[i] = s / l[[i, i]];
    }
    let mut w = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[[k, i]] * w[k];
        }
        w[i] = s / l[[i, i]];
    }
    Some(w)
}

/// Damped Newton to gradient-norm `tol`, at most `max_iter` steps.
fn solve_newton(
    xd: &Array2<f64>,
    y: &[bool],
    omega: &[f64],
    c: f64,
    init: Array1<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Array1<f64>> {
    let n = xd.nrows() as f64;
    let d = xd.ncols();
    let mut w = init;
    for _ in 0..max_iter {
        let g = gradient(xd, y, omega, c, &w);
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm <= tol {
            return Ok(w);
        }
        let z = xd.dot(&w);
        let mut h = Array2::<f64>::zeros((d, d));
        for (i, row) in xd.rows().into_iter().enumerate() {
            let s = sigmoid(z[i]);
            let coeff = omega[i] * s * (1.0 - s) / n;
            for a in 0..d {
                let ra = coeff * row[a];
                for b in a..d {
                    h[[a, b]] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[[a, b]] = h[[b, a]];
            }
        }
        for j in 1..d {
            h[[j, j]] += 1.0 / c;
        }
        let Some(step) = cholesky_solve(&h, &g) else {
            return Err(Error::NoConvergence {
                iterations: max_iter,
                grad_norm,
            });
        };
        let j0 = objective(xd, y, omega, c, &w);
        let descent: f64 = g.iter().zip(step.iter()).map(|(g, d)| g * d).sum();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &w - &(&step * t);
            if objective(xd, y, omega, c, &cand) <= j0 - 1e-4 * t * descent {
                w = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let g = gradient(xd, y, omega, c, &w);
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if grad_norm <= tol {
        Ok(w)
    } else {
        Err(Error::NoConvergence {
            iterations: max_iter,
            grad_norm,
        })
    }
}

fn class_weights(y: &[bool], positive_weight: f64) -> Vec<f64> {
    y.iter()
        .map(|&l| if l { positive_weight } else { 1.0 })
        .collect()
}

/// Grid search over (C, class weight) by validation PRAUC; ties break
/// toward the smaller C, then the smaller weight.
pub fn fit_logreg(
    train: &FlatDataset,
    validation: &FlatDataset,
    opts: &LogRegOptions,
) -> Result<LogRegModel> {
    if opts.c_grid.is_empty() || opts.class_weight_grid.is_empty() {
        return Err(Error::config("c_grid", "grids must be non-empty"));
    }
    let standardizer = Standardizer::fit(&train.x);
    let xd = with_intercept(&standardizer.transform(&train.x));
    let mut best: Option<(f64, f64, f64, Array1<f64>)> = None;
    for &c in &opts.c_grid {
        if c <= 0.0 {
            return Err(Error::config("c_grid", "C must be positive"));
        }
        for &cw in &opts.class_weight_grid {
            let omega = class_weights(&train.y, cw);
            let w = solve_newton(
                &xd,
                &train.y,
                &omega,
                c,
                Array1::zeros(xd.ncols()),
                opts.tol,
                opts.max_iter,
            )?;
            let model = LogRegModel {
                weights: w.to_vec(),
                c,
                class_weight: cw,
                standardizer: standardizer.clone(),
            };
            let set = score_set(&model, validation);
            let score = prauc(&set)?;
            let better = match &best {
                None => true,
                Some((s, bc, bw, _)) => {
                    score > *s
                        || (score == *s && (c < *bc || (c == *bc && cw < *bw)))
                }
            };
            if better {
                best = Some((score, c, cw, w));
            }
        }
    }
    let (_, c, class_weight, w) = best.expect("grid is non-empty");
    Ok(LogRegModel {
        weights: w.to_vec(),
        c,
        class_weight,
        standardizer,
    })
}

fn score_set(model: &LogRegModel, data: &FlatDataset) -> ScoredSet {
    ScoredSet::with_subtypes(
        model.decision(&data.x),
        data.y.clone(),
        data.subtypes.clone(),
    )
}

pub fn evaluate_logreg(model: &LogRegModel, data: &FlatDataset) -> ScoredSet {
    score_set(model, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub model: String,
    pub c: f64,
    pub class_weight: f64,
    pub prauc: f64,
    pub auroc: f64,
    pub subtypes: BTreeMap<String, SubtypeMetrics>,
}

pub fn baseline_report(model: &LogRegModel, test: &FlatDataset) -> Result<BaselineReport> {
    let set = score_set(model, test);
    let mut subtypes = BTreeMap::new();
    for subtype in FraudSubtype::FRAUD {
        if let Ok((p, a)) = subtype_eval(&set, subtype) {
            subtypes.insert(
                subtype.as_str().to_string(),
                SubtypeMetrics { prauc: p, auroc: a },
            );
        }
    }
    Ok(BaselineReport {
        model: "logreg".into(),
        c: model.c,
        class_weight: model.class_weight,
        prauc: prauc(&set)?,
        auroc: auroc(&set)?,
        subtypes,
    })
}
