//! Supervised training with BCE, the (λ, f_base) sweep, and the ablation
//! grid. Runs are deterministic given (seed, config, corpus): batch order
//! comes from a per-epoch permutation derived from the seed, and every cell
//! of a sweep or ablation gets an isolated seed.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AccountSequence, FraudSubtype, Split};
use crate::error::{Error, Result};
use crate::metrics::{auroc, prauc, subtype_eval, ScoredSet};
use crate::model::{forward, forward_logit, ModelConfig, ModelParams, Variant};
use crate::seedutil::derive_seed;
use crate::tokenizer::{
    derive_time_ids, fit_vocabulary, tokenize, BinningRule, FitOptions, TokenizedSequence,
    Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub seed: u64,
    /// Validation metrics every this many epochs (the last epoch always).
    pub eval_cadence: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            n_epochs: 3,
            seed: 17,
            eval_cadence: 1,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr <= 0.0 {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.n_epochs == 0 {
            return Err(Error::config("n_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eval_cadence == 0 {
            return Err(Error::config("eval_cadence", "must be positive"));
        }
        Ok(())
    }
}

/// Tokenized splits plus the artifacts they were tokenized with.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub bins: BinningRule,
    pub train: Vec<TokenizedSequence>,
    pub validation: Vec<TokenizedSequence>,
    pub test: Vec<TokenizedSequence>,
}

/// Fits the vocabulary on the Train split and tokenizes all three splits.
pub fn prepare(seqs: &[AccountSequence], fit: &FitOptions, l_max: usize) -> Result<Prepared> {
    let (vocab, bins) = fit_vocabulary(seqs, fit)?;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for seq in seqs {
        let tok = tokenize(seq, &vocab, &bins, l_max)?;
        match seq.split {
            Split::Train => train.push(tok),
            Split::Validation => validation.push(tok),
            Split::Test => test.push(tok),
        }
    }
    Ok(Prepared {
        train,
        validation,
        test,
        vocab,
        bins,
    })
}

/// Clones the sequences with time-ids derived for the config's scheme.
pub fn with_time_ids(
    seqs: &[TokenizedSequence],
    config: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<Vec<TokenizedSequence>> {
    seqs.iter()
        .map(|s| {
            let mut out = s.clone();
            out.time_ids = derive_time_ids(
                s,
                config.encoder.scheme,
                vocab.epoch_origin_ms,
                vocab.id_cap_ms,
            )?;
            Ok(out)
        })
        .collect()
}

/// Adam with bias correction and decoupled weight decay; one slot pair per
/// named tensor.
pub struct Adam {
    config: OptimizerConfig,
    t: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from already-averaged gradients, clipping by the
    /// global gradient norm first.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &mut BTreeMap<String, Array2<f64>>,
        clip: f64,
    ) -> Result<()> {
        let norm = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Data("non-finite gradient norm".into()));
        }
        if clip > 0.0 && norm > clip {
            let scale = clip / norm;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, slot) in params.named_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            });
            let target = std::rc::Rc::make_mut(slot);
            ndarray::Zip::from(&mut *target)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let update = c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                    *p -= update + c.lr * c.weight_decay * *p;
                });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubtypeMetrics {
    pub prauc: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_prauc: f64,
    pub val_auroc: f64,
}

/// One line of the results file. Wall time is measured but excluded from
/// serialization so result files are byte-stable across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub lambda: f64,
    pub f_base: f64,
    pub prauc: f64,
    pub auroc: f64,
    pub subtypes: BTreeMap<String, SubtypeMetrics>,
    pub epochs: Vec<EpochMetrics>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub diverged: Option<DivergencePoint>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Scores a split with the current parameters; scores are raw logits.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    seqs: &[TokenizedSequence],
) -> Result<ScoredSet> {
    let mut scores = Vec::with_capacity(seqs.len());
    let mut labels = Vec::with_capacity(seqs.len());
    let mut subtypes = Vec::with_capacity(seqs.len());
    for seq in seqs {
        scores.push(forward_logit(seq, params, config)?);
        labels.push(seq.label);
        subtypes.push(seq.subtype);
    }
    Ok(ScoredSet::with_subtypes(scores, labels, subtypes))
}

pub fn train(
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &Prepared,
) -> Result<(ModelParams, RunReport)> {
    let params = ModelParams::init(model_config, train_config.seed);
    train_from(params, variant, model_config, train_config, data)
}

/// Training from explicit starting parameters (checkpoint continuation and
/// divergence tests).
pub fn train_from(
    mut params: ModelParams,
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &Prepared,
) -> Result<(ModelParams, RunReport)> {
    model_config.validate()?;
    train_config.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::Data("need non-empty Train and Validation splits".into()));
    }
    let started = Instant::now();
    let train_seqs = with_time_ids(&data.train, model_config, &data.vocab)?;
    let val_seqs = with_time_ids(&data.validation, model_config, &data.vocab)?;
    let test_seqs = with_time_ids(&data.test, model_config, &data.vocab)?;

    let mut adam = Adam::new(train_config.optimizer);
    let mut epochs = Vec::new();
    let mut initial_train_loss = f64::NAN;
    let mut diverged = None;

    'training: for epoch in 0..train_config.n_epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            train_config.seed,
            &format!("epoch/{epoch}"),
        ));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for (step, batch) in order.chunks(train_config.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let seq = &train_seqs[i];
                let mut fwd = forward(seq, &params, model_config)?;
                let target = array![[if seq.label { 1.0 } else { 0.0 }]];
                let loss = fwd.tape.bce_with_logits(fwd.logit, target);
                let loss_value = fwd.tape.value(loss)[[0, 0]];
                if !loss_value.is_finite() {
                    diverged = Some(DivergencePoint { epoch, step });
                    break 'training;
                }
                batch_loss += loss_value;
                let mut g = fwd.tape.backward(loss);
                for (name, var) in &fwd.param_vars {
                    if let Some(grad) = g.take(*var) {
                        grads
                            .entry(name.clone())
                            .and_modify(|acc| *acc += &grad)
                            .or_insert(grad);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
            batch_loss *= scale;
            if initial_train_loss.is_nan() {
                initial_train_loss = batch_loss;
            }
            epoch_loss += batch_loss * batch.len() as f64;
            epoch_count += batch.len();
            if adam.step(&mut params, &mut grads, train_config.grad_clip).is_err() {
                diverged = Some(DivergencePoint { epoch, step });
                break 'training;
            }
        }

        let train_loss = epoch_loss / epoch_count as f64;
        let last = epoch + 1 == train_config.n_epochs;
        if (epoch + 1) % train_config.eval_cadence == 0 || last {
            let val = evaluate(&params, model_config, &val_seqs)?;
            epochs.push(EpochMetrics {
                epoch,
                train_loss,
                val_prauc: prauc(&val)?,
                val_auroc: auroc(&val)?,
            });
        } else {
            epochs.push(EpochMetrics {
                epoch,
                train_loss,
                val_prauc: f64::NAN,
                val_auroc: f64::NAN,
            });
        }
    }

    let (test_prauc, test_auroc, subtypes) = if test_seqs.is_empty() {
        (f64::NAN, f64::NAN, BTreeMap::new())
    } else {
        let test = evaluate(&params, model_config, &test_seqs)?;
        let mut subtypes = BTreeMap::new();
        for subtype in FraudSubtype::FRAUD {
            if let Ok((p, a)) = subtype_eval(&test, subtype) {
                subtypes.insert(
                    subtype.as_str().to_string(),
                    SubtypeMetrics { prauc: p, auroc: a },
                );
            }
        }
        (prauc(&test)?, auroc(&test)?, subtypes)
    };

    let report = RunReport {
        variant,
        seed: train_config.seed,
        lambda: model_config.encoder.lambda,
        f_base: model_config.encoder.f_base,
        prauc: test_prauc,
        auroc: test_auroc,
        subtypes,
        final_train_loss: epochs.last().map_or(f64::NAN, |e| e.train_loss),
        epochs,
        initial_train_loss,
        diverged,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub f_bases: Vec<f64>,
    pub variants: Vec<Variant>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lambdas: vec![0.01, 0.1],
            f_bases: vec![1.0, 10.0, 1e3, 1e5, 1e6, 1e7, 1e8],
            variants: vec![Variant::Srp],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variant: Variant,
    pub f_base: f64,
    pub lambda: f64,
    pub prauc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Argmax of validation PRAUC for one variant; ties break toward the
    /// larger f_base, then the smaller λ.
    pub fn select(&self, variant: Variant) -> Option<(f64, f64)> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.prauc.map(|p| (p, c.f_base, c.lambda)))
            .max_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(a.1.total_cmp(&b.1))
                    .then(b.2.total_cmp(&a.2))
            })
            .map(|(_, f_base, lambda)| (f_base, lambda))
    }
}

/// One single-epoch training per (variant, λ, f_base) cell, scored by
/// validation PRAUC after that epoch. Cell failures are recorded and the
/// sweep continues.
pub fn run_sweep(
    grid: &SweepGrid,
    model_config_base: &ModelConfig,
    train_config: &TrainConfig,
    data: &Prepared,
) -> Result<SweepTable> {
    if grid.lambdas.is_empty() || grid.f_bases.is_empty() || grid.variants.is_empty() {
        return Err(Error::config("grid", "needs variants, lambdas, and f_bases"));
    }
    let mut specs = Vec::new();
    for &variant in &grid.variants {
        for &lambda in &grid.lambdas {
            for &f_base in &grid.f_bases {
                specs.push((variant, lambda, f_base));
            }
        }
    }
    let cells: Vec<SweepCell> = specs
        .par_iter()
        .map(|&(variant, lambda, f_base)| {
            let mut config = model_config_base.clone();
            config.encoder = variant.encoder_config(lambda, f_base);
            let cell_train = TrainConfig {
                n_epochs: 1,
                seed: derive_seed(
                    train_config.seed,
                    &format!("sweep/{variant}/{lambda}/{f_base}"),
                ),
                ..*train_config
            };
            let outcome = train(variant, &config, &cell_train, data);
            let (prauc, error) = match outcome {
                Ok((_, report)) => match report.diverged {
                    None => (Some(report.epochs[0].val_prauc), None),
                    Some(at) => (
                        None,
                        Some(format!("diverged at epoch {} step {}", at.epoch, at.step)),
                    ),
                },
                Err(e) => (None, Some(e.to_string())),
            };
            SweepCell {
                variant,
                f_base,
                lambda,
                prauc,
                error,
            }
        })
        .collect();
    Ok(SweepTable { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub prauc_mean: f64,
    pub prauc_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub runs: Vec<RunReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains each variant `n_seeds` times and reports test PRAUC/AUROC as
/// mean ± sample std. Only encoder flags differ between arms.
pub fn run_ablation(
    variants: &[Variant],
    model_config_base: &ModelConfig,
    train_config: &TrainConfig,
    data: &Prepared,
    n_seeds: usize,
) -> Result<Vec<AblationRow>> {
    if n_seeds == 0 {
        return Err(Error::config("n_seeds", "must be at least 1"));
    }
    let mut specs = Vec::new();
    for &variant in variants {
        for idx in 0..n_seeds {
            specs.push((variant, idx));
        }
    }
    let runs: Vec<Result<RunReport>> = specs
        .par_iter()
        .map(|&(variant, idx)| {
            let mut config = model_config_base.clone();
            config.encoder = variant.encoder_config(
                model_config_base.encoder.lambda,
                model_config_base.encoder.f_base,
            );
            let cell_train = TrainConfig {
                seed: derive_seed(train_config.seed, &format!("ablation/{variant}/{idx}")),
                ..*train_config
            };
            let (_, report) = train(variant, &config, &cell_train, data)?;
            if let Some(at) = report.diverged {
                return Err(Error::Diverged {
                    epoch: at.epoch,
                    step: at.step,
                });
            }
            Ok(report)
        })
        .collect();

    let mut by_variant: BTreeMap<usize, Vec<RunReport>> = BTreeMap::new();
    for (spec, run) in specs.iter().zip(runs) {
        let report = run?;
        let pos = variants.iter().position(|v| *v == spec.0).expect("spec built from variants");
        by_variant.entry(pos).or_default().push(report);
    }
    Ok(by_variant
        .into_iter()
        .map(|(pos, runs)| {
            let praucs: Vec<f64> = runs.iter().map(|r| r.prauc).collect();
            let aurocs: Vec<f64> = runs.iter().map(|r| r.auroc).collect();
            let (prauc_mean, prauc_std) = mean_std(&praucs);
            let (auroc_mean, auroc_std) = mean_std(&aurocs);
            AblationRow {
                variant: variants[pos],
                prauc_mean,
                prauc_std,
                auroc_mean,
                auroc_std,
                runs,
            }
        })
        .collect())
}
