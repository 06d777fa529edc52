//! Command-line entry point orchestrating generate → train → evaluate →
//! ablate → sweep → report over one declarative config.
//!
//! Every artifact lands under the config's output directory and is listed in
//! `manifest.json` together with the hashes of the resolved config and the
//! corpus it was computed from. Result files contain no wall-clock state, so
//! re-running a command with identical inputs rewrites them byte for byte;
//! measured times go to the `timing.json` sidecar instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Preset, RunConfig};
use crate::data::{generate_corpus, read_corpus, Split};
use crate::error::Error;
use crate::logreg::{baseline_report, fit_logreg, flat_features, BaselineReport, LogRegOptions};
use crate::metrics::{pr_curve, roc_curve, subtype_eval, ScoredSet};
use crate::model::{load_checkpoint, save_checkpoint, Variant};
use crate::tokenizer::save_vocabulary;
use crate::training::{
    evaluate, prepare, run_ablation, run_sweep, train, with_time_ids, Prepared, SubtypeMetrics,
    SweepGrid, SweepTable,
};

const MANIFEST_FILE: &str = "manifest.json";
const CORPUS_FILE: &str = "corpus.jsonl";
const VOCAB_FILE: &str = "vocab.json";
const TIMING_FILE: &str = "timing.json";

#[derive(Parser)]
#[command(name = "fraudformer", version, about = "Time-aware transformer fraud experiments")]
pub struct Cli {
    /// TOML run configuration; missing sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override (flag > env > file > default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Architecture preset override.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic labeled corpus.
    Generate,
    /// Train one model per requested variant and checkpoint it.
    Train {
        /// Comma-separated variant names (default: vanilla,srp).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Score checkpoints on the test split; also fits the flat baseline.
    Evaluate {
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Add a per-subtype metrics block.
        #[arg(long)]
        subtypes: bool,
    },
    /// Train every requested variant across seeds and tabulate mean ± std.
    Ablate {
        /// Comma-separated variant names (default: the config's list).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Seeds per variant (default: the config's n_seeds).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// One-epoch (λ, f_base) grid scored by validation PRAUC.
    Sweep {
        /// Named grid: "default" (2×7) or "smoke" (1×2); omit to use the
        /// config's [sweep] section.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Render curves and comparison tables from existing artifacts.
    Report,
}

pub fn run() -> anyhow::Result<()> {
    Cli::parse().execute()
}

impl Cli {
    fn execute(self) -> anyhow::Result<()> {
        let (mut config, file_bytes) = match &self.config {
            Some(path) => {
                let (config, bytes) = RunConfig::from_file(path)?;
                (config, Some(bytes))
            }
            None => (RunConfig::default(), None),
        };
        config.apply_env()?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if let Some(preset) = &self.preset {
            config.preset = preset.parse::<Preset>()?;
        }
        config.validate()?;

        let mut ctx = RunContext::new(config, file_bytes)?;
        match &self.command {
            Command::Generate => cmd_generate(&mut ctx)?,
            Command::Train { variants } => {
                let variants = parse_variants(variants.as_deref(), &[Variant::Vanilla, Variant::Srp])?;
                cmd_train(&mut ctx, &variants)?;
            }
            Command::Evaluate { variants, subtypes } => {
                let variants = parse_variants(variants.as_deref(), &[Variant::Vanilla, Variant::Srp])?;
                cmd_evaluate(&mut ctx, &variants, *subtypes)?;
            }
            Command::Ablate { variants, seeds } => {
                let defaults = ctx.config.ablate_variants()?;
                let variants = parse_variants(variants.as_deref(), &defaults)?;
                let seeds = seeds.unwrap_or(ctx.config.ablate.n_seeds);
                cmd_ablate(&mut ctx, &variants, seeds)?;
            }
            Command::Sweep { grid } => {
                let grid = named_grid(grid.as_deref(), &ctx.config)?;
                cmd_sweep(&mut ctx, &grid)?;
            }
            Command::Report => cmd_report(&mut ctx)?,
        }
        ctx.finish()
    }
}

fn parse_variants(names: Option<&[String]>, defaults: &[Variant]) -> anyhow::Result<Vec<Variant>> {
    let parsed = match names {
        Some(names) if !names.is_empty() => names
            .iter()
            .map(|n| Variant::from_str(n))
            .collect::<Result<Vec<_>, Error>>()?,
        _ => defaults.to_vec(),
    };
    Ok(parsed)
}

fn named_grid(name: Option<&str>, config: &RunConfig) -> anyhow::Result<SweepGrid> {
    match name {
        None => Ok(config.sweep.clone()),
        Some("default") => Ok(SweepGrid { variants: config.sweep.variants.clone(), ..SweepGrid::default() }),
        Some("smoke") => Ok(SweepGrid {
            lambdas: vec![0.01],
            f_bases: vec![10.0, 1e7],
            variants: config.sweep.variants.clone(),
        }),
        Some(other) => bail!("unknown grid '{other}'; available: default, smoke"),
    }
}

/// Hashes, manifest bookkeeping, and timing shared by every subcommand.
struct RunContext {
    config: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
    timings: BTreeMap<String, f64>,
    started: Instant,
    command_label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    code_version: String,
    /// SHA-256 of the resolved configuration (file + env + flags applied).
    resolved_config_sha256: String,
    /// SHA-256 of the raw config file, when one was given.
    config_file_sha256: Option<String>,
    /// SHA-256 of corpus.jsonl as last written or consumed.
    corpus_sha256: Option<String>,
    /// Artifact name → path relative to the output directory.
    artifacts: BTreeMap<String, String>,
}

impl RunContext {
    fn new(config: RunConfig, config_file: Option<Vec<u8>>) -> anyhow::Result<Self> {
        let out = config.out.clone();
        let resolved = config.canonical_toml()?;
        let mut manifest = match fs::read_to_string(out.join(MANIFEST_FILE)) {
            Ok(text) => serde_json::from_str(&text)
                .with_context(|| format!("{} is not a valid manifest", out.join(MANIFEST_FILE).display()))?,
            Err(_) => RunManifest::default(),
        };
        manifest.code_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.resolved_config_sha256 = sha256_hex(resolved.as_bytes());
        manifest.config_file_sha256 = config_file.map(|bytes| sha256_hex(&bytes));
        Ok(RunContext {
            config,
            out,
            manifest,
            timings: BTreeMap::new(),
            started: Instant::now(),
            command_label: String::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Writes an artifact and records it in the manifest.
    fn write_artifact(&mut self, name: &str, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifacts.insert(name.to_string(), rel.to_string());
        Ok(())
    }

    fn record_timing(&mut self, label: &str, seconds: f64) {
        self.timings.insert(label.to_string(), seconds);
    }

    /// Writes the manifest and the timing sidecar; called once per command.
    fn finish(mut self) -> anyhow::Result<()> {
        let total = self.started.elapsed().as_secs_f64();
        self.record_timing("total", total);
        let timing = serde_json::json!({
            "command": self.command_label,
            "seconds": self.timings,
        });
        let timing_bytes = format!("{}\n", serde_json::to_string_pretty(&timing)?);
        let path = self.path(TIMING_FILE);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, timing_bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifacts.insert("timing".to_string(), TIMING_FILE.to_string());

        let manifest_bytes = format!("{}\n", serde_json::to_string_pretty(&self.manifest)?);
        fs::write(self.path(MANIFEST_FILE), manifest_bytes)
            .with_context(|| format!("writing {}", self.path(MANIFEST_FILE).display()))?;
        Ok(())
    }

    fn hash_corpus(&mut self) -> anyhow::Result<()> {
        let bytes = fs::read(self.path(CORPUS_FILE))?;
        self.manifest.corpus_sha256 = Some(sha256_hex(&bytes));
        Ok(())
    }

    /// Loads the corpus and tokenizes all splits; the vocabulary artifact is
    /// rewritten so it is always in sync with the corpus on disk.
    fn load_prepared(&mut self) -> anyhow::Result<Prepared> {
        let corpus_path = self.path(CORPUS_FILE);
        if !corpus_path.exists() {
            bail!(
                "{} not found; run `fraudformer generate` with the same --out first",
                corpus_path.display()
            );
        }
        let seqs = read_corpus(&corpus_path)?;
        self.hash_corpus()?;
        let data = prepare(&seqs, &self.config.tokenizer, self.config.l_max())?;
        save_vocabulary(&data.vocab, &data.bins, &self.path(VOCAB_FILE))?;
        self.manifest.artifacts.insert("vocab".to_string(), VOCAB_FILE.to_string());
        Ok(data)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn to_pretty_json<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    Ok(format!("{}\n", serde_json::to_string_pretty(value)?).into_bytes())
}

fn cmd_generate(ctx: &mut RunContext) -> anyhow::Result<()> {
    ctx.command_label = "generate".to_string();
    let spec = ctx.config.corpus_spec();
    let t0 = Instant::now();
    let seqs = generate_corpus(&spec)?;
    let path = ctx.path(CORPUS_FILE);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    crate::data::write_corpus(&seqs, &path)?;
    ctx.manifest.artifacts.insert("corpus".to_string(), CORPUS_FILE.to_string());
    ctx.hash_corpus()?;
    ctx.record_timing("generate", t0.elapsed().as_secs_f64());

    let count = |split: Split| seqs.iter().filter(|s| s.split == split).count();
    let frauds = seqs.iter().filter(|s| s.label()).count();
    println!(
        "generated {} sequences ({} train / {} validation / {} test, {} fraud) -> {}",
        seqs.len(),
        count(Split::Train),
        count(Split::Validation),
        count(Split::Test),
        frauds,
        path.display()
    );
    Ok(())
}

/// Test-split scores of one model, flat enough for CSV.
fn scores_csv(set: &ScoredSet) -> String {
    let mut out = String::from("index,label,subtype,score\n");
    let subtypes = set.subtypes.as_ref();
    for i in 0..set.len() {
        let subtype = subtypes.map_or("unknown", |s| s[i].as_str());
        out.push_str(&format!(
            "{i},{},{subtype},{}\n",
            u8::from(set.labels[i]),
            set.scores[i]
        ));
    }
    out
}

fn cmd_train(ctx: &mut RunContext, variants: &[Variant]) -> anyhow::Result<()> {
    ctx.command_label = "train".to_string();
    let data = ctx.load_prepared()?;
    let base = ctx.config.model_config(data.vocab.v_total, data.vocab.n_columns());
    let train_config = ctx.config.train_config();

    for &variant in variants {
        let mut model_config = base.clone();
        model_config.encoder = variant.encoder_config(base.encoder.lambda, base.encoder.f_base);
        let t0 = Instant::now();
        let (params, report) = train(variant, &model_config, &train_config, &data)?;
        ctx.record_timing(&format!("train/{variant}"), t0.elapsed().as_secs_f64());

        ctx.write_artifact(
            &format!("train/{variant}"),
            &format!("runs/train_{variant}.json"),
            &to_pretty_json(&report)?,
        )?;
        let checkpoint_rel = format!("runs/checkpoint_{variant}.json");
        let checkpoint_path = ctx.path(&checkpoint_rel);
        if let Some(parent) = checkpoint_path.parent() {
            fs::create_dir_all(parent)?;
        }
        save_checkpoint(&params, &model_config, &checkpoint_path)?;
        ctx.manifest
            .artifacts
            .insert(format!("checkpoint/{variant}"), checkpoint_rel);

        let test = with_time_ids(&data.test, &model_config, &data.vocab)?;
        let set = evaluate(&params, &model_config, &test)?;
        ctx.write_artifact(
            &format!("scores/{variant}"),
            &format!("runs/scores_{variant}.csv"),
            scores_csv(&set).as_bytes(),
        )?;

        println!(
            "{variant}: test PRAUC {:.5} AUROC {:.5} (final train loss {:.4}{})",
            report.prauc,
            report.auroc,
            report.final_train_loss,
            report
                .diverged
                .map(|d| format!(", diverged at epoch {} step {}", d.epoch, d.step))
                .unwrap_or_default()
        );
    }
    Ok(())
}

/// Per-variant evaluation artifact; metrics recomputed from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalReport {
    variant: String,
    lambda: f64,
    f_base: f64,
    prauc: f64,
    auroc: f64,
    subtypes: BTreeMap<String, SubtypeMetrics>,
}

fn subtype_block(set: &ScoredSet) -> anyhow::Result<BTreeMap<String, SubtypeMetrics>> {
    let mut out = BTreeMap::new();
    for subtype in crate::data::FraudSubtype::FRAUD {
        match subtype_eval(set, subtype) {
            Ok((prauc, auroc)) => {
                out.insert(subtype.as_str().to_string(), SubtypeMetrics { prauc, auroc });
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn cmd_evaluate(ctx: &mut RunContext, variants: &[Variant], subtypes: bool) -> anyhow::Result<()> {
    ctx.command_label = "evaluate".to_string();
    let data = ctx.load_prepared()?;

    for &variant in variants {
        let checkpoint_path = ctx.path(&format!("runs/checkpoint_{variant}.json"));
        if !checkpoint_path.exists() {
            bail!(
                "{} not found; run `fraudformer train --variants {variant}` first",
                checkpoint_path.display()
            );
        }
        let (params, model_config) = load_checkpoint(&checkpoint_path)?;
        let t0 = Instant::now();
        let test = with_time_ids(&data.test, &model_config, &data.vocab)?;
        let set = evaluate(&params, &model_config, &test)?;
        ctx.record_timing(&format!("evaluate/{variant}"), t0.elapsed().as_secs_f64());

        let report = EvalReport {
            variant: variant.to_string(),
            lambda: model_config.encoder.lambda,
            f_base: model_config.encoder.f_base,
            prauc: crate::metrics::prauc(&set)?,
            auroc: crate::metrics::auroc(&set)?,
            subtypes: if subtypes { subtype_block(&set)? } else { BTreeMap::new() },
        };
        ctx.write_artifact(
            &format!("eval/{variant}"),
            &format!("runs/eval_{variant}.json"),
            &to_pretty_json(&report)?,
        )?;
        ctx.write_artifact(
            &format!("scores/{variant}"),
            &format!("runs/scores_{variant}.csv"),
            scores_csv(&set).as_bytes(),
        )?;

        println!("{variant}: test PRAUC {:.5} AUROC {:.5}", report.prauc, report.auroc);
        if subtypes {
            for (name, m) in &report.subtypes {
                println!("  {name:<9} PRAUC {:.5} AUROC {:.5}", m.prauc, m.auroc);
            }
        }
    }

    let t0 = Instant::now();
    let baseline = run_baseline(&data)?;
    ctx.record_timing("evaluate/baseline", t0.elapsed().as_secs_f64());
    ctx.write_artifact("eval/baseline", "runs/baseline.json", &to_pretty_json(&baseline.0)?)?;
    ctx.write_artifact(
        "scores/baseline",
        "runs/scores_baseline.csv",
        scores_csv(&baseline.1).as_bytes(),
    )?;
    println!(
        "baseline logreg: test PRAUC {:.5} AUROC {:.5} (C {}, class weight {})",
        baseline.0.prauc, baseline.0.auroc, baseline.0.c, baseline.0.class_weight
    );
    Ok(())
}

fn run_baseline(data: &Prepared) -> anyhow::Result<(BaselineReport, ScoredSet)> {
    let train_flat = flat_features(&data.train, &data.vocab);
    let val_flat = flat_features(&data.validation, &data.vocab);
    let test_flat = flat_features(&data.test, &data.vocab);
    let model = fit_logreg(&train_flat, &val_flat, &LogRegOptions::default())?;
    let report = baseline_report(&model, &test_flat)?;
    let set = crate::logreg::evaluate_logreg(&model, &test_flat);
    Ok((report, set))
}

fn cmd_ablate(ctx: &mut RunContext, variants: &[Variant], n_seeds: usize) -> anyhow::Result<()> {
    ctx.command_label = "ablate".to_string();
    let data = ctx.load_prepared()?;
    let base = ctx.config.model_config(data.vocab.v_total, data.vocab.n_columns());
    let train_config = ctx.config.train_config();

    let t0 = Instant::now();
    let rows = run_ablation(variants, &base, &train_config, &data, n_seeds)?;
    ctx.record_timing("ablate", t0.elapsed().as_secs_f64());

    let mut csv = String::from("variant,lambda,f_base,prauc_mean,prauc_std,auroc_mean,auroc_std\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.5},{:.5},{:.5},{:.5}\n",
            row.variant,
            base.encoder.lambda,
            base.encoder.f_base,
            row.prauc_mean,
            row.prauc_std,
            row.auroc_mean,
            row.auroc_std
        ));
    }
    ctx.write_artifact("ablate/table", "runs/ablate.csv", csv.as_bytes())?;
    ctx.write_artifact("ablate/runs", "runs/ablate.json", &to_pretty_json(&rows)?)?;

    println!("variant    PRAUC (mean ± std)    AUROC (mean ± std)   [{n_seeds} seeds]");
    for row in &rows {
        println!(
            "{:<10} {:.5} ± {:.5}     {:.5} ± {:.5}",
            row.variant.to_string(),
            row.prauc_mean,
            row.prauc_std,
            row.auroc_mean,
            row.auroc_std
        );
    }
    Ok(())
}

fn sweep_variant_csv(table: &SweepTable, variant: Variant) -> String {
    let mut csv = String::from("lambda,f_base,val_prauc,error\n");
    for cell in table.cells.iter().filter(|c| c.variant == variant) {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            cell.lambda,
            cell.f_base,
            cell.prauc.map(|p| format!("{p:.5}")).unwrap_or_default(),
            cell.error.clone().unwrap_or_default()
        ));
    }
    csv
}

fn cmd_sweep(ctx: &mut RunContext, grid: &SweepGrid) -> anyhow::Result<()> {
    ctx.command_label = "sweep".to_string();
    let data = ctx.load_prepared()?;
    let base = ctx.config.model_config(data.vocab.v_total, data.vocab.n_columns());
    let train_config = ctx.config.train_config();

    let t0 = Instant::now();
    let table = run_sweep(grid, &base, &train_config, &data)?;
    ctx.record_timing("sweep", t0.elapsed().as_secs_f64());

    ctx.write_artifact("sweep/cells", "runs/sweep.json", &to_pretty_json(&table)?)?;
    for &variant in &grid.variants {
        ctx.write_artifact(
            &format!("sweep/{variant}"),
            &format!("runs/sweep_{variant}.csv"),
            sweep_variant_csv(&table, variant).as_bytes(),
        )?;
        println!("{variant}: validation PRAUC after one epoch");
        print!("{:>10}", "λ \\ f_base");
        for f in &grid.f_bases {
            print!(" {f:>9}");
        }
        println!();
        for &lambda in &grid.lambdas {
            print!("{lambda:>10}");
            for &f_base in &grid.f_bases {
                let cell = table
                    .cells
                    .iter()
                    .find(|c| c.variant == variant && c.lambda == lambda && c.f_base == f_base);
                match cell.and_then(|c| c.prauc) {
                    Some(p) => print!(" {p:>9.5}"),
                    None => print!(" {:>9}", "-"),
                }
            }
            println!();
        }
        match table.select(variant) {
            Some((f_base, lambda)) => println!("selected: f_base {f_base}, λ {lambda}"),
            None => println!("selected: none (every cell failed)"),
        }
    }
    Ok(())
}

/// One comparison row assembled from whatever artifacts exist.
struct ReportRow {
    source: String,
    variant: String,
    prauc: f64,
    auroc: f64,
}

fn read_scores_csv(path: &Path) -> anyhow::Result<ScoredSet> {
    let text = fs::read_to_string(path)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            bail!("{}:{} expected 4 fields", path.display(), i + 1);
        }
        labels.push(fields[1] == "1");
        scores.push(fields[3].parse::<f64>().with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(ScoredSet::new(scores, labels))
}

fn curve_csv(points: &[(f64, f64)], header: &str) -> String {
    let mut out = format!("{header}\n");
    for (x, y) in points {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

fn cmd_report(ctx: &mut RunContext) -> anyhow::Result<()> {
    ctx.command_label = "report".to_string();
    let runs_dir = ctx.path("runs");
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut text = String::new();

    // Ablation table, if present.
    let ablate_path = runs_dir.join("ablate.json");
    if ablate_path.exists() {
        let parsed: Vec<crate::training::AblationRow> =
            serde_json::from_str(&fs::read_to_string(&ablate_path)?)
                .with_context(|| format!("{} is not an ablation table", ablate_path.display()))?;
        text.push_str("ablation (test metrics, mean ± std over seeds)\n");
        text.push_str("variant    PRAUC               AUROC\n");
        for row in &parsed {
            text.push_str(&format!(
                "{:<10} {:.5} ± {:.5}   {:.5} ± {:.5}\n",
                row.variant.to_string(),
                row.prauc_mean,
                row.prauc_std,
                row.auroc_mean,
                row.auroc_std
            ));
            rows.push(ReportRow {
                source: "ablate".to_string(),
                variant: row.variant.to_string(),
                prauc: row.prauc_mean,
                auroc: row.auroc_mean,
            });
        }
        text.push('\n');
    }

    // Per-checkpoint evaluations and the baseline.
    let mut eval_names: Vec<String> = Vec::new();
    if runs_dir.exists() {
        for entry in fs::read_dir(&runs_dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_prefix("eval_").and_then(|n| n.strip_suffix(".json")) {
                eval_names.push(stem.to_string());
            }
        }
    }
    eval_names.sort();
    for name in &eval_names {
        let parsed: EvalReport =
            serde_json::from_str(&fs::read_to_string(runs_dir.join(format!("eval_{name}.json")))?)?;
        text.push_str(&format!(
            "evaluate {name}: PRAUC {:.5} AUROC {:.5} (λ {}, f_base {})\n",
            parsed.prauc, parsed.auroc, parsed.lambda, parsed.f_base
        ));
        for (subtype, m) in &parsed.subtypes {
            text.push_str(&format!(
                "  {subtype:<9} PRAUC {:.5} AUROC {:.5}\n",
                m.prauc, m.auroc
            ));
        }
        rows.push(ReportRow {
            source: "evaluate".to_string(),
            variant: name.clone(),
            prauc: parsed.prauc,
            auroc: parsed.auroc,
        });
    }
    if !eval_names.is_empty() {
        text.push('\n');
    }

    let baseline_path = runs_dir.join("baseline.json");
    if baseline_path.exists() {
        let parsed: BaselineReport = serde_json::from_str(&fs::read_to_string(&baseline_path)?)?;
        text.push_str(&format!(
            "baseline {}: PRAUC {:.5} AUROC {:.5}\n\n",
            parsed.model, parsed.prauc, parsed.auroc
        ));
        rows.push(ReportRow {
            source: "baseline".to_string(),
            variant: parsed.model.clone(),
            prauc: parsed.prauc,
            auroc: parsed.auroc,
        });
    }

    // Sweep tables, if present.
    let sweep_path = runs_dir.join("sweep.json");
    if sweep_path.exists() {
        let table: SweepTable = serde_json::from_str(&fs::read_to_string(&sweep_path)?)?;
        let mut variants: Vec<Variant> = Vec::new();
        for cell in &table.cells {
            if !variants.contains(&cell.variant) {
                variants.push(cell.variant);
            }
        }
        for variant in variants {
            text.push_str(&format!("sweep {variant} (validation PRAUC after one epoch)\n"));
            text.push_str("lambda,f_base,val_prauc\n");
            for cell in table.cells.iter().filter(|c| c.variant == variant) {
                text.push_str(&format!(
                    "{},{},{}\n",
                    cell.lambda,
                    cell.f_base,
                    cell.prauc.map(|p| format!("{p:.5}")).unwrap_or_else(|| "failed".to_string())
                ));
            }
            if let Some((f_base, lambda)) = table.select(variant) {
                text.push_str(&format!("selected: f_base {f_base}, λ {lambda}\n"));
            }
            text.push('\n');
        }
    }

    // Curve point files from every stored score set.
    let mut score_names: Vec<String> = Vec::new();
    if runs_dir.exists() {
        for entry in fs::read_dir(&runs_dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_prefix("scores_").and_then(|n| n.strip_suffix(".csv")) {
                score_names.push(stem.to_string());
            }
        }
    }
    score_names.sort();
    for name in &score_names {
        let set = read_scores_csv(&runs_dir.join(format!("scores_{name}.csv")))?;
        let roc = roc_curve(&set)?;
        let pr = pr_curve(&set)?;
        ctx.write_artifact(
            &format!("curve/{name}/roc"),
            &format!("runs/curve_{name}_roc.csv"),
            curve_csv(&roc, "fpr,tpr").as_bytes(),
        )?;
        ctx.write_artifact(
            &format!("curve/{name}/pr"),
            &format!("runs/curve_{name}_pr.csv"),
            curve_csv(&pr, "recall,precision").as_bytes(),
        )?;
    }
    if !score_names.is_empty() {
        text.push_str(&format!(
            "curve points written for: {}\n",
            score_names.join(", ")
        ));
    }

    if rows.is_empty() && score_names.is_empty() && !sweep_path.exists() {
        bail!(
            "nothing to report in {}; run train, evaluate, ablate, or sweep first",
            runs_dir.display()
        );
    }

    let mut csv = String::from("source,variant,prauc,auroc\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{:.5},{:.5}\n",
            row.source, row.variant, row.prauc, row.auroc
        ));
    }
    ctx.write_artifact("report/text", "runs/report.txt", text.as_bytes())?;
    ctx.write_artifact("report/table", "runs/report.csv", csv.as_bytes())?;
    print!("{text}");
    println!("report written to {}", ctx.path("runs/report.txt").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusSpec;
    use crate::training::TrainConfig;

    fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            seed: 11,
            out: dir.to_path_buf(),
            corpus: CorpusSpec {
                n_train: 60,
                n_validation: 24,
                n_test: 30,
                ..CorpusSpec::default()
            },
            model: crate::config::ModelSection {
                d_model: Some(16),
                n_layers: Some(1),
                n_heads: Some(2),
                ..Default::default()
            },
            train: TrainConfig { n_epochs: 1, ..TrainConfig::default() },
            ..RunConfig::default()
        }
    }

    fn run_command(config: &RunConfig, command: Command) -> anyhow::Result<()> {
        let mut ctx = RunContext::new(config.clone(), None)?;
        match command {
            Command::Generate => cmd_generate(&mut ctx)?,
            Command::Train { variants } => {
                let variants = parse_variants(variants.as_deref(), &[Variant::Srp])?;
                cmd_train(&mut ctx, &variants)?;
            }
            Command::Evaluate { variants, subtypes } => {
                let variants = parse_variants(variants.as_deref(), &[Variant::Srp])?;
                cmd_evaluate(&mut ctx, &variants, subtypes)?;
            }
            Command::Ablate { variants, seeds } => {
                let defaults = ctx.config.ablate_variants()?;
                let variants = parse_variants(variants.as_deref(), &defaults)?;
                let seeds = seeds.unwrap_or(ctx.config.ablate.n_seeds);
                cmd_ablate(&mut ctx, &variants, seeds)?;
            }
            Command::Sweep { grid } => {
                let grid = named_grid(grid.as_deref(), &ctx.config)?;
                cmd_sweep(&mut ctx, &grid)?;
            }
            Command::Report => cmd_report(&mut ctx)?,
        }
        ctx.finish()
    }

    #[test]
    fn generate_then_train_then_report_produces_manifest_reaching_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        run_command(&config, Command::Generate).unwrap();
        run_command(&config, Command::Train { variants: Some(vec!["srp".to_string()]) }).unwrap();
        run_command(&config, Command::Evaluate { variants: Some(vec!["srp".to_string()]), subtypes: true })
            .unwrap();
        run_command(&config, Command::Report).unwrap();

        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert!(manifest.corpus_sha256.is_some());
        assert!(!manifest.artifacts.is_empty());
        for rel in manifest.artifacts.values() {
            assert!(dir.path().join(rel).exists(), "missing artifact {rel}");
        }
    }

    #[test]
    fn rerunning_generate_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        run_command(&config, Command::Generate).unwrap();
        let first = fs::read(dir.path().join(CORPUS_FILE)).unwrap();
        let first_manifest = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        run_command(&config, Command::Generate).unwrap();
        assert_eq!(first, fs::read(dir.path().join(CORPUS_FILE)).unwrap());
        assert_eq!(first_manifest, fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
    }

    #[test]
    fn evaluate_without_checkpoint_names_the_missing_step() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        run_command(&config, Command::Generate).unwrap();
        let err = run_command(
            &config,
            Command::Evaluate { variants: Some(vec!["srp".to_string()]), subtypes: false },
        )
        .unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn train_without_corpus_names_the_missing_step() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let err = run_command(&config, Command::Train { variants: None }).unwrap_err();
        assert!(err.to_string().contains("generate"), "{err}");
    }

    #[test]
    fn unknown_variant_and_unknown_grid_fail_with_names() {
        let err = parse_variants(Some(&["srq".to_string()]), &[]).unwrap_err();
        assert!(err.to_string().contains("srq"), "{err}");
        let err = named_grid(Some("huge"), &RunConfig::default()).unwrap_err();
        assert!(err.to_string().contains("huge"), "{err}");
    }

    #[test]
    fn smoke_grid_is_a_subset_of_the_default_grid() {
        let config = RunConfig::default();
        let smoke = named_grid(Some("smoke"), &config).unwrap();
        let default = named_grid(Some("default"), &config).unwrap();
        assert_eq!(default.lambdas, vec![0.01, 0.1]);
        assert_eq!(default.f_bases.len(), 7);
        for f in &smoke.f_bases {
            assert!(default.f_bases.contains(f));
        }
        for l in &smoke.lambdas {
            assert!(default.lambdas.contains(l));
        }
    }

    #[test]
    fn cli_parses_the_documented_flags() {
        let cli = Cli::try_parse_from([
            "fraudformer",
            "--seed",
            "9",
            "--out",
            "/tmp/x",
            "--preset",
            "desk",
            "ablate",
            "--variants",
            "vanilla,srp",
            "--seeds",
            "3",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(9));
        match cli.command {
            Command::Ablate { variants, seeds } => {
                assert_eq!(variants, Some(vec!["vanilla".to_string(), "srp".to_string()]));
                assert_eq!(seeds, Some(3));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["fraudformer", "--bogus", "generate"]).is_err());
        assert!(Cli::try_parse_from(["fraudformer", "--preset", "tablet", "generate"]).is_err());
    }
}
