//! The full classifier: token + column embeddings, learned positional table
//! and gained time encoding combined into the first hidden state, pre-norm
//! causal transformer blocks, last-token readout, and a linear fraud head.
//! All ablation variants differ only in `EncoderConfig` flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, AttnParams, Tape, Var};
use crate::time_encoding::{encode_time, TimeFamily};
use crate::tokenizer::{TimeScheme, TokenizedSequence, PAD_ID};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: TimeFamily,
    pub scheme: TimeScheme,
    pub positional_enabled: bool,
    pub ln_enabled: bool,
    pub lambda: f64,
    pub f_base: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            family: TimeFamily::Sinusoidal,
            scheme: TimeScheme::RelativeEvent,
            positional_enabled: true,
            ln_enabled: true,
            lambda: 0.01,
            f_base: 1e7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub l_max: usize,
    pub vocab_size: usize,
    pub n_columns: usize,
    pub encoder: EncoderConfig,
    pub tie_lm_head: bool,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, n_columns: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            l_max: 128,
            vocab_size,
            n_columns,
            encoder: EncoderConfig::default(),
            tie_lm_head: true,
        }
    }

    pub fn paper(vocab_size: usize, n_columns: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            l_max: 1024,
            vocab_size,
            n_columns,
            encoder: EncoderConfig::default(),
            tie_lm_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::config("d_model", "must be positive and even"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be positive"));
        }
        if self.l_max == 0 {
            return Err(Error::config("l_max", "must be positive"));
        }
        if self.vocab_size <= PAD_ID + 1 {
            return Err(Error::config("vocab_size", "must cover the special tokens"));
        }
        if self.n_columns == 0 {
            return Err(Error::config("n_columns", "must be positive"));
        }
        if self.encoder.family != TimeFamily::Disabled && self.encoder.lambda <= 0.0 {
            return Err(Error::config(
                "lambda",
                "must be positive when a time encoder is enabled",
            ));
        }
        if self.encoder.family != TimeFamily::Disabled && self.encoder.f_base <= 0.0 {
            return Err(Error::config("f_base", "must be positive"));
        }
        Ok(())
    }

    /// Analytic parameter count; audited against the instantiated tensors.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ff = 4 * d;
        let embeddings = self.vocab_size * d + (self.n_columns + 1) * d + self.l_max * d;
        let time_ln = 2 * d;
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d);
        let final_ln = 2 * d;
        let head = d + 1;
        let lm = if self.tie_lm_head { 0 } else { self.vocab_size * d };
        embeddings + time_ln + self.n_layers * block + final_ln + head + lm
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The eleven ablation arms. Letters: S/R sinusoidal or rotary encoder,
/// A/R absolute or relative (event-level) scheme, P learned positional
/// table present; WOL drops the time-embedding LayerNorm from SRP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Nte,
    Sa,
    Sap,
    Sr,
    Srp,
    Ra,
    Rap,
    Rr,
    Rrp,
    SrpWol,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Vanilla,
        Variant::Nte,
        Variant::Sa,
        Variant::Sap,
        Variant::Sr,
        Variant::Srp,
        Variant::Ra,
        Variant::Rap,
        Variant::Rr,
        Variant::Rrp,
        Variant::SrpWol,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Nte => "nte",
            Variant::Sa => "sa",
            Variant::Sap => "sap",
            Variant::Sr => "sr",
            Variant::Srp => "srp",
            Variant::Ra => "ra",
            Variant::Rap => "rap",
            Variant::Rr => "rr",
            Variant::Rrp => "rrp",
            Variant::SrpWol => "srp_wol",
        }
    }

    pub fn encoder_config(self, lambda: f64, f_base: f64) -> EncoderConfig {
        let (family, scheme, positional, ln) = match self {
            Variant::Vanilla => (TimeFamily::Disabled, TimeScheme::RelativeEvent, false, true),
            Variant::Nte => (TimeFamily::Disabled, TimeScheme::RelativeEvent, true, true),
            Variant::Sa => (TimeFamily::Sinusoidal, TimeScheme::Absolute, false, true),
            Variant::Sap => (TimeFamily::Sinusoidal, TimeScheme::Absolute, true, true),
            Variant::Sr => (TimeFamily::Sinusoidal, TimeScheme::RelativeEvent, false, true),
            Variant::Srp => (TimeFamily::Sinusoidal, TimeScheme::RelativeEvent, true, true),
            Variant::Ra => (TimeFamily::Rotary, TimeScheme::Absolute, false, true),
            Variant::Rap => (TimeFamily::Rotary, TimeScheme::Absolute, true, true),
            Variant::Rr => (TimeFamily::Rotary, TimeScheme::RelativeEvent, false, true),
            Variant::Rrp => (TimeFamily::Rotary, TimeScheme::RelativeEvent, true, true),
            Variant::SrpWol => (TimeFamily::Sinusoidal, TimeScheme::RelativeEvent, true, false),
        };
        EncoderConfig {
            family,
            scheme,
            positional_enabled: positional,
            ln_enabled: ln,
            lambda,
            f_base,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm || (norm == "srp/wol" && *v == Variant::SrpWol))
            .ok_or_else(|| Error::config("variant", format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct AttnTensors {
    pub wq: Rc<Array2<f64>>,
    pub bq: Rc<Array2<f64>>,
    pub wk: Rc<Array2<f64>>,
    pub bk: Rc<Array2<f64>>,
    pub wv: Rc<Array2<f64>>,
    pub bv: Rc<Array2<f64>>,
    pub wo: Rc<Array2<f64>>,
    pub bo: Rc<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct BlockTensors {
    pub ln1_tau: Rc<Array2<f64>>,
    pub ln1_beta: Rc<Array2<f64>>,
    pub attn: AttnTensors,
    pub ln2_tau: Rc<Array2<f64>>,
    pub ln2_beta: Rc<Array2<f64>>,
    pub w_fc: Rc<Array2<f64>>,
    pub b_fc: Rc<Array2<f64>>,
    pub w_proj: Rc<Array2<f64>>,
    pub b_proj: Rc<Array2<f64>>,
}

/// All tensors exist for every variant so a seed yields identical
/// initial weights regardless of encoder flags.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub w_tok: Rc<Array2<f64>>,
    /// One row per feature column plus the PAD column.
    pub w_col: Rc<Array2<f64>>,
    pub emb_pos: Rc<Array2<f64>>,
    pub time_tau: Rc<Array2<f64>>,
    pub time_beta: Rc<Array2<f64>>,
    pub blocks: Vec<BlockTensors>,
    pub lnf_tau: Rc<Array2<f64>>,
    pub lnf_beta: Rc<Array2<f64>>,
    pub w_head: Rc<Array2<f64>>,
    pub b_head: Rc<Array2<f64>>,
    /// Separate output vocabulary matrix, only when the head is untied.
    pub w_lm: Option<Rc<Array2<f64>>>,
}

fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Rc<Array2<f64>> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Rc::new(Array2::from_shape_vec((rows, cols), data).expect("shape matches"))
}

fn zeros(rows: usize, cols: usize) -> Rc<Array2<f64>> {
    Rc::new(Array2::zeros((rows, cols)))
}

fn ones(rows: usize, cols: usize) -> Rc<Array2<f64>> {
    Rc::new(Array2::ones((rows, cols)))
}

impl ModelParams {
    /// Gaussian std 0.02 tables and projections, zero biases, identity
    /// LayerNorm affines. The draw order is fixed so encoder flags do not
    /// shift the stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let ff = 4 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_tok = gauss(&mut rng, config.vocab_size, d);
        let w_col = gauss(&mut rng, config.n_columns + 1, d);
        let emb_pos = gauss(&mut rng, config.l_max, d);
        let time_tau = ones(1, d);
        let time_beta = zeros(1, d);
        let blocks = (0..config.n_layers)
            .map(|_| BlockTensors {
                ln1_tau: ones(1, d),
                ln1_beta: zeros(1, d),
                attn: AttnTensors {
                    wq: gauss(&mut rng, d, d),
                    bq: zeros(1, d),
                    wk: gauss(&mut rng, d, d),
                    bk: zeros(1, d),
                    wv: gauss(&mut rng, d, d),
                    bv: zeros(1, d),
                    wo: gauss(&mut rng, d, d),
                    bo: zeros(1, d),
                },
                ln2_tau: ones(1, d),
                ln2_beta: zeros(1, d),
                w_fc: gauss(&mut rng, d, ff),
                b_fc: zeros(1, ff),
                w_proj: gauss(&mut rng, ff, d),
                b_proj: zeros(1, d),
            })
            .collect();
        let lnf_tau = ones(1, d);
        let lnf_beta = zeros(1, d);
        let w_head = gauss(&mut rng, d, 1);
        let b_head = zeros(1, 1);
        let w_lm = if config.tie_lm_head {
            None
        } else {
            Some(gauss(&mut rng, config.vocab_size, d))
        };
        ModelParams {
            w_tok,
            w_col,
            emb_pos,
            time_tau,
            time_beta,
            blocks,
            lnf_tau,
            lnf_beta,
            w_head,
            b_head,
            w_lm,
        }
    }

    /// The output vocabulary matrix: W_tok itself when tied.
    pub fn lm_head_weight(&self) -> &Rc<Array2<f64>> {
        self.w_lm.as_ref().unwrap_or(&self.w_tok)
    }

    pub fn named(&self) -> Vec<(String, &Rc<Array2<f64>>)> {
        let mut out: Vec<(String, &Rc<Array2<f64>>)> = vec![
            ("w_tok".into(), &self.w_tok),
            ("w_col".into(), &self.w_col),
            ("emb_pos".into(), &self.emb_pos),
            ("time_tau".into(), &self.time_tau),
            ("time_beta".into(), &self.time_beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1_tau"), &b.ln1_tau));
            out.push((format!("block{i}.ln1_beta"), &b.ln1_beta));
            out.push((format!("block{i}.attn.wq"), &b.attn.wq));
            out.push((format!("block{i}.attn.bq"), &b.attn.bq));
            out.push((format!("block{i}.attn.wk"), &b.attn.wk));
            out.push((format!("block{i}.attn.bk"), &b.attn.bk));
            out.push((format!("block{i}.attn.wv"), &b.attn.wv));
            out.push((format!("block{i}.attn.bv"), &b.attn.bv));
            out.push((format!("block{i}.attn.wo"), &b.attn.wo));
            out.push((format!("block{i}.attn.bo"), &b.attn.bo));
            out.push((format!("block{i}.ln2_tau"), &b.ln2_tau));
            out.push((format!("block{i}.ln2_beta"), &b.ln2_beta));
            out.push((format!("block{i}.w_fc"), &b.w_fc));
            out.push((format!("block{i}.b_fc"), &b.b_fc));
            out.push((format!("block{i}.w_proj"), &b.w_proj));
            out.push((format!("block{i}.b_proj"), &b.b_proj));
        }
        out.push(("lnf_tau".into(), &self.lnf_tau));
        out.push(("lnf_beta".into(), &self.lnf_beta));
        out.push(("w_head".into(), &self.w_head));
        out.push(("b_head".into(), &self.b_head));
        if let Some(w) = &self.w_lm {
            out.push(("w_lm".into(), w));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Rc<Array2<f64>>)> {
        let mut out: Vec<(String, &mut Rc<Array2<f64>>)> = vec![
            ("w_tok".into(), &mut self.w_tok),
            ("w_col".into(), &mut self.w_col),
            ("emb_pos".into(), &mut self.emb_pos),
            ("time_tau".into(), &mut self.time_tau),
            ("time_beta".into(), &mut self.time_beta),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1_tau"), &mut b.ln1_tau));
            out.push((format!("block{i}.ln1_beta"), &mut b.ln1_beta));
            out.push((format!("block{i}.attn.wq"), &mut b.attn.wq));
            out.push((format!("block{i}.attn.bq"), &mut b.attn.bq));
            out.push((format!("block{i}.attn.wk"), &mut b.attn.wk));
            out.push((format!("block{i}.attn.bk"), &mut b.attn.bk));
            out.push((format!("block{i}.attn.wv"), &mut b.attn.wv));
            out.push((format!("block{i}.attn.bv"), &mut b.attn.bv));
            out.push((format!("block{i}.attn.wo"), &mut b.attn.wo));
            out.push((format!("block{i}.attn.bo"), &mut b.attn.bo));
            out.push((format!("block{i}.ln2_tau"), &mut b.ln2_tau));
            out.push((format!("block{i}.ln2_beta"), &mut b.ln2_beta));
            out.push((format!("block{i}.w_fc"), &mut b.w_fc));
            out.push((format!("block{i}.b_fc"), &mut b.b_fc));
            out.push((format!("block{i}.w_proj"), &mut b.w_proj));
            out.push((format!("block{i}.b_proj"), &mut b.b_proj));
        }
        out.push(("lnf_tau".into(), &mut self.lnf_tau));
        out.push(("lnf_beta".into(), &mut self.lnf_beta));
        out.push(("w_head".into(), &mut self.w_head));
        out.push(("b_head".into(), &mut self.b_head));
        if let Some(w) = &mut self.w_lm {
            out.push(("w_lm".into(), w));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

struct BlockVars {
    ln1_tau: Var,
    ln1_beta: Var,
    attn: AttnParams,
    ln2_tau: Var,
    ln2_beta: Var,
    w_fc: Var,
    b_fc: Var,
    w_proj: Var,
    b_proj: Var,
}

struct ForwardVars {
    w_tok: Var,
    w_col: Var,
    emb_pos: Var,
    time_tau: Var,
    time_beta: Var,
    blocks: Vec<BlockVars>,
    lnf_tau: Var,
    lnf_beta: Var,
    w_head: Var,
    b_head: Var,
    lambda: Option<Var>,
}

fn register(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
) -> (ForwardVars, Vec<(String, Var)>) {
    let mut named = Vec::new();
    fn reg(
        tape: &mut Tape,
        named: &mut Vec<(String, Var)>,
        name: String,
        t: &Rc<Array2<f64>>,
    ) -> Var {
        let v = tape.param(Rc::clone(t));
        named.push((name, v));
        v
    }
    let w_tok = reg(tape, &mut named, "w_tok".into(), &params.w_tok);
    let w_col = reg(tape, &mut named, "w_col".into(), &params.w_col);
    let emb_pos = reg(tape, &mut named, "emb_pos".into(), &params.emb_pos);
    let time_tau = reg(tape, &mut named, "time_tau".into(), &params.time_tau);
    let time_beta = reg(tape, &mut named, "time_beta".into(), &params.time_beta);
    let blocks = params
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BlockVars {
            ln1_tau: reg(tape, &mut named, format!("block{i}.ln1_tau"), &b.ln1_tau),
            ln1_beta: reg(tape, &mut named, format!("block{i}.ln1_beta"), &b.ln1_beta),
            attn: AttnParams {
                wq: reg(tape, &mut named, format!("block{i}.attn.wq"), &b.attn.wq),
                bq: reg(tape, &mut named, format!("block{i}.attn.bq"), &b.attn.bq),
                wk: reg(tape, &mut named, format!("block{i}.attn.wk"), &b.attn.wk),
                bk: reg(tape, &mut named, format!("block{i}.attn.bk"), &b.attn.bk),
                wv: reg(tape, &mut named, format!("block{i}.attn.wv"), &b.attn.wv),
                bv: reg(tape, &mut named, format!("block{i}.attn.bv"), &b.attn.bv),
                wo: reg(tape, &mut named, format!("block{i}.attn.wo"), &b.attn.wo),
                bo: reg(tape, &mut named, format!("block{i}.attn.bo"), &b.attn.bo),
            },
            ln2_tau: reg(tape, &mut named, format!("block{i}.ln2_tau"), &b.ln2_tau),
            ln2_beta: reg(tape, &mut named, format!("block{i}.ln2_beta"), &b.ln2_beta),
            w_fc: reg(tape, &mut named, format!("block{i}.w_fc"), &b.w_fc),
            b_fc: reg(tape, &mut named, format!("block{i}.b_fc"), &b.b_fc),
            w_proj: reg(tape, &mut named, format!("block{i}.w_proj"), &b.w_proj),
            b_proj: reg(tape, &mut named, format!("block{i}.b_proj"), &b.b_proj),
        })
        .collect();
    let lnf_tau = reg(tape, &mut named, "lnf_tau".into(), &params.lnf_tau);
    let lnf_beta = reg(tape, &mut named, "lnf_beta".into(), &params.lnf_beta);
    let w_head = reg(tape, &mut named, "w_head".into(), &params.w_head);
    let b_head = reg(tape, &mut named, "b_head".into(), &params.b_head);
    let time_term = config.encoder.family != TimeFamily::Disabled && config.encoder.lambda != 0.0;
    let vars = ForwardVars {
        w_tok,
        w_col,
        emb_pos,
        time_tau,
        time_beta,
        blocks,
        lnf_tau,
        lnf_beta,
        w_head,
        b_head,
        lambda: time_term.then(|| tape.param_owned(array![[config.encoder.lambda]])),
    };
    (vars, named)
}

/// Rows of the configured time encoding for every token; PAD rows use id 0.
fn time_matrix(seq: &TokenizedSequence, config: &ModelConfig) -> Result<Array2<f64>> {
    if seq.time_ids.len() != seq.len() {
        return Err(Error::Data(format!(
            "time ids not derived: {} ids for {} tokens",
            seq.time_ids.len(),
            seq.len()
        )));
    }
    let d = config.d_model;
    let mut e = Array2::zeros((seq.len(), d));
    for (t, &id) in seq.time_ids.iter().enumerate() {
        let row = encode_time(config.encoder.family, id, d, config.encoder.f_base)?;
        for (j, v) in row.into_iter().enumerate() {
            e[[t, j]] = v;
        }
    }
    Ok(e)
}

fn build_h_bar(
    tape: &mut Tape,
    vars: &ForwardVars,
    seq: &TokenizedSequence,
    config: &ModelConfig,
) -> Result<Var> {
    let x = tape.gather_rows(vars.w_tok, &seq.token_ids)?;
    let c = tape.gather_rows(vars.w_col, &seq.column_ids)?;
    let mut h = tape.add(x, c);
    if config.encoder.positional_enabled {
        let p = tape.gather_rows(vars.emb_pos, &seq.position_ids)?;
        h = tape.add(h, p);
    }
    if let Some(lambda) = vars.lambda {
        let e = time_matrix(seq, config)?;
        let e = tape.constant(e);
        let e_hat = if config.encoder.ln_enabled {
            tape.layer_norm_rows(e, vars.time_tau, vars.time_beta, LN_EPS)
        } else {
            e
        };
        let gained = tape.scale_by_var(e_hat, lambda);
        h = tape.add(h, gained);
    }
    Ok(h)
}

fn build_logit(
    tape: &mut Tape,
    vars: &ForwardVars,
    seq: &TokenizedSequence,
    config: &ModelConfig,
    n_real: usize,
    readout: usize,
) -> Result<Var> {
    let mut h = build_h_bar(tape, vars, seq, config)?;
    let mask = nn::causal_pad_mask(seq.len(), n_real);
    for block in &vars.blocks {
        let a = tape.layer_norm_rows(h, block.ln1_tau, block.ln1_beta, LN_EPS);
        let attn = nn::causal_self_attention(tape, a, &block.attn, config.n_heads, &mask)?;
        h = tape.add(h, attn);
        let m = tape.layer_norm_rows(h, block.ln2_tau, block.ln2_beta, LN_EPS);
        let fc = tape.matmul(m, block.w_fc);
        let fc = tape.add_bias(fc, block.b_fc);
        let act = tape.gelu(fc);
        let proj = tape.matmul(act, block.w_proj);
        let proj = tape.add_bias(proj, block.b_proj);
        h = tape.add(h, proj);
    }
    let hf = tape.layer_norm_rows(h, vars.lnf_tau, vars.lnf_beta, LN_EPS);
    let r = tape.slice_rows(hf, readout, 1);
    let z = tape.matmul(r, vars.w_head);
    Ok(tape.add_bias(z, vars.b_head))
}

/// Count of leading non-PAD tokens; PAD must form a suffix.
fn real_prefix_len(seq: &TokenizedSequence) -> Result<usize> {
    let n_real = seq
        .token_ids
        .iter()
        .position(|&t| t == PAD_ID)
        .unwrap_or(seq.len());
    if n_real == 0 {
        return Err(Error::Data("sequence holds no real tokens".into()));
    }
    if seq.token_ids[n_real..].iter().any(|&t| t != PAD_ID) {
        return Err(Error::Data("PAD tokens must form a suffix".into()));
    }
    Ok(n_real)
}

/// A built computation graph for one sequence. The caller may extend the
/// tape (loss nodes) and run backward.
pub struct Forward {
    pub tape: Tape,
    pub logit: Var,
    /// Present when the time term is active; lets the time gain be
    /// gradient-checked like any tensor.
    pub lambda: Option<Var>,
    /// Tape handles of every registered tensor, in `ModelParams::named`
    /// order, for routing gradients back by name.
    pub param_vars: Vec<(String, Var)>,
}

fn forward_at(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &ModelConfig,
    readout: usize,
) -> Result<Forward> {
    if seq.is_empty() {
        return Err(Error::Data("empty sequence".into()));
    }
    if seq.len() > config.l_max {
        return Err(Error::Bounds {
            what: "sequence length".into(),
            index: seq.len(),
            limit: config.l_max,
        });
    }
    let n_real = real_prefix_len(seq)?;
    let mut tape = Tape::new();
    let (vars, param_vars) = register(&mut tape, params, config);
    let logit = build_logit(&mut tape, &vars, seq, config, n_real, readout)?;
    Ok(Forward {
        tape,
        logit,
        lambda: vars.lambda,
        param_vars,
    })
}

/// Runs the model on one tokenized sequence; the logit reads out at the
/// last non-PAD position.
pub fn forward(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Forward> {
    let n_real = real_prefix_len(seq)?;
    forward_at(seq, params, config, n_real - 1)
}

pub fn forward_logit(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64> {
    let fwd = forward(seq, params, config)?;
    Ok(fwd.tape.value(fwd.logit)[[0, 0]])
}

/// h_t = W_tok[x_t] + W_col[c_t].
pub fn embed_inputs(seq: &TokenizedSequence, params: &ModelParams) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let w_tok = tape.param(Rc::clone(&params.w_tok));
    let w_col = tape.param(Rc::clone(&params.w_col));
    let x = tape.gather_rows(w_tok, &seq.token_ids)?;
    let c = tape.gather_rows(w_col, &seq.column_ids)?;
    let h = tape.add(x, c);
    Ok(tape.value(h).clone())
}

/// h̄_t = h_t + [positional] p_t + λ ê_t, with the time term absent when the
/// family is disabled or λ = 0.
pub fn combine_signals(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let (vars, _) = register(&mut tape, params, config);
    let h = build_h_bar(&mut tape, &vars, seq, config)?;
    Ok(tape.value(h).clone())
}

#[derive(Serialize, Deserialize)]
struct TensorData {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config_hash: String,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorData>,
}

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let tensors = params
        .named()
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                TensorData {
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config_hash: config.config_hash(),
        config: config.clone(),
        tensors,
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema("checkpoint lacks a version field".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::CheckpointVersion {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    if file.config_hash != file.config.config_hash() {
        return Err(Error::Schema("checkpoint config hash mismatch".into()));
    }
    let mut params = ModelParams::init(&file.config, 0);
    let mut tensors = file.tensors;
    for (name, slot) in params.named_mut() {
        let data = tensors.remove(&name).ok_or_else(|| {
            Error::Schema(format!("checkpoint misses tensor '{name}'"))
        })?;
        if data.shape != [slot.nrows(), slot.ncols()] {
            return Err(Error::Schema(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                data.shape,
                [slot.nrows(), slot.ncols()]
            )));
        }
        let arr = Array2::from_shape_vec((data.shape[0], data.shape[1]), data.data)
            .map_err(|e| Error::Schema(format!("tensor '{name}': {e}")))?;
        *slot = Rc::new(arr);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Schema(format!("checkpoint has unknown tensor '{extra}'")));
    }
    Ok((params, file.config))
}
