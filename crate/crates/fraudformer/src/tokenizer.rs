//! Per-column tokenization of account sequences: category vocabularies with
//! rare-value collapsing, quantile binning for numericals, column and
//! position ids, and time-id derivation under the absolute and relative
//! schemes.
//!
//! Token id space: 0 is PAD, 1 is the reserved sequence-summary token, then
//! one contiguous block per column (categoricals first, then numericals) so
//! identical surface strings in different columns get distinct ids. Each
//! categorical block starts with that column's UNK slot, which doubles as
//! the rare-value bucket.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AccountSequence, FraudSubtype, Split};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const SEQ_SUMMARY_ID: usize = 1;
pub const N_SPECIALS: usize = 2;

/// How a token's time-id is derived from its event timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Event timestamp rebased to the corpus origin and clipped to the cap.
    Absolute,
    /// Gap to the previous token's event; tokens inside one event get 0.
    RelativeToken,
    /// Gap between this event and the previous event, shared by all of the
    /// event's tokens.
    RelativeEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnTokens {
    /// `map` sends kept surface strings to local ids starting at 1; local 0
    /// is the UNK/rare bucket.
    Categorical { map: BTreeMap<String, usize>, n_tokens: usize },
    Numerical { n_bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    /// First global token id of this column's block.
    pub base_id: usize,
    pub tokens: ColumnTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub columns: Vec<Column>,
    /// Total token count V including the two specials.
    pub v_total: usize,
    /// Minimum train timestamp; absolute time-ids are rebased to it.
    pub epoch_origin_ms: i64,
    /// Clip bound for absolute time-ids.
    pub id_cap_ms: i64,
}

/// Per numerical column: strictly increasing, left-closed bin edges, in the
/// same order as the vocabulary's numerical columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningRule {
    pub edges: Vec<(String, Vec<f64>)>,
}

impl BinningRule {
    /// Left-closed lookup: bin i covers [edge_{i-1}, edge_i).
    pub fn bin(edges: &[f64], x: f64) -> usize {
        edges.partition_point(|&e| e <= x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_vocab: usize,
    /// Categories seen fewer than this many times collapse to the column's
    /// UNK/rare bucket.
    pub rare_threshold: usize,
    /// Smallest quantile bin count whose largest bin mass is at or below
    /// this threshold is chosen per numerical column.
    pub bin_mass_threshold: f64,
    pub max_bins: usize,
    pub id_cap_ms: i64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_vocab: 512,
            rare_threshold: 2,
            bin_mass_threshold: 0.26,
            max_bins: 16,
            id_cap_ms: 1 << 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Pad,
    SeqSummary,
    Category(String),
    Rare,
    Bin(usize),
}

impl Vocabulary {
    /// Number of feature columns C. Column ids run 0..C-1; the PAD column id
    /// is C.
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn pad_column_id(&self) -> usize {
        self.columns.len()
    }

    pub fn decode(&self, column_id: usize, token_id: usize) -> Result<Decoded> {
        if token_id == PAD_ID {
            return Ok(Decoded::Pad);
        }
        if token_id == SEQ_SUMMARY_ID {
            return Ok(Decoded::SeqSummary);
        }
        let col = self.columns.get(column_id).ok_or(Error::Bounds {
            what: "column id".into(),
            index: column_id,
            limit: self.columns.len(),
        })?;
        let local = token_id.checked_sub(col.base_id).ok_or_else(|| {
            Error::Schema(format!("token {token_id} is below column '{}' block", col.name))
        })?;
        match &col.tokens {
            ColumnTokens::Categorical { map, n_tokens } => {
                if local >= *n_tokens {
                    return Err(Error::Bounds {
                        what: format!("token in column '{}'", col.name),
                        index: token_id,
                        limit: col.base_id + n_tokens,
                    });
                }
                if local == 0 {
                    return Ok(Decoded::Rare);
                }
                let surface = map
                    .iter()
                    .find(|(_, &id)| id == local)
                    .map(|(s, _)| s.clone())
                    .expect("local id came from this map");
                Ok(Decoded::Category(surface))
            }
            ColumnTokens::Numerical { n_bins } => {
                if local >= *n_bins {
                    return Err(Error::Bounds {
                        what: format!("token in column '{}'", col.name),
                        index: token_id,
                        limit: col.base_id + n_bins,
                    });
                }
                Ok(Decoded::Bin(local))
            }
        }
    }
}

/// Tokenized view of one account sequence. `time_ids` starts empty; it is
/// scheme-dependent and filled from `derive_time_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub token_ids: Vec<usize>,
    pub column_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub event_index: Vec<usize>,
    pub event_ts_ms: Vec<i64>,
    /// Gap between the token's event and the previous event (0 for the first
    /// event), kept even when truncation drops that previous event.
    pub event_gap_ms: Vec<i64>,
    pub time_ids: Vec<i64>,
    pub label: bool,
    pub subtype: FraudSubtype,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

fn quantile_edges(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut edges = Vec::new();
    for j in 1..k {
        let idx = (j * n / k).min(n - 1);
        let e = sorted[idx];
        if edges.last().map_or(true, |&prev| e > prev) {
            edges.push(e);
        }
    }
    edges
}

fn max_bin_mass(sorted: &[f64], edges: &[f64]) -> f64 {
    let n = sorted.len();
    let mut prev = 0;
    let mut worst = 0usize;
    for &e in edges {
        let at = sorted.partition_point(|&v| v < e);
        worst = worst.max(at - prev);
        prev = at;
    }
    worst.max(n - prev) as f64 / n as f64
}

/// Smallest bin count whose largest bin mass is at or below the threshold;
/// if none qualifies (heavy ties), the count minimizing that mass.
fn choose_bins(sorted: &[f64], opts: &FitOptions) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 1..=opts.max_bins {
        let edges = quantile_edges(sorted, k);
        let mass = max_bin_mass(sorted, &edges);
        if mass <= opts.bin_mass_threshold {
            return edges;
        }
        if best.as_ref().map_or(true, |(m, _)| mass < *m) {
            best = Some((mass, edges));
        }
    }
    best.expect("max_bins >= 1").1
}

/// Builds the vocabulary and binning rule from the Train split only.
pub fn fit_vocabulary(
    seqs: &[AccountSequence],
    opts: &FitOptions,
) -> Result<(Vocabulary, BinningRule)> {
    if opts.max_bins == 0 {
        return Err(Error::config("max_bins", "must be at least 1"));
    }
    let train: Vec<&AccountSequence> = seqs.iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Data("no Train sequences to fit on".into()));
    }

    let first = &train[0].events[0];
    let cat_names: Vec<String> = first.categorical.iter().map(|(n, _)| n.clone()).collect();
    let num_names: Vec<String> = first.numerical.iter().map(|(n, _)| n.clone()).collect();

    let mut counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); cat_names.len()];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); num_names.len()];
    let mut origin = i64::MAX;
    for seq in &train {
        for event in &seq.events {
            origin = origin.min(event.timestamp_ms);
            if event.categorical.len() != cat_names.len()
                || event.numerical.len() != num_names.len()
            {
                return Err(Error::Schema(format!(
                    "event in {} has a different column set",
                    seq.account_id
                )));
            }
            for (c, (name, v)) in event.categorical.iter().enumerate() {
                if name != &cat_names[c] {
                    return Err(Error::Schema(format!(
                        "column '{name}' out of order in {}",
                        seq.account_id
                    )));
                }
                *counts[c].entry(v.clone()).or_insert(0) += 1;
            }
            for (c, (name, v)) in event.numerical.iter().enumerate() {
                if name != &num_names[c] {
                    return Err(Error::Schema(format!(
                        "column '{name}' out of order in {}",
                        seq.account_id
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite value in column '{name}' of {}",
                        seq.account_id
                    )));
                }
                values[c].push(*v);
            }
        }
    }

    // Kept categories in lexicographic order for stable, hashable artifacts.
    let mut kept: Vec<Vec<(String, usize)>> = counts
        .iter()
        .map(|m| {
            m.iter()
                .filter(|(_, &c)| c >= opts.rare_threshold)
                .map(|(s, &c)| (s.clone(), c))
                .collect()
        })
        .collect();

    let mut bin_edges: Vec<Vec<f64>> = values
        .iter_mut()
        .map(|v| {
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            choose_bins(v, opts)
        })
        .collect();

    let total = |kept: &[Vec<(String, usize)>], edges: &[Vec<f64>]| {
        N_SPECIALS
            + kept.iter().map(|k| 1 + k.len()).sum::<usize>()
            + edges.iter().map(|e| e.len() + 1).sum::<usize>()
    };

    let floor = N_SPECIALS + cat_names.len() + num_names.len();
    if opts.max_vocab < floor {
        return Err(Error::config(
            "max_vocab",
            format!(
                "{} cannot hold the specials plus one token per column (need {floor})",
                opts.max_vocab
            ),
        ));
    }
    // Shed the least frequent categories, then surplus bins, until V fits.
    while total(&kept, &bin_edges) > opts.max_vocab {
        let victim = kept
            .iter()
            .enumerate()
            .flat_map(|(c, ks)| ks.iter().map(move |(s, cnt)| (*cnt, c, s.clone())))
            .min();
        if let Some((_, c, s)) = victim {
            kept[c].retain(|(k, _)| k != &s);
            continue;
        }
        let widest = bin_edges
            .iter()
            .enumerate()
            .max_by_key(|(_, e)| e.len())
            .map(|(c, _)| c)
            .expect("floor check guarantees a numerical column here");
        bin_edges[widest].pop();
    }

    let mut columns = Vec::with_capacity(cat_names.len() + num_names.len());
    let mut next_id = N_SPECIALS;
    for (c, name) in cat_names.iter().enumerate() {
        let mut map = BTreeMap::new();
        for (local, (s, _)) in kept[c].iter().enumerate() {
            map.insert(s.clone(), local + 1);
        }
        let n_tokens = kept[c].len() + 1;
        columns.push(Column {
            name: name.clone(),
            base_id: next_id,
            tokens: ColumnTokens::Categorical { map, n_tokens },
        });
        next_id += n_tokens;
    }
    let mut rule = Vec::with_capacity(num_names.len());
    for (c, name) in num_names.iter().enumerate() {
        let n_bins = bin_edges[c].len() + 1;
        columns.push(Column {
            name: name.clone(),
            base_id: next_id,
            tokens: ColumnTokens::Numerical { n_bins },
        });
        next_id += n_bins;
        rule.push((name.clone(), bin_edges[c].clone()));
    }

    Ok((
        Vocabulary {
            columns,
            v_total: next_id,
            epoch_origin_ms: origin,
            id_cap_ms: opts.id_cap_ms,
        },
        BinningRule { edges: rule },
    ))
}

/// Expands events to one token per column, truncates to the most recent
/// `l_max` tokens, and renumbers positions from 0.
pub fn tokenize(
    seq: &AccountSequence,
    vocab: &Vocabulary,
    bins: &BinningRule,
    l_max: usize,
) -> Result<TokenizedSequence> {
    if l_max == 0 {
        return Err(Error::config("l_max", "must be positive"));
    }
    let n_cat = vocab
        .columns
        .iter()
        .filter(|c| matches!(c.tokens, ColumnTokens::Categorical { .. }))
        .count();

    let mut token_ids = Vec::new();
    let mut column_ids = Vec::new();
    let mut event_index = Vec::new();
    let mut event_ts = Vec::new();
    let mut event_gap = Vec::new();

    let mut prev_ts: Option<i64> = None;
    for (e, event) in seq.events.iter().enumerate() {
        let gap = match prev_ts {
            Some(p) => {
                let g = event.timestamp_ms - p;
                if g < 0 {
                    return Err(Error::Data(format!(
                        "out-of-order timestamps in {} at event {e}",
                        seq.account_id
                    )));
                }
                g
            }
            None => 0,
        };
        prev_ts = Some(event.timestamp_ms);

        for (c, col) in vocab.columns.iter().enumerate() {
            let id = match &col.tokens {
                ColumnTokens::Categorical { map, .. } => {
                    let (name, surface) = event.categorical.get(c).ok_or_else(|| {
                        Error::Schema(format!("event {e} of {} misses column '{}'", seq.account_id, col.name))
                    })?;
                    if name != &col.name {
                        return Err(Error::Schema(format!(
                            "event {e} of {} has column '{name}' where '{}' was expected",
                            seq.account_id, col.name
                        )));
                    }
                    col.base_id + map.get(surface).copied().unwrap_or(0)
                }
                ColumnTokens::Numerical { n_bins } => {
                    let (name, value) = event.numerical.get(c - n_cat).ok_or_else(|| {
                        Error::Schema(format!("event {e} of {} misses column '{}'", seq.account_id, col.name))
                    })?;
                    if name != &col.name {
                        return Err(Error::Schema(format!(
                            "event {e} of {} has column '{name}' where '{}' was expected",
                            seq.account_id, col.name
                        )));
                    }
                    if !value.is_finite() {
                        return Err(Error::Data(format!(
                            "non-finite value in column '{}' of {}",
                            col.name, seq.account_id
                        )));
                    }
                    let (_, edges) = &bins.edges[c - n_cat];
                    let bin = BinningRule::bin(edges, *value).min(n_bins - 1);
                    col.base_id + bin
                }
            };
            token_ids.push(id);
            column_ids.push(c);
            event_index.push(e);
            event_ts.push(event.timestamp_ms);
            event_gap.push(gap);
        }
    }

    let start = token_ids.len().saturating_sub(l_max);
    let token_ids = token_ids.split_off(start);
    let column_ids = column_ids.split_off(start);
    let event_index = event_index.split_off(start);
    let event_ts = event_ts.split_off(start);
    let event_gap = event_gap.split_off(start);
    let position_ids = (0..token_ids.len()).collect();

    Ok(TokenizedSequence {
        token_ids,
        column_ids,
        position_ids,
        event_index,
        event_ts_ms: event_ts,
        event_gap_ms: event_gap,
        time_ids: Vec::new(),
        label: seq.label(),
        subtype: seq.subtype(),
    })
}

/// Scheme-specific time-ids for an already tokenized sequence.
pub fn derive_time_ids(
    seq: &TokenizedSequence,
    scheme: TimeScheme,
    origin_ms: i64,
    id_cap_ms: i64,
) -> Result<Vec<i64>> {
    let n = seq.len();
    let mut ids = Vec::with_capacity(n);
    match scheme {
        TimeScheme::Absolute => {
            for &ts in &seq.event_ts_ms {
                ids.push((ts - origin_ms).clamp(0, id_cap_ms));
            }
        }
        TimeScheme::RelativeToken => {
            for t in 0..n {
                if t == 0 {
                    ids.push(0);
                } else {
                    let gap = seq.event_ts_ms[t] - seq.event_ts_ms[t - 1];
                    if gap < 0 {
                        return Err(Error::Data(format!("negative gap at token {t}")));
                    }
                    ids.push(gap);
                }
            }
        }
        TimeScheme::RelativeEvent => {
            for (t, &gap) in seq.event_gap_ms.iter().enumerate() {
                if gap < 0 {
                    return Err(Error::Data(format!("negative gap at token {t}")));
                }
                ids.push(gap);
            }
        }
    }
    Ok(ids)
}

#[derive(Serialize, Deserialize)]
struct VocabArtifact {
    vocabulary: Vocabulary,
    binning: BinningRule,
}

/// Stable-ordered JSON artifact so identical fits hash identically.
pub fn save_vocabulary(vocab: &Vocabulary, bins: &BinningRule, path: &Path) -> Result<()> {
    let artifact = VocabArtifact {
        vocabulary: vocab.clone(),
        binning: bins.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&artifact)?)?;
    Ok(())
}

pub fn load_vocabulary(path: &Path) -> Result<(Vocabulary, BinningRule)> {
    let text = fs::read_to_string(path)?;
    let artifact: VocabArtifact =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("vocabulary artifact: {e}")))?;
    Ok((artifact.vocabulary, artifact.binning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EventRecord;

    fn seq_from_cats(id: &str, split: Split, cats: &[&str], gap_ms: i64) -> AccountSequence {
        let events = cats
            .iter()
            .enumerate()
            .map(|(i, &v)| EventRecord {
                timestamp_ms: 1000 + i as i64 * gap_ms,
                categorical: vec![("action".into(), v.into())],
                numerical: vec![("amount".into(), 10.0 + i as f64)],
                label: false,
                subtype: FraudSubtype::NonFraud,
            })
            .collect();
        AccountSequence {
            account_id: id.into(),
            events,
            split,
        }
    }

    fn two_column_seq(values: &[(&str, &str)]) -> AccountSequence {
        let events = values
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| EventRecord {
                timestamp_ms: (i as i64 + 1) * 60_000,
                categorical: vec![("col_a".into(), a.into()), ("col_b".into(), b.into())],
                numerical: vec![],
                label: false,
                subtype: FraudSubtype::NonFraud,
            })
            .collect();
        AccountSequence {
            account_id: "acct".into(),
            events,
            split: Split::Train,
        }
    }

    #[test]
    fn rare_category_collapses_to_unk_bucket() {
        let mut cats = vec!["A"; 100];
        cats.push("B");
        let seqs = vec![seq_from_cats("a", Split::Train, &cats, 1000)];
        let opts = FitOptions { rare_threshold: 2, ..FitOptions::default() };
        let (vocab, bins) = fit_vocabulary(&seqs, &opts).unwrap();
        let tok = tokenize(&seqs[0], &vocab, &bins, 512).unwrap();
        // Token 2*100 is event 100's categorical: surface "B", collapsed.
        let b_token = tok.token_ids[200];
        assert_eq!(vocab.decode(0, b_token).unwrap(), Decoded::Rare);
        let a_token = tok.token_ids[0];
        assert_eq!(vocab.decode(0, a_token).unwrap(), Decoded::Category("A".into()));
    }

    #[test]
    fn same_surface_in_two_columns_gets_distinct_ids() {
        let seqs = vec![two_column_seq(&[("true", "true"); 10])];
        let (vocab, bins) = fit_vocabulary(&seqs, &FitOptions::default()).unwrap();
        let tok = tokenize(&seqs[0], &vocab, &bins, 512).unwrap();
        assert_ne!(tok.token_ids[0], tok.token_ids[1]);
        assert_eq!(vocab.decode(0, tok.token_ids[0]).unwrap(), Decoded::Category("true".into()));
        assert_eq!(vocab.decode(1, tok.token_ids[1]).unwrap(), Decoded::Category("true".into()));
    }

    #[test]
    fn uniform_column_gets_quartile_edges() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let events: Vec<EventRecord> = (0..2000)
            .map(|i| EventRecord {
                timestamp_ms: i as i64 * 1000,
                categorical: vec![("c".into(), "x".into())],
                numerical: vec![("u".into(), rng.random::<f64>())],
                label: false,
                subtype: FraudSubtype::NonFraud,
            })
            .collect();
        let seqs = vec![AccountSequence { account_id: "a".into(), events, split: Split::Train }];
        let (_, bins) = fit_vocabulary(&seqs, &FitOptions::default()).unwrap();
        let edges = &bins.edges[0].1;
        assert_eq!(edges.len(), 3, "expected 4 bins, got edges {edges:?}");
        for (e, want) in edges.iter().zip([0.25, 0.5, 0.75]) {
            assert!((e - want).abs() < 0.03, "edge {e} vs {want}");
        }
    }

    #[test]
    fn constant_numerical_column_is_single_token() {
        let events: Vec<EventRecord> = (0..50)
            .map(|i| EventRecord {
                timestamp_ms: i as i64 * 1000,
                categorical: vec![("c".into(), "x".into())],
                numerical: vec![("k".into(), 7.0)],
                label: false,
                subtype: FraudSubtype::NonFraud,
            })
            .collect();
        let seqs = vec![AccountSequence { account_id: "a".into(), events, split: Split::Train }];
        let (vocab, bins) = fit_vocabulary(&seqs, &FitOptions::default()).unwrap();
        assert!(bins.edges[0].1.is_empty());
        match &vocab.columns[1].tokens {
            ColumnTokens::Numerical { n_bins } => assert_eq!(*n_bins, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn column_ids_cycle_in_fixed_order() {
        let seqs = vec![AccountSequence {
            account_id: "a".into(),
            events: (0..2)
                .map(|i| EventRecord {
                    timestamp_ms: i * 1000,
                    categorical: vec![("x".into(), "p".into()), ("y".into(), "q".into())],
                    numerical: vec![("z".into(), 1.0 + i as f64)],
                    label: false,
                    subtype: FraudSubtype::NonFraud,
                })
                .collect(),
            split: Split::Train,
        }];
        let (vocab, bins) = fit_vocabulary(&seqs, &FitOptions::default()).unwrap();
        let tok = tokenize(&seqs[0], &vocab, &bins, 512).unwrap();
        assert_eq!(tok.column_ids, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(tok.position_ids, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(tok.event_index, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn truncation_keeps_most_recent_and_renumbers() {
        let cats: Vec<&str> = (0..20).map(|_| "A").collect();
        let seqs = vec![seq_from_cats("a", Split::Train, &cats, 1000)];
        let (vocab, bins) = fit_vocabulary(&seqs, &FitOptions::default()).unwrap();
        // 20 events x 2 columns = 40 tokens; keep the last 8.
        let tok = tokenize(&seqs[0], &vocab, &bins, 8).unwrap();
        assert_eq!(tok.len(), 8);
        assert_eq!(tok.position_ids, (0..8).collect::<Vec<_>>());
        assert_eq!(tok.event_index, vec![16, 16, 17, 17, 18, 18, 19, 19]);
        // The retained fragment keeps its event's gap.
        assert!(tok.event_gap_ms.iter().all(|&g| g == 1000));
    }

    #[test]
    fn truncation_fragment_keeps_event_gap() {
        // 3 columns so an odd cap splits an event.
        let seqs = vec![AccountSequence {
            account_id: "a".into(),
            events: (0..4)
                .map(|i| EventRecord {
                    timestamp_ms: i * 10_000,
                    categorical: vec![
                        ("x".into(), "p".into()),
                        ("y".into(), "q".into()),
                        ("w".into(), "r".into()),
                    ],
                    numerical: vec![],
                    label: false,
                    subtype: FraudSubtype::NonFraud,
                })
                .collect(),
            split: Split::Train,
        }];
        let (vocab, bins) = fit_vocabulary(&seqs, &FitOptions::default()).unwrap();
        let tok = tokenize(&seqs[0], &vocab, &bins, 5).unwrap();
        assert_eq!(tok.event_index, vec![2, 2, 3, 3, 3]);
        assert_eq!(tok.column_ids, vec![1, 2, 0, 1, 2]);
        assert_eq!(tok.event_gap_ms, vec![10_000; 5]);
        let rel = derive_time_ids(&tok, TimeScheme::RelativeToken, 0, 1 << 40).unwrap();
        assert_eq!(rel, vec![0, 0, 10_000, 0, 0]);
    }

    #[test]
    fn unseen_category_maps_to_column_unk() {
        let train = seq_from_cats("a", Split::Train, &["A", "A", "A"], 1000);
        let (vocab, bins) = fit_vocabulary(&[train], &FitOptions::default()).unwrap();
        let novel = seq_from_cats("b", Split::Test, &["A", "ZZZ"], 1000);
        let tok = tokenize(&novel, &vocab, &bins, 512).unwrap();
        assert_eq!(vocab.decode(0, tok.token_ids[2]).unwrap(), Decoded::Rare);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let train = seq_from_cats("a", Split::Train, &["A", "A"], 1000);
        let (vocab, bins) = fit_vocabulary(&[train], &FitOptions::default()).unwrap();
        let mut bad = seq_from_cats("b", Split::Test, &["A"], 1000);
        bad.events[0].categorical.clear();
        assert!(matches!(
            tokenize(&bad, &vocab, &bins, 512),
            Err(Error::Schema(_))
        ));
    }

    fn fig1_sequence(gap: i64) -> (Vocabulary, BinningRule, TokenizedSequence) {
        // Two events, three categorical columns: tokens T11..T13, T21..T23.
        let seq = AccountSequence {
            account_id: "fig".into(),
            events: vec![
                EventRecord {
                    timestamp_ms: 50_000,
                    categorical: vec![
                        ("c1".into(), "a".into()),
                        ("c2".into(), "b".into()),
                        ("c3".into(), "c".into()),
                    ],
                    numerical: vec![],
                    label: false,
                    subtype: FraudSubtype::NonFraud,
                },
                EventRecord {
                    timestamp_ms: 50_000 + gap,
                    categorical: vec![
                        ("c1".into(), "a".into()),
                        ("c2".into(), "b".into()),
                        ("c3".into(), "c".into()),
                    ],
                    numerical: vec![],
                    label: false,
                    subtype: FraudSubtype::NonFraud,
                },
            ],
            split: Split::Train,
        };
        let (vocab, bins) =
            fit_vocabulary(std::slice::from_ref(&seq), &FitOptions { rare_threshold: 1, ..FitOptions::default() })
                .unwrap();
        let tok = tokenize(&seq, &vocab, &bins, 512).unwrap();
        (vocab, bins, tok)
    }

    #[test]
    fn relative_token_scheme_marks_event_boundaries_only() {
        let gap = 540_000;
        let (_, _, tok) = fig1_sequence(gap);
        let ids = derive_time_ids(&tok, TimeScheme::RelativeToken, 0, 1 << 40).unwrap();
        assert_eq!(ids, vec![0, 0, 0, gap, 0, 0]);
    }

    #[test]
    fn relative_event_scheme_shares_gap_across_event_tokens() {
        let gap = 540_000;
        let (_, _, tok) = fig1_sequence(gap);
        let ids = derive_time_ids(&tok, TimeScheme::RelativeEvent, 0, 1 << 40).unwrap();
        assert_eq!(ids, vec![0, 0, 0, gap, gap, gap]);
    }

    #[test]
    fn single_event_relative_ids_are_zero() {
        let seq = seq_from_cats("a", Split::Train, &["A"], 1000);
        let (vocab, bins) =
            fit_vocabulary(std::slice::from_ref(&seq), &FitOptions { rare_threshold: 1, ..FitOptions::default() })
                .unwrap();
        let tok = tokenize(&seq, &vocab, &bins, 512).unwrap();
        for scheme in [TimeScheme::RelativeToken, TimeScheme::RelativeEvent] {
            assert!(derive_time_ids(&tok, scheme, 0, 1 << 40).unwrap().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn time_shift_leaves_relative_ids_unchanged_and_moves_absolute() {
        let (_, _, tok) = fig1_sequence(120_000);
        let shift = 7 * 86_400_000;
        let mut shifted = tok.clone();
        for ts in &mut shifted.event_ts_ms {
            *ts += shift;
        }
        for scheme in [TimeScheme::RelativeToken, TimeScheme::RelativeEvent] {
            let a = derive_time_ids(&tok, scheme, 0, 1 << 40).unwrap();
            let b = derive_time_ids(&shifted, scheme, 0, 1 << 40).unwrap();
            assert_eq!(a, b);
        }
        let a = derive_time_ids(&tok, TimeScheme::Absolute, 0, 1 << 50).unwrap();
        let b = derive_time_ids(&shifted, TimeScheme::Absolute, 0, 1 << 50).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(y - x, shift);
        }
    }

    #[test]
    fn absolute_ids_rebase_and_clip() {
        let (_, _, tok) = fig1_sequence(120_000);
        // Origin above the first event clips the first event to 0.
        let ids = derive_time_ids(&tok, TimeScheme::Absolute, 60_000, 1 << 40).unwrap();
        assert_eq!(ids[0], 0);
        assert_eq!(ids[3], 50_000 + 120_000 - 60_000);
        // A low cap clips the second event.
        let ids = derive_time_ids(&tok, TimeScheme::Absolute, 0, 100_000).unwrap();
        assert_eq!(ids[3], 100_000);
    }

    #[test]
    fn negative_gap_is_data_error() {
        let mut tok = fig1_sequence(120_000).2;
        tok.event_ts_ms[3] = 0;
        assert!(derive_time_ids(&tok, TimeScheme::RelativeToken, 0, 1 << 40).is_err());
        tok.event_gap_ms[3] = -5;
        assert!(derive_time_ids(&tok, TimeScheme::RelativeEvent, 0, 1 << 40).is_err());
    }

    #[test]
    fn decode_round_trips_in_vocabulary_tokens() {
        let spec = crate::data::CorpusSpec {
            n_train: 40,
            n_validation: 5,
            n_test: 5,
            seed: 3,
            ..crate::data::CorpusSpec::default()
        };
        let seqs = crate::data::generate_corpus(&spec).unwrap();
        let (vocab, bins) = fit_vocabulary(&seqs, &FitOptions::default()).unwrap();
        let n_cat = spec.n_categorical;
        for seq in seqs.iter().take(10) {
            let tok = tokenize(seq, &vocab, &bins, 512).unwrap();
            for t in 0..tok.len() {
                let col = tok.column_ids[t];
                let event = &seq.events[tok.event_index[t]];
                match vocab.decode(col, tok.token_ids[t]).unwrap() {
                    Decoded::Category(s) => assert_eq!(s, event.categorical[col].1),
                    Decoded::Rare => {
                        // Collapse is only legal for genuinely rare values.
                        let surface = &event.categorical[col].1;
                        match &vocab.columns[col].tokens {
                            ColumnTokens::Categorical { map, .. } => {
                                assert!(!map.contains_key(surface))
                            }
                            _ => panic!("rare decode from numerical column"),
                        }
                    }
                    Decoded::Bin(b) => {
                        let (_, edges) = &bins.edges[col - n_cat];
                        assert_eq!(b, BinningRule::bin(edges, event.numerical[col - n_cat].1));
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
        }
    }

    #[test]
    fn vocabulary_artifact_round_trips_and_is_stable() {
        let train = seq_from_cats("a", Split::Train, &["A", "B", "B", "C", "C"], 1000);
        let (vocab, bins) =
            fit_vocabulary(&[train], &FitOptions { rare_threshold: 2, ..FitOptions::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        save_vocabulary(&vocab, &bins, &path).unwrap();
        let (v2, b2) = load_vocabulary(&path).unwrap();
        assert_eq!(vocab, v2);
        assert_eq!(bins, b2);
        let first = fs::read_to_string(&path).unwrap();
        save_vocabulary(&v2, &b2, &path).unwrap();
        assert_eq!(first, fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn vocab_cap_trims_before_erroring() {
        let cats: Vec<&str> = ["A", "B", "C", "D", "E", "F", "G", "H"]
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, 5))
            .collect();
        let train = seq_from_cats("a", Split::Train, &cats, 1000);
        let small = FitOptions { max_vocab: 8, ..FitOptions::default() };
        let (vocab, _) = fit_vocabulary(std::slice::from_ref(&train), &small).unwrap();
        assert!(vocab.v_total <= 8);
        let too_small = FitOptions { max_vocab: 3, ..FitOptions::default() };
        match fit_vocabulary(&[train], &too_small) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "max_vocab"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn specials_are_reserved() {
        let train = seq_from_cats("a", Split::Train, &["A", "A"], 1000);
        let (vocab, bins) = fit_vocabulary(&[train.clone()], &FitOptions::default()).unwrap();
        assert!(vocab.columns.iter().all(|c| c.base_id >= N_SPECIALS));
        let tok = tokenize(&train, &vocab, &bins, 512).unwrap();
        assert!(tok.token_ids.iter().all(|&t| t >= N_SPECIALS));
        assert_eq!(vocab.decode(0, PAD_ID).unwrap(), Decoded::Pad);
        assert_eq!(vocab.decode(0, SEQ_SUMMARY_ID).unwrap(), Decoded::SeqSummary);
    }
}
