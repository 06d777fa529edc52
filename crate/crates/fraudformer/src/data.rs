//! Event records, account sequences, the synthetic corpus generator, and the
//! JSON Lines dataset format.
//!
//! The generator plants two independent temporal fraud signals so every
//! encoder arm has something it could in principle learn:
//!
//! * a gap signal in inter-event times (ATO ends in a short-gap burst, scams
//!   in medium gaps, "other" in a weak version), invisible to models without
//!   a time encoder;
//! * a positional category signal: every sequence carries one marker pair,
//!   fraud at a fixed mid-sequence slot (most of the time; otherwise it
//!   blends into the background placement) and non-fraud in one of two slots
//!   flanking it, so presence is uninformative and only position separates
//!   classes. Sandwiching the fraud slot keeps the signal non-monotone in
//!   distance-from-end, which causal attention can estimate without any
//!   positional table; a learned table reads the slot directly. The blend
//!   rate caps what position alone can reach, so arms with both time and
//!   position channels stay ahead of position-only arms;
//! * an optional calendar signal that shifts whole fraud sequences so they
//!   end near a peak hour, leaving every gap untouched: visible only to
//!   absolute-scheme encoders.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seedutil::derive_seed;

pub const MS_PER_DAY: i64 = 86_400_000;
pub const MS_PER_HOUR: i64 = 3_600_000;

/// First event of the fraud marker pair.
pub const FRAUD_MARKER_EVENT: usize = 4;
/// First event of the non-fraud marker pair, one slot on each side of the
/// fraud slot.
pub const BACKGROUND_MARKER_EVENTS: [usize; 2] = [2, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FraudSubtype {
    NonFraud,
    Scam,
    Ato,
    Other,
}

impl FraudSubtype {
    pub const FRAUD: [FraudSubtype; 3] = [FraudSubtype::Scam, FraudSubtype::Ato, FraudSubtype::Other];

    pub fn is_fraud(self) -> bool {
        self != FraudSubtype::NonFraud
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FraudSubtype::NonFraud => "non_fraud",
            FraudSubtype::Scam => "scam",
            FraudSubtype::Ato => "ato",
            FraudSubtype::Other => "other",
        }
    }
}

impl fmt::Display for FraudSubtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FraudSubtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_fraud" => Ok(FraudSubtype::NonFraud),
            "scam" => Ok(FraudSubtype::Scam),
            "ato" => Ok(FraudSubtype::Ato),
            "other" => Ok(FraudSubtype::Other),
            other => Err(Error::config(
                "subtype",
                format!("unknown subtype '{other}' (expected scam, ato, other, non_fraud)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split '{other}'"))),
        }
    }
}

/// One timestamped event with its feature columns. The fraud label is
/// sequence-level in spirit; it is broadcast to every event of a fraud
/// sequence so each record is self-contained on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub timestamp_ms: i64,
    pub categorical: Vec<(String, String)>,
    pub numerical: Vec<(String, f64)>,
    pub label: bool,
    pub subtype: FraudSubtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountSequence {
    pub account_id: String,
    pub events: Vec<EventRecord>,
    pub split: Split,
}

impl AccountSequence {
    pub fn label(&self) -> bool {
        self.events.iter().any(|e| e.label)
    }

    pub fn subtype(&self) -> FraudSubtype {
        self.events
            .iter()
            .map(|e| e.subtype)
            .find(|s| s.is_fraud())
            .unwrap_or(FraudSubtype::NonFraud)
    }
}

/// Parameters of the planted inter-event-gap pattern, all in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapSignal {
    /// Mean gap inside an ATO terminal burst.
    pub short_gap_mean_ms: f64,
    /// Mean gap of the weak "other" terminal pattern.
    pub weak_gap_mean_ms: f64,
    /// Mean gap of the scam terminal pattern.
    pub medium_gap_mean_ms: f64,
    /// Mean background gap (log-normal, heavy tailed).
    pub background_gap_mean_ms: f64,
    /// Number of terminal short gaps in an ATO sequence.
    pub burst_len: usize,
}

impl Default for GapSignal {
    fn default() -> Self {
        GapSignal {
            short_gap_mean_ms: 2_000.0,
            weak_gap_mean_ms: 60_000.0,
            medium_gap_mean_ms: 300_000.0,
            background_gap_mean_ms: 3_600_000.0,
            burst_len: 4,
        }
    }
}

/// Parameters of the planted absolute-time pattern: with probability
/// `strength`, a fraud sequence is shifted as a whole so its last event
/// lands near `peak_hour`. Gaps are untouched by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalendarSignal {
    pub enabled: bool,
    pub peak_hour: u8,
    pub strength: f64,
}

impl Default for CalendarSignal {
    fn default() -> Self {
        CalendarSignal {
            enabled: true,
            peak_hour: 3,
            strength: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Fraud rate of the train and validation splits.
    pub fraud_rate: f64,
    /// Fraud rate of the test split (the reference evaluation rate is 0.43).
    pub fraud_rate_test: f64,
    pub n_categorical: usize,
    pub n_numerical: usize,
    pub events_min: usize,
    pub events_max: usize,
    /// Hard cap on stored history; longer sequences keep the last events.
    pub max_events: usize,
    /// Probability that a non-fraud sequence carries a flanking marker pair.
    pub background_marker_rate: f64,
    /// Probability that a fraud sequence's marker pair sits at the fraud
    /// slot rather than a flanking slot; caps the position-only signal.
    pub fraud_marker_rate: f64,
    pub gap_signal: GapSignal,
    pub calendar_signal: CalendarSignal,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 3000,
            n_validation: 1500,
            n_test: 500,
            fraud_rate: 0.30,
            fraud_rate_test: 0.43,
            n_categorical: 3,
            n_numerical: 2,
            events_min: 9,
            events_max: 16,
            max_events: 500,
            background_marker_rate: 1.0,
            fraud_marker_rate: 0.7,
            gap_signal: GapSignal::default(),
            calendar_signal: CalendarSignal::default(),
            seed: 17,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_validation == 0 || self.n_test == 0 {
            return Err(Error::config("n_accounts", "every split needs at least one account"));
        }
        for (name, rate) in [("fraud_rate", self.fraud_rate), ("fraud_rate_test", self.fraud_rate_test)] {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::config(name, format!("must lie in (0,1), got {rate}")));
            }
        }
        if self.n_categorical == 0 {
            return Err(Error::config("n_categorical", "the marker column requires at least one categorical column"));
        }
        if self.events_min < 9 {
            return Err(Error::config("events_min", "need at least 9 events so marker slots stay clear of the terminal event"));
        }
        if self.events_max < self.events_min {
            return Err(Error::config("events_max", "must be >= events_min"));
        }
        if self.max_events == 0 {
            return Err(Error::config("max_events", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.background_marker_rate) {
            return Err(Error::config("background_marker_rate", "must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.fraud_marker_rate) {
            return Err(Error::config("fraud_marker_rate", "must lie in [0,1]"));
        }
        let g = &self.gap_signal;
        for (name, v) in [
            ("short_gap_mean_ms", g.short_gap_mean_ms),
            ("weak_gap_mean_ms", g.weak_gap_mean_ms),
            ("medium_gap_mean_ms", g.medium_gap_mean_ms),
            ("background_gap_mean_ms", g.background_gap_mean_ms),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(name, format!("gap means must be positive, got {v}")));
            }
        }
        if g.burst_len == 0 || g.burst_len + 2 > self.events_min {
            return Err(Error::config("burst_len", "burst must fit inside the shortest sequence with room to spare"));
        }
        let c = &self.calendar_signal;
        if c.peak_hour >= 24 {
            return Err(Error::config("peak_hour", "hours run 0..24"));
        }
        if !(0.0..=1.0).contains(&c.strength) {
            return Err(Error::config("strength", "must lie in [0,1]"));
        }
        Ok(())
    }

    pub fn categorical_names(&self) -> Vec<String> {
        (0..self.n_categorical).map(|c| format!("cat_{c}")).collect()
    }

    pub fn numerical_names(&self) -> Vec<String> {
        (0..self.n_numerical).map(|c| format!("num_{c}")).collect()
    }

    /// Distinct background values of categorical column `c`.
    pub fn category_cardinality(&self, c: usize) -> usize {
        10 + 2 * c
    }

    /// The planted marker lives at the tail of column 0's frequency ranking
    /// so chance background occurrences are rare.
    pub fn marker_value(&self) -> String {
        format!("c0_v{}", self.category_cardinality(0) - 1)
    }
}

fn lognormal_with_mean(mean: f64, sigma: f64) -> LogNormal<f64> {
    // E[LogNormal(mu, sigma)] = exp(mu + sigma^2/2).
    LogNormal::new(mean.ln() - 0.5 * sigma * sigma, sigma).expect("valid log-normal")
}

/// Harmonic-weight draw over 0..k: value v has weight 1/(v+1).
fn sample_ranked_category(rng: &mut ChaCha8Rng, k: usize) -> usize {
    let total: f64 = (1..=k).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for v in 0..k {
        u -= 1.0 / (v + 1) as f64;
        if u <= 0.0 {
            return v;
        }
    }
    k - 1
}

struct SplitPlan {
    split: Split,
    count: usize,
    fraud_rate: f64,
}

/// Deterministic synthetic corpus with the planted signals described in the
/// module docs. Sequences are independent given per-account derived seeds.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<AccountSequence>> {
    spec.validate()?;
    let plans = [
        SplitPlan { split: Split::Train, count: spec.n_train, fraud_rate: spec.fraud_rate },
        SplitPlan { split: Split::Validation, count: spec.n_validation, fraud_rate: spec.fraud_rate },
        SplitPlan { split: Split::Test, count: spec.n_test, fraud_rate: spec.fraud_rate_test },
    ];
    let mut out = Vec::with_capacity(spec.n_train + spec.n_validation + spec.n_test);
    for plan in &plans {
        for i in 0..plan.count {
            out.push(generate_sequence(spec, plan, i));
        }
    }
    Ok(out)
}

fn generate_sequence(spec: &CorpusSpec, plan: &SplitPlan, index: usize) -> AccountSequence {
    let label = format!("corpus/{}/{index}", plan.split);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &label));

    let is_fraud = rng.random_bool(plan.fraud_rate);
    let subtype = if is_fraud {
        FraudSubtype::FRAUD[rng.random_range(0..FraudSubtype::FRAUD.len())]
    } else {
        FraudSubtype::NonFraud
    };
    let n = rng.random_range(spec.events_min..=spec.events_max);

    let g = &spec.gap_signal;
    let background = lognormal_with_mean(g.background_gap_mean_ms, 1.0);
    let mut gaps: Vec<f64> = (1..n).map(|_| rng.sample(background)).collect();
    match subtype {
        FraudSubtype::Ato => {
            let burst = lognormal_with_mean(g.short_gap_mean_ms, 0.5);
            let from = gaps.len() - g.burst_len;
            for gap in &mut gaps[from..] {
                *gap = rng.sample(burst);
            }
        }
        FraudSubtype::Scam => {
            let medium = lognormal_with_mean(g.medium_gap_mean_ms, 0.5);
            let from = gaps.len() - 3;
            for gap in &mut gaps[from..] {
                *gap = rng.sample(medium);
            }
        }
        FraudSubtype::Other => {
            let weak = lognormal_with_mean(g.weak_gap_mean_ms, 0.5);
            let from = gaps.len() - 2;
            for gap in &mut gaps[from..] {
                *gap = rng.sample(weak);
            }
        }
        FraudSubtype::NonFraud => {}
    }

    let origin = rng.random_range(0..90 * MS_PER_DAY);
    let mut timestamps = Vec::with_capacity(n);
    timestamps.push(origin);
    for gap in &gaps {
        let step = (gap.round() as i64).max(1);
        timestamps.push(timestamps.last().unwrap() + step);
    }

    let cal = &spec.calendar_signal;
    if cal.enabled && is_fraud && rng.random_bool(cal.strength) {
        let jitter = rng.random_range(-20 * 60_000..=20 * 60_000);
        let target = (cal.peak_hour as i64 * MS_PER_HOUR + 30 * 60_000 + jitter).rem_euclid(MS_PER_DAY);
        let last_of_day = timestamps.last().unwrap().rem_euclid(MS_PER_DAY);
        let mut delta = target - last_of_day;
        if delta < 0 {
            delta += MS_PER_DAY;
        }
        for ts in &mut timestamps {
            *ts += delta;
        }
    }

    // Marker placement: fraud carries the pair at the fixed mid slot (with
    // probability fraud_marker_rate), everyone else in one of the two
    // flanking slots, so presence alone says nothing.
    let flank = |rng: &mut ChaCha8Rng| BACKGROUND_MARKER_EVENTS[rng.random_range(0..BACKGROUND_MARKER_EVENTS.len())];
    let marker_at: Option<usize> = if is_fraud {
        if rng.random_bool(spec.fraud_marker_rate) {
            Some(FRAUD_MARKER_EVENT)
        } else {
            Some(flank(&mut rng))
        }
    } else if rng.random_bool(spec.background_marker_rate) {
        Some(flank(&mut rng))
    } else {
        None
    };

    let cat_names = spec.categorical_names();
    let num_names = spec.numerical_names();
    let marker = spec.marker_value();
    let mut events = Vec::with_capacity(n);
    for (e, &ts) in timestamps.iter().enumerate() {
        let mut categorical = Vec::with_capacity(cat_names.len());
        for (c, name) in cat_names.iter().enumerate() {
            let k = spec.category_cardinality(c);
            let v = sample_ranked_category(&mut rng, k);
            categorical.push((name.clone(), format!("c{c}_v{v}")));
        }
        if let Some(j) = marker_at {
            if e == j || e == j + 1 {
                categorical[0].1 = marker.clone();
            }
        }
        let mut numerical = Vec::with_capacity(num_names.len());
        for (c, name) in num_names.iter().enumerate() {
            let dist = lognormal_with_mean(50.0 * (c + 1) as f64, 1.0);
            numerical.push((name.clone(), rng.sample(dist)));
        }
        events.push(EventRecord {
            timestamp_ms: ts,
            categorical,
            numerical,
            label: is_fraud,
            subtype,
        });
    }

    if events.len() > spec.max_events {
        events.drain(..events.len() - spec.max_events);
    }

    AccountSequence {
        account_id: format!("acct-{}-{index:05}", plan.split),
        events,
        split: plan.split,
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CorpusHeader {
    version: u32,
    categorical: Vec<String>,
    numerical: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventLine {
    account_id: String,
    split: Split,
    timestamp_ms: i64,
    label: bool,
    subtype: FraudSubtype,
    categorical: Vec<(String, String)>,
    numerical: Vec<(String, f64)>,
}

const CORPUS_FORMAT_VERSION: u32 = 1;

/// One JSON header line with the schema, then one JSON record per event.
pub fn write_corpus(seqs: &[AccountSequence], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = match seqs.first() {
        Some(seq) => {
            let first = &seq.events[0];
            CorpusHeader {
                version: CORPUS_FORMAT_VERSION,
                categorical: first.categorical.iter().map(|(n, _)| n.clone()).collect(),
                numerical: first.numerical.iter().map(|(n, _)| n.clone()).collect(),
            }
        }
        None => CorpusHeader {
            version: CORPUS_FORMAT_VERSION,
            categorical: Vec::new(),
            numerical: Vec::new(),
        },
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for seq in seqs {
        for event in &seq.events {
            let line = EventLine {
                account_id: seq.account_id.clone(),
                split: seq.split,
                timestamp_ms: event.timestamp_ms,
                label: event.label,
                subtype: event.subtype,
                categorical: event.categorical.clone(),
                numerical: event.numerical.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<AccountSequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, reason: "missing header line".into() })??;
    let header: CorpusHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Parse { line: 1, reason: e.to_string() })?;
    if header.version != CORPUS_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "corpus format version {} (expected {})",
            header.version, CORPUS_FORMAT_VERSION
        )));
    }

    let mut seqs: Vec<AccountSequence> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, reason: e.to_string() })?;
        let cats_match = rec.categorical.len() == header.categorical.len()
            && rec.categorical.iter().zip(&header.categorical).all(|((n, _), h)| n == h);
        let nums_match = rec.numerical.len() == header.numerical.len()
            && rec.numerical.iter().zip(&header.numerical).all(|((n, _), h)| n == h);
        if !cats_match || !nums_match {
            return Err(Error::Parse {
                line: line_no,
                reason: "feature columns do not match the header schema".into(),
            });
        }
        let event = EventRecord {
            timestamp_ms: rec.timestamp_ms,
            categorical: rec.categorical,
            numerical: rec.numerical,
            label: rec.label,
            subtype: rec.subtype,
        };
        match seqs.last_mut() {
            Some(seq) if seq.account_id == rec.account_id => {
                if seq.split != rec.split {
                    return Err(Error::Data(format!(
                        "account {} changes split mid-sequence (line {line_no})",
                        rec.account_id
                    )));
                }
                if event.timestamp_ms < seq.events.last().unwrap().timestamp_ms {
                    return Err(Error::Data(format!(
                        "account {} has out-of-order timestamps (line {line_no})",
                        rec.account_id
                    )));
                }
                seq.events.push(event);
            }
            _ => seqs.push(AccountSequence {
                account_id: rec.account_id,
                events: vec![event],
                split: rec.split,
            }),
        }
    }
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 120,
            n_validation: 60,
            n_test: 40,
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes_and_unique_ids() {
        let spec = small_spec();
        let seqs = generate_corpus(&spec).unwrap();
        let count = |s: Split| seqs.iter().filter(|q| q.split == s).count();
        assert_eq!(count(Split::Train), 120);
        assert_eq!(count(Split::Validation), 60);
        assert_eq!(count(Split::Test), 40);
        let mut ids: Vec<&str> = seqs.iter().map(|s| s.account_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), seqs.len());
    }

    #[test]
    fn test_split_fraud_rate_within_binomial_tolerance() {
        let spec = CorpusSpec {
            n_test: 1000,
            n_train: 30,
            n_validation: 30,
            seed: 11,
            ..CorpusSpec::default()
        };
        let seqs = generate_corpus(&spec).unwrap();
        let frauds = seqs
            .iter()
            .filter(|s| s.split == Split::Test && s.label())
            .count() as f64;
        let expected = 1000.0 * 0.43;
        let sigma = (1000.0f64 * 0.43 * 0.57).sqrt();
        assert!(
            (frauds - expected).abs() <= 3.0 * sigma,
            "test fraud count {frauds} vs {expected} +- {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn sequences_are_sorted_and_sized() {
        let spec = small_spec();
        for seq in generate_corpus(&spec).unwrap() {
            assert!(!seq.events.is_empty());
            assert!(seq.events.len() >= spec.events_min && seq.events.len() <= spec.events_max);
            for pair in seq.events.windows(2) {
                assert!(pair[0].timestamp_ms < pair[1].timestamp_ms);
            }
            for e in &seq.events {
                assert!(e.timestamp_ms >= 0);
                assert_eq!(e.label, e.subtype.is_fraud());
                assert_eq!(e.categorical.len(), spec.n_categorical);
                assert_eq!(e.numerical.len(), spec.n_numerical);
            }
        }
    }

    #[test]
    fn ato_terminal_gaps_are_shorter_than_background() {
        let spec = small_spec();
        let seqs = generate_corpus(&spec).unwrap();
        let terminal_gap = |s: &AccountSequence| {
            let n = s.events.len();
            (s.events[n - 1].timestamp_ms - s.events[n - 2].timestamp_ms) as f64
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ato: Vec<f64> = seqs.iter().filter(|s| s.subtype() == FraudSubtype::Ato).map(terminal_gap).collect();
        let non: Vec<f64> = seqs.iter().filter(|s| !s.label()).map(terminal_gap).collect();
        assert!(ato.len() > 5 && non.len() > 20);
        assert!(
            mean(&ato) * 10.0 < mean(&non),
            "ato {} vs background {}",
            mean(&ato),
            mean(&non)
        );
    }

    #[test]
    fn fraud_marker_splits_between_mid_slot_and_flanks_while_background_flanks() {
        let spec = small_spec();
        let marker = spec.marker_value();
        let mut mid = 0usize;
        let mut fraud = 0usize;
        for seq in generate_corpus(&spec).unwrap() {
            let at = |e: usize| &seq.events[e].categorical[0].1;
            let pair_at = |j: usize| at(j) == &marker && at(j + 1) == &marker;
            if seq.label() {
                fraud += 1;
                if pair_at(FRAUD_MARKER_EVENT) {
                    mid += 1;
                } else {
                    assert!(
                        BACKGROUND_MARKER_EVENTS.iter().any(|&j| pair_at(j)),
                        "fraud sequence {} has no marker pair",
                        seq.account_id
                    );
                }
            } else {
                // Default rate is 1.0, so a flanking pair exists.
                assert!(
                    BACKGROUND_MARKER_EVENTS.iter().any(|&j| pair_at(j)),
                    "missing flanking marker pair in {}",
                    seq.account_id
                );
            }
        }
        let rate = mid as f64 / fraud as f64;
        assert!(
            (rate - spec.fraud_marker_rate).abs() < 0.2,
            "mid-slot rate {rate} far from {}",
            spec.fraud_marker_rate
        );
    }

    #[test]
    fn calendar_snap_concentrates_fraud_end_hours() {
        let spec = CorpusSpec {
            calendar_signal: CalendarSignal { enabled: true, peak_hour: 3, strength: 1.0 },
            n_train: 400,
            n_validation: 30,
            n_test: 30,
            seed: 23,
            ..CorpusSpec::default()
        };
        let seqs = generate_corpus(&spec).unwrap();
        let end_hour = |s: &AccountSequence| {
            (s.events.last().unwrap().timestamp_ms.rem_euclid(MS_PER_DAY)) / MS_PER_HOUR
        };
        let in_window = |h: i64| (2..=4).contains(&h);
        let frauds: Vec<i64> = seqs.iter().filter(|s| s.label() && s.split == Split::Train).map(end_hour).collect();
        let nons: Vec<i64> = seqs.iter().filter(|s| !s.label() && s.split == Split::Train).map(end_hour).collect();
        let frac = |v: &[i64]| v.iter().filter(|&&h| in_window(h)).count() as f64 / v.len() as f64;
        assert!(frac(&frauds) > 0.9, "fraud peak fraction {}", frac(&frauds));
        assert!(frac(&nons) < 0.4, "non-fraud peak fraction {}", frac(&nons));
    }

    #[test]
    fn round_trip_identity() {
        let spec = small_spec();
        let seqs = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&seqs, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(seqs, back);
    }

    #[test]
    fn empty_corpus_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_corpus(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_label_is_a_parse_error_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let header = r#"{"version":1,"categorical":["cat_0"],"numerical":[]}"#;
        let bad = r#"{"account_id":"a","split":"train","timestamp_ms":5,"subtype":"non_fraud","categorical":[["cat_0","x"]],"numerical":[]}"#;
        std::fs::write(&path, format!("{header}\n{bad}\n")).unwrap();
        match read_corpus(&path) {
            Err(Error::Parse { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("label"), "reason: {reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mismatch.jsonl");
        let header = r#"{"version":1,"categorical":["cat_0"],"numerical":[]}"#;
        let rec = r#"{"account_id":"a","split":"train","timestamp_ms":5,"label":false,"subtype":"non_fraud","categorical":[["other","x"]],"numerical":[]}"#;
        std::fs::write(&path, format!("{header}\n{rec}\n")).unwrap();
        assert!(matches!(read_corpus(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut spec = small_spec();
        spec.fraud_rate = 1.5;
        match generate_corpus(&spec) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "fraud_rate"),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut spec = small_spec();
        spec.n_train = 0;
        assert!(generate_corpus(&spec).is_err());
        let mut spec = small_spec();
        spec.gap_signal.burst_len = 20;
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn max_events_truncation_keeps_most_recent() {
        let mut spec = small_spec();
        spec.max_events = 8;
        spec.events_min = 10;
        spec.events_max = 12;
        let full = {
            let mut s = spec.clone();
            s.max_events = 500;
            generate_corpus(&s).unwrap()
        };
        let cut = generate_corpus(&spec).unwrap();
        for (f, c) in full.iter().zip(&cut) {
            assert_eq!(c.events.len(), 8);
            let tail = &f.events[f.events.len() - 8..];
            assert_eq!(tail, c.events.as_slice());
        }
    }
}
