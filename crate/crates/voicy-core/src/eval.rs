//! Listening-test bookkeeping and the statistics run over it: MUSHRA-style
//! score summaries, SNR-bucketed report tables, exact and approximate
//! Wilcoxon signed-rank tests, and cheap objective proxies (mel error,
//! speaker-embedding cosine) for runs where no rater ever shows up.
//!
//! Everything here is a pure function over immutable record collections, and
//! every table is emitted in a deterministic order regardless of input
//! order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::dsp::MelSpectrogram;
use crate::model::{encode_speaker, ModelError, ModelState};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("paired samples have {x} and {y} entries")]
    LengthMismatch { x: usize, y: usize },
    #[error("empty sample")]
    EmptySample,
    #[error("degenerate sample")]
    DegenerateSample,
    #[error("non-finite difference at pair {0}")]
    NonFinite(usize),
    #[error("exact mode supports at most {limit} effective pairs, got {n}")]
    ExactTooLarge { n: usize, limit: usize },
    #[error("bucket edges must be strictly increasing")]
    UnorderedEdges,
    #[error("converted has {got} frames, reference has {want}")]
    FrameMismatch { got: usize, want: usize },
    #[error("converted has {got} mel bands, reference has {want}")]
    BandMismatch { got: usize, want: usize },
    #[error("{path}:{line}: {detail}")]
    BadScores {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Naturalness,
    Similarity,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Naturalness => write!(f, "naturalness"),
            Metric::Similarity => write!(f, "similarity"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "naturalness" => Ok(Metric::Naturalness),
            "similarity" => Ok(Metric::Similarity),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// SNR attribution of a scored utterance: a level in dB, or undegraded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SnrTagRepr", into = "SnrTagRepr")]
pub enum SnrTag {
    Clean,
    Db(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SnrTagRepr {
    Num(f64),
    Text(String),
}

impl TryFrom<SnrTagRepr> for SnrTag {
    type Error = String;

    fn try_from(r: SnrTagRepr) -> std::result::Result<Self, String> {
        match r {
            SnrTagRepr::Num(v) => Ok(SnrTag::Db(v)),
            SnrTagRepr::Text(s) if s == "clean" => Ok(SnrTag::Clean),
            SnrTagRepr::Text(s) => Err(format!("snr must be a number or \"clean\", got {s:?}")),
        }
    }
}

impl From<SnrTag> for SnrTagRepr {
    fn from(t: SnrTag) -> SnrTagRepr {
        match t {
            SnrTag::Clean => SnrTagRepr::Text("clean".into()),
            SnrTag::Db(v) => SnrTagRepr::Num(v),
        }
    }
}

/// One rating: a rater scored one system's rendering of one utterance on one
/// metric, 0 to 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub system: String,
    pub utterance: String,
    pub rater: String,
    pub metric: Metric,
    pub score: f64,
    pub snr_db: SnrTag,
}

impl ScoreRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if !self.score.is_finite() || !(0.0..=100.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 100]", self.score));
        }
        Ok(())
    }
}

/// Parses score records, one JSON object per line. Blank lines are skipped.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    scores_from_lines(text.lines().map(|l| Ok(l.to_string())), "<memory>")
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| EvalError::Io {
        path: display.clone(),
        source,
    })?;
    scores_from_lines(BufReader::new(file).lines(), &display)
}

fn scores_from_lines(
    lines: impl Iterator<Item = std::io::Result<String>>,
    path: &str,
) -> Result<Vec<ScoreRecord>> {
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_string(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| EvalError::BadScores {
            path: path.to_string(),
            line: i + 1,
            detail,
        };
        let record: ScoreRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        record.validate().map_err(bad)?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    for r in records {
        r.validate().map_err(|detail| EvalError::BadScores {
            path: path.display().to_string(),
            line: 0,
            detail,
        })?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("score records always serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Effective-sample cap for exact enumeration. Above it the exact null has
/// more than 2^25 sign assignments and the normal approximation takes over.
pub const EXACT_THRESHOLD: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMode {
    /// Exact when the effective sample fits under [`EXACT_THRESHOLD`], the
    /// normal approximation otherwise.
    Auto,
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    /// W+: sum of the ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub mode: TestMode,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped, tied magnitudes share their average rank.
/// Exact mode enumerates the full sign-assignment null (dynamic program over
/// doubled ranks, so ties cost nothing); approximate mode is the normal
/// approximation with tie-corrected variance, a 0.5 continuity correction,
/// and a fourth-cumulant Edgeworth term that keeps it honest down to single
/// digit samples.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], mode: WilcoxonMode) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let mut diffs = Vec::with_capacity(x.len());
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        let d = a - b;
        if !d.is_finite() {
            return Err(EvalError::NonFinite(i));
        }
        if d != 0.0 {
            diffs.push(d);
        }
    }
    if diffs.is_empty() {
        return Err(EvalError::DegenerateSample);
    }
    let n = diffs.len();

    // Rank by |d| ascending; runs of equal magnitude share the average of
    // the positions they occupy.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i+1 ..= j, averaged.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    // The trailing `+ 0.0` turns the IEEE -0.0 of an empty sum into +0.0.
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum::<f64>()
        + 0.0;

    let exact = match mode {
        WilcoxonMode::Auto => n <= EXACT_THRESHOLD,
        WilcoxonMode::Exact if n > EXACT_THRESHOLD => {
            return Err(EvalError::ExactTooLarge {
                n,
                limit: EXACT_THRESHOLD,
            });
        }
        WilcoxonMode::Exact => true,
        WilcoxonMode::NormalApprox => false,
    };

    let p_value = if exact {
        exact_two_sided_p(&ranks, w_plus)
    } else {
        approx_two_sided_p(&ranks, w_plus)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value,
        n_effective: n,
        mode: if exact {
            TestMode::Exact
        } else {
            TestMode::NormalApprox
        },
    })
}

/// P(|W - mu| >= |w - mu|) over all 2^n sign assignments. Average ranks are
/// half-integers, so doubling every rank keeps the whole computation in
/// integers; deviations are doubled once more to dodge the half in mu.
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &d in &doubled {
        for s in (d..=total).rev() {
            counts[s] += counts[s - d];
        }
    }
    // dev(s) = |2s - total| in doubled-rank units, observed at s = 2 W+.
    let dev_obs = (2 * (2.0 * w_plus).round() as i64 - total as i64).abs();
    let hits: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i64 - total as i64).abs() >= dev_obs)
        .map(|(_, c)| *c)
        .sum();
    hits as f64 / (1u64 << ranks.len()) as f64
}

/// Normal approximation to the same two-sided tail. The null is a sum of
/// independent rank*Bernoulli(1/2) terms, so with average ranks r_i the
/// variance is sum(r^2)/4 (that IS the tie correction) and the fourth
/// cumulant is -sum(r^4)/8; one Edgeworth term on top of the continuity
/// corrected z covers the small-sample range Auto never sends here.
fn approx_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let mu: f64 = ranks.iter().sum::<f64>() / 2.0;
    let sigma = (ranks.iter().map(|r| r * r).sum::<f64>() / 4.0).sqrt();
    let kappa4 = -ranks.iter().map(|r| r.powi(4)).sum::<f64>() / 8.0;
    let gamma2 = kappa4 / sigma.powi(4);
    let z = ((w_plus - mu).abs() - 0.5) / sigma;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let survival = 1.0 - std.cdf(z) + std.pdf(z) * (gamma2 / 24.0) * (z.powi(3) - 3.0 * z);
    (2.0 * survival).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseRow {
    pub metric: Metric,
    pub system_a: String,
    pub system_b: String,
    /// (utterance, rater) pairs scored under both systems.
    pub n_pairs: usize,
    /// Absent when the paired sample was empty or degenerate.
    pub result: Option<TestResult>,
}

/// Signed-rank tests between every ordered pair of systems, per metric.
/// Scores are paired by (utterance, rater); a key scored several times under
/// one system contributes its mean. Pairs whose test cannot run (no common
/// scores, or all differences zero) get a row without a result. The full
/// ordered matrix is emitted, so each unordered pair appears twice with the
/// same p-value.
pub fn wilcoxon_pairwise(records: &[ScoreRecord], mode: WilcoxonMode) -> Result<Vec<PairwiseRow>> {
    type Key = (String, String);
    let mut by_metric: BTreeMap<Metric, BTreeMap<Key, BTreeMap<String, Vec<f64>>>> =
        BTreeMap::new();
    for r in records {
        by_metric
            .entry(r.metric)
            .or_default()
            .entry((r.utterance.clone(), r.rater.clone()))
            .or_default()
            .entry(r.system.clone())
            .or_default()
            .push(r.score);
    }
    let mut rows = Vec::new();
    for (metric, keyed) in &by_metric {
        let systems: BTreeSet<&String> = keyed.values().flat_map(|m| m.keys()).collect();
        for a in &systems {
            for b in &systems {
                if a == b {
                    continue;
                }
                let mut x = Vec::new();
                let mut y = Vec::new();
                for scores in keyed.values() {
                    if let (Some(sa), Some(sb)) = (scores.get(*a), scores.get(*b)) {
                        x.push(sa.iter().sum::<f64>() / sa.len() as f64);
                        y.push(sb.iter().sum::<f64>() / sb.len() as f64);
                    }
                }
                let result = match wilcoxon_signed_rank(&x, &y, mode) {
                    Ok(r) => Some(r),
                    Err(EvalError::EmptySample | EvalError::DegenerateSample) => None,
                    Err(e) => return Err(e),
                };
                rows.push(PairwiseRow {
                    metric: *metric,
                    system_a: (*a).clone(),
                    system_b: (*b).clone(),
                    n_pairs: x.len(),
                    result,
                });
            }
        }
    }
    Ok(rows)
}

/// Tab-separated pairwise test matrix with a header row.
pub fn pairwise_tsv(rows: &[PairwiseRow]) -> String {
    let mut out = String::from("metric\tsystem_a\tsystem_b\tn_pairs\tn_effective\tW\tp\tmode\n");
    for r in rows {
        let (n_eff, w, p, mode) = match &r.result {
            Some(t) => (
                t.n_effective.to_string(),
                format!("{:.1}", t.statistic),
                format!("{:.6}", t.p_value),
                match t.mode {
                    TestMode::Exact => "exact".to_string(),
                    TestMode::NormalApprox => "normal_approx".to_string(),
                },
            ),
            None => ("NA".into(), "NA".into(), "NA".into(), "NA".into()),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.metric, r.system_a, r.system_b, r.n_pairs, n_eff, w, p, mode
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MushraRow {
    pub system: String,
    pub metric: Metric,
    pub mean: f64,
    /// Half-width of the 95% t-interval; absent for singleton groups.
    pub ci95_half_width: Option<f64>,
    pub n: usize,
}

/// Per (system, metric) mean and 95% confidence half-width, rows sorted by
/// system then metric. Singleton groups report n = 1 and no interval.
pub fn mushra_summary(records: &[ScoreRecord]) -> Vec<MushraRow> {
    let mut groups: BTreeMap<(String, Metric), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.system.clone(), r.metric))
            .or_default()
            .push(r.score);
    }
    groups
        .into_iter()
        .map(|((system, metric), scores)| {
            let n = scores.len();
            let mean = scores.iter().sum::<f64>() / n as f64;
            let ci95_half_width = (n >= 2).then(|| {
                let var =
                    scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                    .expect("positive degrees of freedom")
                    .inverse_cdf(0.975);
                t * var.sqrt() / (n as f64).sqrt()
            });
            MushraRow {
                system,
                metric,
                mean,
                ci95_half_width,
                n,
            }
        })
        .collect()
}

/// Bucket key for the SNR breakdown: half-open dB ranges plus a dedicated
/// bucket for undegraded stimuli.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrBucket {
    Range { lo: f64, hi: f64 },
    Clean,
}

impl fmt::Display for SnrBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrBucket::Range { lo, hi } => write!(f, "[{lo},{hi})"),
            SnrBucket::Clean => write!(f, "clean"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrBucketRow {
    pub bucket: SnrBucket,
    pub system: String,
    pub metric: Metric,
    /// Absent when the cell is empty.
    pub mean: Option<f64>,
    pub n: usize,
}

/// Mean score per (bucket, system, metric) cell. Buckets are the half-open
/// ranges between consecutive edges, in order, with "clean" last; the full
/// grid over systems and metrics present in the records is emitted, empty
/// cells with n = 0. An entry in `snr_map` overrides the record's own tag;
/// records whose SNR lands outside every range are left out of the table.
pub fn snr_bucket_report(
    records: &[ScoreRecord],
    snr_map: &BTreeMap<String, SnrTag>,
    edges: &[f64],
) -> Result<Vec<SnrBucketRow>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::UnorderedEdges);
    }
    let mut buckets: Vec<SnrBucket> = edges
        .windows(2)
        .map(|w| SnrBucket::Range { lo: w[0], hi: w[1] })
        .collect();
    buckets.push(SnrBucket::Clean);

    let bucket_of = |tag: SnrTag| -> Option<usize> {
        match tag {
            SnrTag::Clean => Some(buckets.len() - 1),
            SnrTag::Db(v) => buckets[..buckets.len() - 1]
                .iter()
                .position(|b| matches!(b, SnrBucket::Range { lo, hi } if *lo <= v && v < *hi)),
        }
    };

    let systems: BTreeSet<&str> = records.iter().map(|r| r.system.as_str()).collect();
    let metrics: BTreeSet<Metric> = records.iter().map(|r| r.metric).collect();

    let mut cells: BTreeMap<(usize, &str, Metric), Vec<f64>> = BTreeMap::new();
    for r in records {
        let tag = snr_map.get(&r.utterance).copied().unwrap_or(r.snr_db);
        if let Some(b) = bucket_of(tag) {
            cells
                .entry((b, r.system.as_str(), r.metric))
                .or_default()
                .push(r.score);
        }
    }

    let mut rows = Vec::new();
    for (b, bucket) in buckets.iter().enumerate() {
        for system in &systems {
            for metric in &metrics {
                let scores = cells.get(&(b, *system, *metric));
                let n = scores.map_or(0, |s| s.len());
                let mean = scores.map(|s| s.iter().sum::<f64>() / s.len() as f64);
                rows.push(SnrBucketRow {
                    bucket: *bucket,
                    system: system.to_string(),
                    metric: *metric,
                    mean,
                    n,
                });
            }
        }
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NA".into(),
    }
}

/// Tab-separated summary table with a header row.
pub fn mushra_tsv(rows: &[MushraRow]) -> String {
    let mut out = String::from("system\tmetric\tmean\tci95_half_width\tn\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\t{}\n",
            r.system,
            r.metric,
            r.mean,
            fmt_opt(r.ci95_half_width),
            r.n
        ));
    }
    out
}

/// Tab-separated SNR breakdown with a header row.
pub fn snr_bucket_tsv(rows: &[SnrBucketRow]) -> String {
    let mut out = String::from("bucket\tsystem\tmetric\tmean\tn\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.bucket,
            r.system,
            r.metric,
            fmt_opt(r.mean),
            r.n
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveProxies {
    /// Mean squared log-mel error against the clean reference rendering.
    pub mel_mse: f64,
    /// Cosine between the speaker embeddings of the conversion and of the
    /// target speaker's reference utterance.
    pub speaker_cosine: f64,
}

/// Mean squared error between two equally shaped log-mel matrices.
pub fn mel_mse(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.n_frames != b.n_frames {
        return Err(EvalError::FrameMismatch {
            got: a.n_frames,
            want: b.n_frames,
        });
    }
    if a.n_mels != b.n_mels {
        return Err(EvalError::BandMismatch {
            got: a.n_mels,
            want: b.n_mels,
        });
    }
    let n = a.values.len();
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n as f64)
}

/// Desk-scale stand-ins for perceptual scores: spectral distance to the
/// clean reference and speaker similarity to the conversion target.
pub fn objective_proxies(
    converted: &MelSpectrogram,
    reference_clean: &MelSpectrogram,
    target_ref_mel: &MelSpectrogram,
    state: &ModelState,
) -> Result<ObjectiveProxies> {
    let mel_mse = mel_mse(converted, reference_clean)?;
    let e_conv = encode_speaker(state, converted)?;
    let e_target = encode_speaker(state, target_ref_mel)?;
    Ok(ObjectiveProxies {
        mel_mse,
        speaker_cosine: e_conv.cosine(&e_target),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FeatureConfig;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn record(system: &str, utt: &str, rater: &str, metric: Metric, score: f64) -> ScoreRecord {
        ScoreRecord {
            system: system.into(),
            utterance: utt.into(),
            rater: rater.into(),
            metric,
            score,
            snr_db: SnrTag::Clean,
        }
    }

    #[test]
    fn three_positive_differences_give_a_quarter() {
        // Ranks 1, 2, 3 all positive: W+ = 6. Of the 8 sign assignments only
        // all-positive and all-negative deviate from 3 by at least 3.
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], WilcoxonMode::Auto)
            .unwrap();
        assert_eq!(r.statistic, 6.0);
        assert_eq!(r.p_value, 0.25);
        assert_eq!(r.n_effective, 3);
        assert_eq!(r.mode, TestMode::Exact);
    }

    #[test]
    fn zero_differences_are_dropped() {
        let r = wilcoxon_signed_rank(
            &[1.0, 2.0, 3.0, 5.0],
            &[0.0, 0.0, 0.0, 5.0],
            WilcoxonMode::Auto,
        )
        .unwrap();
        assert_eq!(r.n_effective, 3);
        assert_eq!(r.statistic, 6.0);
        assert_eq!(r.p_value, 0.25);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let err = wilcoxon_signed_rank(&[4.0, 4.0], &[4.0, 4.0], WilcoxonMode::Auto).unwrap_err();
        assert_eq!(err.to_string(), "degenerate sample");
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0], WilcoxonMode::Auto).is_err());
        assert!(wilcoxon_signed_rank(&[], &[], WilcoxonMode::Auto).is_err());
    }

    #[test]
    fn tied_magnitudes_share_average_ranks() {
        // |d| = {1, 1, 2} -> ranks {1.5, 1.5, 3}; positives carry 1.5 + 3.
        // Subset sums: 0, 1.5, 1.5, 3, 3, 4.5, 4.5, 6; six of eight deviate
        // from 3 by at least 1.5.
        let r = wilcoxon_signed_rank(&[1.0, -1.0, 2.0], &[0.0, 0.0, 0.0], WilcoxonMode::Exact)
            .unwrap();
        assert_eq!(r.statistic, 4.5);
        assert_eq!(r.p_value, 0.75);
    }

    #[test]
    fn approximation_stays_near_exact_for_small_samples() {
        // Exhaustive: every n <= 10, distinct magnitudes 1..=n, every sign
        // pattern. The exact enumeration is the oracle.
        let mut worst: f64 = 0.0;
        for n in 1..=10usize {
            for pattern in 0..(1u32 << n) {
                let x: Vec<f64> = (0..n)
                    .map(|i| {
                        let m = (i + 1) as f64;
                        if pattern >> i & 1 == 1 {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect();
                let y = vec![0.0; n];
                let exact = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
                let approx = wilcoxon_signed_rank(&x, &y, WilcoxonMode::NormalApprox).unwrap();
                worst = worst.max((exact.p_value - approx.p_value).abs());
            }
        }
        assert!(worst <= 0.12, "worst exact-vs-approx gap {worst}");
    }

    #[test]
    fn negation_symmetry_and_exact_p_bounds() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..200 {
            let n = rng.gen_range(1..=12);
            // Half-integer grid forces plenty of tied magnitudes.
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-6i32..=6) as f64 / 2.0).collect();
            let y = vec![0.0; n];
            if x.iter().all(|v| *v == 0.0) {
                continue;
            }
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let a = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
            let b = wilcoxon_signed_rank(&neg, &y, WilcoxonMode::Exact).unwrap();
            assert_eq!(a.p_value, b.p_value);
            let floor = 2f64.powi(-(a.n_effective as i32));
            assert!(a.p_value >= floor && a.p_value <= 1.0, "p {}", a.p_value);

            let am = wilcoxon_signed_rank(&x, &y, WilcoxonMode::NormalApprox).unwrap();
            let bm = wilcoxon_signed_rank(&neg, &y, WilcoxonMode::NormalApprox).unwrap();
            assert_eq!(am.p_value, bm.p_value);
        }
    }

    #[test]
    fn exact_mode_is_capped_and_auto_degrades() {
        let x: Vec<f64> = (1..=26).map(|i| i as f64).collect();
        let y = vec![0.0; 26];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact),
            Err(EvalError::ExactTooLarge { n: 26, limit: 25 })
        ));
        let auto = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Auto).unwrap();
        assert_eq!(auto.mode, TestMode::NormalApprox);

        let at = wilcoxon_signed_rank(&x[..25], &y[..25], WilcoxonMode::Auto).unwrap();
        assert_eq!(at.mode, TestMode::Exact);
    }

    #[test]
    fn pairwise_matrix_is_symmetric_in_p() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let mut records = Vec::new();
        for sys in ["voicy", "baseline", "oracle"] {
            for u in 0..8 {
                for rater in 0..3 {
                    records.push(record(
                        sys,
                        &format!("u{u}"),
                        &format!("r{rater}"),
                        Metric::Naturalness,
                        rng.gen_range(0.0..100.0),
                    ));
                }
            }
        }
        let rows = wilcoxon_pairwise(&records, WilcoxonMode::Auto).unwrap();
        // Ordered matrix over three systems.
        assert_eq!(rows.len(), 6);
        for row in &rows {
            let mirror = rows
                .iter()
                .find(|m| m.system_a == row.system_b && m.system_b == row.system_a)
                .unwrap();
            assert_eq!(row.n_pairs, 24);
            assert_eq!(
                row.result.unwrap().p_value,
                mirror.result.unwrap().p_value
            );
        }
    }

    #[test]
    fn pairwise_degenerate_and_disjoint_pairs_get_no_result() {
        // Identical scores under both systems: every difference is zero.
        let records = vec![
            record("a", "u1", "r1", Metric::Similarity, 50.0),
            record("b", "u1", "r1", Metric::Similarity, 50.0),
            // System c shares no (utterance, rater) key with a or b.
            record("c", "u9", "r9", Metric::Similarity, 60.0),
        ];
        let rows = wilcoxon_pairwise(&records, WilcoxonMode::Auto).unwrap();
        for row in &rows {
            assert!(row.result.is_none(), "{} vs {}", row.system_a, row.system_b);
        }
        let tsv = pairwise_tsv(&rows);
        assert!(tsv.starts_with("metric\tsystem_a\tsystem_b\t"));
        assert!(tsv.contains("\tNA\tNA\tNA\tNA\n"));
    }

    #[test]
    fn summary_means_and_singleton_interval() {
        let records = vec![
            record("voicy", "u1", "r1", Metric::Naturalness, 80.0),
            record("voicy", "u2", "r2", Metric::Naturalness, 90.0),
            record("voicy", "u3", "r3", Metric::Naturalness, 100.0),
            record("voicy", "u1", "r1", Metric::Similarity, 70.0),
        ];
        let rows = mushra_summary(&records);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].metric, Metric::Naturalness);
        assert_eq!(rows[0].mean, 90.0);
        assert_eq!(rows[0].n, 3);
        // s = 10, so the half-width is t(0.975, 2) * 10 / sqrt(3).
        let expected = 4.302652729911275 * 10.0 / 3f64.sqrt();
        assert!((rows[0].ci95_half_width.unwrap() - expected).abs() < 1e-9);
        assert_eq!(rows[1].n, 1);
        assert!(rows[1].ci95_half_width.is_none());
    }

    #[test]
    fn streaming_pass_agrees_with_batch_summary() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let records: Vec<ScoreRecord> = (0..300)
            .map(|i| {
                record(
                    ["a", "b", "c"][i % 3],
                    &format!("u{}", i % 7),
                    &format!("r{}", i % 5),
                    if i % 2 == 0 { Metric::Naturalness } else { Metric::Similarity },
                    rng.gen_range(0.0..100.0),
                )
            })
            .collect();
        // Welford's online mean and M2 per group.
        let mut acc: BTreeMap<(String, Metric), (usize, f64, f64)> = BTreeMap::new();
        for r in &records {
            let e = acc.entry((r.system.clone(), r.metric)).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            let delta = r.score - e.1;
            e.1 += delta / e.0 as f64;
            e.2 += delta * (r.score - e.1);
        }
        for row in mushra_summary(&records) {
            let (n, mean, m2) = acc[&(row.system.clone(), row.metric)];
            assert_eq!(n, row.n);
            assert!((mean - row.mean).abs() < 1e-12);
            let var = m2 / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap().inverse_cdf(0.975);
            let half = t * var.sqrt() / (n as f64).sqrt();
            assert!((half - row.ci95_half_width.unwrap()).abs() < 1e-12);
        }
    }

    fn tagged(system: &str, utt: &str, snr: SnrTag, score: f64) -> ScoreRecord {
        ScoreRecord {
            snr_db: snr,
            ..record(system, utt, "r1", Metric::Naturalness, score)
        }
    }

    #[test]
    fn bucket_boundaries_go_right() {
        let records = vec![
            tagged("voicy", "u1", SnrTag::Db(3.0), 60.0),
            tagged("voicy", "u2", SnrTag::Db(5.0), 70.0),
            tagged("voicy", "u3", SnrTag::Db(9.0), 80.0),
        ];
        let rows = snr_bucket_report(&records, &BTreeMap::new(), &[0.0, 5.0, 10.0]).unwrap();
        // Two ranges plus clean, one system, one metric.
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].bucket.to_string(), "[0,5)");
        assert_eq!(rows[0].n, 1);
        assert_eq!(rows[0].mean, Some(60.0));
        assert_eq!(rows[1].bucket.to_string(), "[5,10)");
        assert_eq!(rows[1].n, 2);
        assert_eq!(rows[1].mean, Some(75.0));
        assert_eq!(rows[2].bucket, SnrBucket::Clean);
        assert_eq!(rows[2].n, 0);
        assert_eq!(rows[2].mean, None);
    }

    #[test]
    fn clean_gets_its_own_bucket() {
        let records = vec![
            tagged("voicy", "u1", SnrTag::Clean, 90.0),
            tagged("voicy", "u2", SnrTag::Clean, 100.0),
        ];
        let rows = snr_bucket_report(&records, &BTreeMap::new(), &[]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].bucket, SnrBucket::Clean);
        assert_eq!(rows[0].mean, Some(95.0));
        assert_eq!(rows[0].n, 2);
    }

    #[test]
    fn snr_map_overrides_record_tags() {
        let records = vec![tagged("voicy", "u1", SnrTag::Clean, 50.0)];
        let map = BTreeMap::from([("u1".to_string(), SnrTag::Db(2.0))]);
        let rows = snr_bucket_report(&records, &map, &[0.0, 5.0]).unwrap();
        assert_eq!(rows[0].bucket.to_string(), "[0,5)");
        assert_eq!(rows[0].n, 1);
        assert_eq!(rows[1].n, 0);
    }

    #[test]
    fn unordered_edges_are_rejected() {
        let err = snr_bucket_report(&[], &BTreeMap::new(), &[5.0, 0.0]).unwrap_err();
        assert!(matches!(err, EvalError::UnorderedEdges));
        assert!(snr_bucket_report(&[], &BTreeMap::new(), &[5.0, 5.0]).is_err());
    }

    #[test]
    fn bucket_means_match_the_summary_on_filtered_records() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let records: Vec<ScoreRecord> = (0..200)
            .map(|i| {
                let snr = if i % 5 == 0 {
                    SnrTag::Clean
                } else {
                    SnrTag::Db(rng.gen_range(-5.0..20.0))
                };
                let mut r = tagged(["a", "b"][i % 2], &format!("u{i}"), snr, 0.0);
                r.metric = if i % 3 == 0 { Metric::Similarity } else { Metric::Naturalness };
                r.score = rng.gen_range(0.0..100.0);
                r
            })
            .collect();
        let edges = [-5.0, 0.0, 5.0, 10.0, 20.0];
        let rows = snr_bucket_report(&records, &BTreeMap::new(), &edges).unwrap();
        for row in rows.iter().filter(|r| r.n > 0) {
            let filtered: Vec<ScoreRecord> = records
                .iter()
                .filter(|r| {
                    let hit = match (r.snr_db, row.bucket) {
                        (SnrTag::Clean, SnrBucket::Clean) => true,
                        (SnrTag::Db(v), SnrBucket::Range { lo, hi }) => lo <= v && v < hi,
                        _ => false,
                    };
                    hit && r.system == row.system && r.metric == row.metric
                })
                .cloned()
                .collect();
            let summary = mushra_summary(&filtered);
            assert_eq!(summary.len(), 1);
            assert_eq!(summary[0].mean, row.mean.unwrap());
            assert_eq!(summary[0].n, row.n);
        }
    }

    #[test]
    fn tables_are_stable_under_record_reordering() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let records: Vec<ScoreRecord> = (0..60)
            .map(|i| {
                let mut r = tagged(
                    ["x", "y", "z"][i % 3],
                    &format!("u{}", i % 4),
                    if i % 2 == 0 { SnrTag::Clean } else { SnrTag::Db((i % 15) as f64) },
                    rng.gen_range(0.0..100.0),
                );
                r.metric = if i % 2 == 0 { Metric::Similarity } else { Metric::Naturalness };
                r
            })
            .collect();
        let mut shuffled = records.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        assert_ne!(records, shuffled);
        assert_eq!(
            mushra_tsv(&mushra_summary(&records)),
            mushra_tsv(&mushra_summary(&shuffled))
        );
        let edges = [0.0, 5.0, 10.0, 15.0];
        assert_eq!(
            snr_bucket_tsv(&snr_bucket_report(&records, &BTreeMap::new(), &edges).unwrap()),
            snr_bucket_tsv(&snr_bucket_report(&shuffled, &BTreeMap::new(), &edges).unwrap())
        );
    }

    #[test]
    fn tsv_has_headers_and_na_cells() {
        let rows = mushra_summary(&[record("voicy", "u1", "r1", Metric::Similarity, 42.0)]);
        let tsv = mushra_tsv(&rows);
        let mut lines = tsv.lines();
        assert_eq!(lines.next().unwrap(), "system\tmetric\tmean\tci95_half_width\tn");
        assert_eq!(lines.next().unwrap(), "voicy\tsimilarity\t42.000000\tNA\t1");
    }

    fn tiny_state() -> ModelState {
        let mut features = FeatureConfig::default();
        features.mel.n_mels = 6;
        let cfg = ModelConfig {
            d_s: 4,
            d_c: 3,
            d_p: 4,
            ds_factor: 4,
            enc_hidden: 4,
            dec_hidden: 5,
            emb_dim: 3,
            seed: 11,
            inventory_id: "toy-v1".into(),
            inventory: ["sil", "aa"].iter().map(|s| s.to_string()).collect(),
            features,
            ..ModelConfig::default()
        };
        ModelState::new(cfg).unwrap()
    }

    fn random_mel(state: &ModelState, n_frames: usize, seed: u64) -> MelSpectrogram {
        let n_mels = state.config.n_mels();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        MelSpectrogram {
            values: (0..n_frames * n_mels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            n_frames,
            n_mels,
            hop_size: state.config.features.stft.hop_size,
            sample_rate_hz: state.config.features.sample_rate_hz,
        }
    }

    #[test]
    fn self_comparison_is_perfect() {
        let state = tiny_state();
        let mel = random_mel(&state, 12, 3);
        let p = objective_proxies(&mel, &mel, &mel, &state).unwrap();
        assert_eq!(p.mel_mse, 0.0);
        assert!((p.speaker_cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mel_mse_matches_hand_arithmetic() {
        let a = MelSpectrogram {
            values: vec![0.0, 1.0, 2.0, 3.0],
            n_frames: 2,
            n_mels: 2,
            hop_size: 200,
            sample_rate_hz: 16_000,
        };
        let mut b = a.clone();
        b.values = vec![1.0, 1.0, 2.0, 5.0];
        // Squared diffs 1, 0, 0, 4 over four cells.
        assert_eq!(mel_mse(&a, &b).unwrap(), 1.25);
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let state = tiny_state();
        let a = random_mel(&state, 12, 3);
        let b = random_mel(&state, 11, 4);
        assert!(matches!(
            objective_proxies(&a, &b, &a, &state),
            Err(EvalError::FrameMismatch { got: 12, want: 11 })
        ));
    }

    #[test]
    fn score_files_round_trip_and_validate() {
        let records = vec![
            tagged("voicy", "u1", SnrTag::Db(7.5), 66.0),
            tagged("voicy", "u2", SnrTag::Clean, 80.0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        write_scores(&records, &path).unwrap();
        assert_eq!(read_scores(&path).unwrap(), records);

        let err = parse_scores(
            "{\"system\":\"v\",\"utterance\":\"u\",\"rater\":\"r\",\"metric\":\"naturalness\",\"score\":120.0,\"snr_db\":\"clean\"}",
        )
        .unwrap_err();
        assert!(err.to_string().contains("outside [0, 100]"), "{err}");

        let err = parse_scores(
            "{\"system\":\"v\",\"utterance\":\"u\",\"rater\":\"r\",\"metric\":\"naturalness\",\"score\":50.0,\"snr_db\":\"murky\"}",
        )
        .unwrap_err();
        assert!(err.to_string().contains("1"), "{err}");
    }
}
