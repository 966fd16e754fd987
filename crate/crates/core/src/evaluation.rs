//! Word error rate, intent-level task success, and the aggregation rules
//! the reports are built from.
//!
//! All texts pass through one documented normalization (lowercase, strip
//! punctuation, collapse whitespace) before scoring, so reported numbers are
//! reproducible from transcripts alone. WER comes from a word-level
//! Levenshtein alignment; ties during backtrace prefer substitution over
//! deletion over insertion, which fixes the S/D/I split without changing the
//! total distance.

use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::synthcorpus::Severity;
use crate::training::RoundLog;

/// Lowercases, drops punctuation, and collapses whitespace runs.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Normalized word tokens.
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Edit-alignment error counts and the resulting WER (as a percent).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    /// 100 * (S + D + I) / max(1, reference words).
    pub wer: f64,
}

impl WerBreakdown {
    fn from_counts(substitutions: usize, deletions: usize, insertions: usize, reference_words: usize) -> Self {
        let errors = substitutions + deletions + insertions;
        WerBreakdown {
            substitutions,
            deletions,
            insertions,
            reference_words,
            wer: 100.0 * errors as f64 / reference_words.max(1) as f64,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// An empty reference cannot be scored meaningfully; the max(1, ·) guard
    /// applied, and callers may want to flag the row.
    pub fn empty_reference(&self) -> bool {
        self.reference_words == 0
    }
}

/// Word error rate of `hypothesis` against `reference`.
pub fn wer(reference: &str, hypothesis: &str) -> WerBreakdown {
    let r = words(reference);
    let h = words(hypothesis);
    let (n, m) = (r.len(), h.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in dp[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }

    let (mut i, mut j) = (n, m);
    let (mut subs, mut dels, mut inss) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                subs += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            dels += 1;
            i -= 1;
        } else {
            inss += 1;
            j -= 1;
        }
    }
    WerBreakdown::from_counts(subs, dels, inss, n)
}

/// Pools alignments into one corpus-level WER: error counts and reference
/// words are summed before dividing.
pub fn pool_wer<'a, I>(parts: I) -> WerBreakdown
where
    I: IntoIterator<Item = &'a WerBreakdown>,
{
    let (mut s, mut d, mut i, mut n) = (0, 0, 0, 0);
    for p in parts {
        s += p.substitutions;
        d += p.deletions;
        i += p.insertions;
        n += p.reference_words;
    }
    WerBreakdown::from_counts(s, d, i, n)
}

/// Pooled WER over paired reference/hypothesis lists.
pub fn corpus_wer<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H]) -> Result<WerBreakdown> {
    if references.len() != hypotheses.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("corpus_wer"));
    }
    let parts: Vec<WerBreakdown> = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| wer(r.as_ref(), h.as_ref()))
        .collect();
    Ok(pool_wer(&parts))
}

/// Assistant task success rate: the percentage of pairs whose hypothesis
/// parses to exactly the reference's intent. A no-parse never matches.
pub fn atsr<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], grammar: &Grammar) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("atsr"));
    }
    let matches = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| {
            match (grammar.parse_intent(h.as_ref()), grammar.parse_intent(r.as_ref())) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            }
        })
        .count();
    Ok(100.0 * matches as f64 / references.len() as f64)
}

/// 100 * (baseline - new) / baseline, rounded to the nearest integer.
pub fn relative_improvement(baseline: f64, new: f64) -> Result<i64> {
    if baseline <= 0.0 {
        return Err(Error::Data(format!(
            "relative improvement needs a positive baseline, got {baseline}"
        )));
    }
    Ok((100.0 * (baseline - new) / baseline).round() as i64)
}

/// Middle element for odd n, mean of the middle two for even n.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Group medians over the three disorder severities plus the pooled median.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SeverityMedians {
    pub mild: Option<f64>,
    pub moderate: Option<f64>,
    pub severe: Option<f64>,
    pub overall: Option<f64>,
}

impl SeverityMedians {
    pub fn get(&self, severity: Severity) -> Option<f64> {
        match severity {
            Severity::Mild => self.mild,
            Severity::Moderate => self.moderate,
            Severity::Severe => self.severe,
            Severity::Typical => None,
        }
    }
}

/// Per-severity and overall medians of per-speaker values. Labels must be
/// disorder severities; an empty group simply has no median.
pub fn median_by_severity(values: &[f64], labels: &[Severity]) -> Result<SeverityMedians> {
    if values.len() != labels.len() {
        return Err(Error::LengthMismatch {
            hyps: values.len(),
            refs: labels.len(),
        });
    }
    let mut groups: [Vec<f64>; 3] = Default::default();
    for (&v, &label) in values.iter().zip(labels) {
        let slot = match label {
            Severity::Mild => 0,
            Severity::Moderate => 1,
            Severity::Severe => 2,
            Severity::Typical => {
                return Err(Error::Data("median_by_severity expects disordered speakers".into()))
            }
        };
        groups[slot].push(v);
    }
    Ok(SeverityMedians {
        mild: median(&groups[0]),
        moderate: median(&groups[1]),
        severe: median(&groups[2]),
        overall: median(values),
    })
}

/// Pools every logged (hypothesis-at-recording-time, reference) pair across
/// rounds into a single WER: the transcript-correction effort a user would
/// have spent over the whole consecutive run.
pub fn correction_cost(logs: &[RoundLog]) -> Result<WerBreakdown> {
    let parts: Vec<WerBreakdown> = logs
        .iter()
        .flat_map(|log| log.pairs.iter())
        .map(|(hyp, reference)| wer(reference, hyp))
        .collect();
    if parts.is_empty() {
        return Err(Error::EmptyInput("correction_cost"));
    }
    Ok(pool_wer(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Turn ON, the Lights!  "), "turn on the lights");
        assert_eq!(normalize("don't"), "dont");
        assert_eq!(normalize("a\t b\nc"), "a b c");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn wer_identical_is_zero() {
        let b = wer("the cat sat", "the cat sat");
        assert_eq!((b.substitutions, b.deletions, b.insertions), (0, 0, 0));
        assert_eq!(b.wer, 0.0);
    }

    #[test]
    fn wer_single_substitution() {
        let b = wer("turn on kitchen lights", "turn on the lights");
        assert_eq!(b.substitutions, 1);
        assert_eq!(b.deletions, 0);
        assert_eq!(b.insertions, 0);
        assert_eq!(b.wer, 25.0);
    }

    #[test]
    fn wer_empty_hypothesis_is_all_deletions() {
        let b = wer("a b c d", "");
        assert_eq!(b.deletions, 4);
        assert_eq!(b.wer, 100.0);
    }

    #[test]
    fn wer_empty_reference_is_guarded_and_flagged() {
        let b = wer("", "word");
        assert!(b.empty_reference());
        assert_eq!(b.insertions, 1);
        assert_eq!(b.wer, 100.0);
    }

    #[test]
    fn wer_is_normalization_invariant() {
        let b = wer("Turn ON, kitchen...  Lights", "turn on kitchen lights");
        assert_eq!(b.wer, 0.0);
    }

    #[test]
    fn wer_tie_prefers_substitutions() {
        // "a b" vs "b a" has distance 2 either as two substitutions or as
        // one insertion plus one deletion; backtrace must pick substitutions.
        let b = wer("a b", "b a");
        assert_eq!(b.errors(), 2);
        assert_eq!(b.substitutions, 2);
        assert_eq!((b.deletions, b.insertions), (0, 0));
    }

    #[test]
    fn wer_counts_are_consistent() {
        let cases = [
            ("a b c", "a x c"),
            ("a b c d", "a c"),
            ("x", "x y z"),
            ("one two three", "three two one"),
        ];
        for (r, h) in cases {
            let b = wer(r, h);
            let n = words(r).len() as i64;
            let m = words(h).len() as i64;
            assert_eq!(b.deletions as i64 - b.insertions as i64, n - m, "{r:?} vs {h:?}");
        }
    }

    #[test]
    fn pooled_wer_sums_before_dividing() {
        let parts = [wer("a b", "a b"), wer("a b c d", "a x c")];
        let pooled = pool_wer(&parts);
        assert_eq!(pooled.reference_words, 6);
        assert_eq!(pooled.errors(), 2);
        assert!((pooled.wer - 100.0 * 2.0 / 6.0).abs() < 1e-12);

        let c = corpus_wer(&["a b", "a b c d"], &["a b", "a x c"]).unwrap();
        assert_eq!(c, pooled);
    }

    #[test]
    fn atsr_gates() {
        let g = Grammar::default_ha();
        let refs = vec![
            "turn on kitchen lights".to_string(),
            "play abba on spotify".to_string(),
            "stop the radio".to_string(),
            "dim the bedroom lights".to_string(),
        ];
        assert_eq!(atsr(&refs, &refs, &g).unwrap(), 100.0);

        let garbage = vec!["zzz".to_string(); 4];
        assert_eq!(atsr(&garbage, &refs, &g).unwrap(), 0.0);

        // One intent-changing error (kitchen -> bedroom), three intact.
        let hyps = vec![
            "turn on bedroom lights".to_string(),
            "play abba on spotify".to_string(),
            "stop the radio".to_string(),
            "dim the bedroom lights".to_string(),
        ];
        assert_eq!(atsr(&hyps, &refs, &g).unwrap(), 75.0);

        assert!(atsr(&hyps[..2], &refs, &g).is_err());
    }

    #[test]
    fn relative_improvement_reproduces_reported_pairs() {
        for (b, n, expect) in [
            (23.2, 6.5, 72),
            (41.3, 12.1, 71),
            (80.4, 19.0, 76),
            (33.6, 9.7, 71),
            (23.2, 5.8, 75),
            (41.3, 11.8, 71),
            (80.4, 20.3, 75),
        ] {
            assert_eq!(relative_improvement(b, n).unwrap(), expect, "({b}, {n})");
        }
        assert_eq!(relative_improvement(5.0, 5.0).unwrap(), 0);
        assert!(relative_improvement(0.0, 1.0).is_err());
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), Some(2.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[5.0]), Some(5.0));
    }

    #[test]
    fn severity_grouping() {
        use Severity::*;
        let values = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
        let labels = [Mild, Mild, Moderate, Moderate, Severe, Severe];
        let m = median_by_severity(&values, &labels).unwrap();
        assert_eq!(m.mild, Some(15.0));
        assert_eq!(m.moderate, Some(35.0));
        assert_eq!(m.severe, Some(55.0));
        assert_eq!(m.overall, Some(35.0));

        let with_gap = median_by_severity(&[1.0], &[Severe]).unwrap();
        assert_eq!(with_gap.mild, None);
        assert_eq!(with_gap.severe, Some(1.0));

        assert!(median_by_severity(&[1.0], &[Typical]).is_err());
    }

    #[test]
    fn correction_cost_pools_round_logs() {
        let perfect = RoundLog {
            round: 0,
            pairs: vec![("turn on lights".into(), "turn on lights".into())],
            checkpoint: "r0".into(),
            losses: vec![],
        };
        assert_eq!(correction_cost(std::slice::from_ref(&perfect)).unwrap().wer, 0.0);

        let flawed = RoundLog {
            round: 1,
            pairs: vec![("turn off lights".into(), "turn on lights".into())],
            checkpoint: "r1".into(),
            losses: vec![],
        };
        let pooled = correction_cost(&[perfect, flawed]).unwrap();
        assert_eq!(pooled.reference_words, 6);
        assert_eq!(pooled.errors(), 1);
        assert!(correction_cost(&[]).is_err());
    }
}
