//! Corpus-level caption metrics: BLEU-4, ROUGE-L, and CIDEr-D.
//!
//! BLEU-4 is canonical corpus BLEU: modified n-gram precisions for
//! n = 1..4 clipped against the best reference count, geometric mean,
//! closest-reference-length brevity penalty, no smoothing (any zero
//! precision zeroes the score). ROUGE-L is the LCS F-measure with
//! β = 1.2, best reference per sample, averaged over samples. CIDEr is
//! the CIDEr-D variant: TF-IDF n-gram vectors with `idf =
//! log(|corpus|/df)`, clipped cosine per n averaged over n and
//! references, Gaussian length penalty with σ = 6, scaled by 10.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAX_NGRAM: usize = 4;
const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;
const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("CIDEr needs at least two samples for document frequencies, got {0}")]
    DegenerateIdf(usize),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// One evaluation pair: a hypothesis and its non-empty reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// A corpus of evaluation pairs with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCorpus {
    entries: Vec<EvalEntry>,
}

impl EvalCorpus {
    pub fn new(entries: Vec<EvalEntry>) -> Result<Self, MetricError> {
        if entries.is_empty() {
            return Err(MetricError::EmptyCorpus);
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(MetricError::InvalidCorpus(format!(
                    "duplicate sample id {:?}",
                    e.id
                )));
            }
            if e.references.is_empty() || e.references.iter().any(|r| r.is_empty()) {
                return Err(MetricError::InvalidCorpus(format!(
                    "sample {:?} must have non-empty references",
                    e.id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[EvalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-sample metric breakdown. BLEU-4 is corpus-level only and has no
/// per-sample column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleScores {
    pub id: String,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<PerSampleScores>>,
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 without smoothing.
pub fn bleu4(corpus: &EvalCorpus) -> Result<f64, MetricError> {
    let mut clipped = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut hyp_len_sum = 0usize;
    let mut ref_len_sum = 0usize;

    for entry in corpus.entries() {
        let hyp = &entry.hypothesis;
        for (n, (clipped_n, total_n)) in clipped.iter_mut().zip(total.iter_mut()).enumerate() {
            let n = n + 1;
            let hyp_counts = ngram_counts(hyp, n);
            for (gram, count) in &hyp_counts {
                let best_ref = entry
                    .references
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                *clipped_n += (*count).min(best_ref);
            }
            *total_n += hyp.len().saturating_sub(n - 1);
        }
        hyp_len_sum += hyp.len();
        // closest reference length; ties resolved toward the shorter
        let closest = entry
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| {
                let diff = (len as isize - hyp.len() as isize).abs();
                (diff, len)
            })
            .expect("non-empty references");
        ref_len_sum += closest;
    }

    let mut log_precision_sum = 0.0;
    for n in 0..MAX_NGRAM {
        if total[n] == 0 || clipped[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped[n] as f64 / total[n] as f64).ln();
    }
    if hyp_len_sum == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len_sum > ref_len_sum {
        1.0
    } else {
        (1.0 - ref_len_sum as f64 / hyp_len_sum as f64).exp()
    };
    Ok(bp * (log_precision_sum / MAX_NGRAM as f64).exp())
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair.
fn rouge_l_single(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / hyp.len() as f64;
    let recall = lcs / reference.len() as f64;
    let beta_sq = ROUGE_BETA * ROUGE_BETA;
    (1.0 + beta_sq) * precision * recall / (recall + beta_sq * precision)
}

fn rouge_l_entry(entry: &EvalEntry) -> f64 {
    entry
        .references
        .iter()
        .map(|r| rouge_l_single(&entry.hypothesis, r))
        .fold(0.0, f64::max)
}

/// Mean over samples of the best-reference ROUGE-L F-measure.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64, MetricError> {
    let total: f64 = corpus.entries().iter().map(rouge_l_entry).sum();
    Ok(total / corpus.len() as f64)
}

type TfIdf<'a> = BTreeMap<&'a [String], f64>;

fn tfidf_vector<'a>(
    tokens: &'a [String],
    n: usize,
    df: &BTreeMap<(usize, Vec<String>), usize>,
    log_corpus: f64,
) -> (TfIdf<'a>, f64) {
    let mut vec = TfIdf::new();
    for (gram, count) in ngram_counts(tokens, n) {
        let doc_freq = df.get(&(n, gram.to_vec())).copied().unwrap_or(0).max(1) as f64;
        let idf = log_corpus - doc_freq.ln();
        vec.insert(gram, count as f64 * idf);
    }
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    (vec, norm)
}

fn cider_entry(
    entry: &EvalEntry,
    df: &BTreeMap<(usize, Vec<String>), usize>,
    log_corpus: f64,
) -> f64 {
    let hyp_len = entry.hypothesis.len() as f64;
    let mut per_n_sum = [0.0; MAX_NGRAM];
    for reference in &entry.references {
        let delta = hyp_len - reference.len() as f64;
        let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for (n_idx, acc) in per_n_sum.iter_mut().enumerate() {
            let n = n_idx + 1;
            let (hyp_vec, hyp_norm) = tfidf_vector(&entry.hypothesis, n, df, log_corpus);
            let (ref_vec, ref_norm) = tfidf_vector(reference, n, df, log_corpus);
            if hyp_norm == 0.0 || ref_norm == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (gram, &h) in &hyp_vec {
                if let Some(&r) = ref_vec.get(gram) {
                    dot += h.min(r) * r;
                }
            }
            *acc += dot / (hyp_norm * ref_norm) * penalty;
        }
    }
    let n_refs = entry.references.len() as f64;
    let mean_over_n: f64 = per_n_sum.iter().sum::<f64>() / MAX_NGRAM as f64;
    CIDER_SCALE * mean_over_n / n_refs
}

fn cider_document_frequencies(corpus: &EvalCorpus) -> BTreeMap<(usize, Vec<String>), usize> {
    let mut df = BTreeMap::new();
    for entry in corpus.entries() {
        let mut seen = std::collections::HashSet::new();
        for reference in &entry.references {
            for n in 1..=MAX_NGRAM {
                for (gram, _) in ngram_counts(reference, n) {
                    seen.insert((n, gram.to_vec()));
                }
            }
        }
        for key in seen {
            *df.entry(key).or_insert(0) += 1;
        }
    }
    df
}

/// Corpus CIDEr-D. Needs at least two samples so document frequencies
/// are meaningful.
pub fn cider(corpus: &EvalCorpus) -> Result<f64, MetricError> {
    if corpus.len() < 2 {
        return Err(MetricError::DegenerateIdf(corpus.len()));
    }
    let df = cider_document_frequencies(corpus);
    let log_corpus = (corpus.len() as f64).ln();
    let total: f64 = corpus
        .entries()
        .iter()
        .map(|e| cider_entry(e, &df, log_corpus))
        .sum();
    Ok(total / corpus.len() as f64)
}

/// All three metrics plus the per-sample breakdown.
pub fn score_corpus(corpus: &EvalCorpus) -> Result<MetricReport, MetricError> {
    let bleu = bleu4(corpus)?;
    let rouge = rouge_l(corpus)?;
    let cid = cider(corpus)?;
    let df = cider_document_frequencies(corpus);
    let log_corpus = (corpus.len() as f64).ln();
    let per_sample = corpus
        .entries()
        .iter()
        .map(|e| PerSampleScores {
            id: e.id.clone(),
            rouge_l: rouge_l_entry(e),
            cider: cider_entry(e, &df, log_corpus),
        })
        .collect();
    Ok(MetricReport {
        bleu4: bleu,
        rouge_l: rouge,
        cider: cid,
        per_sample: Some(per_sample),
    })
}

/// Loads an evaluation corpus from JSONL lines of
/// `{"id", "hypothesis", "references"}`, lowercasing every token.
pub fn load_eval_corpus(path: impl AsRef<Path>) -> Result<EvalCorpus, MetricError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: EvalEntry = serde_json::from_str(&line).map_err(|e| MetricError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        for t in &mut entry.hypothesis {
            *t = t.to_lowercase();
        }
        for r in &mut entry.references {
            for t in r {
                *t = t.to_lowercase();
            }
        }
        entries.push(entry);
    }
    EvalCorpus::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn entry(id: &str, hyp: &str, refs: &[&str]) -> EvalEntry {
        EvalEntry {
            id: id.into(),
            hypothesis: toks(hyp),
            references: refs.iter().map(|r| toks(r)).collect(),
        }
    }

    #[test]
    fn perfect_match_scores_one() {
        let corpus = EvalCorpus::new(vec![
            entry("a", "the cat sat on the mat", &["the cat sat on the mat"]),
            entry(
                "b",
                "a dog ran far away today",
                &["a dog ran far away today"],
            ),
        ])
        .unwrap();
        assert!((bleu4(&corpus).unwrap() - 1.0).abs() < 1e-12);
        assert!((rouge_l(&corpus).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_shared_fourgram_zeroes_bleu() {
        let corpus = EvalCorpus::new(vec![entry(
            "a",
            "one two three four five",
            &["six seven eight nine ten"],
        )])
        .unwrap();
        assert_eq!(bleu4(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn rouge_worked_example() {
        // "a c" vs "a b c": LCS=2, P=1, R=2/3,
        // F = (1+β²)·P·R / (R+β²·P) with β=1.2 → 4.88/6.32
        let corpus = EvalCorpus::new(vec![entry("a", "a c", &["a b c"])]).unwrap();
        let f = rouge_l(&corpus).unwrap();
        assert!((f - 4.88 / 6.32).abs() < 1e-12, "got {f}");
    }

    #[test]
    fn disjoint_rouge_is_zero_and_empty_hypothesis_is_zero() {
        let corpus = EvalCorpus::new(vec![
            entry("a", "x y z", &["p q r"]),
            entry("b", "", &["p q"]),
        ])
        .unwrap();
        assert_eq!(rouge_l(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn cider_rejects_single_sample_and_rewards_exact_matches() {
        let single = EvalCorpus::new(vec![entry("a", "a b", &["a b"])]).unwrap();
        assert!(matches!(cider(&single), Err(MetricError::DegenerateIdf(1))));

        let corpus = EvalCorpus::new(vec![
            entry(
                "a",
                "red bird sings high notes",
                &["red bird sings high notes"],
            ),
            entry(
                "b",
                "green frog jumps over logs",
                &["green frog jumps over logs"],
            ),
            entry(
                "c",
                "blue fish swims very deep",
                &["blue fish swims very deep"],
            ),
        ])
        .unwrap();
        let score = cider(&corpus).unwrap();
        assert!((score - 10.0).abs() < 1e-9, "got {score}");
    }

    #[test]
    fn cider_zero_overlap_is_zero() {
        let corpus = EvalCorpus::new(vec![
            entry("a", "aa bb cc", &["dd ee ff"]),
            entry("b", "gg hh ii", &["jj kk ll"]),
        ])
        .unwrap();
        assert_eq!(cider(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_order_invariant() {
        let entries = vec![
            entry("a", "the cat sat", &["the cat sat on a mat"]),
            entry(
                "b",
                "a dog barks loud",
                &["a dog barks", "the dog barks loud"],
            ),
            entry("c", "fish swim deep", &["fish swim very deep today"]),
        ];
        let fwd = EvalCorpus::new(entries.clone()).unwrap();
        let mut rev_entries = entries;
        rev_entries.reverse();
        let rev = EvalCorpus::new(rev_entries).unwrap();
        assert_eq!(bleu4(&fwd).unwrap(), bleu4(&rev).unwrap());
        assert_eq!(rouge_l(&fwd).unwrap(), rouge_l(&rev).unwrap());
        assert!((cider(&fwd).unwrap() - cider(&rev).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn replacing_hypothesis_with_reference_never_hurts() {
        let base = vec![
            entry("a", "cat sat mat", &["the cat sat on the mat"]),
            entry("b", "dog runs", &["a dog runs far"]),
            entry("c", "bird", &["a bird sings"]),
        ];
        let before = score_corpus(&EvalCorpus::new(base.clone()).unwrap()).unwrap();
        let mut upgraded = base;
        upgraded[1].hypothesis = upgraded[1].references[0].clone();
        let after = score_corpus(&EvalCorpus::new(upgraded).unwrap()).unwrap();
        assert!(after.bleu4 >= before.bleu4 - 1e-12);
        assert!(after.rouge_l >= before.rouge_l - 1e-12);
        assert!(after.cider >= before.cider - 1e-9);
    }

    #[test]
    fn bounds_hold_on_a_mixed_corpus() {
        let corpus = EvalCorpus::new(vec![
            entry("a", "the cat sat on the mat", &["the cat sat on the mat"]),
            entry("b", "dog", &["a dog runs far away"]),
            entry("c", "x y", &["p q r s"]),
        ])
        .unwrap();
        let report = score_corpus(&corpus).unwrap();
        assert!((0.0..=1.0).contains(&report.bleu4));
        assert!((0.0..=1.0).contains(&report.rouge_l));
        assert!(report.cider >= 0.0);
    }

    #[test]
    fn corpus_validation_rejects_bad_shapes() {
        assert!(matches!(
            EvalCorpus::new(vec![]),
            Err(MetricError::EmptyCorpus)
        ));
        assert!(EvalCorpus::new(vec![entry("a", "x", &["y"]), entry("a", "z", &["w"]),]).is_err());
        assert!(EvalCorpus::new(vec![EvalEntry {
            id: "a".into(),
            hypothesis: toks("x"),
            references: vec![vec![]],
        }])
        .is_err());
    }

    #[test]
    fn eval_corpus_jsonl_round_trip_with_lowercasing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id": "s1", "hypothesis": ["The", "Cat"], "references": [["the", "cat"]]}"#,
                "\n",
                r#"{"id": "s2", "hypothesis": ["dog"], "references": [["dog", "runs"], ["a", "dog"]]}"#,
                "\n"
            ),
        )
        .unwrap();
        let corpus = load_eval_corpus(&path).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.entries()[0].hypothesis, toks("the cat"));
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            load_eval_corpus(&path),
            Err(MetricError::Parse { line: 1, .. })
        ));
    }
}
