//! ROUGE-1/2/L, corpus BLEU-1..4 and novel-token recall over token sequences.
//!
//! Matching is exact token equality; there is no stemming or stopword
//! removal. Corpus ROUGE is the mean of per-sample F1; BLEU aggregates
//! clipped n-gram counts and lengths over the whole corpus.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, cand: usize, reference: usize) -> Prf {
        let precision = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap and the two n-gram totals.
fn clipped_overlap<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &HashMap<&[T], usize>| m.values().sum::<usize>();
    (overlap, total(&cand), total(&refs))
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    let (overlap, c, r) = clipped_overlap(candidate, reference, n);
    Prf::from_counts(overlap, c, r)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Corpus BLEU-1 through BLEU-`max_n`, one reference per candidate.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Vec<f64> {
    assert_eq!(candidates.len(), references.len(), "one reference per candidate");
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let (o, tc, _) = clipped_overlap(c, r, n);
            matched[n - 1] += o;
            total[n - 1] += tc;
        }
    }
    if cand_len == 0 {
        return vec![0.0; max_n];
    }
    let bp = (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0);
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    out
}

/// Among reference tokens absent from the transcript, the fraction that the
/// candidate contains. 1.0 when there are none.
pub fn novel_token_recall<T: Eq + Hash>(candidate: &[T], reference: &[T], transcript: &[T]) -> f64 {
    let seen: HashSet<&T> = transcript.iter().collect();
    let novel: HashSet<&T> = reference.iter().filter(|t| !seen.contains(t)).collect();
    if novel.is_empty() {
        return 1.0;
    }
    let produced: HashSet<&T> = candidate.iter().collect();
    novel.iter().filter(|t| produced.contains(*t)).count() as f64 / novel.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rouge_l_f: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub novel_token_recall: Option<f64>,
}

/// Per-sample scores used in CSV output.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rouge_l_f: f64,
    pub novel_token_recall: Option<f64>,
}

pub fn score_sample<T: Eq + Hash>(candidate: &[T], reference: &[T], transcript: Option<&[T]>) -> SampleScores {
    SampleScores {
        rouge1_f: rouge_n(candidate, reference, 1).f1,
        rouge2_f: rouge_n(candidate, reference, 2).f1,
        rouge_l_f: rouge_l(candidate, reference).f1,
        novel_token_recall: transcript.map(|t| novel_token_recall(candidate, reference, t)),
    }
}

/// Corpus-level report. `transcripts`, when given, enables novel-token recall
/// (averaged over samples).
pub fn score_corpus<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    transcripts: Option<&[Vec<T>]>,
) -> MetricReport {
    let n = candidates.len();
    let per: Vec<SampleScores> = (0..n)
        .map(|i| {
            score_sample(
                &candidates[i],
                &references[i],
                transcripts.map(|t| t[i].as_slice()),
            )
        })
        .collect();
    let mean = |f: &dyn Fn(&SampleScores) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            per.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let b = bleu(candidates, references, 4);
    MetricReport {
        rouge1_f: mean(&|s| s.rouge1_f),
        rouge2_f: mean(&|s| s.rouge2_f),
        rouge_l_f: mean(&|s| s.rouge_l_f),
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        novel_token_recall: transcripts.map(|_| mean(&|s| s.novel_token_recall.unwrap_or(1.0))),
    }
}
