//! Report-generation metrics: corpus BLEU, an exact-match METEOR variant
//! (`meteor_lite`) and ROUGE-L.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag of [`tokenize`], reported alongside scores.
pub const TOKENIZER_VERSION: &str = "lower-alnum-punct-v1";

/// Floor substituted for zero n-gram precisions at corpus level.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Lowercases and splits into runs of alphanumerics; every other
/// non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

impl TokenPair {
    pub fn from_text(candidate: &str, reference: &str) -> Self {
        Self { candidate: tokenize(candidate), reference: tokenize(reference) }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Set when the corpus has no candidate tokens (score forced to 0).
    pub empty_candidate: bool,
}

/// Corpus BLEU with uniform weights over orders `1..=n`.
pub fn bleu_n(pairs: &[TokenPair], n: usize) -> Result<BleuScore> {
    if !matches!(n, 1 | 2 | 4) {
        return Err(Error::invalid(format!("BLEU order must be 1, 2 or 4, got {n}")));
    }
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let r: usize = pairs.iter().map(|p| p.reference.len()).sum();
    if c == 0 {
        return Ok(BleuScore { score: 0.0, precisions: vec![0.0; n], brevity_penalty: 0.0, empty_candidate: true });
    }
    let precisions: Vec<f64> = (1..=n)
        .map(|order| {
            let (mut hit, mut total) = (0usize, 0usize);
            for p in pairs {
                let refs = ngram_counts(&p.reference, order);
                for (g, cnt) in ngram_counts(&p.candidate, order) {
                    hit += cnt.min(refs.get(g).copied().unwrap_or(0));
                    total += cnt;
                }
            }
            if total == 0 {
                0.0
            } else {
                hit as f64 / total as f64
            }
        })
        .collect();
    let log_mean = precisions.iter().map(|&p| p.max(BLEU_EPSILON).ln()).sum::<f64>() / n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(BleuScore { score: bp * log_mean.exp(), precisions, brevity_penalty: bp, empty_candidate: false })
}

/// Search nodes explored before the chunk minimization settles for the best
/// alignment found so far.
const ALIGN_NODE_BUDGET: usize = 200_000;

/// Maximum exact-match alignment size and the fewest chunks achieving it.
fn align(cand: &[String], reference: &[String]) -> (usize, usize) {
    // candidate positions in order, each with its matching reference slots
    let options: Vec<Vec<usize>> =
        cand.iter().map(|w| reference.iter().enumerate().filter(|(_, r)| *r == w).map(|(j, _)| j).collect()).collect();
    let mut ref_count: HashMap<&String, usize> = HashMap::new();
    for w in reference {
        *ref_count.entry(w).or_insert(0) += 1;
    }
    let mut cand_count: HashMap<&String, usize> = HashMap::new();
    for w in cand {
        *cand_count.entry(w).or_insert(0) += 1;
    }
    let matches: usize = cand_count.iter().map(|(w, &c)| c.min(ref_count.get(w).copied().unwrap_or(0))).sum();
    if matches == 0 {
        return (0, 0);
    }

    struct Search<'a> {
        options: &'a [Vec<usize>],
        cand: &'a [String],
        used: Vec<bool>,
        remaining: HashMap<&'a String, usize>,
        target: usize,
        best: usize,
        nodes: usize,
    }

    impl Search<'_> {
        // (position, matched so far, previous aligned pair, chunks so far)
        fn go(&mut self, i: usize, matched: usize, prev: Option<(usize, usize)>, chunks: usize) {
            self.nodes += 1;
            if chunks >= self.best || self.nodes > ALIGN_NODE_BUDGET {
                return;
            }
            if matched == self.target {
                self.best = chunks;
                return;
            }
            if i == self.cand.len() {
                return;
            }
            let w = &self.cand[i];
            let left = self.remaining.get(w).copied().unwrap_or(0);
            // prefer continuing the current chunk
            let mut order: Vec<usize> = self.options[i].iter().copied().filter(|&j| !self.used[j]).collect();
            if let Some((pi, pj)) = prev {
                order.sort_by_key(|&j| !(pi + 1 == i && pj + 1 == j));
            }
            if left > 0 {
                for j in order {
                    let extends = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
                    self.used[j] = true;
                    *self.remaining.get_mut(w).expect("tracked word") -= 1;
                    self.go(i + 1, matched + 1, Some((i, j)), chunks + usize::from(!extends));
                    *self.remaining.get_mut(w).expect("tracked word") += 1;
                    self.used[j] = false;
                }
            }
            // skipping is only allowed while enough copies remain to reach the target
            let still_reachable = self.cand[i + 1..].iter().filter(|x| self.remaining.get(x).copied().unwrap_or(0) > 0).count();
            if matched + still_reachable >= self.target {
                self.go(i + 1, matched, prev, chunks);
            }
        }
    }

    let remaining: HashMap<&String, usize> =
        cand_count.keys().map(|w| (*w, (*cand_count.get(w).unwrap()).min(ref_count.get(w).copied().unwrap_or(0)))).collect();
    let mut s = Search {
        options: &options,
        cand,
        used: vec![false; reference.len()],
        remaining,
        target: matches,
        best: usize::MAX,
        nodes: 0,
    };
    s.go(0, 0, None, 0);
    (matches, s.best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorLite {
    pub score: f64,
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
}

/// METEOR with exact unigram matching only: `F = 10PR/(R+9P)`, fragmentation
/// penalty `0.5·(chunks/m)³`.
pub fn meteor_lite(pair: &TokenPair) -> Result<MeteorLite> {
    if pair.reference.is_empty() {
        return Err(Error::invalid("meteor_lite needs a non-empty reference"));
    }
    let (m, chunks) = align(&pair.candidate, &pair.reference);
    if m == 0 {
        return Ok(MeteorLite { score: 0.0, matches: 0, chunks: 0, precision: 0.0, recall: 0.0 });
    }
    let p = m as f64 / pair.candidate.len() as f64;
    let r = m as f64 / pair.reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(MeteorLite { score: f * (1.0 - penalty), matches: m, chunks, precision: p, recall: r })
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(pair: &TokenPair) -> Result<f64> {
    if pair.reference.is_empty() {
        return Err(Error::invalid("ROUGE-L needs a non-empty reference"));
    }
    let l = lcs_len(&pair.candidate, &pair.reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / pair.candidate.len() as f64;
    let r = l as f64 / pair.reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextReport {
    pub tokenizer: String,
    pub n_pairs: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    /// Mean over pairs.
    pub meteor_lite: f64,
    /// Mean over pairs.
    pub rouge_l: f64,
    pub empty_candidate: bool,
}

pub fn text_report(pairs: &[TokenPair]) -> Result<TextReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no text pairs"));
    }
    let b1 = bleu_n(pairs, 1)?;
    let meteor: f64 = pairs.iter().map(|p| meteor_lite(p).map(|m| m.score)).sum::<Result<f64>>()?;
    let rouge: f64 = pairs.iter().map(rouge_l).sum::<Result<f64>>()?;
    Ok(TextReport {
        tokenizer: TOKENIZER_VERSION.into(),
        n_pairs: pairs.len(),
        bleu_1: b1.score,
        bleu_2: bleu_n(pairs, 2)?.score,
        bleu_4: bleu_n(pairs, 4)?.score,
        meteor_lite: meteor / pairs.len() as f64,
        rouge_l: rouge / pairs.len() as f64,
        empty_candidate: b1.empty_candidate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(c: &str, r: &str) -> TokenPair {
        TokenPair::from_text(c, r)
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("A 3.5cm Mass, left-kidney."), vec!["a", "3", ".", "5cm", "mass", ",", "left", "-", "kidney", "."]);
    }

    #[test]
    fn bleu_examples() {
        let p = [pair("a b c", "a b d")];
        assert!((bleu_n(&p, 1).unwrap().score - 2.0 / 3.0).abs() < 1e-12);
        assert!((bleu_n(&p, 2).unwrap().score - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let same = [pair("the mass is solid", "the mass is solid")];
        for n in [1, 2, 4] {
            assert!((bleu_n(&same, n).unwrap().score - 1.0).abs() < 1e-12);
        }
        assert!(bleu_n(&[pair("", "a b")], 1).unwrap().empty_candidate);
        assert!(bleu_n(&p, 3).is_err());
    }

    #[test]
    fn meteor_examples() {
        let m = meteor_lite(&pair("a b c", "a b c")).unwrap();
        assert!((m.score - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert_eq!(meteor_lite(&pair("x y", "a b")).unwrap().score, 0.0);
        let m = meteor_lite(&pair("c a b", "a b c")).unwrap();
        assert_eq!((m.matches, m.chunks), (3, 2));
        assert!((m.score - (1.0 - 0.5 * (2.0f64 / 3.0).powi(3))).abs() < 1e-12);
    }

    #[test]
    fn meteor_prefers_fewer_chunks() {
        // "a" can align to either copy; the second keeps "a b" contiguous
        let m = meteor_lite(&pair("a b", "a x a b")).unwrap();
        assert_eq!((m.matches, m.chunks), (2, 1));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&pair("a b c", "a b c")).unwrap(), 1.0);
        assert!((rouge_l(&pair("a b c d", "a c d")).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&pair("x", "a")).unwrap(), 0.0);
        let fwd = pair("a b c d", "a c d");
        let back = pair("a c d", "a b c d");
        assert_eq!(lcs_len(&fwd.candidate, &fwd.reference), lcs_len(&back.candidate, &back.reference));
    }
}
