//! Captioning metrics over tokenized candidate/reference pairs, one
//! reference per candidate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const BLEU_ORDER: usize = 4;
pub const CIDER_ORDER: usize = 4;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

type Ngram<'a> = &'a [String];

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with uniform weights. Orders two and up use add-one
/// smoothing on both the clipped matches and the candidate n-gram count.
pub fn bleu4(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in pairs {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let rc = ngrams(r, n);
            for (g, cnt) in ngrams(c, n) {
                matches[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..BLEU_ORDER {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * (log_p / BLEU_ORDER as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over pairs of the LCS F-measure with recall weight `ROUGE_BETA`.
pub fn rouge_l(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let total: f64 = pairs
        .iter()
        .map(|(c, r)| {
            let l = lcs_len(c, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .sum();
    total / pairs.len() as f64
}

/// TF-IDF cosine similarity over 1..4-grams, averaged over orders and
/// pairs and scaled by 10. Document frequencies come from the references
/// of the evaluated corpus; `idf = ln(N / max(1, df))`.
pub fn cider(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let log_n = (pairs.len() as f64).ln();
    let mut total = 0.0;
    for n in 1..=CIDER_ORDER {
        let refs: Vec<_> = pairs.iter().map(|(_, r)| ngrams(r, n)).collect();
        let mut df: BTreeMap<Ngram, usize> = BTreeMap::new();
        for r in &refs {
            for &g in r.keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        fn weigh<'a>(m: &BTreeMap<Ngram<'a>, usize>, df: &BTreeMap<Ngram, usize>, log_n: f64) -> BTreeMap<Ngram<'a>, f64> {
            m.iter()
                .map(|(&g, &c)| {
                    let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                    (g, c as f64 * (log_n - d.ln()))
                })
                .collect()
        }
        for ((c, _), r) in pairs.iter().zip(&refs) {
            let vc = weigh(&ngrams(c, n), &df, log_n);
            let vr = weigh(r, &df, log_n);
            let norm = |v: &BTreeMap<Ngram, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc > 0.0 && nr > 0.0 {
                let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                total += dot / (nc * nr);
            }
        }
    }
    10.0 * total / (CIDER_ORDER * pairs.len()) as f64
}

/// Suffix-stripping stemmer covering plural, past, gerund and adverb
/// endings.
pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    let rules: [(&str, &str, usize); 7] = [
        ("sses", "ss", 0),
        ("ies", "y", 1),
        ("ing", "", 3),
        ("ed", "", 3),
        ("ly", "", 3),
        ("es", "", 3),
        ("s", "", 3),
    ];
    for (suffix, repl, min_stem) in rules {
        if let Some(base) = w.strip_suffix(suffix) {
            let sibilant = ["s", "x", "z", "ch", "sh"].iter().any(|e| base.ends_with(e));
            let skip = match suffix {
                "es" => !sibilant,
                "s" => base.ends_with('s'),
                _ => false,
            };
            if base.len() >= min_stem && !skip {
                return format!("{base}{repl}");
            }
        }
    }
    w
}

/// Mean over pairs of the recall-weighted harmonic mean
/// `10 P R / (R + 9 P)` of stemmed unigram matches.
pub fn meteor_simplified(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(c, r)| {
            let mut pool: BTreeMap<String, usize> = BTreeMap::new();
            for t in r {
                *pool.entry(stem(t)).or_insert(0) += 1;
            }
            let mut m = 0usize;
            for t in c {
                if let Some(k) = pool.get_mut(&stem(t)) {
                    if *k > 0 {
                        *k -= 1;
                        m += 1;
                    }
                }
            }
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / c.len() as f64;
            let rec = m as f64 / r.len() as f64;
            10.0 * p * rec / (rec + 9.0 * p)
        })
        .sum();
    total / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor_simplified: f64,
}

impl Scores {
    pub fn compute(pairs: &[(Vec<String>, Vec<String>)]) -> Self {
        Self {
            n: pairs.len(),
            bleu4: bleu4(pairs),
            rouge_l: rouge_l(pairs),
            cider: cider(pairs),
            meteor_simplified: meteor_simplified(pairs),
        }
    }
}
