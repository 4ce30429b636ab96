//! Paragraph-level caption metrics.
//!
//! Every metric works on [`Paragraph`]s produced by [`tokenize`]. Sentences of
//! a paragraph are joined before n-gram counting, so n-grams may cross
//! sentence boundaries.
//!
//! | metric  | range   | notes                                            |
//! |---------|---------|--------------------------------------------------|
//! | BLEU@4  | [0, 1]  | corpus level, add-one smoothing for n >= 2       |
//! | ROUGE-L | [0, 1]  | LCS F-measure, beta = 1.2, mean over pairs        |
//! | CIDEr   | [0, 10] | tf-idf cosine, n = 1..4, idf over references      |
//! | Div@2   | [0, 1]  | distinct / total bigrams, mean over paragraphs    |
//! | R@4     | [0, 1]  | repeated / total 4-grams, mean over paragraphs    |

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

const ROUGE_BETA: f64 = 1.2;
const CIDER_SCALE: f64 = 10.0;
const MAX_N: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Paragraph {
    pub sentences: Vec<Vec<String>>,
}

impl Paragraph {
    pub fn from_sentences<S: AsRef<str>>(sentences: &[S]) -> Self {
        Self {
            sentences: sentences.iter().map(|s| tokenize(s.as_ref())).collect(),
        }
    }

    pub fn parse(text: &str) -> Self {
        Self::from_sentences(&[text])
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.sentences.iter().flatten().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub div2: f64,
    pub rep4: f64,
}

impl fmt::Display for MetricReport {
    /// One-row table, scaled as captioning results are usually reported:
    /// CIDEr times 10, everything else times 100.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>8}", "B@4", "R", "C", "Div@2", "R@4")?;
        write!(
            f,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            self.bleu4 * 100.0,
            self.rouge_l * 100.0,
            self.cider * 10.0,
            self.div2 * 100.0,
            self.rep4 * 100.0
        )
    }
}

type Counts<'a> = BTreeMap<&'a [&'a str], usize>;

fn ngrams<'a>(tokens: &'a [&'a str], n: usize) -> Counts<'a> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

fn check_pairs(what: &str, cands: &[Paragraph], refs: &[Paragraph]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Degenerate(format!("{what} of an empty corpus")));
    }
    if cands.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{what}: {} candidates for {} references",
            cands.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU with n = 1..4. The unigram precision is unsmoothed; higher
/// orders use `(matches + 1) / (total + 1)`.
pub fn bleu4(cands: &[Paragraph], refs: &[Paragraph]) -> Result<f64> {
    check_pairs("bleu4", cands, refs)?;
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        let (ct, rt) = (c.tokens(), r.tokens());
        c_len += ct.len();
        r_len += rt.len();
        for n in 1..=MAX_N {
            let rc = ngrams(&rt, n);
            for (g, k) in ngrams(&ct, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..MAX_N {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok((bp * (log_p / MAX_N as f64).exp()).min(1.0))
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
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

fn rouge_pair(c: &[&str], r: &[&str]) -> f64 {
    let lcs = lcs_len(c, r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean LCS F-measure over candidate/reference pairs.
pub fn rouge_l(cands: &[Paragraph], refs: &[Paragraph]) -> Result<f64> {
    check_pairs("rouge_l", cands, refs)?;
    let total: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| rouge_pair(&c.tokens(), &r.tokens()))
        .sum();
    Ok(total / cands.len() as f64)
}

fn tfidf<'a>(counts: &Counts<'a>, idf: &dyn Fn(&[&str]) -> f64) -> BTreeMap<&'a [&'a str], f64> {
    counts.iter().map(|(&g, &k)| (g, k as f64 * idf(g))).collect()
}

/// Mean over pairs of `10 * mean_n cos(tfidf_n(c), tfidf_n(r))`, with
/// `idf(g) = ln(D / max(1, df(g)))` and `df` counted over the references.
pub fn cider(cands: &[Paragraph], refs: &[Paragraph]) -> Result<f64> {
    check_pairs("cider", cands, refs)?;
    if refs.len() < 2 {
        return Err(Error::Degenerate("cider needs at least two reference documents".into()));
    }
    let ctoks: Vec<Vec<&str>> = cands.iter().map(Paragraph::tokens).collect();
    let rtoks: Vec<Vec<&str>> = refs.iter().map(Paragraph::tokens).collect();
    let docs = refs.len() as f64;
    let mut total = 0.0;
    for n in 1..=MAX_N {
        let ref_counts: Vec<Counts> = rtoks.iter().map(|t| ngrams(t, n)).collect();
        let mut df: BTreeMap<&[&str], usize> = BTreeMap::new();
        for rc in &ref_counts {
            for &g in rc.keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[&str]| (docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (ct, rc) in ctoks.iter().zip(&ref_counts) {
            let cc = ngrams(ct, n);
            let (vc, vr) = (tfidf(&cc, &idf), tfidf(rc, &idf));
            let norm = |v: &BTreeMap<&[&str], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
            total += dot / (nc * nr);
        }
    }
    Ok(CIDER_SCALE * total / (MAX_N as f64 * cands.len() as f64))
}

/// Distinct bigrams over total bigrams; `None` below two tokens.
pub fn div2(p: &Paragraph) -> Option<f64> {
    let t = p.tokens();
    if t.len() < 2 {
        return None;
    }
    let counts = ngrams(&t, 2);
    Some(counts.len() as f64 / (t.len() - 1) as f64)
}

/// Fraction of 4-gram occurrences that repeat an earlier one; `None` below
/// four tokens.
pub fn rep4(p: &Paragraph) -> Option<f64> {
    let t = p.tokens();
    if t.len() < 4 {
        return None;
    }
    let counts = ngrams(&t, 4);
    let total = t.len() - 3;
    Some((total - counts.len()) as f64 / total as f64)
}

fn mean_defined(name: &str, paragraphs: &[Paragraph], f: fn(&Paragraph) -> Option<f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, p) in paragraphs.iter().enumerate() {
        match f(p) {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => log::warn!("{name}: paragraph {i} too short, skipped"),
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Corpus Div@2 over candidate paragraphs.
pub fn corpus_div2(paragraphs: &[Paragraph]) -> f64 {
    mean_defined("div2", paragraphs, div2)
}

/// Corpus R@4 over candidate paragraphs.
pub fn corpus_rep4(paragraphs: &[Paragraph]) -> f64 {
    mean_defined("rep4", paragraphs, rep4)
}

/// All five metrics. CIDEr is reported as 0 for a single-video corpus.
pub fn evaluate(cands: &[Paragraph], refs: &[Paragraph]) -> Result<MetricReport> {
    let cider = if refs.len() >= 2 {
        cider(cands, refs)?
    } else {
        log::warn!("cider: fewer than two references, reported as 0");
        0.0
    };
    Ok(MetricReport {
        bleu4: bleu4(cands, refs)?,
        rouge_l: rouge_l(cands, refs)?,
        cider,
        div2: corpus_div2(cands),
        rep4: corpus_rep4(cands),
    })
}
