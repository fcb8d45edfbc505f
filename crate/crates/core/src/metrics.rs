//! Caption quality measures: joint caption likelihood, synonym-based
//! category metrics and BLEU@4.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::agent::{Caption, Latent, TextEncoderParams};
use crate::error::{Error, Result};

/// `log p(z_A | c; φ_A) + log p(z_B | c; φ_B)`.
pub fn joint_caption_loglik(
    phi_a: &TextEncoderParams,
    phi_b: &TextEncoderParams,
    z_a: &Latent,
    z_b: &Latent,
    caption: &Caption,
) -> Result<f64> {
    Ok(phi_a.log_pdf(z_a, caption)? + phi_b.log_pdf(z_b, caption)?)
}

/// Per-category image counts behind the overall / per-category metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    /// Images whose caption mentions the category and that are annotated with it.
    pub correct: Vec<i64>,
    /// Images whose caption mentions the category.
    pub predicted: Vec<i64>,
    /// Images annotated with the category.
    pub ground_truth: Vec<i64>,
}

impl CategoryCounts {
    pub fn new(correct: Vec<i64>, predicted: Vec<i64>, ground_truth: Vec<i64>) -> Result<Self> {
        let c = Self { correct, predicted, ground_truth };
        c.validate()?;
        Ok(c)
    }

    pub fn zeros(categories: usize) -> Self {
        Self {
            correct: vec![0; categories],
            predicted: vec![0; categories],
            ground_truth: vec![0; categories],
        }
    }

    pub fn categories(&self) -> usize {
        self.correct.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.correct.len();
        if n == 0 {
            return Err(Error::Input("category counts need at least one category".into()));
        }
        if self.predicted.len() != n || self.ground_truth.len() != n {
            return Err(Error::Input("count vectors differ in length".into()));
        }
        for i in 0..n {
            let (c, p, g) = (self.correct[i], self.predicted[i], self.ground_truth[i]);
            if c < 0 || p < 0 || g < 0 {
                return Err(Error::Input(format!("negative count for category {i}")));
            }
            if c > p.min(g) {
                return Err(Error::Input(format!("category {i}: correct {c} exceeds min(predicted {p}, truth {g})")));
            }
        }
        Ok(())
    }

    /// Tallies one image. Each (image, category) pair counts at most once.
    pub fn record(&mut self, predicted: &BTreeSet<usize>, truth: &BTreeSet<usize>) {
        for &p in predicted {
            self.predicted[p] += 1;
            if truth.contains(&p) {
                self.correct[p] += 1;
            }
        }
        for &t in truth {
            self.ground_truth[t] += 1;
        }
    }

    /// Counts of the listed categories only, in the given order.
    pub fn restrict(&self, categories: &[usize]) -> Self {
        Self {
            correct: categories.iter().map(|&i| self.correct[i]).collect(),
            predicted: categories.iter().map(|&i| self.predicted[i]).collect(),
            ground_truth: categories.iter().map(|&i| self.ground_truth[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
}

impl CategoryMetrics {
    pub const NAMES: [&'static str; 6] = ["OP", "OR", "OF1", "CP", "CR", "CF1"];

    pub fn values(&self) -> [f64; 6] {
        [self.op, self.or, self.of1, self.cp, self.cr, self.cf1]
    }
}

fn ratio(num: i64, den: i64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean; `F1(0, 0) = 0`.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn category_metrics(counts: &CategoryCounts) -> Result<CategoryMetrics> {
    counts.validate()?;
    let sc: i64 = counts.correct.iter().sum();
    let sp: i64 = counts.predicted.iter().sum();
    let sg: i64 = counts.ground_truth.iter().sum();
    let n = counts.categories() as f64;
    let op = ratio(sc, sp);
    let or = ratio(sc, sg);
    let cp = (0..counts.categories()).map(|i| ratio(counts.correct[i], counts.predicted[i])).sum::<f64>() / n;
    let cr = (0..counts.categories()).map(|i| ratio(counts.correct[i], counts.ground_truth[i])).sum::<f64>() / n;
    Ok(CategoryMetrics { op, or, of1: f1(op, or), cp, cr, cf1: f1(cp, cr) })
}

/// F1 of every category on its own (the heatmap cells).
pub fn per_category_f1(counts: &CategoryCounts) -> Result<Vec<f64>> {
    counts.validate()?;
    Ok((0..counts.categories())
        .map(|i| {
            f1(
                ratio(counts.correct[i], counts.predicted[i]),
                ratio(counts.correct[i], counts.ground_truth[i]),
            )
        })
        .collect())
}

/// Category → tokens that count as a mention of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon(pub Vec<Vec<usize>>);

impl Lexicon {
    pub fn categories(&self) -> usize {
        self.0.len()
    }

    pub fn check(&self, vocab: usize) -> Result<()> {
        let mut seen = HashMap::new();
        for (cat, toks) in self.0.iter().enumerate() {
            for &t in toks {
                if t >= vocab {
                    return Err(Error::Input(format!("lexicon token {t} of category {cat} outside vocabulary {vocab}")));
                }
                if let Some(prev) = seen.insert(t, cat) {
                    return Err(Error::Input(format!("token {t} shared by categories {prev} and {cat}")));
                }
            }
        }
        Ok(())
    }
}

/// Categories with at least one lexicon token present in the caption.
pub fn match_categories(caption: &Caption, lexicon: &Lexicon) -> BTreeSet<usize> {
    lexicon
        .0
        .iter()
        .enumerate()
        .filter(|(_, toks)| toks.iter().any(|t| caption.tokens().contains(t)))
        .map(|(i, _)| i)
        .collect()
}

const BLEU_EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU@4: clipped 1–4-gram precisions (zero counts replaced by
/// 1e-9), geometric mean, times the brevity penalty against the closest
/// reference length.
pub fn bleu4(candidate: &Caption, references: &[Caption]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Input("BLEU needs at least one reference".into()));
    }
    let cand = candidate.tokens();
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(cand, n);
        let total: usize = counts.values().sum();
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r.tokens(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if clipped == 0 { BLEU_EPS / total.max(1) as f64 } else { clipped as f64 / total as f64 };
        log_sum += 0.25 * p.ln();
    }
    let c = cand.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references are non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}
