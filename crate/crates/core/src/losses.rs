//! Contrastive objectives over unit embeddings: the momentum-contrast loss,
//! the neighborhood-supervised loss with pseudo-label groups, and the
//! supervised-contrastive special case where groups are whole classes.
//!
//! All three share one per-anchor kernel. For anchor `i` with positive set
//! `P(i)` (instances sharing its group id, itself included) and negatives
//! `N(i)` (other-group batch instances plus every bank row):
//!
//! ```text
//! loss_i = 1/|P| * sum_{j in P} -log( exp(s_ij) / D_ij )
//! s_ij   = f_i . g_j / tau
//! D_ij   = sum_{t in N} exp(s_it)                  (Denominator::NegativesOnly)
//! D_ij   = sum_{t in N} exp(s_it) + exp(s_ij)      (Denominator::InfoNce)
//! ```
//!
//! The batch loss is the mean over anchors. Gradients are exact for both
//! branches; the bank is treated as constant.

use rayon::prelude::*;

use crate::embedding::{axpy, dot, EmbeddingMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// Negatives only.
    #[default]
    NegativesOnly,
    /// Negatives plus the positive term of the numerator.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub denominator: Denominator,
}

impl LossConfig {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            denominator: Denominator::NegativesOnly,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(0.07)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledBatch {
    /// Query-encoder embeddings of the first view.
    pub f: EmbeddingMatrix,
    /// Key-encoder embeddings of the second view.
    pub g: EmbeddingMatrix,
    pub pseudo_labels: Vec<u32>,
    pub anchors: Vec<bool>,
}

impl PseudoLabeledBatch {
    pub fn new(
        f: EmbeddingMatrix,
        g: EmbeddingMatrix,
        pseudo_labels: Vec<u32>,
        anchors: Vec<bool>,
    ) -> Result<Self> {
        if f.rows() != g.rows() || f.dim() != g.dim() {
            return Err(Error::BadShape(format!(
                "f is {}x{}, g is {}x{}",
                f.rows(),
                f.dim(),
                g.rows(),
                g.dim()
            )));
        }
        if pseudo_labels.len() != f.rows() || anchors.len() != f.rows() {
            return Err(Error::LabelMismatch {
                labels: pseudo_labels.len().min(anchors.len()),
                rows: f.rows(),
            });
        }
        if !anchors.iter().any(|&a| a) {
            return Err(Error::BadShape("batch has no anchors".into()));
        }
        Ok(Self {
            f,
            g,
            pseudo_labels,
            anchors,
        })
    }

    /// Every instance is an anchor in its own group.
    pub fn singletons(f: EmbeddingMatrix, g: EmbeddingMatrix) -> Result<Self> {
        let n = f.rows();
        Self::new(f, g, (0..n as u32).collect(), vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.f.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.f.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Same shape as the query embeddings, row-major.
    pub grad_f: Vec<f64>,
    /// Same shape as the key embeddings, row-major.
    pub grad_g: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Sum by recursive halving; the split points depend only on the length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

struct AnchorTerms {
    loss: f64,
    /// d loss / d positive logit
    pos_coef: Vec<f64>,
    /// d loss / d negative logit
    neg_coef: Vec<f64>,
}

/// Loss of one anchor from its positive and negative logits.
fn anchor_terms(pos: &[f64], neg: &[f64], denom: Denominator) -> AnchorTerms {
    let p = pos.len() as f64;
    let lse = log_sum_exp(neg);
    match denom {
        Denominator::NegativesOnly => {
            let loss = pairwise_sum(&pos.iter().map(|s| -s).collect::<Vec<_>>()) / p + lse;
            AnchorTerms {
                loss,
                pos_coef: vec![-1.0 / p; pos.len()],
                neg_coef: neg.iter().map(|s| (s - lse).exp()).collect(),
            }
        }
        Denominator::InfoNce => {
            // per positive j: -s_j + log(exp(lse) + exp(s_j))
            let full: Vec<f64> = pos.iter().map(|&s| log_add_exp(lse, s)).collect();
            let terms: Vec<f64> = pos.iter().zip(&full).map(|(s, l)| l - s).collect();
            let loss = pairwise_sum(&terms) / p;
            let pos_coef = pos
                .iter()
                .zip(&full)
                .map(|(s, l)| (-1.0 + (s - l).exp()) / p)
                .collect();
            let w = full.iter().map(|l| (lse - l).exp()).sum::<f64>() / p;
            let neg_coef = neg.iter().map(|s| (s - lse).exp() * w).collect();
            AnchorTerms {
                loss,
                pos_coef,
                neg_coef,
            }
        }
    }
}

/// Per-anchor loss from raw logits (already divided by the temperature).
pub fn anchor_loss(pos_logits: &[f64], neg_logits: &[f64], denom: Denominator) -> f64 {
    anchor_terms(pos_logits, neg_logits, denom).loss
}

fn check_bank(bank: &EmbeddingMatrix, d: usize) -> Result<()> {
    if bank.rows() > 0 && bank.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bank.dim(),
        });
    }
    Ok(())
}

/// Momentum-contrast loss for a single query/key pair against the bank.
pub fn moco_loss(
    f_q: &[f64],
    g_k: &[f64],
    bank: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.check()?;
    if f_q.len() != g_k.len() {
        return Err(Error::DimensionMismatch {
            expected: f_q.len(),
            got: g_k.len(),
        });
    }
    if bank.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    check_bank(bank, f_q.len())?;
    let tau = cfg.temperature;
    let pos = [dot(f_q, g_k) / tau];
    let neg: Vec<f64> = bank.iter_rows().map(|z| dot(f_q, z) / tau).collect();
    let t = anchor_terms(&pos, &neg, cfg.denominator);

    let mut grad_f = vec![0.0; f_q.len()];
    axpy(t.pos_coef[0] / tau, g_k, &mut grad_f);
    for (c, z) in t.neg_coef.iter().zip(bank.iter_rows()) {
        axpy(c / tau, z, &mut grad_f);
    }
    let grad_g = f_q.iter().map(|v| t.pos_coef[0] / tau * v).collect();
    Ok(LossOutput {
        loss: t.loss,
        grad_f,
        grad_g,
    })
}

struct AnchorResult {
    loss: f64,
    grad_f: Vec<f64>,
    /// d loss_i / d s_ij for every batch instance j
    batch_coef: Vec<f64>,
}

fn grouped_loss(
    batch: &PseudoLabeledBatch,
    bank: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.check()?;
    let (n, d) = (batch.f.rows(), batch.f.dim());
    check_bank(bank, d)?;
    let tau = cfg.temperature;
    let anchors: Vec<usize> = (0..n).filter(|&i| batch.anchors[i]).collect();
    let labels = &batch.pseudo_labels;

    let per_anchor: Vec<AnchorResult> = anchors
        .par_iter()
        .map(|&i| {
            let fi = batch.f.row(i);
            let logits: Vec<f64> = batch.g.iter_rows().map(|gj| dot(fi, gj) / tau).collect();
            let mut pos = Vec::new();
            let mut neg = Vec::with_capacity(n + bank.rows());
            let mut pos_idx = Vec::new();
            let mut neg_idx = Vec::new();
            for (j, &s) in logits.iter().enumerate() {
                if labels[j] == labels[i] {
                    pos.push(s);
                    pos_idx.push(j);
                } else {
                    neg.push(s);
                    neg_idx.push(j);
                }
            }
            let batch_negs = neg.len();
            neg.extend(bank.iter_rows().map(|z| dot(fi, z) / tau));
            if neg.is_empty() {
                return Err(Error::EmptyNegativeSet(i));
            }
            let t = anchor_terms(&pos, &neg, cfg.denominator);

            let mut batch_coef = vec![0.0; n];
            for (&j, &c) in pos_idx.iter().zip(&t.pos_coef) {
                batch_coef[j] = c;
            }
            for (&j, &c) in neg_idx.iter().zip(&t.neg_coef[..batch_negs]) {
                batch_coef[j] = c;
            }
            let mut grad_f = vec![0.0; d];
            for (j, &c) in batch_coef.iter().enumerate() {
                axpy(c / tau, batch.g.row(j), &mut grad_f);
            }
            for (z, &c) in bank.iter_rows().zip(&t.neg_coef[batch_negs..]) {
                axpy(c / tau, z, &mut grad_f);
            }
            Ok(AnchorResult {
                loss: t.loss,
                grad_f,
                batch_coef,
            })
        })
        .collect::<Result<_>>()?;

    let a = anchors.len() as f64;
    let losses: Vec<f64> = per_anchor.iter().map(|r| r.loss).collect();
    let loss = pairwise_sum(&losses) / a;

    let mut grad_f = vec![0.0; n * d];
    for (&i, r) in anchors.iter().zip(&per_anchor) {
        for (o, v) in grad_f[i * d..(i + 1) * d].iter_mut().zip(&r.grad_f) {
            *o = v / a;
        }
    }
    let mut grad_g = vec![0.0; n * d];
    grad_g
        .par_chunks_mut(d)
        .enumerate()
        .with_min_len(16)
        .for_each(|(j, gj)| {
            for (&i, r) in anchors.iter().zip(&per_anchor) {
                let c = r.batch_coef[j];
                if c != 0.0 {
                    axpy(c / (tau * a), batch.f.row(i), gj);
                }
            }
        });
    Ok(LossOutput {
        loss,
        grad_f,
        grad_g,
    })
}

/// Neighborhood-supervised loss: positives are instances sharing the
/// anchor's pseudo-label, negatives are all other batch instances and the
/// bank.
pub fn scan_loss(
    batch: &PseudoLabeledBatch,
    bank: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    grouped_loss(batch, bank, cfg)
}

/// Supervised-contrastive case: every batch instance sharing the anchor's
/// true class is a positive.
pub fn scl_loss(
    f: &EmbeddingMatrix,
    g: &EmbeddingMatrix,
    class_labels: &[u32],
    anchors: &[bool],
    bank: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let batch =
        PseudoLabeledBatch::new(f.clone(), g.clone(), class_labels.to_vec(), anchors.to_vec())?;
    grouped_loss(&batch, bank, cfg)
}
