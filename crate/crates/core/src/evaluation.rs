//! Representation quality: cosine k-NN probe, logistic-regression linear
//! probe on frozen features, and top-k retrieval purity reports.

use rayon::prelude::*;
use serde::Serialize;

use crate::embedding::{dot, EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};

/// Default neighbor count of [`knn_probe`].
pub const KNN_DEFAULT_K: usize = 20;
/// Default list length of [`retrieval_report`].
pub const RETRIEVAL_DEFAULT_K: usize = 3;

const REDUCE_CHUNK: usize = 256;

/// Indices of the `k` gallery rows most cosine-similar to `q`, best first,
/// ties by ascending index. `skip` excludes one gallery row.
fn top_k(gallery: &EmbeddingMatrix, q: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, row) in gallery.iter_rows().enumerate() {
        if Some(j) == skip {
            continue;
        }
        let s = dot(q, row);
        if best.len() == k && s <= best[k - 1].0 {
            continue;
        }
        let pos = best.iter().position(|&(b, _)| s > b).unwrap_or(best.len());
        best.insert(pos, (s, j));
        best.truncate(k);
    }
    best.into_iter().map(|(_, j)| j).collect()
}

fn require_normalized(m: &EmbeddingMatrix) -> Result<()> {
    if !m.is_normalized() {
        return Err(Error::NotNormalized { norm: f64::NAN });
    }
    Ok(())
}

fn check_labels(m: &EmbeddingMatrix, labels: &[u32]) -> Result<()> {
    if m.rows() != labels.len() {
        return Err(Error::LabelMismatch {
            labels: labels.len(),
            rows: m.rows(),
        });
    }
    Ok(())
}

/// Majority vote among `k` votes; ties go to the smallest class id.
fn vote(labels: impl Iterator<Item = u32>) -> u32 {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(c, _)| *c == l) {
            Some((_, n)) => *n += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(0)
}

/// Cosine k-NN majority-vote accuracy of `test` against `train`.
pub fn knn_probe(
    train: &EmbeddingMatrix,
    train_labels: &[u32],
    test: &EmbeddingMatrix,
    test_labels: &[u32],
    k: usize,
) -> Result<f64> {
    if train.rows() == 0 {
        return Err(Error::EmptyTrainSet);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("knn probe needs k >= 1".into()));
    }
    if test.rows() == 0 {
        return Err(Error::BadShape("empty test set".into()));
    }
    require_normalized(train)?;
    require_normalized(test)?;
    check_labels(train, train_labels)?;
    check_labels(test, test_labels)?;
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            got: test.dim(),
        });
    }
    let correct = (0..test.rows())
        .into_par_iter()
        .filter(|&i| {
            let nn = top_k(train, test.row(i), k, None);
            vote(nn.iter().map(|&j| train_labels[j])) == test_labels[i]
        })
        .count();
    Ok(correct as f64 / test.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearProbeConfig {
    /// L2 penalty on weights (not biases).
    pub l2: f64,
    pub max_iters: usize,
    /// Convergence threshold on the gradient norm.
    pub tolerance: f64,
    pub initial_step: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 1000,
            tolerance: 1e-6,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// False when `max_iters` ran out before the gradient-norm threshold.
    pub converged: bool,
    /// Only one class in the training set; the probe predicts it everywhere.
    pub degenerate: bool,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
}

struct Softmax<'a> {
    x: &'a EmbeddingMatrix,
    y: &'a [u32],
    classes: usize,
    l2: f64,
}

impl Softmax<'_> {
    /// Parameters: `classes x (d + 1)`, last column is the bias.
    fn logits(&self, w: &[f64], row: &[f64]) -> Vec<f64> {
        let d1 = self.x.dim() + 1;
        (0..self.classes)
            .map(|c| dot(&w[c * d1..c * d1 + d1 - 1], row) + w[c * d1 + d1 - 1])
            .collect()
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        let d1 = self.x.dim() + 1;
        let sq: f64 = w
            .chunks_exact(d1)
            .map(|r| r[..d1 - 1].iter().map(|v| v * v).sum::<f64>())
            .sum();
        0.5 * self.l2 * sq
    }

    fn objective(&self, w: &[f64]) -> f64 {
        let n = self.x.rows();
        let parts: Vec<f64> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(REDUCE_CHUNK)
            .map(|rows| {
                rows.iter()
                    .map(|&i| {
                        let z = self.logits(w, self.x.row(i));
                        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        lse - z[self.y[i] as usize]
                    })
                    .sum::<f64>()
            })
            .collect();
        parts.iter().sum::<f64>() / n as f64 + self.penalty(w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let n = self.x.rows();
        let d1 = self.x.dim() + 1;
        let parts: Vec<Vec<f64>> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(REDUCE_CHUNK)
            .map(|rows| {
                let mut g = vec![0.0; w.len()];
                for &i in rows {
                    let row = self.x.row(i);
                    let z = self.logits(w, row);
                    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for c in 0..self.classes {
                        let p = e[c] / s - if c == self.y[i] as usize { 1.0 } else { 0.0 };
                        let gc = &mut g[c * d1..(c + 1) * d1];
                        for (gv, xv) in gc[..d1 - 1].iter_mut().zip(row) {
                            *gv += p * xv;
                        }
                        gc[d1 - 1] += p;
                    }
                }
                g
            })
            .collect();
        let mut g = vec![0.0; w.len()];
        for p in parts {
            for (a, b) in g.iter_mut().zip(p) {
                *a += b;
            }
        }
        for (c, gc) in g.chunks_exact_mut(d1).enumerate() {
            for (j, v) in gc.iter_mut().enumerate() {
                *v /= n as f64;
                if j < d1 - 1 {
                    *v += self.l2 * w[c * d1 + j];
                }
            }
        }
        g
    }

    fn predict(&self, w: &[f64], row: &[f64]) -> u32 {
        let z = self.logits(w, row);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best as u32
    }
}

fn accuracy_of(model: &Softmax, w: &[f64], x: &EmbeddingMatrix, y: &[u32]) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    let hits = (0..x.rows())
        .filter(|&i| model.predict(w, x.row(i)) == y[i])
        .count();
    hits as f64 / x.rows() as f64
}

/// Multinomial logistic regression on frozen features, full-batch gradient
/// descent with step halving whenever a step would raise the objective.
pub fn linear_probe(
    train: &EmbeddingMatrix,
    train_labels: &[u32],
    test: &EmbeddingMatrix,
    test_labels: &[u32],
    cfg: &LinearProbeConfig,
) -> Result<LinearProbeResult> {
    if train.rows() == 0 {
        return Err(Error::EmptyTrainSet);
    }
    check_labels(train, train_labels)?;
    check_labels(test, test_labels)?;
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            got: test.dim(),
        });
    }
    let first = train_labels[0];
    if train_labels.iter().all(|&l| l == first) {
        let hits = test_labels.iter().filter(|&&l| l == first).count();
        return Ok(LinearProbeResult {
            accuracy: if test.rows() == 0 {
                1.0
            } else {
                hits as f64 / test.rows() as f64
            },
            train_accuracy: 1.0,
            converged: true,
            degenerate: true,
            iterations: 0,
            objective_trace: Vec::new(),
        });
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&m| m as usize + 1);
    let model = Softmax {
        x: train,
        y: train_labels,
        classes,
        l2: cfg.l2,
    };
    let mut w = vec![0.0; classes * (train.dim() + 1)];
    let mut obj = model.objective(&w);
    let mut trace = vec![obj];
    let mut step = cfg.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let g = model.gradient(&w);
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= cfg.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let t = model.objective(&trial);
            if t <= obj {
                w = trial;
                obj = t;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no decrease representable at this precision
            converged = gnorm <= cfg.tolerance;
            break;
        }
        trace.push(obj);
        step *= 1.25;
    }
    Ok(LinearProbeResult {
        accuracy: accuracy_of(&model, &w, test, test_labels),
        train_accuracy: accuracy_of(&model, &w, train, train_labels),
        converged,
        degenerate: false,
        iterations,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryPurity {
    pub query: usize,
    pub retrieved: Vec<usize>,
    pub class_purity: f64,
    pub mode_purity: Option<f64>,
    pub joint_purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PurityReport {
    pub k: usize,
    pub rows: Vec<QueryPurity>,
    pub mean_class_purity: f64,
    pub mean_mode_purity: Option<f64>,
    pub mean_joint_purity: Option<f64>,
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Top-k cosine retrieval from the gallery for each query row (itself
/// excluded), with class, mode and joint purity.
pub fn retrieval_report(
    gallery: &EmbeddingMatrix,
    labels: &LabelVector,
    queries: &[usize],
    k: usize,
) -> Result<PurityReport> {
    require_normalized(gallery)?;
    labels.check_aligned(gallery)?;
    if let Some(&q) = queries.iter().find(|&&q| q >= gallery.rows()) {
        return Err(Error::IndexOutOfRange {
            index: q,
            len: gallery.rows(),
        });
    }
    let modes = labels.modes.as_deref();
    let rows: Vec<QueryPurity> = queries
        .par_iter()
        .map(|&q| {
            let retrieved = top_k(gallery, gallery.row(q), k, Some(q));
            let same_class: Vec<bool> = retrieved
                .iter()
                .map(|&j| labels.labels[j] == labels.labels[q])
                .collect();
            let class_hits = same_class.iter().filter(|&&s| s).count();
            let (mode_purity, joint_purity) = match modes {
                Some(m) => {
                    let same_mode: Vec<bool> = retrieved.iter().map(|&j| m[j] == m[q]).collect();
                    let mode_hits = same_mode.iter().filter(|&&s| s).count();
                    let joint_hits = same_mode
                        .iter()
                        .zip(&same_class)
                        .filter(|(a, b)| **a && **b)
                        .count();
                    (
                        Some(fraction(mode_hits, retrieved.len())),
                        Some(fraction(joint_hits, retrieved.len())),
                    )
                }
                None => (None, None),
            };
            QueryPurity {
                query: q,
                class_purity: fraction(class_hits, retrieved.len()),
                mode_purity,
                joint_purity,
                retrieved,
            }
        })
        .collect();
    let mean_class_purity = mean(rows.iter().map(|r| r.class_purity));
    let (mean_mode_purity, mean_joint_purity) = if modes.is_some() {
        (
            Some(mean(rows.iter().filter_map(|r| r.mode_purity))),
            Some(mean(rows.iter().filter_map(|r| r.joint_purity))),
        )
    } else {
        (None, None)
    };
    Ok(PurityReport {
        k,
        rows,
        mean_class_purity,
        mean_mode_purity,
        mean_joint_purity,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One CSV row per query; retrieved indices are `;`-separated.
pub fn report_to_csv(report: &PurityReport) -> String {
    let mut s = String::from("query,retrieved,class_purity,mode_purity,joint_purity\n");
    for r in &report.rows {
        let ids: Vec<String> = r.retrieved.iter().map(usize::to_string).collect();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.query,
            ids.join(";"),
            r.class_purity,
            opt(r.mode_purity),
            opt(r.joint_purity)
        ));
    }
    s
}
