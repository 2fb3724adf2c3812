//! Inference over datasets and the reported metrics.

use serde::{Deserialize, Serialize};

use crate::align::corpus_wer;
use crate::autodiff::{Tape, Tensor};
use crate::config::DtwMetric;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::Model;

/// Rows are true labels, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::invalid("confusion", "predictions and labels differ in length"));
        }
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(Error::invalid("confusion", format!("class index outside [0, {classes})")));
            }
            counts[l][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub wa: f64,
    pub ua: f64,
    pub acc: f64,
    pub wf1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrected_wer: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn classification_metrics(preds: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::invalid("classification_metrics", "empty input"));
    }
    let cm = ConfusionMatrix::new(preds, labels, classes)?;
    let support: Vec<usize> = cm.counts.iter().map(|row| row.iter().sum()).collect();
    let predicted: Vec<usize> = (0..classes).map(|j| cm.counts.iter().map(|row| row[j]).sum()).collect();
    let recall: Vec<f64> = (0..classes).map(|c| ratio(cm.counts[c][c], support[c])).collect();
    let precision: Vec<f64> = (0..classes).map(|c| ratio(cm.counts[c][c], predicted[c])).collect();
    let f1: Vec<f64> = (0..classes)
        .map(|c| {
            let (p, r) = (precision[c], recall[c]);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect();
    let present: Vec<usize> = (0..classes).filter(|&c| support[c] > 0).collect();
    if present.len() < classes {
        log::info!("{} class(es) absent from labels are excluded from UA", classes - present.len());
    }
    let n = cm.total();
    let wa = ratio(cm.trace(), n);
    let ua = present.iter().map(|&c| recall[c]).sum::<f64>() / present.len() as f64;
    let wf1 = (0..classes).map(|c| support[c] as f64 / n as f64 * f1[c]).sum();
    Ok(MetricsReport {
        wa,
        ua,
        acc: wa,
        wf1,
        precision,
        recall,
        f1,
        support,
        confusion: cm,
        corrected_wer: None,
    })
}

/// Predicted class of every utterance.
pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    dataset.utterances.iter().map(|u| model.predict(u)).collect()
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<MetricsReport> {
    let preds = predict_dataset(model, dataset)?;
    classification_metrics(&preds, &dataset.labels(), model.cfg.emotions)
}

/// Gated (or ungated) correction over a dataset: `(input WER, corrected WER)`.
pub fn correction_wer(model: &Model, dataset: &Dataset, max_span: usize, ungated: bool) -> Result<(f64, f64)> {
    let mut corrected = Vec::with_capacity(dataset.len());
    for u in &dataset.utterances {
        corrected.push(model.correct(u, max_span, ungated)?.1);
    }
    let input = corpus_wer(dataset.utterances.iter().map(|u| (u.asr_tokens.as_slice(), u.gt_tokens.as_slice())))?;
    let output = corpus_wer(
        corrected
            .iter()
            .zip(&dataset.utterances)
            .map(|(c, u)| (c.as_slice(), u.gt_tokens.as_slice())),
    )?;
    Ok((input, output))
}

/// Discriminator behaviour on a dataset in evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialStats {
    /// Mean score on valid frames of the modality-invariant representation.
    pub inv_score: f64,
    /// Generator loss over the same frames.
    pub l_g: f64,
    /// Frame accuracy of thresholding scores at 0.5, speech-specific frames
    /// counted as positives and text-specific ones as negatives.
    pub disc_accuracy: f64,
}

pub fn adversarial_stats(model: &Model, dataset: &Dataset) -> Result<AdversarialStats> {
    let (mut inv_sum, mut lg_sum, mut correct, mut frames) = (0.0, 0.0, 0usize, 0usize);
    for u in &dataset.utterances {
        let tape = Tape::new();
        let params = model.store.bind(&tape, |_| false);
        let ctx = Ctx::eval(&tape, &params);
        let item = model.forward_item(&ctx, &u.speech, u.frames(), &u.asr_tokens, u.asr_tokens.len(), false)?;
        let (_, scores) = model.gan_terms(&ctx, std::slice::from_ref(&item), false)?;
        let (s, t, inv) = (scores[0].spe_s.data(), scores[0].spe_t.data(), scores[0].inv.data());
        for (k, &valid) in item.frame_mask.iter().enumerate() {
            if valid {
                inv_sum += inv[k];
                lg_sum -= inv[k].max(crate::autodiff::LOG_FLOOR).ln() + (1.0 - inv[k]).max(crate::autodiff::LOG_FLOOR).ln();
                correct += usize::from(s[k] > 0.5) + usize::from(t[k] < 0.5);
                frames += 1;
            }
        }
    }
    if frames == 0 {
        return Err(Error::invalid("adversarial_stats", "no frames"));
    }
    Ok(AdversarialStats {
        inv_score: inv_sum / frames as f64,
        l_g: lg_sum / frames as f64,
        disc_accuracy: correct as f64 / (2 * frames) as f64,
    })
}

fn local_cost(a: &[f64], b: &[f64], metric: DtwMetric) -> Result<f64> {
    match metric {
        DtwMetric::Euclidean => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        DtwMetric::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::invalid("dtw_distance", "zero-norm row"));
            }
            Ok(1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
        }
    }
}

/// Minimum accumulated local cost over monotone alignments of `a` `[p, d]`
/// and `b` `[q, d]`, divided by the number of aligned pairs on the optimal
/// path. Among paths of equal cost the shortest one is taken.
pub fn dtw_distance(a: &Tensor, b: &Tensor, metric: DtwMetric) -> Result<f64> {
    let ((p, d), (q, d2)) = (a.dims2(), b.dims2());
    if a.shape().len() != 2 || b.shape().len() != 2 || d != d2 {
        return Err(Error::Shape {
            op: "dtw_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if p == 0 || q == 0 {
        return Err(Error::invalid("dtw_distance", "empty sequence"));
    }
    let mut cost = vec![vec![0.0; q]; p];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = local_cost(a.row(i), b.row(j), metric)?;
        }
    }
    // (accumulated cost, path length), compared lexicographically
    let mut acc = vec![vec![(f64::INFINITY, 0usize); q]; p];
    for i in 0..p {
        for j in 0..q {
            let prev = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 {
                    cands.push(acc[i - 1][j]);
                }
                if j > 0 {
                    cands.push(acc[i][j - 1]);
                }
                if i > 0 && j > 0 {
                    cands.push(acc[i - 1][j - 1]);
                }
                cands
                    .into_iter()
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .expect("at least one predecessor")
            };
            acc[i][j] = (prev.0 + cost[i][j], prev.1 + 1);
        }
    }
    let (total, len) = acc[p - 1][q - 1];
    Ok(total / len as f64)
}

/// `(mean intra-class cosine, mean inter-class cosine, intra - inter)` over
/// all unordered pairs of rows.
pub fn cluster_separation(pooled: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64, f64)> {
    if pooled.len() != labels.len() {
        return Err(Error::invalid("cluster_separation", "rows and labels differ in length"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::invalid(
            "cluster_separation",
            "need at least two classes with at least two samples each",
        ));
    }
    let unit: Vec<Vec<f64>> = pooled
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::invalid("cluster_separation", "zero-norm representation"))
            } else {
                Ok(v.iter().map(|x| x / n).collect())
            }
        })
        .collect::<Result<_>>()?;
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum();
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                ne += 1;
            }
        }
    }
    let (intra, inter) = (intra / ni as f64, inter / ne as f64);
    Ok((intra, inter, intra - inter))
}

/// Pooled representations of every utterance.
pub fn pooled_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset.utterances.iter().map(|u| model.pooled(u)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_hand_computed_cases() {
        let r = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((r.wa, r.ua, r.acc, r.wf1), (1.0, 1.0, 1.0, 1.0));

        let r = classification_metrics(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(r.wa, 0.75);
        assert_eq!(r.ua, 0.5);
        assert_eq!(r.confusion.counts, vec![vec![3, 0], vec![1, 0]]);
        // F1 of class 0: p = 3/4, r = 1
        assert_eq!(r.f1[0], 2.0 * 0.75 / 1.75);
        assert_eq!(r.wf1, 0.75 * (2.0 * 0.75 / 1.75));

        assert!(classification_metrics(&[], &[], 2).is_err());
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn absent_classes_leave_ua_mean() {
        let r = classification_metrics(&[0, 1, 1], &[0, 1, 1], 4).unwrap();
        assert_eq!(r.ua, 1.0);
    }

    #[test]
    fn weighted_f1_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.gen_bool(0.6) { l } else { rng.gen_range(0..3) })
            .collect();
        let r = classification_metrics(&preds, &labels, 3).unwrap();
        let mut expect = 0.0;
        for c in 0..3 {
            let tp = preds.iter().zip(&labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
            let fp = preds.iter().zip(&labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
            let fn_ = preds.iter().zip(&labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            expect += labels.iter().filter(|&&l| l == c).count() as f64 / 60.0 * f1;
        }
        assert!((r.wf1 - expect).abs() < 1e-12);
        assert_eq!(r.wa, r.confusion.trace() as f64 / r.confusion.total() as f64);
    }

    #[test]
    fn ua_invariant_to_rebalancing() {
        // class 0 recall 3/4, class 1 recall 1/2; then doubled class 0 size
        let a = classification_metrics(&[0, 0, 0, 1, 1, 0], &[0, 0, 0, 0, 1, 1], 2).unwrap();
        let b = classification_metrics(&[0, 0, 0, 1, 0, 0, 0, 1, 1, 0], &[0, 0, 0, 0, 0, 0, 0, 0, 1, 1], 2).unwrap();
        assert_eq!(a.ua, b.ua);
        assert_ne!(a.wa, b.wa);
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Every monotone path from (0,0) to (p-1,q-1) with unit steps.
    fn brute_force(a: &Tensor, b: &Tensor, metric: DtwMetric) -> f64 {
        let (p, q) = (a.dims2().0, b.dims2().0);
        let mut best = (f64::INFINITY, 0usize);
        let mut stack = vec![(0usize, 0usize, local_cost(a.row(0), b.row(0), metric).unwrap(), 1usize)];
        while let Some((i, j, c, len)) = stack.pop() {
            if i == p - 1 && j == q - 1 {
                if c < best.0 || (c == best.0 && len < best.1) {
                    best = (c, len);
                }
                continue;
            }
            for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
                let (ni, nj) = (i + di, j + dj);
                if ni < p && nj < q {
                    stack.push((ni, nj, c + local_cost(a.row(ni), b.row(nj), metric).unwrap(), len + 1));
                }
            }
        }
        best.0 / best.1 as f64
    }

    #[test]
    fn dtw_closed_forms_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 4, 3);
        assert!(dtw_distance(&a, &a, DtwMetric::Cosine).unwrap().abs() < 1e-12);
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let y = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        assert!((dtw_distance(&x, &y, DtwMetric::Cosine).unwrap() - 1.0).abs() < 1e-12);
        let zero = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(dtw_distance(&x, &zero, DtwMetric::Cosine).is_err());
        for p in 1..=5 {
            for q in 1..=5 {
                let a = random(&mut rng, p, 3);
                let b = random(&mut rng, q, 3);
                for metric in [DtwMetric::Cosine, DtwMetric::Euclidean] {
                    let d = dtw_distance(&a, &b, metric).unwrap();
                    assert!((d - brute_force(&a, &b, metric)).abs() < 1e-12, "{p}x{q}");
                    assert!((d - dtw_distance(&b, &a, metric).unwrap()).abs() < 1e-9);
                    assert!(d >= 0.0);
                }
            }
        }
    }

    #[test]
    fn cluster_separation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let c = i % 2;
            let mut v = vec![0.0; 4];
            v[c] = 1.0;
            v[2] = rng.gen_range(-1e-4..1e-4);
            rows.push(v);
            labels.push(c);
        }
        let (intra, inter, score) = cluster_separation(&rows, &labels).unwrap();
        assert!((intra - 1.0).abs() < 1e-6 && inter.abs() < 1e-6 && (score - 1.0).abs() < 1e-6);

        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let (intra, inter, score) = cluster_separation(&rows, &labels).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let (mut si, mut ni, mut se, mut ne) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..20 {
            for j in 0..20 {
                if i != j {
                    if labels[i] == labels[j] {
                        si += cos(&rows[i], &rows[j]);
                        ni += 1.0;
                    } else {
                        se += cos(&rows[i], &rows[j]);
                        ne += 1.0;
                    }
                }
            }
        }
        assert!((intra - si / ni).abs() < 1e-12 && (inter - se / ne).abs() < 1e-12);
        assert!((score - (intra - inter)).abs() < 1e-15);
        assert!(cluster_separation(&rows[..3], &[0, 0, 1]).is_err());
    }

    #[test]
    fn shuffled_labels_score_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let mut v: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.3..0.3)).collect();
                v[i % 2] += 1.0;
                v
            })
            .collect();
        let mut labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        assert!(cluster_separation(&rows, &labels).unwrap().2 > 0.5);
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        assert!(cluster_separation(&rows, &labels).unwrap().2.abs() < 0.05);
    }
}
