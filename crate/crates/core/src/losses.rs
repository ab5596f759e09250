//! Segmentation losses and the Dice evaluation metric.

use std::fmt::Write as _;

use crate::engine::{Scalar, Tensor};
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 1e-7;

fn check_pair<S: Scalar>(op: &str, prob: &Tensor<S>, target: &Tensor<S>) -> Result<()> {
    if prob.shape() != target.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", prob.shape(), target.shape())));
    }
    if target.data().iter().any(|&t| t != S::zero() && t != S::one()) {
        return Err(Error::Invalid(format!("{op}: target must be binary")));
    }
    Ok(())
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss<S: Scalar>(prob: &Tensor<S>, target: &Tensor<S>, eps: S) -> Result<S> {
    check_pair("dice_loss", prob, target)?;
    let (num, den) = dice_terms(prob, target, eps);
    Ok(S::one() - num / den)
}

fn dice_terms<S: Scalar>(prob: &Tensor<S>, target: &Tensor<S>, eps: S) -> (S, S) {
    let mut inter = S::zero();
    let mut sp = S::zero();
    let mut st = S::zero();
    for (&p, &t) in prob.data().iter().zip(target.data()) {
        inter += p * t;
        sp += p;
        st += t;
    }
    let two = S::one() + S::one();
    (two * inter + eps, sp + st + eps)
}

/// d(dice_loss)/d(prob).
pub(crate) fn dice_loss_grad<S: Scalar>(prob: &Tensor<S>, target: &Tensor<S>, eps: S) -> Tensor<S> {
    let (num, den) = dice_terms(prob, target, eps);
    let two = S::one() + S::one();
    let den2 = den * den;
    let data = target.data().iter().map(|&t| -(two * t * den - num) / den2).collect();
    Tensor::from_vec(prob.shape(), data).expect("same shape as prob")
}

fn clamp_prob<S: Scalar>(p: S) -> S {
    let lo = S::from_f64(BCE_CLAMP);
    let hi = S::one() - lo;
    p.max(lo).min(hi)
}

/// Mean binary cross-entropy, probabilities clamped away from 0 and 1.
pub fn bce_loss<S: Scalar>(prob: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    check_pair("bce_loss", prob, target)?;
    if prob.is_empty() {
        return Err(Error::Invalid("bce_loss: empty input".into()));
    }
    let total: S = prob
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            -(t * p.ln() + (S::one() - t) * (S::one() - p).ln())
        })
        .sum();
    Ok(total / S::from_f64(prob.len() as f64))
}

pub(crate) fn bce_loss_grad<S: Scalar>(prob: &Tensor<S>, target: &Tensor<S>) -> Tensor<S> {
    let n = S::from_f64(prob.len() as f64);
    let lo = S::from_f64(BCE_CLAMP);
    let data = prob
        .data()
        .iter()
        .zip(target.data())
        .map(
            |(&p, &t)| {
                if p < lo || p > S::one() - lo {
                    S::zero()
                } else {
                    (-(t / p) + (S::one() - t) / (S::one() - p)) / n
                }
            },
        )
        .collect();
    Tensor::from_vec(prob.shape(), data).expect("same shape as prob")
}

/// `2|A n B| / (|A| + |B|)` over binary masks; 1.0 when both are empty.
pub fn dice_score<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    check_pair("dice_score", pred, target)?;
    if pred.data().iter().any(|&p| p != S::zero() && p != S::one()) {
        return Err(Error::Invalid("dice_score: prediction must be binary".into()));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p == S::one(), t == S::one());
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Per-image Dice plus population mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub per_image_dice: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n_images: usize,
}

impl EvalReport {
    pub fn new(ids: Vec<String>, per_image_dice: Vec<f64>) -> Result<Self> {
        if ids.len() != per_image_dice.len() {
            return Err(Error::Invalid("eval report: ids and scores differ in length".into()));
        }
        if per_image_dice.is_empty() {
            return Err(Error::Invalid("eval report: no images".into()));
        }
        let (mean, std) = mean_std(&per_image_dice);
        Ok(Self { n_images: per_image_dice.len(), ids, per_image_dice, mean, std })
    }

    /// Aggregates as `#`-prefixed header lines, then `id,dice` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# n_images={}", self.n_images);
        let _ = writeln!(s, "# mean={}", self.mean);
        let _ = writeln!(s, "# std={}", self.std);
        s.push_str("id,dice\n");
        for (id, d) in self.ids.iter().zip(&self.per_image_dice) {
            let _ = writeln!(s, "{id},{d}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Invalid(format!("eval csv: {m}"));
        let mut ids = Vec::new();
        let mut dice = Vec::new();
        let mut header = (None, None, None);
        for line in text.lines() {
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(line))?;
                match k {
                    "n_images" => header.0 = Some(v.parse::<usize>().map_err(|_| bad(line))?),
                    "mean" => header.1 = Some(v.parse::<f64>().map_err(|_| bad(line))?),
                    "std" => header.2 = Some(v.parse::<f64>().map_err(|_| bad(line))?),
                    _ => return Err(bad(line)),
                }
            } else if line == "id,dice" || line.is_empty() {
                continue;
            } else {
                let (id, d) = line.rsplit_once(',').ok_or_else(|| bad(line))?;
                ids.push(id.to_string());
                dice.push(d.parse::<f64>().map_err(|_| bad(line))?);
            }
        }
        let (Some(n), Some(mean), Some(std)) = header else {
            return Err(bad("missing aggregate header"));
        };
        Ok(Self { ids, per_image_dice: dice, mean, std, n_images: n })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
