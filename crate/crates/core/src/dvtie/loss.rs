//! Training objective: `KL(softmax(a) ‖ softmax(â)) + λ · Σ_{a_i > a_j} max(0, â_j − â_i)`.
//!
//! The KL term compares distributions, so both sides are softmax-normalised.
//! The ranking term works on raw scores.

use serde::{Deserialize, Serialize};

use super::ImportanceScores;
use crate::numerics::{log_sum_exp, pairwise_hinge, Tape, Var};
use crate::oracle::TargetAttention;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub rank: f64,
    pub total: f64,
}

fn check_len(target: &[f64], pred: &[f64]) -> Result<()> {
    if target.len() != pred.len() {
        return Err(Error::Shape {
            op: "loss",
            left: vec![target.len()],
            right: vec![pred.len()],
        });
    }
    Ok(())
}

/// Pairwise hinge over every strictly ordered target pair.
pub fn rank_loss(target: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(target, pred)?;
    Ok(pairwise_hinge(target, pred))
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// `KL(softmax(target) ‖ softmax(pred))`.
pub fn kl_divergence(target: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(target, pred)?;
    let log_p = log_softmax(target);
    let log_q = log_softmax(pred);
    Ok(log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum())
}

pub fn loss_breakdown(target: &[f64], pred_raw: &[f64], lambda: f64) -> Result<LossBreakdown> {
    let kl = kl_divergence(target, pred_raw)?;
    let rank = rank_loss(target, pred_raw)?;
    Ok(LossBreakdown {
        kl,
        rank,
        total: kl + lambda * rank,
    })
}

pub fn total_loss(target: &TargetAttention, pred: &ImportanceScores, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(loss_breakdown(&target.a, &pred.raw, lambda)?.total)
}

/// The same objective recorded on a tape, for a raw score vector `pred`.
pub fn total_loss_on_tape(tape: &mut Tape, pred: Var, target: &[f64], lambda: f64) -> Result<Var> {
    check_len(target, tape.value(pred).data())?;
    let log_p = log_softmax(target);
    let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let entropy_term: f64 = p.iter().zip(&log_p).map(|(p, lp)| p * lp).sum();

    let log_q = tape.log_softmax_rows(pred)?;
    let cross = tape.weighted_sum(log_q, p.iter().map(|v| -v).collect())?;
    let kl = tape.add_scalar(cross, entropy_term)?;
    if lambda == 0.0 {
        return Ok(kl);
    }
    let rank = tape.pairwise_hinge(pred, target.to_vec())?;
    let rank = tape.scale(rank, lambda)?;
    tape.add(kl, rank)
}
