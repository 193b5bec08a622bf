//! Symmetric InfoNCE over a batch of paired embeddings.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix};

use super::{TAU_MAX, TAU_MIN};

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_video: Matrix,
    pub grad_text: Matrix,
    pub grad_tau: f64,
}

/// `½·[CE over rows + CE over columns]` of `S = V·Txᵀ / τ` with the diagonal
/// as targets, and its gradients with respect to `V`, `Tx` and `τ`.
pub fn contrastive_loss(video: &Matrix, text: &Matrix, tau: f64) -> Result<ContrastiveOutput> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if video.shape() != text.shape() || video.rows() == 0 {
        return Err(Error::Shape(format!(
            "contrastive loss needs two nonempty B×D batches, got {:?} and {:?}",
            video.shape(),
            text.shape()
        )));
    }
    let b = video.rows();
    let sims = video.matmul_t(text);
    let logits = sims.scale(1.0 / tau);

    let mut p_row = Matrix::zeros(b, b);
    let mut row_loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        row_loss += lse - row[i];
        for (j, p) in p_row.row_mut(i).iter_mut().enumerate() {
            *p = (row[j] - lse).exp();
        }
    }
    let mut p_col = Matrix::zeros(b, b);
    let mut col_loss = 0.0;
    let mut column = vec![0.0; b];
    for j in 0..b {
        for (i, c) in column.iter_mut().enumerate() {
            *c = logits[(i, j)];
        }
        let lse = log_sum_exp(&column);
        col_loss += lse - column[j];
        for i in 0..b {
            p_col[(i, j)] = (column[i] - lse).exp();
        }
    }
    let n = b as f64;
    let loss = 0.5 * (row_loss / n + col_loss / n);

    let mut d_logits = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let eye = if i == j { 1.0 } else { 0.0 };
            d_logits[(i, j)] = (p_row[(i, j)] - eye + p_col[(i, j)] - eye) / (2.0 * n);
        }
    }
    let grad_video = d_logits.matmul(text).scale(1.0 / tau);
    let grad_text = d_logits.t_matmul(video).scale(1.0 / tau);
    let grad_tau = -d_logits.zip_map(&sims, |d, s| d * s).sum() / (tau * tau);
    Ok(ContrastiveOutput { loss: loss.max(0.0), grad_video, grad_text, grad_tau })
}

/// Records the loss on `g` with `τ = clamp(exp(log_tau), TAU_MIN, TAU_MAX)`;
/// the clamp passes no gradient to `log_tau` when active.
pub fn contrastive_loss_node(g: &mut Graph, video: Var, text: Var, log_tau: Var) -> Result<Var> {
    let raw = g.value(log_tau).item().exp();
    let tau = raw.clamp(TAU_MIN, TAU_MAX);
    let out = contrastive_loss(g.value(video), g.value(text), tau)?;
    let d_log_tau = if raw == tau { out.grad_tau * tau } else { 0.0 };
    Ok(g.scalar_op(
        out.loss,
        vec![(video, out.grad_video), (text, out.grad_text), (log_tau, Matrix::scalar(d_log_tau))],
    ))
}
