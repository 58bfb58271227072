//! L2 normalization, cosine similarity, and the symmetric InfoNCE loss with
//! analytic gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::Float;

const MIN_NORM: f64 = 1e-12;

pub const DEFAULT_TAU: f64 = 0.07;

/// A batch of row embeddings that is known to be L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<F> {
    rows: Array2<F>,
    normalized: bool,
}

impl<F: Float> EmbeddingBatch<F> {
    /// Wrap raw rows without normalizing them.
    pub fn raw(rows: Array2<F>) -> Self {
        Self { rows, normalized: false }
    }

    pub fn rows(&self) -> &Array2<F> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<F> {
        self.rows
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

fn row_norms<F: Float>(x: ArrayView2<F>) -> Result<Array1<F>> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n.to_f64().unwrap() >= MIN_NORM)) {
        return Err(Error::ZeroVector(i));
    }
    Ok(norms)
}

pub fn normalize<F: Float>(batch: ArrayView2<F>) -> Result<EmbeddingBatch<F>> {
    let norms = row_norms(batch)?;
    let rows = &batch / &norms.insert_axis(Axis(1));
    Ok(EmbeddingBatch { rows, normalized: true })
}

/// Chain rule through `ẑ = x/‖x‖`: each row of the incoming gradient is
/// projected off `ẑ` and divided by `‖x‖`.
pub fn normalize_backward<F: Float>(grad_normalized: ArrayView2<F>, raw: ArrayView2<F>) -> Result<Array2<F>> {
    if grad_normalized.dim() != raw.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", grad_normalized.dim(), raw.dim())));
    }
    let norms = row_norms(raw)?;
    let mut out = grad_normalized.to_owned();
    Zip::from(out.rows_mut()).and(raw.rows()).and(&norms).for_each(|mut g, x, &n| {
        let along = g.dot(&x) / (n * n);
        g.zip_mut_with(&x, |gi, &xi| *gi = (*gi - along * xi) / n);
    });
    Ok(out)
}

/// `S[i, j] = ⟨a_i, b_j⟩`.
pub fn similarity_matrix<F: Float>(a: &EmbeddingBatch<F>, b: &EmbeddingBatch<F>) -> Result<Array2<F>> {
    if !a.normalized || !b.normalized {
        return Err(Error::NotNormalized);
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("embedding widths {} and {}", a.dim(), b.dim())));
    }
    Ok(a.rows.dot(&b.rows.t()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<F> {
    /// Mean of the two directional losses.
    pub total_loss: F,
    /// Each text against all images in the batch.
    pub loss_t2i: F,
    /// Each image against all texts in the batch.
    pub loss_i2t: F,
    /// Gradient of `total_loss` w.r.t. the normalized image embeddings.
    pub grad_z_img: Array2<F>,
    /// Gradient of `total_loss` w.r.t. the normalized text embeddings.
    pub grad_z_txt: Array2<F>,
}

/// Row-wise softmax of `logits` and the mean over rows of
/// `logsumexp(row) − row[i]`.
fn softmax_ce_rows<F: Float>(logits: ArrayView2<F>) -> (Array2<F>, F) {
    let n = logits.nrows();
    let mut probs = logits.to_owned();
    let mut loss = F::zero();
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss += sum.ln() + max - logits[[i, i]];
        row /= sum;
    }
    (probs, loss / F::from(n).unwrap())
}

/// Symmetric InfoNCE over a batch of matched pairs (row `i` of both
/// batches). Each direction is a cross-entropy over the batch with logits
/// `sim/τ`, averaged over items; the two directions are averaged.
pub fn infonce_loss<F: Float>(z_img: &EmbeddingBatch<F>, z_txt: &EmbeddingBatch<F>, tau: f64) -> Result<LossOutput<F>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTau(tau));
    }
    if z_img.len() != z_txt.len() || z_img.is_empty() {
        return Err(Error::ShapeMismatch(format!("batch sizes {} and {}", z_img.len(), z_txt.len())));
    }
    let n = z_img.len();
    let inv_tau = F::from(1.0 / tau).unwrap();
    // rows: images, columns: texts
    let logits = similarity_matrix(z_img, z_txt)? * inv_tau;
    let (p_i2t, loss_i2t) = softmax_ce_rows(logits.view());
    let (p_t2i, loss_t2i) = softmax_ce_rows(logits.t());

    // dL/dS = ((P_i2t − I) + (P_t2iᵀ − I)) / (2·n·τ)
    let mut grad_s = p_i2t + &p_t2i.t();
    let two = F::from(2.0).unwrap();
    for i in 0..n {
        grad_s[[i, i]] -= two;
    }
    grad_s *= inv_tau / (two * F::from(n).unwrap());

    let grad_z_img = grad_s.dot(z_txt.rows());
    let grad_z_txt = grad_s.t().dot(z_img.rows());
    Ok(LossOutput { total_loss: (loss_t2i + loss_i2t) / two, loss_t2i, loss_i2t, grad_z_img, grad_z_txt })
}
