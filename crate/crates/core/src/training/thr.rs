use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mine::{dv_graph, StatisticsNetwork};
use crate::model::{GraphOutput, PackedBatch, Transformer};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Pure hallucination features `G = F* − F†` at every answer position of
/// the two batches, which must hold the same examples in the same order.
pub fn pure_h_features<S: Scalar>(
    hlm: &Transformer<S>,
    hlm_batch: &PackedBatch<S>,
    lm: &Transformer<S>,
    lm_batch: &PackedBatch<S>,
) -> Result<Matrix<S>> {
    if hlm.d() != lm.d() {
        return Err(Error::arg(format!("feature widths differ: {} vs {}", hlm.d(), lm.d())));
    }
    if hlm_batch.answer_rows.len() != lm_batch.answer_rows.len() {
        return Err(Error::arg("batches cover different answer positions"));
    }
    Ok(hlm.features(hlm_batch).sub(&lm.features(lm_batch)))
}

/// Records the response model's forward pass and the DV bound between its
/// answer features `F` and `g_feats`, with `perm` pairing row `i` of `F` with
/// row `perm[i]` of `g_feats` for the marginal term.
#[allow(clippy::too_many_arguments)]
pub fn thr_graph<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    rlm: &Transformer<S>,
    batch: &PackedBatch<S>,
    g_feats: &Matrix<S>,
    perm: &[usize],
    t: &StatisticsNetwork<S>,
    theta_trainable: bool,
    phi_trainable: bool,
    dropout: Option<&mut R>,
) -> Result<(GraphOutput, Var)> {
    let n = batch.answer_rows.len();
    if g_feats.shape() != (n, rlm.d()) {
        return Err(Error::arg(format!(
            "G is {:?}, expected ({n}, {})",
            g_feats.shape(),
            rlm.d()
        )));
    }
    if n < 2 || perm.len() != n {
        return Err(Error::arg("the bound needs at least two pairs and one permutation entry per pair"));
    }
    if t.input_dim != 2 * rlm.d() {
        return Err(Error::arg("statistics network width does not match the features"));
    }
    let out = rlm.forward(g, batch, theta_trainable, dropout);
    let gj = g.constant(g_feats.clone());
    let gm = g.constant(g_feats.select_rows(perm));
    let v = dv_graph(g, t, out.features, gj, gm, phi_trainable);
    Ok((out, v))
}

/// `L_THR` value for one batch, deterministic.
pub fn thr_loss<S: Scalar>(
    rlm: &Transformer<S>,
    batch: &PackedBatch<S>,
    g_feats: &Matrix<S>,
    perm: &[usize],
    t: &StatisticsNetwork<S>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (_, v) = thr_graph::<S, rand_chacha::ChaCha8Rng>(&mut g, rlm, batch, g_feats, perm, t, false, false, None)?;
    Ok(g.scalar(v).as_f64())
}
