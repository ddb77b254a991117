//! Tape-free forward pass with a key/value cache, used for decoding.

use super::beam::StepModel;
use super::compose::ComposedInput;
use super::transformer::Transformer;
use super::Segment;
use crate::autograd::{gelu, softmax_in_place, LN_EPS};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Keys and values of every processed position, per layer (`len × d`,
/// row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<S> {
    pub len: usize,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
}

fn layer_norm<S: Scalar>(x: &Matrix<S>, g: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    let mut out = x.clone();
    let n = S::lit(x.cols() as f64);
    let (g, b) = (g.as_slice(), b.as_slice());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / n;
        let rs = S::one() / (var + S::lit(LN_EPS)).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rs * g[c] + b[c];
        }
    }
    out
}

fn affine<S: Scalar>(x: &Matrix<S>, w: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    let mut y = x.matmul(w);
    let b = b.as_slice();
    for r in 0..y.rows() {
        for (o, &bb) in y.row_mut(r).iter_mut().zip(b) {
            *o += bb;
        }
    }
    y
}

impl<S: Scalar> Transformer<S> {
    fn w(&self, id: ParamId) -> &Matrix<S> {
        self.params.get(id)
    }

    pub fn empty_cache(&self) -> KvCache<S> {
        KvCache {
            len: 0,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
        }
    }

    /// Token, position and segment embeddings summed and normalized, one row
    /// per position of `input`.
    pub fn embed(&self, input: &ComposedInput) -> Result<Matrix<S>> {
        if input.len() > self.config.max_positions {
            return Err(Error::arg(format!(
                "sequence of length {} exceeds max_positions {}",
                input.len(),
                self.config.max_positions
            )));
        }
        let d = self.d();
        let mut x = Matrix::zeros(input.len(), d);
        let video = match &input.video {
            Some(v) => {
                if v.cols() != self.config.video_width() {
                    return Err(Error::arg("video width does not match the model"));
                }
                Some(v.cast::<S>().matmul(self.w(self.ids.video)))
            }
            None => None,
        };
        for p in 0..input.len() {
            let row = x.row_mut(p);
            if input.is_video(p) {
                let v = video.as_ref().expect("video present");
                row.copy_from_slice(v.row(p - input.video_start));
            } else {
                row.copy_from_slice(self.w(self.ids.tok).row(input.tokens[p]));
            }
            let pe = self.w(self.ids.pos).row(p);
            let se = self.w(self.ids.seg).row(input.segments[p].index());
            for c in 0..d {
                row[c] += pe[c] + se[c];
            }
        }
        Ok(layer_norm(&x, self.w(self.ids.emb_g), self.w(self.ids.emb_b)))
    }

    fn embed_token(&self, token: usize, pos: usize) -> Matrix<S> {
        let d = self.d();
        let mut x = Matrix::zeros(1, d);
        let (t, p) = (self.w(self.ids.tok).row(token), self.w(self.ids.pos).row(pos));
        let s = self.w(self.ids.seg).row(Segment::AnswerPrefix.index());
        for c in 0..d {
            x.as_mut_slice()[c] = t[c] + p[c] + s[c];
        }
        layer_norm(&x, self.w(self.ids.emb_g), self.w(self.ids.emb_b))
    }

    /// Runs embedded rows that continue the cached sequence and returns
    /// their final (normalized) hidden states.
    pub fn run(&self, cache: &mut KvCache<S>, mut x: Matrix<S>) -> Result<Matrix<S>> {
        let (n, d) = x.shape();
        if cache.len + n > self.config.max_positions {
            return Err(Error::arg("sequence exceeds max_positions"));
        }
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        for (li, l) in self.ids.layers.iter().enumerate() {
            let h = layer_norm(&x, self.w(l.ln1_g), self.w(l.ln1_b));
            let qkv = affine(&h, self.w(l.w_qkv), self.w(l.b_qkv));
            let (keys, values) = (&mut cache.keys[li], &mut cache.values[li]);
            for i in 0..n {
                let r = qkv.row(i);
                keys.extend_from_slice(&r[d..2 * d]);
                values.extend_from_slice(&r[2 * d..]);
            }
            let mut a = Matrix::zeros(n, d);
            for i in 0..n {
                let upto = cache.len + i + 1;
                let q = &qkv.row(i)[..d];
                for hd in 0..heads {
                    let off = hd * dh;
                    let mut s: Vec<S> = (0..upto)
                        .map(|j| {
                            let k = &keys[j * d + off..j * d + off + dh];
                            q[off..off + dh].iter().zip(k).map(|(&x, &y)| x * y).sum::<S>() * scale
                        })
                        .collect();
                    softmax_in_place(&mut s);
                    let out = &mut a.row_mut(i)[off..off + dh];
                    for (j, &pj) in s.iter().enumerate() {
                        let v = &values[j * d + off..j * d + off + dh];
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o += pj * vv;
                        }
                    }
                }
            }
            x.add_assign(&affine(&a, self.w(l.w_o), self.w(l.b_o)));
            let h = layer_norm(&x, self.w(l.ln2_g), self.w(l.ln2_b));
            let f = affine(&h, self.w(l.w_fc), self.w(l.b_fc)).map(gelu);
            x.add_assign(&affine(&f, self.w(l.w_proj), self.w(l.b_proj)));
        }
        cache.len += n;
        Ok(layer_norm(&x, self.w(self.ids.lnf_g), self.w(self.ids.lnf_b)))
    }

    /// Vocabulary logits for one hidden row.
    pub fn logits(&self, hidden: &[S]) -> Vec<S> {
        let h = Matrix::from_vec(1, hidden.len(), hidden.to_vec());
        h.matmul_t(self.w(self.ids.tok)).into_vec()
    }

    /// Processes a whole prefix and returns the cache plus the hidden state
    /// of every position.
    pub fn prefill(&self, input: &ComposedInput) -> Result<(KvCache<S>, Matrix<S>)> {
        let x = self.embed(input)?;
        let mut cache = self.empty_cache();
        let h = self.run(&mut cache, x)?;
        Ok((cache, h))
    }
}

/// Adapts a transformer and a cached prefix to the beam-search interface.
pub struct TransformerStep<'a, S: Scalar> {
    pub model: &'a Transformer<S>,
}

impl<S: Scalar> StepModel for TransformerStep<'_, S> {
    type State = (KvCache<S>, Vec<S>);

    fn log_probs(&self, state: &Self::State) -> Vec<f64> {
        let logits: Vec<f64> = self.model.logits(&state.1).iter().map(|v| v.as_f64()).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        logits.iter().map(|&v| v - lse).collect()
    }

    fn advance(&self, state: &Self::State, token: usize) -> Self::State {
        let mut cache = state.0.clone();
        let x = self.model.embed_token(token, cache.len);
        let h = self.model.run(&mut cache, x).expect("decode length bounded by max_positions");
        (cache, h.into_vec())
    }
}
