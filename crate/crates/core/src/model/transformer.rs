use rand::Rng;

use super::compose::PackedBatch;
use super::{ModelConfig, Segment};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const INIT_STD: f64 = 0.02;

/// Row-wise channel concatenation followed by a linear projection.
pub fn embed_video<S: Scalar>(
    rgb: &Matrix<S>,
    opt: &Matrix<S>,
    aud: &Matrix<S>,
    projection: &Matrix<S>,
) -> Result<Matrix<S>> {
    let l = rgb.rows();
    if opt.rows() != l || aud.rows() != l {
        return Err(Error::arg(format!(
            "channel frame counts differ: {} / {} / {}",
            l,
            opt.rows(),
            aud.rows()
        )));
    }
    let width = rgb.cols() + opt.cols() + aud.cols();
    if projection.rows() != width {
        return Err(Error::arg(format!(
            "projection has {} rows, channels sum to {width}",
            projection.rows()
        )));
    }
    Ok(rgb.hcat(opt).hcat(aud).matmul(projection))
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc: ParamId,
    pub b_fc: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelIds {
    pub tok: ParamId,
    pub video: ParamId,
    pub pos: ParamId,
    pub seg: ParamId,
    pub emb_g: ParamId,
    pub emb_b: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

/// Pre-norm causal transformer with tied input/output token embeddings.
#[derive(Debug, Clone)]
pub struct Transformer<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub(crate) ids: ModelIds,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GraphOutput {
    /// Final hidden states at every answer position (`n_answer × d`).
    pub features: Var,
    /// Vocabulary logits at the same rows.
    pub logits: Var,
}

impl<S: Scalar> Transformer<S> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut p = ParamStore::new();
        let mut w = |p: &mut ParamStore<S>, name: &str, r: usize, c: usize| {
            p.add(name, Matrix::randn(r, c, INIT_STD, rng))
        };
        let ones = |p: &mut ParamStore<S>, name: &str| p.add(name, Matrix::filled(1, d, S::one()));
        let zeros = |p: &mut ParamStore<S>, name: &str, c: usize| p.add(name, Matrix::zeros(1, c));

        let tok = w(&mut p, "tok_emb", config.vocab_size, d);
        let video = w(&mut p, "video_proj", config.video_width(), d);
        let pos = w(&mut p, "pos_emb", config.max_positions, d);
        let seg = w(&mut p, "seg_emb", Segment::COUNT, d);
        let emb_g = ones(&mut p, "emb_ln.g");
        let emb_b = zeros(&mut p, "emb_ln.b", d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: ones(&mut p, &n("ln1.g")),
                ln1_b: zeros(&mut p, &n("ln1.b"), d),
                w_qkv: w(&mut p, &n("attn.w_qkv"), d, 3 * d),
                b_qkv: zeros(&mut p, &n("attn.b_qkv"), 3 * d),
                w_o: w(&mut p, &n("attn.w_o"), d, d),
                b_o: zeros(&mut p, &n("attn.b_o"), d),
                ln2_g: ones(&mut p, &n("ln2.g")),
                ln2_b: zeros(&mut p, &n("ln2.b"), d),
                w_fc: w(&mut p, &n("mlp.w_fc"), d, 4 * d),
                b_fc: zeros(&mut p, &n("mlp.b_fc"), 4 * d),
                w_proj: w(&mut p, &n("mlp.w_proj"), 4 * d, d),
                b_proj: zeros(&mut p, &n("mlp.b_proj"), d),
            });
        }
        let lnf_g = ones(&mut p, "ln_f.g");
        let lnf_b = zeros(&mut p, "ln_f.b", d);
        Ok(Self {
            config,
            params: p,
            ids: ModelIds {
                tok,
                video,
                pos,
                seg,
                emb_g,
                emb_b,
                layers,
                lnf_g,
                lnf_b,
            },
        })
    }

    /// Shape-compatible copy with a different scalar type.
    pub fn cast<T: Scalar>(&self) -> Transformer<T> {
        let mut params = ParamStore::new();
        for id in self.params.ids() {
            params.add(self.params.name(id), self.params.get(id).cast());
        }
        Transformer {
            config: self.config.clone(),
            params,
            ids: self.ids.clone(),
        }
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Records a forward pass. With `dropout = None` the pass is
    /// deterministic; `trainable` controls whether parameters receive
    /// gradients.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        batch: &PackedBatch<S>,
        trainable: bool,
        mut dropout: Option<&mut R>,
    ) -> GraphOutput {
        let p = |g: &mut Graph<S>, id: ParamId| g.param(&self.params, id, trainable);
        let ids = &self.ids;
        let rate = self.config.dropout;
        let mut drop = |g: &mut Graph<S>, x: Var| match dropout.as_deref_mut() {
            Some(rng) => g.dropout(x, rate, rng),
            None => x,
        };

        let tok = p(g, ids.tok);
        let mut parts = Vec::with_capacity(2);
        if !batch.token_rows.is_empty() {
            parts.push((g.gather(tok, &batch.token_ids), batch.token_rows.clone()));
        }
        if !batch.video_rows.is_empty() {
            let wv = p(g, ids.video);
            let v = g.constant(batch.video.clone());
            parts.push((g.matmul(v, wv), batch.video_rows.clone()));
        }
        let x = g.place_rows(parts, batch.n_rows);
        let pos = p(g, ids.pos);
        let pos = g.gather(pos, &batch.positions);
        let seg = p(g, ids.seg);
        let seg = g.gather(seg, &batch.segments);
        let x = g.add(x, pos);
        let x = g.add(x, seg);
        let (eg, eb) = (p(g, ids.emb_g), p(g, ids.emb_b));
        let x = g.layer_norm(x, eg, eb);
        let mut x = drop(g, x);

        for l in &ids.layers {
            let (g1, b1) = (p(g, l.ln1_g), p(g, l.ln1_b));
            let h = g.layer_norm(x, g1, b1);
            let (w, b) = (p(g, l.w_qkv), p(g, l.b_qkv));
            let qkv = g.matmul(h, w);
            let qkv = g.add_row(qkv, b);
            let a = g.causal_attention(qkv, &batch.spans, self.config.n_heads);
            let (w, b) = (p(g, l.w_o), p(g, l.b_o));
            let o = g.matmul(a, w);
            let o = g.add_row(o, b);
            let o = drop(g, o);
            x = g.add(x, o);

            let (g2, b2) = (p(g, l.ln2_g), p(g, l.ln2_b));
            let h = g.layer_norm(x, g2, b2);
            let (w, b) = (p(g, l.w_fc), p(g, l.b_fc));
            let f = g.matmul(h, w);
            let f = g.add_row(f, b);
            let f = g.gelu(f);
            let (w, b) = (p(g, l.w_proj), p(g, l.b_proj));
            let f = g.matmul(f, w);
            let f = g.add_row(f, b);
            let f = drop(g, f);
            x = g.add(x, f);
        }
        let ans = g.select_rows(x, &batch.answer_rows);
        let (fg, fb) = (p(g, ids.lnf_g), p(g, ids.lnf_b));
        let features = g.layer_norm(ans, fg, fb);
        let logits = g.matmul_t(features, tok);
        GraphOutput { features, logits }
    }

    /// Records the forward pass and the batch loss (mean over examples of
    /// the per-token mean negative log-likelihood).
    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        batch: &PackedBatch<S>,
        trainable: bool,
        dropout: Option<&mut R>,
    ) -> (GraphOutput, Var) {
        assert!(batch.has_targets(), "batch has no targets");
        let out = self.forward(g, batch, trainable, dropout);
        let loss = g.cross_entropy(out.logits, &batch.targets, &batch.weights);
        (out, loss)
    }

    /// Deterministic loss and answer-position features without gradients.
    pub fn evaluate(&self, batch: &PackedBatch<S>) -> (f64, Matrix<S>) {
        let mut g = Graph::new();
        let (out, loss) = self.loss::<rand_chacha::ChaCha8Rng>(&mut g, batch, false, None);
        (g.scalar(loss).as_f64(), g.value(out.features).clone())
    }

    /// Final hidden states at every answer position, no gradients.
    pub fn features(&self, batch: &PackedBatch<S>) -> Matrix<S> {
        let mut g = Graph::new();
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, batch, false, None);
        g.value(out.features).clone()
    }
}
