use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Graph;
use crate::gradcheck::GradCheck;
use crate::synthdata::{generate_corpus, Corpus, DataConfig, DialogueExample};
use crate::tensor::Matrix;
use crate::textproc::{Vocabulary, BOS, EOS};

type Rng = ChaCha8Rng;

fn corpus() -> (Corpus, Vocabulary) {
    let c = generate_corpus(&DataConfig {
        n_videos: 4,
        channel_widths: (3, 3, 2),
        ..DataConfig::default()
    })
    .unwrap();
    let v = Vocabulary::build(c.sentences()).unwrap();
    (c, v)
}

fn tiny(vocab: usize, d: usize, heads: usize, layers: usize, seed: u64) -> Transformer<f64> {
    let cfg = ModelConfig {
        d,
        n_heads: heads,
        n_layers: layers,
        dropout: 0.0,
        max_positions: 160,
        vocab_size: vocab,
        channel_widths: (3, 3, 2),
    };
    let mut m = Transformer::<f64>::new(cfg, &mut Rng::seed_from_u64(seed)).unwrap();
    // spread the weights so the checks see non-trivial activations
    let mut rng = Rng::seed_from_u64(seed + 1);
    for id in m.params.ids().collect::<Vec<_>>() {
        let (r, c) = m.params.get(id).shape();
        let noise = Matrix::<f64>::randn(r, c, 0.3, &mut rng);
        m.params.get_mut(id).add_assign(&noise);
    }
    m
}

fn full_inputs(c: &Corpus, v: &Vocabulary, exs: &[DialogueExample], comp: &SegmentComposition) -> Vec<ComposedInput> {
    exs.iter()
        .map(|e| compose_full(e, c.video(&e.video_id).ok(), v, comp).unwrap())
        .collect()
}

fn logits_of(m: &Transformer<f64>, inputs: &[ComposedInput]) -> Matrix<f64> {
    let b = PackedBatch::new(inputs, m.config.max_positions, m.config.video_width()).unwrap();
    let mut g = Graph::new();
    let out = m.forward::<Rng>(&mut g, &b, false, None);
    g.value(out.logits).clone()
}

#[test]
fn composition_notation() {
    let all: Vec<String> = SegmentComposition::hlm_variants().iter().map(|c| c.name()).collect();
    assert_eq!(all, ["h_a", "q_a", "v_a", "v_h_a", "h_q_a"]);
    assert_eq!(SegmentComposition::full().name(), "v_h_q_a");
    assert_eq!("a".parse::<SegmentComposition>().unwrap(), SegmentComposition::answer_only());
    assert!("a_q".parse::<SegmentComposition>().is_err());
    assert!("q_q_a".parse::<SegmentComposition>().is_err());
    assert!("x_a".parse::<SegmentComposition>().is_err());
    let json = serde_json::to_string(&SegmentComposition::history_only()).unwrap();
    assert_eq!(json, "\"h_a\"");
}

#[test]
fn config_validation() {
    let mut c = ModelConfig {
        vocab_size: 20,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_ok());
    c.n_heads = 5;
    assert!(matches!(c.validate(), Err(crate::Error::Config { .. })));
    c.n_heads = 4;
    c.dropout = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn video_embedding() {
    let z = Matrix::<f64>::zeros(4, 2);
    let p = Matrix::<f64>::randn(5, 3, 1.0, &mut Rng::seed_from_u64(0));
    let out = embed_video(&z, &z, &Matrix::zeros(4, 1), &p).unwrap();
    assert!(out.as_slice().iter().all(|&v| v == 0.0));

    let (r, o, a) = (
        Matrix::from_vec(2, 1, vec![1.0, 2.0]),
        Matrix::from_vec(2, 1, vec![3.0, 4.0]),
        Matrix::from_vec(2, 1, vec![5.0, 6.0]),
    );
    let eye = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let out = embed_video(&r, &o, &a, &eye).unwrap();
    assert_eq!(out.as_slice(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);

    let mut rng = Rng::seed_from_u64(3);
    let (r, o, a) = (
        Matrix::<f64>::randn(4, 3, 1.0, &mut rng),
        Matrix::<f64>::randn(4, 2, 1.0, &mut rng),
        Matrix::<f64>::randn(4, 2, 1.0, &mut rng),
    );
    let p = Matrix::<f64>::randn(7, 5, 1.0, &mut rng);
    let out = embed_video(&r, &o, &a, &p).unwrap();
    for f in 0..4 {
        let row: Vec<f64> = r.row(f).iter().chain(o.row(f)).chain(a.row(f)).copied().collect();
        for c in 0..5 {
            let want: f64 = (0..7).map(|k| row[k] * p.get(k, c)).sum();
            assert!((out.get(f, c) - want).abs() < 1e-6);
        }
    }
    assert!(embed_video(&r, &Matrix::zeros(3, 2), &a, &p).is_err());
    assert!(embed_video(&r, &o, &a, &Matrix::zeros(6, 5)).is_err());
}

/// Dense re-derivation of a one-layer, one-head forward pass.
fn oracle_logits(m: &Transformer<f64>, tokens: &[usize]) -> Vec<Vec<f64>> {
    let w = |n: &str| m.params.get(m.params.find(n).unwrap()).clone();
    let d = m.config.d;
    let ln = |x: &[f64], g: &Matrix<f64>, b: &Matrix<f64>| -> Vec<f64> {
        let mu = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        (0..d)
            .map(|i| (x[i] - mu) / (var + 1e-5).sqrt() * g.get(0, i) + b.get(0, i))
            .collect()
    };
    let lin = |x: &[f64], wm: &Matrix<f64>, b: &Matrix<f64>| -> Vec<f64> {
        (0..wm.cols())
            .map(|j| b.get(0, j) + (0..x.len()).map(|i| x[i] * wm.get(i, j)).sum::<f64>())
            .collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let (tok, pos, seg) = (w("tok_emb"), w("pos_emb"), w("seg_emb"));
    let n = tokens.len();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            let e: Vec<f64> = (0..d)
                .map(|i| tok.get(tokens[p], i) + pos.get(p, i) + seg.get(Segment::AnswerPrefix.index(), i))
                .collect();
            ln(&e, &w("emb_ln.g"), &w("emb_ln.b"))
        })
        .collect();
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &w("layer0.ln1.g"), &w("layer0.ln1.b"))).collect();
    let qkv: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &w("layer0.attn.w_qkv"), &w("layer0.attn.b_qkv"))).collect();
    let mut x2 = x.clone();
    for i in 0..n {
        let s: Vec<f64> = (0..=i)
            .map(|j| (0..d).map(|k| qkv[i][k] * qkv[j][d + k]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let att: Vec<f64> = (0..d)
            .map(|k| (0..=i).map(|j| s[j].exp() / z * qkv[j][2 * d + k]).sum())
            .collect();
        let o = lin(&att, &w("layer0.attn.w_o"), &w("layer0.attn.b_o"));
        for k in 0..d {
            x2[i][k] += o[k];
        }
    }
    x2.iter()
        .map(|r| {
            let h = ln(r, &w("layer0.ln2.g"), &w("layer0.ln2.b"));
            let f: Vec<f64> = lin(&h, &w("layer0.mlp.w_fc"), &w("layer0.mlp.b_fc")).into_iter().map(gelu).collect();
            let f = lin(&f, &w("layer0.mlp.w_proj"), &w("layer0.mlp.b_proj"));
            let y: Vec<f64> = (0..d).map(|k| r[k] + f[k]).collect();
            let y = ln(&y, &w("ln_f.g"), &w("ln_f.b"));
            (0..tok.rows()).map(|v| (0..d).map(|k| y[k] * tok.get(v, k)).sum()).collect()
        })
        .collect()
}

#[test]
fn single_head_forward_matches_dense_oracle() {
    let m = tiny(9, 4, 1, 1, 11);
    let input = ComposedInput {
        tokens: vec![BOS, 6, 7],
        segments: vec![Segment::AnswerPrefix; 3],
        video_start: 0,
        video: None,
        answer_start: 0,
        targets: vec![6, 7, EOS],
    };
    let got = logits_of(&m, std::slice::from_ref(&input));
    let want = oracle_logits(&m, &input.tokens);
    for (r, row) in want.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((got.get(r, c) - v).abs() < 1e-5, "row {r} col {c}");
        }
    }
    // softmax rows normalize
    for r in 0..got.rows() {
        let mut row = got.row(r).to_vec();
        crate::autograd::softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn answer_positions_are_causal() {
    let (c, v) = corpus();
    let m = tiny(v.len(), 8, 2, 2, 1);
    let ex = c.examples().into_iter().find(|e| e.answer.len() >= 4).unwrap();
    let base = full_inputs(&c, &v, std::slice::from_ref(&ex), &SegmentComposition::full());
    let l0 = logits_of(&m, &base);
    for j in 0..ex.answer.len() {
        let mut pert = base[0].clone();
        let p = pert.answer_start + 1 + j;
        pert.tokens[p] = if pert.tokens[p] == 7 { 8 } else { 7 };
        let l1 = logits_of(&m, &[pert]);
        // logits at answer row i predict a_{i+1} from BOS, a_1..a_i
        for i in 0..=j {
            assert!(l0.row(i).iter().zip(l1.row(i)).all(|(a, b)| a == b), "row {i} moved when a_{} changed", j + 1);
        }
        assert!(l0.row(j + 1).iter().zip(l1.row(j + 1)).any(|(a, b)| a != b));
    }
}

#[test]
fn excluded_segment_never_matters() {
    let (c, v) = corpus();
    let m = tiny(v.len(), 8, 2, 1, 2);
    let ex = c.examples()[3].clone();
    let mut other = ex.clone();
    other.question = vec!["what".into(), "song".into(), "?".into()];
    let comp = SegmentComposition::history_only();
    let a = logits_of(&m, &full_inputs(&c, &v, &[ex], &comp));
    let b = logits_of(&m, &full_inputs(&c, &v, &[other], &comp));
    assert_eq!(a, b);
}

#[test]
fn uniform_and_certain_losses() {
    let (c, v) = corpus();
    let mut m = tiny(16, 8, 2, 1, 3);
    let tok = m.ids.tok;
    m.params.get_mut(tok).fill(0.0);
    let exs: Vec<DialogueExample> = c.examples().into_iter().take(3).collect();
    let words = Vocabulary::build([["a"; 1].as_slice()]).unwrap();
    let _ = (&v, &words);
    let inputs: Vec<ComposedInput> = exs
        .iter()
        .map(|e| {
            let mut ci = compose_full(e, None, &v, &SegmentComposition::answer_only()).unwrap();
            for t in ci.tokens.iter_mut().chain(ci.targets.iter_mut()) {
                *t %= 16;
            }
            ci
        })
        .collect();
    let b = PackedBatch::new(&inputs, 160, m.config.video_width()).unwrap();
    let (loss, _) = m.evaluate(&b);
    assert!((loss - 16f64.ln()).abs() < 1e-12);

    let mut g = Graph::<f64>::new();
    let mut l = Matrix::zeros(2, 4);
    l.set(0, 1, 1000.0);
    l.set(1, 3, 1000.0);
    let x = g.constant(l);
    let ce = g.cross_entropy(x, &[1, 3], &[0.5, 0.5]);
    assert_eq!(g.scalar(ce), 0.0);
}

#[test]
fn loss_matches_per_token_log_softmax() {
    let (c, v) = corpus();
    let m = tiny(v.len(), 8, 2, 2, 4);
    let exs: Vec<DialogueExample> = c.examples().into_iter().take(4).collect();
    let inputs = full_inputs(&c, &v, &exs, &SegmentComposition::full());
    let b = PackedBatch::new(&inputs, 160, m.config.video_width()).unwrap();
    let (loss, _) = m.evaluate(&b);
    // recompute through the cached path, one prefix at a time
    let mut total = 0.0;
    for e in &exs {
        let mm = e.answer.len() + 1;
        let mut s = 0.0;
        for t in 1..=mm {
            let (ci, idx) = compose_input(e, c.video(&e.video_id).ok(), &v, &SegmentComposition::full(), t).unwrap();
            let (_, h) = m.prefill(&ci).unwrap();
            let logits = m.logits(h.row(idx));
            let target = if t == mm { EOS } else { v.id(&e.answer[t - 1]) };
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            s += lse - logits[target];
        }
        total += s / mm as f64;
    }
    assert!((loss - total / exs.len() as f64).abs() < 1e-6);
}

#[test]
fn cached_decoding_path_matches_graph() {
    let (c, v) = corpus();
    let m = tiny(v.len(), 8, 2, 2, 5);
    let ex = &c.examples()[6];
    let comp = SegmentComposition::full();
    let full = compose_full(ex, c.video(&ex.video_id).ok(), &v, &comp).unwrap();
    let b = PackedBatch::new(std::slice::from_ref(&full), 160, m.config.video_width()).unwrap();
    let feats = m.features(&b);
    let (_, h) = m.prefill(&full).unwrap();
    for i in 0..feats.rows() {
        let row = h.row(full.answer_start + i);
        assert!(feats.row(i).iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-10));
    }
    // incremental: prefix then one token at a time
    let (prefix, _) = compose_input(ex, c.video(&ex.video_id).ok(), &v, &comp, 1).unwrap();
    let (cache, h0) = m.prefill(&prefix).unwrap();
    let step = TransformerStep { model: &m };
    let mut state = (cache, h0.row(h0.rows() - 1).to_vec());
    for (i, &tok) in full.tokens[full.answer_start + 1..].iter().enumerate() {
        state = step.advance(&state, tok);
        let want = feats.row(i + 1);
        assert!(state.1.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

#[test]
fn feature_index_contract() {
    let (c, v) = corpus();
    let m = tiny(v.len(), 8, 2, 1, 6);
    let ex = &c.examples()[2];
    let comp = SegmentComposition::history_only();
    let full = compose_full(ex, None, &v, &comp).unwrap();
    let feats = m.features(&PackedBatch::new(&[full], 160, 8).unwrap());
    assert_eq!(feats.shape(), (ex.answer.len() + 1, 8));
    for t in 1..=ex.answer.len() + 1 {
        let (ci, idx) = compose_input(ex, None, &v, &comp, t).unwrap();
        let (_, h) = m.prefill(&ci).unwrap();
        assert!(h.row(idx).iter().zip(feats.row(t - 1)).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(h.row(idx).iter().all(|x| x.is_finite()));
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let (c, v) = corpus();
    let m = tiny(v.len(), 8, 2, 2, 7);
    let exs: Vec<DialogueExample> = c.examples().into_iter().skip(1).take(2).collect();
    let inputs = full_inputs(&c, &v, &exs, &SegmentComposition::full());
    let b = PackedBatch::new(&inputs, 160, m.config.video_width()).unwrap();
    let mut g = Graph::new();
    let (_, loss) = m.loss::<Rng>(&mut g, &b, true, None);
    let grads = g.backward(loss, &m.params);
    let mut store = m.params.clone();
    let check = GradCheck {
        max_per_tensor: 64,
        ..GradCheck::default()
    };
    let rep = check.run(&mut store, &grads, |_| true, |s| {
        let mut mm = m.clone();
        mm.params = s.clone();
        mm.evaluate(&b).0
    });
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    assert!(rep.checked > 500);
}

#[test]
fn beam_decode_runs_on_a_transformer() {
    let (c, v) = corpus();
    let m = tiny(v.len(), 8, 2, 1, 8);
    let ex = &c.examples()[0];
    let (prefix, _) = compose_input(ex, c.video(&ex.video_id).ok(), &v, &SegmentComposition::full(), 1).unwrap();
    let (cache, h) = m.prefill(&prefix).unwrap();
    let step = TransformerStep { model: &m };
    let init = (cache, h.row(h.rows() - 1).to_vec());
    let forbidden = [crate::textproc::PAD, BOS, crate::textproc::UNK, crate::textproc::SEP];
    let p = BeamParams {
        max_len: 6,
        ..BeamParams::default()
    };
    let a = beam_search(&step, init.clone(), EOS, &forbidden, &p);
    let b = beam_search(&step, init, EOS, &forbidden, &p);
    assert_eq!(a, b);
    assert!(a.len() < 6);
    assert!(a.iter().all(|t| !forbidden.contains(t) && *t != EOS));
}
