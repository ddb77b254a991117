use serde::{Deserialize, Serialize};

/// Incremental next-token model seen by the search.
pub trait StepModel {
    type State: Clone;

    /// Log-probabilities of every vocabulary item after `state`.
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;

    fn advance(&self, state: &Self::State, token: usize) -> Self::State;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamParams {
    pub beam: usize,
    pub length_penalty: f64,
    /// Maximum number of generated tokens, `EOS` included.
    pub max_len: usize,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self {
            beam: 5,
            length_penalty: 1.0,
            max_len: 30,
        }
    }
}

struct Hyp<St> {
    tokens: Vec<usize>,
    logp: f64,
    state: St,
}

/// Beam search returning the completed hypothesis with the highest
/// `logp / len^length_penalty` (`len` counts `EOS`). The returned tokens
/// exclude `EOS`.
///
/// Each step ranks all expansions of the live beams. Expansions ending in
/// `EOS` are finalized when they rank within the top `beam`; the best
/// `beam` others stay live. The search stops once `beam` hypotheses are
/// finalized, nothing is live, or `max_len` is reached (the last step may
/// only emit `EOS`).
pub fn beam_search<M: StepModel>(
    model: &M,
    init: M::State,
    eos: usize,
    forbidden: &[usize],
    params: &BeamParams,
) -> Vec<usize> {
    assert!(params.beam >= 1, "beam must be at least 1");
    assert!(params.max_len >= 1, "max_len must be at least 1");
    let k = params.beam;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        state: init,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for step in 1..=params.max_len {
        let last = step == params.max_len;
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, h) in live.iter().enumerate() {
            let lp = model.log_probs(&h.state);
            for (tok, &l) in lp.iter().enumerate() {
                if forbidden.contains(&tok) || (last && tok != eos) || !l.is_finite() {
                    continue;
                }
                cand.push((h.logp + l, bi, tok));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (rank, &(logp, bi, tok)) in cand.iter().take(2 * k).enumerate() {
            if tok == eos {
                if rank < k {
                    let len = (live[bi].tokens.len() + 1) as f64;
                    finished.push((live[bi].tokens.clone(), logp / len.powf(params.length_penalty)));
                }
            } else if next.len() < k {
                let mut tokens = live[bi].tokens.clone();
                tokens.push(tok);
                next.push(Hyp {
                    tokens,
                    logp,
                    state: model.advance(&live[bi].state, tok),
                });
            }
        }
        live = next;
        if finished.len() >= k || live.is_empty() {
            break;
        }
    }
    finished
        .into_iter()
        .fold(None::<(Vec<usize>, f64)>, |best, (t, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((t, s)),
        })
        .map(|(t, _)| t)
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Next-token distribution depends on the last two tokens.
    struct Toy {
        v: usize,
        table: Vec<Vec<f64>>,
    }

    impl Toy {
        fn new(v: usize, seed: u64, temp: f64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = (0..(v + 1) * (v + 1))
                .map(|_| {
                    let l: Vec<f64> = (0..v).map(|_| rng.random::<f64>() * temp).collect();
                    let lse = l.iter().map(|x| x.exp()).sum::<f64>().ln();
                    l.iter().map(|x| x - lse).collect()
                })
                .collect();
            Self { v, table }
        }

        fn key(&self, s: &[usize]) -> usize {
            let a = s.last().map_or(self.v, |&x| x);
            let b = if s.len() >= 2 { s[s.len() - 2] } else { self.v };
            a * (self.v + 1) + b
        }
    }

    impl StepModel for Toy {
        type State = Vec<usize>;
        fn log_probs(&self, s: &Vec<usize>) -> Vec<f64> {
            self.table[self.key(s)].clone()
        }
        fn advance(&self, s: &Vec<usize>, t: usize) -> Vec<usize> {
            let mut s = s.clone();
            s.push(t);
            s
        }
    }

    const EOS: usize = 0;

    fn exhaustive(m: &Toy, max_len: usize, lp: f64) -> (Vec<usize>, f64) {
        let mut best = (vec![], f64::NEG_INFINITY);
        let mut stack = vec![(vec![], 0.0)];
        while let Some((s, logp)) = stack.pop() {
            let dist = m.log_probs(&s);
            let len = s.len() + 1;
            let score = (logp + dist[EOS]) / (len as f64).powf(lp);
            if score > best.1 {
                best = (s.clone(), score);
            }
            if len < max_len {
                for t in 1..m.v {
                    let mut n = s.clone();
                    n.push(t);
                    stack.push((n, logp + dist[t]));
                }
            }
        }
        best
    }

    fn score(m: &Toy, s: &[usize], lp: f64) -> f64 {
        let mut logp = 0.0;
        for i in 0..s.len() {
            logp += m.log_probs(&s[..i].to_vec())[s[i]];
        }
        logp += m.log_probs(&s.to_vec())[EOS];
        logp / ((s.len() + 1) as f64).powf(lp)
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..50 {
            let m = Toy::new(6, seed, 3.0);
            let p = BeamParams {
                beam: 1,
                length_penalty: 1.0,
                max_len: 8,
            };
            let got = beam_search(&m, vec![], EOS, &[], &p);
            let mut s = vec![];
            loop {
                let d = m.log_probs(&s);
                let allowed: Vec<usize> = if s.len() + 1 == p.max_len { vec![EOS] } else { (0..m.v).collect() };
                let t = *allowed.iter().max_by(|&&a, &&b| d[a].total_cmp(&d[b]).then(b.cmp(&a))).unwrap();
                if t == EOS {
                    break;
                }
                s.push(t);
            }
            assert_eq!(got, s, "seed {seed}");
        }
    }

    #[test]
    fn wide_beam_is_exact() {
        // 3 words + EOS, up to 4 tokens: at most 27 live prefixes
        for seed in 0..100 {
            for lp in [0.0, 1.0, 2.0] {
                let m = Toy::new(4, seed, 4.0);
                let p = BeamParams {
                    beam: 64,
                    length_penalty: lp,
                    max_len: 4,
                };
                let got = beam_search(&m, vec![], EOS, &[], &p);
                let (want, s) = exhaustive(&m, 4, lp);
                assert!((score(&m, &got, lp) - s).abs() < 1e-12, "seed {seed}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn vocab_four_beam_five_matches_enumeration() {
        let m = Toy::new(4, 2024, 4.0);
        let p = BeamParams {
            beam: 5,
            length_penalty: 1.0,
            max_len: 4,
        };
        let got = beam_search(&m, vec![], EOS, &[], &p);
        let (want, _) = exhaustive(&m, 4, 1.0);
        assert_eq!(got, want);
    }

    #[test]
    fn forbidden_tokens_never_appear() {
        let m = Toy::new(6, 3, 5.0);
        let out = beam_search(&m, vec![], EOS, &[2, 3], &BeamParams::default());
        assert!(out.iter().all(|&t| t != 2 && t != 3 && t != EOS));
        assert!(out.len() < 30);
    }
}
