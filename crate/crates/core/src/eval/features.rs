use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SegmentComposition, Transformer};
use crate::scalar::Scalar;
use crate::synthdata::{Corpus, DialogueExample};
use crate::textproc::Vocabulary;
use crate::training::{all_features, compose_all};

pub const DEFAULT_FEATURE_SAMPLES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub f: f64,
    pub f_star: f64,
    pub g: f64,
}

/// One coordinate of the response, hallucination and pure-h features over
/// the first answer positions of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub coordinate: usize,
    pub requested: usize,
    pub rows: Vec<FeatureRow>,
    pub corr_f_fstar: Option<f64>,
    pub corr_f_g: Option<f64>,
}

impl FeatureDump {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(["f", "f_star", "g"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Integrity(e.to_string()))?;
        crate::training::write_atomic(path, &bytes)
    }
}

/// Pearson correlation, `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "paired samples");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Features at up to `n_samples` answer positions of `examples`, taken in
/// order. Each model reads its own composition; the pure language model
/// reads the answer alone. A request beyond the available positions is
/// clamped with a warning.
#[allow(clippy::too_many_arguments)]
pub fn dump_features<S: Scalar>(
    rlm: (&Transformer<S>, &SegmentComposition),
    hlm: (&Transformer<S>, &SegmentComposition),
    lm: &Transformer<S>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    examples: &[DialogueExample],
    n_samples: usize,
    coordinate: usize,
) -> Result<FeatureDump> {
    let d = rlm.0.d();
    if hlm.0.d() != d || lm.d() != d {
        return Err(Error::arg("models have different feature widths"));
    }
    if coordinate >= d {
        return Err(Error::arg(format!("coordinate {coordinate} outside 0..{d}")));
    }
    // only as many examples as needed to cover the requested positions
    let mut take = 0;
    let mut positions = 0;
    while take < examples.len() && positions < n_samples {
        positions += examples[take].answer.len() + 1;
        take += 1;
    }
    let ex = &examples[..take];
    let feats = |m: &Transformer<S>, comp: &SegmentComposition| -> Result<Vec<f64>> {
        let inputs = compose_all(corpus, vocab, ex, comp)?;
        let f = all_features(m, &inputs, 32)?;
        Ok((0..f.rows()).map(|r| f.get(r, coordinate).as_f64()).collect())
    };
    let f = feats(rlm.0, rlm.1)?;
    let fs = feats(hlm.0, hlm.1)?;
    let fd = feats(lm, &SegmentComposition::answer_only())?;
    let n = f.len().min(n_samples);
    if n < n_samples {
        log::warn!("only {n} answer positions available, {n_samples} requested");
    }
    let rows: Vec<FeatureRow> = (0..n)
        .map(|i| FeatureRow {
            f: f[i],
            f_star: fs[i],
            g: fs[i] - fd[i],
        })
        .collect();
    let col = |k: fn(&FeatureRow) -> f64| rows.iter().map(k).collect::<Vec<f64>>();
    let (cf, cs, cg) = (col(|r| r.f), col(|r| r.f_star), col(|r| r.g));
    Ok(FeatureDump {
        coordinate,
        requested: n_samples,
        corr_f_fstar: pearson(&cf, &cs),
        corr_f_g: pearson(&cf, &cg),
        rows,
    })
}
