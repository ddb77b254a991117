//! Corpus file: one JSON document with `videos` (id → three 2-D float arrays)
//! and AVSD-like `dialogs`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AnswerSource, Corpus, Dialog, Round, SceneEntity, Setting, Split, SyntheticVideo};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::textproc::tokenize;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoRecord {
    rgb: Vec<Vec<f32>>,
    opt: Vec<Vec<f32>>,
    aud: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    scene: Vec<SceneEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    setting: Option<Setting>,
}

#[derive(Serialize, Deserialize)]
struct RoundRecord {
    question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answerable_from: Option<AnswerSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key_token: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    #[serde(alias = "image_id")]
    id: String,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default)]
    caption: String,
    dialog: Vec<RoundRecord>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Serialize)]
struct CorpusFile<'a> {
    videos: BTreeMap<&'a str, VideoRecord>,
    dialogs: Vec<DialogRecord>,
}

fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

fn to_rows(m: &Matrix<f32>) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn from_rows(id: &str, name: &str, rows: Vec<Vec<f32>>) -> Result<Matrix<f32>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Integrity(format!(
            "video `{id}` channel `{name}` must be a non-empty rectangular array"
        )));
    }
    Ok(Matrix::from_rows(&rows))
}

pub fn write_dataset(corpus: &Corpus, path: &Path) -> Result<()> {
    let videos = corpus
        .videos
        .iter()
        .map(|(id, v)| {
            (
                id.as_str(),
                VideoRecord {
                    rgb: to_rows(&v.features_rgb),
                    opt: to_rows(&v.features_opt),
                    aud: to_rows(&v.features_aud),
                    scene: v.latent_scene.clone(),
                    setting: v.setting.clone(),
                },
            )
        })
        .collect();
    let dialogs = corpus
        .dialogs
        .iter()
        .map(|d| DialogRecord {
            id: d.video_id.clone(),
            split: d.split,
            caption: join(&d.caption),
            dialog: d
                .rounds
                .iter()
                .map(|r| RoundRecord {
                    question: join(&r.question),
                    answer: join(&r.answer),
                    answers: r.extra_references.iter().map(|a| join(a)).collect(),
                    answerable_from: r.answerable_from,
                    key_token: r.key_token.clone(),
                })
                .collect(),
        })
        .collect();
    let text = serde_json::to_string(&CorpusFile { videos, dialogs })?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a corpus file. Dialog records are validated one at a time so a
/// schema violation names its record index; every dialog must reference a
/// video present in the file.
pub fn read_dataset(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub(crate) fn parse_dataset(text: &str) -> Result<Corpus> {
    let root: Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Parse { index: 0, message: "top level must be an object".into() })?;
    let raw_videos = obj
        .get("videos")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Parse { index: 0, message: "missing `videos` object".into() })?;
    let mut videos = BTreeMap::new();
    for (id, v) in raw_videos {
        let rec: VideoRecord = serde_json::from_value(v.clone()).map_err(|e| {
            Error::Integrity(format!("video `{id}`: {e}"))
        })?;
        let rgb = from_rows(id, "rgb", rec.rgb)?;
        let opt = from_rows(id, "opt", rec.opt)?;
        let aud = from_rows(id, "aud", rec.aud)?;
        if rgb.rows() != opt.rows() || rgb.rows() != aud.rows() {
            return Err(Error::Integrity(format!("video `{id}` channels disagree on frame count")));
        }
        if !(rgb.is_finite() && opt.is_finite() && aud.is_finite()) {
            return Err(Error::Integrity(format!("video `{id}` has non-finite features")));
        }
        videos.insert(
            id.clone(),
            SyntheticVideo {
                video_id: id.clone(),
                latent_scene: rec.scene,
                setting: rec.setting,
                features_rgb: rgb,
                features_opt: opt,
                features_aud: aud,
            },
        );
    }
    let raw_dialogs = obj
        .get("dialogs")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse { index: 0, message: "missing `dialogs` array".into() })?;
    let mut dialogs = Vec::with_capacity(raw_dialogs.len());
    for (index, d) in raw_dialogs.iter().enumerate() {
        let rec: DialogRecord = serde_json::from_value(d.clone()).map_err(|e| Error::Parse {
            index,
            message: e.to_string(),
        })?;
        if !videos.contains_key(&rec.id) {
            return Err(Error::Integrity(format!(
                "dialog record {index} references missing video `{}`",
                rec.id
            )));
        }
        let rounds = rec
            .dialog
            .into_iter()
            .map(|r| Round {
                question: tokenize(&r.question),
                answer: tokenize(&r.answer),
                extra_references: r.answers.iter().map(|a| tokenize(a)).collect(),
                answerable_from: r.answerable_from,
                key_token: r.key_token,
            })
            .collect::<Vec<_>>();
        if let Some(pos) = rounds.iter().position(|r| r.answer.is_empty()) {
            return Err(Error::Parse {
                index,
                message: format!("round {} has an empty answer", pos + 1),
            });
        }
        dialogs.push(Dialog {
            video_id: rec.id,
            split: rec.split,
            caption: tokenize(&rec.caption),
            rounds,
        });
    }
    Ok(Corpus { videos, dialogs })
}
