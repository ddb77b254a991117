//! Seeded synthetic video-grounded dialogue corpus.
//!
//! Each video shows a couple of objects, each with a color and an action,
//! encoded as noisy projected attribute vectors across three feature
//! channels. Dialogue rounds either restate a fact already present in the
//! caption or history (`TextCopyable`), ask about an attribute visible only in
//! the video (`VideoOnly`), or ask something the video cannot answer
//! (`Unanswerable`). The copy-bias knob controls how often answers can be
//! produced by copying text, which is what lets a model learn to hallucinate.

mod io;

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Matrix;
use crate::textproc::tokenize;

pub use io::{read_dataset, write_dataset};

pub const OBJECTS: [&str; 3] = ["cup", "ball", "box"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const ACTIONS: [&str; 3] = ["rolling", "spinning", "falling"];

const PEOPLE: [&str; 8] = ["man", "woman", "boy", "girl", "person", "guy", "lady", "child"];
const ROOMS: [&str; 12] = [
    "kitchen", "bedroom", "garage", "office", "hallway", "bathroom", "basement", "pantry", "closet",
    "studio", "attic", "laundry",
];
const ACTIVITIES: [&str; 16] = [
    "sitting", "standing", "walking", "cooking", "reading", "cleaning", "laughing", "eating",
    "drinking", "dancing", "sneezing", "smiling", "waiting", "stretching", "talking", "sweeping",
];
const FURNITURE: [&str; 12] = [
    "table", "chair", "sofa", "bed", "shelf", "desk", "floor", "counter", "window", "door", "stove",
    "lamp",
];
const TIMES: [&str; 6] = ["then", "later", "slowly", "quickly", "briefly", "again"];
const OPENERS: [&str; 4] = ["in the video", "at first", "for a while", "at the start"];

/// Fixed answers meaning "unknown".
pub const UNKNOWN_ANSWERS: [&str; 4] = [
    "i can not tell",
    "i do not know",
    "it is not clear from the video",
    "there is no way to know",
];

const UNANSWERABLE_QUESTIONS: [&str; 5] = [
    "what is the {p} saying ?",
    "what song is playing ?",
    "what is the {p} thinking about ?",
    "how old is the {p} ?",
    "what is the name of the {p} ?",
];

/// Share of non-copyable rounds that are unanswerable.
pub const UNANSWERABLE_SHARE: f64 = 0.1;
/// Standard deviation of feature noise.
pub const FEATURE_NOISE: f64 = 0.1;

const ATTR_DIM: usize = OBJECTS.len() + COLORS.len() + ACTIONS.len();

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub object: String,
    pub color: String,
    pub action: String,
}

/// Text-side facts about a video; never encoded in the features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub person: String,
    pub room: String,
    pub activity: String,
    pub furniture: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    /// One entity per frame group.
    pub latent_scene: Vec<SceneEntity>,
    pub setting: Option<Setting>,
    pub features_rgb: Matrix<f32>,
    pub features_opt: Matrix<f32>,
    pub features_aud: Matrix<f32>,
}

impl SyntheticVideo {
    pub fn frames(&self) -> usize {
        self.features_rgb.rows()
    }

    /// Entity shown in frame `f` (frames are split evenly across entities).
    pub fn entity_at(&self, f: usize) -> Option<&SceneEntity> {
        let n = self.latent_scene.len();
        (n > 0).then(|| &self.latent_scene[f * n / self.frames().max(1)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    VideoOnly,
    TextCopyable,
    Unanswerable,
}

impl AnswerSource {
    pub fn name(self) -> &'static str {
        match self {
            AnswerSource::VideoOnly => "video_only",
            AnswerSource::TextCopyable => "text_copyable",
            AnswerSource::Unanswerable => "unanswerable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

pub type Tokens = Vec<String>;

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueExample {
    pub example_id: String,
    pub video_id: String,
    pub split: Split,
    pub caption: Tokens,
    pub history: Vec<(Tokens, Tokens)>,
    pub question: Tokens,
    pub answer: Tokens,
    /// Additional reference answers (multi-reference evaluation).
    pub extra_references: Vec<Tokens>,
    pub round_index: usize,
    pub answerable_from: Option<AnswerSource>,
    pub key_token: Option<String>,
}

impl DialogueExample {
    /// Ground truth first, then any extra references.
    pub fn references(&self) -> Vec<&[String]> {
        std::iter::once(self.answer.as_slice())
            .chain(self.extra_references.iter().map(Vec::as_slice))
            .collect()
    }

    /// History as individual sentences (each question and each answer).
    pub fn history_sentences(&self) -> Vec<&[String]> {
        self.history
            .iter()
            .flat_map(|(q, a)| [q.as_slice(), a.as_slice()])
            .collect()
    }

    pub fn history_tokens(&self) -> Vec<&str> {
        self.history
            .iter()
            .flat_map(|(q, a)| q.iter().chain(a))
            .map(String::as_str)
            .collect()
    }

    /// True when `token` occurs in the caption or any history sentence.
    pub fn text_mentions(&self, token: &str) -> bool {
        self.caption.iter().any(|t| t == token) || self.history_tokens().contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub question: Tokens,
    pub answer: Tokens,
    pub extra_references: Vec<Tokens>,
    pub answerable_from: Option<AnswerSource>,
    pub key_token: Option<String>,
}

/// One video's caption plus its ordered question/answer rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Dialog {
    pub video_id: String,
    pub split: Split,
    pub caption: Tokens,
    pub rounds: Vec<Round>,
}

impl Dialog {
    /// Expands to one example per round, each carrying all earlier rounds as
    /// history.
    pub fn examples(&self) -> Vec<DialogueExample> {
        let mut history: Vec<(Tokens, Tokens)> = Vec::new();
        let mut out = Vec::with_capacity(self.rounds.len());
        for (i, r) in self.rounds.iter().enumerate() {
            out.push(DialogueExample {
                example_id: format!("{}_r{}", self.video_id, i + 1),
                video_id: self.video_id.clone(),
                split: self.split,
                caption: self.caption.clone(),
                history: history.clone(),
                question: r.question.clone(),
                answer: r.answer.clone(),
                extra_references: r.extra_references.clone(),
                round_index: i + 1,
                answerable_from: r.answerable_from,
                key_token: r.key_token.clone(),
            });
            history.push((r.question.clone(), r.answer.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub videos: BTreeMap<String, SyntheticVideo>,
    pub dialogs: Vec<Dialog>,
}

impl Corpus {
    pub fn examples(&self) -> Vec<DialogueExample> {
        self.dialogs.iter().flat_map(Dialog::examples).collect()
    }

    pub fn split(&self, split: Split) -> Vec<DialogueExample> {
        self.dialogs
            .iter()
            .filter(|d| d.split == split)
            .flat_map(Dialog::examples)
            .collect()
    }

    pub fn video(&self, id: &str) -> Result<&SyntheticVideo> {
        self.videos
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("missing video `{id}`")))
    }

    /// Every token sequence in the corpus (for vocabulary building).
    pub fn sentences(&self) -> Vec<&[String]> {
        let mut out = Vec::new();
        for d in &self.dialogs {
            out.push(d.caption.as_slice());
            for r in &d.rounds {
                out.push(r.question.as_slice());
                out.push(r.answer.as_slice());
                out.extend(r.extra_references.iter().map(Vec::as_slice));
            }
        }
        out
    }

    pub fn channel_widths(&self) -> Option<(usize, usize, usize)> {
        self.videos.values().next().map(|v| {
            (
                v.features_rgb.cols(),
                v.features_opt.cols(),
                v.features_aud.cols(),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub frames: usize,
    pub channel_widths: (usize, usize, usize),
    pub n_rounds: usize,
    pub copy_bias: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_videos: 500,
            frames: 4,
            channel_widths: (16, 16, 8),
            n_rounds: 5,
            copy_bias: 0.6,
            valid_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

/// Seeded attribute projections shared by every video of one world.
struct Projections {
    rgb: Matrix<f64>,
    opt: Matrix<f64>,
    aud: Matrix<f64>,
}

impl Projections {
    fn new(seed: u64, (w_rgb, w_opt, w_aud): (usize, usize, usize)) -> Self {
        let mut rng = stream(seed, "projection", &[]);
        // each channel sees a subset of the attribute one-hot: rgb → object and
        // color, optical flow → object and action, audio → action
        let masked = |w: usize, keep: &dyn Fn(usize) -> bool, rng: &mut ChaCha8Rng| {
            let mut m = Matrix::<f64>::randn(ATTR_DIM, w, 1.0, rng);
            for r in 0..ATTR_DIM {
                if !keep(r) {
                    m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
            }
            m
        };
        let n_obj = OBJECTS.len();
        let n_col = COLORS.len();
        Self {
            rgb: masked(w_rgb, &|r| r < n_obj + n_col, &mut rng),
            opt: masked(w_opt, &|r| r < n_obj || r >= n_obj + n_col, &mut rng),
            aud: masked(w_aud, &|r| r >= n_obj + n_col, &mut rng),
        }
    }
}

fn one_hot(e: &SceneEntity) -> [f64; ATTR_DIM] {
    let mut v = [0.0; ATTR_DIM];
    let idx = |list: &[&str], s: &str| list.iter().position(|x| *x == s).expect("known attribute");
    v[idx(&OBJECTS, &e.object)] = 1.0;
    v[OBJECTS.len() + idx(&COLORS, &e.color)] = 1.0;
    v[OBJECTS.len() + COLORS.len() + idx(&ACTIONS, &e.action)] = 1.0;
    v
}

fn channel(
    frames: usize,
    scene: &[SceneEntity],
    proj: &Matrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Matrix<f32> {
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid sigma");
    let w = proj.cols();
    let mut out = Matrix::<f32>::zeros(frames, w);
    for f in 0..frames {
        let e = &scene[f * scene.len() / frames];
        let oh = one_hot(e);
        for c in 0..w {
            let mut v = 0.0;
            for (r, &x) in oh.iter().enumerate() {
                v += x * proj.get(r, c);
            }
            out.set(f, c, (v + noise.sample(rng)) as f32);
        }
    }
    out
}

/// Generates `n_videos` seeded videos with `frames` rows per channel.
pub fn generate_world(
    seed: u64,
    n_videos: usize,
    frames: usize,
    channel_widths: (usize, usize, usize),
) -> Result<Vec<SyntheticVideo>> {
    if n_videos == 0 {
        return Err(Error::arg("n_videos must be at least 1"));
    }
    if frames == 0 {
        return Err(Error::arg("frames must be at least 1"));
    }
    let (a, b, c) = channel_widths;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::arg("channel widths must be at least 1"));
    }
    let proj = Projections::new(seed, channel_widths);
    let mut videos = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let mut rng = stream(seed, "video", &[i as u64]);
        let n_ent = frames.min(2);
        let mut objs = OBJECTS.to_vec();
        objs.shuffle(&mut rng);
        let latent_scene: Vec<SceneEntity> = objs[..n_ent]
            .iter()
            .map(|o| SceneEntity {
                object: o.to_string(),
                color: COLORS.choose(&mut rng).expect("non-empty").to_string(),
                action: ACTIONS.choose(&mut rng).expect("non-empty").to_string(),
            })
            .collect();
        let setting = Setting {
            person: PEOPLE.choose(&mut rng).expect("non-empty").to_string(),
            room: ROOMS.choose(&mut rng).expect("non-empty").to_string(),
            activity: ACTIVITIES.choose(&mut rng).expect("non-empty").to_string(),
            furniture: FURNITURE.choose(&mut rng).expect("non-empty").to_string(),
        };
        let features_rgb = channel(frames, &latent_scene, &proj.rgb, &mut rng);
        let features_opt = channel(frames, &latent_scene, &proj.opt, &mut rng);
        let features_aud = channel(frames, &latent_scene, &proj.aud, &mut rng);
        videos.push(SyntheticVideo {
            video_id: format!("vid{i:05}"),
            latent_scene,
            setting: Some(setting),
            features_rgb,
            features_opt,
            features_aud,
        });
    }
    Ok(videos)
}

#[derive(Debug, Clone)]
struct Fact {
    subject: String,
    question: String,
    answer: String,
    key: String,
}

fn entity_facts(e: &SceneEntity) -> [Fact; 2] {
    [
        Fact {
            subject: e.object.clone(),
            question: format!("what color is the {} ?", e.object),
            answer: format!("the {} is {}", e.object, e.color),
            key: e.color.clone(),
        },
        Fact {
            subject: e.object.clone(),
            question: format!("what is the {} doing ?", e.object),
            answer: format!("the {} is {}", e.object, e.action),
            key: e.action.clone(),
        },
    ]
}

fn setting_facts(s: &Setting) -> [Fact; 2] {
    [
        Fact {
            subject: s.person.clone(),
            question: format!("what is the {} doing ?", s.person),
            answer: format!("the {} is {}", s.person, s.activity),
            key: s.activity.clone(),
        },
        Fact {
            subject: s.person.clone(),
            question: format!("where is the {} ?", s.person),
            answer: format!("the {} is in the {}", s.person, s.room),
            key: s.room.clone(),
        },
    ]
}

/// Generates `n_rounds` dialogue rounds about `video`.
///
/// With probability `copy_bias` a round restates a fact already present in the
/// caption or history. Otherwise it asks about a video attribute whose key word
/// has not appeared in any text yet (falling back to an unanswerable question
/// when none is left), or, with probability [`UNANSWERABLE_SHARE`], asks
/// something the video cannot answer.
pub fn generate_dialogue(
    video: &SyntheticVideo,
    n_rounds: usize,
    copy_bias: f64,
    seed: u64,
) -> Result<Vec<DialogueExample>> {
    Ok(generate_dialog(video, n_rounds, copy_bias, seed, Split::Train)?.examples())
}

pub(crate) fn generate_dialog(
    video: &SyntheticVideo,
    n_rounds: usize,
    copy_bias: f64,
    seed: u64,
    split: Split,
) -> Result<Dialog> {
    if n_rounds == 0 {
        return Err(Error::arg("n_rounds must be at least 1"));
    }
    if !(0.0..=1.0).contains(&copy_bias) || copy_bias.is_nan() {
        return Err(Error::arg(format!("copy_bias {copy_bias} outside [0, 1]")));
    }
    let setting = video
        .setting
        .clone()
        .ok_or_else(|| Error::arg("video has no text-side setting"))?;
    if video.latent_scene.is_empty() {
        return Err(Error::arg("video has no latent scene"));
    }
    let mut rng = stream(seed, "dialog", &[]);
    let ents = &video.latent_scene;

    let all_entity: Vec<Fact> = ents.iter().flat_map(entity_facts).collect();
    let stated_entity = all_entity.choose(&mut rng).expect("non-empty").clone();
    let caption = format!(
        "{} a {} is {} in the {} near the {} . the {} is {} .",
        OPENERS.choose(&mut rng).expect("non-empty"),
        setting.person,
        setting.activity,
        setting.room,
        setting.furniture,
        stated_entity.subject,
        stated_entity.key,
    );
    let caption = tokenize(&caption);

    let mut stated: Vec<Fact> = setting_facts(&setting).to_vec();
    stated.push(stated_entity);
    let mut text_words: HashSet<String> = caption.iter().cloned().collect();
    let absent_objects: Vec<&str> = OBJECTS
        .iter()
        .copied()
        .filter(|o| ents.iter().all(|e| e.object != *o))
        .collect();

    let mut rounds = Vec::with_capacity(n_rounds);
    for _ in 0..n_rounds {
        let u: f64 = rng.random();
        let round = if u < copy_bias {
            let f = stated.choose(&mut rng).expect("caption states facts").clone();
            let mut answer = f.answer.clone();
            if rng.random::<f64>() < 0.3 {
                answer = format!("{answer} {}", TIMES.choose(&mut rng).expect("non-empty"));
            }
            Round {
                question: tokenize(&f.question),
                answer: tokenize(&answer),
                extra_references: vec![],
                answerable_from: Some(AnswerSource::TextCopyable),
                key_token: Some(f.key),
            }
        } else {
            let unanswerable = rng.random::<f64>() < UNANSWERABLE_SHARE;
            let open: Vec<&Fact> = all_entity
                .iter()
                .filter(|f| !text_words.contains(&f.key))
                .collect();
            if unanswerable || open.is_empty() {
                let question = match absent_objects.first() {
                    Some(o) if rng.random::<f64>() < 0.5 => {
                        if rng.random::<f64>() < 0.5 {
                            format!("what color is the {o} ?")
                        } else {
                            format!("what is the {o} doing ?")
                        }
                    }
                    _ => UNANSWERABLE_QUESTIONS
                        .choose(&mut rng)
                        .expect("non-empty")
                        .replace("{p}", &setting.person),
                };
                Round {
                    question: tokenize(&question),
                    answer: tokenize(UNKNOWN_ANSWERS.choose(&mut rng).expect("non-empty")),
                    extra_references: vec![],
                    answerable_from: Some(AnswerSource::Unanswerable),
                    key_token: None,
                }
            } else {
                let f = (*open.choose(&mut rng).expect("non-empty")).clone();
                stated.push(f.clone());
                Round {
                    question: tokenize(&f.question),
                    answer: tokenize(&f.answer),
                    extra_references: vec![],
                    answerable_from: Some(AnswerSource::VideoOnly),
                    key_token: Some(f.key),
                }
            }
        };
        text_words.extend(round.question.iter().cloned());
        text_words.extend(round.answer.iter().cloned());
        rounds.push(round);
    }
    Ok(Dialog {
        video_id: video.video_id.clone(),
        split,
        caption,
        rounds,
    })
}

/// Generates a full corpus: world, dialogues and a per-video split.
pub fn generate_corpus(cfg: &DataConfig) -> Result<Corpus> {
    if !(0.0..1.0).contains(&(cfg.valid_fraction + cfg.test_fraction)) {
        return Err(Error::arg("valid_fraction + test_fraction must be in [0, 1)"));
    }
    let videos = generate_world(cfg.seed, cfg.n_videos, cfg.frames, cfg.channel_widths)?;
    let n = videos.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_valid = (n as f64 * cfg.valid_fraction).round() as usize;
    let n_train = n.saturating_sub(n_test + n_valid);
    let mut dialogs = Vec::with_capacity(n);
    for (i, v) in videos.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        let seed = crate::rng::derive_seed(cfg.seed, "dialog-seed", &[i as u64]);
        dialogs.push(generate_dialog(v, cfg.n_rounds, cfg.copy_bias, seed, split)?);
    }
    Ok(Corpus {
        videos: videos.into_iter().map(|v| (v.video_id.clone(), v)).collect(),
        dialogs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::shares_ngram;

    #[test]
    fn world_is_deterministic_and_well_formed() {
        let a = generate_world(7, 1, 4, (8, 8, 4)).unwrap();
        let b = generate_world(7, 1, 4, (8, 8, 4)).unwrap();
        assert_eq!(a, b);
        let v = &a[0];
        assert_eq!(v.features_rgb.shape(), (4, 8));
        assert_eq!(v.features_opt.shape(), (4, 8));
        assert_eq!(v.features_aud.shape(), (4, 4));
        assert!(v.features_rgb.is_finite() && v.features_aud.is_finite());

        let ten = generate_world(7, 10, 4, (8, 8, 4)).unwrap();
        let ids: HashSet<_> = ten.iter().map(|v| v.video_id.clone()).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn neighbouring_seeds_differ() {
        for s in 0..100u64 {
            let a = generate_world(s, 1, 4, (8, 8, 4)).unwrap();
            let b = generate_world(s + 1, 1, 4, (8, 8, 4)).unwrap();
            assert_ne!(a[0].features_rgb, b[0].features_rgb, "seed {s}");
        }
    }

    #[test]
    fn invalid_counts_are_rejected() {
        assert!(generate_world(1, 0, 4, (1, 1, 1)).is_err());
        assert!(generate_world(1, 1, 0, (1, 1, 1)).is_err());
        assert!(generate_world(1, 1, 4, (1, 0, 1)).is_err());
        let v = &generate_world(1, 1, 4, (2, 2, 2)).unwrap()[0];
        assert!(generate_dialogue(v, 0, 0.5, 1).is_err());
        assert!(generate_dialogue(v, 3, 1.5, 1).is_err());
        assert!(generate_dialogue(v, 3, -0.1, 1).is_err());
    }

    #[test]
    fn degenerate_copy_bias() {
        let world = generate_world(3, 40, 4, (4, 4, 2)).unwrap();
        for (i, v) in world.iter().enumerate() {
            for ex in generate_dialogue(v, 6, 1.0, i as u64).unwrap() {
                assert_eq!(ex.answerable_from, Some(AnswerSource::TextCopyable));
                let mut text: Vec<&[String]> = vec![&ex.caption];
                text.extend(ex.history_sentences());
                assert!(text.iter().any(|s| shares_ngram(&ex.answer, s, 3)), "{:?}", ex);
            }
            for ex in generate_dialogue(v, 6, 0.0, i as u64).unwrap() {
                assert_ne!(ex.answerable_from, Some(AnswerSource::TextCopyable));
            }
        }
    }

    #[test]
    fn video_only_labels_are_sound() {
        let corpus = generate_corpus(&DataConfig {
            n_videos: 200,
            n_rounds: 8,
            ..DataConfig::default()
        })
        .unwrap();
        let mut seen = 0;
        for ex in corpus.examples() {
            assert!(ex.round_index >= 1 && !ex.answer.is_empty());
            if ex.answerable_from == Some(AnswerSource::VideoOnly) {
                let key = ex.key_token.as_deref().unwrap();
                assert!(!ex.text_mentions(key), "{:?}", ex);
                let video = corpus.video(&ex.video_id).unwrap();
                assert!(video
                    .latent_scene
                    .iter()
                    .any(|e| e.color == key || e.action == key));
                seen += 1;
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn copy_fraction_tracks_bias() {
        let corpus = generate_corpus(&DataConfig {
            n_videos: 500,
            n_rounds: 10,
            copy_bias: 0.6,
            ..DataConfig::default()
        })
        .unwrap();
        let ex = corpus.examples();
        let copy = ex
            .iter()
            .filter(|e| e.answerable_from == Some(AnswerSource::TextCopyable))
            .count();
        let frac = copy as f64 / ex.len() as f64;
        assert!((frac - 0.6).abs() <= 0.05, "fraction {frac}");
    }

    #[test]
    fn splits_partition_videos() {
        let corpus = generate_corpus(&DataConfig {
            n_videos: 50,
            ..DataConfig::default()
        })
        .unwrap();
        let count = |s| corpus.dialogs.iter().filter(|d| d.split == s).count();
        assert_eq!(count(Split::Train), 35);
        assert_eq!(count(Split::Valid), 5);
        assert_eq!(count(Split::Test), 10);
    }
}
