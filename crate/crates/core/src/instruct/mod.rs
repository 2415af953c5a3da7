//! Keyword routing of free-text instructions to task ids.

mod evalset;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

pub use evalset::{accuracy, generate_eval_set, LabeledInstruction, DISTRACTORS};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::modulation::TaskId;

/// Routes whose confidence does not exceed this are reported as ambiguous.
/// At 0.5 only exact ties fall back.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const MIN_KEYWORDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub keyword: String,
    pub weight: f64,
}

impl Keyword {
    pub fn new(keyword: &str, weight: f64) -> Self {
        Self {
            keyword: keyword.into(),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    Task {
        task: TaskId,
        confidence: f64,
    },
    /// No keyword matched (empty `candidates`) or the best tasks are too close.
    Ambiguous {
        candidates: Vec<TaskId>,
    },
}

impl Route {
    pub fn task(&self) -> Option<&TaskId> {
        match self {
            Route::Task { task, .. } => Some(task),
            Route::Ambiguous { .. } => None,
        }
    }

    pub fn confidence(&self) -> Option<f64> {
        match self {
            Route::Task { confidence, .. } => Some(*confidence),
            Route::Ambiguous { .. } => None,
        }
    }
}

fn stemmer() -> &'static Stemmer {
    static S: OnceLock<Stemmer> = OnceLock::new();
    S.get_or_init(|| Stemmer::create(Algorithm::English))
}

/// Lowercased, stemmed alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| stemmer().stem(w).into_owned())
        .collect()
}

/// Weighted keyword sets per task.
#[derive(Debug, Clone)]
pub struct InstructionLexicon {
    tasks: BTreeMap<TaskId, Vec<Keyword>>,
    stems: BTreeMap<String, (usize, f64)>,
    threshold: f64,
}

fn bad<T>(path: String, message: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        path,
        message: message.into(),
    })
}

impl InstructionLexicon {
    pub fn new(tasks: BTreeMap<TaskId, Vec<Keyword>>) -> Result<Self> {
        let mut stems: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        for (ti, (task, words)) in tasks.iter().enumerate() {
            if words.len() < MIN_KEYWORDS {
                return bad(
                    task.to_string(),
                    format!("needs at least {MIN_KEYWORDS} keywords, got {}", words.len()),
                );
            }
            for (i, k) in words.iter().enumerate() {
                let path = format!("{task}[{i}]");
                if !(k.weight > 0.0 && k.weight.is_finite()) {
                    return bad(format!("{path}.weight"), "must be positive and finite");
                }
                let toks = tokenize(&k.keyword);
                let [stem] = toks.as_slice() else {
                    return bad(
                        format!("{path}.keyword"),
                        format!("`{}` is not a single word", k.keyword),
                    );
                };
                if let Some(&(other, _)) = stems.get(stem) {
                    let owner = tasks.keys().nth(other).expect("index in range");
                    return bad(
                        format!("{path}.keyword"),
                        format!("`{}` stems to `{stem}`, already used by `{owner}`", k.keyword),
                    );
                }
                stems.insert(stem.clone(), (ti, k.weight));
            }
        }
        Ok(Self {
            tasks,
            stems,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    /// The built-in lexicon for the five standard tasks.
    pub fn standard() -> Self {
        let table: [(&str, &[&str]); 5] = [
            (
                "denoise",
                &["noise", "noisy", "grain", "grainy", "speckle", "denoise", "static"],
            ),
            (
                "deblur",
                &[
                    "blur", "blurry", "shake", "shaky", "motion", "sharpen", "deblur", "focus",
                ],
            ),
            (
                "derain",
                &["rain", "rainy", "streak", "drizzle", "raindrop", "downpour", "derain"],
            ),
            (
                "dehaze",
                &[
                    "haze", "hazy", "fog", "foggy", "mist", "misty", "smog", "smoggy", "dehaze",
                ],
            ),
            (
                "desnow",
                &["snow", "snowy", "flake", "snowflake", "blizzard", "sleet", "desnow"],
            ),
        ];
        let tasks = table
            .iter()
            .map(|(t, ws)| (TaskId::from(*t), ws.iter().map(|w| Keyword::new(w, 1.0)).collect()))
            .collect();
        Self::new(tasks).expect("built-in lexicon is valid")
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(0.5..1.0).contains(&threshold) {
            return bad("threshold".into(), "must lie in [0.5, 1)");
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskId> {
        self.tasks.keys()
    }

    pub fn keywords(&self, task: &TaskId) -> Option<&[Keyword]> {
        self.tasks.get(task).map(Vec::as_slice)
    }

    /// Whether any token of `text` is a keyword.
    pub fn mentions_any(&self, text: &str) -> bool {
        tokenize(text).iter().any(|t| self.stems.contains_key(t))
    }

    /// Reads the JSON form: an object mapping task ids to `[{keyword, weight}]`.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let tasks: BTreeMap<TaskId, Vec<Keyword>> =
            serde_path_to_error::deserialize(de).or_else(|e| bad(e.path().to_string(), e.into_inner().to_string()))?;
        Self::new(tasks)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tasks).expect("lexicon serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).or_else(|_| bad(".".into(), "lexicon is not UTF-8"))?;
        Self::from_json(&text)
    }

    pub fn route(&self, text: &str) -> Result<Route> {
        route(text, self)
    }

    /// Summed keyword weight per task, for tasks with at least one match,
    /// best first.
    pub fn scores(&self, text: &str) -> Vec<(TaskId, f64)> {
        let raw = self.raw_scores(text);
        let mut out: Vec<(TaskId, f64)> = self
            .tasks
            .keys()
            .zip(raw)
            .filter(|(_, s)| *s > 0.0)
            .map(|(t, s)| (t.clone(), s))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    fn raw_scores(&self, text: &str) -> Vec<f64> {
        let mut scores = vec![0.0f64; self.tasks.len()];
        for tok in tokenize(text) {
            if let Some(&(t, w)) = self.stems.get(&tok) {
                scores[t] += w;
            }
        }
        scores
    }
}

/// Scores every task by the summed weight of its matched keywords and picks
/// the best one; confidence is `top / (top + second)`.
pub fn route(text: &str, lexicon: &InstructionLexicon) -> Result<Route> {
    if text.trim().is_empty() {
        return Err(Error::Input("instruction text is empty".into()));
    }
    let scores = lexicon.raw_scores(text);
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let name = |i: usize| lexicon.tasks.keys().nth(i).expect("index in range").clone();
    let Some(&top) = order.first() else {
        return Ok(Route::Ambiguous { candidates: vec![] });
    };
    let second = order.get(1).map_or(0.0, |&i| scores[i]);
    let confidence = scores[top] / (scores[top] + second);
    if confidence <= lexicon.threshold {
        let floor = scores[order[1]];
        return Ok(Route::Ambiguous {
            candidates: order
                .into_iter()
                .take_while(|&i| scores[i] >= floor)
                .map(name)
                .collect(),
        });
    }
    Ok(Route::Task {
        task: name(top),
        confidence,
    })
}
