//! Lexical domain-relevance classifier.
//!
//! Signals are counted as distinct hits: repeating a keyword does not raise
//! the score. The shipped vocabulary lives in `data/guardrail.toml`.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_CONFIG: &str = include_str!("../data/guardrail.toml");

#[derive(Debug, Error)]
pub enum GuardrailError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("invalid guardrail config: {0}")]
    Config(String),
    #[error("invalid pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
    #[error("could not read guardrail config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_kw: f64,
    pub w_unit: f64,
    pub w_sym: f64,
    pub w_formula: f64,
    pub w_excl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidentalPattern {
    pub category: String,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardrailConfig {
    pub statics_keywords: Vec<String>,
    pub mechanics_keywords: Vec<String>,
    pub engineering_keywords: Vec<String>,
    pub exclusion_contexts: Vec<String>,
    pub coincidental_patterns: Vec<CoincidentalPattern>,
    pub units: Vec<String>,
    pub symbols: Vec<String>,
    pub formula_patterns: Vec<String>,
    pub weights: Weights,
    pub threshold: f64,
    pub rejection_message: String,
}

impl Default for GuardrailConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("shipped guardrail config parses")
    }
}

impl GuardrailConfig {
    /// The shipped default as TOML text.
    pub fn default_toml() -> &'static str {
        DEFAULT_CONFIG
    }

    pub fn from_toml(text: &str) -> Result<Self, GuardrailError> {
        let cfg: Self = toml::from_str(text).map_err(|e| GuardrailError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GuardrailError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), GuardrailError> {
        let w = &self.weights;
        let named = [
            ("w_kw", w.w_kw),
            ("w_unit", w.w_unit),
            ("w_sym", w.w_sym),
            ("w_formula", w.w_formula),
            ("w_excl", w.w_excl),
            ("threshold", self.threshold),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(GuardrailError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.rejection_message.trim().is_empty() {
            return Err(GuardrailError::Config("rejection_message is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopicFamily {
    Statics,
    Mechanics,
    GeneralEngineering,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Signals {
    pub keyword_hits: Vec<String>,
    pub unit_hits: Vec<String>,
    pub symbol_hits: Vec<String>,
    pub formula_hits: Vec<String>,
    pub exclusion_hits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVerdict {
    pub relevant: bool,
    pub score: f64,
    pub signals: Signals,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejection_message: Option<String>,
}

/// Phrase list compiled into one alternation, longest phrase first, with one
/// capture group per phrase.
#[derive(Debug)]
struct PhraseSet {
    re: Option<Regex>,
    /// Capture group `i + 1` maps to `phrases[i]`.
    phrases: Vec<(String, usize)>,
}

impl PhraseSet {
    fn new<'a>(lists: impl IntoIterator<Item = (&'a [String], usize)>) -> Result<Self, GuardrailError> {
        let mut phrases: Vec<(String, usize)> = Vec::new();
        for (list, tag) in lists {
            for p in list {
                let p = normalize(p.trim()).to_lowercase();
                if !p.is_empty() && !phrases.iter().any(|(q, _)| *q == p) {
                    phrases.push((p, tag));
                }
            }
        }
        phrases.sort_by(|a, b| b.0.chars().count().cmp(&a.0.chars().count()).then(a.0.cmp(&b.0)));
        if phrases.is_empty() {
            return Ok(Self { re: None, phrases });
        }
        let alts: Vec<String> = phrases
            .iter()
            .map(|(p, _)| {
                let words: Vec<String> = p.split_whitespace().map(regex::escape).collect();
                format!("({})", words.join(r"\s+"))
            })
            .collect();
        let src = format!(r"\b(?:{})(?:es|s)?\b", alts.join("|"));
        let re = RegexBuilder::new(&src)
            .case_insensitive(true)
            .size_limit(1 << 24)
            .build()
            .map_err(|e| GuardrailError::Pattern {
                pattern: "<phrase list>".into(),
                message: e.to_string(),
            })?;
        Ok(Self { re: Some(re), phrases })
    }

    /// Non-overlapping matches as (span, phrase index).
    fn find(&self, text: &str) -> Vec<(Range<usize>, usize)> {
        let Some(re) = &self.re else { return Vec::new() };
        re.captures_iter(text)
            .filter_map(|caps| {
                let whole = caps.get(0)?.range();
                let idx = (1..caps.len()).find(|&g| caps.get(g).is_some())? - 1;
                Some((whole, idx))
            })
            .collect()
    }
}

/// A config compiled for repeated classification.
#[derive(Debug)]
pub struct Guardrail {
    cfg: GuardrailConfig,
    keywords: PhraseSet,
    exclusions: PhraseSet,
    coincidental: Vec<Regex>,
    units: Option<Regex>,
    formulas: Vec<Regex>,
}

const FAMILIES: [TopicFamily; 3] = [
    TopicFamily::Statics,
    TopicFamily::Mechanics,
    TopicFamily::GeneralEngineering,
];

fn compile(pattern: &str) -> Result<Regex, GuardrailError> {
    Regex::new(pattern).map_err(|e| GuardrailError::Pattern {
        pattern: pattern.to_owned(),
        message: e.to_string(),
    })
}

/// Folds typographic apostrophes so "Hooke’s" matches "hooke's".
fn normalize(text: &str) -> String {
    text.replace(['\u{2019}', '\u{2018}'], "'")
}

fn push_distinct(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|x| x == item) {
        list.push(item.to_owned());
    }
}

impl Guardrail {
    pub fn new(cfg: GuardrailConfig) -> Result<Self, GuardrailError> {
        cfg.validate()?;
        let keywords = PhraseSet::new([
            (cfg.statics_keywords.as_slice(), 0),
            (cfg.mechanics_keywords.as_slice(), 1),
            (cfg.engineering_keywords.as_slice(), 2),
        ])?;
        let exclusions = PhraseSet::new([(cfg.exclusion_contexts.as_slice(), 0)])?;
        let coincidental = cfg
            .coincidental_patterns
            .iter()
            .map(|p| compile(&p.pattern))
            .collect::<Result<_, _>>()?;
        let formulas = cfg
            .formula_patterns
            .iter()
            .map(|p| compile(p))
            .collect::<Result<_, _>>()?;

        let mut units: Vec<&str> = cfg.units.iter().map(|u| u.trim()).filter(|u| !u.is_empty()).collect();
        units.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
        units.dedup();
        let units = if units.is_empty() {
            None
        } else {
            let alts: Vec<String> = units.iter().map(|u| format!("({})", regex::escape(u))).collect();
            Some(compile(&format!(r"\d[\s$]*(?:{})", alts.join("|")))?)
        };

        Ok(Self {
            cfg,
            keywords,
            exclusions,
            coincidental,
            units,
            formulas,
        })
    }

    pub fn config(&self) -> &GuardrailConfig {
        &self.cfg
    }

    pub fn rejection_message(&self) -> &str {
        &self.cfg.rejection_message
    }

    /// Surviving keyword hits as (phrase, family), in text order.
    fn keyword_hits(&self, text: &str) -> Vec<(&str, TopicFamily)> {
        let spans: Vec<Range<usize>> = self
            .coincidental
            .iter()
            .flat_map(|re| re.find_iter(text).map(|m| m.range()))
            .collect();
        self.keywords
            .find(text)
            .into_iter()
            .filter(|(r, _)| !spans.iter().any(|s| s.start < r.end && r.start < s.end))
            .map(|(_, idx)| {
                let (phrase, tag) = &self.keywords.phrases[idx];
                (phrase.as_str(), FAMILIES[*tag])
            })
            .collect()
    }

    fn unit_hits(&self, text: &str, out: &mut Vec<String>) {
        let Some(re) = &self.units else { return };
        let mut at = 0;
        while let Some(caps) = re.captures_at(text, at) {
            let whole = caps.get(0).expect("group 0");
            let unit = (1..caps.len()).find_map(|g| caps.get(g)).expect("one unit group");
            let boundary = text[whole.end()..]
                .chars()
                .next()
                .is_none_or(|c| !c.is_alphanumeric());
            if boundary {
                push_distinct(out, unit.as_str());
                at = whole.end();
            } else {
                // A word such as "5 minutes"; resume scanning after the number.
                at = unit.start();
            }
        }
    }

    pub fn classify(&self, question: &str) -> Result<RelevanceVerdict, GuardrailError> {
        if question.trim().is_empty() {
            return Err(GuardrailError::EmptyQuestion);
        }
        let text = normalize(question);
        let mut s = Signals::default();

        for (phrase, _) in self.keyword_hits(&text) {
            push_distinct(&mut s.keyword_hits, phrase);
        }
        self.unit_hits(&text, &mut s.unit_hits);
        for sym in &self.cfg.symbols {
            if !sym.is_empty() && text.contains(sym.as_str()) {
                push_distinct(&mut s.symbol_hits, sym);
            }
        }
        for re in &self.formulas {
            if let Some(m) = re.find(&text) {
                s.formula_hits.push(m.as_str().to_owned());
            }
        }
        for (_, idx) in self.exclusions.find(&text) {
            push_distinct(&mut s.exclusion_hits, &self.exclusions.phrases[idx].0);
        }

        let w = &self.cfg.weights;
        let score = w.w_kw * s.keyword_hits.len() as f64
            + w.w_unit * s.unit_hits.len() as f64
            + w.w_sym * s.symbol_hits.len() as f64
            + w.w_formula * s.formula_hits.len() as f64
            - w.w_excl * s.exclusion_hits.len() as f64;
        let relevant = score >= self.cfg.threshold;
        Ok(RelevanceVerdict {
            relevant,
            score,
            signals: s,
            rejection_message: (!relevant).then(|| self.cfg.rejection_message.clone()),
        })
    }

    pub fn detect_topics(&self, question: &str) -> Result<BTreeSet<TopicFamily>, GuardrailError> {
        if question.trim().is_empty() {
            return Err(GuardrailError::EmptyQuestion);
        }
        Ok(self
            .keyword_hits(&normalize(question))
            .into_iter()
            .map(|(_, f)| f)
            .collect())
    }
}

/// One-shot classification; compile a [`Guardrail`] when classifying many.
pub fn classify(cfg: &GuardrailConfig, question: &str) -> Result<RelevanceVerdict, GuardrailError> {
    Guardrail::new(cfg.clone())?.classify(question)
}

pub fn detect_topics(
    cfg: &GuardrailConfig,
    question: &str,
) -> Result<BTreeSet<TopicFamily>, GuardrailError> {
    Guardrail::new(cfg.clone())?.detect_topics(question)
}
