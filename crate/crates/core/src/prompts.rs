//! Vanilla anomaly-prompt pool: template-grammar expansion, LLM-generated
//! descriptions with an on-disk cache, and their union.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder in a template for the state phrase.
pub const STATE_SLOT: &str = "{Ω}";
/// Placeholder in a state phrase for the class name.
pub const CLASS_SLOT: &str = "ς";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("grammar field {0:?} is empty")]
    EmptyGrammar(&'static str),
    #[error("grammar entry {text:?} in {field:?} must contain exactly one {slot:?}")]
    BadPlaceholder {
        field: &'static str,
        text: String,
        slot: &'static str,
    },
    #[error("invalid prompt set: {0}")]
    InvalidSet(String),
    #[error("invalid llm config: {0}")]
    InvalidConfig(String),
    #[error("llm endpoint unreachable and no cached prompts: {0}")]
    Network(String),
    #[error("malformed llm response: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Normal,
    Abnormal,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Normal, Polarity::Abnormal];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Normal => "normal",
            Polarity::Abnormal => "abnormal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Template,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnomalyPrompt {
    pub text: String,
    pub polarity: Polarity,
    pub source: PromptSource,
}

/// Number of prompts per (polarity, source).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCounts {
    pub normal_template: usize,
    pub abnormal_template: usize,
    pub normal_llm: usize,
    pub abnormal_llm: usize,
}

impl PromptCounts {
    pub fn normal(&self) -> usize {
        self.normal_template + self.normal_llm
    }

    pub fn abnormal(&self) -> usize {
        self.abnormal_template + self.abnormal_llm
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(rename = "class")]
    pub class_name: String,
    pub prompts: Vec<AnomalyPrompt>,
}

impl PromptSet {
    pub fn counts(&self) -> PromptCounts {
        let mut c = PromptCounts::default();
        for p in &self.prompts {
            match (p.polarity, p.source) {
                (Polarity::Normal, PromptSource::Template) => c.normal_template += 1,
                (Polarity::Abnormal, PromptSource::Template) => c.abnormal_template += 1,
                (Polarity::Normal, PromptSource::Llm) => c.normal_llm += 1,
                (Polarity::Abnormal, PromptSource::Llm) => c.abnormal_llm += 1,
            }
        }
        c
    }

    pub fn of_polarity(&self, polarity: Polarity) -> impl Iterator<Item = &AnomalyPrompt> {
        self.prompts.iter().filter(move |p| p.polarity == polarity)
    }

    /// Checks that every text is non-empty and both polarities are present.
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.prompts.iter().find(|p| p.text.trim().is_empty()) {
            return Err(PromptError::InvalidSet(format!(
                "empty {} prompt text",
                p.polarity.as_str()
            )));
        }
        let c = self.counts();
        if c.normal() == 0 || c.abnormal() == 0 {
            return Err(PromptError::InvalidSet(
                "need at least one normal and one abnormal prompt".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: PromptSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt set serializes")
    }
}

/// Template grammar producing contrastive-state prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateGrammar {
    pub templates: Vec<String>,
    pub normal_states: Vec<String>,
    pub abnormal_states: Vec<String>,
    pub enhancements: Vec<(String, String)>,
    pub class_aliases: BTreeMap<String, String>,
}

impl Default for TemplateGrammar {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            templates: own(&[
                "an image of a {Ω}",
                "a close-up image of a {Ω}",
                "an industrial image of a {Ω}",
                "a manufacturing image of a {Ω}",
                "a production image of a {Ω}",
                "a textural image of a {Ω}",
                "a surface image of a {Ω}",
                "a cross-section image of a {Ω}",
            ]),
            normal_states: own(&[
                "ς",
                "normal ς",
                "undamaged ς",
                "flawless ς",
                "perfect ς",
                "unblemished ς",
                "ς without flaw",
                "ς without defect",
                "ς without damage",
            ]),
            abnormal_states: own(&[
                "abnormal ς",
                "damaged ς",
                "flawed ς",
                "imperfect ς",
                "impaired ς",
                "blemished ς",
                "ς with flaw",
                "ς with defect",
                "ς with damage",
            ]),
            enhancements: vec![("image".into(), "photo".into())],
            class_aliases: BTreeMap::new(),
        }
    }
}

impl TemplateGrammar {
    pub fn validate(&self) -> Result<()> {
        let fields: [(&'static str, &Vec<String>, &'static str); 3] = [
            ("templates", &self.templates, STATE_SLOT),
            ("normal_states", &self.normal_states, CLASS_SLOT),
            ("abnormal_states", &self.abnormal_states, CLASS_SLOT),
        ];
        for (field, entries, slot) in fields {
            if entries.is_empty() {
                return Err(PromptError::EmptyGrammar(field));
            }
            if let Some(bad) = entries.iter().find(|e| e.matches(slot).count() != 1) {
                return Err(PromptError::BadPlaceholder {
                    field,
                    text: bad.clone(),
                    slot,
                });
            }
        }
        Ok(())
    }

    /// Descriptive name substituted for `class_name`, if an alias exists.
    pub fn alias<'a>(&'a self, class_name: &'a str) -> &'a str {
        self.class_aliases
            .get(class_name)
            .map(String::as_str)
            .unwrap_or(class_name)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let grammar: TemplateGrammar = serde_json::from_str(text)?;
        grammar.validate()?;
        Ok(grammar)
    }
}

/// Expands the grammar into template prompts for both polarities.
///
/// Order: all normal prompts, then all abnormal ones; within a polarity the
/// base template × state product comes first, followed by one block per
/// enhancement that applies to at least one template. Duplicate texts within
/// a polarity keep their first occurrence.
pub fn expand_templates(grammar: &TemplateGrammar, class_name: &str) -> Result<PromptSet> {
    grammar.validate()?;
    let class = grammar.alias(class_name);
    let mut prompts = Vec::new();
    for polarity in Polarity::BOTH {
        let states = match polarity {
            Polarity::Normal => &grammar.normal_states,
            Polarity::Abnormal => &grammar.abnormal_states,
        };
        let phrases: Vec<String> = states
            .iter()
            .map(|s| s.replace(CLASS_SLOT, class))
            .collect();
        let mut template_blocks = vec![grammar.templates.clone()];
        for (find, replace) in &grammar.enhancements {
            let enhanced: Vec<String> = grammar
                .templates
                .iter()
                .filter(|t| t.contains(find.as_str()))
                .map(|t| t.replace(find.as_str(), replace))
                .collect();
            if !enhanced.is_empty() {
                template_blocks.push(enhanced);
            }
        }
        let mut seen = HashSet::new();
        for block in template_blocks {
            for template in &block {
                for phrase in &phrases {
                    let text = template.replace(STATE_SLOT, phrase);
                    if seen.insert(text.clone()) {
                        prompts.push(AnomalyPrompt {
                            text,
                            polarity,
                            source: PromptSource::Template,
                        });
                    }
                }
            }
        }
    }
    Ok(PromptSet {
        class_name: class_name.to_string(),
        prompts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Completions requested per polarity.
    pub count: usize,
    pub cache_path: Option<PathBuf>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    /// Pause between consecutive live requests.
    pub delay_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            max_tokens: 50,
            temperature: 0.9,
            count: 0,
            cache_path: None,
            api_key_env: "ALFA_LLM_API_KEY".into(),
            delay_ms: 0,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(PromptError::InvalidConfig(
                "max_tokens must be positive".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(PromptError::InvalidConfig(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Sentence every LLM description is asked to start with.
pub fn required_prefix(class: &str, polarity: Polarity) -> String {
    match polarity {
        Polarity::Abnormal => format!("An abnormal image of {class}"),
        Polarity::Normal => format!("A normal image of {class}"),
    }
}

/// Query sent to the LLM for one description.
pub fn llm_query(class: &str, polarity: Polarity) -> String {
    let situation = match polarity {
        Polarity::Abnormal => "there is an anomaly",
        Polarity::Normal => "there is no anomaly",
    };
    format!(
        "Describe what the image will look like if {situation} in the image of {class}. \
         Please state the description beginning with: {}.",
        required_prefix(class, polarity)
    )
}

/// Reduces a raw completion to a single sentence: whitespace is collapsed,
/// text before the required prefix is dropped, and the result is cut at the
/// first period after the prefix. Returns `None` for empty output.
pub fn trim_response(raw: &str, prefix: &str) -> Option<String> {
    let text = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let lower = text.to_lowercase();
    let (start, search_from) = match lower.find(&prefix.to_lowercase()) {
        Some(at) if lower.len() == text.len() => (at, at + prefix.len()),
        _ => (0, 0),
    };
    let body = &text[start..];
    let cut = text[search_from..]
        .find('.')
        .map(|p| search_from + p + 1 - start)
        .unwrap_or(body.len());
    let sentence = body[..cut].trim().trim_matches('"').trim();
    (!sentence.is_empty() && sentence != ".").then(|| sentence.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

/// A text-completion backend. Implementations return `choices[0].text`.
pub trait CompletionClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String>;
}

/// Extracts `choices[0].text` from a completion response body.
pub fn parse_completion(body: &str) -> Result<String> {
    #[derive(Deserialize)]
    struct Choice {
        text: String,
    }
    #[derive(Deserialize)]
    struct Response {
        choices: Vec<Choice>,
    }
    let resp: Response =
        serde_json::from_str(body).map_err(|e| PromptError::Malformed(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.text)
        .ok_or_else(|| PromptError::Malformed("no choices".into()))
}

/// Blocking HTTP client posting `{model, prompt, max_tokens, temperature}`.
#[cfg(feature = "http")]
pub struct HttpCompletionClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpCompletionClient {
    pub fn new(config: &LlmConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            endpoint: config.endpoint.clone(),
            api_key: std::env::var(&config.api_key_env)
                .ok()
                .filter(|k| !k.is_empty()),
            agent,
        }
    }
}

#[cfg(feature = "http")]
impl CompletionClient for HttpCompletionClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let body = serde_json::to_string(request)?;
        let mut call = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send(body.as_str())
            .map_err(|e| PromptError::Network(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| PromptError::Network(e.to_string()))?;
        parse_completion(&text)
    }
}

/// JSON cache of LLM descriptions keyed `model/class/polarity/index`.
#[derive(Debug, Clone, Default)]
pub struct PromptCache {
    path: Option<PathBuf>,
    entries: BTreeMap<String, String>,
    dirty: bool,
}

impl PromptCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the cache at `path`; a missing file is an empty cache.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            path: Some(path),
            entries,
            dirty: false,
        })
    }

    pub fn key(model: &str, class: &str, polarity: Polarity, index: usize) -> String {
        format!("{model}/{class}/{}/{index}", polarity.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: String, text: String) {
        self.entries.insert(key, text);
        self.dirty = true;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn has_any(&self, model: &str, class: &str, polarity: Polarity) -> bool {
        let prefix = format!("{model}/{class}/{}/", polarity.as_str());
        self.entries
            .range(prefix.clone()..)
            .next()
            .is_some_and(|(k, _)| k.starts_with(&prefix))
    }

    /// Writes the cache next to its final path and renames it into place.
    pub fn save(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if !self.dirty {
            return Ok(());
        }
        let mut tmp = path.clone().into_os_string();
        tmp.push(".tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.entries)?)?;
        std::fs::rename(&tmp, path)?;
        self.dirty = false;
        Ok(())
    }
}

/// Generates up to `config.count` descriptions for one polarity.
///
/// Cached entries are served without contacting the endpoint. When a live
/// request fails, generation stops and whatever is cached for this
/// (model, class, polarity) is returned; with nothing cached the network error
/// propagates. Malformed completions are skipped with a warning.
pub fn llm_generate(
    config: &LlmConfig,
    class: &str,
    polarity: Polarity,
    client: &dyn CompletionClient,
    cache: &mut PromptCache,
) -> Result<Vec<AnomalyPrompt>> {
    config.validate()?;
    let prefix = required_prefix(class, polarity);
    let request = CompletionRequest {
        model: config.model.clone(),
        prompt: llm_query(class, polarity),
        max_tokens: config.max_tokens,
        temperature: config.temperature,
    };
    let mut texts = Vec::new();
    let mut offline = false;
    let mut live_requests = 0usize;
    for index in 0..config.count {
        let key = PromptCache::key(&config.model, class, polarity, index);
        if let Some(text) = cache.get(&key) {
            texts.push(text.to_string());
            continue;
        }
        if offline {
            continue;
        }
        if live_requests > 0 && config.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(config.delay_ms));
        }
        live_requests += 1;
        match client.complete(&request) {
            Ok(raw) => match trim_response(&raw, &prefix) {
                Some(text) => {
                    cache.insert(key, text.clone());
                    texts.push(text);
                }
                None => warn!(
                    "llm response {index} for {class}/{} is empty",
                    polarity.as_str()
                ),
            },
            Err(PromptError::Malformed(msg)) => {
                warn!("skipping malformed llm response {index}: {msg}")
            }
            Err(err) => {
                if !cache.has_any(&config.model, class, polarity) {
                    return Err(err);
                }
                warn!("llm endpoint failed ({err}); serving cached prompts only");
                offline = true;
            }
        }
    }
    cache.save()?;

    let mut seen = HashSet::new();
    Ok(texts
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .map(|text| AnomalyPrompt {
            text,
            polarity,
            source: PromptSource::Llm,
        })
        .collect())
}

/// Template prompts followed by LLM prompts (normal then abnormal, each in
/// cache-index order).
pub fn build_vanilla_pool(
    grammar: &TemplateGrammar,
    llm: Option<(&LlmConfig, &dyn CompletionClient, &mut PromptCache)>,
    class_name: &str,
) -> Result<PromptSet> {
    let mut set = expand_templates(grammar, class_name)?;
    if let Some((config, client, cache)) = llm {
        let class = grammar.alias(class_name);
        for polarity in Polarity::BOTH {
            set.prompts
                .extend(llm_generate(config, class, polarity, client, cache)?);
        }
    }
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn tiny_grammar() -> TemplateGrammar {
        TemplateGrammar {
            templates: vec!["a photo of a {Ω}".into()],
            normal_states: vec!["normal ς".into()],
            abnormal_states: vec!["broken ς".into()],
            enhancements: vec![],
            class_aliases: BTreeMap::new(),
        }
    }

    #[test]
    fn singleton_grammar() {
        let set = expand_templates(&tiny_grammar(), "bottle").unwrap();
        assert_eq!(set.prompts.len(), 2);
        assert_eq!(set.prompts[0].text, "a photo of a normal bottle");
        assert_eq!(set.prompts[1].text, "a photo of a broken bottle");
        assert_eq!(set.prompts[1].polarity, Polarity::Abnormal);
    }

    #[test]
    fn default_grammar_counts() {
        let mut g = TemplateGrammar::default();
        g.enhancements.clear();
        let c = expand_templates(&g, "bottle").unwrap().counts();
        assert_eq!(c.abnormal_template, 72);
        assert_eq!(c.normal_template, 72);

        let c = expand_templates(&TemplateGrammar::default(), "bottle")
            .unwrap()
            .counts();
        assert_eq!(c.abnormal_template, 144);
    }

    #[test]
    fn aliases_replace_class_names() {
        let mut g = tiny_grammar();
        g.class_aliases
            .insert("pcb1".into(), "printed circuit board".into());
        let set = expand_templates(&g, "pcb1").unwrap();
        assert_eq!(
            set.prompts[0].text,
            "a photo of a normal printed circuit board"
        );
        assert_eq!(set.class_name, "pcb1");
    }

    #[test]
    fn grammar_validation() {
        let mut g = tiny_grammar();
        g.templates.clear();
        assert!(matches!(
            expand_templates(&g, "x"),
            Err(PromptError::EmptyGrammar("templates"))
        ));
        let mut g = tiny_grammar();
        g.abnormal_states = vec!["broken thing".into()];
        assert!(matches!(
            expand_templates(&g, "x"),
            Err(PromptError::BadPlaceholder { .. })
        ));
        let mut g = tiny_grammar();
        g.templates = vec!["{Ω} and {Ω}".into()];
        assert!(expand_templates(&g, "x").is_err());
    }

    #[test]
    fn enhancement_duplicates_are_dropped() {
        let mut g = tiny_grammar();
        g.templates.push("a image of a {Ω}".into());
        g.enhancements.push(("image".into(), "photo".into()));
        let set = expand_templates(&g, "cup").unwrap();
        // "a image of" -> "a photo of" collides with the first template
        assert_eq!(set.counts().abnormal_template, 2);
    }

    #[test]
    fn trimming_keeps_one_sentence_from_prefix() {
        let p = "An abnormal image of bottle";
        assert_eq!(
            trim_response(
                "Sure!  An abnormal image of bottle shows a crack. It also...",
                p
            )
            .as_deref(),
            Some("An abnormal image of bottle shows a crack.")
        );
        assert_eq!(
            trim_response("no prefix here. second", p).as_deref(),
            Some("no prefix here.")
        );
        assert_eq!(trim_response("   ", p), None);
        assert_eq!(
            trim_response("an abnormal image of bottle with a dent", p).as_deref(),
            Some("an abnormal image of bottle with a dent")
        );
    }

    #[test]
    fn completion_parsing() {
        assert_eq!(
            parse_completion(r#"{"choices":[{"text":"hi"}]}"#).unwrap(),
            "hi"
        );
        assert!(matches!(
            parse_completion(r#"{"choices":[]}"#),
            Err(PromptError::Malformed(_))
        ));
        assert!(matches!(
            parse_completion("oops"),
            Err(PromptError::Malformed(_))
        ));
    }

    struct Scripted {
        replies: RefCell<Vec<Result<String>>>,
        calls: RefCell<usize>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<String>>) -> Self {
            Self {
                replies: RefCell::new(replies),
                calls: RefCell::new(0),
            }
        }
    }

    impl CompletionClient for Scripted {
        fn complete(&self, _: &CompletionRequest) -> Result<String> {
            *self.calls.borrow_mut() += 1;
            let mut r = self.replies.borrow_mut();
            if r.is_empty() {
                Err(PromptError::Network("down".into()))
            } else {
                r.remove(0)
            }
        }
    }

    fn cfg(count: usize) -> LlmConfig {
        LlmConfig {
            count,
            model: "m".into(),
            ..LlmConfig::default()
        }
    }

    #[test]
    fn zero_count_is_empty() {
        let client = Scripted::new(vec![]);
        let out = llm_generate(
            &cfg(0),
            "cup",
            Polarity::Abnormal,
            &client,
            &mut PromptCache::in_memory(),
        )
        .unwrap();
        assert!(out.is_empty());
        assert_eq!(*client.calls.borrow(), 0);
    }

    #[test]
    fn cache_is_served_when_endpoint_is_down() {
        let mut cache = PromptCache::in_memory();
        for i in 0..3 {
            cache.insert(
                PromptCache::key("m", "cup", Polarity::Abnormal, i),
                format!("An abnormal image of cup {i}."),
            );
        }
        let client = Scripted::new(vec![]);
        let out = llm_generate(&cfg(5), "cup", Polarity::Abnormal, &client, &mut cache).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|p| p.source == PromptSource::Llm));
        assert_eq!(*client.calls.borrow(), 1);
    }

    #[test]
    fn network_failure_without_cache_is_an_error() {
        let client = Scripted::new(vec![]);
        let r = llm_generate(
            &cfg(2),
            "cup",
            Polarity::Normal,
            &client,
            &mut PromptCache::in_memory(),
        );
        assert!(matches!(r, Err(PromptError::Network(_))));
    }

    #[test]
    fn duplicates_and_malformed_replies_are_dropped() {
        let client = Scripted::new(vec![
            Ok("An abnormal image of cup has a chip.".into()),
            Ok("An abnormal image of cup has a chip. Indeed.".into()),
            Err(PromptError::Malformed("bad json".into())),
            Ok("An abnormal image of cup is cracked.".into()),
        ]);
        let mut cache = PromptCache::in_memory();
        let out = llm_generate(&cfg(4), "cup", Polarity::Abnormal, &client, &mut cache).unwrap();
        let texts: Vec<_> = out.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(
            texts,
            [
                "An abnormal image of cup has a chip.",
                "An abnormal image of cup is cracked."
            ]
        );
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn pool_without_llm_is_template_expansion() {
        let g = TemplateGrammar::default();
        let pool = build_vanilla_pool(&g, None, "bottle").unwrap();
        assert_eq!(pool, expand_templates(&g, "bottle").unwrap());
    }

    #[test]
    fn pool_appends_llm_prompts_after_templates() {
        let mut g = TemplateGrammar::default();
        g.enhancements.clear();
        let mut cache = PromptCache::in_memory();
        for i in 0..100 {
            cache.insert(
                PromptCache::key("m", "bottle", Polarity::Abnormal, i),
                format!("An abnormal image of bottle variant {i}."),
            );
        }
        let client = Scripted::new(vec![]);
        let mut config = cfg(100);
        config.count = 100;
        // normal polarity has no cache and the endpoint is down
        let err = build_vanilla_pool(&g, Some((&config, &client, &mut cache)), "bottle");
        assert!(err.is_err());

        for i in 0..100 {
            cache.insert(
                PromptCache::key("m", "bottle", Polarity::Normal, i),
                format!("A normal image of bottle variant {i}."),
            );
        }
        let pool = build_vanilla_pool(&g, Some((&config, &client, &mut cache)), "bottle").unwrap();
        let c = pool.counts();
        assert_eq!(c.abnormal(), 172);
        assert_eq!(c.abnormal_llm, 100);
        assert!(pool.prompts[..144]
            .iter()
            .all(|p| p.source == PromptSource::Template));
    }
}
