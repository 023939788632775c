//! Model backends. The executor and state-tracker adapters are two logical
//! channels over one interface; a scripted backend routes them through a
//! script, a live server maps them to adapter names.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use crate::kvcache::AdapterId as Channel;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("script exhausted: no step matches {channel:?} call #{call_index}")]
    ScriptExhausted { channel: Channel, call_index: u32 },
    #[error("script expected a {expected:?} call but got {got:?}")]
    ChannelMismatch { expected: Channel, got: Channel },
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("request timed out")]
    Timeout,
    #[error("server returned HTTP {0}")]
    HttpStatus(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    InvalidResponse(String),
    #[error("unknown backend '{0}'")]
    UnknownBackend(String),
}

/// A completion source shared by both channels.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, prompt: &str, channel: Channel) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    #[default]
    Any,
    Contains(String),
    Regex(String),
    /// 1-based index of the call on the step's channel.
    CallIndex(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub channel: Channel,
    #[serde(rename = "match", default)]
    pub rule: MatchRule,
    pub output: String,
    /// Repeating steps are never consumed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl ScriptStep {
    pub fn executor(rule: MatchRule, output: impl Into<String>) -> Self {
        Self {
            channel: Channel::Executor,
            rule,
            output: output.into(),
            repeat: false,
        }
    }

    pub fn tracker(rule: MatchRule, output: impl Into<String>) -> Self {
        Self {
            channel: Channel::Tracker,
            rule,
            output: output.into(),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Script {
    /// When set, calls must consume steps strictly in file order.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ordered: bool,
    pub steps: Vec<ScriptStep>,
}

impl<'de> Deserialize<'de> for Script {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Steps(Vec<ScriptStep>),
            Full {
                #[serde(default)]
                ordered: bool,
                steps: Vec<ScriptStep>,
            },
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Steps(steps) => Script {
                ordered: false,
                steps,
            },
            Repr::Full { ordered, steps } => Script { ordered, steps },
        })
    }
}

fn tool_call_name(output: &str) -> Option<String> {
    let start = output.find("<tool_call>")? + "<tool_call>".len();
    let body = &output[start..];
    let body = body.split("</tool_call>").next().unwrap_or(body);
    let v: Value = serde_json::from_str(body.trim()).ok()?;
    v.get("name")?.as_str().map(str::to_string)
}

impl Script {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self {
            ordered: false,
            steps,
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidScript(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::InvalidScript(e.to_string()))
    }

    /// Rewrites the script for two-stage tool calling: every consumable
    /// executor step that emits a `<tool_call>` is preceded by a step that
    /// selects the same tool.
    pub fn jit_expanded(&self) -> Script {
        let mut steps = Vec::with_capacity(self.steps.len() * 2);
        for step in &self.steps {
            let name = (step.channel == Channel::Executor && !step.repeat)
                .then(|| tool_call_name(&step.output))
                .flatten();
            match name {
                Some(name) => {
                    let select = format!(
                        "<tool_select>{}</tool_select>",
                        json!({"name": name, "reason": "needed for the current request"})
                    );
                    steps.push(ScriptStep {
                        output: select,
                        ..step.clone()
                    });
                    let rule = match &step.rule {
                        MatchRule::CallIndex(_) => MatchRule::Any,
                        other => other.clone(),
                    };
                    steps.push(ScriptStep {
                        rule,
                        ..step.clone()
                    });
                }
                None => steps.push(step.clone()),
            }
        }
        Script {
            ordered: self.ordered,
            steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub channel: Channel,
    pub prompt: String,
    pub output: String,
}

#[derive(Debug, Default)]
struct ScriptCursor {
    consumed: Vec<bool>,
    calls: HashMap<Channel, u32>,
    transcript: Vec<TranscriptEntry>,
}

/// Deterministic test double replaying a [`Script`].
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    regexes: Vec<Option<Regex>>,
    state: Mutex<ScriptCursor>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self::try_new(script).expect("script regexes must compile")
    }

    pub fn try_new(script: Script) -> Result<Self, BackendError> {
        let regexes = script
            .steps
            .iter()
            .map(|s| match &s.rule {
                MatchRule::Regex(p) => Regex::new(p)
                    .map(Some)
                    .map_err(|e| BackendError::InvalidScript(e.to_string())),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let consumed = vec![false; script.steps.len()];
        Ok(Self {
            script,
            regexes,
            state: Mutex::new(ScriptCursor {
                consumed,
                ..Default::default()
            }),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Self::try_new(Script::load(path)?)
    }

    /// Every (prompt, output) pair served so far, in call order.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.lock().transcript.clone()
    }

    pub fn unconsumed_steps(&self) -> usize {
        let st = self.lock();
        self.script
            .steps
            .iter()
            .zip(&st.consumed)
            .filter(|(s, c)| !s.repeat && !**c)
            .count()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ScriptCursor> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn matches(&self, idx: usize, prompt: &str, call_index: u32) -> bool {
        match &self.script.steps[idx].rule {
            MatchRule::Any => true,
            MatchRule::Contains(s) => prompt.contains(s.as_str()),
            MatchRule::Regex(_) => self.regexes[idx]
                .as_ref()
                .is_some_and(|r| r.is_match(prompt)),
            MatchRule::CallIndex(n) => *n == call_index,
        }
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn generate(&self, prompt: &str, channel: Channel) -> Result<String, BackendError> {
        let mut st = self.lock();
        let call_index = {
            let n = st.calls.entry(channel).or_insert(0);
            *n += 1;
            *n
        };
        let exhausted = BackendError::ScriptExhausted {
            channel,
            call_index,
        };
        let found = if self.script.ordered {
            let next = (0..self.script.steps.len()).find(|&i| !st.consumed[i]);
            match next {
                None => return Err(exhausted),
                Some(i) if self.script.steps[i].channel != channel => {
                    return Err(BackendError::ChannelMismatch {
                        expected: self.script.steps[i].channel,
                        got: channel,
                    })
                }
                Some(i) if self.matches(i, prompt, call_index) => Some(i),
                Some(_) => None,
            }
        } else {
            (0..self.script.steps.len()).find(|&i| {
                !st.consumed[i]
                    && self.script.steps[i].channel == channel
                    && self.matches(i, prompt, call_index)
            })
        };
        let idx = found.ok_or(exhausted)?;
        let step = &self.script.steps[idx];
        if !step.repeat {
            st.consumed[idx] = true;
        }
        st.transcript.push(TranscriptEntry {
            channel,
            prompt: prompt.to_string(),
            output: step.output.clone(),
        });
        Ok(step.output.clone())
    }
}

/// Generation parameters for live backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_tokens: u32,
    pub temperature: f32,
    pub stop: Vec<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
            stop: vec!["</tool_call>".into(), "<|im_end|>".into()],
        }
    }
}

/// Wire settings for the completion server. The defaults speak the minimal
/// `{prompt, max_tokens, stop, adapter}` API; pointing `response_pointer` at
/// `/choices/0/text` and `adapter_field` at `model` talks to an
/// OpenAI-compatible completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub url: String,
    pub params: GenParams,
    pub adapter_field: String,
    pub executor_adapter: String,
    pub tracker_adapter: String,
    pub response_pointer: String,
    pub timeout_ms: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080/completion".into(),
            params: GenParams::default(),
            adapter_field: "adapter".into(),
            executor_adapter: "executor".into(),
            tracker_adapter: "tracker".into(),
            response_pointer: "/text".into(),
            timeout_ms: 60_000,
        }
    }
}

/// Cuts `text` at the earliest stop sequence. Closing tags (`</...>`) are
/// kept so the tool-call parser still sees a complete block.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let earliest = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|i| (i, s)))
        .min_by_key(|(i, _)| *i);
    match earliest {
        Some((i, s)) if s.starts_with("</") => text[..i + s.len()].to_string(),
        Some((i, _)) => text[..i].to_string(),
        None => text.to_string(),
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        Self {
            config,
            client: OnceLock::new(),
        }
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    // The blocking client owns a runtime, so build it on first use from the
    // calling (blocking) thread.
    fn client(&self) -> Result<&reqwest::blocking::Client, BackendError> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let c = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(self.config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(self.client.get_or_init(|| c))
    }

    pub fn request_body(&self, prompt: &str, channel: Channel) -> Value {
        let adapter = match channel {
            Channel::Executor => &self.config.executor_adapter,
            Channel::Tracker => &self.config.tracker_adapter,
        };
        let mut body = serde_json::Map::new();
        body.insert("prompt".into(), json!(prompt));
        body.insert("max_tokens".into(), json!(self.config.params.max_tokens));
        body.insert("temperature".into(), json!(self.config.params.temperature));
        body.insert("stop".into(), json!(self.config.params.stop));
        body.insert(self.config.adapter_field.clone(), json!(adapter));
        Value::Object(body)
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn generate(&self, prompt: &str, channel: Channel) -> Result<String, BackendError> {
        let resp = self
            .client()?
            .post(&self.config.url)
            .json(&self.request_body(prompt, channel))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(e.to_string())
                }
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::HttpStatus(status.as_u16()));
        }
        let body: Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::InvalidResponse(e.to_string())
            }
        })?;
        let text = body
            .pointer(&self.config.response_pointer)
            .and_then(Value::as_str)
            .ok_or_else(|| {
                BackendError::InvalidResponse(format!(
                    "no string at {} in response",
                    self.config.response_pointer
                ))
            })?;
        Ok(truncate_at_stop(text, &self.config.params.stop))
    }
}

type BackendFactory = fn(&str) -> Result<Arc<dyn Backend>, BackendError>;

/// `kind:arg` → backend constructor, e.g. `scripted:script.json` or
/// `http:http://host:8080/completion`.
pub struct BackendRegistry {
    factories: BTreeMap<&'static str, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut factories: BTreeMap<&'static str, BackendFactory> = BTreeMap::new();
        factories.insert("scripted", |arg| {
            Ok(Arc::new(ScriptedBackend::from_file(Path::new(arg))?) as Arc<dyn Backend>)
        });
        factories.insert("http", |arg| {
            Ok(Arc::new(HttpBackend::new(HttpBackendConfig {
                url: arg.to_string(),
                ..Default::default()
            })) as Arc<dyn Backend>)
        });
        Self { factories }
    }
}

impl BackendRegistry {
    pub fn register(&mut self, kind: &'static str, factory: BackendFactory) {
        self.factories.insert(kind, factory);
    }

    pub fn build(&self, spec: &str) -> Result<Arc<dyn Backend>, BackendError> {
        let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let factory = self
            .factories
            .get(kind)
            .ok_or_else(|| BackendError::UnknownBackend(kind.to_string()))?;
        factory(arg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ticket_script() -> Script {
        Script::new(vec![
            ScriptStep::executor(
                MatchRule::Contains("Wi-Fi is not working".into()),
                r#"<tool_call>{"name":"manage_it_support_ticket","arguments":{"action":"create_ticket"}}</tool_call>"#,
            ),
            ScriptStep::tracker(
                MatchRule::CallIndex(1),
                "user_goal: create_it_ticket\nissue: wifi outage",
            ),
        ])
    }

    #[test]
    fn scripted_routes_by_match_and_channel() {
        let b = ScriptedBackend::new(ticket_script());
        let out = b
            .generate("USER: My Wi-Fi is not working, please", Channel::Executor)
            .unwrap();
        assert!(out.starts_with("<tool_call>"));
        let out = b.generate("anything", Channel::Tracker).unwrap();
        assert!(out.starts_with("user_goal: create_it_ticket"));
        assert_eq!(
            b.generate("again", Channel::Tracker),
            Err(BackendError::ScriptExhausted {
                channel: Channel::Tracker,
                call_index: 2
            })
        );
        let t = b.transcript();
        assert_eq!(t.len(), 2);
        assert!(t
            .iter()
            .all(|e| (e.channel == Channel::Executor) == e.output.starts_with('<')));
    }

    #[test]
    fn unmatched_prompt_exhausts() {
        let b = ScriptedBackend::new(ticket_script());
        assert!(matches!(
            b.generate("hello", Channel::Executor),
            Err(BackendError::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn ordered_scripts_enforce_channel() {
        let mut s = ticket_script();
        s.ordered = true;
        let b = ScriptedBackend::new(s);
        assert_eq!(
            b.generate("x", Channel::Tracker),
            Err(BackendError::ChannelMismatch {
                expected: Channel::Executor,
                got: Channel::Tracker
            })
        );
    }

    #[test]
    fn repeat_steps_are_sticky() {
        let b = ScriptedBackend::new(Script::new(vec![ScriptStep::tracker(
            MatchRule::Any,
            "# NO_UPDATE",
        )
        .repeating()]));
        for _ in 0..5 {
            assert_eq!(b.generate("x", Channel::Tracker).unwrap(), "# NO_UPDATE");
        }
        assert_eq!(b.unconsumed_steps(), 0);
    }

    #[test]
    fn script_json_forms() {
        let bare: Script = serde_json::from_str(
            r##"[{"channel":"executor","match":{"contains":"hi"},"output":"hello"},
                {"channel":"tracker","output":"# NO_UPDATE","repeat":true}]"##,
        )
        .unwrap();
        assert_eq!(bare.steps.len(), 2);
        assert_eq!(bare.steps[1].rule, MatchRule::Any);
        let full: Script = serde_json::from_str(
            r#"{"ordered":true,"steps":[{"channel":"executor","match":{"regex":"^a+$"},"output":"x"}]}"#,
        )
        .unwrap();
        assert!(full.ordered);
        let b = ScriptedBackend::new(full);
        assert_eq!(b.generate("aaa", Channel::Executor).unwrap(), "x");
        let bad = Script::new(vec![ScriptStep::executor(
            MatchRule::Regex("(".into()),
            "x",
        )]);
        assert!(ScriptedBackend::try_new(bad).is_err());
    }

    #[test]
    fn jit_expansion_inserts_selection() {
        let s = ticket_script().jit_expanded();
        assert_eq!(s.steps.len(), 3);
        assert!(s.steps[0]
            .output
            .starts_with("<tool_select>{\"name\":\"manage_it_support_ticket\""));
        assert!(s.steps[1].output.starts_with("<tool_call>"));
        assert_eq!(s.steps[2].channel, Channel::Tracker);
    }

    #[test]
    fn stop_truncation() {
        let stops = GenParams::default().stop;
        assert_eq!(
            truncate_at_stop("<tool_call>{}</tool_call> trailing", &stops),
            "<tool_call>{}</tool_call>"
        );
        assert_eq!(truncate_at_stop("hello<|im_end|>junk", &stops), "hello");
        assert_eq!(truncate_at_stop("plain", &stops), "plain");
    }

    #[test]
    fn registry_rejects_unknown_kind() {
        let reg = BackendRegistry::default();
        assert!(matches!(
            reg.build("carrier-pigeon:x"),
            Err(BackendError::UnknownBackend(_))
        ));
        assert!(reg.build("http:http://127.0.0.1:1/x").is_ok());
        assert!(reg.build("scripted:/no/such/file.json").is_err());
    }

    #[test]
    fn request_body_carries_adapter() {
        let b = HttpBackend::new(HttpBackendConfig {
            adapter_field: "model".into(),
            ..Default::default()
        });
        let body = b.request_body("p", Channel::Tracker);
        assert_eq!(body["model"], "tracker");
        assert_eq!(body["prompt"], "p");
        assert_eq!(body["stop"][0], "</tool_call>");
    }
}
