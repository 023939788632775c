//! One conversation: both cache channels, the log, tool state and the turn
//! loop that ties them together.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{
    Backend, BackendError, Channel, MatchRule, Script, ScriptStep, ScriptedBackend,
};
use crate::dispatch::{
    parse_assistant_output, ActionKind, AgentMode, DispatchState, Phase, ProtocolError,
    TOOL_CALL_OPEN,
};
use crate::kvcache::{AdapterId, CacheError, CacheSnapshot, CacheState};
use crate::memory::{self, tracker_prompt, Cso, MemoryError, TrackerStep};
use crate::prompt;
use crate::schema;
use crate::tokenizer::Tokenizer;
use crate::toolenv::{Observation, ToolEnvError, ToolRegistry, ToolState, VerbosityProfile};
use crate::turn::{Role, Turn, TurnKind};

pub const DEFAULT_MAX_INNER_STEPS: u32 = 8;
pub const DEFAULT_MAX_SELECT_LOOPS: u32 = 3;

/// When the state tracker runs within a user turn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TrackerCadence {
    /// After every executor message that is not a tool selection, before
    /// any tool it requests is run.
    #[default]
    PerAssistantMessage,
    /// Once, after the turn's final message.
    PerTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SessionConfig {
    pub mode: AgentMode,
    pub max_inner_steps: u32,
    pub max_select_loops: u32,
    pub tracker_cadence: TrackerCadence,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub executor_preamble: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracker_contract: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank_description_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud_profile: Option<VerbosityProfile>,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: AgentMode::COMBINED,
            max_inner_steps: DEFAULT_MAX_INNER_STEPS,
            max_select_loops: DEFAULT_MAX_SELECT_LOOPS,
            tracker_cadence: TrackerCadence::default(),
            executor_preamble: None,
            tracker_contract: None,
            bank_description_limit: None,
            cloud_profile: None,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn for_mode(mode: AgentMode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session is closed")]
    Closed,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    ToolEnv(#[from] ToolEnvError),
    #[error("cannot replay trajectory: {0}")]
    Replay(String),
}

impl SessionError {
    /// Whether the failure came from a model backend.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            SessionError::Backend(_) | SessionError::Memory(MemoryError::Backend(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StopReason {
    Completed,
    TurnBudgetExceeded,
    SelectLoopDetected,
}

impl StopReason {
    fn as_str(self) -> &'static str {
        match self {
            StopReason::Completed => "completed",
            StopReason::TurnBudgetExceeded => "turn_budget_exceeded",
            StopReason::SelectLoopDetected => "select_loop_detected",
        }
    }
}

/// A tool call the executor made, as scored by the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ToolCallRecord {
    pub assistant_turn: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Value>,
    /// Parsed, known and (in two-stage mode) selected first.
    pub valid: bool,
    pub has_required: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepOutcome {
    pub turns: Vec<Turn>,
    pub stop_reason: StopReason,
    pub repeated_errors: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CachePair {
    pub executor: CacheSnapshot,
    pub tracker: CacheSnapshot,
}

pub struct Session {
    id: String,
    config: SessionConfig,
    registry: Arc<ToolRegistry>,
    backend: Arc<dyn Backend>,
    tokenizer: Arc<dyn Tokenizer>,
    executor: CacheState,
    tracker: CacheState,
    cso: Cso,
    tools: ToolState,
    dispatch: DispatchState,
    trajectory: Vec<Turn>,
    calls: Vec<ToolCallRecord>,
    /// Messages the tracker has not seen yet.
    pending: Vec<Turn>,
    assistant_turns: u32,
    closed: bool,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("mode", &self.config.mode)
            .field("turns", &self.trajectory.len())
            .finish()
    }
}

impl Session {
    /// Builds both base prompts and primes the two channels.
    pub fn new(
        id: impl Into<String>,
        config: SessionConfig,
        registry: Arc<ToolRegistry>,
        backend: Arc<dyn Backend>,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Result<Self, SessionError> {
        let id = id.into();
        let cso = Cso::new();
        let mode = config.mode;
        let preamble = config
            .executor_preamble
            .clone()
            .unwrap_or_else(|| prompt::default_preamble(mode).to_string());
        let tools = prompt::tools_section(
            mode.tool_mode,
            &registry,
            tokenizer.as_ref(),
            config.bank_description_limit,
        );
        let base = prompt::executor_base(&preamble, &tools, mode, cso.text());
        let executor = CacheState::prime(AdapterId::Executor, &base, tokenizer.as_ref())?;
        let contract = config
            .tracker_contract
            .as_deref()
            .unwrap_or(prompt::DEFAULT_TRACKER_CONTRACT);
        let tracker = CacheState::prime(
            AdapterId::Tracker,
            &tracker_prompt::base(contract, cso.text()),
            tokenizer.as_ref(),
        )?;
        let mut tools_state = ToolState::with_seed(config.seed);
        tools_state.cloud_profile = config.cloud_profile;
        let mut s = Self {
            id,
            config,
            registry,
            backend,
            tokenizer,
            executor,
            tracker,
            cso,
            tools: tools_state,
            dispatch: DispatchState::default(),
            trajectory: Vec::new(),
            calls: Vec::new(),
            pending: Vec::new(),
            assistant_turns: 0,
            closed: false,
        };
        let start = json!({
            "registryId": s.registry.id(),
            "config": s.config,
        });
        s.push(Turn::system(0, TurnKind::SessionStart, start.to_string()));
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mode(&self) -> AgentMode {
        self.config.mode
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<ToolRegistry> {
        &self.registry
    }

    pub fn cso(&self) -> &Cso {
        &self.cso
    }

    pub fn executor_cache(&self) -> &CacheState {
        &self.executor
    }

    pub fn tracker_cache(&self) -> &CacheState {
        &self.tracker
    }

    pub fn caches(&self) -> CachePair {
        CachePair {
            executor: self.executor.snapshot(),
            tracker: self.tracker.snapshot(),
        }
    }

    pub fn trajectory(&self) -> &[Turn] {
        &self.trajectory
    }

    pub fn calls(&self) -> &[ToolCallRecord] {
        &self.calls
    }

    pub fn tool_state(&self) -> &ToolState {
        &self.tools
    }

    pub fn dispatch_state(&self) -> &DispatchState {
        &self.dispatch
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// The prompt the executor's next generation is conditioned on.
    pub fn executor_prompt(&self) -> String {
        self.executor
            .full_prompt_text()
            .expect("executor is primed at construction")
    }

    fn next_index(&self) -> u32 {
        self.trajectory.len() as u32
    }

    fn push(&mut self, mut turn: Turn) -> Turn {
        turn.turn_index = self.next_index();
        turn.session_id = Some(self.id.clone());
        self.trajectory.push(turn.clone());
        turn
    }

    fn extend(&mut self, text: &str) -> Result<(), SessionError> {
        let idx = self.next_index();
        self.executor
            .extend_ephemeral(text, idx, self.tokenizer.as_ref())?;
        Ok(())
    }

    fn run_tracker(&mut self) -> Result<(), SessionError> {
        if !self.config.mode.uses_cso() || self.pending.is_empty() {
            return Ok(());
        }
        let outcome = memory::run_tracker_turn(
            TrackerStep {
                cso: &mut self.cso,
                cache: &mut self.tracker,
                backend: self.backend.as_ref(),
                tokenizer: self.tokenizer.as_ref(),
                turn_index: self.assistant_turns,
            },
            &self.pending,
        )?;
        let commit = outcome.delta.commit_text();
        let idx = self.next_index();
        self.executor
            .commit_delta(&commit, idx, self.tokenizer.as_ref())?;
        self.tracker
            .commit_delta(&commit, idx, self.tokenizer.as_ref())?;
        self.pending.clear();
        self.push(Turn::tracker(idx, outcome.raw_output));
        Ok(())
    }

    /// Runs one user turn to completion.
    ///
    /// Protocol errors and tool failures become observations; only backend,
    /// tracker and ledger failures abort the turn. Turns produced before an
    /// abort stay in the trajectory.
    pub fn step_turn(&mut self, user_text: &str) -> Result<StepOutcome, SessionError> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        let first = self.trajectory.len();
        if self.config.mode.uses_cso() {
            let idx = self.next_index();
            self.executor.rewind(idx)?;
            self.tracker.rewind(idx)?;
        }
        self.dispatch.reset();
        let user = self.push(Turn::user(0, user_text));
        self.pending.push(user);
        self.extend(&prompt::user_segment(user_text))?;

        let mut steps = 0;
        let mut repeated_errors = 0u32;
        let mut last_error: Option<(String, String)> = None;
        let stop = loop {
            if steps >= self.config.max_inner_steps {
                break StopReason::TurnBudgetExceeded;
            }
            steps += 1;
            let prompt_text = self.executor_prompt();
            let tokens = self.executor.prompt_tokens(self.tokenizer.as_ref());
            let raw = self.backend.generate(&prompt_text, Channel::Executor)?;
            self.assistant_turns += 1;
            let aturn = self.assistant_turns;
            self.extend(&raw)?;
            let parsed =
                parse_assistant_output(&raw, &self.dispatch, self.config.mode, &self.registry);
            let action = match parsed {
                Ok(a) => a,
                Err(err) => {
                    let is_call = raw.contains(TOOL_CALL_OPEN);
                    let kind = if is_call {
                        TurnKind::ToolCall
                    } else {
                        TurnKind::ToolSelect
                    };
                    let mut t = Turn::assistant(0, aturn, kind, raw.clone(), tokens);
                    if let ProtocolError::UnknownTool(n) | ProtocolError::NotSelected(n) = &err {
                        t.tool_name = Some(n.clone());
                    }
                    let t = self.push(t);
                    self.pending.push(t);
                    if is_call {
                        self.calls.push(ToolCallRecord {
                            assistant_turn: aturn,
                            name: match &err {
                                ProtocolError::UnknownTool(n) | ProtocolError::NotSelected(n) => {
                                    Some(n.clone())
                                }
                                _ => None,
                            },
                            tool_id: None,
                            arguments: None,
                            valid: false,
                            has_required: false,
                            success: false,
                        });
                        if self.config.tracker_cadence == TrackerCadence::PerAssistantMessage {
                            self.run_tracker()?;
                        }
                    }
                    let obs = Observation::failure("", err.to_string());
                    let key = (raw.clone(), obs.render());
                    repeated_errors = if last_error.as_ref() == Some(&key) {
                        repeated_errors + 1
                    } else {
                        1
                    };
                    last_error = Some(key);
                    self.observe(&obs, None)?;
                    continue;
                }
            };
            match action.kind {
                ActionKind::ToolSelect => {
                    let name = action.tool_name.clone().unwrap_or_default();
                    let mut t =
                        Turn::assistant(0, aturn, TurnKind::ToolSelect, raw.clone(), tokens);
                    t.tool_name = Some(name.clone());
                    let t = self.push(t);
                    self.pending.push(t);
                    if self.dispatch.selected_tool.as_deref() == Some(name.as_str())
                        && self.dispatch.phase == Phase::AwaitingCall
                    {
                        self.dispatch.select_loop_count += 1;
                    } else {
                        self.dispatch.select_loop_count = 1;
                    }
                    self.dispatch.selected_tool = Some(name.clone());
                    self.dispatch.phase = Phase::AwaitingCall;
                    if self.dispatch.select_loop_count >= self.config.max_select_loops {
                        break StopReason::SelectLoopDetected;
                    }
                    let schema = self
                        .registry
                        .by_name(&name)
                        .expect("parser checked the name");
                    let compact = schema::minify(schema, self.tokenizer.as_ref()).text;
                    let mut t = Turn::tool(0, TurnKind::SchemaInjection, compact.clone());
                    t.tool_name = Some(name);
                    self.push(t);
                    self.extend(&prompt::schema_injection_segment(&compact))?;
                }
                ActionKind::ToolCall | ActionKind::CloudDelegate => {
                    let name = action.tool_name.clone().unwrap_or_default();
                    let args = action.arguments.clone().unwrap_or_default();
                    let kind = if action.kind == ActionKind::CloudDelegate {
                        TurnKind::CloudDelegate
                    } else {
                        TurnKind::ToolCall
                    };
                    let mut t = Turn::assistant(0, aturn, kind, raw.clone(), tokens);
                    t.tool_name = Some(name.clone());
                    t.arguments = Some(Value::Object(args.clone()));
                    let t = self.push(t);
                    self.pending.push(t);
                    if self.config.tracker_cadence == TrackerCadence::PerAssistantMessage {
                        self.run_tracker()?;
                    }
                    self.dispatch.phase = Phase::AwaitingObservation;
                    let schema = self
                        .registry
                        .by_name(&name)
                        .expect("parser checked the name");
                    let has_required = schema.required().all(|r| args.contains_key(r));
                    let tool_id = schema.id.clone();
                    let obs = self.registry.invoke(&name, &args, &mut self.tools)?;
                    self.calls.push(ToolCallRecord {
                        assistant_turn: aturn,
                        name: Some(name.clone()),
                        tool_id: Some(tool_id),
                        arguments: Some(Value::Object(args)),
                        valid: true,
                        has_required,
                        success: obs.success,
                    });
                    if obs.success {
                        repeated_errors = 0;
                        last_error = None;
                    } else {
                        let key = (raw.clone(), obs.render());
                        repeated_errors = if last_error.as_ref() == Some(&key) {
                            repeated_errors + 1
                        } else {
                            1
                        };
                        last_error = Some(key);
                    }
                    self.observe(&obs, Some(name))?;
                    self.dispatch.phase = Phase::Idle;
                }
                ActionKind::DirectResponse => {
                    let t =
                        Turn::assistant(0, aturn, TurnKind::DirectResponse, raw.clone(), tokens);
                    let t = self.push(t);
                    self.pending.push(t);
                    if self.config.tracker_cadence == TrackerCadence::PerAssistantMessage {
                        self.run_tracker()?;
                    }
                    break StopReason::Completed;
                }
            }
        };
        if stop != StopReason::Completed {
            let mut t = Turn::system(
                0,
                TurnKind::DirectResponse,
                format!(
                    "Stopped after {steps} steps ({}); repeated errors: {repeated_errors}.",
                    stop.as_str()
                ),
            );
            t.role = Role::Assistant;
            t.stop_reason = Some(stop.as_str().to_string());
            self.push(t);
        }
        if self.config.tracker_cadence == TrackerCadence::PerTurn {
            self.run_tracker()?;
        }
        Ok(StepOutcome {
            turns: self.trajectory[first..].to_vec(),
            stop_reason: stop,
            repeated_errors,
        })
    }

    fn observe(
        &mut self,
        obs: &Observation,
        tool_name: Option<String>,
    ) -> Result<(), SessionError> {
        let rendered = obs.render();
        let mut t = Turn::tool(0, TurnKind::Observation, rendered.clone());
        t.success = Some(obs.success);
        t.tool_name = tool_name;
        let t = self.push(t);
        self.pending.push(t);
        self.extend(&prompt::observation_segment(&rendered))
    }

    /// Points further turns at another backend, e.g. a live one after a
    /// session was rebuilt with [`Session::replay`].
    pub fn set_backend(&mut self, backend: Arc<dyn Backend>) {
        self.backend = backend;
    }

    /// Registry id recorded in a trajectory's session-start turn.
    pub fn recorded_registry_id(turns: &[Turn]) -> Option<String> {
        let start = turns.first().filter(|t| t.kind == TurnKind::SessionStart)?;
        let header: Value = serde_json::from_str(&start.content).ok()?;
        header["registryId"].as_str().map(str::to_string)
    }

    /// Rebuilds a session from its persisted trajectory by re-running every
    /// user turn against the recorded executor and tracker outputs.
    pub fn replay(
        turns: &[Turn],
        registry: Arc<ToolRegistry>,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Result<Session, SessionError> {
        let start = turns
            .first()
            .filter(|t| t.kind == TurnKind::SessionStart)
            .ok_or_else(|| SessionError::Replay("first turn is not a session start".into()))?;
        let header: Value = serde_json::from_str(&start.content)
            .map_err(|e| SessionError::Replay(e.to_string()))?;
        let config: SessionConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| SessionError::Replay(e.to_string()))?;
        if let Some(reg) = header["registryId"].as_str() {
            if reg != registry.id() {
                return Err(SessionError::Replay(format!(
                    "trajectory uses registry '{reg}', got '{}'",
                    registry.id()
                )));
            }
        }
        let mut steps = Vec::new();
        let (mut ex, mut tr) = (0, 0);
        for t in turns {
            if t.is_assistant() && t.assistant_turn.is_some() {
                ex += 1;
                steps.push(ScriptStep::executor(
                    MatchRule::CallIndex(ex),
                    t.content.clone(),
                ));
            } else if t.kind == TurnKind::StateUpdate {
                tr += 1;
                steps.push(ScriptStep::tracker(
                    MatchRule::CallIndex(tr),
                    t.content.clone(),
                ));
            }
        }
        let backend = Arc::new(ScriptedBackend::new(Script::new(steps)));
        let id = start.session_id.clone().unwrap_or_default();
        let mut s = Session::new(id, config, registry, backend, tokenizer)?;
        for t in turns.iter().filter(|t| t.kind == TurnKind::UserMessage) {
            match s.step_turn(&t.content) {
                Ok(_) | Err(SessionError::Backend(_)) | Err(SessionError::Memory(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(s)
    }
}
