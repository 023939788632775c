//! Simulated on-device tool environment.
//!
//! Handlers are looked up by name in a [`HandlerCatalog`] and bound to
//! schemas through a registry manifest. Domain failures never surface as
//! Rust errors; they come back as observations shaped
//! `{"error": "...", "success": false}` so the agent loop can show them to
//! the model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::schema::{self, SchemaError, ToolSchema};
use crate::tokenizer::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum ToolEnvError {
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("unknown handler '{0}'")]
    UnknownHandler(String),
    #[error("invalid handler config for '{handler}': {reason}")]
    HandlerConfig { handler: String, reason: String },
    #[error("registry manifest: {0}")]
    Manifest(String),
    #[error("cloud tool '{0}' is not in the registry")]
    MissingCloudTool(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Observation {
    pub payload: Value,
    pub success: bool,
    pub tool_id: String,
}

impl Observation {
    pub fn ok(tool_id: impl Into<String>, payload: Value) -> Self {
        Self {
            payload,
            success: true,
            tool_id: tool_id.into(),
        }
    }

    pub fn failure(tool_id: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            payload: json!({"error": message.into(), "success": false}),
            success: false,
            tool_id: tool_id.into(),
        }
    }

    /// Compact JSON as placed in the prompt.
    pub fn render(&self) -> String {
        self.payload.to_string()
    }
}

/// Target length of a simulated cloud answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbosityProfile {
    pub target_tokens: usize,
}

impl VerbosityProfile {
    pub const DEFAULT: Self = Self { target_tokens: 400 };
    pub const VERBOSE: Self = Self { target_tokens: 800 };
}

impl Default for VerbosityProfile {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Per-session mutable state of the simulated device.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ToolState {
    pub seed: u64,
    pub tickets: BTreeMap<String, Value>,
    pub timers: u32,
    pub cloud_profile: Option<VerbosityProfile>,
}

impl ToolState {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }
}

pub type HandlerResult = Result<Value, String>;

/// Executes validated calls for one tool.
pub trait ToolHandler: Send + Sync {
    fn handle(
        &self,
        schema: &ToolSchema,
        args: &Map<String, Value>,
        state: &mut ToolState,
    ) -> HandlerResult;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

const FILLER: &[&str] = &[
    "analysis",
    "context",
    "recipe",
    "option",
    "result",
    "approach",
    "detail",
    "summary",
    "step",
    "ingredient",
    "minutes",
    "overview",
    "example",
    "source",
    "reference",
    "method",
    "answer",
    "consider",
    "include",
    "suggest",
    "provide",
    "typical",
    "several",
    "quick",
    "simple",
    "useful",
    "relevant",
    "additional",
    "important",
    "general",
    "specific",
    "common",
    "balanced",
    "flavor",
    "solution",
    "equation",
    "integral",
    "factor",
    "variable",
    "function",
    "history",
    "artist",
    "track",
    "album",
    "similar",
    "genre",
    "style",
    "popular",
    "classic",
    "modern",
    "practice",
];

/// Deterministic verbose answer padded to the profile's token length.
pub fn cloud_respond(query: &str, profile: VerbosityProfile, tok: &dyn Tokenizer) -> Observation {
    let mut text = String::new();
    let payload_for = |t: &str| json!({"status": "success", "response": t});
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(query.as_bytes()));
    let mut words_in_sentence = 0;
    let mut sentence_len = rng.gen_range(8..16);
    // Words are added in batches of half the remaining gap so the payload is
    // recounted a logarithmic number of times rather than once per word.
    loop {
        let count = tok.count_tokens(&payload_for(&text).to_string());
        if count >= profile.target_tokens {
            break;
        }
        let remaining = profile.target_tokens - count;
        for _ in 0..(remaining / 2).max(1) {
            let word = FILLER.choose(&mut rng).expect("non-empty");
            if words_in_sentence >= sentence_len && remaining > 3 {
                text.push_str(". ");
                let mut cap = word.to_string();
                cap[..1].make_ascii_uppercase();
                text.push_str(&cap);
                words_in_sentence = 1;
                sentence_len = rng.gen_range(8..16);
            } else {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(word);
                words_in_sentence += 1;
            }
        }
    }
    Observation::ok("", payload_for(&text))
}

fn str_arg<'a>(args: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    args.get(key).and_then(Value::as_str)
}

/// Success echo with optional per-operation parameter applicability.
///
/// Config: `{"selector": "action", "applicable": {"op": ["param", ...]},
/// "result": {...}}`. Parameters listed for no operation are always allowed.
struct GenericHandler {
    selector: Option<String>,
    applicable: BTreeMap<String, Vec<String>>,
    result: Map<String, Value>,
}

impl GenericHandler {
    fn from_config(config: &Value) -> Result<Self, String> {
        let selector = config
            .get("selector")
            .and_then(Value::as_str)
            .map(str::to_string);
        let applicable = match config.get("applicable") {
            None => BTreeMap::new(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| e.to_string())?,
        };
        let result = match config.get("result") {
            None => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err("result must be an object".into()),
        };
        Ok(Self {
            selector,
            applicable,
            result,
        })
    }
}

impl ToolHandler for GenericHandler {
    fn handle(
        &self,
        schema: &ToolSchema,
        args: &Map<String, Value>,
        _state: &mut ToolState,
    ) -> HandlerResult {
        let op = self
            .selector
            .as_deref()
            .and_then(|s| str_arg(args, s))
            .map(str::to_string);
        if let (Some(sel), Some(op)) = (self.selector.as_deref(), op.as_deref()) {
            if let Some(allowed) = self.applicable.get(op) {
                let restricted: Vec<&String> = self.applicable.values().flatten().collect();
                for key in args.keys() {
                    if key != sel && restricted.contains(&key) && !allowed.contains(key) {
                        return Err(format!(
                            "Invalid request. The '{key}' parameter is not applicable for '{op}'."
                        ));
                    }
                }
            } else if !self.applicable.is_empty() {
                return Err(format!(
                    "Invalid request. Unsupported {sel} '{op}' for '{}'.",
                    schema.name
                ));
            }
        }
        let mut out = Map::new();
        out.insert("status".into(), json!("success"));
        if let Some(op) = op {
            out.insert(self.selector.clone().unwrap_or_default(), json!(op));
        }
        for (k, v) in &self.result {
            out.insert(k.clone(), v.clone());
        }
        Ok(Value::Object(out))
    }
}

/// IT support tickets with ids `IT7390`, `IT7391`, ...
struct TicketHandler;

impl ToolHandler for TicketHandler {
    fn handle(
        &self,
        _schema: &ToolSchema,
        args: &Map<String, Value>,
        state: &mut ToolState,
    ) -> HandlerResult {
        let action = str_arg(args, "action").unwrap_or("create_ticket");
        match action {
            "create_ticket" => {
                let id = format!("IT{}", 7390 + state.tickets.len());
                let ticket = json!({
                    "ticket_id": id,
                    "issue": str_arg(args, "issue_description").unwrap_or("unspecified"),
                    "priority": str_arg(args, "priority").unwrap_or("normal"),
                    "ticket_status": "open",
                });
                state.tickets.insert(id.clone(), ticket);
                Ok(
                    json!({"status": "success", "ticket_id": id, "action": action, "ticket_status": "open"}),
                )
            }
            "check_ticket_status" | "close_ticket" | "update_ticket" => {
                let id = str_arg(args, "ticket_id")
                    .ok_or_else(|| format!("Invalid request. '{action}' requires 'ticket_id'."))?;
                let ticket = state
                    .tickets
                    .get_mut(id)
                    .ok_or_else(|| format!("Ticket '{id}' not found."))?;
                if action == "close_ticket" {
                    ticket["ticket_status"] = json!("closed");
                }
                if let Some(p) = str_arg(args, "priority") {
                    ticket["priority"] = json!(p);
                }
                let mut out = json!({"status": "success", "action": action});
                for (k, v) in ticket.as_object().into_iter().flatten() {
                    out[k] = v.clone();
                }
                Ok(out)
            }
            other => Err(format!("Invalid request. Unknown action '{other}'.")),
        }
    }
}

struct TimerHandler;

impl ToolHandler for TimerHandler {
    fn handle(
        &self,
        _schema: &ToolSchema,
        args: &Map<String, Value>,
        state: &mut ToolState,
    ) -> HandlerResult {
        let secs = args
            .get("duration_seconds")
            .and_then(Value::as_i64)
            .unwrap_or_default();
        if secs <= 0 {
            return Err("Invalid request. 'duration_seconds' must be positive.".into());
        }
        state.timers += 1;
        let mut out = json!({"status": "success", "timer_id": format!("timer_{}", state.timers), "duration_seconds": secs});
        if let Some(name) = str_arg(args, "timer_name") {
            out["timer_name"] = json!(name);
        }
        Ok(out)
    }
}

struct CloudHandler {
    profile: VerbosityProfile,
    tokenizer: Arc<dyn Tokenizer>,
}

impl ToolHandler for CloudHandler {
    fn handle(
        &self,
        _schema: &ToolSchema,
        args: &Map<String, Value>,
        state: &mut ToolState,
    ) -> HandlerResult {
        let query = str_arg(args, "user_query_context").unwrap_or_default();
        let profile = state.cloud_profile.unwrap_or(self.profile);
        Ok(cloud_respond(query, profile, self.tokenizer.as_ref()).payload)
    }
}

pub struct HandlerContext<'a> {
    pub config: &'a Value,
    pub tokenizer: Arc<dyn Tokenizer>,
}

type HandlerFactory = fn(&HandlerContext<'_>) -> Result<Box<dyn ToolHandler>, String>;

/// Built-in handlers, by name.
pub struct HandlerCatalog {
    factories: BTreeMap<&'static str, HandlerFactory>,
}

impl Default for HandlerCatalog {
    fn default() -> Self {
        let mut factories: BTreeMap<&'static str, HandlerFactory> = BTreeMap::new();
        factories.insert("generic", |ctx| {
            Ok(Box::new(GenericHandler::from_config(ctx.config)?) as Box<dyn ToolHandler>)
        });
        factories.insert("it_ticket", |_| {
            Ok(Box::new(TicketHandler) as Box<dyn ToolHandler>)
        });
        factories.insert("timer", |_| {
            Ok(Box::new(TimerHandler) as Box<dyn ToolHandler>)
        });
        factories.insert("cloud", |ctx| {
            let target = ctx
                .config
                .get("target_tokens")
                .and_then(Value::as_u64)
                .map_or(VerbosityProfile::DEFAULT.target_tokens, |n| n as usize);
            Ok(Box::new(CloudHandler {
                profile: VerbosityProfile {
                    target_tokens: target,
                },
                tokenizer: ctx.tokenizer.clone(),
            }) as Box<dyn ToolHandler>)
        });
        Self { factories }
    }
}

impl HandlerCatalog {
    pub fn register(&mut self, name: &'static str, factory: HandlerFactory) {
        self.factories.insert(name, factory);
    }

    pub fn build(
        &self,
        name: &str,
        ctx: &HandlerContext<'_>,
    ) -> Result<Box<dyn ToolHandler>, ToolEnvError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| ToolEnvError::UnknownHandler(name.to_string()))?;
        factory(ctx).map_err(|reason| ToolEnvError::HandlerConfig {
            handler: name.to_string(),
            reason,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    #[serde(default = "default_handler")]
    pub handler: String,
    #[serde(default)]
    pub handler_config: Value,
}

fn default_handler() -> String {
    "generic".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub id: String,
    pub cloud_tool_id: String,
    pub tools: Vec<ManifestEntry>,
}

pub struct RegisteredTool {
    pub schema: ToolSchema,
    pub handler_name: String,
    handler: Box<dyn ToolHandler>,
}

pub struct ToolRegistry {
    id: String,
    tools: Vec<RegisteredTool>,
    by_id: HashMap<String, usize>,
    by_name: HashMap<String, usize>,
    cloud_tool_id: String,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("id", &self.id)
            .field("tools", &self.tools.len())
            .field("cloud_tool_id", &self.cloud_tool_id)
            .finish()
    }
}

/// JSON type-kind check used before a handler runs.
fn type_matches(kind: &str, v: &Value) -> bool {
    match kind {
        "string" => v.is_string(),
        "integer" => v.is_i64() || v.is_u64(),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        "null" => v.is_null(),
        _ => true,
    }
}

/// Checks required-parameter presence, parameter names and JSON type kinds.
pub fn validate_arguments(schema: &ToolSchema, args: &Map<String, Value>) -> Result<(), String> {
    for req in schema.required() {
        if !args.contains_key(req) {
            return Err(format!("missing required parameter: {req}"));
        }
    }
    let props = schema.properties();
    for (key, value) in args {
        let Some(spec) = props.and_then(|p| p.get(key)) else {
            return Err(format!(
                "Invalid request. The '{key}' parameter is not applicable for '{}'.",
                schema.name
            ));
        };
        if let Some(kind) = spec.get("type").and_then(Value::as_str) {
            if !type_matches(kind, value) {
                return Err(format!(
                    "invalid type for parameter '{key}': expected {kind}"
                ));
            }
        }
    }
    Ok(())
}

impl ToolRegistry {
    pub fn builder(id: impl Into<String>) -> RegistryBuilder {
        RegistryBuilder {
            id: id.into(),
            tools: Vec::new(),
        }
    }

    /// Loads a manifest whose schema files are resolved by `read_file`.
    pub fn from_manifest_with<F>(
        manifest: &RegistryManifest,
        catalog: &HandlerCatalog,
        tokenizer: Arc<dyn Tokenizer>,
        mut read_file: F,
    ) -> Result<Self, ToolEnvError>
    where
        F: FnMut(&str) -> Result<String, ToolEnvError>,
    {
        let mut builder = Self::builder(&manifest.id);
        for entry in &manifest.tools {
            let text = read_file(&entry.file)?;
            let schema = schema::parse_schema_text(&text)?.with_id(&entry.id);
            let handler = catalog.build(
                &entry.handler,
                &HandlerContext {
                    config: &entry.handler_config,
                    tokenizer: tokenizer.clone(),
                },
            )?;
            builder = builder.tool(schema, &entry.handler, handler);
        }
        builder.build(&manifest.cloud_tool_id)
    }

    pub fn load(
        path: &Path,
        catalog: &HandlerCatalog,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Result<Self, ToolEnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolEnvError::Manifest(format!("{}: {e}", path.display())))?;
        let manifest: RegistryManifest =
            serde_json::from_str(&text).map_err(|e| ToolEnvError::Manifest(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest_with(&manifest, catalog, tokenizer, |file| {
            std::fs::read_to_string(dir.join(file))
                .map_err(|e| ToolEnvError::Manifest(format!("{file}: {e}")))
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn cloud_tool_id(&self) -> &str {
        &self.cloud_tool_id
    }

    pub fn cloud_tool_name(&self) -> &str {
        &self.tools[self.by_id[&self.cloud_tool_id]].schema.name
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn schemas(&self) -> impl Iterator<Item = &ToolSchema> {
        self.tools.iter().map(|t| &t.schema)
    }

    pub fn schemas_vec(&self) -> Vec<ToolSchema> {
        self.schemas().cloned().collect()
    }

    pub fn by_id(&self, id: &str) -> Option<&ToolSchema> {
        self.by_id.get(id).map(|&i| &self.tools[i].schema)
    }

    pub fn by_name(&self, name: &str) -> Option<&ToolSchema> {
        self.by_name.get(name).map(|&i| &self.tools[i].schema)
    }

    pub fn handler_name(&self, id: &str) -> Option<&str> {
        self.by_id
            .get(id)
            .map(|&i| self.tools[i].handler_name.as_str())
    }

    /// Validates and runs a call. Only a registry miss is an error.
    pub fn invoke(
        &self,
        name: &str,
        args: &Map<String, Value>,
        state: &mut ToolState,
    ) -> Result<Observation, ToolEnvError> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| ToolEnvError::UnknownTool(name.to_string()))?;
        let tool = &self.tools[idx];
        if let Err(msg) = validate_arguments(&tool.schema, args) {
            return Ok(Observation::failure(&tool.schema.id, msg));
        }
        Ok(match tool.handler.handle(&tool.schema, args, state) {
            Ok(payload) => Observation::ok(&tool.schema.id, payload),
            Err(msg) => Observation::failure(&tool.schema.id, msg),
        })
    }
}

pub struct RegistryBuilder {
    id: String,
    tools: Vec<RegisteredTool>,
}

impl RegistryBuilder {
    pub fn tool(
        mut self,
        schema: ToolSchema,
        handler_name: &str,
        handler: Box<dyn ToolHandler>,
    ) -> Self {
        self.tools.push(RegisteredTool {
            schema,
            handler_name: handler_name.to_string(),
            handler,
        });
        self
    }

    pub fn build(self, cloud_tool_id: &str) -> Result<ToolRegistry, ToolEnvError> {
        let mut by_id = HashMap::new();
        let mut by_name = HashMap::new();
        for (i, t) in self.tools.iter().enumerate() {
            if by_id.insert(t.schema.id.clone(), i).is_some() {
                return Err(SchemaError::DuplicateToolId(t.schema.id.clone()).into());
            }
            if by_name.insert(t.schema.name.clone(), i).is_some() {
                return Err(ToolEnvError::Manifest(format!(
                    "duplicate tool name '{}'",
                    t.schema.name
                )));
            }
        }
        if !by_id.contains_key(cloud_tool_id) {
            return Err(ToolEnvError::MissingCloudTool(cloud_tool_id.to_string()));
        }
        Ok(ToolRegistry {
            id: self.id,
            tools: self.tools,
            by_id,
            by_name,
            cloud_tool_id: cloud_tool_id.to_string(),
        })
    }
}
