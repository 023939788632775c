//! Function-calling schemas: parsing, the canonical compact serialization,
//! the names-only tool bank, and token budgets per prompt-construction mode.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::tokenizer::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("missing field '{0}'")]
    MissingField(&'static str),
    #[error("malformed parameters: {0}")]
    MalformedParameters(String),
    #[error("schema must be a JSON object")]
    NotAnObject,
    #[error("invalid function name '{0}'")]
    InvalidName(String),
    #[error("duplicate tool id '{0}'")]
    DuplicateToolId(String),
    #[error("tool list is empty")]
    EmptyRegistry,
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A parsed function definition. Only the fields needed to invoke the
/// function survive parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub id: String,
    pub name: String,
    pub description: String,
    pub parameters: Map<String, Value>,
}

impl ToolSchema {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Declared parameter properties, empty when the schema has none.
    pub fn properties(&self) -> Option<&Map<String, Value>> {
        self.parameters.get("properties").and_then(Value::as_object)
    }

    pub fn required(&self) -> impl Iterator<Item = &str> {
        self.parameters
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
    }

    /// The `{"type":"function","function":{...}}` envelope with the canonical
    /// key order.
    fn envelope(&self) -> Value {
        let mut function = Map::new();
        function.insert("name".into(), Value::String(self.name.clone()));
        function.insert(
            "description".into(),
            Value::String(self.description.clone()),
        );
        function.insert("parameters".into(), Value::Object(self.parameters.clone()));
        let mut outer = Map::new();
        outer.insert("type".into(), Value::String("function".into()));
        outer.insert("function".into(), Value::Object(function));
        Value::Object(outer)
    }

    /// Two-space pretty-printed standard form.
    pub fn standard_text(&self) -> String {
        serde_json::to_string_pretty(&self.envelope()).expect("serializing a Value cannot fail")
    }

    pub fn card(&self) -> ToolCard {
        ToolCard {
            id: self.id.clone(),
            name: self.name.clone(),
            description: self.description.clone(),
        }
    }
}

/// Canonical single-line serialization of a [`ToolSchema`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompactSchema {
    pub text: String,
    pub source_id: String,
    pub byte_len: usize,
    pub token_len: usize,
}

/// Name plus description, as listed in the tool bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCard {
    pub id: String,
    pub name: String,
    pub description: String,
}

impl ToolCard {
    /// Truncates the description to at most `max_chars` characters.
    pub fn truncated(mut self, max_chars: Option<usize>) -> Self {
        if let Some(max) = max_chars {
            if let Some((idx, _)) = self.description.char_indices().nth(max) {
                self.description.truncate(idx);
            }
        }
        self
    }
}

fn validate_parameters(params: &Map<String, Value>) -> Result<(), SchemaError> {
    if let Some(kind) = params.get("type") {
        if kind.as_str() != Some("object") {
            return Err(SchemaError::MalformedParameters(format!(
                "parameters type must be \"object\", got {kind}"
            )));
        }
    }
    let props = match params.get("properties") {
        None => None,
        Some(Value::Object(p)) => Some(p),
        Some(_) => {
            return Err(SchemaError::MalformedParameters(
                "properties must be an object".into(),
            ))
        }
    };
    match params.get("required") {
        None => Ok(()),
        Some(Value::Array(items)) => {
            for item in items {
                let Some(name) = item.as_str() else {
                    return Err(SchemaError::MalformedParameters(
                        "required entries must be strings".into(),
                    ));
                };
                if !props.is_some_and(|p| p.contains_key(name)) {
                    return Err(SchemaError::MalformedParameters(format!(
                        "required parameter '{name}' is not a declared property"
                    )));
                }
            }
            Ok(())
        }
        Some(_) => Err(SchemaError::MalformedParameters(
            "required must be an array".into(),
        )),
    }
}

/// Parses either a `{"type":"function","function":{...}}` envelope or a bare
/// function object. Everything except name, description and parameters is
/// dropped. The id defaults to the function name.
pub fn parse_tool_schema(raw: &Value) -> Result<ToolSchema, SchemaError> {
    let obj = raw.as_object().ok_or(SchemaError::NotAnObject)?;
    let function = match obj.get("function") {
        Some(Value::Object(f)) => f,
        Some(_) => return Err(SchemaError::NotAnObject),
        None => obj,
    };
    let name = function
        .get("name")
        .and_then(Value::as_str)
        .ok_or(SchemaError::MissingField("name"))?;
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(SchemaError::InvalidName(name.to_string()));
    }
    let description = function
        .get("description")
        .and_then(Value::as_str)
        .unwrap_or_default();
    let parameters = match function.get("parameters") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(p)) => p.clone(),
        Some(other) => {
            return Err(SchemaError::MalformedParameters(format!(
                "expected an object, got {other}"
            )))
        }
    };
    validate_parameters(&parameters)?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .unwrap_or(name)
        .to_string();
    Ok(ToolSchema {
        id,
        name: name.to_string(),
        description: description.to_string(),
        parameters,
    })
}

/// Parses compact (or any JSON) schema text.
pub fn parse_schema_text(text: &str) -> Result<ToolSchema, SchemaError> {
    let value: Value = serde_json::from_str(text)?;
    parse_tool_schema(&value)
}

/// Reads a schema file holding one schema or an array of schemas.
pub fn load_schema_file(path: &Path) -> Result<Vec<ToolSchema>, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text)?;
    match value {
        Value::Array(items) => items.iter().map(parse_tool_schema).collect(),
        other => Ok(vec![parse_tool_schema(&other)?]),
    }
}

pub fn minify(schema: &ToolSchema, tok: &dyn Tokenizer) -> CompactSchema {
    let text = serde_json::to_string(&schema.envelope()).expect("serializing a Value cannot fail");
    CompactSchema {
        byte_len: text.len(),
        token_len: tok.count_tokens(&text),
        source_id: schema.id.clone(),
        text,
    }
}

/// One `name: description` line per tool, in the given order.
pub fn tool_bank_text(cards: &[ToolCard]) -> Result<String, SchemaError> {
    if cards.is_empty() {
        return Err(SchemaError::EmptyRegistry);
    }
    let mut seen = HashSet::new();
    let mut out = String::new();
    for (i, card) in cards.iter().enumerate() {
        if !seen.insert(card.id.as_str()) {
            return Err(SchemaError::DuplicateToolId(card.id.clone()));
        }
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{}: {}", card.name, card.description);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    FullStandard,
    FullCompact,
    NamesOnly,
}

impl std::str::FromStr for BudgetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-standard" => Ok(Self::FullStandard),
            "full-compact" => Ok(Self::FullCompact),
            "names-only" => Ok(Self::NamesOnly),
            other => Err(format!(
                "unknown budget mode '{other}' (expected full-standard, full-compact or names-only)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub id: String,
    pub name: String,
    pub tokens: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenBudgetReport {
    pub mode: BudgetMode,
    pub tokenizer: String,
    pub tools: Vec<BudgetEntry>,
    /// Tokens of the newline-joined block as it would appear in a prompt.
    pub total_tokens: usize,
    pub total_bytes: usize,
}

impl TokenBudgetReport {
    pub fn to_table(&self) -> String {
        let id_w = self
            .tools
            .iter()
            .map(|e| e.id.len())
            .max()
            .unwrap_or(2)
            .max(2);
        let name_w = self
            .tools
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<id_w$}  {:<name_w$}  {:>8}  {:>8}",
            "id", "name", "tokens", "bytes"
        );
        for e in &self.tools {
            let _ = writeln!(
                out,
                "{:<id_w$}  {:<name_w$}  {:>8}  {:>8}",
                e.id, e.name, e.tokens, e.bytes
            );
        }
        let _ = writeln!(
            out,
            "{:<id_w$}  {:<name_w$}  {:>8}  {:>8}",
            "TOTAL", "", self.total_tokens, self.total_bytes
        );
        out
    }
}

/// Renders the tool section text for `mode`, one tool per line.
pub fn render_block(schemas: &[ToolSchema], mode: BudgetMode) -> Vec<String> {
    schemas
        .iter()
        .map(|s| match mode {
            BudgetMode::FullStandard => s.standard_text(),
            BudgetMode::FullCompact => {
                serde_json::to_string(&s.envelope()).expect("serializing a Value cannot fail")
            }
            BudgetMode::NamesOnly => format!("{}: {}", s.name, s.description),
        })
        .collect()
}

pub fn registry_budget(
    schemas: &[ToolSchema],
    mode: BudgetMode,
    tok: &dyn Tokenizer,
) -> TokenBudgetReport {
    let pieces = render_block(schemas, mode);
    let tools = schemas
        .iter()
        .zip(&pieces)
        .map(|(s, text)| BudgetEntry {
            id: s.id.clone(),
            name: s.name.clone(),
            tokens: tok.count_tokens(text),
            bytes: text.len(),
        })
        .collect();
    let block = pieces.join("\n");
    TokenBudgetReport {
        mode,
        tokenizer: tok.name().to_string(),
        tools,
        total_tokens: tok.count_tokens(&block),
        total_bytes: block.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{ApproxBpeTokenizer, TokenizerRegistry};
    use proptest::prelude::*;
    use serde_json::json;

    pub(crate) const SET_TIMER_PRETTY: &str = r#"{
  "type": "function",
  "function": {
    "name": "set_timer",
    "description": "Sets a timer for a specified duration.",
    "parameters": {
      "type": "object",
      "properties": {
        "duration_seconds": {
          "type": "integer",
          "description": "The duration of the timer in seconds."
        },
        "timer_name": {
          "type": "string",
          "description": "An optional name for the timer."
        }
      },
      "required": ["duration_seconds"]
    }
  }
}"#;

    const SET_TIMER_COMPACT: &str = r#"{"type":"function","function":{"name":"set_timer","description":"Sets a timer for a specified duration.","parameters":{"type":"object","properties":{"duration_seconds":{"type":"integer","description":"The duration of the timer in seconds."},"timer_name":{"type":"string","description":"An optional name for the timer."}},"required":["duration_seconds"]}}}"#;

    #[test]
    fn set_timer_minifies_to_the_reference_string() {
        let s = parse_schema_text(SET_TIMER_PRETTY).unwrap();
        assert_eq!(s.name, "set_timer");
        assert_eq!(s.description, "Sets a timer for a specified duration.");
        assert_eq!(s.required().collect::<Vec<_>>(), vec!["duration_seconds"]);
        let c = minify(&s, &ApproxBpeTokenizer);
        assert_eq!(c.text, SET_TIMER_COMPACT);
        assert_eq!(c.byte_len, SET_TIMER_COMPACT.len());
        assert!(!c.text.contains('\n'));
    }

    #[test]
    fn missing_parameters_become_empty_object() {
        let s = parse_tool_schema(
            &json!({"type":"function","function":{"name":"f","description":"d"}}),
        )
        .unwrap();
        assert!(s.parameters.is_empty());
        assert_eq!(
            minify(&s, &ApproxBpeTokenizer).text,
            r#"{"type":"function","function":{"name":"f","description":"d","parameters":{}}}"#
        );
    }

    #[test]
    fn non_essential_fields_are_dropped() {
        let raw = json!({"type":"function","function":{
            "name":"f","description":"d","examples":[{"x":1}],"deprecated":false,"x-vendor":"acme",
            "parameters":{"type":"object","properties":{"x":{"type":"integer","enum":[1,2]}}}}});
        let s = parse_tool_schema(&raw).unwrap();
        let expected = ToolSchema {
            id: "f".into(),
            name: "f".into(),
            description: "d".into(),
            parameters: json!({"type":"object","properties":{"x":{"type":"integer","enum":[1,2]}}})
                .as_object()
                .unwrap()
                .clone(),
        };
        assert_eq!(s, expected);
        let text = minify(&s, &ApproxBpeTokenizer).text;
        assert!(!text.contains("examples") && !text.contains("x-vendor"));
        assert!(text.contains(r#""enum":[1,2]"#));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_tool_schema(&json!({"function":{"description":"d"}})),
            Err(SchemaError::MissingField("name"))
        ));
        assert!(matches!(
            parse_tool_schema(&json!({"name":"f","parameters":"oops"})),
            Err(SchemaError::MalformedParameters(_))
        ));
        assert!(matches!(
            parse_tool_schema(&json!({"name":"f","parameters":{"type":"array"}})),
            Err(SchemaError::MalformedParameters(_))
        ));
        assert!(matches!(
            parse_tool_schema(
                &json!({"name":"f","parameters":{"type":"object","properties":{},"required":["x"]}})
            ),
            Err(SchemaError::MalformedParameters(_))
        ));
        assert!(matches!(
            parse_tool_schema(&json!({"name":"two words"})),
            Err(SchemaError::InvalidName(_))
        ));
        assert!(matches!(
            parse_tool_schema(&json!([1])),
            Err(SchemaError::NotAnObject)
        ));
    }

    #[test]
    fn non_ascii_stays_raw_utf8() {
        let s = parse_tool_schema(&json!({"name":"f","description":"Café ☕ naïve"})).unwrap();
        let text = minify(&s, &ApproxBpeTokenizer).text;
        assert!(text.contains("Café ☕ naïve"));
        assert!(!text.contains("\\u"));
    }

    #[test]
    fn tool_bank_lines() {
        let one = [ToolCard {
            id: "t".into(),
            name: "Timer".into(),
            description: "Sets timers".into(),
        }];
        assert_eq!(tool_bank_text(&one).unwrap(), "Timer: Sets timers");
        let two = [
            one[0].clone(),
            ToolCard {
                id: "a".into(),
                name: "Alarm".into(),
                description: "Sets alarms".into(),
            },
        ];
        assert_eq!(
            tool_bank_text(&two).unwrap(),
            "Timer: Sets timers\nAlarm: Sets alarms"
        );
        let dup = [one[0].clone(), one[0].clone()];
        assert!(matches!(
            tool_bank_text(&dup),
            Err(SchemaError::DuplicateToolId(_))
        ));
        assert!(matches!(
            tool_bank_text(&[]),
            Err(SchemaError::EmptyRegistry)
        ));
    }

    #[test]
    fn card_truncation() {
        let c = ToolCard {
            id: "x".into(),
            name: "x".into(),
            description: "abcdef".into(),
        };
        assert_eq!(c.clone().truncated(Some(3)).description, "abc");
        assert_eq!(c.clone().truncated(Some(30)).description, "abcdef");
        assert_eq!(c.truncated(None).description, "abcdef");
    }

    #[test]
    fn one_tool_compact_budget_is_smaller() {
        let s = parse_schema_text(SET_TIMER_PRETTY).unwrap();
        let tok = ApproxBpeTokenizer;
        let std = registry_budget(std::slice::from_ref(&s), BudgetMode::FullStandard, &tok);
        let compact = registry_budget(std::slice::from_ref(&s), BudgetMode::FullCompact, &tok);
        assert!(compact.total_tokens < std.total_tokens);
        assert!(std.to_table().contains("set_timer"));
    }

    fn arb_schema() -> impl Strategy<Value = ToolSchema> {
        let prop_type = prop_oneof![
            Just("string"),
            Just("integer"),
            Just("number"),
            Just("boolean"),
            Just("array")
        ];
        let prop = (
            "[a-z][a-z_]{0,11}",
            prop_type,
            "[ -~éü☕]{0,30}",
            any::<bool>(),
        );
        (
            "[a-z][a-z0-9_]{0,15}",
            "[ -~éü☕\\n\\t]{0,60}",
            proptest::collection::vec(prop, 0..6),
        )
            .prop_map(|(name, description, props)| {
                let mut properties = Map::new();
                let mut required = Vec::new();
                for (pname, ptype, pdesc, req) in props {
                    if properties.contains_key(&pname) {
                        continue;
                    }
                    let mut p = Map::new();
                    p.insert("type".into(), json!(ptype));
                    p.insert("description".into(), json!(pdesc));
                    if ptype == "array" {
                        p.insert("items".into(), json!({"type":"string"}));
                    }
                    properties.insert(pname.clone(), Value::Object(p));
                    if req {
                        required.push(json!(pname));
                    }
                }
                let mut parameters = Map::new();
                if !properties.is_empty() {
                    parameters.insert("type".into(), json!("object"));
                    parameters.insert("properties".into(), Value::Object(properties));
                    parameters.insert("required".into(), Value::Array(required));
                }
                ToolSchema {
                    id: name.clone(),
                    name,
                    description,
                    parameters,
                }
            })
    }

    proptest! {
        #[test]
        fn minify_round_trips_and_is_idempotent(s in arb_schema()) {
            let tok = ApproxBpeTokenizer;
            let c = minify(&s, &tok);
            prop_assert!(!c.text.contains('\n'));
            let back = parse_schema_text(&c.text).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(minify(&back, &tok).text, c.text);
        }

        #[test]
        fn compact_never_costs_more_than_standard(s in arb_schema()) {
            let reg = TokenizerRegistry::default();
            for name in reg.names() {
                let tok = reg.get(name).unwrap();
                let compact = minify(&s, tok.as_ref()).token_len;
                let standard = tok.count_tokens(&s.standard_text());
                prop_assert!(compact <= standard, "{name}: {compact} > {standard}");
            }
        }

        #[test]
        fn tool_bank_is_injective(
            a in proptest::collection::vec(("[a-z]{1,6}", "[a-z ]{0,10}"), 1..5),
            b in proptest::collection::vec(("[a-z]{1,6}", "[a-z ]{0,10}"), 1..5),
        ) {
            let cards = |v: &[(String, String)]| -> Vec<ToolCard> {
                v.iter().enumerate().map(|(i, (n, d))| ToolCard { id: i.to_string(), name: n.clone(), description: d.clone() }).collect()
            };
            if a != b {
                prop_assert_ne!(tool_bank_text(&cards(&a)).unwrap(), tool_bank_text(&cards(&b)).unwrap());
            }
        }
    }
}
