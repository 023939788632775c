//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

use ctxagent_core::schema::ToolSchema;
use ctxagent_core::tokenizer::Tokenizer;

const WORDS: &[&str] = &[
    "timer",
    "ticket",
    "status",
    "open",
    "IT7390",
    "wifi",
    "the",
    "a",
    "x",
    "42",
    "naïve",
    "日本",
    "duration_seconds",
    "ok",
    "error",
];
const SYMBOLS: &[&str] = &[
    "{",
    "}",
    "\"",
    ":",
    ",",
    ".",
    "<|im_end|>",
    "\n",
    " ",
    "  ",
    "\t",
    "#",
    "'",
    "\\",
    "-",
    "é",
];

/// Short random text mixing words, symbols and whitespace.
pub fn random_text<R: Rng>(rng: &mut R, max_pieces: usize) -> String {
    let n = rng.gen_range(0..=max_pieces);
    let mut out = String::new();
    for _ in 0..n {
        let pool = if rng.gen_bool(0.6) { WORDS } else { SYMBOLS };
        out.push_str(pool.choose(rng).unwrap());
        if rng.gen_bool(0.4) {
            out.push(' ');
        }
    }
    out
}

#[derive(Debug, Clone)]
pub enum CacheOp {
    Extend(String),
    Rewind,
    Commit(String),
}

/// Rebuilds the prompt text from the base and the full event list, with no
/// incremental state.
pub fn stateless_prompt(base: &str, ops: &[CacheOp]) -> (String, String) {
    let permanent: String = std::iter::once(base.to_string())
        .chain(ops.iter().filter_map(|op| match op {
            CacheOp::Commit(t) => Some(t.clone()),
            _ => None,
        }))
        .collect();
    let last_rewind = ops
        .iter()
        .rposition(|op| matches!(op, CacheOp::Rewind))
        .map_or(0, |i| i + 1);
    let ephemeral: String = ops[last_rewind..]
        .iter()
        .filter_map(|op| match op {
            CacheOp::Extend(t) => Some(t.as_str()),
            _ => None,
        })
        .collect();
    (permanent, ephemeral)
}

pub fn random_ops<R: Rng>(rng: &mut R, len: usize) -> Vec<CacheOp> {
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0..=4 => CacheOp::Extend(random_text(rng, 8)),
            5..=6 => CacheOp::Rewind,
            _ => CacheOp::Commit(random_text(rng, 6)),
        })
        .collect()
}

/// Maximum number of made calls that can be paired one-to-one with truth
/// slots, by exhaustive search. `None` marks a call that may never match.
pub fn brute_force_matches(made: &[Option<String>], truth: &[String]) -> usize {
    fn go(i: usize, made: &[Option<String>], truth: &[String], used: &mut [bool]) -> usize {
        if i == made.len() {
            return 0;
        }
        let mut best = go(i + 1, made, truth, used);
        if let Some(m) = &made[i] {
            for j in 0..truth.len() {
                if !used[j] && &truth[j] == m {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, made, truth, used));
                    used[j] = false;
                }
            }
        }
        best
    }
    go(0, made, truth, &mut vec![false; truth.len()])
}

const TYPES: &[&str] = &["string", "integer", "number", "boolean", "array", "object"];

fn random_ident<R: Rng>(rng: &mut R) -> String {
    let len = rng.gen_range(1..14);
    let mut s = String::new();
    s.push(rng.gen_range(b'a'..=b'z') as char);
    for _ in 1..len {
        let c = *b"abcdefghijklmnopqrstuvwxyz_0123456789"
            .choose(rng)
            .unwrap();
        s.push(c as char);
    }
    s
}

/// A random but well-formed function schema in the standard envelope.
pub fn random_schema_value<R: Rng>(rng: &mut R) -> Value {
    let mut props = Map::new();
    for _ in 0..rng.gen_range(0..7) {
        let ty = *TYPES.choose(rng).unwrap();
        let mut p = Map::new();
        p.insert("type".into(), json!(ty));
        p.insert("description".into(), json!(random_text(rng, 10)));
        if ty == "string" && rng.gen_bool(0.3) {
            p.insert("enum".into(), json!(["a", "b c", "d\"e"]));
        }
        if ty == "array" {
            p.insert("items".into(), json!({"type": "string"}));
        }
        props.insert(random_ident(rng), Value::Object(p));
    }
    let names: Vec<String> = props.keys().cloned().collect();
    let required: Vec<String> = names.into_iter().filter(|_| rng.gen_bool(0.5)).collect();
    let mut params = Map::new();
    if rng.gen_bool(0.9) {
        params.insert("type".into(), json!("object"));
        params.insert("properties".into(), Value::Object(props));
        if !required.is_empty() || rng.gen_bool(0.5) {
            params.insert("required".into(), json!(required));
        }
    }
    let mut function = Map::new();
    function.insert("name".into(), json!(random_ident(rng)));
    function.insert("description".into(), json!(random_text(rng, 12)));
    if rng.gen_bool(0.2) {
        function.insert("x-extra".into(), json!({"ignored": true}));
    }
    if !params.is_empty() || rng.gen_bool(0.5) {
        function.insert("parameters".into(), Value::Object(params));
    }
    json!({"type": "function", "function": Value::Object(function)})
}

/// Tool section written out by hand from the compact lines.
pub fn full_tools_section(schemas: &[ToolSchema], tok: &dyn Tokenizer) -> String {
    let lines: Vec<String> = schemas
        .iter()
        .map(|s| ctxagent_core::schema::minify(s, tok).text)
        .collect();
    format!("<tools>\n{}\n</tools>", lines.join("\n"))
}
