//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

// `!(x <= bound)` is deliberate: a NaN ratio must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use common::{brute_force_matches, random_ops, random_schema_value, stateless_prompt, CacheOp};
use ctxagent_core::backend::{Channel, MatchRule, Script, ScriptStep, ScriptedBackend};
use ctxagent_core::eval::{self, Category, EvalConfig, MatchMode};
use ctxagent_core::fixtures;
use ctxagent_core::kvcache::{AdapterId, CacheEventKind, CacheState};
use ctxagent_core::memory::CSO_PRIMING_LINE;
use ctxagent_core::schema::{self, BudgetMode};
use ctxagent_core::session::{StopReason, ToolCallRecord};
use ctxagent_core::tokenizer::default_tokenizer;
use ctxagent_core::toolenv::VerbosityProfile;
use ctxagent_core::turn::TurnKind;
use ctxagent_core::{AgentMode, Session, SessionConfig};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let took = started.elapsed();
    if took > limit {
        Err(format!("took {took:?}, limit {limit:?}"))
    } else {
        Ok(took)
    }
}

fn commit_lens(c: &CacheState) -> Vec<usize> {
    std::iter::once(c.history()[0].permanent_len)
        .chain(
            c.history()
                .iter()
                .filter(|e| e.kind == CacheEventKind::CommitDelta)
                .map(|e| e.permanent_len),
        )
        .collect()
}

fn walkthrough() -> Outcome {
    let started = Instant::now();
    let tok = default_tokenizer();
    let (mut s, backend) = fixtures::walkthrough::session().map_err(|e| e.to_string())?;
    let t1 = s
        .step_turn(fixtures::walkthrough::TURN_1)
        .map_err(|e| e.to_string())?;
    let exec_after_t1 = commit_lens(s.executor_cache());
    let track_after_t1 = commit_lens(s.tracker_cache());
    check!(
        exec_after_t1 == [1710, 1725, 1739],
        "executor ledger {exec_after_t1:?}"
    );
    check!(
        track_after_t1 == [206, 221, 235],
        "tracker ledger {track_after_t1:?}"
    );
    let ticket_in_t1 = t1
        .turns
        .iter()
        .any(|t| t.kind == TurnKind::Observation && t.content.contains("\"ticket_id\":\"IT7390\""));
    check!(ticket_in_t1, "turn 1 observation lacks IT7390");

    let marks = (
        s.executor_cache().history().len(),
        s.tracker_cache().history().len(),
    );
    let t2 = s
        .step_turn(fixtures::walkthrough::TURN_2)
        .map_err(|e| e.to_string())?;
    // The first rewind after Turn 1 restores the committed prefix.
    let rewind = |c: &CacheState, from: usize| {
        c.history()[from..]
            .iter()
            .find(|e| e.kind == CacheEventKind::Rewind)
            .map(|e| (e.permanent_len, e.ephemeral_len))
    };
    let (er, tr) = (
        rewind(s.executor_cache(), marks.0),
        rewind(s.tracker_cache(), marks.1),
    );
    check!(
        er == Some((1739, 0)) && tr == Some((235, 0)),
        "rewind state executor {er:?} tracker {tr:?}"
    );
    let call = t2
        .turns
        .iter()
        .find(|t| t.kind == TurnKind::ToolCall)
        .ok_or("no tool call in turn 2")?;
    let ticket = call.arguments.as_ref().and_then(|a| a.get("ticket_id"));
    check!(
        ticket == Some(&json!("IT7390")),
        "turn 2 ticket_id {ticket:?}"
    );

    // Byte-exact: the first Turn-2 executor prompt rebuilt by hand.
    let cfg = fixtures::walkthrough::config();
    let tools = common::full_tools_section(&fixtures::registry_12().schemas_vec(), tok.as_ref());
    let expected = format!(
        "<|im_start|>system\n{}\n{tools}\nThis is a current status of the conversation.\n{CSO_PRIMING_LINE}\nuser_goal: create_it_ticket\nissue: wifi outage\nticket_id: IT7390, status: open, priority: normal<|im_end|>\n<|im_start|>user\n{}<|im_end|>\n<|im_start|>assistant\n",
        cfg.executor_preamble.unwrap(),
        fixtures::walkthrough::TURN_2
    );
    let prompts: Vec<String> = backend
        .transcript()
        .into_iter()
        .filter(|e| e.channel == Channel::Executor)
        .map(|e| e.prompt)
        .collect();
    check!(prompts.len() == 4, "{} executor generations", prompts.len());
    check!(
        prompts[2] == expected,
        "turn 2 prompt differs from the hand-built prompt"
    );
    check!(
        call.input_context_tokens == Some(tok.count_tokens(&expected)),
        "recorded {:?} tokens, prompt has {}",
        call.input_context_tokens,
        tok.count_tokens(&expected)
    );
    let took = within(Duration::from_secs(1), started)?;
    Ok(format!(
        "executor 1710->1725->1739, tracker 206->221->235, rewind (1739, 235), ticket IT7390 ({took:?})"
    ))
}

const SET_TIMER_PRETTY: &str = r#"{
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

fn schema_compression() -> Outcome {
    let started = Instant::now();
    let tok = default_tokenizer();
    let schemas = fixtures::registry().schemas_vec();
    check!(schemas.len() == 19, "{} tools", schemas.len());
    let standard = schema::registry_budget(&schemas, BudgetMode::FullStandard, tok.as_ref());
    let compact = schema::registry_budget(&schemas, BudgetMode::FullCompact, tok.as_ref());
    let ratio = compact.total_tokens as f64 / standard.total_tokens as f64;
    check!(ratio <= 0.70, "compact/standard = {ratio:.3}");
    let timer = schema::parse_schema_text(SET_TIMER_PRETTY).map_err(|e| e.to_string())?;
    let minified = schema::minify(&timer, tok.as_ref()).text;
    check!(
        minified == SET_TIMER_COMPACT,
        "set_timer minified to {minified}"
    );
    let took = within(Duration::from_secs(1), started)?;
    Ok(format!(
        "compact {} / standard {} tokens = {ratio:.3}; set_timer exact ({took:?})",
        compact.total_tokens, standard.total_tokens
    ))
}

fn jit_ratio() -> Outcome {
    let tok = default_tokenizer();
    let schemas = fixtures::registry().schemas_vec();
    let names = schema::registry_budget(&schemas, BudgetMode::NamesOnly, tok.as_ref());
    let compact = schema::registry_budget(&schemas, BudgetMode::FullCompact, tok.as_ref());
    let ratio = names.total_tokens as f64 / compact.total_tokens as f64;
    check!(ratio <= 0.35, "names-only/compact = {ratio:.3}");

    // Same comparison on the whole initial executor prompt.
    let registry = Arc::new(fixtures::registry());
    let prompt_len = |mode: AgentMode| -> Result<usize, String> {
        let backend = Arc::new(ScriptedBackend::new(Script::new(Vec::new())));
        let s = Session::new(
            "p",
            SessionConfig::for_mode(mode),
            registry.clone(),
            backend,
            tok.clone(),
        )
        .map_err(|e| e.to_string())?;
        Ok(s.executor_cache().permanent_len())
    };
    let jit = prompt_len(AgentMode::TOOL_EFFICIENT)?;
    let full = prompt_len(AgentMode::BASELINE)?;
    let prompt_ratio = jit as f64 / full as f64;
    check!(
        prompt_ratio <= 0.35,
        "jit/full initial prompt = {prompt_ratio:.3}"
    );
    Ok(format!(
        "tool section {} / {} = {ratio:.3}; initial prompt {jit} / {full} = {prompt_ratio:.3}",
        names.total_tokens, compact.total_tokens
    ))
}

fn context_growth() -> Outcome {
    let started = Instant::now();
    let tok = default_tokenizer();
    let registry = Arc::new(fixtures::registry());
    let modes = [AgentMode::BASELINE, AgentMode::MEMORY_EFFICIENT];
    let base_cfg = EvalConfig::default();

    // 10 user turns of call + reply give 20 assistant turns per scenario.
    let multi = fixtures::multi_tool_suite(10, 10);
    let r = eval::run_suite(&multi, &modes, 3, registry.clone(), tok.clone(), &base_cfg);
    let g = |r: &eval::SuiteReport, cat, mode| r.group(cat, mode).cloned().ok_or("missing group");
    let mb = g(&r, Category::MultiTool, AgentMode::BASELINE)?;
    let mm = g(&r, Category::MultiTool, AgentMode::MEMORY_EFFICIENT)?;
    check!(
        mb.failed_runs + mm.failed_runs == 0,
        "failed multi-tool runs"
    );
    check!(
        mb.series.len() == 20,
        "multi-tool series has {} turns",
        mb.series.len()
    );
    check!(
        mm.slope <= mb.slope / 10.0,
        "multi-tool slope mem {:.2} vs baseline {:.2}",
        mm.slope,
        mb.slope
    );

    let cloud = fixtures::cloud_suite(10, 10);
    let cfg400 = EvalConfig {
        cloud_profile: Some(VerbosityProfile::DEFAULT),
        ..base_cfg.clone()
    };
    let r = eval::run_suite(&cloud, &modes, 3, registry.clone(), tok.clone(), &cfg400);
    let cb = g(&r, Category::CloudOnly, AgentMode::BASELINE)?;
    let cm = g(&r, Category::CloudOnly, AgentMode::MEMORY_EFFICIENT)?;
    check!(cb.failed_runs + cm.failed_runs == 0, "failed cloud runs");
    check!(
        cb.final_context >= 10.0 * cm.growth,
        "cloud 400: baseline final {:.0} vs mem growth {:.0}",
        cb.final_context,
        cm.growth
    );

    let cfg800 = EvalConfig {
        cloud_profile: Some(VerbosityProfile::VERBOSE),
        ..base_cfg
    };
    let r = eval::run_suite(&cloud, &modes, 3, registry, tok, &cfg800);
    let vb = g(&r, Category::CloudOnly, AgentMode::BASELINE)?;
    let vm = g(&r, Category::CloudOnly, AgentMode::MEMORY_EFFICIENT)?;
    let slope_ratio = vb.slope / vm.slope.max(f64::EPSILON);
    check!(
        slope_ratio >= 20.0,
        "cloud 800: slope ratio {slope_ratio:.1} (baseline {:.1}, mem {:.2})",
        vb.slope,
        vm.slope
    );
    let took = within(Duration::from_secs(10), started)?;
    Ok(format!(
        "multi-tool slope {:.1} vs {:.2} ({:.0}x); cloud-400 final {:.0} vs growth {:.0}; cloud-800 slope ratio {slope_ratio:.1} ({took:?})",
        mb.slope,
        mm.slope,
        mb.slope / mm.slope.max(f64::EPSILON),
        cb.final_context,
        cm.growth
    ))
}

fn replay_property() -> Outcome {
    let started = Instant::now();
    let tok = default_tokenizer();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let base = format!("<|im_start|>system\n{}", common::random_text(&mut rng, 10));
        let len = rng.gen_range(0..40);
        let ops = random_ops(&mut rng, len);
        let mut cache = CacheState::prime(AdapterId::Executor, &base, tok.as_ref())
            .map_err(|e| e.to_string())?;
        let mut last_perm = cache.permanent_len();
        for (i, op) in ops.iter().enumerate() {
            match op {
                CacheOp::Extend(t) => cache.extend_ephemeral(t, i as u32, tok.as_ref()),
                CacheOp::Commit(t) => cache.commit_delta(t, i as u32, tok.as_ref()),
                CacheOp::Rewind => {
                    let r = cache.rewind(i as u32).map(|_| ());
                    let snapshot = cache.clone();
                    cache.rewind(i as u32).map_err(|e| e.to_string())?;
                    check!(
                        cache == snapshot,
                        "case {case}: second rewind changed state"
                    );
                    r
                }
            }
            .map_err(|e| e.to_string())?;
            check!(
                cache.permanent_len() >= last_perm,
                "case {case}: permanent_len shrank"
            );
            last_perm = cache.permanent_len();
            let (perm, eph) = stateless_prompt(&base, &ops[..=i]);
            let full = cache.full_prompt_text().map_err(|e| e.to_string())?;
            check!(
                full == format!("{perm}{eph}"),
                "case {case} step {i}: prompt text differs"
            );
            check!(
                cache.ephemeral_len() == tok.count_tokens(&eph),
                "case {case} step {i}: ephemeral count"
            );
            check!(
                cache.permanent_len() >= tok.count_tokens(&perm),
                "case {case} step {i}: permanent count below recount"
            );
        }
    }
    let took = within(Duration::from_secs(5), started)?;
    Ok(format!("1000 event sequences ({took:?})"))
}

fn metrics_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids = ["agent_001", "agent_002", "agent_007", "agent_019"];
    for case in 0..500 {
        let truth: Vec<String> = if rng.gen_bool(0.1) {
            vec![String::new()]
        } else {
            (0..rng.gen_range(1..=6))
                .map(|_| ids[rng.gen_range(0..ids.len())].to_string())
                .collect()
        };
        let made: Vec<ToolCallRecord> = (0..rng.gen_range(0..=6))
            .map(|i| {
                let id = ids[rng.gen_range(0..ids.len())];
                ToolCallRecord {
                    assistant_turn: i + 1,
                    name: Some(id.into()),
                    tool_id: Some(id.into()),
                    arguments: None,
                    valid: rng.gen_bool(0.85),
                    has_required: rng.gen_bool(0.8),
                    success: true,
                }
            })
            .collect();
        let mode = if rng.gen_bool(0.5) {
            MatchMode::ToolId
        } else {
            MatchMode::Strict
        };
        let m = eval::compute_metrics(&made, &truth, mode);

        let (p, r) = if truth == [String::new()] {
            if made.is_empty() {
                (1.0, 1.0)
            } else {
                (0.0, 0.0)
            }
        } else {
            let eligible: Vec<Option<String>> = made
                .iter()
                .map(|c| {
                    let ok = c.valid && (mode == MatchMode::ToolId || c.has_required);
                    ok.then(|| c.tool_id.clone().unwrap())
                })
                .collect();
            let k = brute_force_matches(&eligible, &truth) as f64;
            let p = if made.is_empty() {
                0.0
            } else {
                k / made.len() as f64
            };
            (p, k / truth.len() as f64)
        };
        check!(
            m.precision == p && m.recall == r,
            "case {case}: got ({}, {}), oracle ({p}, {r})",
            m.precision,
            m.recall
        );
        check!((0.0..=1.0).contains(&m.f1), "case {case}: f1 {}", m.f1);
        check!(
            m.f1 <= p.max(r) + 1e-12 && m.f1 >= p.min(r) - 1e-12,
            "case {case}: f1 {} outside [{}, {}]",
            m.f1,
            p.min(r),
            p.max(r)
        );
    }
    let took = within(Duration::from_secs(5), started)?;
    Ok(format!("500 instances ({took:?})"))
}

fn mutate(body: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = body.chars().collect();
    for _ in 0..rng.gen_range(1..4) {
        match rng.gen_range(0..5) {
            0 if !chars.is_empty() => {
                let at = rng.gen_range(0..chars.len());
                chars.truncate(at);
            }
            1 if !chars.is_empty() => {
                let at = rng.gen_range(0..chars.len());
                chars.remove(at);
            }
            2 => {
                let at = rng.gen_range(0..=chars.len());
                let c = b"{}[]\":,\\ a0\n"[rng.gen_range(0..12)] as char;
                chars.insert(at, c);
            }
            3 => {
                let s: String = chars.iter().collect();
                chars = s
                    .replacen("{\"duration", "[\"duration", 1)
                    .replacen("1200", "\"twenty\"", 1)
                    .chars()
                    .collect();
            }
            _ => {
                let s: String = chars.iter().collect();
                chars = s.replacen("set_timer", "set_timers", 1).chars().collect();
            }
        }
    }
    chars.into_iter().collect()
}

fn round_trip_and_fuzz() -> Outcome {
    let tok = default_tokenizer();
    for s in fixtures::registry().schemas() {
        let c = schema::minify(s, tok.as_ref());
        let back = schema::parse_schema_text(&c.text).map_err(|e| e.to_string())?;
        check!(
            back.with_id(s.id.clone()) == *s,
            "{} did not round-trip",
            s.name
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let raw = random_schema_value(&mut rng);
        let s = schema::parse_tool_schema(&raw).map_err(|e| format!("case {case}: {e}"))?;
        let c = schema::minify(&s, tok.as_ref());
        check!(
            !c.text.contains('\n'),
            "case {case}: compact text has a newline"
        );
        let back = schema::parse_schema_text(&c.text).map_err(|e| format!("case {case}: {e}"))?;
        check!(back == s, "case {case}: round trip changed the schema");
        check!(
            schema::minify(&back, tok.as_ref()) == c,
            "case {case}: minify not idempotent"
        );
        let from_standard =
            schema::parse_schema_text(&s.standard_text()).map_err(|e| e.to_string())?;
        check!(from_standard == s, "case {case}: standard form differs");
    }

    let registry = Arc::new(fixtures::registry());
    let modes = [
        AgentMode::BASELINE,
        AgentMode::TOOL_EFFICIENT,
        AgentMode::MEMORY_EFFICIENT,
        AgentMode::COMBINED,
    ];
    let valid =
        r#"{"name":"set_timer","arguments":{"duration_seconds":1200,"timer_name":"pasta"}}"#;
    let mut errors = 0;
    let mut budget_stops = 0;
    for case in 0..400 {
        let body = mutate(valid, &mut rng);
        let output = format!("<tool_call>{body}</tool_call>");
        let script = Script::new(vec![
            ScriptStep::executor(MatchRule::Any, output).repeating(),
            ScriptStep::tracker(MatchRule::Any, "# NO_UPDATE").repeating(),
        ]);
        let mode = modes[case % modes.len()];
        let run = catch_unwind(AssertUnwindSafe(|| {
            let mut s = Session::new(
                "fuzz",
                SessionConfig::for_mode(mode),
                registry.clone(),
                Arc::new(ScriptedBackend::new(script)),
                tok.clone(),
            )
            .map_err(|e| e.to_string())?;
            s.step_turn("Set a pasta timer.").map_err(|e| e.to_string())
        }));
        let out = match run {
            Ok(Ok(out)) => out,
            Ok(Err(e)) => return Err(format!("case {case}: step_turn failed: {e} on {body}")),
            Err(_) => return Err(format!("case {case}: step_turn panicked on {body}")),
        };
        let error_obs = out
            .turns
            .iter()
            .any(|t| t.kind == TurnKind::Observation && t.success == Some(false));
        let budget = out.stop_reason == StopReason::TurnBudgetExceeded;
        check!(
            error_obs || budget,
            "case {case}: neither error nor budget stop for {body}"
        );
        errors += usize::from(error_obs);
        budget_stops += usize::from(budget);
    }
    Ok(format!(
        "19 fixtures + 1000 generated schemas round-trip; 400 fuzzed calls: {errors} error observations, {budget_stops} budget stops"
    ))
}

fn error_recovery() -> Outcome {
    let backend = Arc::new(ScriptedBackend::new(fixtures::error_recovery::script()));
    let mut s = Session::new(
        "recovery",
        SessionConfig::for_mode(AgentMode::MEMORY_EFFICIENT),
        Arc::new(fixtures::registry()),
        backend,
        default_tokenizer(),
    )
    .map_err(|e| e.to_string())?;
    let t1 = s
        .step_turn(fixtures::error_recovery::TURN_1)
        .map_err(|e| e.to_string())?;
    let obs = t1
        .turns
        .iter()
        .find(|t| t.kind == TurnKind::Observation)
        .ok_or("no observation in turn 1")?;
    let err: Value = serde_json::from_str(&obs.content).map_err(|e| e.to_string())?;
    check!(
        err["success"] == json!(false),
        "observation {}",
        obs.content
    );
    check!(
        err["error"].as_str().is_some_and(
            |e| e.contains("'new_name_or_destination_path' parameter is not applicable")
        ),
        "observation {}",
        obs.content
    );
    let t2 = s
        .step_turn(fixtures::error_recovery::TURN_2)
        .map_err(|e| e.to_string())?;
    let call = t2
        .turns
        .iter()
        .find(|t| t.kind == TurnKind::ToolCall)
        .ok_or("no corrected call in turn 2")?;
    let args = call
        .arguments
        .as_ref()
        .and_then(Value::as_object)
        .ok_or("no arguments")?;
    check!(
        !args.contains_key("new_name_or_destination_path"),
        "corrected call still has the invalid parameter"
    );
    let retried_ok = t2
        .turns
        .iter()
        .any(|t| t.kind == TurnKind::Observation && t.success == Some(true));
    check!(retried_ok, "corrected call did not succeed");
    let line = "tool_error: invalid parameter new_name_or_destination_path for search_files";
    check!(
        s.cso().contains_line(line),
        "log lacks the error line:\n{}",
        s.cso().text()
    );
    Ok("corrected call omits the invalid parameter; log keeps the tool_error line".into())
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("dual-cache walkthrough replay", walkthrough),
        ("schema compression", schema_compression),
        ("jit initial-context ratio", jit_ratio),
        ("context-growth reproduction", context_growth),
        ("cache replay-equivalence property", replay_property),
        ("metrics oracle", metrics_oracle),
        ("round-trip and tool-call fuzzing", round_trip_and_fuzz),
        ("error recovery", error_recovery),
    ];
    let mut failed = 0;
    println!("\nacceptance criteria");
    for (name, f) in criteria {
        let result = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed\n", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
