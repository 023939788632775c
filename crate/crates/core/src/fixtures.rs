//! Bundled fixtures: the device tool registries, the ticket walkthrough,
//! the error-recovery run and generated evaluation suites.

use std::sync::Arc;

use serde_json::{json, Map, Value};

use crate::backend::{MatchRule, Script, ScriptStep, ScriptedBackend};
use crate::dispatch::AgentMode;
use crate::eval::{Category, Scenario, UserScript};
use crate::memory::NO_UPDATE;
use crate::session::{Session, SessionConfig, SessionError};
use crate::tokenizer::{default_tokenizer, Tokenizer};
use crate::toolenv::{HandlerCatalog, RegistryManifest, ToolEnvError, ToolRegistry};

macro_rules! registry_files {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../fixtures/registry/", $name)))),*]
    };
}

static REGISTRY_FILES: &[(&str, &str)] = registry_files![
    "manifest.json",
    "manifest-12.json",
    "schemas/manage_messages.json",
    "schemas/manage_gallery_items.json",
    "schemas/get_local_navigation_info.json",
    "schemas/launch_ride_service_app.json",
    "schemas/manage_device_files.json",
    "schemas/manage_it_support_ticket.json",
    "schemas/set_timer.json",
    "schemas/manage_alarms.json",
    "schemas/control_audio_playback.json",
    "schemas/manage_network_settings.json",
    "schemas/manage_calendar_events.json",
    "schemas/manage_contacts.json",
    "schemas/manage_reminders.json",
    "schemas/manage_notes.json",
    "schemas/adjust_device_settings.json",
    "schemas/capture_media.json",
    "schemas/manage_email.json",
    "schemas/get_device_status.json",
    "schemas/process_with_cloud_llm.json",
];

fn bundled(file: &str) -> Result<String, ToolEnvError> {
    REGISTRY_FILES
        .iter()
        .find(|(n, _)| *n == file)
        .map(|(_, text)| text.to_string())
        .ok_or_else(|| ToolEnvError::Manifest(format!("no bundled file '{file}'")))
}

/// Ids of the bundled registries.
pub const REGISTRY_19: &str = "device-19";
pub const REGISTRY_12: &str = "device-12";

pub fn manifest(id: &str) -> Option<RegistryManifest> {
    let file = match id {
        REGISTRY_19 => "manifest.json",
        REGISTRY_12 => "manifest-12.json",
        _ => return None,
    };
    Some(serde_json::from_str(&bundled(file).ok()?).expect("bundled manifest parses"))
}

pub fn bundled_registry(id: &str, tok: Arc<dyn Tokenizer>) -> Option<ToolRegistry> {
    let m = manifest(id)?;
    Some(
        ToolRegistry::from_manifest_with(&m, &HandlerCatalog::default(), tok, bundled)
            .expect("bundled registry is valid"),
    )
}

/// The 19-tool device registry.
pub fn registry() -> ToolRegistry {
    bundled_registry(REGISTRY_19, default_tokenizer()).expect("bundled")
}

/// The 12-tool subset (eleven device tools plus the cloud tool).
pub fn registry_12() -> ToolRegistry {
    bundled_registry(REGISTRY_12, default_tokenizer()).expect("bundled")
}

/// The two-turn IT ticket walkthrough, sized so that priming costs 1710
/// executor and 206 tracker tokens under the default tokenizer.
pub mod walkthrough {
    use super::*;

    pub const EXECUTOR_PREAMBLE: &str =
        include_str!("../fixtures/walkthrough/executor_preamble.txt");
    pub const TRACKER_CONTRACT: &str = include_str!("../fixtures/walkthrough/tracker_contract.txt");
    pub const SCRIPT: &str = include_str!("../fixtures/walkthrough/script.json");
    pub const TURN_1: &str = "My Wi-Fi is not working, please create an IT ticket.";
    pub const TURN_2: &str = "What's the status of that ticket?";

    pub fn config() -> SessionConfig {
        SessionConfig {
            executor_preamble: Some(EXECUTOR_PREAMBLE.to_string()),
            tracker_contract: Some(TRACKER_CONTRACT.to_string()),
            ..SessionConfig::for_mode(AgentMode::MEMORY_EFFICIENT)
        }
    }

    pub fn script() -> Script {
        serde_json::from_str(SCRIPT).expect("bundled script parses")
    }

    pub fn session() -> Result<(Session, Arc<ScriptedBackend>), SessionError> {
        let backend = Arc::new(ScriptedBackend::new(script()));
        let s = Session::new(
            "walkthrough",
            config(),
            Arc::new(registry_12()),
            backend.clone(),
            default_tokenizer(),
        )?;
        Ok((s, backend))
    }
}

/// A file search that fails on an inapplicable parameter, gets logged, and
/// is retried correctly on the next user turn.
pub mod error_recovery {
    use super::*;

    pub const SCRIPT: &str = include_str!("../fixtures/scenarios/error_recovery_script.json");
    pub const TURN_1: &str =
        "Find the txt files in /documents/projects that mention configuration.";
    pub const TURN_2: &str = "Yes, try again.";

    pub fn script() -> Script {
        serde_json::from_str(SCRIPT).expect("bundled script parses")
    }
}

/// A valid call for each on-device tool of the 19-tool registry.
pub fn sample_calls() -> Vec<(&'static str, &'static str, Value)> {
    vec![
        (
            "agent_001",
            "manage_messages",
            json!({"action":"send","recipient":"Maya","content":"Running ten minutes late."}),
        ),
        (
            "agent_002",
            "manage_gallery_items",
            json!({"action":"find","search_query":"beach photos from June"}),
        ),
        (
            "agent_003",
            "get_local_navigation_info",
            json!({"destination":"Central Station","travel_mode":"transit","info_type":"eta"}),
        ),
        (
            "agent_004",
            "launch_ride_service_app",
            json!({"dropoff_location":"Airport Terminal 2","ride_type":"standard"}),
        ),
        (
            "agent_005",
            "manage_device_files",
            json!({"operation":"search_files","path_or_search_query":"/documents/projects","file_type_filter_for_search":"txt"}),
        ),
        (
            "agent_006",
            "manage_it_support_ticket",
            json!({"action":"create_ticket","issue_description":"Laptop will not charge","priority":"high"}),
        ),
        (
            "agent_007",
            "set_timer",
            json!({"duration_seconds":1200,"timer_name":"pasta"}),
        ),
        (
            "agent_008",
            "manage_alarms",
            json!({"action":"create","time":"06:45","label":"gym"}),
        ),
        (
            "agent_009",
            "control_audio_playback",
            json!({"command":"play","media_query":"lofi beats"}),
        ),
        (
            "agent_010",
            "manage_network_settings",
            json!({"setting":"wifi","state":"on"}),
        ),
        (
            "agent_011",
            "manage_calendar_events",
            json!({"action":"create","title":"Design review","start_time":"2025-03-04T15:00:00","duration_minutes":45}),
        ),
        (
            "agent_012",
            "manage_contacts",
            json!({"action":"lookup","name":"Jordan Lee"}),
        ),
        (
            "agent_013",
            "manage_reminders",
            json!({"action":"create","text":"Buy milk","location_trigger":"grocery store"}),
        ),
        (
            "agent_014",
            "manage_notes",
            json!({"action":"append","title":"Groceries","body":"eggs, rice"}),
        ),
        (
            "agent_015",
            "adjust_device_settings",
            json!({"setting":"brightness","value":"40"}),
        ),
        (
            "agent_016",
            "capture_media",
            json!({"mode":"photo","camera":"back"}),
        ),
        (
            "agent_017",
            "manage_email",
            json!({"action":"search","query":"invoice March"}),
        ),
        (
            "agent_018",
            "get_device_status",
            json!({"component":"battery"}),
        ),
    ]
}

const CLOUD_NAME: &str = "process_with_cloud_llm";
const CLOUD_ID: &str = "agent_019";

fn call_text(name: &str, args: &Value) -> String {
    format!(
        "<tool_call>{}</tool_call>",
        json!({"name": name, "arguments": args})
    )
}

fn any_executor(output: String) -> ScriptStep {
    ScriptStep::executor(MatchRule::Any, output)
}

fn any_tracker(output: impl Into<String>) -> ScriptStep {
    ScriptStep::tracker(MatchRule::Any, output)
}

fn scenario(
    id: String,
    category: Category,
    description: &str,
    first: String,
    follow_ups: Vec<String>,
    truth: Vec<String>,
    steps: Vec<ScriptStep>,
) -> Scenario {
    Scenario {
        id,
        scenario_description: description.to_string(),
        user_persona: "Busy professional using the phone between meetings.".into(),
        initial_user_utterance: first,
        intended_tool_sequence: truth,
        constraints_and_context: Map::new(),
        scenario_notes: String::new(),
        category,
        user_script: UserScript {
            turns: follow_ups,
            noise_words: 0,
        },
        agent_script: Script::new(steps),
    }
}

/// Each user turn asks for one on-device action; the agent calls the tool
/// and confirms. The tracker records one short line per confirmation.
pub fn multi_tool_suite(scenarios: usize, user_turns: usize) -> Vec<Scenario> {
    let calls = sample_calls();
    (0..scenarios)
        .map(|s| {
            let mut utterances = Vec::new();
            let mut steps = Vec::new();
            let mut truth = Vec::new();
            for t in 0..user_turns {
                let (id, name, args) = &calls[(s * 7 + t * 5) % calls.len()];
                utterances.push(format!(
                    "Step {}: please use {} for me.",
                    t + 1,
                    name.replace('_', " ")
                ));
                steps.push(any_executor(call_text(name, args)));
                steps.push(any_executor(format!(
                    "Done, {} finished.",
                    name.replace('_', " ")
                )));
                steps.push(any_tracker(NO_UPDATE));
                steps.push(any_tracker(format!("step {}: {name} ok", t + 1)));
                truth.push(id.to_string());
            }
            let first = utterances.remove(0);
            scenario(
                format!("multi-tool-{s:02}"),
                Category::MultiTool,
                "Run a sequence of on-device actions.",
                first,
                utterances,
                truth,
                steps,
            )
        })
        .collect()
}

/// Each user turn is an open-ended question the agent delegates to the
/// cloud tool, whose answers are long.
pub fn cloud_suite(scenarios: usize, user_turns: usize) -> Vec<Scenario> {
    const TOPICS: &[&str] = &[
        "a quick dinner recipe with chickpeas",
        "how compound interest works",
        "the history of the Hanseatic League",
        "how to solve dy/dx + 2xy = x",
        "a three day itinerary for Lisbon",
        "why the sky looks blue",
        "tips for a first half marathon",
        "the plot of Middlemarch",
    ];
    (0..scenarios)
        .map(|s| {
            let mut utterances = Vec::new();
            let mut steps = Vec::new();
            for t in 0..user_turns {
                let topic = TOPICS[(s + t) % TOPICS.len()];
                let q = format!("Question {}: explain {topic}.", t + 1);
                let args = json!({
                    "user_query_context": format!("Scenario {s}, question {}: {topic}", t + 1),
                    "reason_for_escalation": "needs broad knowledge",
                });
                utterances.push(q);
                steps.push(any_executor(call_text(CLOUD_NAME, &args)));
                steps.push(any_executor(
                    "Here is a summary of the cloud answer.".into(),
                ));
                steps.push(any_tracker(NO_UPDATE));
                steps.push(any_tracker(format!(
                    "completed_steps: answered question {}",
                    t + 1
                )));
            }
            let first = utterances.remove(0);
            scenario(
                format!("cloud-{s:02}"),
                Category::CloudOnly,
                "Open-ended questions answered by the cloud model.",
                first,
                utterances,
                vec![CLOUD_ID.to_string()],
                steps,
            )
        })
        .collect()
}

/// Timer then recipe suggestions from the cloud.
pub fn timer_then_cloud() -> Scenario {
    let steps = vec![
        ScriptStep::executor(
            MatchRule::Contains("Set a timer for 20 minutes.".into()),
            call_text("set_timer", &json!({"duration_seconds": 1200})),
        ),
        ScriptStep::executor(
            MatchRule::Contains("\"timer_id\":\"timer_1\"".into()),
            call_text(
                CLOUD_NAME,
                &json!({"user_query_context":"Recipes that take at most 20 minutes","reason_for_escalation":"recipe search needs the cloud"}),
            ),
        ),
        ScriptStep::executor(
            MatchRule::Any,
            "Your 20 minute timer is running. A few recipes that fit: lemon pasta, egg fried rice, chickpea curry.",
        ),
        ScriptStep::tracker(MatchRule::Any, NO_UPDATE).repeating(),
    ];
    scenario(
        "timer-recipes".into(),
        Category::OnDeviceThenCloud,
        "Set a timer and then get recipe suggestions that fit within that time.",
        "Set a timer for 20 minutes.".into(),
        Vec::new(),
        vec!["agent_007".into(), CLOUD_ID.into()],
        steps,
    )
}

/// Small talk with no tool use.
pub fn small_talk() -> Scenario {
    scenario(
        "movie-chat".into(),
        Category::Conversational,
        "Chat about a favourite film.",
        "I just watched Arrival again, what a film.".into(),
        vec!["The linguistics part was my favourite.".into()],
        vec![String::new()],
        vec![
            ScriptStep::executor(
                MatchRule::Any,
                "It really is. The ending still lands every time.",
            ),
            ScriptStep::executor(
                MatchRule::Any,
                "The way it treats language as a way of thinking is lovely.",
            ),
            ScriptStep::tracker(MatchRule::Any, NO_UPDATE).repeating(),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolenv::ToolState;

    #[test]
    fn registries_have_expected_shape() {
        let r = registry();
        assert_eq!(r.len(), 19);
        assert_eq!(r.cloud_tool_id(), "agent_019");
        assert_eq!(r.cloud_tool_name(), "process_with_cloud_llm");
        let r12 = registry_12();
        assert_eq!(r12.len(), 12);
        assert!(r12.by_id("agent_006").is_some());
        assert!(manifest("nope").is_none());
    }

    #[test]
    fn sample_calls_all_succeed() {
        let r = registry();
        let mut st = ToolState::default();
        for (id, name, args) in sample_calls() {
            assert_eq!(r.by_name(name).unwrap().id, id);
            let obs = r.invoke(name, args.as_object().unwrap(), &mut st).unwrap();
            assert!(obs.success, "{name}: {}", obs.render());
        }
    }

    #[test]
    fn suites_are_well_formed() {
        let suite = multi_tool_suite(10, 10);
        assert_eq!(suite.len(), 10);
        for sc in &suite {
            assert_eq!(sc.intended_tool_sequence.len(), 10);
            assert_eq!(sc.user_script.turns.len(), 9);
        }
        for sc in cloud_suite(3, 4) {
            assert_eq!(sc.intended_tool_sequence, vec![CLOUD_ID.to_string()]);
        }
    }
}
