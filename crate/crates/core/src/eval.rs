//! Scenario runner, rule-based tool-call metrics and context-growth reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::{Script, ScriptedBackend};
use crate::dispatch::AgentMode;
use crate::session::{Session, SessionConfig, ToolCallRecord, TrackerCadence};
use crate::tokenizer::Tokenizer;
use crate::toolenv::{ToolRegistry, VerbosityProfile};
use crate::turn::Turn;

pub const DEFAULT_MAX_ASSISTANT_TURNS: u32 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    MultiTool,
    CloudOnly,
    OnDeviceThenCloud,
    Conversational,
    SingleTool,
}

impl Category {
    pub fn slug(&self) -> &'static str {
        match self {
            Category::MultiTool => "multi-tool",
            Category::CloudOnly => "cloud-only",
            Category::OnDeviceThenCloud => "on-device-then-cloud",
            Category::Conversational => "conversational",
            Category::SingleTool => "single-tool",
        }
    }
}

/// Follow-up user messages after the initial utterance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserScript {
    #[serde(default)]
    pub turns: Vec<String>,
    /// Up to this many seed-dependent filler words are appended to each
    /// message, so repeats differ.
    #[serde(default)]
    pub noise_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub scenario_description: String,
    #[serde(default)]
    pub user_persona: String,
    pub initial_user_utterance: String,
    pub intended_tool_sequence: Vec<String>,
    #[serde(default)]
    pub constraints_and_context: Map<String, Value>,
    #[serde(default)]
    pub scenario_notes: String,
    pub category: Category,
    #[serde(default)]
    pub user_script: UserScript,
    pub agent_script: Script,
}

impl Scenario {
    pub fn is_conversational(&self) -> bool {
        is_conversational_truth(&self.intended_tool_sequence)
    }
}

pub fn load_scenarios(dir: &Path) -> std::io::Result<Vec<Scenario>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: {e}", p.display()),
            )
        })?;
        let items = match value {
            Value::Array(a) => a,
            other => vec![other],
        };
        for item in items {
            // Files holding only a script (no scenario fields) are skipped.
            if item.get("intended_tool_sequence").is_none() {
                continue;
            }
            out.push(serde_json::from_value(item).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}: {e}", p.display()),
                )
            })?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MatchMode {
    /// Multiset intersection on tool ids.
    #[default]
    ToolId,
    /// As above, but a call only matches when it carries every required
    /// parameter.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeriesPoint {
    pub assistant_turn: u32,
    pub input_context_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrajectoryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub context_series: Vec<SeriesPoint>,
    pub made_calls: Vec<String>,
    pub matched_calls: Vec<String>,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn is_conversational_truth(truth: &[String]) -> bool {
    truth
        .iter()
        .all(|t| t.is_empty() || t == "CONVERSATIONAL_ROUTER")
}

fn call_label(c: &ToolCallRecord) -> String {
    c.tool_id
        .clone()
        .or_else(|| c.name.clone())
        .unwrap_or_else(|| "<malformed>".into())
}

/// Precision, recall and F1 of the calls made against the ground truth.
/// Invalid calls count as made but never match.
pub fn compute_metrics(
    made: &[ToolCallRecord],
    truth: &[String],
    mode: MatchMode,
) -> TrajectoryMetrics {
    let made_calls: Vec<String> = made.iter().map(call_label).collect();
    let mut out = TrajectoryMetrics {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        context_series: Vec::new(),
        made_calls,
        matched_calls: Vec::new(),
    };
    if is_conversational_truth(truth) {
        if made.is_empty() {
            out.precision = 1.0;
            out.recall = 1.0;
            out.f1 = 1.0;
        }
        return out;
    }
    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for t in truth {
        *remaining.entry(t.as_str()).or_default() += 1;
    }
    for c in made {
        let eligible = c.valid && (mode == MatchMode::ToolId || c.has_required);
        let Some(id) = c.tool_id.as_deref().filter(|_| eligible) else {
            continue;
        };
        if let Some(n) = remaining.get_mut(id).filter(|n| **n > 0) {
            *n -= 1;
            out.matched_calls.push(id.to_string());
        }
    }
    let matched = out.matched_calls.len() as f64;
    if !made.is_empty() {
        out.precision = matched / made.len() as f64;
    }
    out.recall = matched / truth.len() as f64;
    out.f1 = f1_score(out.precision, out.recall);
    out
}

/// Input-context length of every executor generation in a trajectory.
pub fn context_series(turns: &[Turn]) -> Vec<SeriesPoint> {
    turns
        .iter()
        .filter_map(|t| {
            Some(SeriesPoint {
                assistant_turn: t.assistant_turn?,
                input_context_tokens: t.input_context_tokens?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalConfig {
    pub max_assistant_turns: u32,
    pub match_mode: MatchMode,
    pub base_seed: u64,
    pub tracker_cadence: TrackerCadence,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud_profile: Option<VerbosityProfile>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_assistant_turns: DEFAULT_MAX_ASSISTANT_TURNS,
            match_mode: MatchMode::default(),
            base_seed: 0,
            tracker_cadence: TrackerCadence::default(),
            cloud_profile: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioRun {
    pub scenario_id: String,
    pub category: Category,
    pub mode: AgentMode,
    pub seed: u64,
    pub metrics: TrajectoryMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub trajectory: Vec<Turn>,
}

const NOISE: &[&str] = &[
    "um", "actually", "please", "quickly", "if", "possible", "thanks", "again", "so", "well",
];

fn with_noise(text: &str, words: usize, seed: u64, turn: usize) -> String {
    if words == 0 {
        return text.to_string();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(turn as u64));
    let n = rng.gen_range(0..=words);
    let mut out = text.to_string();
    for _ in 0..n {
        out.push(' ');
        out.push_str(NOISE[rng.gen_range(0..NOISE.len())]);
    }
    out
}

/// Plays one scenario in one mode. Backend failures end the run early and
/// are recorded on the result.
pub fn run_scenario(
    sc: &Scenario,
    mode: AgentMode,
    seed: u64,
    registry: Arc<ToolRegistry>,
    tokenizer: Arc<dyn Tokenizer>,
    cfg: &EvalConfig,
) -> ScenarioRun {
    let script = if mode.is_jit() {
        sc.agent_script.jit_expanded()
    } else {
        sc.agent_script.clone()
    };
    let mut run = ScenarioRun {
        scenario_id: sc.id.clone(),
        category: sc.category,
        mode,
        seed,
        metrics: compute_metrics(&[], &sc.intended_tool_sequence, cfg.match_mode),
        error: None,
        trajectory: Vec::new(),
    };
    let backend = match ScriptedBackend::try_new(script) {
        Ok(b) => Arc::new(b),
        Err(e) => {
            run.error = Some(e.to_string());
            return run;
        }
    };
    let config = SessionConfig {
        tracker_cadence: cfg.tracker_cadence,
        cloud_profile: cfg.cloud_profile,
        seed,
        ..SessionConfig::for_mode(mode)
    };
    let id = format!("{}-{}-{seed}", sc.id, mode.name());
    let mut session = match Session::new(id, config, registry, backend, tokenizer) {
        Ok(s) => s,
        Err(e) => {
            run.error = Some(e.to_string());
            return run;
        }
    };
    let utterances = std::iter::once(&sc.initial_user_utterance).chain(&sc.user_script.turns);
    for (i, u) in utterances.enumerate() {
        let generated = context_series(session.trajectory()).len() as u32;
        if generated >= cfg.max_assistant_turns {
            break;
        }
        let text = with_noise(u, sc.user_script.noise_words, seed, i);
        if let Err(e) = session.step_turn(&text) {
            run.error = Some(e.to_string());
            break;
        }
    }
    let mut metrics = compute_metrics(session.calls(), &sc.intended_tool_sequence, cfg.match_mode);
    metrics.context_series = context_series(session.trajectory())
        .into_iter()
        .filter(|p| p.assistant_turn <= cfg.max_assistant_turns)
        .collect();
    run.metrics = metrics;
    run.trajectory = session.trajectory().to_vec();
    run
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Stat {
    pub mean: f64,
    pub per_run: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_half_width: Option<f64>,
}

impl Stat {
    pub fn from_runs(per_run: Vec<f64>) -> Self {
        let n = per_run.len() as f64;
        let mean = if per_run.is_empty() {
            0.0
        } else {
            per_run.iter().sum::<f64>() / n
        };
        let ci_half_width = (per_run.len() >= 2).then(|| {
            let var = per_run.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        });
        Self {
            mean,
            per_run,
            ci_half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeriesStat {
    pub assistant_turn: u32,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroupReport {
    pub category: Category,
    pub mode: String,
    pub scenarios: usize,
    pub repeats: usize,
    pub failed_runs: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    pub series: Vec<SeriesStat>,
    /// Least-squares slope of tokens against assistant turn.
    pub slope: f64,
    pub initial_context: f64,
    pub final_context: f64,
    pub growth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SuiteReport {
    pub config: EvalConfig,
    pub groups: Vec<GroupReport>,
    pub runs: Vec<ScenarioRun>,
}

impl SuiteReport {
    pub fn group(&self, category: Category, mode: AgentMode) -> Option<&GroupReport> {
        self.groups
            .iter()
            .find(|g| g.category == category && g.mode == mode.name())
    }
}

/// Ordinary least-squares slope; zero for fewer than two points.
pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn aggregate(
    category: Category,
    mode: AgentMode,
    runs: &[&ScenarioRun],
    repeats: usize,
) -> GroupReport {
    let mut by_repeat: BTreeMap<u64, Vec<&ScenarioRun>> = BTreeMap::new();
    for r in runs {
        by_repeat.entry(r.seed).or_default().push(r);
    }
    let per_repeat = |f: &dyn Fn(&ScenarioRun) -> f64| -> Vec<f64> {
        by_repeat
            .values()
            .map(|rs| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()))
            .collect()
    };
    // Per repeat, the mean over scenarios at each assistant turn.
    let mut turn_means: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for rs in by_repeat.values() {
        let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in rs {
            for p in &r.metrics.context_series {
                acc.entry(p.assistant_turn)
                    .or_default()
                    .push(p.input_context_tokens as f64);
            }
        }
        for (t, xs) in acc {
            turn_means.entry(t).or_default().push(mean(&xs));
        }
    }
    let series: Vec<SeriesStat> = turn_means
        .into_iter()
        .map(|(t, xs)| {
            let s = Stat::from_runs(xs);
            SeriesStat {
                assistant_turn: t,
                mean: s.mean,
                ci_half_width: s.ci_half_width,
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> = series
        .iter()
        .map(|s| (f64::from(s.assistant_turn), s.mean))
        .collect();
    let initial = series.first().map_or(0.0, |s| s.mean);
    let last = series.last().map_or(0.0, |s| s.mean);
    GroupReport {
        category,
        mode: mode.name().to_string(),
        scenarios: runs.len() / repeats.max(1),
        repeats,
        failed_runs: runs.iter().filter(|r| r.error.is_some()).count(),
        precision: Stat::from_runs(per_repeat(&|r| r.metrics.precision)),
        recall: Stat::from_runs(per_repeat(&|r| r.metrics.recall)),
        f1: Stat::from_runs(per_repeat(&|r| r.metrics.f1)),
        slope: least_squares_slope(&pts),
        initial_context: initial,
        final_context: last,
        growth: last - initial,
        series,
    }
}

/// Runs every scenario in every mode `repeats` times (seed = base + repeat)
/// in parallel and aggregates per category and mode.
pub fn run_suite(
    scenarios: &[Scenario],
    modes: &[AgentMode],
    repeats: usize,
    registry: Arc<ToolRegistry>,
    tokenizer: Arc<dyn Tokenizer>,
    cfg: &EvalConfig,
) -> SuiteReport {
    let repeats = repeats.max(1);
    let jobs: Vec<(usize, AgentMode, u64)> = (0..scenarios.len())
        .flat_map(|i| {
            modes
                .iter()
                .flat_map(move |&m| (0..repeats).map(move |r| (i, m, cfg.base_seed + r as u64)))
        })
        .collect();
    let runs: Vec<ScenarioRun> = jobs
        .par_iter()
        .map(|&(i, mode, seed)| {
            run_scenario(
                &scenarios[i],
                mode,
                seed,
                registry.clone(),
                tokenizer.clone(),
                cfg,
            )
        })
        .collect();
    let mut groups = Vec::new();
    let mut cats: Vec<Category> = scenarios.iter().map(|s| s.category).collect();
    cats.sort();
    cats.dedup();
    for cat in cats {
        for &mode in modes {
            let rs: Vec<&ScenarioRun> = runs
                .iter()
                .filter(|r| r.category == cat && r.mode == mode)
                .collect();
            groups.push(aggregate(cat, mode, &rs, repeats));
        }
    }
    SuiteReport {
        config: cfg.clone(),
        groups,
        runs,
    }
}

pub fn series_csv(report: &SuiteReport) -> String {
    let mut out = String::from("category,mode,assistant_turn,mean_tokens,ci_half_width\n");
    for g in &report.groups {
        for s in &g.series {
            let ci = s
                .ci_half_width
                .map(|c| format!("{c:.3}"))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.3},{}",
                g.category.slug(),
                g.mode,
                s.assistant_turn,
                s.mean,
                ci
            );
        }
    }
    out
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Line chart of mean input context per assistant turn, one line per mode.
pub fn chart_svg(category: Category, groups: &[&GroupReport]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let max_x = groups
        .iter()
        .flat_map(|g| g.series.iter().map(|s| f64::from(s.assistant_turn)))
        .fold(1.0, f64::max);
    let max_y = groups
        .iter()
        .flat_map(|g| {
            g.series
                .iter()
                .map(|s| s.mean + s.ci_half_width.unwrap_or(0.0))
        })
        .fold(1.0, f64::max);
    let sx = |x: f64| pad + (x / max_x) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y / max_y) * (h - 2.0 * pad);
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
        w / 2.0,
        category.slug()
    );
    let _ = write!(
        svg,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">assistant turn</text><text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">input context tokens</text>"#,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0
    );
    for i in 0..=4 {
        let v = max_y * f64::from(i) / 4.0;
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{:.0}</text>"#,
            pad - 4.0,
            sy(v) + 4.0,
            v
        );
    }
    for (i, g) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = g
            .series
            .iter()
            .map(|s| format!("{:.1},{:.1}", sx(f64::from(s.assistant_turn)), sy(s.mean)))
            .collect();
        let _ = write!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - 120.0,
            pad + 16.0 * i as f64,
            g.mode
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes report.json, series.csv and one chart per category.
pub fn write_report(report: &SuiteReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir.join("charts"))?;
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("series.csv"), series_csv(report))?;
    let mut by_cat: BTreeMap<Category, Vec<&GroupReport>> = BTreeMap::new();
    for g in &report.groups {
        by_cat.entry(g.category).or_default().push(g);
    }
    for (cat, gs) in by_cat {
        std::fs::write(
            dir.join("charts").join(format!("{}.svg", cat.slug())),
            chart_svg(cat, &gs),
        )?;
    }
    Ok(())
}
