//! Chat-completion client, the offline stub, and the two pipelines that go
//! through the model: region → counties and bucket records → summary.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{AnnotateError, Bucket, NodeSummaryBuckets, Result};
use crate::data::CountyIndex;
use crate::geometry::Polygon;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM unreachable: {0}")]
    Unreachable(String),
    #[error("LLM not configured: {0}")]
    NotConfigured(String),
    #[error("malformed LLM response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmTask {
    RegionToCounties,
    StructuredFilter,
    CountiesToRegions,
    AggregateSummaries,
}

pub fn prompt_template(task: LlmTask) -> &'static str {
    match task {
        LlmTask::RegionToCounties => include_str!("../../prompts/region_to_counties.txt"),
        LlmTask::StructuredFilter => include_str!("../../prompts/structured_filter.txt"),
        LlmTask::CountiesToRegions => include_str!("../../prompts/counties_to_regions.txt"),
        LlmTask::AggregateSummaries => include_str!("../../prompts/aggregate_summaries.txt"),
    }
}

fn placeholder(task: LlmTask) -> &'static str {
    match task {
        LlmTask::RegionToCounties => "{{ Region }}",
        LlmTask::StructuredFilter => "{{ question }}",
        LlmTask::CountiesToRegions => "{{ list_of_counties }}",
        LlmTask::AggregateSummaries => "{{ concatenated_descriptions_dictionary }}",
    }
}

fn output_hint(task: LlmTask) -> Option<&'static str> {
    match task {
        LlmTask::RegionToCounties => Some(
            "Answer with a JSON array of strings, each formatted \"<County name>-<two-letter state>\", and nothing else.",
        ),
        _ => None,
    }
}

/// A rendered prompt plus the structured input it was rendered from, so the
/// stub can answer without parsing prose.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub task: LlmTask,
    pub prompt: String,
    pub input: Value,
}

impl LlmRequest {
    pub fn new(task: LlmTask, text: &str, input: Value) -> Self {
        LlmRequest {
            task,
            prompt: prompt_template(task).replace(placeholder(task), text),
            input,
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> std::result::Result<String, LlmError>;

    fn is_stub(&self) -> bool {
        false
    }
}

/// OpenAI-compatible `/chat/completions` client.
#[derive(Debug, Clone)]
pub struct ChatClient {
    pub base_url: String,
    pub model: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

impl ChatClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client builds");
        ChatClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: api_key.into(),
            http,
        }
    }

    /// Reads `LLM_API_KEY`, `LLM_BASE_URL` and `LLM_MODEL`.
    pub fn from_env() -> std::result::Result<Self, LlmError> {
        let key = std::env::var("LLM_API_KEY").map_err(|_| LlmError::NotConfigured("LLM_API_KEY is not set".into()))?;
        let base = std::env::var("LLM_BASE_URL").unwrap_or_else(|_| DEFAULT_BASE_URL.into());
        let model = std::env::var("LLM_MODEL").unwrap_or_else(|_| DEFAULT_MODEL.into());
        Ok(ChatClient::new(base, key, model))
    }
}

impl LlmClient for ChatClient {
    fn complete(&self, request: &LlmRequest) -> std::result::Result<String, LlmError> {
        let mut messages = Vec::new();
        if let Some(hint) = output_hint(request.task) {
            messages.push(json!({"role": "system", "content": hint}));
        }
        messages.push(json!({"role": "user", "content": request.prompt}));
        let body = json!({"model": self.model, "temperature": 0, "messages": messages});
        let resp = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LlmError::Unreachable(format!("HTTP {status}")));
        }
        let v: Value = resp.json().map_err(|e| LlmError::Malformed(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
    }
}

const SOCAL: [&str; 6] = [
    "Los Angeles-CA",
    "San Diego-CA",
    "Orange-CA",
    "Riverside-CA",
    "San Bernardino-CA",
    "Ventura-CA",
];

/// Deterministic offline client. Answers from region fixtures, a rule-based
/// question parser and template summaries; never touches the network.
#[derive(Debug, Clone)]
pub struct StubLlm {
    regions: BTreeMap<String, Vec<String>>,
}

impl Default for StubLlm {
    fn default() -> Self {
        let mut s = StubLlm {
            regions: BTreeMap::new(),
        };
        s = s.with_region("Southern California", SOCAL);
        s = s.with_region(
            "Bay Area",
            [
                "Alameda-CA",
                "Contra Costa-CA",
                "Marin-CA",
                "Napa-CA",
                "San Francisco-CA",
                "San Mateo-CA",
                "Santa Clara-CA",
                "Solano-CA",
                "Sonoma-CA",
            ],
        );
        s.with_region(
            "Central Valley",
            [
                "Butte-CA",
                "Fresno-CA",
                "Glenn-CA",
                "Kern-CA",
                "Kings-CA",
                "Madera-CA",
                "Merced-CA",
                "Sacramento-CA",
                "San Joaquin-CA",
                "Stanislaus-CA",
                "Sutter-CA",
                "Tehama-CA",
                "Tulare-CA",
                "Yolo-CA",
                "Yuba-CA",
            ],
        )
    }
}

fn normalize_region_name(name: &str) -> String {
    name.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-'))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl StubLlm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a region fixture.
    pub fn with_region<I, S>(mut self, name: &str, counties: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.regions
            .insert(normalize_region_name(name), counties.into_iter().map(Into::into).collect());
        self
    }
}

impl LlmClient for StubLlm {
    fn complete(&self, request: &LlmRequest) -> std::result::Result<String, LlmError> {
        let text = request.input.as_str().unwrap_or_default();
        Ok(match request.task {
            LlmTask::RegionToCounties => {
                // unknown names echo back, so a bare county key resolves to itself
                let list = self
                    .regions
                    .get(&normalize_region_name(text))
                    .cloned()
                    .unwrap_or_else(|| vec![text.trim().to_string()]);
                serde_json::to_string(&list).unwrap()
            }
            LlmTask::StructuredFilter => super::query::stub_filter_json(text),
            LlmTask::CountiesToRegions => {
                let counties: Vec<String> = serde_json::from_value(request.input.clone()).unwrap_or_default();
                stub_region_phrase(&counties)
            }
            LlmTask::AggregateSummaries => stub_summary(&request.input),
        })
    }

    fn is_stub(&self) -> bool {
        true
    }
}

fn stub_region_phrase(counties: &[String]) -> String {
    let names: Vec<&str> = counties.iter().map(|c| c.rsplit_once('-').map_or(c.as_str(), |p| p.0)).collect();
    match names.len() {
        0 => "none".into(),
        1..=3 => names.join(", "),
        n => format!("{} and {} more counties", names[..3].join(", "), n - 3),
    }
}

fn stub_summary(input: &Value) -> String {
    let counts: Vec<(Bucket, u64)> = Bucket::ALL
        .iter()
        .map(|b| (*b, input["counts"][b.prompt_key()].as_u64().unwrap_or(0)))
        .collect();
    let total: u64 = counts.iter().map(|c| c.1).sum();
    let nodes = input["records"].as_array().map_or(0, Vec::len);
    let mut ranked: Vec<&(Bucket, u64)> = counts.iter().filter(|c| c.1 > 0).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let Some(&&(top, top_n)) = ranked.first() else {
        return format!("No counties were classified across the {nodes} sampled nodes.");
    };
    let scope = if top_n == total {
        "all"
    } else if 2 * top_n > total {
        "most"
    } else {
        "some"
    };
    let mut s = format!(
        "{} precipitation across {scope} sampled regions ({nodes} nodes, {total} county readings).",
        capitalize(top.name())
    );
    let rest: Vec<String> = ranked[1..]
        .iter()
        .map(|(b, n)| format!("{} {}%", b.name(), (100 * n + total / 2) / total))
        .collect();
    if !rest.is_empty() {
        s.push_str(&format!(" Also {}.", rest.join(", ")));
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}

fn state_abbrev(s: &str) -> Option<&'static str> {
    const STATES: [(&str, &str); 51] = [
        ("alabama", "AL"), ("alaska", "AK"), ("arizona", "AZ"), ("arkansas", "AR"),
        ("california", "CA"), ("colorado", "CO"), ("connecticut", "CT"), ("delaware", "DE"),
        ("district of columbia", "DC"), ("florida", "FL"), ("georgia", "GA"), ("hawaii", "HI"),
        ("idaho", "ID"), ("illinois", "IL"), ("indiana", "IN"), ("iowa", "IA"), ("kansas", "KS"),
        ("kentucky", "KY"), ("louisiana", "LA"), ("maine", "ME"), ("maryland", "MD"),
        ("massachusetts", "MA"), ("michigan", "MI"), ("minnesota", "MN"), ("mississippi", "MS"),
        ("missouri", "MO"), ("montana", "MT"), ("nebraska", "NE"), ("nevada", "NV"),
        ("new hampshire", "NH"), ("new jersey", "NJ"), ("new mexico", "NM"), ("new york", "NY"),
        ("north carolina", "NC"), ("north dakota", "ND"), ("ohio", "OH"), ("oklahoma", "OK"),
        ("oregon", "OR"), ("pennsylvania", "PA"), ("rhode island", "RI"), ("south carolina", "SC"),
        ("south dakota", "SD"), ("tennessee", "TN"), ("texas", "TX"), ("utah", "UT"),
        ("vermont", "VT"), ("virginia", "VA"), ("washington", "WA"), ("west virginia", "WV"),
        ("wisconsin", "WI"), ("wyoming", "WY"),
    ];
    let l = s.trim().to_lowercase();
    STATES.iter().find(|(n, _)| *n == l).map(|(_, a)| *a)
}

/// `(name, state)` in canonical comparison form: lowercase name without a
/// trailing "County", uppercase two-letter state.
fn county_parts(raw: &str) -> Option<(String, String)> {
    let raw = raw.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.');
    let (name, state) = raw.rsplit_once(',').or_else(|| raw.rsplit_once('-'))?;
    let name = name.trim();
    let lower = name.to_lowercase();
    let name = lower.strip_suffix(" county").unwrap_or(&lower).trim().to_string();
    let state = state.trim();
    let state = state_abbrev(state).map(str::to_string).unwrap_or_else(|| state.to_uppercase());
    (!name.is_empty() && !state.is_empty()).then_some((name, state))
}

/// Splits a model answer into county strings: a JSON array when present,
/// otherwise one entry per line or semicolon.
fn split_county_list(text: &str) -> Vec<String> {
    if let (Some(a), Some(b)) = (text.find('['), text.rfind(']')) {
        if let Ok(v) = serde_json::from_str::<Vec<String>>(&text[a..=b]) {
            return v;
        }
    }
    text.split(['\n', ';'])
        .map(|l| l.trim().trim_start_matches(['-', '*', '•']).trim())
        .map(|l| l.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')').trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRegion {
    pub name: String,
    pub counties: Vec<String>,
    /// Model answers that matched no county in the index.
    pub dropped: Vec<String>,
    #[serde(skip)]
    pub polygons: Vec<Polygon>,
}

/// Asks the model which counties make up `name` and keeps those present in
/// the index.
pub fn resolve_region(llm: &dyn LlmClient, counties: &CountyIndex, name: &str) -> Result<ResolvedRegion> {
    let request = LlmRequest::new(LlmTask::RegionToCounties, name, Value::String(name.to_string()));
    let answer = llm.complete(&request)?;
    let lookup: BTreeMap<(String, String), &str> = counties
        .keys()
        .filter_map(|k| county_parts(k).map(|p| (p, k)))
        .collect();
    let mut found = Vec::new();
    let mut dropped = Vec::new();
    for item in split_county_list(&answer) {
        match county_parts(&item).and_then(|p| lookup.get(&p)) {
            Some(key) if !found.iter().any(|f: &String| f == key) => found.push(key.to_string()),
            Some(_) => {}
            None => dropped.push(item),
        }
    }
    if found.is_empty() {
        return Err(AnnotateError::NoCounties(name.to_string()));
    }
    if !dropped.is_empty() {
        log::warn!("region {name:?}: dropped unknown counties {dropped:?}");
    }
    Ok(ResolvedRegion {
        name: name.to_string(),
        polygons: counties.union(found.iter().map(String::as_str)),
        counties: found,
        dropped,
    })
}

pub const MAX_IN_FLIGHT: usize = 4;
pub const SUMMARY_WORD_LIMIT: usize = 80;

/// Runs `jobs` through `f` with at most `limit` concurrent calls, keeping
/// results in input order.
fn bounded_map<T: Sync, R: Send>(jobs: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..limit.max(1).min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub summary: String,
    /// Per sampled node, the regional phrase for each non-empty bucket.
    pub phrases: Vec<BTreeMap<String, String>>,
}

fn truncate_words(text: &str, limit: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= limit {
        words.join(" ")
    } else {
        words[..limit].join(" ")
    }
}

/// Compresses every bucket's county list to a regional phrase, then asks
/// for one summary of all records. The result is capped at 80 words.
pub fn summarize_region(llm: &dyn LlmClient, buckets: &[NodeSummaryBuckets]) -> Result<RegionSummary> {
    if buckets.is_empty() {
        return Err(AnnotateError::EmptyBuckets);
    }
    let jobs: Vec<(usize, Bucket, &[String])> = buckets
        .iter()
        .enumerate()
        .flat_map(|(i, rec)| Bucket::ALL.iter().map(move |b| (i, *b, rec.get(*b))))
        .filter(|(_, _, list)| !list.is_empty())
        .collect();
    let answers = bounded_map(&jobs, MAX_IN_FLIGHT, |(_, _, list)| {
        let input = serde_json::to_value(list).unwrap();
        let request = LlmRequest::new(LlmTask::CountiesToRegions, &format!("{list:?}"), input);
        llm.complete(&request)
    });
    let mut phrases = vec![BTreeMap::new(); buckets.len()];
    for ((i, b, _), answer) in jobs.iter().zip(answers) {
        phrases[*i].insert(b.prompt_key().to_string(), answer?.trim().to_string());
    }
    let records: Vec<String> = phrases
        .iter()
        .map(|p| {
            Bucket::ALL
                .iter()
                .map(|b| format!("{}: [{}]", b.prompt_key(), p.get(b.prompt_key()).map_or("", String::as_str)))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect();
    let counts: BTreeMap<&str, usize> = Bucket::ALL
        .iter()
        .map(|b| (b.prompt_key(), buckets.iter().map(|r| r.get(*b).len()).sum()))
        .collect();
    let input = json!({"records": records, "counts": counts});
    let request = LlmRequest::new(LlmTask::AggregateSummaries, &records.join("\n"), input);
    let summary = truncate_words(&llm.complete(&request)?, SUMMARY_WORD_LIMIT);
    Ok(RegionSummary { summary, phrases })
}
