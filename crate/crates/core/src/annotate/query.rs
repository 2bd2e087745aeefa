//! Forward queries: question text → structured node filter.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::llm::{resolve_region, LlmClient, LlmRequest, LlmTask, ResolvedRegion};
use super::{AnnotateError, FilterKind, Result, StructuredFilter};
use crate::data::CountyIndex;

/// The model's answer before region names are resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub region_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_b: Option<String>,
    #[serde(default)]
    pub x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardQuery {
    pub spec: FilterSpec,
    pub regions: Vec<ResolvedRegion>,
    pub filter: StructuredFilter,
}

enum Parsed {
    Spec(FilterSpec),
    Unsupported,
}

fn parse_answer(text: &str) -> std::result::Result<Parsed, String> {
    let (a, b) = match (text.find('{'), text.rfind('}')) {
        (Some(a), Some(b)) if a < b => (a, b),
        _ => return Err("no JSON object in answer".into()),
    };
    let v: Value = serde_json::from_str(&text[a..=b]).map_err(|e| e.to_string())?;
    if v["kind"] == "unsupported" {
        return Ok(Parsed::Unsupported);
    }
    let spec: FilterSpec = serde_json::from_value(v).map_err(|e| e.to_string())?;
    if spec.region_a.trim().is_empty() {
        return Err("empty region_a".into());
    }
    match spec.kind {
        FilterKind::Between if spec.y.is_none_or(|y| !(spec.x < y)) => Err("between needs x < y".into()),
        FilterKind::RegionVsRegion if spec.region_b.as_deref().is_none_or(|b| b.trim().is_empty()) => {
            Err("region_vs_region needs region_b".into())
        }
        _ if !spec.x.is_finite() => Err("x must be finite".into()),
        _ => Ok(Parsed::Spec(spec)),
    }
}

/// Parses one model answer into a [`FilterSpec`].
pub fn parse_filter_json(text: &str) -> Result<FilterSpec> {
    match parse_answer(text) {
        Ok(Parsed::Spec(s)) => Ok(s),
        Ok(Parsed::Unsupported) => Err(AnnotateError::Unsupported(text.trim().to_string())),
        Err(e) => Err(AnnotateError::Unparseable(e)),
    }
}

/// Asks the model for a structured filter (one retry on malformed output)
/// and resolves its region names to county unions.
pub fn parse_forward_query(llm: &dyn LlmClient, counties: &CountyIndex, question: &str) -> Result<ForwardQuery> {
    let request = LlmRequest::new(LlmTask::StructuredFilter, question, Value::String(question.to_string()));
    let mut last_error = String::new();
    let mut spec = None;
    for _ in 0..2 {
        match parse_answer(&llm.complete(&request)?) {
            Ok(Parsed::Spec(s)) => {
                spec = Some(s);
                break;
            }
            Ok(Parsed::Unsupported) => return Err(AnnotateError::Unsupported(question.to_string())),
            Err(e) => last_error = e,
        }
    }
    let spec = spec.ok_or(AnnotateError::Unparseable(last_error))?;
    let a = resolve_region(llm, counties, &spec.region_a)?;
    let filter = match spec.kind {
        FilterKind::ThresholdAbove => StructuredFilter::threshold_above(a.polygons.clone(), spec.x),
        FilterKind::ThresholdBelow => StructuredFilter::threshold_below(a.polygons.clone(), spec.x),
        FilterKind::Between => StructuredFilter::between(a.polygons.clone(), spec.x, spec.y.unwrap_or(f64::NAN)),
        FilterKind::RegionVsRegion => {
            let b = resolve_region(llm, counties, spec.region_b.as_deref().unwrap_or_default())?;
            let filter = StructuredFilter::region_vs_region(a.polygons.clone(), b.polygons.clone());
            return Ok(ForwardQuery {
                spec,
                regions: vec![a, b],
                filter,
            });
        }
    };
    filter.validate()?;
    Ok(ForwardQuery {
        spec,
        regions: vec![a],
        filter,
    })
}

const ABOVE: [&str; 6] = ["above", "greater than", "higher than", "more than", "exceeds", "exceeding"];
const BELOW: [&str; 6] = ["below", "less than", "lower than", "under", "smaller than", "beneath"];
const HIGHER: [&str; 4] = ["higher", "greater", "wetter", "larger"];
const LOWER: [&str; 4] = ["lower", "smaller", "drier", "less"];
const PREPOSITIONS: [&str; 6] = ["over ", "in ", "within ", "across ", "for ", "of "];

fn number_after(text: &str) -> Option<f64> {
    text.split_whitespace()
        .next()
        .map(|w| w.trim_end_matches([',', '.', '?', '!', ';']))
        .and_then(|w| w.parse().ok())
}

fn numbers(text: &str) -> Vec<f64> {
    text.split_whitespace()
        .filter_map(|w| w.trim_end_matches([',', '?', '!', ';']).trim_end_matches('.').parse().ok())
        .collect()
}

fn clean_region(s: &str) -> String {
    let s = s.trim().trim_end_matches(['?', '.', '!', ',']).trim();
    let lower = s.to_ascii_lowercase();
    let mut out = s;
    for p in ["the region ", "region ", "the "] {
        if lower.starts_with(p) {
            out = &s[p.len()..];
            break;
        }
    }
    out.trim().to_string()
}

/// First region phrase introduced by a preposition, cut at the next keyword.
fn region_phrase(original: &str, lower: &str) -> Option<String> {
    let stops = ["above", "below", "between", "greater", "higher", "lower", "less", "more", "under", "exceed", "is ", "with", "where"];
    let mut best: Option<usize> = None;
    for p in PREPOSITIONS {
        let pat = format!(" {p}");
        let mut from = 0;
        while let Some(i) = lower[from..].find(&pat) {
            let start = from + i + pat.len();
            // "in the range" or "of 0.5" are not regions
            if number_after(&lower[start..]).is_none() {
                best = Some(best.map_or(start, |b: usize| b.min(start)));
                break;
            }
            from = start;
        }
    }
    let start = best?;
    let rest = &lower[start..];
    let end = stops
        .iter()
        .filter_map(|s| rest.find(&format!(" {s}")).or_else(|| rest.starts_with(s).then_some(0)))
        .min()
        .unwrap_or(rest.len());
    let r = clean_region(&original[start..start + end]);
    (!r.is_empty()).then_some(r)
}

fn strip_leading_preposition(s: &str) -> &str {
    let lower = s.to_ascii_lowercase();
    for p in PREPOSITIONS.iter().chain(["than "].iter()) {
        if lower.starts_with(p) {
            return &s[p.len()..];
        }
    }
    s
}

/// Rule-based stand-in for the model: emits the same JSON shapes the
/// structured-filter prompt asks for.
pub fn stub_filter_json(question: &str) -> String {
    let q = question.replace(['−', '–'], "-");
    let lower = q.to_ascii_lowercase();
    let unsupported = r#"{"kind": "unsupported"}"#.to_string();

    // region comparison: "... A is higher than B" / "higher within A than B"
    if let Some(t) = lower.find(" than ") {
        let right = &q[t + 6..];
        if number_after(&lower[t + 6..]).is_none() {
            let left_l = &lower[..t];
            let cmp = HIGHER
                .iter()
                .map(|w| (w, true))
                .chain(LOWER.iter().map(|w| (w, false)))
                .filter_map(|(w, hi)| left_l.rfind(&format!(" {w}")).map(|i| (i + 1, w.len(), hi)))
                .max_by_key(|c| c.0);
            let Some((ci, cl, higher)) = cmp else { return unsupported };
            let after = q[ci + cl..t].trim();
            let after = strip_leading_preposition(after).trim();
            let a = if !after.is_empty() {
                clean_region(after)
            } else {
                let before = q[..ci].trim_end();
                let before = before.strip_suffix(" is").or(before.strip_suffix(" IS")).unwrap_or(before);
                let bl = before.to_ascii_lowercase();
                let cut = ["where ", "whose ", "with ", "nodes ", "over ", "in ", "within "]
                    .iter()
                    .filter_map(|m| bl.rfind(m).map(|i| i + m.len()))
                    .max()
                    .unwrap_or(0);
                clean_region(&before[cut..])
            };
            let b = clean_region(strip_leading_preposition(right.trim()));
            if a.is_empty() || b.is_empty() {
                return unsupported;
            }
            let (a, b) = if higher { (a, b) } else { (b, a) };
            return serde_json::json!({"kind": "region_vs_region", "region_a": a, "region_b": b}).to_string();
        }
    }

    let Some(region) = region_phrase(&q, &lower) else { return unsupported };
    if let Some(i) = lower.find("between ") {
        let nums = numbers(&lower[i + 8..].replace(" and ", " "));
        if nums.len() >= 2 {
            let (x, y) = (nums[0].min(nums[1]), nums[0].max(nums[1]));
            return serde_json::json!({"kind": "between", "region_a": region, "x": x, "y": y}).to_string();
        }
        return unsupported;
    }
    for (words, kind) in [(&ABOVE, "threshold_above"), (&BELOW, "threshold_below")] {
        for w in words {
            if let Some(i) = lower.find(&format!("{w} ")) {
                if let Some(x) = number_after(&lower[i + w.len()..]) {
                    return serde_json::json!({"kind": kind, "region_a": region, "x": x}).to_string();
                }
            }
        }
    }
    unsupported
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::StubLlm;
    use crate::geometry::Polygon;

    fn spec(q: &str) -> FilterSpec {
        parse_filter_json(&stub_filter_json(q)).unwrap()
    }

    #[test]
    fn threshold_question() {
        let s = spec("Show me nodes with average precipitation over Southern California above 0");
        assert_eq!(s.kind, FilterKind::ThresholdAbove);
        assert_eq!(s.region_a, "Southern California");
        assert_eq!(s.x, 0.0);
        let s = spec("nodes whose mean over Bay Area is below -0.25?");
        assert_eq!((s.kind, s.region_a.as_str(), s.x), (FilterKind::ThresholdBelow, "Bay Area", -0.25));
    }

    #[test]
    fn between_question() {
        let s = spec("nodes between −1 and 1 over region R");
        assert_eq!(s.kind, FilterKind::Between);
        assert_eq!((s.region_a.as_str(), s.x, s.y), ("R", -1.0, Some(1.0)));
    }

    #[test]
    fn region_comparison_questions() {
        let s = spec("nodes where A is higher than B");
        assert_eq!(s.kind, FilterKind::RegionVsRegion);
        assert_eq!((s.region_a.as_str(), s.region_b.as_deref()), ("A", Some("B")));
        let s = spec("grid_ids with average higher within Central Valley than Southern California");
        assert_eq!((s.region_a.as_str(), s.region_b.as_deref()), ("Central Valley", Some("Southern California")));
        let s = spec("nodes where North is drier than South");
        assert_eq!((s.region_a.as_str(), s.region_b.as_deref()), ("South", Some("North")));
    }

    #[test]
    fn unsupported_and_malformed() {
        assert!(matches!(parse_filter_json(&stub_filter_json("tell me a joke")), Err(AnnotateError::Unsupported(_))));
        assert!(matches!(parse_filter_json("no json"), Err(AnnotateError::Unparseable(_))));
        assert!(parse_filter_json(r#"{"kind":"between","region_a":"R","x":2,"y":1}"#).is_err());
    }

    struct Flaky(std::sync::atomic::AtomicUsize);
    impl LlmClient for Flaky {
        fn complete(&self, r: &LlmRequest) -> std::result::Result<String, super::super::LlmError> {
            if r.task == LlmTask::StructuredFilter {
                let n = self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                return Ok(if n == 0 { "oops".into() } else { r#"{"kind":"threshold_above","region_a":"A-XX","x":0.5}"#.into() });
            }
            StubLlm::new().complete(r)
        }
    }

    fn index() -> CountyIndex {
        let mut idx = CountyIndex::default();
        idx.insert("A-XX", vec![Polygon::from_ring(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])]).unwrap();
        idx
    }

    #[test]
    fn one_retry_on_malformed_output() {
        let llm = Flaky(Default::default());
        let q = parse_forward_query(&llm, &index(), "anything").unwrap();
        assert_eq!(q.spec.x, 0.5);
        assert_eq!(q.regions[0].counties, vec!["A-XX".to_string()]);
        assert_eq!(llm.0.load(std::sync::atomic::Ordering::SeqCst), 2);

        struct Broken;
        impl LlmClient for Broken {
            fn complete(&self, _: &LlmRequest) -> std::result::Result<String, super::super::LlmError> {
                Ok("still not json".into())
            }
        }
        assert!(matches!(parse_forward_query(&Broken, &index(), "q"), Err(AnnotateError::Unparseable(_))));
    }

    #[test]
    fn stub_pipeline_resolves_county_key() {
        let q = parse_forward_query(&StubLlm::new(), &index(), "nodes with mean over A-XX above 0.2").unwrap();
        assert_eq!(q.filter.kind, FilterKind::ThresholdAbove);
        assert_eq!(q.filter.x, 0.2);
        assert_eq!(q.filter.region_a.len(), 1);
    }
}
