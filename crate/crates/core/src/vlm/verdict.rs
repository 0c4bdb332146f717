//! Parsing of structured `ID: static|transient` replies.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::Verdict;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVerdict {
    pub verdict: Verdict,
    pub rationale: String,
    /// False when the label was absent from the reply and defaulted.
    pub parsed: bool,
}

/// One verdict per expected label.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VlmVerdict {
    pub labels: BTreeMap<u32, LabelVerdict>,
}

fn line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(\d+)\s*[:=]\s*\**\s*(static|transient)\b([^\r\n]*)").unwrap())
}

fn clean_reason(raw: &str) -> String {
    raw.trim()
        .trim_start_matches(|c: char| c == '*' || c == '-' || c == ',' || c == ':' || c.is_whitespace() || !c.is_ascii())
        .trim()
        .to_string()
}

/// Extracts verdicts case-insensitively; the first occurrence of a label
/// wins. Expected labels missing from the reply default to transient;
/// unexpected labels are ignored with a warning.
pub fn parse_verdict(response: &str, expected: &[u32]) -> Result<VlmVerdict> {
    let mut found: BTreeMap<u32, (Verdict, String)> = BTreeMap::new();
    for cap in line_regex().captures_iter(response) {
        let Ok(id) = cap[1].parse::<u32>() else { continue };
        let verdict = if cap[2].eq_ignore_ascii_case("static") {
            Verdict::Static
        } else {
            Verdict::Transient
        };
        found.entry(id).or_insert_with(|| (verdict, clean_reason(&cap[3])));
    }
    if found.is_empty() {
        return Err(Error::VerdictParse);
    }
    for id in found.keys().filter(|id| !expected.contains(id)) {
        warn!("vlm reply mentions unexpected identifier {id}");
    }
    let labels = expected
        .iter()
        .map(|&id| {
            let v = match found.get(&id) {
                Some((verdict, rationale)) => LabelVerdict {
                    verdict: *verdict,
                    rationale: rationale.clone(),
                    parsed: true,
                },
                None => LabelVerdict {
                    verdict: Verdict::Transient,
                    rationale: "no verdict in reply".into(),
                    parsed: false,
                },
            };
            (id, v)
        })
        .collect();
    Ok(VlmVerdict { labels })
}
