//! Deterministic scripted backend.
//!
//! A scenario file looks like
//!
//! ```json
//! {
//!   "strict": true,
//!   "entries": [
//!     {"match": {"fingerprint": "b541f3a4..."}, "response": "..."},
//!     {"match": {"position": 0}, "response": "..."},
//!     {"match": {"pattern": "Task: Collect datasets"}, "response": "..."}
//!   ],
//!   "tools": [
//!     {"name": "ocr2text", "args_key": "image.png", "result": "...", "ok": true}
//!   ]
//! }
//! ```
//!
//! Resolution order is fingerprint, then position (the 0-based index of the
//! request among all requests this backend has served), then pattern. A
//! pattern is a regex (`.` matches newlines) over the rendered transcript.
//! Pattern entries are consumed in file order: each answers once, and after
//! every entry matching a request has been used the last of them keeps
//! answering. Positions are only reproducible when requests arrive serially,
//! so concurrent phases should be scripted with fingerprints or patterns.
//!
//! Unmatched requests fail in strict mode and echo the last message otherwise.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tools::{MockResults, ToolCatalog};
use super::{fingerprint, render_transcript, Backend, BackendError, BackendExchange, Message};

#[derive(Debug, Clone)]
pub enum MatchKey {
    Fingerprint(String),
    Position(usize),
    Pattern(Regex),
}

impl PartialEq for MatchKey {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (MatchKey::Fingerprint(a), MatchKey::Fingerprint(b)) => a == b,
            (MatchKey::Position(a), MatchKey::Position(b)) => a == b,
            (MatchKey::Pattern(a), MatchKey::Pattern(b)) => a.as_str() == b.as_str(),
            _ => false,
        }
    }
}

impl MatchKey {
    pub fn pattern(source: &str) -> Result<MatchKey, regex::Error> {
        RegexBuilder::new(source)
            .dot_matches_new_line(true)
            .build()
            .map(MatchKey::Pattern)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEntry {
    pub key: MatchKey,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolFixture {
    pub name: String,
    pub args_key: String,
    pub result: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedScenario {
    pub entries: Vec<ScenarioEntry>,
    pub tools: Vec<ToolFixture>,
    pub strict: bool,
}

impl Default for ScriptedScenario {
    fn default() -> Self {
        ScriptedScenario {
            entries: Vec::new(),
            tools: Vec::new(),
            strict: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireScenario {
    #[serde(default = "default_strict")]
    strict: bool,
    #[serde(default)]
    entries: Vec<WireEntry>,
    #[serde(default)]
    tools: Vec<ToolFixture>,
}

fn default_strict() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEntry {
    #[serde(rename = "match")]
    key: WireMatch,
    response: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum WireMatch {
    Fingerprint(String),
    Position(usize),
    Pattern(String),
}

fn line_of(text: &str, needle: &str, occurrence: usize) -> usize {
    text.match_indices(needle)
        .nth(occurrence)
        .map(|(at, _)| text[..at].matches('\n').count() + 1)
        .unwrap_or(0)
}

impl ScriptedScenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        if text.trim().is_empty() {
            return Ok(ScriptedScenario::default());
        }
        let wire: WireScenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;

        let mut fingerprints = BTreeSet::new();
        let mut positions = BTreeSet::new();
        let mut entries = Vec::with_capacity(wire.entries.len());
        for entry in wire.entries {
            let key = match entry.key {
                WireMatch::Fingerprint(fp) => {
                    if !fingerprints.insert(fp.clone()) {
                        return Err(ScenarioError::Parse {
                            line: line_of(text, &format!("\"{fp}\""), 1),
                            message: format!("duplicate fingerprint {fp}"),
                        });
                    }
                    MatchKey::Fingerprint(fp)
                }
                WireMatch::Position(p) => {
                    if !positions.insert(p) {
                        return Err(ScenarioError::Parse {
                            line: 0,
                            message: format!("duplicate position {p}"),
                        });
                    }
                    MatchKey::Position(p)
                }
                WireMatch::Pattern(src) => MatchKey::pattern(&src).map_err(|e| ScenarioError::Parse {
                    line: line_of(text, &src, 0),
                    message: format!("bad pattern: {e}"),
                })?,
            };
            entries.push(ScenarioEntry {
                key,
                response: entry.response,
            });
        }
        Ok(ScriptedScenario {
            entries,
            tools: wire.tools,
            strict: wire.strict,
        })
    }

    pub fn to_json(&self) -> String {
        let wire = WireScenario {
            strict: self.strict,
            entries: self
                .entries
                .iter()
                .map(|e| WireEntry {
                    key: match &e.key {
                        MatchKey::Fingerprint(fp) => WireMatch::Fingerprint(fp.clone()),
                        MatchKey::Position(p) => WireMatch::Position(*p),
                        MatchKey::Pattern(re) => WireMatch::Pattern(re.as_str().to_owned()),
                    },
                    response: e.response.clone(),
                })
                .collect(),
            tools: self.tools.clone(),
        };
        serde_json::to_string_pretty(&wire).expect("scenario serialization is infallible")
    }

    /// Standard tool catalog with every tool named in `tools` backed by a mock.
    pub fn tool_catalog(&self) -> ToolCatalog {
        let mut catalog = ToolCatalog::standard();
        let mut names: Vec<&str> = self.tools.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        for name in names {
            let mut results = MockResults::default();
            for fixture in self.tools.iter().filter(|t| t.name == name) {
                results.insert(&fixture.args_key, fixture.result.clone(), fixture.ok);
            }
            catalog.set_mock(name, results);
        }
        catalog
    }
}

pub fn load_scenario(path: &Path) -> Result<ScriptedScenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    ScriptedScenario::parse(&text)
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
struct Cursor {
    served: usize,
    used: BTreeSet<usize>,
}

/// Backend answering from a [`ScriptedScenario`]; logs every request.
#[derive(Debug)]
pub struct ScriptedBackend {
    scenario: ScriptedScenario,
    cursor: Mutex<Cursor>,
    log: Mutex<Vec<Vec<Message>>>,
}

impl ScriptedBackend {
    pub fn new(scenario: ScriptedScenario) -> Self {
        ScriptedBackend {
            scenario,
            cursor: Mutex::new(Cursor::default()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn scenario(&self) -> &ScriptedScenario {
        &self.scenario
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<Vec<Message>> {
        self.log.lock().unwrap().clone()
    }

    fn resolve(&self, messages: &[Message], cursor: &mut Cursor) -> Result<String, BackendError> {
        let fp = fingerprint(messages);
        let position = cursor.served;
        cursor.served += 1;

        let entries = &self.scenario.entries;
        if let Some(e) = entries
            .iter()
            .find(|e| matches!(&e.key, MatchKey::Fingerprint(k) if *k == fp))
        {
            return Ok(e.response.clone());
        }
        if let Some(e) = entries
            .iter()
            .find(|e| matches!(&e.key, MatchKey::Position(p) if *p == position))
        {
            return Ok(e.response.clone());
        }

        let transcript = render_transcript(messages);
        let matching: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(&e.key, MatchKey::Pattern(re) if re.is_match(&transcript)))
            .map(|(i, _)| i)
            .collect();
        if let Some(&last) = matching.last() {
            let chosen = matching
                .iter()
                .copied()
                .find(|i| !cursor.used.contains(i))
                .unwrap_or(last);
            cursor.used.insert(chosen);
            return Ok(entries[chosen].response.clone());
        }

        if self.scenario.strict {
            Err(BackendError::ScenarioMiss {
                fingerprint: fp,
                position,
            })
        } else {
            Ok(messages.last().map(|m| m.content.clone()).unwrap_or_default())
        }
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn complete(&self, messages: &[Message]) -> Result<BackendExchange, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::EmptyRequest);
        }
        self.log.lock().unwrap().push(messages.to_vec());
        let response = {
            let mut cursor = self.cursor.lock().unwrap();
            self.resolve(messages, &mut cursor)?
        };
        Ok(BackendExchange::new(messages.to_vec(), response, Duration::ZERO))
    }

    fn cursor(&self) -> Option<serde_json::Value> {
        let cursor = self.cursor.lock().unwrap().clone();
        Some(serde_json::to_value(cursor).expect("cursor serializes"))
    }

    fn restore_cursor(&self, value: &serde_json::Value) -> Result<(), BackendError> {
        let restored: Cursor =
            serde_json::from_value(value.clone()).map_err(|e| BackendError::Cursor(e.to_string()))?;
        *self.cursor.lock().unwrap() = restored;
        Ok(())
    }
}
