//! Tolerant JSON reading for model-authored text.
//!
//! Accepts Markdown code fences around the document and trailing commas
//! before `}` or `]`. Both are blanked out in place so serde_json's
//! line/column positions still point into the original text.

use serde::de::DeserializeOwned;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct JsonSyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

pub(crate) fn relax(text: &str) -> String {
    let unfenced: Vec<String> = text
        .split('\n')
        .map(|line| {
            if line.trim_start().starts_with("```") {
                " ".repeat(line.len())
            } else {
                line.to_owned()
            }
        })
        .collect();
    let mut bytes = unfenced.join("\n").into_bytes();

    let mut in_string = false;
    let mut escaped = false;
    for i in 0..bytes.len() {
        let b = bytes[i];
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b',' => {
                let next = bytes[i + 1..].iter().find(|c| !c.is_ascii_whitespace());
                if matches!(next, Some(b'}') | Some(b']')) {
                    bytes[i] = b' ';
                }
            }
            _ => {}
        }
    }
    String::from_utf8(bytes).expect("only ASCII bytes were replaced")
}

pub(crate) fn from_relaxed<T: DeserializeOwned>(text: &str) -> Result<T, JsonSyntaxError> {
    serde_json::from_str(&relax(text)).map_err(|e| JsonSyntaxError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}
