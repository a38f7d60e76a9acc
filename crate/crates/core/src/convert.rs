//! Converters from native corpus releases into the conversation format.
//!
//! * SwDA: the per-conversation utterance CSV files with at least the columns
//!   `conversation_no`, `act_tag`, `caller` and `text`. Disfluency markup is
//!   stripped and `+` (continuation) tags take the caller's previous tag.
//! * MapTask: one `speaker|utterance|tag` line per utterance; each input file (or
//!   blank-line separated block) is one dialogue.
//!
//! An optional label map (`raw_tag<TAB>label` per line) renames tags; tags absent
//! from a given map are kept unchanged.

use std::collections::HashMap;
use std::path::Path;

use crate::corpus::{normalize_and_tokenize, Conversation, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    Swda,
    MapTask,
}

pub fn load_label_map(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (from, to) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected raw_tag<TAB>label".into(),
        })?;
        map.insert(from.trim().to_string(), to.trim().to_string());
    }
    Ok(map)
}

/// Removes SwDA transcription markup: `{D ...}` style annotations, brackets,
/// restart markers, slashes and `<noise>` tags.
pub fn clean_swda_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '<' => {
                for d in chars.by_ref() {
                    if d == '>' {
                        break;
                    }
                }
                out.push(' ');
            }
            '{' => {
                // the annotation letter directly after the brace
                if chars.peek().is_some_and(|d| d.is_ascii_alphabetic()) {
                    chars.next();
                }
                out.push(' ');
            }
            '}' | '[' | ']' | '+' | '/' | '#' | '(' | ')' => out.push(' '),
            _ => out.push(c),
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn relabel(tag: &str, map: Option<&HashMap<String, String>>) -> String {
    map.and_then(|m| m.get(tag)).cloned().unwrap_or_else(|| tag.to_string())
}

/// Parses one SwDA utterance CSV into conversations keyed by `conversation_no`,
/// in order of first appearance.
pub fn parse_swda(text: &str, map: Option<&HashMap<String, String>>) -> Result<Vec<Conversation>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Data(format!("SwDA header: {e}")))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("not a SwDA utterance CSV: missing column {name:?}")))
    };
    let (conv_col, tag_col, caller_col, text_col) =
        (column("conversation_no")?, column("act_tag")?, column("caller")?, column("text")?);
    let mut order: Vec<String> = Vec::new();
    let mut by_conv: HashMap<String, Vec<Utterance>> = HashMap::new();
    let mut last_tag: HashMap<(String, String), String> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let (conv, raw_tag, caller) = (field(conv_col), field(tag_col), field(caller_col));
        let tag = if raw_tag == "+" {
            match last_tag.get(&(conv.clone(), caller.clone())) {
                Some(t) => t.clone(),
                None => {
                    log::warn!("row {}: continuation with no earlier tag, dropped", i + 2);
                    continue;
                }
            }
        } else {
            relabel(&raw_tag, map)
        };
        let tokens = normalize_and_tokenize(&clean_swda_text(&field(text_col)));
        if tokens.is_empty() {
            continue;
        }
        last_tag.insert((conv.clone(), caller.clone()), tag.clone());
        if !by_conv.contains_key(&conv) {
            order.push(conv.clone());
        }
        by_conv.entry(conv).or_default().push(Utterance {
            speaker: caller,
            tokens,
            label: Some(tag),
        });
    }
    Ok(order
        .into_iter()
        .map(|id| Conversation {
            utterances: by_conv.remove(&id).unwrap_or_default(),
            id,
        })
        .collect())
}

/// Parses MapTask `speaker|utterance|tag` lines.
pub fn parse_maptask(text: &str, map: Option<&HashMap<String, String>>) -> Result<Vec<Conversation>> {
    let mut conversations = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                conversations.push(std::mem::take(&mut current));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        let [speaker, utterance, tag] = fields.as_slice() else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected speaker|utterance|tag".into(),
            });
        };
        let tokens = normalize_and_tokenize(utterance);
        if tokens.is_empty() || tag.trim().is_empty() {
            continue;
        }
        current.push(Utterance {
            speaker: speaker.trim().to_string(),
            tokens,
            label: Some(relabel(tag.trim(), map)),
        });
    }
    if !current.is_empty() {
        conversations.push(current);
    }
    Ok(conversations
        .into_iter()
        .map(|utterances| Conversation {
            id: String::new(),
            utterances,
        })
        .collect())
}

/// Converts every input file, in order.
pub fn convert_files(
    format: SourceFormat,
    inputs: &[&Path],
    map: Option<&HashMap<String, String>>,
) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(*path, e))?;
        let convs = match format {
            SourceFormat::Swda => parse_swda(&text, map),
            SourceFormat::MapTask => parse_maptask(&text, map),
        }
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        out.extend(convs);
    }
    if out.is_empty() {
        return Err(Error::Data("no utterances found in the input".into()));
    }
    for (i, c) in out.iter_mut().enumerate() {
        c.id = format!("conv{:05}", i + 1);
    }
    Ok(out)
}
