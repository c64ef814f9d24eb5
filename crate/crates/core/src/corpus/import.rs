use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use super::Response;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(SourceFormat::Csv),
            "jsonl" | "ndjson" => Ok(SourceFormat::Jsonl),
            other => Err(Error::invalid(format!("unknown source format `{other}`"))),
        }
    }
}

/// Maps source columns (CSV headers or JSON keys) onto response fields.
///
/// With `id_column = None`, ids are synthesized from the 1-based row index,
/// zero-padded to the width of the row count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportMapping {
    pub id_column: Option<String>,
    pub text_column: String,
    #[serde(default)]
    pub code_column: Option<String>,
    /// Columns copied into metadata. `None` copies every unmapped column.
    #[serde(default)]
    pub metadata_columns: Option<Vec<String>>,
}

impl Default for ImportMapping {
    fn default() -> Self {
        Self {
            id_column: Some("id".into()),
            text_column: "text".into(),
            code_column: Some("code".into()),
            metadata_columns: None,
        }
    }
}

struct RawRow {
    line: u64,
    fields: BTreeMap<String, String>,
}

pub fn import_responses<R: Read>(
    source: R,
    format: SourceFormat,
    mapping: &ImportMapping,
) -> Result<Vec<Response>> {
    let rows = match format {
        SourceFormat::Csv => read_csv(source)?,
        SourceFormat::Jsonl => read_jsonl(source, mapping)?,
    };
    build_responses(rows, mapping)
}

fn read_csv<R: Read>(source: R) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fields = headers
            .iter()
            .cloned()
            .zip(record.iter().map(str::to_string))
            .collect();
        rows.push(RawRow { line, fields });
    }
    Ok(rows)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn read_jsonl<R: Read>(source: R, mapping: &ImportMapping) -> Result<Vec<RawRow>> {
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let serde_json::Value::Object(obj) = value else {
            return Err(Error::Parse {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        let mut fields = BTreeMap::new();
        for (key, value) in obj {
            match value {
                serde_json::Value::Null => {}
                serde_json::Value::String(s) => {
                    fields.insert(key, s);
                }
                // nested metadata objects flatten into the field map
                serde_json::Value::Object(inner) if key == "metadata" => {
                    for (k, v) in inner {
                        fields.insert(k, json_scalar(v));
                    }
                }
                other => {
                    let is_text = key == mapping.text_column;
                    if is_text {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("field `{key}` must be a string"),
                        });
                    }
                    fields.insert(key, json_scalar(other));
                }
            }
        }
        rows.push(RawRow {
            line: line_no,
            fields,
        });
    }
    Ok(rows)
}

fn json_scalar(v: serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

fn build_responses(rows: Vec<RawRow>, mapping: &ImportMapping) -> Result<Vec<Response>> {
    let width = rows.len().to_string().len();
    let mut responses = Vec::with_capacity(rows.len());
    for (idx, mut row) in rows.into_iter().enumerate() {
        let row_index = idx + 1;
        let id = match &mapping.id_column {
            Some(col) => row.fields.remove(col).ok_or_else(|| Error::Parse {
                line: row.line,
                message: format!("missing id column `{col}`"),
            })?,
            None => format!("{row_index:0width$}"),
        };
        let text = row
            .fields
            .remove(&mapping.text_column)
            .ok_or_else(|| Error::Parse {
                line: row.line,
                message: format!("missing text column `{}`", mapping.text_column),
            })?;
        if text.trim().is_empty() {
            return Err(Error::EmptyText { row: row_index });
        }
        let human_code = mapping
            .code_column
            .as_ref()
            .and_then(|col| row.fields.remove(col))
            .filter(|c| !c.is_empty());
        let metadata = match &mapping.metadata_columns {
            None => row.fields,
            Some(cols) => cols
                .iter()
                .filter_map(|c| row.fields.remove_entry(c))
                .collect(),
        };
        responses.push(Response {
            id,
            text,
            human_code,
            metadata,
        });
    }
    check_unique(&responses)?;
    Ok(responses)
}

fn check_unique(responses: &[Response]) -> Result<()> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in responses {
        *counts.entry(r.id.as_str()).or_default() += 1;
    }
    let mut reported = std::collections::HashSet::new();
    let dups: Vec<String> = responses
        .iter()
        .filter(|r| counts[r.id.as_str()] > 1 && reported.insert(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if dups.is_empty() {
        Ok(())
    } else {
        Err(Error::DuplicateIds(dups))
    }
}
