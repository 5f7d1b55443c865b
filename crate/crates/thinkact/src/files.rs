//! JSON and JSONL artifact files. Every record type has a closed schema,
//! so a line with an unknown field is a schema error, not a silent drop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thinkact_core::data::ActionTask;

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl FileError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FileError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn schema(path: &Path, line: usize, message: impl ToString) -> Self {
        FileError::Schema {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), FileError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| FileError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Writes one JSON object per line, LF-terminated, replacing the file.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FileError> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| FileError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| FileError::schema(path, 0, e))?;
        writeln!(out, "{line}").map_err(|e| FileError::io(path, e))?;
    }
    out.flush().map_err(|e| FileError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FileError> {
    let file = File::open(path).map_err(|e| FileError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FileError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| FileError::schema(path, i + 1, e))?);
    }
    Ok(records)
}

/// Appends records to a JSONL file and syncs it.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FileError> {
    ensure_parent(path)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FileError::io(path, e))?;
    let mut buf = String::new();
    for record in records {
        buf.push_str(&serde_json::to_string(record).map_err(|e| FileError::schema(path, 0, e))?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| FileError::io(path, e))?;
    file.sync_data().map_err(|e| FileError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| FileError::schema(path, 0, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| FileError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    let text = fs::read_to_string(path).map_err(|e| FileError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FileError::schema(path, e.line(), e))
}

/// Task datasets are stored sorted by task id.
pub fn write_tasks(path: &Path, tasks: &[ActionTask]) -> Result<(), FileError> {
    let mut sorted: Vec<&ActionTask> = tasks.iter().collect();
    sorted.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    write_jsonl(path, &sorted)
}

pub fn read_tasks(path: &Path) -> Result<Vec<ActionTask>, FileError> {
    let tasks: Vec<ActionTask> = read_jsonl(path)?;
    if let Some(w) = tasks.windows(2).find(|w| w[0].task_id >= w[1].task_id) {
        return Err(FileError::schema(
            path,
            0,
            format!("task ids out of order at {}", w[1].task_id),
        ));
    }
    Ok(tasks)
}

/// A rendered reference trajectory, as stored by `render-refs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRecord {
    pub task_id: String,
    pub document: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use thinkact_core::data::{action_only, generate_tasks};

    #[test]
    fn test_empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_jsonl::<ActionTask>(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(read_jsonl::<ActionTask>(&path).unwrap().is_empty());
    }

    #[test]
    fn test_tasks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/tasks.jsonl");
        let tasks = generate_tasks(1000, 3, &action_only()).unwrap();
        write_tasks(&path, &tasks).unwrap();
        assert_eq!(read_tasks(&path).unwrap(), tasks);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1000);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn test_unknown_field_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let tasks = generate_tasks(2, 3, &action_only()).unwrap();
        let mut v = serde_json::to_value(&tasks[1]).unwrap();
        v["foo"] = 1.into();
        let text = format!("{}\n{}\n", serde_json::to_string(&tasks[0]).unwrap(), v);
        fs::write(&path, text).unwrap();
        match read_jsonl::<ActionTask>(&path) {
            Err(FileError::Schema { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("foo"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn test_missing_file_is_io_error() {
        assert!(matches!(
            read_jsonl::<ActionTask>(Path::new("/nonexistent/x.jsonl")),
            Err(FileError::Io { .. })
        ));
    }

    #[test]
    fn test_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let r = ReferenceRecord {
            task_id: "t".into(),
            document: "<answer>1</answer>".into(),
        };
        append_jsonl(&path, std::slice::from_ref(&r)).unwrap();
        append_jsonl(&path, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_jsonl::<ReferenceRecord>(&path).unwrap(), vec![r.clone(), r]);
    }
}
