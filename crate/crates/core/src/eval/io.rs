//! Line-delimited JSON task and result files.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scoring::{PromptTask, ScoringRule};
use crate::error::{Error, Result};

/// One multiple-choice task as stored on disk, with text fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub context: String,
    pub candidates: Vec<String>,
    pub gold: usize,
    pub rule: ScoringRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_context: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool: Vec<String>,
}

impl TaskRecord {
    pub fn to_task(&self, tokenize: &dyn Fn(&str) -> Vec<u32>) -> Result<PromptTask> {
        let task = PromptTask {
            context: tokenize(&self.context),
            candidates: self.candidates.iter().map(|c| tokenize(c)).collect(),
            rule: self.rule,
            answer_context: self.answer_context.as_deref().map(tokenize),
            gold: self.gold,
            pool: self.pool.iter().map(|p| tokenize(p)).collect(),
        };
        task.validate()?;
        Ok(task)
    }
}

/// Reads `path` as JSON lines; blank lines are skipped. Task ids default to
/// the 1-based line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn read_tasks(path: &Path) -> Result<Vec<(String, TaskRecord)>> {
    Ok(read_jsonl::<TaskRecord>(path)?
        .into_iter()
        .map(|(line, r)| (r.id.clone().unwrap_or_else(|| line.to_string()), r))
        .collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_file_round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        std::fs::write(
            &path,
            "{\"context\":\"ab\",\"candidates\":[\"c\",\"d\"],\"gold\":1,\"rule\":\"SUM_LL\"}\n\n{\"context\":",
        )
        .unwrap();
        match read_tasks(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(
            &path,
            "{\"id\":\"x\",\"context\":\"ab\",\"candidates\":[\"c\",\"d\"],\"gold\":1,\"rule\":\"SUM_LL\"}\n",
        )
        .unwrap();
        let tasks = read_tasks(&path).unwrap();
        assert_eq!(tasks[0].0, "x");
        let bytes = |s: &str| s.bytes().map(u32::from).collect();
        let t = tasks[0].1.to_task(&bytes).unwrap();
        assert_eq!(t.context, vec![97, 98]);
    }
}
