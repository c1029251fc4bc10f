use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_SOLUTION_FILE: &str = "solution.txt";

fn default_file() -> String {
    DEFAULT_SOLUTION_FILE.to_string()
}

/// A shell command run against the program file; exit status 0 passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCommand {
    pub cmd: String,
    #[serde(default = "default_file")]
    pub file: String,
}

/// Expected output of the toy-language program for one input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryCheck {
    #[serde(rename = "in")]
    pub input: String,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    /// Prompt with anchored spans marked up.
    pub prompt: String,
    #[serde(default)]
    pub tests: Vec<TestCommand>,
    #[serde(default)]
    pub entry_check: Option<Vec<EntryCheck>>,
    #[serde(default)]
    pub difficulty: Option<String>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::arg("task id must be non-empty"));
        }
        let checks = self.entry_check.as_ref().map_or(0, Vec::len);
        if self.tests.is_empty() && checks == 0 {
            return Err(Error::arg(format!(
                "task {:?} has neither tests nor entry checks",
                self.id
            )));
        }
        for t in &self.tests {
            let p = Path::new(&t.file);
            if t.file.is_empty()
                || p.is_absolute()
                || p.components().count() != 1
                || t.file == ".."
                || t.file == "."
            {
                return Err(Error::arg(format!(
                    "task {:?}: program file {:?} must be a plain file name",
                    self.id, t.file
                )));
            }
        }
        Ok(())
    }

    /// Grouping label for length statistics.
    pub fn group(&self) -> &str {
        self.difficulty.as_deref().unwrap_or("all")
    }
}

pub fn parse_corpus<R: BufRead>(input: R, name: &str) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            message,
        };
        let task: Task = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        task.validate().map_err(|e| err(e.to_string()))?;
        if !ids.insert(task.id.clone()) {
            return Err(err(format!("duplicate task id {:?}", task.id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Task>> {
    let file = File::open(path)?;
    parse_corpus(BufReader::new(file), &path.display().to_string())
}

pub fn write_corpus<W: Write>(tasks: &[Task], mut out: W) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
