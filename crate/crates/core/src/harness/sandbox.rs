//! Test execution. Shell tests run in a throwaway directory with a wall-clock
//! limit; toy-language tasks are graded in-process.

use serde::{Deserialize, Serialize};

use super::corpus::Task;
use super::toylang;
use crate::error::{Error, Result};

/// Overrides the directory sandboxes are created in.
pub const SANDBOX_ENV: &str = "ANCHOR_SANDBOX_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    /// The command, or `toy:<input>` for entry checks.
    pub name: String,
    pub passed: bool,
    pub exit_status: Option<i32>,
    pub output: String,
    pub duration_ms: f64,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub passed: bool,
    pub outcomes: Vec<TestOutcome>,
    pub timed_out: bool,
}

impl TestResult {
    fn from_outcomes(outcomes: Vec<TestOutcome>) -> Self {
        let timed_out = outcomes.iter().any(|o| o.timed_out);
        TestResult {
            passed: !timed_out && !outcomes.is_empty() && outcomes.iter().all(|o| o.passed),
            outcomes,
            timed_out,
        }
    }
}

/// Grade `program` against `task`. Tasks with entry checks use the toy
/// evaluator; all others run their shell tests.
pub fn run_tests(program: &str, task: &Task, timeout_ms: u64) -> Result<TestResult> {
    if timeout_ms == 0 {
        return Err(Error::arg("timeout must be at least 1 ms"));
    }
    if let Some(checks) = &task.entry_check {
        let outcomes = toylang::check(program, checks)
            .into_iter()
            .zip(checks)
            .map(|((passed, got), c)| TestOutcome {
                name: format!("toy:{}", c.input),
                passed,
                exit_status: None,
                output: got,
                duration_ms: 0.0,
                timed_out: false,
            })
            .collect();
        return Ok(TestResult::from_outcomes(outcomes));
    }
    let mut outcomes = Vec::with_capacity(task.tests.len());
    for test in &task.tests {
        outcomes.push(process::run_command(program, &test.cmd, &test.file, timeout_ms)?);
    }
    Ok(TestResult::from_outcomes(outcomes))
}

#[cfg(unix)]
mod process {
    use std::io::Read;
    use std::os::unix::process::CommandExt;
    use std::path::PathBuf;
    use std::process::{Command, Stdio};
    use std::thread;
    use std::time::{Duration, Instant};

    use super::{TestOutcome, SANDBOX_ENV};
    use crate::error::{Error, Result};

    const POLL: Duration = Duration::from_millis(2);
    const MAX_CAPTURE: usize = 64 * 1024;

    fn sandbox_root() -> PathBuf {
        std::env::var_os(SANDBOX_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(std::env::temp_dir)
    }

    fn capture<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<Vec<u8>> {
        thread::spawn(move || {
            let mut buf = Vec::new();
            if let Some(mut p) = pipe {
                let _ = p.read_to_end(&mut buf);
            }
            buf.truncate(MAX_CAPTURE);
            buf
        })
    }

    pub(super) fn run_command(program: &str, cmd: &str, file: &str, timeout_ms: u64) -> Result<TestOutcome> {
        let env = |what: &str, e: std::io::Error| Error::Environment(format!("{what}: {e}"));
        let dir = tempfile::Builder::new()
            .prefix("anchor-sandbox-")
            .tempdir_in(sandbox_root())
            .map_err(|e| env("cannot create sandbox", e))?;
        std::fs::write(dir.path().join(file), program).map_err(|e| env("cannot write program", e))?;

        let start = Instant::now();
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .current_dir(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| env("cannot spawn test", e))?;
        let out = capture(child.stdout.take());
        let err = capture(child.stderr.take());

        let limit = Duration::from_millis(timeout_ms);
        let mut timed_out = false;
        let status = loop {
            match child.try_wait().map_err(|e| env("cannot poll test", e))? {
                Some(status) => break status,
                None if start.elapsed() >= limit => {
                    timed_out = true;
                    // The whole group, so grandchildren release the pipes.
                    unsafe {
                        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
                    }
                    break child.wait().map_err(|e| env("cannot reap test", e))?;
                }
                None => thread::sleep(POLL),
            }
        };
        let duration_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut output = out.join().unwrap_or_default();
        output.extend(err.join().unwrap_or_default());
        dir.close().map_err(|e| env("cannot remove sandbox", e))?;

        let exit_status = status.code();
        Ok(TestOutcome {
            name: cmd.to_string(),
            passed: !timed_out && exit_status == Some(0),
            exit_status,
            output: String::from_utf8_lossy(&output).into_owned(),
            duration_ms,
            timed_out,
        })
    }
}

#[cfg(not(unix))]
mod process {
    use super::TestOutcome;
    use crate::error::{Error, Result};

    pub(super) fn run_command(_: &str, _: &str, _: &str, _: u64) -> Result<TestOutcome> {
        Err(Error::Environment(
            "shell tests need a unix process sandbox".into(),
        ))
    }
}
