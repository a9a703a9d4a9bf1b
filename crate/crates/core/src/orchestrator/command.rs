use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{AgentRunner, Task};
use crate::gateway::UsageCounters;
use crate::gradient::{Outcome, Step, Trajectory};
use crate::graph::MaterializedConfig;
use crate::util::extract_json_object;

/// Runs an external agent process per task.
///
/// The process receives `{"config": {root: text}, "task": Task}` on stdin
/// and must print one trajectory object on stdout. Only `steps` is
/// required; the task id and query are filled in from the task.
#[derive(Debug, Clone)]
pub struct CommandRunner {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

#[derive(Deserialize)]
struct RawTrajectory {
    steps: Vec<Step>,
    #[serde(default)]
    final_answer: Option<String>,
    #[serde(default)]
    outcome: Option<Outcome>,
    #[serde(default)]
    usage: UsageCounters,
}

impl CommandRunner {
    pub fn new(command: &[String], timeout: Duration) -> Result<Self, String> {
        let (program, args) = command.split_first().ok_or("runner command is empty")?;
        Ok(Self {
            program: program.clone(),
            args: args.to_vec(),
            timeout,
        })
    }

    fn invoke(&self, input: &[u8]) -> Result<String, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("cannot start `{}`: {e}", self.program))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = input.to_vec();
        let writer = thread::spawn(move || stdin.write_all(&input));
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = thread::spawn(move || {
            let mut s = String::new();
            stdout.read_to_string(&mut s).map(|_| s)
        });
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait().map_err(|e| e.to_string())? {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(format!("runner timed out after {:?}", self.timeout));
                }
                None => thread::sleep(Duration::from_millis(5)),
            }
        };
        let _ = writer.join();
        let out = reader
            .join()
            .map_err(|_| "stdout reader panicked".to_string())?
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("runner exited with {status}"));
        }
        Ok(out)
    }
}

impl AgentRunner for CommandRunner {
    fn run(&self, config: &MaterializedConfig, task: &Task) -> Result<Trajectory, String> {
        let prompts: serde_json::Map<String, serde_json::Value> = config
            .prompts
            .iter()
            .map(|(id, text)| (id.to_string(), text.clone().into()))
            .collect();
        let input = json!({ "config": prompts, "task": task }).to_string();
        let started = Instant::now();
        let out = self.invoke(input.as_bytes())?;
        let object = extract_json_object(&out).ok_or("runner printed no JSON object")?;
        let raw: RawTrajectory =
            serde_json::from_str(object).map_err(|e| format!("bad trajectory: {e}"))?;
        Ok(Trajectory {
            task_id: task.task_id.clone(),
            query: task.query.clone(),
            steps: raw.steps,
            final_answer: raw.final_answer,
            outcome: raw.outcome.unwrap_or(Outcome::Unknown),
            usage: raw.usage,
            duration: started.elapsed().as_secs_f64(),
            environment_failure: false,
        })
    }
}
