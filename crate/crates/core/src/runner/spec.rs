use contune_sim::SimParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    Simulator,
    ExternalCommand,
}

/// A shell command run once per repeat inside the trial directory.
///
/// `{name}` placeholders are replaced by configuration values; `{trial_dir}`,
/// `{trial}`, `{repeat}` and `{seed}` are also available. The command must
/// write `name=value` lines to `metrics_file`, relative to the trial directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub template: String,
    /// Seconds before the command is killed.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_metrics_file")]
    pub metrics_file: String,
}

fn default_timeout() -> f64 {
    3600.0
}

fn default_metrics_file() -> String {
    "metrics".to_string()
}

/// The `executor` section of a problem document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorSpec {
    #[serde(default)]
    pub kind: ExecutorKind,
    /// Concurrent evaluation slots.
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Runs per trial, each with its own derived seed.
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub simulator: SimParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandSpec>,
}

fn one() -> usize {
    1
}

impl Default for ExecutorSpec {
    fn default() -> Self {
        Self {
            kind: ExecutorKind::Simulator,
            parallelism: 1,
            repeats: 1,
            simulator: SimParams::default(),
            command: None,
        }
    }
}

impl ExecutorSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.parallelism == 0 {
            return Err("executor.parallelism must be >= 1".into());
        }
        if self.repeats == 0 {
            return Err("executor.repeats must be >= 1".into());
        }
        match self.kind {
            ExecutorKind::Simulator => self
                .simulator
                .validate()
                .map_err(|e| format!("executor.simulator: {e}")),
            ExecutorKind::ExternalCommand => match &self.command {
                None => Err("executor.command is required for external_command".into()),
                Some(c) if c.template.trim().is_empty() => Err("executor.command.template is empty".into()),
                Some(c) if !(c.timeout > 0.0 && c.timeout.is_finite()) => {
                    Err("executor.command.timeout must be > 0".into())
                }
                Some(_) => Ok(()),
            },
        }
    }
}
