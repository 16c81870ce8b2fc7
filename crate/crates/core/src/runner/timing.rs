use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PatientRecord;
use crate::llm::LlmClient;
use crate::pipeline::Pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Energy {
    Unavailable,
    Measured { joules: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n_samples: usize,
    pub total_seconds: f64,
    pub per_100_seconds: f64,
    pub energy: Energy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_100_joules: Option<f64>,
}

pub fn per_100(total: f64, n: usize) -> f64 {
    total * 100.0 / n as f64
}

/// Run the meter command and parse the number it prints.
pub fn read_meter(command: &[String]) -> Result<f64> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::Meter("empty meter command".into()))?;
    let out = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| Error::Meter(format!("cannot run `{program}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::Meter(format!("`{program}` exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.trim()
        .parse::<f64>()
        .map_err(|_| Error::Meter(format!("`{program}` printed {text:?}, expected joules")))
}

/// Wall-clock time of `n` sequential endpoint calls, cycling over
/// `records`. Prompts are built before the clock starts and the cache is
/// bypassed. With a meter command, energy is the difference between its
/// readings before and after.
pub fn time_inference(
    pipeline: &Pipeline,
    records: &[PatientRecord],
    instruction: &str,
    client: &LlmClient,
    n: usize,
    meter: Option<&[String]>,
) -> Result<TimingReport> {
    if n == 0 {
        return Err(Error::Precondition("time_inference needs n >= 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Precondition("no records to time".into()));
    }
    let requests = records
        .iter()
        .cycle()
        .take(n)
        .map(|r| {
            let built = pipeline.build(r, instruction, client)?;
            Ok(pipeline.generation.request(built.input.render()))
        })
        .collect::<Result<Vec<_>>>()?;

    let before = meter.map(read_meter).transpose()?;
    let start = Instant::now();
    for req in &requests {
        client.complete_uncached(req)?;
    }
    let total = start.elapsed().as_secs_f64();
    let after = meter.map(read_meter).transpose()?;

    let energy = match (before, after) {
        (Some(b), Some(a)) => Energy::Measured { joules: a - b },
        _ => Energy::Unavailable,
    };
    Ok(TimingReport {
        n_samples: n,
        total_seconds: total,
        per_100_seconds: per_100(total, n),
        per_100_joules: match energy {
            Energy::Measured { joules } => Some(per_100(joules, n)),
            Energy::Unavailable => None,
        },
        energy,
    })
}
