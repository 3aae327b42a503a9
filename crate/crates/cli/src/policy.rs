use std::fs;
use std::path::{Path, PathBuf};

use odm_core::policy::{Policy, PolicyStateJson, STATE_FORMAT_VERSION, STATE_MAGIC};

use crate::error::{CliError, CliResult};
use crate::simulate::write_file;

fn load(path: &Path) -> CliResult<Policy> {
    let bytes = fs::read(path).map_err(|e| CliError::io("cannot read policy state", path, e))?;
    Policy::load(&bytes).map_err(|e| {
        let magic = String::from_utf8_lossy(&STATE_MAGIC);
        CliError::runtime(format!(
            "{}: {e} (this build reads {magic} format version {STATE_FORMAT_VERSION}; file is {} bytes)",
            path.display(),
            bytes.len()
        ))
    })
}

fn json<T: serde::Serialize>(x: &T) -> String {
    serde_json::to_string(x).expect("plain data serializes")
}

pub fn inspect(path: &Path) -> CliResult<()> {
    let policy = load(path)?;
    let s = policy.state();
    let dist = policy.distribution()?;
    println!("state: {}", path.display());
    println!("format: {} v{STATE_FORMAT_VERSION}", String::from_utf8_lossy(&STATE_MAGIC));
    println!("domains: {}", policy.num_domains());
    println!("turn: {}", s.turn);
    println!("eps_current: {}", s.eps_current);
    println!("eps_prev: {}", s.eps_prev);
    println!("in_warmup: {}", s.in_warmup);
    println!("alpha: {}", s.config.alpha);
    println!("warmup_steps: {}", s.config.warmup_steps);
    println!("rewards: {}", json(&s.reward_estimates));
    println!("distribution: {}", json(&dist.probs));
    Ok(())
}

pub fn export_json(path: &Path, out: Option<&PathBuf>) -> CliResult<()> {
    let policy = load(path)?;
    let text = serde_json::to_string_pretty(&PolicyStateJson::from_policy(&policy)).expect("state serializes") + "\n";
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
