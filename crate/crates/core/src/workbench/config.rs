//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::adapter::GateMode;
use crate::error::{FouraError, Result};
use crate::train::TrainConfig;

const KEYS: &[&str] = &[
    "task",
    "rank",
    "transform",
    "axis",
    "gate_mode",
    "steps",
    "lr",
    "batch",
    "seed",
    "lambda_entropy",
    "alpha",
    "optimizer",
    "threshold",
    "gate_bias",
    "gate_init_std",
    "base_seed",
    "target_seed",
    "r_true",
    "tail_scale",
    "tail_rank",
    "dim",
    "tokens",
    "timesteps",
    "calib_batch",
];

fn parse<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| FouraError::config(line, key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_gate(line: usize, raw: &str) -> Result<Option<GateMode>> {
    if raw == "none" {
        Ok(None)
    } else {
        parse(line, "gate_mode", raw).map(Some)
    }
}

/// Parses and validates a config. Missing keys take their defaults.
/// `#` starts a comment; blank lines are ignored.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(FouraError::config(line, content, "expected `key = value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(FouraError::config(line, key, "unknown key"));
        }
        if let Some(prev) = seen.insert(key.to_string(), line) {
            return Err(FouraError::config(line, key, format!("already set on line {prev}")));
        }
        match key {
            "task" => cfg.task = parse(line, key, value)?,
            "rank" => cfg.rank = parse(line, key, value)?,
            "transform" => cfg.transform = parse(line, key, value)?,
            "axis" => cfg.axis = parse(line, key, value)?,
            "gate_mode" => cfg.gate_mode = parse_gate(line, value)?,
            "steps" => cfg.steps = parse(line, key, value)?,
            "lr" => cfg.lr = parse(line, key, value)?,
            "batch" => cfg.batch = parse(line, key, value)?,
            "seed" => cfg.seed = parse(line, key, value)?,
            "lambda_entropy" => cfg.lambda_entropy = parse(line, key, value)?,
            "alpha" => cfg.alpha = parse(line, key, value)?,
            "optimizer" => cfg.optimizer = parse(line, key, value)?,
            "threshold" => cfg.threshold = parse(line, key, value)?,
            "gate_bias" => cfg.gate_bias = parse(line, key, value)?,
            "gate_init_std" => cfg.gate_init_std = parse(line, key, value)?,
            "base_seed" => cfg.base_seed = parse(line, key, value)?,
            "target_seed" => cfg.target_seed = parse(line, key, value)?,
            "r_true" => cfg.r_true = parse(line, key, value)?,
            "tail_scale" => cfg.tail_scale = parse(line, key, value)?,
            "tail_rank" => cfg.tail_rank = parse(line, key, value)?,
            "dim" => cfg.dim = parse(line, key, value)?,
            "tokens" => cfg.tokens = parse(line, key, value)?,
            "timesteps" => cfg.timesteps = parse(line, key, value)?,
            "calib_batch" => cfg.calib_batch = parse(line, key, value)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    // A range error points at the line that set the field, if any.
    cfg.validate().map_err(|e| match e {
        FouraError::ConfigError { field, message, .. } => FouraError::ConfigError {
            line: seen.get(&field).copied().unwrap_or(0),
            field,
            message,
        },
        other => other,
    })?;
    Ok(cfg)
}

/// Every field, one per line, in a form [`parse_config`] reads back.
pub fn render_config(cfg: &TrainConfig) -> String {
    let gate = cfg.gate_mode.map_or("none", |g| g.as_str());
    format!(
        "task = {}\nrank = {}\ntransform = {}\naxis = {}\ngate_mode = {gate}\nsteps = {}\nlr = {:e}\n\
         batch = {}\nseed = {}\nlambda_entropy = {:e}\nalpha = {:e}\noptimizer = {}\nthreshold = {:e}\n\
         gate_bias = {:e}\ngate_init_std = {:e}\nbase_seed = {}\ntarget_seed = {}\nr_true = {}\n\
         tail_scale = {:e}\ntail_rank = {}\ndim = {}\ntokens = {}\ntimesteps = {}\ncalib_batch = {}\n",
        cfg.task.as_str(),
        cfg.rank,
        cfg.transform.as_str(),
        cfg.axis.as_str(),
        cfg.steps,
        cfg.lr,
        cfg.batch,
        cfg.seed,
        cfg.lambda_entropy,
        cfg.alpha,
        cfg.optimizer.as_str(),
        cfg.threshold,
        cfg.gate_bias,
        cfg.gate_init_std,
        cfg.base_seed,
        cfg.target_seed,
        cfg.r_true,
        cfg.tail_scale,
        cfg.tail_rank,
        cfg.dim,
        cfg.tokens,
        cfg.timesteps,
        cfg.calib_batch,
    )
}
