//! Expansion of `--param name=v1,v2,...` into configs.

use rtrl_core::engines::EngineSpec;
use rtrl_core::selection::Strategy;

use crate::config::Config;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepParam {
    pub name: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, list) = s
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("expected name=v1,v2,... but got {s:?}")))?;
        let values: Vec<String> = list.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(HarnessError::Config(format!("no values for {name}")));
        }
        Ok(Self { name: name.trim().to_owned(), values })
    }
}

fn parse<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HarnessError::Config(format!("bad value {v:?} for {name}")))
}

fn sparse_template(cfg: &Config) -> (usize, Strategy) {
    cfg.engines
        .iter()
        .find_map(|e| match e {
            EngineSpec::SparseRtrl { k, strategy } => Some((*k, *strategy)),
            _ => None,
        })
        .unwrap_or((0, Strategy::Ring))
}

/// Configs for a sweep. Engine-valued parameters (`k`, `strategy`) become
/// one config with one engine per value; the others (`lr`, `hidden`) give
/// one config per value, each in its own `name=value` subdirectory.
pub fn expand(base: &Config, param: &SweepParam) -> Result<Vec<Config>> {
    let (k0, strategy0) = sparse_template(base);
    let mut out = Vec::new();
    match param.name.as_str() {
        "k" => {
            let mut cfg = base.clone();
            cfg.engines = param
                .values
                .iter()
                .map(|v| Ok(EngineSpec::SparseRtrl { k: parse("k", v)?, strategy: strategy0 }))
                .collect::<Result<_>>()?;
            out.push(cfg);
        }
        "strategy" => {
            let mut cfg = base.clone();
            cfg.engines = param
                .values
                .iter()
                .map(|v| {
                    let strategy: Strategy = serde_json::from_value(serde_json::Value::String(v.clone()))
                        .map_err(|_| HarnessError::Config(format!("unknown strategy {v:?}")))?;
                    Ok(EngineSpec::SparseRtrl { k: k0, strategy })
                })
                .collect::<Result<_>>()?;
            out.push(cfg);
        }
        "lr" | "hidden" => {
            let root = base.resolve_output_dir();
            for v in &param.values {
                let mut cfg = base.clone();
                if param.name == "lr" {
                    cfg.optimizer = cfg.optimizer.with_lr(parse("lr", v)?);
                } else {
                    cfg.model.hidden = parse("hidden", v)?;
                }
                cfg.output_dir = Some(root.join(format!("{}={v}", param.name)));
                out.push(cfg);
            }
        }
        other => return Err(HarnessError::Config(format!("cannot sweep over {other:?} (k, strategy, lr, hidden)"))),
    }
    for cfg in &out {
        cfg.validate()?;
    }
    Ok(out)
}
