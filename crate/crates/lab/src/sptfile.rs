//! Line-oriented text format for trained SPT parameters.
//!
//! ```text
//! spt-params 1
//! scheme scaled-normal:0.5
//! init-seed 7
//! alpha 0
//! gammas 0.04 0.1 0.2 0.4 0.67 1 1.5 2.5 5 10 25
//! weights -0.41 0.93 ...
//! ```
//!
//! Reals use the shortest representation that round-trips, so a file
//! reproduces the weights bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use spt_core::spt::{InitScheme, SptParams};

use crate::checkpoint::write_atomic;
use crate::error::{LabError, Result};

pub const HEADER: &str = "spt-params";
pub const VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn encode(params: &SptParams) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER} {VERSION}").unwrap();
    writeln!(out, "scheme {}", params.init_scheme).unwrap();
    writeln!(out, "init-seed {}", params.init_seed).unwrap();
    writeln!(out, "alpha {:?}", params.alpha).unwrap();
    writeln!(out, "gammas {}", join(&params.gammas)).unwrap();
    writeln!(out, "weights {}", join(&params.weights)).unwrap();
    out
}

pub fn decode(path: &Path, text: &str) -> Result<SptParams> {
    let err = |m: String| LabError::format(path, m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut field = |key: &str| -> Result<&str> {
        let line = lines.next().ok_or_else(|| err(format!("missing `{key}` line")))?;
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        if k != key {
            return Err(err(format!("expected `{key}`, found `{k}`")));
        }
        Ok(v.trim())
    };
    let version = field(HEADER)?;
    if version != VERSION.to_string() {
        return Err(err(format!("format version {version}, this build reads {VERSION}")));
    }
    let scheme = InitScheme::parse(field("scheme")?).map_err(|e| err(e.to_string()))?;
    let seed_text = field("init-seed")?;
    let seed = seed_text.parse().map_err(|_| err(format!("bad init-seed `{seed_text}`")))?;
    let reals = |s: &str, what: &str| -> Result<Vec<f64>> {
        s.split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad {what} value `{t}`"))))
            .collect()
    };
    let alpha = reals(field("alpha")?, "alpha")?;
    let [alpha] = alpha[..] else {
        return Err(err("alpha takes exactly one value".into()));
    };
    let gammas = reals(field("gammas")?, "gamma")?;
    let weights = reals(field("weights")?, "weight")?;
    if let Some(extra) = lines.next() {
        return Err(err(format!("unexpected line `{extra}`")));
    }
    SptParams::from_parts(gammas, weights, alpha, seed, scheme).map_err(|e| err(e.to_string()))
}

pub fn save(params: &SptParams, path: &Path) -> Result<()> {
    write_atomic(path, encode(params).as_bytes())
}

pub fn load(path: &Path) -> Result<SptParams> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    decode(path, &text)
}
