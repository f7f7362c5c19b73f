//! Model files and result artifacts.
//!
//! A model file is JSON:
//!
//! ```json
//! {
//!   "dynamics": { "b1": 0.1, "b2": 1.0, "sigma0": 0.3, "tsigma0": 0.2 },
//!   "costs": { "kind": "lq", "q": 1, "qbar": 0.5, "s": 0.8, "qT": 1, "qbarT": 0.5, "sT": 0.8 },
//!   "horizon": { "T": 1.0 },
//!   "lipschitz": { "K": 10.0 },
//!   "initial": { "kind": "gaussian", "mean": 1.0, "variance": 0.25 }
//! }
//! ```
//!
//! `costs.kind = "custom"` takes `running`, `mean_field` and `terminal` term
//! lists instead of the LQ parameters. Missing dynamics coefficients are zero,
//! a missing `lipschitz` block means `K = 10`, `initial` is optional.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{check_gradients, LinearStateSpec, LqParams, ModelSpec, TermCosts};
use crate::simulate::InitialLaw;

pub const DEFAULT_LIPSCHITZ: f64 = 10.0;
/// Largest relative finite-difference error accepted for declared gradients.
pub const GRADIENT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostsFile {
    Lq(LqParams),
    Custom(TermCosts),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    #[serde(rename = "T")]
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    #[serde(rename = "K")]
    pub k: f64,
}

impl Default for Lipschitz {
    fn default() -> Self {
        Self { k: DEFAULT_LIPSCHITZ }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(default)]
    pub dynamics: LinearStateSpec,
    pub costs: CostsFile,
    pub horizon: Horizon,
    #[serde(default)]
    pub lipschitz: Lipschitz,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialLaw>,
}

impl ModelFile {
    pub fn build(&self) -> Result<ModelSpec> {
        match &self.costs {
            CostsFile::Lq(p) => ModelSpec::lq(self.dynamics.clone(), *p, self.horizon.t, self.lipschitz.k),
            CostsFile::Custom(terms) => {
                let errs = terms.validate();
                if !errs.is_empty() {
                    return Err(Error::Validation(errs));
                }
                let check = check_gradients(terms, self.horizon.t);
                if !check.passes(GRADIENT_TOL) {
                    return Err(Error::Validation(vec![format!(
                        "gradient {} disagrees with finite differences (relative error {:.3e})",
                        check.worst, check.max_rel_err
                    )]));
                }
                ModelSpec::new(
                    self.dynamics.clone(),
                    Arc::new(terms.clone()),
                    self.horizon.t,
                    self.lipschitz.k,
                )
            }
        }
    }
}

/// A validated model together with its source description.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub spec: ModelSpec,
    pub file: ModelFile,
}

impl LoadedModel {
    pub fn initial(&self) -> Option<&InitialLaw> {
        self.file.initial.as_ref()
    }
}

const TOP_KEYS: [&str; 5] = ["dynamics", "costs", "horizon", "lipschitz", "initial"];
const DYNAMICS_KEYS: [&str; 9] = [
    "b0", "b1", "b2", "sigma0", "sigma1", "sigma2", "tsigma0", "tsigma1", "tsigma2",
];
const LQ_KEYS: [&str; 6] = ["q", "qbar", "s", "qT", "qbarT", "sT"];
const CUSTOM_KEYS: [&str; 3] = ["running", "mean_field", "terminal"];

/// Lists unknown and missing keys before typed parsing, so that a bad file is
/// reported in one pass.
fn schema_errors(v: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    let Some(top) = v.as_object() else {
        return vec!["model file must be a JSON object".into()];
    };
    for k in top.keys() {
        if !TOP_KEYS.contains(&k.as_str()) {
            errs.push(format!("unknown key `{k}`"));
        }
    }
    if let Some(d) = top.get("dynamics") {
        match d.as_object() {
            Some(d) => {
                for k in d.keys() {
                    if !DYNAMICS_KEYS.contains(&k.as_str()) {
                        errs.push(format!("unknown key `dynamics.{k}`"));
                    }
                }
            }
            None => errs.push("`dynamics` must be an object".into()),
        }
    }
    match top.get("costs").and_then(Value::as_object) {
        None => errs.push("missing key `costs`".into()),
        Some(c) => {
            let allowed: &[&str] = match c.get("kind").and_then(Value::as_str) {
                Some("lq") => {
                    for k in LQ_KEYS {
                        if !c.contains_key(k) {
                            errs.push(format!("missing key `costs.{k}`"));
                        }
                    }
                    &LQ_KEYS
                }
                Some("custom") => &CUSTOM_KEYS,
                Some(other) => {
                    errs.push(format!("`costs.kind` must be \"lq\" or \"custom\", got \"{other}\""));
                    &[]
                }
                None => {
                    errs.push("missing key `costs.kind`".into());
                    &[]
                }
            };
            if !allowed.is_empty() {
                for k in c.keys() {
                    if k != "kind" && !allowed.contains(&k.as_str()) {
                        errs.push(format!("unknown key `costs.{k}`"));
                    }
                }
            }
        }
    }
    match top.get("horizon") {
        Some(h) if h.get("T").is_some() => {}
        _ => errs.push("missing key `horizon.T`".into()),
    }
    if let Some(l) = top.get("lipschitz") {
        if l.get("K").is_none() {
            errs.push("missing key `lipschitz.K`".into());
        }
    }
    errs
}

pub fn parse_model(text: &str) -> Result<LoadedModel> {
    let v: Value = serde_json::from_str(text)?;
    let errs = schema_errors(&v);
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let file: ModelFile = serde_json::from_value(v).map_err(|e| Error::Validation(vec![e.to_string()]))?;
    if let Some(init) = &file.initial {
        init.validate()?;
    }
    let spec = file.build()?;
    Ok(LoadedModel { spec, file })
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Validation(vec![format!("cannot read model file {}: {e}", path.display())])
    })?;
    parse_model(&text)
}

/// Seed, crate version and config digest appended to every CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new<C: Serialize + ?Sized>(seed: u64, config: &C) -> Result<Self> {
        Ok(Self {
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config)?,
        })
    }

    pub fn footer(&self) -> String {
        format!(
            "# seed={} version={} config_sha256={}",
            self.seed, self.version, self.config_hash
        )
    }
}

/// SHA-256 of the compact JSON encoding.
pub fn config_hash<C: Serialize + ?Sized>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Renders rows under a header with the provenance footer. Floats use the
/// shortest representation that round-trips.
pub fn csv_string(header: &[&str], rows: &[Vec<f64>], provenance: &Provenance) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.push_str(&provenance.footer());
    out.push('\n');
    out
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>], provenance: &Provenance) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(csv_string(header, rows, provenance).as_bytes())?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LQ: &str = r#"{
        "dynamics": {"b1": 0.1, "b2": 1.0, "sigma0": 0.3, "tsigma0": 0.2},
        "costs": {"kind": "lq", "q": 1, "qbar": 0.5, "s": 0.8, "qT": 1, "qbarT": 0.5, "sT": 0.8},
        "horizon": {"T": 1.0}
    }"#;

    #[test]
    fn minimal_lq_file_fills_defaults() {
        let m = parse_model(LQ).unwrap();
        assert_eq!(m.spec.lipschitz, DEFAULT_LIPSCHITZ);
        assert!(m.spec.dynamics.sigma1.is_zero());
        assert!(m.initial().is_none());
        assert_eq!(m.spec.lq.unwrap().s_t, 0.8);
    }

    #[test]
    fn lq_constraint_rejected() {
        let bad = LQ.replace("\"qbar\": 0.5, \"s\": 0.8", "\"qbar\": 2.0, \"s\": 3.0");
        let err = parse_model(&bad).unwrap_err().to_string();
        assert!(err.contains("q+qbar-qbar*s >= 0"), "{err}");
    }

    #[test]
    fn offending_keys_listed() {
        let bad = r#"{"dynamics": {"b9": 1}, "costs": {"kind": "lq", "q": 1}, "extra": 0}"#;
        let Err(Error::Validation(errs)) = parse_model(bad) else {
            panic!("expected validation error")
        };
        let all = errs.join("\n");
        for key in ["`extra`", "`dynamics.b9`", "`costs.qbar`", "`horizon.T`"] {
            assert!(all.contains(key), "{all}");
        }
    }

    #[test]
    fn custom_costs_pass_gradient_check() {
        let text = r#"{
            "costs": {"kind": "custom",
                "running": [{"type": "quad_control", "c": 0.5}, {"type": "quartic_control", "c": 0.1}],
                "mean_field": [{"type": "dev_mean", "c": 1.0, "s": 1.0}],
                "terminal": [{"type": "pairwise", "c": 1.0}]},
            "horizon": {"T": 2.0},
            "lipschitz": {"K": 5.0}
        }"#;
        let m = parse_model(text).unwrap();
        assert!(!m.spec.costs.affine_in_control());
        assert_eq!(m.spec.horizon, 2.0);
    }

    #[test]
    fn csv_has_header_and_footer() {
        let p = Provenance::new(7, &"cfg").unwrap();
        let s = csv_string(&["t", "P"], &[vec![0.0, 1.0], vec![0.5, 1.25]], &p);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "t,P");
        assert_eq!(lines[1], "0,1");
        assert!(lines[3].starts_with("# seed=7 version="));
        assert_eq!(p.config_hash.len(), 64);
    }
}
