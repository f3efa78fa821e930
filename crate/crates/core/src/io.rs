//! Reading and writing chain, measure and flow files.
//!
//! Chain files are JSON or TOML (chosen by extension, JSON otherwise):
//!
//! ```text
//! { "states": ["a", "b"],
//!   "edges": [{ "from": "a", "to": "b", "coeff": 1.0, "exponent": 0 }] }
//! ```
//!
//! An exponent is an integer or a `"p/q"` string; fixed chains use 0
//! everywhere. Measures, functions and directions are either a list in state
//! order or an object keyed by state name (missing names read as 0). Flows
//! are lists of `{ "from", "to", "value" }`.

use crate::chain::{ChainSpec, Exponent, ParamChainSpec, ParamEdge, ProbabilityVector};
use crate::error::{Error, Result};
use crate::flows::Flow;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ExponentRepr {
    Int(i64),
    Text(String),
}

impl ExponentRepr {
    fn parse(&self) -> Result<Exponent> {
        match self {
            ExponentRepr::Int(k) => Ok(Exponent::from_integer(*k)),
            ExponentRepr::Text(s) => {
                let s = s.trim();
                let (p, q) = s.split_once('/').unwrap_or((s, "1"));
                let p: i64 = p.trim().parse().map_err(|_| Error::Parse(format!("bad exponent `{s}`")))?;
                let q: i64 = q.trim().parse().map_err(|_| Error::Parse(format!("bad exponent `{s}`")))?;
                if q <= 0 {
                    return Err(Error::Parse(format!("bad exponent denominator in `{s}`")));
                }
                Ok(Exponent::new(p, q))
            }
        }
    }

    fn from_exponent(k: Exponent) -> Self {
        if *k.denom() == 1 {
            ExponentRepr::Int(*k.numer())
        } else {
            ExponentRepr::Text(format!("{}/{}", k.numer(), k.denom()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    from: String,
    to: String,
    coeff: f64,
    #[serde(default = "zero_exponent")]
    exponent: ExponentRepr,
}

fn zero_exponent() -> ExponentRepr {
    ExponentRepr::Int(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    states: Vec<String>,
    edges: Vec<EdgeRecord>,
}

/// File syntax for chain files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Toml,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("toml") => Format::Toml,
            _ => Format::Json,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Parse a family from text.
pub fn parse_family(text: &str, format: Format) -> Result<ParamChainSpec> {
    let file: ChainFile = match format {
        Format::Json => serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?,
        Format::Toml => toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?,
    };
    let index: BTreeMap<&str, usize> = file.states.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let lookup = |name: &str| index.get(name).copied().ok_or_else(|| Error::UnknownState(name.to_string()));
    let mut edges = Vec::with_capacity(file.edges.len());
    for e in &file.edges {
        edges.push(ParamEdge { from: lookup(&e.from)?, to: lookup(&e.to)?, coeff: e.coeff, exponent: e.exponent.parse()? });
    }
    ParamChainSpec::new(file.states.clone(), edges)
}

pub fn read_family(path: &Path) -> Result<ParamChainSpec> {
    parse_family(&read_text(path)?, Format::from_path(path))
}

/// Read a chain file that must describe a fixed chain (every exponent 0).
pub fn read_chain(path: &Path) -> Result<ChainSpec> {
    fixed_chain(&read_family(path)?)
}

/// The fixed chain of a family whose exponents are all 0.
pub fn fixed_chain(family: &ParamChainSpec) -> Result<ChainSpec> {
    if let Some(e) = family.edges().iter().find(|e| *e.exponent.numer() != 0) {
        let s = family.states();
        return Err(Error::InvalidChain(format!(
            "edge {}->{} has exponent {}; a fixed chain needs exponent 0",
            s[e.from], s[e.to], e.exponent
        )));
    }
    family.instantiate(1.0)
}

fn family_file(family: &ParamChainSpec) -> ChainFile {
    let s = family.states();
    ChainFile {
        states: s.to_vec(),
        edges: family
            .edges()
            .iter()
            .map(|e| EdgeRecord {
                from: s[e.from].clone(),
                to: s[e.to].clone(),
                coeff: e.coeff,
                exponent: ExponentRepr::from_exponent(e.exponent),
            })
            .collect(),
    }
}

pub fn family_to_string(family: &ParamChainSpec, format: Format) -> Result<String> {
    let file = family_file(family);
    match format {
        Format::Json => serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string())),
        Format::Toml => toml::to_string(&file).map_err(|e| Error::Parse(e.to_string())),
    }
}

pub fn chain_to_string(chain: &ChainSpec, format: Format) -> Result<String> {
    family_to_string(&ParamChainSpec::constant(chain), format)
}

pub fn write_family(family: &ParamChainSpec, path: &Path) -> Result<()> {
    let text = family_to_string(family, Format::from_path(path))?;
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VectorRepr {
    List(Vec<f64>),
    Named(BTreeMap<String, f64>),
}

/// Parse a per-state vector from JSON, in state order.
pub fn parse_vector(text: &str, states: &[String]) -> Result<Vec<f64>> {
    let raw: VectorRepr = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    match raw {
        VectorRepr::List(v) if v.len() == states.len() => Ok(v),
        VectorRepr::List(v) => Err(Error::InvalidArgument(format!("expected {} entries, got {}", states.len(), v.len()))),
        VectorRepr::Named(map) => {
            let mut out = vec![0.0; states.len()];
            for (name, value) in map {
                let i = states.iter().position(|s| *s == name).ok_or(Error::UnknownState(name))?;
                out[i] = value;
            }
            Ok(out)
        }
    }
}

/// Parse a comma-separated list of numbers, as given on a command line.
pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{t}`"))))
        .collect()
}

pub fn read_vector(path: &Path, states: &[String]) -> Result<Vec<f64>> {
    parse_vector(&read_text(path)?, states)
}

pub fn read_measure(path: &Path, states: &[String]) -> Result<ProbabilityVector> {
    ProbabilityVector::new(read_vector(path, states)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowRecord {
    from: String,
    to: String,
    value: f64,
}

/// Parse a flow; entries must be edges of `chain` and missing edges are 0.
pub fn parse_flow(text: &str, chain: &ChainSpec) -> Result<Flow> {
    let records: Vec<FlowRecord> = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut triples = Vec::with_capacity(records.len());
    for r in records {
        triples.push((chain.state_index(&r.from)?, chain.state_index(&r.to)?, r.value));
    }
    Flow::from_triples(chain, &triples)
}

pub fn read_flow(path: &Path, chain: &ChainSpec) -> Result<Flow> {
    parse_flow(&read_text(path)?, chain)
}

/// Flow as a JSON value, listing only positive entries.
pub fn flow_to_json(flow: &Flow, states: &[String]) -> serde_json::Value {
    let records: Vec<FlowRecord> = flow
        .support()
        .map(|(a, b, v)| FlowRecord { from: states[a].clone(), to: states[b].clone(), value: v })
        .collect();
    serde_json::to_value(records).expect("flow records serialize")
}

/// Per-state vector as a JSON object keyed by state name.
pub fn vector_to_json(values: &[f64], states: &[String]) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> =
        states.iter().zip(values).map(|(s, v)| (s.clone(), serde_json::json!(v))).collect();
    serde_json::Value::Object(map)
}
