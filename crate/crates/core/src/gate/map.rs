use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// How a map was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
    /// State labels indexing `similarity`, in state-id order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_counts: Vec<usize>,
    /// Empty states and the populated state they were folded into.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub merged: BTreeMap<String, String>,
}

/// Total map from (accessible, inaccessible) state pairs to one-based heads.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMap {
    n_heads: usize,
    v_states: usize,
    u_states: usize,
    /// Row-major over `(v, u)`.
    table: Vec<usize>,
    pub provenance: Provenance,
}

pub fn state_label(v: usize, u: usize) -> String {
    format!("v={v},u={u}")
}

fn parse_label(key: &str) -> Option<(usize, usize)> {
    let (v, u) = key.split_once(',')?;
    Some((v.strip_prefix("v=")?.parse().ok()?, u.strip_prefix("u=")?.parse().ok()?))
}

impl GateMap {
    pub fn new(
        n_heads: usize,
        v_states: usize,
        u_states: usize,
        table: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        if v_states == 0 || u_states == 0 {
            return Err(Error::Config("gate map needs non-empty state spaces".into()));
        }
        if table.len() != v_states * u_states {
            return Err(Error::Config(format!(
                "gate table has {} entries, state space has {}",
                table.len(),
                v_states * u_states
            )));
        }
        if let Some(&h) = table.iter().find(|&&h| h == 0 || h > n_heads) {
            return Err(Error::HeadIndex { index: h, n_heads });
        }
        Ok(Self { n_heads, v_states, u_states, table, provenance })
    }

    /// One head per state, numbered in state-id order.
    pub fn identity(v_states: usize, u_states: usize) -> Result<Self> {
        let n = v_states * u_states;
        let prov = Provenance { method: "identity".into(), ..Default::default() };
        Self::new(n, v_states, u_states, (1..=n).collect(), prov)
    }

    /// Builds from `"v=a,u=b" → head` entries that must cover every state.
    pub fn manual(
        n_heads: usize,
        v_states: usize,
        u_states: usize,
        entries: &BTreeMap<String, usize>,
    ) -> Result<Self> {
        let mut table = vec![0; v_states * u_states];
        for (key, &h) in entries {
            let (v, u) = parse_label(key).ok_or_else(|| Error::Config(format!("bad gate key '{key}'")))?;
            if v >= v_states || u >= u_states {
                return Err(Error::Config(format!("gate key '{key}' outside the state space")));
            }
            table[v * u_states + u] = h;
        }
        if let Some(i) = table.iter().position(|&h| h == 0) {
            let (v, u) = (i / u_states, i % u_states);
            return Err(Error::UnmappedState { v, u });
        }
        let prov = Provenance { method: "manual".into(), ..Default::default() };
        Self::new(n_heads, v_states, u_states, table, prov)
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn v_states(&self) -> usize {
        self.v_states
    }

    pub fn u_states(&self) -> usize {
        self.u_states
    }

    pub fn head(&self, v: usize, u: usize) -> Result<usize> {
        if v >= self.v_states || u >= self.u_states {
            return Err(Error::UnmappedState { v, u });
        }
        Ok(self.table[v * self.u_states + u])
    }

    /// Heads in state-id order.
    pub fn table(&self) -> &[usize] {
        &self.table
    }

    pub fn to_json(&self) -> Value {
        let mut table = Map::new();
        for v in 0..self.v_states {
            for u in 0..self.u_states {
                table.insert(state_label(v, u), self.table[v * self.u_states + u].into());
            }
        }
        let mut out = Map::new();
        out.insert("n_heads".into(), self.n_heads.into());
        out.insert("v_states".into(), self.v_states.into());
        out.insert("u_states".into(), self.u_states.into());
        out.insert("table".into(), Value::Object(table));
        out.insert("provenance".into(), serde_json::to_value(&self.provenance).expect("plain data"));
        Value::Object(out)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            n_heads: usize,
            v_states: Option<usize>,
            u_states: Option<usize>,
            table: BTreeMap<String, usize>,
            #[serde(default)]
            provenance: Provenance,
        }
        let raw: Raw = serde_json::from_value(value.clone())?;
        let mut keys = Vec::new();
        for k in raw.table.keys() {
            keys.push(parse_label(k).ok_or_else(|| Error::Config(format!("bad gate key '{k}'")))?);
        }
        let v_states = raw.v_states.unwrap_or_else(|| keys.iter().map(|k| k.0 + 1).max().unwrap_or(0));
        let u_states = raw.u_states.unwrap_or_else(|| keys.iter().map(|k| k.1 + 1).max().unwrap_or(0));
        let mut map = Self::manual(raw.n_heads, v_states, u_states, &raw.table)?;
        map.provenance = raw.provenance;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json())?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

/// `s[t] = G(v, u[t])`.
pub fn gate_lookup(map: &GateMap, v: usize, u: &[usize]) -> Result<Vec<usize>> {
    u.iter().map(|&c| map.head(v, c)).collect()
}
