use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::gate::cluster::{average_linkage, similarity_matrix};
use crate::gate::gradient::{state_gradients, StateGradient};
use crate::gate::map::{state_label, GateMap, Provenance};
use crate::model::{ModelParams, Sample};
use crate::registry::{Named, Registry};

pub struct GateRequest<'a> {
    pub v_states: usize,
    pub u_states: usize,
    pub n_heads: usize,
    pub manual: Option<&'a BTreeMap<String, usize>>,
    /// Pretrained single-head model, for similarity-based builders.
    pub backbone: Option<&'a ModelParams>,
    pub samples: &'a [Sample],
    pub jobs: usize,
}

pub trait GateBuilder: Named + Send + Sync {
    fn build(&self, req: &GateRequest) -> Result<GateMap>;
}

pub struct Identity;
pub struct Manual;
pub struct GradSim;

impl Named for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }
}

impl GateBuilder for Identity {
    fn build(&self, req: &GateRequest) -> Result<GateMap> {
        let n = req.v_states * req.u_states;
        if req.n_heads != n {
            return Err(Error::Config(format!("identity gate needs {n} heads, config has {}", req.n_heads)));
        }
        GateMap::identity(req.v_states, req.u_states)
    }
}

impl Named for Manual {
    fn name(&self) -> &'static str {
        "manual"
    }
}

impl GateBuilder for Manual {
    fn build(&self, req: &GateRequest) -> Result<GateMap> {
        let table = req.manual.ok_or_else(|| Error::Config("manual gate needs manual_table".into()))?;
        GateMap::manual(req.n_heads, req.v_states, req.u_states, table)
    }
}

impl Named for GradSim {
    fn name(&self) -> &'static str {
        "grad-sim"
    }
}

impl GateBuilder for GradSim {
    fn build(&self, req: &GateRequest) -> Result<GateMap> {
        let backbone = req
            .backbone
            .ok_or_else(|| Error::Config("gradient-similarity gate needs a pretrained backbone".into()))?;
        if backbone.config.v_states != req.v_states || backbone.config.u_classes != req.u_states {
            return Err(Error::Config("backbone state spaces differ from the gate request".into()));
        }
        let mut grads = Vec::new();
        for r in state_gradients(backbone, req.samples, req.jobs) {
            match r {
                Ok(g) => grads.push(g),
                Err(Error::EmptySubset(msg)) => log::warn!("{msg}; merging"),
                Err(e) => return Err(e),
            }
        }
        let mut map = build_gate_map(&grads, req.v_states, req.u_states, req.n_heads)?;
        map.provenance.config_hash = Some(backbone.config.hash());
        map.provenance.tool_version = Some(env!("CARGO_PKG_VERSION").into());
        Ok(map)
    }
}

pub fn gate_builders() -> &'static Registry<dyn GateBuilder> {
    static REGISTRY: OnceLock<Registry<dyn GateBuilder>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn GateBuilder> = Registry::new("gate builder");
        r.register(Box::new(Identity));
        r.register(Box::new(Manual));
        r.register(Box::new(GradSim));
        r
    })
}

/// Clusters the populated states by average-linkage gradient similarity into
/// `n_heads` groups. States without a gradient take the head of the nearest
/// populated state sharing their accessible value.
pub fn build_gate_map(
    grads: &[StateGradient],
    v_states: usize,
    u_states: usize,
    n_heads: usize,
) -> Result<GateMap> {
    let mut grads: Vec<&StateGradient> = grads.iter().collect();
    grads.sort_by_key(|g| (g.v, g.u));
    for w in grads.windows(2) {
        if (w[0].v, w[0].u) == (w[1].v, w[1].u) {
            return Err(Error::Contract(format!("duplicate gradient for {}", state_label(w[0].v, w[0].u))));
        }
    }
    if let Some(g) = grads.iter().find(|g| g.v >= v_states || g.u >= u_states) {
        return Err(Error::UnmappedState { v: g.v, u: g.u });
    }
    if n_heads == 0 || n_heads > grads.len() {
        return Err(Error::Config(format!(
            "cannot map {} populated states onto {n_heads} heads",
            grads.len()
        )));
    }
    let vectors: Vec<&[f64]> = grads.iter().map(|g| g.grad.as_slice()).collect();
    let sim = similarity_matrix(&vectors)?;
    let assignment = average_linkage(&sim, n_heads)?;

    let mut table = vec![0; v_states * u_states];
    for (g, &h) in grads.iter().zip(&assignment) {
        table[g.v * u_states + g.u] = h;
    }
    let mut merged = BTreeMap::new();
    for v in 0..v_states {
        for u in 0..u_states {
            if table[v * u_states + u] != 0 {
                continue;
            }
            let proxy = grads
                .iter()
                .min_by_key(|g| (g.v != v, g.v.abs_diff(v), g.u.abs_diff(u), g.u, g.v))
                .expect("at least one populated state");
            log::warn!(
                "state {} has no samples; using head of {}",
                state_label(v, u),
                state_label(proxy.v, proxy.u)
            );
            table[v * u_states + u] = table[proxy.v * u_states + proxy.u];
            merged.insert(state_label(v, u), state_label(proxy.v, proxy.u));
        }
    }
    let provenance = Provenance {
        method: "grad-sim".into(),
        config_hash: None,
        tool_version: None,
        states: grads.iter().map(|g| state_label(g.v, g.u)).collect(),
        similarity: Some(sim),
        sample_counts: grads.iter().map(|g| g.samples).collect(),
        merged,
    };
    GateMap::new(n_heads, v_states, u_states, table, provenance)
}
