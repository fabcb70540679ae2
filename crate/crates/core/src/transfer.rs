//! Weight transfer between architectures that share canonical names.
//!
//! A [`ComponentSet`] selects which shared parts to copy; the resulting
//! [`TransferPlan`] is an audited list of identity-named copies with shapes.
//! Layer norms travel with the weights they feed: `final_ln` with the output
//! embedding, `ln2` with the FFN, `ln1` with the attention block.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::model::{build_model, hybrid_layer_indices, MixerKind, ModelConfig};
use crate::store::ParameterStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "EMB")]
    Emb,
    #[serde(rename = "FFN")]
    Ffn,
    #[serde(rename = "WO")]
    Wo,
    #[serde(rename = "ATTN_HYBRID")]
    AttnHybrid,
}

impl Component {
    pub fn tag(self) -> &'static str {
        match self {
            Component::Emb => "EMB",
            Component::Ffn => "FFN",
            Component::Wo => "WO",
            Component::AttnHybrid => "ATTN_HYBRID",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "emb" => Ok(Component::Emb),
            "ffn" => Ok(Component::Ffn),
            "wo" => Ok(Component::Wo),
            "attn" | "attn_hybrid" => Ok(Component::AttnHybrid),
            other => Err(Error::Config(format!(
                "unknown component {other:?}; expected emb, ffn, wo or attn"
            ))),
        }
    }
}

/// A subset of transferable components; empty means train from scratch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentSet(BTreeSet<Component>);

impl ComponentSet {
    pub fn new(items: impl IntoIterator<Item = Component>) -> Self {
        ComponentSet(items.into_iter().collect())
    }

    /// Parses a comma-separated list such as `emb,ffn,wo`. The empty string
    /// is the empty set.
    pub fn parse(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Component::from_str)
            .collect::<Result<BTreeSet<_>>>()
            .map(ComponentSet)
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Component> + '_ {
        self.0.iter().copied()
    }

    /// The ablation grid: `{EMB}`, `{EMB,FFN}`, `{EMB,FFN,WO}`,
    /// `{EMB,FFN,ATTN_HYBRID}`.
    pub fn ablation_grid() -> Vec<ComponentSet> {
        use Component::*;
        vec![
            ComponentSet::new([Emb]),
            ComponentSet::new([Emb, Ffn]),
            ComponentSet::new([Emb, Ffn, Wo]),
            ComponentSet::new([Emb, Ffn, AttnHybrid]),
        ]
    }
}

impl fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<_> = self.0.iter().map(|c| c.tag()).collect();
        write!(f, "{}", tags.join("+"))
    }
}

/// Names of the parameters of `config` that `set` covers, grouped by
/// component then sorted by name.
pub fn resolve_component_names(config: &ModelConfig, set: &ComponentSet) -> Result<Vec<(String, Component)>> {
    let shapes: BTreeMap<String, Vec<usize>> = config.parameter_shapes()?.into_iter().collect();
    let mut out = Vec::new();
    for c in set.iter() {
        let mut names: Vec<String> = match c {
            Component::Emb => ["embed.in", "embed.out", "final_ln.b", "final_ln.g"]
                .into_iter()
                .filter(|n| shapes.contains_key(*n))
                .map(String::from)
                .collect(),
            Component::Ffn => shapes
                .keys()
                .filter(|n| is_layer_part(n, "ffn.") || is_layer_part(n, "ln2."))
                .cloned()
                .collect(),
            Component::Wo => {
                let mut v = Vec::new();
                for i in 0..config.n_layers {
                    let name = format!("layer.{i}.mix.wo");
                    if !shapes.contains_key(&name) {
                        return Err(Error::MissingParameter { name });
                    }
                    v.push(name);
                }
                v
            }
            Component::AttnHybrid => {
                if !config.is_hybrid() {
                    return Err(Error::Config(
                        "the attn component needs a hybrid destination model".into(),
                    ));
                }
                let layers: Vec<usize> = hybrid_layer_indices(config.n_layers)?.into_iter().map(|i| i - 1).collect();
                if let Some(&i) = layers.iter().find(|&&i| config.mixer_kinds[i] != MixerKind::Mha) {
                    return Err(Error::Config(format!(
                        "layer {} of the destination is not an attention layer",
                        i + 1
                    )));
                }
                shapes
                    .keys()
                    .filter(|n| {
                        layers.iter().any(|i| {
                            n.starts_with(&format!("layer.{i}.mix.")) || n.starts_with(&format!("layer.{i}.ln1."))
                        })
                    })
                    .cloned()
                    .collect()
            }
        };
        names.sort();
        out.extend(names.into_iter().map(|n| (n, c)));
    }
    Ok(out)
}

fn is_layer_part(name: &str, part: &str) -> bool {
    name.strip_prefix("layer.")
        .and_then(|rest| rest.split_once('.'))
        .is_some_and(|(idx, tail)| idx.parse::<usize>().is_ok() && tail.starts_with(part))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub src: String,
    pub dst: String,
    pub shape: Vec<usize>,
    pub set: Component,
}

/// Ordered list of tensor copies; serialized as a JSON array.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransferPlan {
    pub entries: Vec<PlanEntry>,
}

impl TransferPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dst_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.dst.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn plan_or_errors(src: &ModelConfig, dst: &ModelConfig, sets: &ComponentSet) -> Result<(TransferPlan, Vec<Error>)> {
    let names = resolve_component_names(dst, sets)?;
    let src_shapes: BTreeMap<String, Vec<usize>> = src.parameter_shapes()?.into_iter().collect();
    let dst_shapes: BTreeMap<String, Vec<usize>> = dst.parameter_shapes()?.into_iter().collect();
    let mut seen = BTreeSet::new();
    let mut plan = TransferPlan::default();
    let mut problems = Vec::new();
    for (name, set) in names {
        if !seen.insert(name.clone()) {
            continue;
        }
        let dst_shape = &dst_shapes[&name];
        match src_shapes.get(&name) {
            None => problems.push(Error::MissingParameter { name }),
            Some(s) if s != dst_shape => problems.push(Error::IncompatibleShape {
                name,
                src: s.clone(),
                dst: dst_shape.clone(),
            }),
            Some(_) => plan.entries.push(PlanEntry {
                src: name.clone(),
                dst: name,
                shape: dst_shape.clone(),
                set,
            }),
        }
    }
    Ok((plan, problems))
}

/// Identity-named plan for `sets`, validated shape by shape. Returns the
/// first incompatibility.
pub fn build_transfer_plan(src: &ModelConfig, dst: &ModelConfig, sets: &ComponentSet) -> Result<TransferPlan> {
    let (plan, problems) = plan_or_errors(src, dst, sets)?;
    match problems.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(plan),
    }
}

/// Every incompatibility between `src` and `dst` for `sets`, for
/// per-tensor reports.
pub fn transfer_incompatibilities(src: &ModelConfig, dst: &ModelConfig, sets: &ComponentSet) -> Result<Vec<Error>> {
    Ok(plan_or_errors(src, dst, sets)?.1)
}

/// Copy every plan entry from `src` into `dst`. The whole plan is checked
/// against both stores before anything is written.
pub fn apply_transfer<F: Scalar>(src: &ParameterStore<F>, dst: &mut ParameterStore<F>, plan: &TransferPlan) -> Result<()> {
    for e in &plan.entries {
        let s = src
            .get(&e.src)
            .ok_or_else(|| Error::PlanMismatch(format!("source has no tensor {}", e.src)))?;
        let d = dst
            .get(&e.dst)
            .ok_or_else(|| Error::PlanMismatch(format!("destination has no tensor {}", e.dst)))?;
        if s.dims() != e.shape.as_slice() || d.dims() != e.shape.as_slice() {
            return Err(Error::PlanMismatch(format!(
                "{}: plan shape {:?}, source {:?}, destination {:?}",
                e.dst,
                e.shape,
                s.dims(),
                d.dims()
            )));
        }
    }
    for e in &plan.entries {
        let t = src.get(&e.src).expect("checked").clone();
        dst.insert(e.dst.clone(), t);
    }
    Ok(())
}

/// File name of the plan written next to a transferred student checkpoint.
pub const PLAN_FILE: &str = "transfer-plan.json";

/// Initialize `student` from `seed`, copy the `sets` components out of the
/// donor checkpoint and save the result to `out`, with the plan written to
/// [`PLAN_FILE`] in the same directory. Nothing is written on error.
pub fn transfer_checkpoint(
    donor: &Path,
    student: &ModelConfig,
    sets: &ComponentSet,
    seed: u64,
    out: &Path,
) -> Result<TransferPlan> {
    let (donor_store, donor_meta) = load_checkpoint::<f32>(donor)?;
    let donor_model = donor_meta
        .model
        .ok_or_else(|| Error::BadMetadata(format!("{} carries no model config", donor.display())))?;
    let plan = build_transfer_plan(&donor_model, student, sets)?;
    let mut store = build_model::<f32>(student, seed)?;
    apply_transfer(&donor_store, &mut store, &plan)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&store, &CheckpointMeta::new(Some(student.clone()), 0, seed, f32::DTYPE), out)?;
    let plan_path = out.with_file_name(PLAN_FILE);
    std::fs::write(&plan_path, plan.to_json()).map_err(|e| Error::io(&plan_path, e))?;
    Ok(plan)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezePolicy {
    /// Transferred weights stay frozen for the whole run.
    Frozen,
    /// Nothing is frozen.
    #[default]
    Unfrozen,
    /// Frozen until the loss-improvement-threshold rule fires.
    Lit,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(FreezePolicy::Frozen),
            "unfrozen" => Ok(FreezePolicy::Unfrozen),
            "lit" => Ok(FreezePolicy::Lit),
            other => Err(Error::Config(format!(
                "unknown freeze policy {other:?}; expected frozen, unfrozen or lit"
            ))),
        }
    }
}

/// Parameter names excluded from optimizer updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: BTreeSet<String>,
    policy: FreezePolicy,
}

impl FreezeMask {
    pub fn empty() -> Self {
        FreezeMask::default()
    }

    pub fn policy(&self) -> FreezePolicy {
        self.policy
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Unfreeze everything; used when the LIT scheduler fires.
    pub fn clear(&mut self) {
        self.frozen.clear();
    }
}

pub fn make_freeze_mask(plan: &TransferPlan, policy: FreezePolicy) -> FreezeMask {
    let frozen = match policy {
        FreezePolicy::Frozen | FreezePolicy::Lit => plan.dst_names().map(String::from).collect(),
        FreezePolicy::Unfrozen => BTreeSet::new(),
    };
    FreezeMask { frozen, policy }
}
