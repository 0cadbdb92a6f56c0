//! Turning saliencies into pruning masks.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{QMatrix, SaliencyVector};
use crate::structures::Segmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SospH,
    SospI,
    FirstOrder,
    SospIDiag,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SospH => "sosp_h",
            Method::SospI => "sosp_i",
            Method::FirstOrder => "first_order",
            Method::SospIDiag => "sosp_i_diag",
            Method::Random => "random",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown pruning method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub method: Method,
    #[serde(default)]
    pub kernel_scaling: bool,
    /// Maximum fraction of a layer's structures that may be pruned.
    #[serde(default)]
    pub layer_cap: Option<f64>,
}

impl SelectionPolicy {
    pub fn new(method: Method) -> Self {
        SelectionPolicy {
            method,
            kernel_scaling: false,
            layer_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.layer_cap {
            Some(c) if !(c > 0.0 && c <= 1.0) => Err(Error::Config(format!("layer cap {c} outside (0, 1]"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub structure: usize,
    pub layer: usize,
    pub score: f64,
}

/// Pruned structures in selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningMask {
    pub method: String,
    pub ratio: f64,
    pub seed: Option<u64>,
    pub entries: Vec<MaskEntry>,
    /// Structures that could not be selected because of layer caps.
    #[serde(default)]
    pub shortfall: usize,
}

impl PruningMask {
    pub fn empty(method: &str) -> Self {
        PruningMask {
            method: method.to_string(),
            ratio: 0.0,
            seed: None,
            entries: Vec::new(),
            shortfall: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.structure).collect()
    }

    pub fn pruned_flags(&self, structures: usize) -> Vec<bool> {
        let mut out = vec![false; structures];
        for e in &self.entries {
            out[e.structure] = true;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Checks ids against a segmentation and rejects duplicates.
    pub fn validate(&self, seg: &Segmentation) -> Result<()> {
        let mut seen = vec![false; seg.len()];
        for e in &self.entries {
            let st = seg.get(e.structure)?;
            if st.layer != e.layer {
                return Err(Error::Input(format!(
                    "mask entry {} names layer {}, structure lives in layer {}",
                    e.structure, e.layer, st.layer
                )));
            }
            if std::mem::replace(&mut seen[e.structure], true) {
                return Err(Error::Input(format!("structure {} appears twice in mask", e.structure)));
            }
        }
        Ok(())
    }
}

/// `round(ratio * S)`.
pub fn target_count(ratio: f64, structures: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("pruning ratio {ratio} outside [0, 1]")));
    }
    Ok((ratio * structures as f64).round() as usize)
}

/// Per-layer pruning budget under an optional cap.
struct Caps {
    layer_of: Vec<usize>,
    remaining: BTreeMap<usize, usize>,
}

impl Caps {
    fn new(seg: &Segmentation, cap: Option<f64>) -> Self {
        let mut remaining = BTreeMap::new();
        for layer in seg.layers() {
            let n = seg.in_layer(layer).len();
            let limit = match cap {
                Some(c) => ((c * n as f64) + 1e-9).floor() as usize,
                None => n,
            };
            remaining.insert(layer, limit.min(n));
        }
        Caps {
            layer_of: seg.structures.iter().map(|s| s.layer).collect(),
            remaining,
        }
    }

    fn allows(&self, s: usize) -> bool {
        self.remaining[&self.layer_of[s]] > 0
    }

    fn take(&mut self, s: usize) {
        *self.remaining.get_mut(&self.layer_of[s]).expect("known layer") -= 1;
    }
}

fn warn_collapse(seg: &Segmentation, mask: &PruningMask) {
    for layer in seg.layers() {
        let n = seg.in_layer(layer).len();
        let pruned = mask.entries.iter().filter(|e| e.layer == layer).count();
        if pruned == n {
            tracing::warn!(layer, "all structures of layer {layer} pruned (layer collapse)");
        }
    }
}

fn scaled(scores: &[f64], seg: &Segmentation, policy: &SelectionPolicy) -> Vec<f64> {
    scores
        .iter()
        .zip(&seg.structures)
        .map(|(&v, st)| if policy.kernel_scaling { v / st.kernel as f64 } else { v })
        .collect()
}

/// Ascending sort of scores, ties by lowest id, honouring layer caps.
fn select_sorted(method: &str, scores: &[f64], seg: &Segmentation, policy: &SelectionPolicy, ratio: f64) -> Result<PruningMask> {
    policy.validate()?;
    if scores.len() != seg.len() {
        return Err(Error::Input(format!("{} scores for {} structures", scores.len(), seg.len())));
    }
    let m = target_count(ratio, seg.len())?;
    let scores = scaled(scores, seg, policy);
    let mut order: Vec<usize> = (0..seg.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut caps = Caps::new(seg, policy.layer_cap);
    let mut entries = Vec::with_capacity(m);
    for s in order {
        if entries.len() == m {
            break;
        }
        if caps.allows(s) {
            caps.take(s);
            entries.push(MaskEntry {
                structure: s,
                layer: seg.structures[s].layer,
                score: scores[s],
            });
        }
    }
    let mask = PruningMask {
        method: method.to_string(),
        ratio,
        seed: None,
        shortfall: m - entries.len(),
        entries,
    };
    warn_collapse(seg, &mask);
    Ok(mask)
}

pub fn select_sosp_h(sal: &SaliencyVector, seg: &Segmentation, policy: &SelectionPolicy, ratio: f64) -> Result<PruningMask> {
    select_sorted("sosp_h", &sal.total, seg, policy, ratio)
}

pub fn select_first_order(first_order: &[f64], seg: &Segmentation, policy: &SelectionPolicy, ratio: f64) -> Result<PruningMask> {
    select_sorted("first_order", first_order, seg, policy, ratio)
}

pub fn select_sosp_i_diag(q: &QMatrix, seg: &Segmentation, policy: &SelectionPolicy, ratio: f64) -> Result<PruningMask> {
    check_q(q, seg)?;
    select_sorted("sosp_i_diag", &q.diagonal(), seg, policy, ratio)
}

fn check_q(q: &QMatrix, seg: &Segmentation) -> Result<()> {
    if q.size != seg.len() {
        return Err(Error::Input(format!("Q has size {}, segmentation has {} structures", q.size, seg.len())));
    }
    Ok(())
}

/// Greedy minimisation of the pairwise objective: repeatedly adds the
/// structure `s` minimising `Q[s][s] + 2 * sum_{t in M} Q[s][t]`, keeping the
/// sums over `M` as running totals.
pub fn select_sosp_i(q: &QMatrix, seg: &Segmentation, policy: &SelectionPolicy, ratio: f64) -> Result<PruningMask> {
    policy.validate()?;
    check_q(q, seg)?;
    let size = q.size;
    let m = target_count(ratio, size)?;
    let scale: Vec<f64> = seg
        .structures
        .iter()
        .map(|st| if policy.kernel_scaling { st.kernel as f64 } else { 1.0 })
        .collect();
    let mut caps = Caps::new(seg, policy.layer_cap);
    let mut chosen = vec![false; size];
    let mut cross = vec![0.0; size];
    let mut entries = Vec::with_capacity(m);
    while entries.len() < m {
        let mut best: Option<(usize, f64)> = None;
        for s in 0..size {
            if chosen[s] || !caps.allows(s) {
                continue;
            }
            let score = (q.get(s, s) + 2.0 * cross[s]) / scale[s];
            if best.is_none_or(|(_, b)| score < b) {
                best = Some((s, score));
            }
        }
        let Some((s, score)) = best else { break };
        chosen[s] = true;
        caps.take(s);
        let row = &q.values[s * size..(s + 1) * size];
        for (c, &v) in cross.iter_mut().zip(row) {
            *c += v;
        }
        entries.push(MaskEntry {
            structure: s,
            layer: seg.structures[s].layer,
            score,
        });
    }
    let mask = PruningMask {
        method: "sosp_i".into(),
        ratio,
        seed: None,
        shortfall: m - entries.len(),
        entries,
    };
    warn_collapse(seg, &mask);
    Ok(mask)
}

/// Uniformly random structures (within caps), seeded.
pub fn select_random(seg: &Segmentation, policy: &SelectionPolicy, ratio: f64, seed: u64) -> Result<PruningMask> {
    policy.validate()?;
    let m = target_count(ratio, seg.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..seg.len()).collect();
    order.shuffle(&mut rng);
    let mut caps = Caps::new(seg, policy.layer_cap);
    let mut entries = Vec::with_capacity(m);
    for s in order {
        if entries.len() == m {
            break;
        }
        if caps.allows(s) {
            caps.take(s);
            entries.push(MaskEntry {
                structure: s,
                layer: seg.structures[s].layer,
                score: 0.0,
            });
        }
    }
    Ok(PruningMask {
        method: "random".into(),
        ratio,
        seed: Some(seed),
        shortfall: m - entries.len(),
        entries,
    })
}

/// Keeps the number of pruned structures per layer and redraws which ones,
/// uniformly within each layer.
pub fn shuffle_within_layers(mask: &PruningMask, seg: &Segmentation, seed: u64) -> Result<PruningMask> {
    mask.validate(seg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(mask.len());
    for layer in seg.layers() {
        let pruned = mask.entries.iter().filter(|e| e.layer == layer).count();
        if pruned == 0 {
            continue;
        }
        let ids = seg.in_layer(layer);
        let mut pick: Vec<usize> = index::sample(&mut rng, ids.len(), pruned).into_vec();
        pick.sort_unstable();
        entries.extend(pick.into_iter().map(|k| MaskEntry {
            structure: ids[k],
            layer,
            score: 0.0,
        }));
    }
    Ok(PruningMask {
        method: format!("{}_shuffled", mask.method),
        ratio: mask.ratio,
        seed: Some(seed),
        entries,
        shortfall: mask.shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::segment;
    use crate::zoo::mlp_toy;

    /// Three structures in one layer, kernel 1.
    fn seg3() -> Segmentation {
        segment(&mlp_toy(2, &[3], 1, false)).unwrap()
    }

    fn sal(total: &[f64]) -> SaliencyVector {
        SaliencyVector::from_parts("sosp_h", total.to_vec(), vec![0.0; total.len()])
    }

    #[test]
    fn argmin_and_tie_break() {
        let seg = seg3();
        let p = SelectionPolicy::new(Method::SospH);
        let m = select_sosp_h(&sal(&[3.0, 1.0, 2.0]), &seg, &p, 1.0 / 3.0).unwrap();
        assert_eq!(m.ids(), vec![1]);
        let m = select_sosp_h(&sal(&[1.0, 1.0, 1.0]), &seg, &p, 2.0 / 3.0).unwrap();
        assert_eq!(m.ids(), vec![0, 1]);
    }

    #[test]
    fn hand_evaluated_greedy() {
        let seg = segment(&mlp_toy(2, &[2], 1, false)).unwrap();
        let q = QMatrix::new(2, vec![1.0, 5.0, 5.0, 2.0]).unwrap();
        let m = select_sosp_i(&q, &seg, &SelectionPolicy::new(Method::SospI), 1.0).unwrap();
        assert_eq!(m.ids(), vec![0, 1]);
        assert_eq!(m.entries[0].score, 1.0);
        assert_eq!(m.entries[1].score, 12.0);
    }

    #[test]
    fn caps_limit_each_layer_and_record_shortfall() {
        let seg = segment(&mlp_toy(2, &[4, 4], 1, false)).unwrap();
        let mut p = SelectionPolicy::new(Method::SospH);
        p.layer_cap = Some(0.5);
        let m = select_sosp_h(&sal(&[0.0; 8]), &seg, &p, 1.0).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.shortfall, 4);
        assert_eq!(m.ids(), vec![0, 1, 4, 5]);
    }

    #[test]
    fn mask_json_is_stable() {
        let seg = seg3();
        let m = select_sosp_h(&sal(&[3.0, 1.0, 2.0]), &seg, &SelectionPolicy::new(Method::SospH), 0.5).unwrap();
        let golden = r#"{
  "method": "sosp_h",
  "ratio": 0.5,
  "seed": null,
  "entries": [
    {
      "structure": 1,
      "layer": 0,
      "score": 1.0
    },
    {
      "structure": 2,
      "layer": 0,
      "score": 2.0
    }
  ],
  "shortfall": 0
}"#;
        assert_eq!(m.to_json().unwrap(), golden);
        assert_eq!(PruningMask::from_json(golden).unwrap(), m);
    }

    #[test]
    fn bad_ratio_and_cap_are_config_errors() {
        let seg = seg3();
        let p = SelectionPolicy::new(Method::SospH);
        assert_eq!(select_sosp_h(&sal(&[1.0; 3]), &seg, &p, 1.5).unwrap_err().category(), "config");
        let mut p = p;
        p.layer_cap = Some(0.0);
        assert_eq!(select_sosp_h(&sal(&[1.0; 3]), &seg, &p, 0.5).unwrap_err().category(), "config");
        assert_eq!("bogus".parse::<Method>().unwrap_err().category(), "config");
        assert_eq!("sosp_i_diag".parse::<Method>().unwrap(), Method::SospIDiag);
    }
}
