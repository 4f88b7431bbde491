// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy typographic-circuit construction, attention-sink interventions
//! and export of circuit-ablated ("dyslexic") models.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datakit::{zero_shot_classify, ClassPrototypes, Dataset};
use crate::error::{Error, Result};
use crate::score::ScoreMatrix;
use crate::vit::{self, AlphaOverride, HeadId, InterventionSpec, ModelConfig, VitWeights};

/// Default accuracy-drop budget.
pub const DEFAULT_EPSILON: f64 = 0.01;
/// Default fraction of the clean set used as the control split.
pub const DEFAULT_CONTROL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitHead {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

impl CircuitHead {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

/// Selected heads (descending score) with the audit numbers of the run
/// that produced them. Only `heads` is required when reading JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Circuit {
    pub heads: Vec<CircuitHead>,
    pub epsilon: f64,
    pub control_acc_base: f64,
    pub control_acc_final: f64,
}

impl Circuit {
    pub fn empty(epsilon: f64, control_acc: f64) -> Self {
        Self {
            heads: Vec::new(),
            epsilon,
            control_acc_base: control_acc,
            control_acc_final: control_acc,
        }
    }

    pub fn head_ids(&self) -> Vec<HeadId> {
        self.heads.iter().map(CircuitHead::id).collect()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Ablation of every circuit head.
    pub fn intervention(&self) -> InterventionSpec {
        InterventionSpec::ablate(self.head_ids())
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        for h in &self.heads {
            config.check_head(h.id())?;
        }
        Ok(())
    }

    pub fn drop(&self) -> f64 {
        self.control_acc_base - self.control_acc_final
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// One iteration of the greedy loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitStep {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
    pub control_acc: f64,
    pub delta_acc: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitBuild {
    pub circuit: Circuit,
    pub steps: Vec<CircuitStep>,
}

fn control_accuracy(
    w: &VitWeights,
    iv: &InterventionSpec,
    control: &Dataset,
    prototypes: &ClassPrototypes,
) -> Result<f64> {
    Ok(zero_shot_classify(w, iv, control, prototypes)?.summary.acc_image)
}

/// Greedy circuit search.
///
/// Heads are visited by descending score (ties in (layer, head) order).
/// Each head is tentatively added and the cumulative circuit is ablated;
/// the head stays if the control accuracy drop is below `epsilon`,
/// otherwise it is dropped and the search stops.
pub fn build_circuit(
    w: &VitWeights,
    scores: &ScoreMatrix,
    control: &Dataset,
    prototypes: &ClassPrototypes,
    epsilon: f64,
) -> Result<CircuitBuild> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    if scores.scores.is_empty() {
        return Err(Error::invalid("empty score matrix"));
    }
    if scores.layers != w.config.layers || scores.heads != w.config.heads {
        return Err(Error::invalid(format!(
            "score matrix is {}x{} but the model has {}x{} heads",
            scores.layers, scores.heads, w.config.layers, w.config.heads
        )));
    }
    if control.is_empty() {
        return Err(Error::invalid("control set is empty"));
    }
    let base = control_accuracy(w, &InterventionSpec::none(), control, prototypes)?;
    let mut circuit = Circuit::empty(epsilon, base);
    let mut steps = Vec::new();
    for (head, score) in scores.ranked() {
        let mut trial = circuit.head_ids();
        trial.push(head);
        let acc = control_accuracy(w, &InterventionSpec::ablate(trial), control, prototypes)?;
        let delta = base - acc;
        let accepted = delta < epsilon;
        steps.push(CircuitStep {
            layer: head.layer,
            head: head.head,
            score,
            control_acc: acc,
            delta_acc: delta,
            accepted,
        });
        if !accepted {
            break;
        }
        circuit.heads.push(CircuitHead {
            layer: head.layer,
            head: head.head,
            score,
        });
        circuit.control_acc_final = acc;
    }
    Ok(CircuitBuild { circuit, steps })
}

/// Recomputes the control accuracy drop of a finished circuit.
pub fn verify_circuit(
    w: &VitWeights,
    circuit: &Circuit,
    control: &Dataset,
    prototypes: &ClassPrototypes,
) -> Result<f64> {
    circuit.validate_for(&w.config)?;
    let base = control_accuracy(w, &InterventionSpec::none(), control, prototypes)?;
    let ablated = control_accuracy(w, &circuit.intervention(), control, prototypes)?;
    Ok(base - ablated)
}

/// The α values 0.0, 0.1, …, 1.0.
pub fn default_alpha_grid() -> Vec<f32> {
    (0..=10).map(|k| k as f32 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f32,
    pub mean_p_image: f64,
    pub mean_p_typo: Option<f64>,
    pub acc_image: f64,
    pub acc_typo: Option<f64>,
}

/// Forces every circuit head's cls attention to `α` on cls (spatial mass
/// rescaled to `1 − α`) and measures zero-shot behaviour for each `α`.
pub fn alpha_sweep(
    w: &VitWeights,
    circuit: &Circuit,
    data: &Dataset,
    prototypes: &ClassPrototypes,
    grid: &[f32],
) -> Result<Vec<AlphaPoint>> {
    if circuit.is_empty() {
        return Err(Error::invalid("alpha sweep needs a non-empty circuit"));
    }
    circuit.validate_for(&w.config)?;
    if let Some(&a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidAlpha(a));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f32::total_cmp);
    grid.iter()
        .map(|&alpha| {
            let iv = InterventionSpec::none()
                .with_alpha(AlphaOverride::uniform(circuit.head_ids(), alpha));
            let s = zero_shot_classify(w, &iv, data, prototypes)?.summary;
            Ok(AlphaPoint {
                alpha,
                mean_p_image: s.mean_p_image,
                mean_p_typo: s.mean_p_typo,
                acc_image: s.acc_image,
                acc_typo: s.acc_typo,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dyslexic export
// ---------------------------------------------------------------------------

/// On-disk circuit next to a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitSidecar {
    pub model_hash: String,
    pub epsilon: f64,
    pub heads: Vec<CircuitHead>,
    pub control_acc_base: f64,
    pub control_acc_final: f64,
}

impl CircuitSidecar {
    pub fn new(w: &VitWeights, circuit: &Circuit) -> Self {
        Self {
            model_hash: w.model_hash(),
            epsilon: circuit.epsilon,
            heads: circuit.heads.clone(),
            control_acc_base: circuit.control_acc_base,
            control_acc_final: circuit.control_acc_final,
        }
    }

    pub fn circuit(&self) -> Circuit {
        Circuit {
            heads: self.heads.clone(),
            epsilon: self.epsilon,
            control_acc_base: self.control_acc_base,
            control_acc_final: self.control_acc_final,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("sidecar", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `model.safetensors` → `model.circuit.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("circuit.json")
}

/// Writes the weights to `path` and the circuit sidecar next to them.
/// Returns the sidecar path.
pub fn export_dyslexic(w: &VitWeights, circuit: &Circuit, path: &Path) -> Result<PathBuf> {
    circuit.validate_for(&w.config)?;
    w.save(path)?;
    let side = sidecar_path(path);
    CircuitSidecar::new(w, circuit).write(&side)?;
    Ok(side)
}

/// Weights plus the circuit ablation read from a sidecar, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct DyslexicModel {
    pub weights: VitWeights,
    pub circuit: Option<Circuit>,
}

impl DyslexicModel {
    /// The intervention that turns the base weights into this model.
    pub fn intervention(&self) -> InterventionSpec {
        self.circuit
            .as_ref()
            .map_or_else(InterventionSpec::none, Circuit::intervention)
    }
}

/// Loads weights and applies `weights.circuit.json` automatically when it
/// exists. The sidecar must match the weights' content hash and name only
/// heads the model has.
pub fn load_dyslexic(path: &Path) -> Result<DyslexicModel> {
    let weights = vit::load_weights(path)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(DyslexicModel {
            weights,
            circuit: None,
        });
    }
    let sidecar = CircuitSidecar::read(&side)?;
    let circuit = sidecar.circuit();
    circuit.validate_for(&weights.config)?;
    let hash = weights.model_hash();
    if sidecar.model_hash != hash {
        return Err(Error::invalid(format!(
            "sidecar {} was built for model {} but the weights hash to {hash}",
            side.display(),
            sidecar.model_hash
        )));
    }
    Ok(DyslexicModel {
        weights,
        circuit: Some(circuit),
    })
}
