use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::models::Model;
use crate::tensor::{ParamStore, Scalar};
use crate::{Error, Result};

/// Absolute value of the product of the head's two linear layers, one
/// entry per head input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAnalysis {
    pub values: Vec<f64>,
    /// Leading entries that come from the audio encoder.
    pub audio_dim: usize,
    /// Whether the batch-norm scale `γ/√(σ²+ε)` was folded into the product.
    pub bn_folded: bool,
}

impl WeightAnalysis {
    pub fn audio(&self) -> &[f64] {
        &self.values[..self.audio_dim]
    }

    pub fn subject(&self) -> &[f64] {
        &self.values[self.audio_dim..]
    }

    pub fn audio_mean(&self) -> f64 {
        mean(self.audio())
    }

    pub fn subject_mean(&self) -> f64 {
        mean(self.subject())
    }

    /// `index,mean_abs_weight` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,mean_abs_weight\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }

    /// Element-wise mean over several analyses of the same architecture.
    pub fn average(items: &[WeightAnalysis]) -> Result<WeightAnalysis> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("no analyses to average".into()))?;
        if items.iter().any(|a| a.values.len() != first.values.len() || a.audio_dim != first.audio_dim) {
            return Err(Error::Validation("analyses come from different architectures".into()));
        }
        let n = items.len() as f64;
        let values = (0..first.values.len()).map(|i| items.iter().map(|a| a.values[i]).sum::<f64>() / n).collect();
        Ok(WeightAnalysis { values, audio_dim: first.audio_dim, bn_folded: first.bn_folded })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `|W2 · W1|` for `W1 = head.fc1.weight` (`hidden × D`) and
/// `W2 = head.fc2.weight` (`1 × hidden`). With `fold_bn`, row `j` of `W1`
/// is first scaled by the head batch norm's `γ_j/√(σ²_j+ε)`.
pub fn last_mlp_product<T: Scalar>(params: &ParamStore<T>, fold_bn: bool, bn_eps: f64) -> Result<Vec<f64>> {
    let w1 = params.tensor("head.fc1.weight")?;
    let w2 = params.tensor("head.fc2.weight")?;
    let [hidden, d] = w1.shape() else {
        return Err(Error::shape("analyze", format!("head.fc1.weight has shape {:?}", w1.shape())));
    };
    if w2.shape() != [1, *hidden] {
        return Err(Error::shape("analyze", format!("head.fc2.weight has shape {:?}, expected [1, {hidden}]", w2.shape())));
    }
    let scale: Vec<f64> = if fold_bn {
        let gamma = params.tensor("head.bn.gamma")?.data();
        let var = params.tensor("head.bn.running_var")?.data();
        gamma.iter().zip(var).map(|(g, v)| g.to_f64_lossy() / (v.to_f64_lossy() + bn_eps).sqrt()).collect()
    } else {
        vec![1.0; *hidden]
    };
    let (w1, w2) = (w1.data(), w2.data());
    Ok((0..*d)
        .map(|i| (0..*hidden).map(|j| w2[j].to_f64_lossy() * scale[j] * w1[j * d + i].to_f64_lossy()).sum::<f64>().abs())
        .collect())
}

pub fn analyze_last_mlp<T: Scalar>(model: &Model<T>, fold_bn: bool) -> Result<WeightAnalysis> {
    let values = last_mlp_product(&model.params, fold_bn, model.config.bn_eps)?;
    let audio_dim = model.config.encoder.embedding_dim();
    if values.len() != model.config.head_input_dim() {
        return Err(Error::shape(
            "analyze",
            format!("head input has {} entries, config expects {}", values.len(), model.config.head_input_dim()),
        ));
    }
    Ok(WeightAnalysis { values, audio_dim, bn_folded: fold_bn })
}
