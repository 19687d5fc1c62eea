use super::config::{Distill, LossWeights};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Outputs;

/// The total loss on the tape plus every logged component.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub total_value: f64,
    /// Base cross entropy per supervised branch.
    pub base: Vec<f64>,
    /// Cross cross entropy per supervised branch (empty without cross modules).
    pub cross: Vec<f64>,
    /// Unweighted distillation term per supervised branch (empty when inactive).
    pub distill: Vec<f64>,
}

/// `Σ_i CE(base_i) + λ1·CE(cross_i) + λ2·KL_i` (or `λ3·L2_i`) over supervised branches.
///
/// The cross logits are the distillation teacher and are detached in that term.
pub fn total_loss(tape: &mut Tape, out: &Outputs, labels: &[Vec<usize>], w: &LossWeights) -> Result<LossParts> {
    w.validate()?;
    let c = out.base.len();
    if labels.len() < c || (!out.cross.is_empty() && out.cross.len() != c) {
        return Err(Error::Contract(format!(
            "loss over {c} branches got {} label lists and {} cross outputs",
            labels.len(),
            out.cross.len()
        )));
    }
    let mut terms = Vec::new();
    let mut parts = LossParts {
        total: out.base[0],
        total_value: 0.0,
        base: Vec::with_capacity(c),
        cross: Vec::new(),
        distill: Vec::new(),
    };
    for i in 0..c {
        let b = tape.cross_entropy(out.base[i], &labels[i])?;
        parts.base.push(tape.value(b).values()[0]);
        terms.push(b);
        let Some(&cross) = out.cross.get(i) else {
            continue;
        };
        let x = tape.cross_entropy(cross, &labels[i])?;
        parts.cross.push(tape.value(x).values()[0]);
        terms.push(tape.scale(x, w.lambda1));
        let teacher = tape.detach(cross);
        let d = match w.distill() {
            Distill::None => continue,
            Distill::Kl => (tape.kl_divergence(out.base[i], teacher)?, w.lambda2),
            Distill::L2 => (tape.mse_loss(out.base[i], teacher)?, w.lambda3),
        };
        parts.distill.push(tape.value(d.0).values()[0]);
        terms.push(tape.scale(d.0, d.1));
    }
    let stacked = tape.concat_cols(&terms)?;
    parts.total = tape.sum(stacked);
    parts.total_value = tape.value(parts.total).values()[0];
    Ok(parts)
}

impl LossParts {
    /// The total recomputed from the logged components.
    pub fn recomposed(&self, w: &LossWeights) -> f64 {
        let dw = match w.distill() {
            Distill::None => 0.0,
            Distill::Kl => w.lambda2,
            Distill::L2 => w.lambda3,
        };
        let mut s = 0.0;
        for i in 0..self.base.len() {
            s += self.base[i];
            if let Some(x) = self.cross.get(i) {
                s += w.lambda1 * x;
            }
            if let Some(d) = self.distill.get(i) {
                s += dw * d;
            }
        }
        s
    }
}
