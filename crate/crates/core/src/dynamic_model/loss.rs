use crate::error::{Error, Result};
use crate::numerics::{dot, log_sigmoid, sigmoid};

/// Training objective for one target step given the positive score
/// `p = f_pos · d` and negative scores `q_j = f_neg_j · d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// `-ln σ(p) - Σ_j ln σ(-q_j)`
    Sigmoid,
    /// `-ln( e^p / (e^p + Σ_j e^{q_j}) )`
    Softmax,
    /// `(1/n) Σ_j σ(q_j - p)`
    #[default]
    Rank,
}

impl LossKind {
    pub fn code(self) -> u8 {
        match self {
            LossKind::Sigmoid => 0,
            LossKind::Softmax => 1,
            LossKind::Rank => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(LossKind::Sigmoid),
            1 => Ok(LossKind::Softmax),
            2 => Ok(LossKind::Rank),
            _ => Err(Error::Checkpoint(format!("unknown loss kind {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sigmoid => "sigmoid",
            LossKind::Softmax => "softmax",
            LossKind::Rank => "rank",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sigmoid" => Ok(LossKind::Sigmoid),
            "softmax" => Ok(LossKind::Softmax),
            "rank" => Ok(LossKind::Rank),
            other => Err(format!("unknown loss kind `{other}` (sigmoid|softmax|rank)")),
        }
    }
}

/// Loss for one step, and optionally its derivatives with respect to the
/// positive score and each negative score.
pub(crate) fn loss_from_scores(kind: LossKind, pos: f64, negs: &[f64], dnegs: Option<&mut [f64]>) -> (f64, f64) {
    let n = negs.len() as f64;
    match kind {
        LossKind::Sigmoid => {
            let loss = -log_sigmoid(pos) - negs.iter().map(|&q| log_sigmoid(-q)).sum::<f64>();
            if let Some(dq) = dnegs {
                for (g, &q) in dq.iter_mut().zip(negs) {
                    *g = sigmoid(q);
                }
            }
            (loss, -sigmoid(-pos))
        }
        LossKind::Softmax => {
            let max = negs.iter().copied().fold(pos, f64::max);
            let denom = (pos - max).exp() + negs.iter().map(|&q| (q - max).exp()).sum::<f64>();
            let log_z = max + denom.ln();
            if let Some(dq) = dnegs {
                for (g, &q) in dq.iter_mut().zip(negs) {
                    *g = (q - log_z).exp();
                }
            }
            (log_z - pos, (pos - log_z).exp() - 1.0)
        }
        LossKind::Rank => {
            let mut loss = 0.0;
            let mut dpos = 0.0;
            let mut dq = dnegs;
            for (j, &q) in negs.iter().enumerate() {
                let s = sigmoid(q - pos);
                loss += s;
                let ds = s * (1.0 - s) / n;
                dpos -= ds;
                if let Some(dq) = dq.as_deref_mut() {
                    dq[j] = ds;
                }
            }
            (loss / n, dpos)
        }
    }
}

pub fn sequence_loss(kind: LossKind, d: &[f64], f_pos: &[f64], negs: &[&[f64]]) -> Result<f64> {
    if negs.is_empty() {
        return Err(Error::Precondition("at least one negative example is required".into()));
    }
    let pos = dot(f_pos, d)?;
    let scores = negs.iter().map(|f| dot(f, d)).collect::<Result<Vec<_>>>()?;
    Ok(loss_from_scores(kind, pos, &scores, None).0)
}
