//! Motion sequences: per-frame parameter layout and validity masking.

use super::template::FRAME_PARAMS;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionId {
    Walk = 0,
    Sit = 1,
    StandUp = 2,
    Lie = 3,
}

pub const ACTIONS: [ActionId; 4] = [ActionId::Walk, ActionId::Sit, ActionId::StandUp, ActionId::Lie];

impl ActionId {
    pub fn from_index(i: usize) -> Result<ActionId> {
        ACTIONS
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action index {i} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            ActionId::Walk => "walk",
            ActionId::Sit => "sit",
            ActionId::StandUp => "stand up",
            ActionId::Lie => "lie",
        }
    }

    /// Template verb phrase preceding the goal class name.
    pub fn phrase(self) -> &'static str {
        match self {
            ActionId::Walk => "walk to the",
            ActionId::Sit => "sit on the",
            ActionId::StandUp => "stand up from the",
            ActionId::Lie => "lie on the",
        }
    }

    /// The frame at which goal distance is evaluated: the first frame for
    /// stand up, the last valid frame otherwise.
    pub fn eval_frame(self, valid_len: usize) -> usize {
        match self {
            ActionId::StandUp => 0,
            _ => valid_len.saturating_sub(1),
        }
    }
}

/// T x (3 + 6 + 3*J) parameter sequence with a per-frame validity mask.
#[derive(Clone, Debug)]
pub struct MotionSeq {
    /// (T, FRAME_PARAMS): translation, 6-D orientation, axis-angle pose.
    pub params: Tensor,
    pub valid: Vec<bool>,
    pub action: ActionId,
}

impl MotionSeq {
    pub fn new(params: Tensor, valid: Vec<bool>, action: ActionId) -> Result<MotionSeq> {
        if params.rank() != 2 || params.shape()[1] != FRAME_PARAMS {
            return Err(Error::InvalidShape {
                op: "MotionSeq::new",
                shape: params.shape().to_vec(),
                reason: format!("expected (T, {FRAME_PARAMS})"),
            });
        }
        if valid.len() != params.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "valid mask length {} != T {}",
                valid.len(),
                params.shape()[0]
            )));
        }
        Ok(MotionSeq { params, valid, action })
    }

    pub fn frames(&self) -> usize {
        self.params.shape()[0]
    }

    /// Number of leading valid frames.
    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.params.row(t)
    }

    /// Split one frame row into (translation, orientation 6-D, pose).
    pub fn split_frame(row: &[f64]) -> (&[f64], &[f64], &[f64]) {
        (&row[0..3], &row[3..9], &row[9..FRAME_PARAMS])
    }
}
