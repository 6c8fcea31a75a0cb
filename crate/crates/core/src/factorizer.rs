//! Periodic rank-based masking of code channels.
//!
//! Every `m` training steps the importances of all code channels are
//! recomputed and the `k = min(⌊pr·C_code⌋, C_code − 1)` least important
//! ones are masked off. The mask is rebuilt from scratch each time, so a
//! channel masked at one update can come back at the next.

use serde::{Deserialize, Serialize};

use crate::block::AlfBlock;
use crate::error::{AlfError, Result};
use crate::tensor::Real;

pub const DEFAULT_UPDATE_PERIOD: usize = 8;
pub const DEFAULT_PRUNING_RATE: f64 = 0.85;

/// Absorbs binary representation error in `pr · C_code` (0.85 · 20 must
/// floor to 17, not 16).
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizerState {
    m: usize,
    pr: f64,
    step: u64,
    importances: Vec<f64>,
}

impl Default for FactorizerState {
    fn default() -> Self {
        Self {
            m: DEFAULT_UPDATE_PERIOD,
            pr: DEFAULT_PRUNING_RATE,
            step: 0,
            importances: Vec::new(),
        }
    }
}

/// Number of channels masked off out of `code_channels` at pruning rate `pr`.
pub fn masked_count(pr: f64, code_channels: usize) -> usize {
    if code_channels == 0 {
        return 0;
    }
    let k = (pr * code_channels as f64 + FLOOR_SLACK).floor() as usize;
    k.min(code_channels - 1)
}

/// `importance[c] = ‖W_code[:,:,:,c]‖₂ · ‖W_exp[c,:]‖₂`, using the unmasked
/// code filters so masked channels can regain rank.
pub fn compute_importances<T: Real>(block: &AlfBlock<T>) -> Vec<f64> {
    let code_norms = block.code_filters_unmasked().channel_norms();
    let exp = block.w_exp();
    let co = exp.channels();
    code_norms
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let row = &exp.data()[c * co..(c + 1) * co];
            let row_norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            n * row_norm
        })
        .collect()
}

/// Masks off the `masked_count(pr, len)` least important channels. Ties
/// mask the lower index first.
pub fn mask_from_importances(importances: &[f64], pr: f64) -> Result<Vec<bool>> {
    if importances.is_empty() {
        return Err(AlfError::Empty("importance vector"));
    }
    let k = masked_count(pr, importances.len());
    let mut order: Vec<usize> = (0..importances.len()).collect();
    order.sort_by(|&a, &b| importances[a].total_cmp(&importances[b]).then(a.cmp(&b)));
    let mut mask = vec![true; importances.len()];
    for &c in &order[..k] {
        mask[c] = false;
    }
    Ok(mask)
}

impl FactorizerState {
    pub fn new(m: usize, pr: f64) -> Result<Self> {
        if m == 0 {
            return Err(AlfError::Config("mask update period m must be positive".into()));
        }
        if !(0.0..1.0).contains(&pr) {
            return Err(AlfError::Config(format!("pruning rate must lie in [0, 1), got {pr}")));
        }
        Ok(Self {
            m,
            pr,
            step: 0,
            importances: Vec::new(),
        })
    }

    pub fn period(&self) -> usize {
        self.m
    }

    pub fn pruning_rate(&self) -> f64 {
        self.pr
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn importances(&self) -> &[f64] {
        &self.importances
    }

    /// Recomputes the mask from the given importances.
    pub fn update_mask(&mut self, importances: Vec<f64>) -> Result<Vec<bool>> {
        let mask = mask_from_importances(&importances, self.pr)?;
        self.importances = importances;
        Ok(mask)
    }

    /// Advances one training step; on every `m`-th step recomputes
    /// importances and installs a fresh mask on `block`. Returns whether an
    /// update happened.
    pub fn step_schedule<T: Real>(&mut self, block: &mut AlfBlock<T>) -> Result<bool> {
        self.step += 1;
        if self.step % self.m as u64 != 0 {
            return Ok(false);
        }
        let importances = compute_importances(block);
        block.set_soft_scores(importances.clone());
        let mask = self.update_mask(importances)?;
        block.set_mask(mask)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, ConvGeometry, Layout, Tensor4};

    #[test]
    fn sort_oracle_example() {
        let mask = mask_from_importances(&[0.9, 0.1, 0.5, 0.7], 0.5).unwrap();
        assert_eq!(mask, vec![true, false, false, true]);
    }

    #[test]
    fn zero_rate_keeps_everything() {
        assert_eq!(mask_from_importances(&[0.3, 0.0, 2.0], 0.0).unwrap(), vec![true; 3]);
    }

    #[test]
    fn clamp_leaves_argmax() {
        let mask = mask_from_importances(&[0.2, 0.8, 0.5, 0.1], 0.99).unwrap();
        assert_eq!(mask, vec![false, true, false, false]);
    }

    #[test]
    fn ties_mask_lower_index_first() {
        let mask = mask_from_importances(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(mask, vec![false, false, true, true]);
    }

    #[test]
    fn empty_importances_rejected() {
        assert!(mask_from_importances(&[], 0.5).is_err());
    }

    #[test]
    fn masked_count_arithmetic() {
        assert_eq!(masked_count(0.85, 64), 54);
        assert_eq!(masked_count(0.85, 20), 17);
        assert_eq!(masked_count(0.5, 16), 8);
        assert_eq!(masked_count(0.99, 4), 3);
        assert_eq!(masked_count(0.0, 7), 0);
        assert_eq!(masked_count(0.9, 1), 0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(FactorizerState::new(0, 0.5).is_err());
        assert!(FactorizerState::new(8, 1.0).is_err());
        assert!(FactorizerState::new(8, -0.1).is_err());
    }

    #[test]
    fn importance_hand_example() {
        // one code channel with coefficients [3,4], expansion row [1]
        let b = AlfBlock::<f64>::new(
            Tensor4::from_vec([1, 1, 2, 1], vec![3., 4.], Layout::Kkio).unwrap(),
            Tensor4::identity(1),
            Tensor4::identity(1),
            ConvGeometry::pointwise(),
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(compute_importances(&b), vec![5.0]);
    }

    #[test]
    fn period_gates_updates() {
        let mut rng = rand::rng();
        let mut block = AlfBlock::<f32>::init(
            2,
            8,
            8,
            ConvGeometry::new(3, 1, 1).unwrap(),
            Activation::Identity,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let mut state = FactorizerState::new(8, 0.5).unwrap();
        for _ in 1..8 {
            assert!(!state.step_schedule(&mut block).unwrap());
            assert_eq!(block.active_channels(), 8);
        }
        assert!(state.step_schedule(&mut block).unwrap());
        assert_eq!(block.active_channels(), 4);
        assert_eq!(state.importances().len(), 8);
        assert_eq!(block.soft_scores(), state.importances());
    }
}
