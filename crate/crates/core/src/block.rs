//! The ALF layer: a convolution whose filter bank is factorized into
//! shared code filters followed by a point-wise expansion.
//!
//! A block keeps the full reference bank `w_ref` (`K×K×Ci×Co`) next to an
//! encoder `E` (`Co×C_code`, stored as `1×1×Co×C_code`) and the expansion
//! `w_exp` (`1×1×C_code×Co`). The code filters are derived, never stored:
//!
//! ```text
//! W_code[u,v,i,c] = M[c] · Σ_o W_ref[u,v,i,o] · E[o,c]
//! A_out           = σ( σ_inter(A_in ∗ W_code) ∗ W_exp )
//! ```
//!
//! `w_exp` plays two roles: it is the expansion layer of the forward pass
//! and the decoder of the filter autoencoder, whose objective is the mean
//! squared error between `W_ref` and `W_code · W_exp`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AlfError, Result};
use crate::ops;
use crate::tensor::{Activation, ConvGeometry, Layout, Real, Tensor4};

/// Standard deviation of the noise added to the identity encoder at init.
pub const ENCODER_INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct AlfBlock<T: Real = f32> {
    w_ref: Tensor4<T>,
    encoder: Tensor4<T>,
    w_exp: Tensor4<T>,
    mask: Vec<bool>,
    soft_scores: Vec<f64>,
    sigma_inter: Activation,
    sigma: Activation,
    geom: ConvGeometry,
}

/// Tape handles of a block's trainable arrays.
#[derive(Debug, Clone, Copy)]
pub struct AlfVars {
    pub w_ref: Var,
    pub encoder: Var,
    pub w_exp: Var,
}

impl<T: Real> AlfBlock<T> {
    /// Assembles a block from explicit weights with every code channel active.
    pub fn new(
        w_ref: Tensor4<T>,
        encoder: Tensor4<T>,
        w_exp: Tensor4<T>,
        geom: ConvGeometry,
        sigma_inter: Activation,
        sigma: Activation,
    ) -> Result<Self> {
        let [k0, k1, _, co] = w_ref.dims();
        if k0 != geom.kernel || k1 != geom.kernel {
            return Err(AlfError::shape(format!(
                "reference bank {:?} does not match kernel {}",
                w_ref.dims(),
                geom.kernel
            )));
        }
        let [e0, e1, eo, code] = encoder.dims();
        if e0 != 1 || e1 != 1 || eo != co {
            return Err(AlfError::shape(format!(
                "encoder must be 1×1×{co}×C_code, got {:?}",
                encoder.dims()
            )));
        }
        if code == 0 || code > co {
            return Err(AlfError::shape(format!("C_code must lie in 1..={co}, got {code}")));
        }
        if w_exp.dims() != [1, 1, code, co] {
            return Err(AlfError::shape(format!(
                "expansion must be 1×1×{code}×{co}, got {:?}",
                w_exp.dims()
            )));
        }
        Ok(Self {
            w_ref: w_ref.with_layout(Layout::Kkio),
            encoder: encoder.with_layout(Layout::Kkio),
            w_exp: w_exp.with_layout(Layout::Kkio),
            mask: vec![true; code],
            soft_scores: vec![0.0; code],
            sigma_inter,
            sigma,
            geom,
        })
    }

    /// Random initialization: He-normal reference bank, encoder = truncated
    /// identity plus N(0, 0.01²) noise, expansion = encoderᵀ.
    pub fn init<R: Rng + ?Sized>(
        ci: usize,
        co: usize,
        code: usize,
        geom: ConvGeometry,
        sigma_inter: Activation,
        sigma: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let k = geom.kernel;
        let fan_in = (k * k * ci).max(1) as f64;
        let w_ref = Tensor4::randn([k, k, ci, co], (2.0 / fan_in).sqrt(), Layout::Kkio, rng);
        let mut encoder = Tensor4::randn([1, 1, co, code], ENCODER_INIT_NOISE, Layout::Kkio, rng);
        for c in 0..code.min(co) {
            let v = encoder.get([0, 0, c, c]);
            encoder.set([0, 0, c, c], v + T::one());
        }
        let w_exp = encoder.transpose_matrix()?;
        Self::new(w_ref, encoder, w_exp, geom, sigma_inter, sigma)
    }

    pub fn in_channels(&self) -> usize {
        self.w_ref.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.w_ref.dims()[3]
    }

    /// Code width including masked channels.
    pub fn code_channels(&self) -> usize {
        self.mask.len()
    }

    /// Number of code channels whose mask entry is 1.
    pub fn active_channels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&c| self.mask[c]).collect()
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn kernel(&self) -> usize {
        self.geom.kernel
    }

    pub fn sigma_inter(&self) -> Activation {
        self.sigma_inter
    }

    pub fn sigma(&self) -> Activation {
        self.sigma
    }

    pub fn w_ref(&self) -> &Tensor4<T> {
        &self.w_ref
    }

    pub fn encoder(&self) -> &Tensor4<T> {
        &self.encoder
    }

    pub fn w_exp(&self) -> &Tensor4<T> {
        &self.w_exp
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn soft_scores(&self) -> &[f64] {
        &self.soft_scores
    }

    pub(crate) fn set_soft_scores(&mut self, scores: Vec<f64>) {
        debug_assert_eq!(scores.len(), self.mask.len());
        self.soft_scores = scores;
    }

    /// Mask as multiplicative 0/1 channel factors.
    pub fn mask_factors(&self) -> Vec<T> {
        self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
    }

    /// Replaces the mask. At least one channel must stay active.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.mask.len() {
            return Err(AlfError::shape(format!(
                "mask of length {} for {} code channels",
                mask.len(),
                self.mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AlfError::shape("mask must keep at least one code channel"));
        }
        self.mask = mask;
        Ok(())
    }

    /// Overwrites the trainable arrays, keeping dims.
    pub fn set_weights(&mut self, w_ref: Tensor4<T>, encoder: Tensor4<T>, w_exp: Tensor4<T>) -> Result<()> {
        if w_ref.dims() != self.w_ref.dims() || encoder.dims() != self.encoder.dims() || w_exp.dims() != self.w_exp.dims()
        {
            return Err(AlfError::shape("replacement weights change block dims"));
        }
        self.w_ref = w_ref.with_layout(Layout::Kkio);
        self.encoder = encoder.with_layout(Layout::Kkio);
        self.w_exp = w_exp.with_layout(Layout::Kkio);
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> [&mut Tensor4<T>; 3] {
        [&mut self.w_ref, &mut self.encoder, &mut self.w_exp]
    }

    pub fn weights(&self) -> [&Tensor4<T>; 3] {
        [&self.w_ref, &self.encoder, &self.w_exp]
    }

    /// `W_ref · E` before masking.
    pub fn code_filters_unmasked(&self) -> Tensor4<T> {
        ops::channel_matmul(&self.w_ref, &self.encoder)
            .expect("block dims validated at construction")
            .with_layout(Layout::Kkio)
    }

    /// `W_code = (W_ref · E) ⊙ M`; masked channels are exactly zero.
    pub fn encode_filters(&self) -> Tensor4<T> {
        let mut code = self.code_filters_unmasked();
        let c = code.channels();
        for row in code.data_mut().chunks_exact_mut(c) {
            for (v, &m) in row.iter_mut().zip(&self.mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        code
    }

    pub fn output_dims(&self, input_dims: [usize; 4]) -> Result<[usize; 4]> {
        let [n, h, w, ci] = input_dims;
        if ci != self.in_channels() {
            return Err(AlfError::shape(format!(
                "block expects {} input channels, got {ci}",
                self.in_channels()
            )));
        }
        let (ho, wo) = self.geom.output_hw(h, w)?;
        Ok([n, ho, wo, self.out_channels()])
    }

    /// Training-mode forward pass over the masked (full-width) code filters.
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let code = self.encode_filters();
        let inter = ops::activation(&ops::conv2d_fast(input, &code, &self.geom)?, self.sigma_inter);
        let out = ops::pointwise_conv(&inter, &self.w_exp)?;
        Ok(ops::activation(&out, self.sigma))
    }

    /// Mean squared error between `W_ref` and its reconstruction `W_code · W_exp`.
    pub fn reconstruction_loss(&self) -> f64 {
        let recon = decode_filters(&self.encode_filters(), &self.w_exp).expect("block dims validated at construction");
        let n = self.w_ref.len().max(1) as f64;
        self.w_ref
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            / n
    }

    /// Registers the trainable arrays as tape parameters.
    pub fn register(&self, tape: &mut Tape<T>) -> AlfVars {
        AlfVars {
            w_ref: tape.param(self.w_ref.clone()),
            encoder: tape.param(self.encoder.clone()),
            w_exp: tape.param(self.w_exp.clone()),
        }
    }

    /// Records the forward pass and the reconstruction loss; returns
    /// `(output, reconstruction_loss)` nodes.
    pub fn record(&self, tape: &mut Tape<T>, input: Var, vars: AlfVars) -> Result<(Var, Var)> {
        let mixed = tape.channel_matmul(vars.w_ref, vars.encoder)?;
        let code = tape.scale_channels(mixed, self.mask_factors())?;
        let conv = tape.conv2d(input, code, self.geom)?;
        let inter = tape.activation(conv, self.sigma_inter);
        let expanded = tape.channel_matmul(inter, vars.w_exp)?;
        let out = tape.activation(expanded, self.sigma);

        let recon = tape.channel_matmul(code, vars.w_exp)?;
        let rec = tape.mse(vars.w_ref, recon)?;
        Ok((out, rec))
    }

    pub fn cast<U: Real>(&self) -> AlfBlock<U> {
        AlfBlock {
            w_ref: self.w_ref.cast(),
            encoder: self.encoder.cast(),
            w_exp: self.w_exp.cast(),
            mask: self.mask.clone(),
            soft_scores: self.soft_scores.clone(),
            sigma_inter: self.sigma_inter,
            sigma: self.sigma,
            geom: self.geom,
        }
    }
}

/// `Ŵ[u,v,i,o] = Σ_c W_code[u,v,i,c] · W_exp[0,0,c,o]`.
pub fn decode_filters<T: Real>(code: &Tensor4<T>, w_exp: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [e0, e1, cc, _] = w_exp.dims();
    if e0 != 1 || e1 != 1 || cc != code.channels() {
        return Err(AlfError::shape(format!(
            "cannot decode {:?} code filters with expansion {:?}",
            code.dims(),
            w_exp.dims()
        )));
    }
    Ok(ops::channel_matmul(code, w_exp)?.with_layout(Layout::Kkio))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kk(dims: [usize; 4], data: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(dims, data.to_vec(), Layout::Kkio).unwrap()
    }

    fn hand_block() -> AlfBlock<f64> {
        AlfBlock::new(
            kk([1, 1, 1, 2], &[2., 4.]),
            kk([1, 1, 2, 1], &[1., 1.]),
            kk([1, 1, 1, 2], &[0.5, 0.25]),
            ConvGeometry::pointwise(),
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn encode_hand_example() {
        assert_eq!(hand_block().encode_filters().data(), &[6.0]);
    }

    #[test]
    fn decode_hand_example() {
        let d = decode_filters(&kk([1, 1, 1, 1], &[6.]), &kk([1, 1, 1, 2], &[0.5, 0.25])).unwrap();
        assert_eq!(d.data(), &[3.0, 1.5]);
        let z = decode_filters(&kk([1, 1, 1, 1], &[0.]), &kk([1, 1, 1, 2], &[0.5, 0.25])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        assert!(decode_filters(&kk([1, 1, 1, 2], &[0., 1.]), &kk([1, 1, 1, 2], &[0.5, 0.25])).is_err());
    }

    #[test]
    fn reconstruction_hand_example() {
        // W_ref = [2,4], reconstruction [3,1.5]
        assert!((hand_block().reconstruction_loss() - 3.625).abs() < 1e-12);
    }

    #[test]
    fn identity_autoencoder_is_lossless() {
        let mut rng = rand::rng();
        let w_ref = Tensor4::<f64>::randn([3, 3, 2, 4], 1.0, Layout::Kkio, &mut rng);
        let b = AlfBlock::new(
            w_ref.clone(),
            Tensor4::identity(4),
            Tensor4::identity(4),
            ConvGeometry::new(3, 1, 1).unwrap(),
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(b.encode_filters(), w_ref);
        assert_eq!(b.reconstruction_loss(), 0.0);
    }

    #[test]
    fn masked_channel_is_zero() {
        let mut rng = rand::rng();
        let mut b = AlfBlock::<f64>::init(
            2,
            4,
            4,
            ConvGeometry::new(3, 1, 1).unwrap(),
            Activation::Identity,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        b.set_mask(vec![true, false, true, true]).unwrap();
        let code = b.encode_filters();
        for r in 0..code.rows() {
            assert_eq!(code.data()[r * 4 + 1], 0.0);
        }
        assert!(b.set_mask(vec![false; 4]).is_err());
        assert!(b.set_mask(vec![true; 3]).is_err());
    }

    #[test]
    fn forward_hand_example() {
        // W_code = W_ref · E = [3]
        let b = AlfBlock::new(
            kk([1, 1, 1, 2], &[3., 0.]),
            kk([1, 1, 2, 1], &[1., 0.]),
            kk([1, 1, 1, 2], &[1., -1.]),
            ConvGeometry::pointwise(),
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![2.0], Layout::Nhwc).unwrap();
        assert_eq!(b.forward(&x).unwrap().data(), &[6.0, -6.0]);
    }

    #[test]
    fn zero_encoder_with_relu_gives_zero_output() {
        let mut rng = rand::rng();
        let w_ref = Tensor4::<f64>::randn([3, 3, 2, 4], 1.0, Layout::Kkio, &mut rng);
        let w_exp = Tensor4::randn([1, 1, 3, 4], 1.0, Layout::Kkio, &mut rng);
        let b = AlfBlock::new(
            w_ref,
            Tensor4::zeros([1, 1, 4, 3], Layout::Kkio),
            w_exp,
            ConvGeometry::new(3, 1, 1).unwrap(),
            Activation::Identity,
            Activation::Relu,
        )
        .unwrap();
        let x = Tensor4::randn([2, 5, 5, 2], 1.0, Layout::Nhwc, &mut rng);
        let y = b.forward(&x).unwrap();
        assert_eq!(y.dims(), [2, 5, 5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_cancellation_leaves_reconstruction_unchanged() {
        let mut rng = rand::rng();
        let b = AlfBlock::<f64>::init(
            3,
            5,
            5,
            ConvGeometry::new(3, 1, 1).unwrap(),
            Activation::Identity,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let mut scaled = b.clone();
        let [w, e, x] = b.weights();
        scaled.set_weights(w.clone(), e.scale(0.5), x.scale(2.0)).unwrap();
        assert!((b.reconstruction_loss() - scaled.reconstruction_loss()).abs() < 1e-12);
    }

    #[test]
    fn init_starts_near_lossless() {
        let mut rng = rand::rng();
        let b = AlfBlock::<f64>::init(
            4,
            8,
            8,
            ConvGeometry::new(3, 1, 1).unwrap(),
            Activation::Identity,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        assert_eq!(b.w_exp(), &b.encoder().transpose_matrix().unwrap());
        assert!(b.reconstruction_loss() < 1e-2);
        assert_eq!(b.active_channels(), 8);
    }
}
