//! Convolution, channel mixing and activation kernels.
//!
//! `conv2d_naive` is the reference: a literal quadruple sum over the
//! zero-padded input with f64 accumulation. `conv2d_fast` lowers the same
//! computation to im2col + GEMM and must agree with it to 1e-5. The
//! backward kernels here are consumed by the autodiff tape.

use crate::error::{AlfError, Result};
use crate::tensor::{Activation, ConvGeometry, Layout, Real, Tensor4};

fn check_conv(input: &Tensor4<impl Real>, weights: &Tensor4<impl Real>, geom: &ConvGeometry) -> Result<[usize; 4]> {
    let [n, hi, wi, ci] = input.dims();
    let [kh, kw, wci, co] = weights.dims();
    if kh != geom.kernel || kw != geom.kernel {
        return Err(AlfError::shape(format!(
            "weights {:?} do not match kernel size {}",
            weights.dims(),
            geom.kernel
        )));
    }
    if wci != ci {
        return Err(AlfError::shape(format!(
            "input has {ci} channels but weights expect {wci}"
        )));
    }
    let (ho, wo) = geom.output_hw(hi, wi)?;
    Ok([n, ho, wo, co])
}

fn naive_impl<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    geom: &ConvGeometry,
    mut macs: Option<&mut u64>,
) -> Result<Tensor4<T>> {
    let out_dims = check_conv(input, weights, geom)?;
    let [n, ho, wo, co] = out_dims;
    let [_, hi, wi, ci] = input.dims();
    let k = geom.kernel;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let mut out = Tensor4::zeros(out_dims, Layout::Nhwc);
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                for o in 0..co {
                    let mut acc = 0.0f64;
                    for u in 0..k {
                        for v in 0..k {
                            let iy = y as isize * s + u as isize - p;
                            let ix = x as isize * s + v as isize - p;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < hi && (ix as usize) < wi;
                            for c in 0..ci {
                                let a = if inside {
                                    input.get([b, iy as usize, ix as usize, c]).as_f64()
                                } else {
                                    0.0
                                };
                                acc += a * weights.get([u, v, c, o]).as_f64();
                                if let Some(m) = macs.as_deref_mut() {
                                    *m += 1;
                                }
                            }
                        }
                    }
                    out.set([b, y, x, o], T::from_f64(acc));
                }
            }
        }
    }
    out.ensure_finite("conv2d_naive")
}

/// Reference convolution: `out[n,y,x,o] = Σ_{u,v,c} in_pad[n, y·s+u, x·s+v, c] · w[u,v,c,o]`.
pub fn conv2d_naive<T: Real>(input: &Tensor4<T>, weights: &Tensor4<T>, geom: &ConvGeometry) -> Result<Tensor4<T>> {
    naive_impl(input, weights, geom, None)
}

/// `conv2d_naive` that also returns the number of multiply-accumulates it
/// performed, padded taps included.
pub fn conv2d_naive_counted<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor4<T>, u64)> {
    let mut macs = 0u64;
    let out = naive_impl(input, weights, geom, Some(&mut macs))?;
    Ok((out, macs))
}

/// Unfolds patches into a `(N·Ho·Wo) × (K·K·Ci)` row-major matrix whose
/// column order `(u, v, c)` matches the row order of a KKIO filter bank.
fn im2col<T: Real>(input: &Tensor4<T>, geom: &ConvGeometry, ho: usize, wo: usize) -> Vec<T> {
    let [n, hi, wi, ci] = input.dims();
    let k = geom.kernel;
    let cols = k * k * ci;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let src = input.data();
    let mut col = vec![T::zero(); n * ho * wo * cols];
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let row = ((b * ho + y) * wo + x) * cols;
                for u in 0..k {
                    let iy = y as isize * s + u as isize - p;
                    if iy < 0 || iy as usize >= hi {
                        continue;
                    }
                    for v in 0..k {
                        let ix = x as isize * s + v as isize - p;
                        if ix < 0 || ix as usize >= wi {
                            continue;
                        }
                        let from = ((b * hi + iy as usize) * wi + ix as usize) * ci;
                        let to = row + (u * k + v) * ci;
                        col[to..to + ci].copy_from_slice(&src[from..from + ci]);
                    }
                }
            }
        }
    }
    col
}

/// Inverse scatter of `im2col`: accumulates patch gradients back onto the input.
fn col2im<T: Real>(col: &[T], input_dims: [usize; 4], geom: &ConvGeometry, ho: usize, wo: usize) -> Tensor4<T> {
    let [n, hi, wi, ci] = input_dims;
    let k = geom.kernel;
    let cols = k * k * ci;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let mut out = Tensor4::zeros(input_dims, Layout::Nhwc);
    let dst = out.data_mut();
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let row = ((b * ho + y) * wo + x) * cols;
                for u in 0..k {
                    let iy = y as isize * s + u as isize - p;
                    if iy < 0 || iy as usize >= hi {
                        continue;
                    }
                    for v in 0..k {
                        let ix = x as isize * s + v as isize - p;
                        if ix < 0 || ix as usize >= wi {
                            continue;
                        }
                        let to = ((b * hi + iy as usize) * wi + ix as usize) * ci;
                        let from = row + (u * k + v) * ci;
                        for c in 0..ci {
                            dst[to + c] += col[from + c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[k×n]`, f64 accumulation.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (pk, &av) in a_row.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            let b_row = &b[pk * n..(pk + 1) * n];
            for (dst, &bv) in acc.iter_mut().zip(b_row) {
                *dst += av * bv.as_f64();
            }
        }
        for (dst, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *dst = T::from_f64(v);
        }
    }
    out
}

/// `out[k×n] = aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (pk, &av) in a_row.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            for (dst, &bv) in acc[pk * n..(pk + 1) * n].iter_mut().zip(b_row) {
                *dst += av * bv.as_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// `out[m×k] = a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub(crate) fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for pk in 0..k {
            let b_row = &b[pk * n..(pk + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum();
            out.push(T::from_f64(dot));
        }
    }
    out
}

/// im2col + GEMM convolution; same contract as [`conv2d_naive`].
pub fn conv2d_fast<T: Real>(input: &Tensor4<T>, weights: &Tensor4<T>, geom: &ConvGeometry) -> Result<Tensor4<T>> {
    let out_dims = check_conv(input, weights, geom)?;
    let [n, ho, wo, co] = out_dims;
    let rows = n * ho * wo;
    let inner = geom.kernel * geom.kernel * input.channels();
    let col = im2col(input, geom, ho, wo);
    let out = gemm(rows, inner, co, &col, weights.data());
    Tensor4::from_vec(out_dims, out, Layout::Nhwc)?.ensure_finite("conv2d_fast")
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor4<T>,
    weights: &Tensor4<T>,
    geom: &ConvGeometry,
    input_dims: [usize; 4],
) -> Result<Tensor4<T>> {
    let [n, ho, wo, co] = grad_out.dims();
    if weights.channels() != co || n != input_dims[0] {
        return Err(AlfError::shape("conv2d backward: gradient does not match weights"));
    }
    let inner = geom.kernel * geom.kernel * input_dims[3];
    let grad_col = gemm_nt(n * ho * wo, co, inner, grad_out.data(), weights.data());
    Ok(col2im(&grad_col, input_dims, geom, ho, wo))
}

/// Gradient of `conv2d` with respect to its weights.
pub fn conv2d_backward_weights<T: Real>(
    input: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let [n, ho, wo, co] = grad_out.dims();
    let ci = input.channels();
    let k = geom.kernel;
    let inner = k * k * ci;
    let col = im2col(input, geom, ho, wo);
    let gw = gemm_tn(n * ho * wo, inner, co, &col, grad_out.data());
    Tensor4::from_vec([k, k, ci, co], gw, Layout::Kkio)
}

/// Contracts the trailing axis of `x` with a `1×1×C×D` matrix:
/// `out[.., d] = Σ_c x[.., c] · m[0,0,c,d]`.
pub fn channel_matmul<T: Real>(x: &Tensor4<T>, m: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [a, b, c, d] = m.dims();
    if a != 1 || b != 1 || c != x.channels() {
        return Err(AlfError::shape(format!(
            "channel mixing of {:?} by {:?}",
            x.dims(),
            m.dims()
        )));
    }
    let [d0, d1, d2, _] = x.dims();
    let out = gemm(x.rows(), c, d, x.data(), m.data());
    Tensor4::from_vec([d0, d1, d2, d], out, x.layout())?.ensure_finite("channel_matmul")
}

/// Point-wise (1×1) convolution; equals `conv2d_naive` with K=1, s=1, p=0.
pub fn pointwise_conv<T: Real>(input: &Tensor4<T>, weights: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [k0, k1, cc, _] = weights.dims();
    if k0 != 1 || k1 != 1 {
        return Err(AlfError::shape(format!("point-wise weights must be 1×1, got {:?}", weights.dims())));
    }
    if cc != input.channels() {
        return Err(AlfError::shape(format!(
            "input has {} channels but point-wise weights expect {cc}",
            input.channels()
        )));
    }
    let out = channel_matmul(input, weights)?;
    Ok(out.with_layout(input.layout()))
}

pub fn activation<T: Real>(input: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    match kind {
        Activation::Identity => input.clone(),
        Activation::Relu => input.map(|v| kind.apply_scalar(v)),
    }
}

/// Multiplies every channel `c` by `scale[c]`.
pub fn scale_channels<T: Real>(x: &Tensor4<T>, scale: &[T]) -> Result<Tensor4<T>> {
    let c = x.channels();
    if scale.len() != c {
        return Err(AlfError::shape(format!(
            "{} channel scales for {c} channels",
            scale.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        for (v, &s) in row.iter_mut().zip(scale) {
            *v = *v * s;
        }
    }
    Ok(out)
}

/// Mean over the spatial axes: `[N,H,W,C] → [N,1,1,C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, h, w, c] = x.dims();
    let hw = (h * w).max(1) as f64;
    let mut acc = vec![0.0f64; n * c];
    for b in 0..n {
        for p in 0..h * w {
            let row = &x.data()[(b * h * w + p) * c..(b * h * w + p + 1) * c];
            for (a, &v) in acc[b * c..(b + 1) * c].iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
    }
    let data = acc.into_iter().map(|v| T::from_f64(v / hw)).collect();
    Tensor4::from_vec([n, 1, 1, c], data, Layout::Nhwc).expect("pool dims")
}

pub(crate) fn global_avg_pool_backward<T: Real>(grad: &Tensor4<T>, input_dims: [usize; 4]) -> Tensor4<T> {
    let [n, h, w, c] = input_dims;
    let inv = T::from_f64(1.0 / (h * w).max(1) as f64);
    let mut out = Tensor4::zeros(input_dims, Layout::Nhwc);
    let g = grad.data();
    for b in 0..n {
        for p in 0..h * w {
            let row = &mut out.data_mut()[(b * h * w + p) * c..(b * h * w + p + 1) * c];
            for (dst, &gv) in row.iter_mut().zip(&g[b * c..(b + 1) * c]) {
                *dst = gv * inv;
            }
        }
    }
    out
}

/// Row-wise softmax of `[N,1,1,K]` logits, computed in f64.
pub fn softmax_rows<T: Real>(logits: &Tensor4<T>) -> Vec<f64> {
    let k = logits.channels();
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k.max(1)) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    probs
}

/// Mean softmax cross-entropy over the batch; also returns the softmax
/// probabilities so the backward pass can reuse them.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let [n, h, w, k] = logits.dims();
    if h != 1 || w != 1 {
        return Err(AlfError::shape(format!("logits must be [N,1,1,K], got {:?}", logits.dims())));
    }
    if labels.len() != n {
        return Err(AlfError::shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if n == 0 {
        return Err(AlfError::Empty("cross-entropy over an empty batch"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(AlfError::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        // log-sum-exp form keeps saturated logits exact
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[l].as_f64();
    }
    Ok((loss / n as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: [usize; 4], data: &[f32], layout: Layout) -> Tensor4<f32> {
        Tensor4::from_vec(dims, data.to_vec(), layout).unwrap()
    }

    #[test]
    fn naive_hand_example() {
        let x = t([1, 2, 2, 1], &[1., 2., 3., 4.], Layout::Nhwc);
        let w = t([2, 2, 1, 1], &[1., 0., 0., 1.], Layout::Kkio);
        let g = ConvGeometry::new(2, 1, 0).unwrap();
        let y = conv2d_naive(&x, &w, &g).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(conv2d_fast(&x, &w, &g).unwrap().data(), &[5.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f32>::randn([2, 5, 5, 3], 1.0, Layout::Nhwc, &mut rng);
        let w = Tensor4::zeros([3, 3, 3, 4], Layout::Kkio);
        let g = ConvGeometry::new(3, 1, 1).unwrap();
        for y in [conv2d_naive(&x, &w, &g).unwrap(), conv2d_fast(&x, &w, &g).unwrap()] {
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t([1, 3, 3, 1], &[1., -2., 3., 4., 5., -6., 7., 8., 9.5], Layout::Nhwc);
        let w = t([1, 1, 1, 1], &[1.], Layout::Kkio);
        let g = ConvGeometry::pointwise();
        assert_eq!(conv2d_naive(&x, &w, &g).unwrap().data(), x.data());
        assert_eq!(conv2d_fast(&x, &w, &g).unwrap().data(), x.data());
    }

    #[test]
    fn empty_batch() {
        let x = Tensor4::<f32>::zeros([0, 8, 8, 3], Layout::Nhwc);
        let w = Tensor4::zeros([3, 3, 3, 8], Layout::Kkio);
        let y = conv2d_fast(&x, &w, &ConvGeometry::new(3, 1, 0).unwrap()).unwrap();
        assert_eq!(y.dims(), [0, 6, 6, 8]);
        assert!(y.is_empty());
    }

    #[test]
    fn shape_and_geometry_errors() {
        let x = Tensor4::<f32>::zeros([1, 4, 4, 3], Layout::Nhwc);
        let w = Tensor4::zeros([3, 3, 2, 8], Layout::Kkio);
        assert!(matches!(
            conv2d_naive(&x, &w, &ConvGeometry::new(3, 1, 0).unwrap()),
            Err(AlfError::Shape(_))
        ));
        let w = Tensor4::zeros([3, 3, 3, 8], Layout::Kkio);
        assert!(matches!(
            conv2d_fast(&x, &w, &ConvGeometry::new(3, 2, 0).unwrap()),
            Err(AlfError::Geometry(_))
        ));
    }

    #[test]
    fn pointwise_dot_product() {
        let x = t([1, 1, 1, 2], &[2., 4.], Layout::Nhwc);
        let w = t([1, 1, 2, 1], &[0.5, 0.25], Layout::Kkio);
        assert_eq!(pointwise_conv(&x, &w).unwrap().data(), &[2.0]);
        let eye = Tensor4::identity(2);
        assert_eq!(pointwise_conv(&x, &eye).unwrap().data(), x.data());
        assert!(pointwise_conv(&x, &Tensor4::identity(3)).is_err());
    }

    #[test]
    fn relu_definition() {
        let x = t([1, 1, 1, 3], &[-1., 0., 2.], Layout::Nhwc);
        let r = activation(&x, Activation::Relu);
        assert_eq!(r.data(), &[0., 0., 2.]);
        assert_eq!(activation(&r, Activation::Relu), r);
        assert_eq!(activation(&x, Activation::Identity), x);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let l = t([1, 1, 1, 2], &[0., 0.], Layout::Nhwc);
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let l = t([1, 1, 1, 2], &[20., -20.], Layout::Nhwc);
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!(loss < 1e-15);
        assert!(matches!(
            softmax_cross_entropy(&l, &[2]),
            Err(AlfError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn counted_naive_counts_padded_taps() {
        let x = Tensor4::<f32>::zeros([1, 4, 4, 2], Layout::Nhwc);
        let w = Tensor4::zeros([3, 3, 2, 5], Layout::Kkio);
        let (_, macs) = conv2d_naive_counted(&x, &w, &ConvGeometry::new(3, 1, 1).unwrap()).unwrap();
        assert_eq!(macs, 4 * 4 * 9 * 2 * 5);
    }
}
