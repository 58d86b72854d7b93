//! Tensor-level entry points to the numeric kernels (no tape).

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels as k;
use crate::tensor::Tensor;

fn hwc(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err!("{what} expects [H, W, C], got {s:?}")),
    }
}

pub fn softmax_last_axis(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(shape_err!("softmax of an empty tensor"));
    }
    let n = *x.shape().last().unwrap();
    Tensor::new(x.shape(), k::softmax_rows(x.data(), n))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| shape_err!("layer_norm of a scalar"))?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(shape_err!(
            "layer_norm: affine {:?}/{:?} for rows of {n}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "layer_norm eps must be >= 0, got {eps}"
        )));
    }
    let (y, _, _) = k::layer_norm(x.data(), gamma.data(), beta.data(), n, eps);
    Tensor::new(x.shape(), y)
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, wd, cin) = hwc(x, "conv2d")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != ws[1] || !(ws[0] == 1 || ws[0] == 3) {
        return Err(shape_err!(
            "conv2d kernel must be [k, k, Cin, Cout] with k in {{1, 3}}, got {ws:?}"
        ));
    }
    if ws[2] != cin {
        return Err(shape_err!("conv2d: input has {cin} channels, kernel expects {}", ws[2]));
    }
    if b.shape() != [ws[3]] {
        return Err(shape_err!("conv2d: bias {:?} for {} outputs", b.shape(), ws[3]));
    }
    Tensor::new(
        &[h, wd, ws[3]],
        k::conv2d(x.data(), w.data(), b.data(), h, wd, cin, ws[3], ws[0]),
    )
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(x, "upsample2x")?;
    Tensor::new(&[2 * h, 2 * w, c], k::upsample2x(x.data(), h, w, c))
}

pub fn avgpool2x2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(x, "avgpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avgpool2x2 needs even spatial dims, got {h}x{w}"));
    }
    Tensor::new(&[h / 2, w / 2, c], k::avgpool2x2(x.data(), h, w, c))
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(x, "upsample_bilinear")?;
    Tensor::new(
        &[h * factor, w * factor, c],
        k::upsample_bilinear(x.data(), h, w, c, factor),
    )
}

/// Scaled dot-product attention without projections. Returns the output
/// `[nq, dv]` and the weights `[heads, nq, nk]`.
pub fn attention(q: &Tensor, kk: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (sq, sk, sv) = (q.shape(), kk.shape(), v.shape());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(shape_err!("attention: q {sq:?}, k {sk:?}, v {sv:?}"));
    }
    if heads == 0 || sq[1] % heads != 0 || sv[1] % heads != 0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "attention: widths {}/{} are not divisible by {heads} heads",
            sq[1],
            sv[1]
        )));
    }
    let (out, w) = k::attention(q.data(), kk.data(), v.data(), sq[0], sk[0], sq[1], sv[1], heads);
    Ok((
        Tensor::new(&[sq[0], sv[1]], out)?,
        Tensor::new(&[heads, sq[0], sk[0]], w)?,
    ))
}

pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err!(
            "bce: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(k::bce(pred.data(), target.data()))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| k::sigmoid(v)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_uniform_and_large_equal_logits() {
        let y = softmax_last_axis(&t(&[4], &[0.0; 4])).unwrap();
        assert!(close(y.data(), &[0.25; 4], 1e-15));
        let y = softmax_last_axis(&t(&[2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        // Oracle: plain exp / sum without max subtraction (safe for small logits).
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
        let y = softmax_last_axis(&t(&[3], &x)).unwrap();
        assert!(close(y.data(), &oracle, 1e-15));
        assert!(close(y.data(), &[0.09003057, 0.24472847, 0.66524096], 5e-9));
    }

    #[test]
    fn empty_tensors_cannot_be_built() {
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[3], &[1.0; 3]);
        let zero = t(&[3], &[0.0; 3]);
        let y = layer_norm(&t(&[1, 3], &[5.0; 3]), &one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
        let y = layer_norm(&t(&[1, 2], &[1.0, 3.0]), &t(&[2], &[1.0; 2]), &t(&[2], &[0.0; 2]), 0.0).unwrap();
        assert!(close(y.data(), &[-1.0, 1.0], 1e-15));
        let y = layer_norm(
            &t(&[2, 3], &[1.0, -2.0, 4.0, 0.5, 9.0, 3.0]),
            &zero,
            &t(&[3], &[7.0; 3]),
            1e-5,
        )
        .unwrap();
        assert_eq!(y.data(), &[7.0; 6]);
        assert!(matches!(
            layer_norm(&t(&[1, 3], &[1.0; 3]), &t(&[2], &[1.0; 2]), &zero, 1e-5),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn conv_identity_and_delta_kernels() {
        let x = t(
            &[2, 3, 2],
            &[1.0, -2.0, 3.0, 4.0, 0.5, 6.0, -7.0, 8.0, 9.0, 1.5, 2.5, -3.5],
        );
        let id = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv2d(&x, &id, &t(&[2], &[0.0; 2])).unwrap(), x);

        let x1 = t(&[3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        assert_eq!(conv2d(&x1, &t(&[3, 3, 1, 1], &delta), &t(&[1], &[0.0])).unwrap(), x1);
    }

    /// Direct zero-padded sliding-window sum for one channel in and out.
    fn conv_oracle(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; h * w];
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut s = 0.0;
                for di in -1..=1i64 {
                    for dj in -1..=1i64 {
                        let (a, b) = (i + di, j + dj);
                        if a >= 0 && b >= 0 && a < h as i64 && b < w as i64 {
                            s += x[(a * w as i64 + b) as usize] * k[((di + 1) * 3 + dj + 1) as usize];
                        }
                    }
                }
                y[(i * w as i64 + j) as usize] = s;
            }
        }
        y
    }

    #[test]
    fn conv_all_ones_matches_sliding_window() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = conv2d(&t(&[2, 2, 1], &x), &t(&[3, 3, 1, 1], &[1.0; 9]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), conv_oracle(&x, 2, 2, &[1.0; 9]).as_slice());
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(&[2, 2, 2], &[0.0; 8]);
        assert!(conv2d(&x, &t(&[1, 1, 3, 1], &[0.0; 3]), &t(&[1], &[0.0])).is_err());
        assert!(conv2d(&x, &t(&[2, 2, 2, 1], &[0.0; 8]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn upsample_and_pool_examples() {
        assert_eq!(upsample2x(&t(&[1, 1, 1], &[1.0])).unwrap().data(), &[1.0; 4]);
        let y = upsample2x(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.shape(), &[4, 4, 1]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(avgpool2x2(&t(&[2, 2, 1], &[1.0; 4])).unwrap().data(), &[1.0]);
        assert_eq!(
            avgpool2x2(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap().data(),
            &[2.5]
        );
        assert!(avgpool2x2(&t(&[3, 2, 1], &[0.0; 6])).is_err());
    }

    #[test]
    fn bilinear_upsample_is_exact_on_constants_and_interpolates_between_centres() {
        let y = upsample_bilinear(&t(&[2, 2, 1], &[3.0; 4]), 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
        // Along a 1x2 row [0, 1] at factor 2, output centres sit at 0.25, 0.75,
        // 1.25, 1.75 in input pixels: half-pixel mapping gives 0, .25, .75, 1.
        let y = upsample_bilinear(&t(&[1, 2, 1], &[0.0, 1.0]), 2).unwrap();
        assert!(close(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0], 1e-15));
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = t(&[3, 2], &[1.0, -1.0, 0.3, 2.0, -5.0, 4.0]);
        let k = t(&[1, 2], &[0.7, -0.2]);
        let v = t(&[1, 2], &[1.5, -2.5]);
        let (out, w) = attention(&q, &k, &v, 1).unwrap();
        assert_eq!(w.data(), &[1.0; 3]);
        assert_eq!(out.data(), &[1.5, -2.5, 1.5, -2.5, 1.5, -2.5]);
    }

    #[test]
    fn attention_matches_hand_oracle() {
        let q = [1.0, 0.0, 0.5, -1.0];
        let k = [0.2, 0.4, -0.3, 1.0];
        let v = [1.0, 2.0, -1.0, 0.5];
        let (out, w) = attention(&t(&[2, 2], &q), &t(&[2, 2], &k), &t(&[2, 2], &v), 1).unwrap();
        // Oracle: logits = q·k / sqrt(2), two-way softmax as a logistic.
        let s = 2f64.sqrt();
        for i in 0..2 {
            let l0 = (q[2 * i] * k[0] + q[2 * i + 1] * k[1]) / s;
            let l1 = (q[2 * i] * k[2] + q[2 * i + 1] * k[3]) / s;
            let w0 = 1.0 / (1.0 + (l1 - l0).exp());
            let w1 = 1.0 - w0;
            assert!((w.data()[2 * i] - w0).abs() < 1e-15);
            assert!((w.data()[2 * i + 1] - w1).abs() < 1e-15);
            for c in 0..2 {
                assert!((out.data()[2 * i + c] - (w0 * v[c] + w1 * v[2 + c])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let a = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(attention(&a, &a, &a, 2), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            attention(&a, &t(&[2, 2], &[0.0; 4]), &a, 1),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn bce_examples() {
        let l = bce_loss(&t(&[2], &[0.0, 1.0]), &t(&[2], &[0.0, 1.0])).unwrap();
        assert!(l >= 0.0 && l <= -(1.0f64 - 1e-7).ln() + 1e-15);
        let l = bce_loss(&t(&[3], &[0.5; 3]), &t(&[3], &[1.0, 0.0, 1.0])).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
        let l = bce_loss(&t(&[1], &[0.9]), &t(&[1], &[0.0])).unwrap();
        assert!((l - -(0.1f64).ln()).abs() < 1e-14);
        assert!(bce_loss(&t(&[2], &[0.5; 2]), &t(&[1], &[0.0])).is_err());
    }

    fn vec_strategy(n: core::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..20.0, n)
    }

    proptest! {
        #[test]
        fn softmax_rows_are_a_distribution_and_shift_invariant(x in vec_strategy(1..12), c in -50.0f64..50.0) {
            let n = x.len();
            let y = softmax_last_axis(&t(&[n], &x)).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let ys = softmax_last_axis(&t(&[n], &shifted)).unwrap();
            prop_assert!(close(y.data(), ys.data(), 1e-9));
        }

        #[test]
        fn pooling_inverts_upsampling(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = crate::rng::RngStream::new(seed);
            let data: Vec<f64> = (0..h * w * c).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let x = t(&[h, w, c], &data);
            let up = upsample2x(&x).unwrap();
            prop_assert_eq!(avgpool2x2(&up).unwrap(), x.clone());
            prop_assert!((up.mean() - x.mean()).abs() < 1e-12);
        }

        #[test]
        fn layer_norm_standardises_rows(x in vec_strategy(2..10)) {
            let n = x.len();
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assume!(var > 1e-2);
            let y = layer_norm(&t(&[n], &x), &t(&[n], &vec![1.0; n]), &t(&[n], &vec![0.0; n]), 1e-9).unwrap();
            let m = y.data().iter().sum::<f64>() / n as f64;
            let v = y.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_is_nonnegative_and_minimised_at_the_target() {
        for target in [0.0, 1.0] {
            let tt = t(&[1], &[target]);
            let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
            let losses: Vec<f64> = grid.iter().map(|&p| bce_loss(&t(&[1], &[p]), &tt).unwrap()).collect();
            assert!(losses.iter().all(|&l| l >= 0.0));
            let best = losses.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(grid[best], target);
        }
    }
}
