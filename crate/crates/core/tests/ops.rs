mod common;

use common::gradcheck::random;
use dmrn::kernels::conv_out_dim;
use dmrn::tape::{BnMode, Tape};
use dmrn::Tensor;
use proptest::prelude::*;

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let at = |t: &Tensor<f64>, i: [usize; 4]| {
        let s = t.shape();
        t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
    };
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y * stride + i) as isize - pad as isize;
                                let sx = (xx * stride + j) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += at(x, [b, ic, sy as usize, sx as usize]) * at(k, [oc, ic, i, j]);
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let a = t.leaf(x.clone());
    let b = t.leaf(k.clone());
    let y = t.conv2d(a, b, stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_matches_naive_loops() {
    let x = random(&[1, 2, 8, 8], 7);
    let k = random(&[4, 2, 3, 3], 8);
    let y = conv(&x, &k, 2, 1);
    assert_eq!(y.shape(), &[1, 4, 4, 4]);
    let expect = naive_conv(&x, &k, 2, 1);
    for (a, b) in y.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn identity_kernel_and_zero_input() {
    let x = random(&[2, 3, 5, 5], 9);
    let mut k = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        k.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    assert_eq!(conv(&x, &k, 1, 1), x);

    let z = Tensor::<f64>::zeros(&[1, 3, 6, 6]);
    let y = conv(&z, &random(&[5, 3, 3, 3], 10), 2, 1);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_standardises_each_channel() {
    let x = random(&[4, 3, 5, 5], 11).map(|v| 3.0 * v + 2.0);
    let mut t = Tape::new();
    let xv = t.leaf(x);
    let g = t.leaf(Tensor::full(&[3], 1.0));
    let b = t.leaf(Tensor::zeros(&[3]));
    let (y, _) = t.batch_norm(xv, g, b, BnMode::Train).unwrap();
    let y = t.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batch_norm_constant_channel_and_zero_scale() {
    let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.0);
    let mut t = Tape::new();
    let xv = t.leaf(x);
    let g = t.leaf(Tensor::full(&[1], 2.0));
    let b = t.leaf(Tensor::full(&[1], 0.5));
    let (y, _) = t.batch_norm(xv, g, b, BnMode::Train).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.5));

    let x = random(&[2, 2, 3, 3], 12);
    let mut t = Tape::new();
    let xv = t.leaf(x);
    let g = t.leaf(Tensor::zeros(&[2]));
    let b = t.leaf(Tensor::new(&[2], vec![-1.0, 3.0]).unwrap());
    let (y, _) = t.batch_norm(xv, g, b, BnMode::Train).unwrap();
    let y = t.value(y);
    for n in 0..2 {
        for c in 0..2 {
            let shift = [-1.0, 3.0][c];
            assert!(y.data()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].iter().all(|&v| v == shift));
        }
    }
}

#[test]
fn linear_matches_triple_loop() {
    let x = random(&[3, 5], 13);
    let w = random(&[4, 5], 14);
    let b = random(&[4], 15);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
    let y = t.linear(xv, wv, bv).unwrap();
    let y = t.value(y);
    assert_eq!(y.shape(), &[3, 4]);
    for i in 0..3 {
        for o in 0..4 {
            let mut acc = b.data()[o];
            for k in 0..5 {
                acc += x.data()[i * 5 + k] * w.data()[o * 5 + k];
            }
            assert!((y.data()[i * 4 + o] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn relu_splits_absolute_value() {
    let x = random(&[40], 16);
    let mut t = Tape::new();
    let a = t.leaf(x.clone());
    let na = t.scale(a, -1.0);
    let p = t.relu(a);
    let n = t.relu(na);
    let s = t.add(p, n).unwrap();
    for (v, orig) in t.value(s).data().iter().zip(x.data()) {
        assert_eq!(*v, orig.abs());
    }
}

#[test]
fn average_pool_of_two_by_two() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = t.adaptive_avg_pool(x).unwrap();
    assert_eq!(t.value(p).shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(p).data(), &[2.5]);
}

#[test]
fn forward_is_deterministic() {
    let x = random(&[2, 2, 7, 7], 17);
    let k = random(&[3, 2, 3, 3], 18);
    assert_eq!(conv(&x, &k, 2, 1), conv(&x, &k, 2, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_shapes_follow_formulas(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 1usize..12, w in 1usize..12,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
        d_out in 1usize..5,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[n, c, h, w]));
        let kk = t.leaf(Tensor::zeros(&[o, c, k, k]));
        let y = t.conv2d(x, kk, stride, pad).unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        prop_assert_eq!(t.value(y).shape(), &[n, o, oh, ow]);
        prop_assert_eq!(conv_out_dim(h, k, stride, pad), Some(oh));

        let p = t.adaptive_avg_pool(y).unwrap();
        prop_assert_eq!(t.value(p).shape(), &[n, o, 1, 1]);
        let f = t.reshape(p, &[n, o]).unwrap();
        let wv = t.leaf(Tensor::zeros(&[d_out, o]));
        let bv = t.leaf(Tensor::zeros(&[d_out]));
        let l = t.linear(f, wv, bv).unwrap();
        prop_assert_eq!(t.value(l).shape(), &[n, d_out]);
    }
}
