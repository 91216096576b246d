use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segkit::tensor::kernels::{batchnorm2d_forward, conv2d_forward, conv_output_extent};
use segkit::tensor::{Activation, BatchNormMode, Conv2dParams};
use segkit::{Float, Graph, Tensor, Var};

fn random<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

/// Direct seven-loop cross-correlation with zero padding.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    p: Conv2dParams,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let og = o / p.groups;
    assert_eq!(cg * p.groups, c);
    let oh = (h + 2 * p.padding - kh) / p.stride + 1;
    let ow = (wd + 2 * p.padding - kw) / p.stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * p.stride + ky) as isize - p.padding as isize;
                                let ix = (xo * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((ni * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cg + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    groups: usize,
    in_per_group: usize,
    out_per_group: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (
        1..3usize,
        1..4usize,
        1..3usize,
        1..3usize,
        1..4usize,
        1..3usize,
        0..3usize,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_flat_map(|(n, groups, ipg, opg, k, stride, padding, bias, seed)| {
            let min = k.saturating_sub(2 * padding).max(1);
            (min..min + 6, min..min + 6).prop_map(move |(h, w)| ConvCase {
                n,
                groups,
                in_per_group: ipg,
                out_per_group: opg,
                h,
                w,
                k,
                stride,
                padding,
                bias,
                seed,
            })
        })
}

impl ConvCase {
    fn tensors(&self) -> (Tensor<f64>, Tensor<f64>, Option<Tensor<f64>>, Conv2dParams) {
        let c = self.groups * self.in_per_group;
        let o = self.groups * self.out_per_group;
        let x = random(&[self.n, c, self.h, self.w], self.seed);
        let w = random(&[o, self.in_per_group, self.k, self.k], self.seed ^ 1);
        let b = self.bias.then(|| random(&[o], self.seed ^ 2));
        (
            x,
            w,
            b,
            Conv2dParams::new(self.stride, self.padding, self.groups),
        )
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv2d_matches_direct_loops(case in conv_case()) {
        let (x, w, b, p) = case.tensors();
        let got = conv2d_forward(&x, &w, b.as_ref(), p).unwrap();
        let want = conv_oracle(&x, &w, b.as_ref(), p);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(max_abs_diff(got.data(), want.data()) < 1e-12);
    }

    #[test]
    fn conv2d_extent_follows_floor_formula(case in conv_case()) {
        let (x, w, b, p) = case.tensors();
        let got = conv2d_forward(&x, &w, b.as_ref(), p).unwrap();
        let expect = |extent: usize| (extent + 2 * case.padding - case.k) / case.stride + 1;
        prop_assert_eq!(got.shape()[2], expect(case.h));
        prop_assert_eq!(got.shape()[3], expect(case.w));
        prop_assert_eq!(conv_output_extent(case.h, case.k, case.stride, case.padding), expect(case.h));
    }

    #[test]
    fn conv2d_is_linear_without_bias(case in conv_case(), alpha in -4.0f64..4.0, exp in -3i32..4) {
        let (x, w, _, p) = case.tensors();
        let base = conv2d_forward(&x, &w, None, p).unwrap();
        let scaled = conv2d_forward(&x.map(|v| v * alpha), &w, None, p).unwrap();
        let want: Vec<f64> = base.data().iter().map(|v| v * alpha).collect();
        prop_assert!(max_abs_diff(scaled.data(), &want) < 1e-12);
        let pow2 = 2f64.powi(exp);
        let exact = conv2d_forward(&x.map(|v| v * pow2), &w, None, p).unwrap();
        let want = base.map(|v| v * pow2);
        prop_assert_eq!(exact.data(), want.data());
    }

    #[test]
    fn depthwise_equals_independent_channels(
        n in 1..3usize, c in 1..5usize, side in 3..8usize, k in prop::sample::select(vec![1usize, 3]),
        stride in 1..3usize, seed in any::<u64>(),
    ) {
        let x = random::<f32>(&[n, c, side, side], seed);
        let w = random::<f32>(&[c, 1, k, k], seed ^ 7);
        let p = Conv2dParams::depthwise(k, stride, c);
        let joint = conv2d_forward(&x, &w, None, p).unwrap();
        let (oh, ow) = (joint.shape()[2], joint.shape()[3]);
        let single = Conv2dParams::new(stride, p.padding, 1);
        for ch in 0..c {
            let mut xc = Vec::new();
            for ni in 0..n {
                let start = (ni * c + ch) * side * side;
                xc.extend_from_slice(&x.data()[start..start + side * side]);
            }
            let xc = Tensor::new(vec![n, 1, side, side], xc).unwrap();
            let wc = Tensor::new(vec![1, 1, k, k], w.data()[ch * k * k..(ch + 1) * k * k].to_vec()).unwrap();
            let alone = conv2d_forward(&xc, &wc, None, single).unwrap();
            for ni in 0..n {
                let start = (ni * c + ch) * oh * ow;
                prop_assert_eq!(&joint.data()[start..start + oh * ow], &alone.data()[ni * oh * ow..(ni + 1) * oh * ow]);
            }
        }
    }

    #[test]
    fn batchnorm_train_ignores_positive_scale(
        n in 1..3usize, c in 1..4usize, side in 2..6usize, alpha in 0.1f32..10.0, seed in any::<u64>(),
    ) {
        let x = random::<f32>(&[n, c, side, side], seed).map(|v| v * 3.0);
        let (gamma, beta) = (Tensor::ones(&[c]), Tensor::zeros(&[c]));
        let (rm, rv) = (Tensor::zeros(&[c]), Tensor::ones(&[c]));
        let a = batchnorm2d_forward(&x, &gamma, &beta, &rm, &rv, BatchNormMode::Train, 1e-5).unwrap();
        let b = batchnorm2d_forward(&x.map(|v| v * alpha), &gamma, &beta, &rm, &rv, BatchNormMode::Train, 1e-5).unwrap();
        // eps shifts the output by about eps / var; keep that below tolerance
        let min_var = a.batch_var.iter().cloned().fold(f64::INFINITY, f64::min).min(b.batch_var.iter().cloned().fold(f64::INFINITY, f64::min));
        prop_assume!(min_var > 0.2);
        for (p, q) in a.output.data().iter().zip(b.output.data()) {
            prop_assert!((p - q).abs() < 1e-4, "{} vs {}", p, q);
        }
    }

    #[test]
    fn ops_are_deterministic(case in conv_case()) {
        let (x, w, b, p) = case.tensors();
        let first = conv2d_forward(&x, &w, b.as_ref(), p).unwrap();
        let second = conv2d_forward(&x, &w, b.as_ref(), p).unwrap();
        prop_assert_eq!(first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

/// Gradient of `Σ op(x)·R` with respect to input 0, analytic and by central
/// differences in 32-bit arithmetic.
fn f32_gradcheck(
    x: Tensor<f32>,
    extra: Vec<Tensor<f32>>,
    h: f32,
    op: impl Fn(&mut Graph<f32>, Var, &[Var]) -> Var,
) -> f64 {
    let objective = |x: &Tensor<f32>| -> (Graph<f32>, Var, Var) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let others: Vec<Var> = extra.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, xv, &others);
        let r = g.constant(random(g.shape(y), 99));
        let prod = g.mul(y, r).unwrap();
        let loss = g.sum(prod);
        (g, loss, xv)
    };
    let (mut g, loss, xv) = objective(&x);
    g.backward(loss).unwrap();
    let analytic = g.grad_or_zeros(xv);
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut probe = x.clone();
        probe.data_mut()[i] = x.data()[i] + h;
        let (g1, l1, _) = objective(&probe);
        probe.data_mut()[i] = x.data()[i] - h;
        let (g2, l2, _) = objective(&probe);
        numeric.push(
            (f64::from(g1.value(l1).data()[0]) - f64::from(g2.value(l2).data()[0]))
                / (2.0 * f64::from(h)),
        );
    }
    let a: Vec<f64> = analytic.data().iter().map(|&v| f64::from(v)).collect();
    let scale = a
        .iter()
        .chain(&numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    max_abs_diff(&a, &numeric) / scale
}

#[test]
fn single_precision_gradients_are_within_1e3() {
    let w = random::<f32>(&[3, 2, 3, 3], 5);
    let conv = f32_gradcheck(random(&[2, 2, 5, 5], 4), vec![w], 1e-2, |g, x, o| {
        g.conv2d(x, o[0], None, Conv2dParams::same(3, 1)).unwrap()
    });
    assert!(conv < 1e-3, "conv2d {conv:e}");

    let gamma = random::<f32>(&[3], 6).map(|v| v + 1.5);
    let beta = random::<f32>(&[3], 7);
    let bn = f32_gradcheck(
        random(&[2, 3, 4, 4], 8),
        vec![gamma, beta],
        1e-2,
        |g, x, o| {
            let (mut rm, mut rv) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
            g.batchnorm2d(
                x,
                o[0],
                o[1],
                &mut rm,
                &mut rv,
                BatchNormMode::Train,
                0.1,
                1e-5,
            )
            .unwrap()
        },
    );
    assert!(bn < 1e-3, "batchnorm2d {bn:e}");

    let sig = f32_gradcheck(random(&[2, 3, 4, 4], 9), vec![], 1e-2, |g, x, _| {
        g.activation(x, Activation::Sigmoid)
    });
    assert!(sig < 1e-3, "sigmoid {sig:e}");

    let up = f32_gradcheck(random(&[1, 2, 3, 3], 10), vec![], 1e-2, |g, x, _| {
        g.upsample2x(x).unwrap()
    });
    assert!(up < 1e-3, "upsample2x {up:e}");
}

#[test]
fn leaf_gradients_accumulate_over_uses() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64_slice(&[3], &[1.0, -2.0, 0.5]).unwrap());
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let loss = g.sum(z);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
}
