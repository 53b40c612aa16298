use mtur_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use mtur_core::tensor::{
    adam_step, Activation, AdamConfig, AdamState, Graph, PaddingMode, ParamStore, ResampleMode, Tensor, Var,
};
use mtur_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), lo, hi, &mut rng)
}

/// Direct nested-loop convolution; padding folds indices independently of the
/// im2col table used by the graph.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    dilation: usize,
    padding: PaddingMode,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4("oracle").unwrap();
    let [o, _, kh, kw] = w.dims4("oracle").unwrap();
    let (ph, pw) = match padding {
        PaddingMode::Valid => (0, 0),
        _ => (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2),
    };
    let oh = (h + 2 * ph - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pw - dilation * (kw - 1) - 1) / stride + 1;
    let fold = |i: isize, len: usize| -> Option<usize> {
        match padding {
            PaddingMode::Reflect => {
                let mut i = i;
                if len == 1 {
                    return Some(0);
                }
                loop {
                    if i < 0 {
                        i = -i;
                    } else if i >= len as isize {
                        i = 2 * (len as isize - 1) - i;
                    } else {
                        return Some(i as usize);
                    }
                }
            }
            _ => (i >= 0 && i < len as isize).then_some(i as usize),
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky * dilation) as isize - ph as isize;
                                let ix = (xx * stride + kx * dilation) as isize - pw as isize;
                                if let (Some(iy), Some(ix)) = (fold(iy, h), fold(ix, wd)) {
                                    acc += w.data()[((oc * c + ic) * kh + ky) * kw + kx]
                                        * x.data()[((s * c + ic) * h + iy) * wd + ix];
                                }
                            }
                        }
                    }
                    out[((s * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, o, oh, ow], out).unwrap()
}

fn run_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    dilation: usize,
    padding: PaddingMode,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, stride, dilation, padding).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = rand_tensor(&[2, 1, 5, 6], 1, -1.0, 1.0);
    let w = Tensor::ones([1, 1, 1, 1]);
    let b = Tensor::zeros([1]);
    let y = run_conv(&x, &w, Some(&b), 1, 1, PaddingMode::Reflect);
    assert_eq!(y, x);
}

#[test]
fn conv_averaging_preserves_constants() {
    let x = Tensor::full([1, 1, 7, 7], 0.37);
    let w = Tensor::full([1, 1, 3, 3], 1.0 / 9.0);
    let y = run_conv(&x, &w, None, 1, 1, PaddingMode::Reflect);
    assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    let y = run_conv(&x, &w, None, 1, 4, PaddingMode::Reflect);
    assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
}

#[test]
fn dilated_delta_hits_expected_taps() {
    let mut x = vec![0.0; 11 * 11];
    x[5 * 11 + 5] = 1.0;
    let x = Tensor::from_vec([1, 1, 11, 11], x).unwrap();
    let w = rand_tensor(&[1, 1, 3, 3], 2, 0.5, 1.0);
    let y = run_conv(&x, &w, None, 1, 2, PaddingMode::Zeros);
    assert_eq!(y, conv_oracle(&x, &w, None, 1, 2, PaddingMode::Zeros));
    let mut hits = Vec::new();
    for yy in 0..11 {
        for xx in 0..11 {
            if y.data()[yy * 11 + xx] != 0.0 {
                hits.push((yy as isize - 5, xx as isize - 5));
            }
        }
    }
    let mut expected = Vec::new();
    for dy in [-2, 0, 2] {
        for dx in [-2, 0, 2] {
            expected.push((dy, dx));
        }
    }
    assert_eq!(hits, expected);
}

#[test]
fn conv_matches_oracle_across_configurations() {
    let x = rand_tensor(&[2, 3, 9, 8], 3, -1.0, 1.0);
    let w = rand_tensor(&[4, 3, 3, 3], 4, -1.0, 1.0);
    let b = rand_tensor(&[4], 5, -1.0, 1.0);
    for padding in [PaddingMode::Valid, PaddingMode::Zeros, PaddingMode::Reflect] {
        for stride in [1, 2] {
            for dilation in [1, 2, 3] {
                if padding == PaddingMode::Valid && dilation == 3 && stride == 2 {
                    continue;
                }
                let got = run_conv(&x, &w, Some(&b), stride, dilation, padding);
                let want = conv_oracle(&x, &w, Some(&b), stride, dilation, padding);
                assert_eq!(got.shape(), want.shape());
                assert!(got.max_abs_diff(&want) < 1e-12, "{padding:?} s{stride} d{dilation}");
            }
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros([1, 2, 4, 4]));
    let w = g.input(Tensor::zeros([1, 3, 3, 3]));
    match g.conv2d(x, w, None, 1, 1, PaddingMode::Zeros) {
        Err(Error::Dim { axis: "C", expected: 3, got: 2, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let x: Tensor<f32> = rand_tensor(&[1, 2, 6, 6], seed, -1.0, 1.0).cast();
        let y: Tensor<f32> = rand_tensor(&[1, 2, 6, 6], seed + 7, -1.0, 1.0).cast();
        let w: Tensor<f32> = rand_tensor(&[3, 2, 3, 3], seed + 13, -1.0, 1.0).cast();
        let mut g = Graph::<f32>::new();
        let (xv, yv, wv) = (g.input(x), g.input(y), g.input(w));
        let ax = g.scale(xv, a as f64);
        let by = g.scale(yv, b as f64);
        let mix = g.add(ax, by).unwrap();
        let lhs = g.conv2d(mix, wv, None, 1, 2, PaddingMode::Reflect).unwrap();
        let cx = g.conv2d(xv, wv, None, 1, 2, PaddingMode::Reflect).unwrap();
        let cy = g.conv2d(yv, wv, None, 1, 2, PaddingMode::Reflect).unwrap();
        let acx = g.scale(cx, a as f64);
        let bcy = g.scale(cy, b as f64);
        let rhs = g.add(acx, bcy).unwrap();
        prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-5);
    }

    #[test]
    fn group_norm_ignores_uniform_shift(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let x = rand_tensor(&[1, 4, 3, 3], seed, -1.0, 1.0);
        let shifted = x.map(|v| v + shift);
        let norm = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.input(t);
            let gm = g.input(Tensor::ones([4]));
            let bt = g.input(Tensor::zeros([4]));
            let y = g.group_norm(xv, 2, gm, bt, 1e-5).unwrap();
            g.value(y).clone()
        };
        prop_assert!(norm(x).max_abs_diff(&norm(shifted)) < 1e-9);
    }

    #[test]
    fn concat_then_slice_round_trips(seed in 0u64..1000, c1 in 1usize..4, c2 in 1usize..4) {
        let a = rand_tensor(&[2, c1, 3, 2], seed, -1.0, 1.0);
        let b = rand_tensor(&[2, c2, 3, 2], seed + 1, -1.0, 1.0);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        let cat = g.concat_channels(av, bv).unwrap();
        let sa = g.slice_channels(cat, 0, c1).unwrap();
        let sb = g.slice_channels(cat, c1, c2).unwrap();
        prop_assert_eq!(g.value(sa), &a);
        prop_assert_eq!(g.value(sb), &b);
    }

    #[test]
    fn ops_keep_finite_inputs_finite(seed in 0u64..500) {
        let x = rand_tensor(&[1, 4, 4, 4], seed, -30.0, 30.0);
        let mut g = Graph::new();
        let xv = g.input(x);
        for kind in [Activation::Selu, Activation::Relu, Activation::Sigmoid] {
            let y = g.activation(xv, kind);
            prop_assert!(g.value(y).is_finite());
        }
        let gm = g.input(Tensor::ones([4]));
        let bt = g.input(Tensor::zeros([4]));
        let n = g.group_norm(xv, 2, gm, bt, 1e-5).unwrap();
        prop_assert!(g.value(n).is_finite());
    }
}

fn gn(x: &Tensor<f64>, groups: usize, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gm = g.input(Tensor::full([c], gamma));
    let bt = g.input(Tensor::full([c], beta));
    let y = g.group_norm(xv, groups, gm, bt, 1e-5).unwrap();
    g.value(y).clone()
}

#[test]
fn group_norm_constant_input() {
    let x = Tensor::full([1, 4, 3, 3], 2.5);
    assert!(gn(&x, 2, 1.0, 0.0).data().iter().all(|&v| v == 0.0));
    assert!(gn(&x, 2, 1.0, 0.7).data().iter().all(|&v| v == 0.7));
}

#[test]
fn group_norm_statistics_match_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Roughly unit-variance input so the eps term is negligible.
    let x = Tensor::from_vec(
        [2, 8, 4, 4],
        (0..2 * 8 * 16).map(|_| (rng.random::<f64>() - 0.5) * 3.5).collect(),
    )
    .unwrap();
    let y = gn(&x, 4, 1.0, 0.0);
    for s in 0..2 {
        for grp in 0..4 {
            let start = (s * 8 + grp * 2) * 16;
            let vals = &y.data()[start..start + 32];
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    let mut g = Graph::<f64>::new();
    let xv = g.input(Tensor::zeros([1, 6, 2, 2]));
    let gm = g.input(Tensor::ones([6]));
    let bt = g.input(Tensor::zeros([6]));
    assert!(matches!(g.group_norm(xv, 4, gm, bt, 1e-5), Err(Error::Config(_))));
}

fn act(v: f64, kind: Activation) -> f64 {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(v));
    let y = g.activation(x, kind);
    g.value(y).item().unwrap()
}

#[test]
fn activation_reference_values() {
    let lambda = 1.050_700_987_355_480_5;
    let alpha = 1.673_263_242_354_377_2;
    assert_eq!(act(0.0, Activation::Selu), 0.0);
    assert_eq!(act(0.0, Activation::Sigmoid), 0.5);
    assert!((act(1.0, Activation::Selu) - lambda).abs() < 1e-15);
    assert!((act(-1.0, Activation::Selu) - lambda * alpha * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    assert_eq!(act(-3.0, Activation::Relu), 0.0);
    assert_eq!(act(3.0, Activation::Relu), 3.0);
    let s = act(40.0, Activation::Sigmoid);
    assert!(s > 0.0 && s <= 1.0);
    let s = act(-40.0, Activation::Sigmoid);
    assert!(s > 0.0 && s < 1.0);
}

#[test]
fn elementwise_identities_and_broadcast() {
    let x = rand_tensor(&[2, 3, 4, 5], 21, -1.0, 1.0);
    let m = rand_tensor(&[2, 1, 4, 5], 22, 0.0, 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let z = g.input(Tensor::zeros([2, 3, 4, 5]));
    let o = g.input(Tensor::ones([2, 3, 4, 5]));
    let mv = g.input(m.clone());
    let sum = g.add(xv, z).unwrap();
    let prod = g.mul(xv, o).unwrap();
    let bm = g.mul(xv, mv).unwrap();
    assert_eq!(g.value(sum), &x);
    assert_eq!(g.value(prod), &x);

    // explicit channel replication
    let mut rep = Vec::new();
    for s in 0..2 {
        for _ in 0..3 {
            rep.extend_from_slice(&m.data()[s * 20..(s + 1) * 20]);
        }
    }
    let rep = Tensor::from_vec([2, 3, 4, 5], rep).unwrap();
    let expected: Vec<f64> = x.data().iter().zip(rep.data()).map(|(a, b)| a * b).collect();
    assert_eq!(g.value(bm).data(), &expected[..]);

    let bad = g.input(Tensor::zeros([2, 2, 4, 5]));
    assert!(g.mul(xv, bad).is_err());
}

#[test]
fn concat_layout_and_empty_operand() {
    let a = rand_tensor(&[1, 2, 3, 3], 31, -1.0, 1.0);
    let b = rand_tensor(&[1, 3, 3, 3], 32, -1.0, 1.0);
    let mut g = Graph::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let e = g.input(Tensor::zeros([1, 0, 3, 3]));
    let same = g.concat_channels(av, e).unwrap();
    assert_eq!(g.value(same), &a);
    let cat = g.concat_channels(av, bv).unwrap();
    let c = g.value(cat);
    assert_eq!(c.shape(), &[1, 5, 3, 3]);
    assert_eq!(&c.data()[..9], &a.data()[..9]);
    assert_eq!(&c.data()[18..27], &b.data()[..9]);
}

fn resample(x: &Tensor<f64>, h: usize, w: usize, mode: ResampleMode) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.resample(xv, h, w, mode).unwrap();
    g.value(y).clone()
}

#[test]
fn resample_identity_constant_and_hand_weights() {
    let x = rand_tensor(&[1, 2, 5, 4], 41, -1.0, 1.0);
    for mode in [ResampleMode::Nearest, ResampleMode::Bilinear] {
        assert_eq!(resample(&x, 5, 4, mode), x);
        let c = Tensor::full([1, 1, 3, 3], 0.25);
        assert!(resample(&c, 7, 5, mode).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
    // 2x2 -> 4x4, align_corners = false: per-axis weights
    // out0 = x0, out1 = .75 x0 + .25 x1, out2 = .25 x0 + .75 x1, out3 = x1.
    let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
    let axis = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
    let y = resample(&x, 4, 4, ResampleMode::Bilinear);
    for r in 0..4 {
        for c in 0..4 {
            let mut v = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    v += axis[r][i] * axis[c][j] * x.data()[i * 2 + j];
                }
            }
            assert!((y.data()[r * 4 + c] - v).abs() < 1e-15);
        }
    }
    let y = resample(&x, 4, 4, ResampleMode::Nearest);
    assert_eq!(&y.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn backward_of_sum_and_half_square() {
    let x = rand_tensor(&[2, 3], 51, -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.param("x", x.clone());
    let s = g.sum(xv);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param("x").unwrap(), &Tensor::ones([2, 3]));

    let mut g = Graph::new();
    let xv = g.param("x", x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half).unwrap();
    assert!(grads.param("x").unwrap().max_abs_diff(&x) < 1e-15);
}

/// Scalar reference Adam, written out independently of the tensor version.
fn scalar_adam(x0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut path = Vec::new();
    for t in 1..=steps {
        let g = grad(x);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        x -= lr * mh / (vh.sqrt() + eps);
        path.push(x);
    }
    path
}

#[test]
fn adam_minimizes_quadratic_like_scalar_reference() {
    let reference = scalar_adam(0.0, 0.1, 50, |x| 2.0 * (x - 3.0));
    let mut params = ParamStore::new();
    params.insert("x", Tensor::<f64>::scalar(0.0));
    let mut state = AdamState::new(AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    });
    for want in &reference {
        let mut g = Graph::new();
        g.bind(&params);
        let x = g.param_var("x").unwrap();
        let three = g.input(Tensor::scalar(3.0));
        let d = g.sub(x, three).unwrap();
        let sq = g.square(d);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap().into_named();
        adam_step(&mut params, &grads, &mut state).unwrap();
        let got = params.get("x").unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12);
    }
    let x = params.get("x").unwrap().item().unwrap();
    assert!((x - 3.0).abs() < 0.5, "x = {x}");
    assert_eq!(state.step, 50);
}

// ---- finite-difference checks of every differentiable op ----

const TOL: f64 = 1e-3;

fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(*k, v.clone());
    }
    s
}

/// Reduce to a scalar with fixed random weights so every output element
/// contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> mtur_core::Result<Var> {
    let w = rand_tensor(g.value(y).shape(), seed, -1.0, 1.0);
    let wv = g.input(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn assert_grads(name: &str, s: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>) -> mtur_core::Result<Var>) {
    let report = check_gradients(s, f, GradCheckOptions::default()).unwrap();
    assert!(report.passes(TOL), "{name}: {:?}", report.worst);
    assert!(report.checked > 0);
}

#[test]
fn gradcheck_conv2d() {
    for (stride, dilation, padding) in [
        (1, 1, PaddingMode::Reflect),
        (2, 1, PaddingMode::Reflect),
        (1, 2, PaddingMode::Zeros),
        (1, 3, PaddingMode::Reflect),
        (2, 1, PaddingMode::Valid),
    ] {
        let s = store(&[
            ("x", rand_tensor(&[2, 2, 4, 4], 61, -1.0, 1.0)),
            ("w", rand_tensor(&[3, 2, 3, 3], 62, -1.0, 1.0)),
            ("b", rand_tensor(&[3], 63, -1.0, 1.0)),
        ]);
        assert_grads("conv2d", &s, |g| {
            let (x, w, b) = (g.param_var("x")?, g.param_var("w")?, g.param_var("b")?);
            let y = g.conv2d(x, w, Some(b), stride, dilation, padding)?;
            weighted_sum(g, y, 64)
        });
    }
}

#[test]
fn gradcheck_group_norm() {
    let s = store(&[
        ("x", rand_tensor(&[2, 4, 3, 3], 71, -1.0, 1.0)),
        ("gamma", rand_tensor(&[4], 72, 0.5, 1.5)),
        ("beta", rand_tensor(&[4], 73, -0.5, 0.5)),
    ]);
    assert_grads("group_norm", &s, |g| {
        let (x, gm, bt) = (g.param_var("x")?, g.param_var("gamma")?, g.param_var("beta")?);
        let y = g.group_norm(x, 2, gm, bt, 1e-5)?;
        weighted_sum(g, y, 74)
    });
}

#[test]
fn gradcheck_activations() {
    // keep relu inputs away from the kink
    let x = rand_tensor(&[1, 2, 4, 4], 81, -2.0, 2.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let s = store(&[("x", x)]);
    for kind in [Activation::Selu, Activation::Relu, Activation::Sigmoid] {
        assert_grads("activation", &s, |g| {
            let x = g.param_var("x")?;
            let y = g.activation(x, kind);
            weighted_sum(g, y, 82)
        });
    }
}

#[test]
fn gradcheck_elementwise_with_broadcast() {
    let s = store(&[
        ("a", rand_tensor(&[2, 3, 4, 4], 91, -1.0, 1.0)),
        ("b", rand_tensor(&[2, 3, 4, 4], 92, -1.0, 1.0)),
        ("m", rand_tensor(&[2, 1, 4, 4], 93, 0.0, 1.0)),
    ]);
    assert_grads("elementwise", &s, |g| {
        let (a, b, m) = (g.param_var("a")?, g.param_var("b")?, g.param_var("m")?);
        let sum = g.add(a, b)?;
        let diff = g.sub(sum, m)?;
        let prod = g.mul(diff, m)?;
        let sq = g.square(prod);
        let mixed = g.add(sq, b)?;
        let scaled = g.scale(mixed, 0.7);
        let y = g.mean(scaled);
        let z = g.mul(a, b)?;
        let zs = weighted_sum(g, z, 94)?;
        g.add(y, zs)
    });
}

#[test]
fn gradcheck_abs_away_from_zero() {
    let x = rand_tensor(&[1, 1, 4, 4], 95, -1.0, 1.0).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let s = store(&[("x", x)]);
    assert_grads("abs", &s, |g| {
        let x = g.param_var("x")?;
        let y = g.abs(x);
        weighted_sum(g, y, 96)
    });
}

#[test]
fn gradcheck_concat_slice() {
    let s = store(&[
        ("a", rand_tensor(&[2, 2, 3, 3], 101, -1.0, 1.0)),
        ("b", rand_tensor(&[2, 1, 3, 3], 102, -1.0, 1.0)),
    ]);
    assert_grads("concat", &s, |g| {
        let (a, b) = (g.param_var("a")?, g.param_var("b")?);
        let c = g.concat_channels(a, b)?;
        let sl = g.slice_channels(c, 1, 2)?;
        let y = g.add(c, c)?;
        let r1 = weighted_sum(g, y, 103)?;
        let r2 = weighted_sum(g, sl, 104)?;
        g.add(r1, r2)
    });
}

#[test]
fn gradcheck_resample() {
    let s = store(&[("x", rand_tensor(&[1, 2, 3, 4], 111, -1.0, 1.0))]);
    for (h, w) in [(6, 8), (7, 5), (2, 2), (3, 4)] {
        for mode in [ResampleMode::Bilinear, ResampleMode::Nearest] {
            assert_grads("resample", &s, |g| {
                let x = g.param_var("x")?;
                let y = g.resample(x, h, w, mode)?;
                weighted_sum(g, y, 112)
            });
        }
    }
}

#[test]
fn gradcheck_pad_and_crop() {
    let s = store(&[("x", rand_tensor(&[1, 2, 3, 4], 121, -1.0, 1.0))]);
    assert_grads("pad/crop", &s, |g| {
        let x = g.param_var("x")?;
        let p = g.pad_replicate(x, 1, 2, 0, 3)?;
        let c = g.crop(p, 1, 2, 3, 4)?;
        let r1 = weighted_sum(g, p, 122)?;
        let r2 = weighted_sum(g, c, 123)?;
        g.add(r1, r2)
    });
}
