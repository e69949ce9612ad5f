mod support;

use npp_core::{Architecture, Conv2d, Dense, Layer, MaxPool2d, Model, ModelMetadata, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracle::{naive_forward, random_dense_net, random_input};

#[test]
fn dense_forward_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let model = random_dense_net(&mut rng, 3, 32, false);
        let x = random_input(&mut rng, &model);
        let got = model.forward(&x).unwrap();
        let want = naive_forward(&model, x.data());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }
}

/// Direct convolution with zero padding, written out index by index.
fn naive_conv(c: &Conv2d, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * c.padding - c.kernel_h) / c.stride + 1;
    let ow = (w + 2 * c.padding - c.kernel_w) / c.stride + 1;
    let mut out = vec![0.0; c.out_channels * oh * ow];
    for oc in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = c.bias[oc];
                for ic in 0..c.in_channels {
                    for ky in 0..c.kernel_h {
                        for kx in 0..c.kernel_w {
                            let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                            let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wi = ((oc * c.in_channels + ic) * c.kernel_h + ky) * c.kernel_w + kx;
                            s += c.weights[wi] * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

fn naive_pool(x: &[f64], ch: usize, h: usize, w: usize, k: usize, s: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(x[(c * h + oy * s + dy) * w + ox * s + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_forward_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1);
        let (h, w) = (rng.random_range(4..=9), rng.random_range(4..=9));
        let weights = (0..cout * cin * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
        let conv = Conv2d::new(cin, cout, kh, kw, stride, padding, weights, bias).unwrap();
        let (oh, ow) = conv.output_hw(h, w).unwrap();
        let (ph, pw) = ((oh - 2) / 2 + 1, (ow - 2) / 2 + 1);
        if oh < 2 || ow < 2 {
            continue;
        }
        let flat = cout * ph * pw;
        let head = Dense::new(flat, 3, (0..3 * flat).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![0.1; 3]).unwrap();
        let model = Model::new(
            vec![cin, h, w],
            vec![
                Layer::Conv2d(conv.clone()),
                Layer::Relu,
                Layer::MaxPool2d(MaxPool2d { window: 2, stride: 2 }),
                Layer::Flatten,
                Layer::Dense(head.clone()),
            ],
            3,
            ModelMetadata::default(),
        )
        .unwrap();
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.random_range(0.0..1.0)).collect();

        let (c, _, _) = naive_conv(&conv, &x, h, w);
        let c: Vec<f64> = c.into_iter().map(|v| v.max(0.0)).collect();
        let (p, _, _) = naive_pool(&c, cout, oh, ow, 2, 2);
        let want: Vec<f64> = (0..3)
            .map(|j| head.bias[j] + (0..flat).map(|i| head.weights[j * flat + i] * p[i]).sum::<f64>())
            .collect();
        let got = model.forward(&Tensor::new(vec![cin, h, w], x).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "trial {trial}: {g} vs {w}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_trace_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = Model::build(&Architecture::SmallConv, &[1, 12, 12], 4, 8).unwrap();
    let mlp = Model::build(&"mlp-20-10".parse().unwrap(), &[1, 6, 6], 3, 8).unwrap();
    for model in [conv, mlp] {
        for _ in 0..10 {
            let x = random_input(&mut rng, &model);
            let a = model.forward(&x).unwrap();
            let b = model.forward(&x).unwrap();
            let (c, trace) = model.forward_with_trace(&x).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(bits(&a), bits(&c));
            assert_eq!(trace.len(), model.layers().len());
            assert_eq!(trace.entries[0].input, x);
            assert_eq!(trace.entries.last().unwrap().output, c);
        }
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = Model::build(&"mlp-4".parse().unwrap(), &[1, 3, 3], 2, 0).unwrap();
    let x = Tensor::zeros(vec![1, 3, 4]);
    assert!(model.forward(&x).is_err());
    assert!(model.forward_with_trace(&x).is_err());
}
