use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dlabel::layers::conv::{conv_forward, ConvSpec};
use dlabel::layers::deconv::{deconv_forward, DeconvSpec};
use dlabel::layers::dropout::sample_mask;
use dlabel::layers::loss::softmax_xent;
use dlabel::layers::{Context, Dropout, Layer, Mode};
use dlabel::{ArchSpec, Network, Shape, Tensor};

fn seeded(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rand::Rng::gen_range(&mut rng, -1.0..1.0))
}

/// Direct summation over the kernel window, independent of im2col.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let oh = (s.height + 2 * spec.pad - spec.kernel) / spec.stride + 1;
    let ow = (s.width + 2 * spec.pad - spec.kernel) / spec.stride + 1;
    Tensor::from_fn(Shape::new(s.batch, spec.out_channels, oh, ow), |n, o, y, xx| {
        let mut acc = 0.0;
        for c in 0..spec.in_channels {
            for ky in 0..spec.kernel {
                for kx in 0..spec.kernel {
                    let iy = (y * spec.stride + ky) as isize - spec.pad as isize;
                    let ix = (xx * spec.stride + kx) as isize - spec.pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.height && (ix as usize) < s.width {
                        acc += w.get(o, c, ky, kx) * x.get(n, c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// `(kernel, stride, pad, n)` with an integral conv output size.
fn conv_geometry() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (prop::sample::select(vec![1usize, 3, 5, 7]), 1usize..=2, 0usize..=3, 0usize..=6).prop_filter_map(
        "integral output",
        |(m, s, z, extra)| {
            let z = z.min(m - 1);
            let n = m + extra;
            ((n + 2 * z - m) % s == 0).then_some((m, s, z, n))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv_deconv_adjoint((m, s, z, n) in conv_geometry(), cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()) {
        let conv = ConvSpec { in_channels: cin, out_channels: cout, kernel: m, stride: s, pad: z };
        let de = DeconvSpec { in_channels: cout, out_channels: cin, kernel: m, stride: s, crop: z };
        let w = seeded(conv.weight_shape(), seed);
        let x = seeded(Shape::new(2, cin, n, n), seed ^ 1);
        let cx = conv_forward(&x, &w, &Tensor::zeros(Shape::new(1, cout, 1, 1)), &conv).unwrap();
        let y = seeded(cx.shape(), seed ^ 2);
        let dy = deconv_forward(&y, &w, &Tensor::zeros(Shape::new(1, cin, 1, 1)), &de).unwrap();
        prop_assert_eq!(dy.shape(), x.shape());
        let (lhs, rhs) = (cx.dot(&y).unwrap(), x.dot(&dy).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_matches_direct_sum((m, s, z, n) in conv_geometry(), cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()) {
        let spec = ConvSpec { in_channels: cin, out_channels: cout, kernel: m, stride: s, pad: z };
        let w = seeded(spec.weight_shape(), seed);
        let x = seeded(Shape::new(2, cin, n, n), seed ^ 3);
        let got = conv_forward(&x, &w, &Tensor::zeros(Shape::new(1, cout, 1, 1)), &spec).unwrap();
        let want = naive_conv(&x, &w, &spec);
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn size_formulas_invert((m, s, z, n) in conv_geometry()) {
        let conv = ConvSpec { in_channels: 1, out_channels: 1, kernel: m, stride: s, pad: z };
        let de = DeconvSpec { in_channels: 1, out_channels: 1, kernel: m, stride: s, crop: z };
        let o = conv.out_size(n).unwrap();
        prop_assert_eq!(de.out_size(o).unwrap(), n);
    }

    #[test]
    fn dropout_output_is_scaled_mask(rate in 0.05f64..0.9, seed in any::<u64>()) {
        let x = seeded(Shape::new(2, 3, 4, 5), seed);
        let mut layer = Dropout::<f64>::new("d", rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = layer.forward(&x, &mut Context { mode: Mode::Train, rng: &mut rng, cache: true }).unwrap();
        let mask = layer.last_mask().unwrap().clone();
        for i in 0..x.len() {
            let keep = mask.data()[i];
            prop_assert!(keep == 0.0 || keep == 1.0 / (1.0 - rate));
            prop_assert_eq!(y.data()[i], x.data()[i] * keep);
        }
        let m2: Tensor<f64> = sample_mask(x.shape(), rate, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(m2.shape(), x.shape());
    }

    #[test]
    fn softmax_is_a_simplex(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let scores = seeded(Shape::new(2, 6, 3, 3), seed).scale(scale);
        let targets: Vec<u8> = (0..18).map(|i| if i % 7 == 0 { 255 } else { (i % 6) as u8 }).collect();
        let out = softmax_xent(&scores, &targets).unwrap();
        prop_assert!(out.loss >= 0.0);
        let s = out.probs.shape();
        for n in 0..s.batch {
            for y in 0..s.height {
                for x in 0..s.width {
                    let ps: Vec<f64> = (0..s.channels).map(|c| out.probs.get(n, c, y, x)).collect();
                    prop_assert!(ps.iter().all(|&p| p > 0.0 && p < 1.0));
                    prop_assert!((ps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

fn small_fpl() -> (ArchSpec, Network<f64>) {
    let mut spec = ArchSpec::new("fpl", 3, 4);
    spec.width_divisor = 16;
    let mut net: Network<f64> = spec.build().unwrap();
    net.init_weights(&mut ChaCha8Rng::seed_from_u64(5));
    (spec, net)
}

#[test]
fn backward_twice_doubles_gradients() {
    let (spec, mut net) = small_fpl();
    net.set_mode(Mode::Eval);
    let x = seeded(spec.patch_shape(2), 9);
    let y = net.forward(&x).unwrap();
    let dy = seeded(y.shape(), 10);
    net.zero_grad();
    net.backward_params(&dy).unwrap();
    let once: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    net.backward_params(&dy).unwrap();
    for ((name, p), g1) in net.params().iter().zip(&once) {
        for (a, b) in p.grad.data().iter().zip(g1) {
            assert_eq!(*a, 2.0 * b, "{name}");
        }
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let (spec, mut net) = small_fpl();
    let x = seeded(spec.patch_shape(2), 11);
    net.set_mode(Mode::Eval);
    let before: Vec<Vec<f64>> = net.buffers().iter().map(|(_, t)| t.data().to_vec()).collect();
    let a = net.forward(&x).unwrap();
    let b = net.forward(&x).unwrap();
    assert_eq!(a.data(), b.data());
    let after: Vec<Vec<f64>> = net.buffers().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(before, after);
    net.set_mode(Mode::Train);
    let c = net.forward(&x).unwrap();
    let d = net.forward(&x).unwrap();
    assert_ne!(c.data(), d.data(), "train mode draws fresh dropout masks");
}
