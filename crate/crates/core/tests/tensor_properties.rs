use proptest::prelude::*;

use dlabel::layers::loss::softmax;
use dlabel::tensor::{bilinear_resize, pad_reflect, pad_zero, reflect_index};
use dlabel::{Shape, Tensor};

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, shape.len()).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

fn any_tensor() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(n, c, h, w)| tensor(Shape::new(n, c, h, w)))
}

proptest! {
    #[test]
    fn pad_then_crop_is_identity(t in any_tensor(), z in 0usize..5) {
        let s = t.shape();
        let back = pad_zero(&t, z).crop(z, z, s.height, s.width).unwrap();
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn reflect_pad_interior_is_original(t in any_tensor(), pads in (0usize..6, 0usize..6, 0usize..6, 0usize..6)) {
        let (top, bottom, left, right) = pads;
        let s = t.shape();
        let p = pad_reflect(&t, top, bottom, left, right);
        prop_assert_eq!(p.shape(), Shape::new(s.batch, s.channels, s.height + top + bottom, s.width + left + right));
        let inner = p.crop(top, left, s.height, s.width).unwrap();
        prop_assert_eq!(inner.data(), t.data());
        for y in 0..p.shape().height {
            let sy = reflect_index(y as isize - top as isize, s.height);
            for x in 0..p.shape().width {
                let sx = reflect_index(x as isize - left as isize, s.width);
                prop_assert_eq!(p.get(0, 0, y, x), t.get(0, 0, sy, sx));
            }
        }
    }

    #[test]
    fn reflect_index_stays_in_range(i in -500isize..500, n in 1usize..40) {
        let r = reflect_index(i, n);
        prop_assert!(r < n);
        if (0..n as isize).contains(&i) {
            prop_assert_eq!(r, i as usize);
        }
        prop_assert_eq!(reflect_index(-i, n), reflect_index(i, n));
    }

    #[test]
    fn resize_of_constant_is_exact(v in -3.0f64..3.0, h in 1usize..12, w in 1usize..12, k in 1usize..4) {
        let t = Tensor::filled(Shape::new(1, 2, h, w), v);
        let up = bilinear_resize(&t, h * k + 1, w * k + 2);
        prop_assert!(up.data().iter().all(|&x| x == v));
        let down = bilinear_resize(&up, h, w);
        prop_assert!(down.data().iter().all(|&x| x == v));
    }

    #[test]
    fn argmax_survives_softmax(t in (1usize..3, 2usize..7, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| tensor(Shape::new(n, c, h, w)))) {
        prop_assert_eq!(softmax(&t).argmax_channels(), t.argmax_channels());
        prop_assert_eq!(t.map(|x| x.powi(3) + 2.0 * x).argmax_channels(), t.argmax_channels());
    }
}
