use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dlabel::data::augment::rotate_tile;
use dlabel::data::palette::{decode_labels, encode_labels};
use dlabel::data::sampler::{draw_minibatch, flip_patch, grid_starts, sample_superbatch, SamplerConfig};
use dlabel::data::synth::synth_tile;
use dlabel::data::Tile;
use dlabel::layers::loss::IGNORE;
use dlabel::{Shape, Tensor};

fn tiny_tiles() -> Arc<Vec<Tile>> {
    Arc::new(vec![synth_tile(3, 0, 160), synth_tile(3, 1, 160)])
}

/// A synthetic tile with a band of ignored pixels to exercise void handling.
fn tile_with_voids(seed: u64) -> Tile {
    let mut t = synth_tile(seed, 0, 128);
    for y in 40..60 {
        for x in 0..128 {
            t.labels[y * 128 + x] = IGNORE;
        }
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patches_have_fixed_shape_and_live_centers(seed in any::<u64>(), balanced in any::<bool>()) {
        let tiles = Arc::new(vec![tile_with_voids(seed % 50), synth_tile(seed % 50, 1, 96)]);
        let mut cfg = SamplerConfig::new(8);
        cfg.balanced = balanced;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = match sample_superbatch(tiles.clone(), 6, &cfg, 200, &mut rng) {
            Ok(s) => s,
            // Small tiles may lack a class entirely; balanced mode must refuse.
            Err(_) => { prop_assert!(balanced); return Ok(()); }
        };
        for i in 0..store.len() {
            prop_assert_ne!(store.central_label(i), IGNORE);
        }
        let mean = vec![0.0f32; 4];
        let (mut a, mut b, mut c) = (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2), ChaCha8Rng::seed_from_u64(3));
        let mb = draw_minibatch(&store, &cfg, &mean, Some(3), &mut a, &mut b, &mut c).unwrap();
        prop_assert_eq!(mb.x.shape(), Shape::new(8, 4, 65, 65));
        prop_assert_eq!(mb.labels.len(), 8 * 65 * 65);
        for n in 0..8 {
            // The central pixel is a fixed point of both flips.
            prop_assert_eq!(mb.labels[n * 65 * 65 + 32 * 65 + 32], store.central_label(mb.indices[n]));
        }
    }

    #[test]
    fn grid_covers_axis(n in 65usize..400, overlap in 0usize..64) {
        let starts = grid_starts(n, 65, overlap);
        prop_assert_eq!(starts[0], 0);
        prop_assert_eq!(*starts.last().unwrap() + 65, n);
        for w in starts.windows(2) {
            prop_assert!(w[1] > w[0] && w[1] - w[0] <= 65 - overlap);
        }
    }

    #[test]
    fn flips_commute_with_label_decoding(labels in prop::collection::vec(prop_oneof![0u8..6, Just(IGNORE)], 49), h in any::<bool>(), v in any::<bool>()) {
        let p = 7;
        let mut x = vec![0.0f32; p * p];
        // Flip decoded labels.
        let mut direct = labels.clone();
        flip_patch(&mut x, &mut direct, p, h, v);
        // Flip the color raster pixelwise, then decode.
        let rgb = encode_labels(&labels).unwrap();
        let mut idx: Vec<u8> = (0..p * p).map(|i| i as u8).collect();
        flip_patch(&mut x, &mut idx, p, h, v);
        let flipped: Vec<u8> = idx.iter().flat_map(|&i| rgb[i as usize * 3..i as usize * 3 + 3].to_vec()).collect();
        prop_assert_eq!(decode_labels(&flipped, false).unwrap(), direct);
    }

    #[test]
    fn rotation_voids_and_quarter_turns(deg in 0.0f64..360.0) {
        let (h, w) = (21, 17);
        let labels: Vec<u8> = (0..h * w).map(|i| (i % 6) as u8).collect();
        let spectral = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| labels[y * w + x] as f32);
        let t = Tile::new("t", spectral, labels).unwrap();
        let r = rotate_tile(&t, deg);
        for (i, &l) in r.labels.iter().enumerate() {
            if l == IGNORE {
                prop_assert_eq!(r.spectral.data()[i], 0.0);
            } else {
                prop_assert!(l < 6);
            }
        }
        let q = rotate_tile(&t, 90.0 * (deg / 90.0).round());
        prop_assert_eq!(q.labels.iter().filter(|&&l| l == IGNORE).count(), 0);
        let mut a: Vec<u8> = q.labels.clone();
        let mut b: Vec<u8> = t.labels.clone();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b, "quarter turns permute pixels");
    }
}

#[test]
fn balanced_draws_are_uniform_despite_skew() {
    let tiles = tiny_tiles();
    let mut cfg = SamplerConfig::new(32);
    cfg.balanced = true;
    let store = sample_superbatch(tiles.clone(), 6, &cfg, 12_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut hist = [0u32; 6];
    for i in 0..store.len() {
        hist[store.central_label(i) as usize] += 1;
    }
    let expected = store.len() as f64 / 6.0;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 1% critical value for 5 degrees of freedom.
    assert!(chi2 < 15.086, "{hist:?} chi2 {chi2}");
    cfg.balanced = false;
    let raw = sample_superbatch(tiles, 6, &cfg, 12_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let cars = (0..raw.len()).filter(|&i| raw.central_label(i) == 4).count();
    assert!(cars * 10 < raw.len() / 6, "unbalanced draws keep the skew");
}
