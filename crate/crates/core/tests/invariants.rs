use proptest::prelude::*;
use tcnet_core::cpa::{expand_patch_map, make_coarse_target, PatchGrid};
use tcnet_core::dataio::{decode_pgm, decode_tensor, encode_pgm, encode_tensor, resize_bilinear, stack_indices};
use tcnet_core::mdu::{MduSpec, BRANCHES};
use tcnet_core::tcnet::TrainConfig;
use tcnet_core::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_file_round_trips(shape in prop::collection::vec(1usize..5, 1..4), values in prop::collection::vec(any::<f32>(), 64)) {
        let n: usize = shape.iter().product();
        let data = values[..n].to_vec();
        let t = Tensor::new(&shape, data).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pgm_round_trips(w in 1usize..20, h in 1usize..20, fill in any::<u8>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| fill.wrapping_add(i as u8)).collect();
        let (w2, h2, p2) = decode_pgm(&encode_pgm(w, h, &pixels).unwrap()).unwrap();
        prop_assert_eq!((w2, h2), (w, h));
        prop_assert_eq!(p2, pixels);
    }

    #[test]
    fn expanded_map_repeats_each_weight(g in 1usize..8, ph in 1usize..6, pw in 1usize..6, seed in any::<u64>()) {
        let grid = Tensor::<f64>::from_fn(&[g, g], |i| ((seed.wrapping_add(i as u64 * 7919)) % 1000) as f64 / 1000.0);
        let map = expand_patch_map(&PatchGrid { grid: grid.clone(), source_shape: (g * ph, g * pw) }).unwrap();
        for r in 0..g * ph {
            for c in 0..g * pw {
                prop_assert_eq!(map.data()[r * g * pw + c], grid.data()[(r / ph) * g + c / pw]);
            }
        }
    }

    #[test]
    fn coarse_target_marks_exactly_touched_patches(g in 1usize..7, patch in 1usize..6, points in prop::collection::vec((0usize..1000, 0usize..1000), 0..6)) {
        let side = g * patch;
        let mut mask = Tensor::<f32>::zeros(&[side, side]);
        let mut expected = vec![0.0f32; g * g];
        for (r, c) in points {
            let (r, c) = (r % side, c % side);
            mask.set(&[r, c], 1.0);
            expected[(r / patch) * g + c / patch] = 1.0;
        }
        let target = make_coarse_target(&mask, g).unwrap();
        prop_assert_eq!(target.grid.data(), &expected[..]);
    }

    #[test]
    fn neighbour_slices_stay_in_the_volume(depth in 1usize..40, z in 0usize..40) {
        let z = z % depth;
        let idx = stack_indices(z, depth);
        prop_assert_eq!(idx[2], z);
        prop_assert!(idx.iter().all(|&i| i < depth));
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn resizing_stays_within_the_input_range(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, seed in any::<u32>()) {
        let plane: Vec<f32> = (0..h * w).map(|i| ((seed as usize + i * 37) % 101) as f32 / 100.0).collect();
        let out = resize_bilinear(&plane, (h, w), (oh, ow));
        prop_assert_eq!(out.len(), oh * ow);
        let lo = plane.iter().cloned().fold(f32::MAX, f32::min);
        let hi = plane.iter().cloned().fold(f32::MIN, f32::max);
        prop_assert!(out.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        let flat = resize_bilinear(&vec![0.25; h * w], (h, w), (oh, ow));
        prop_assert!(flat.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn every_upsampling_branch_doubles(cin in 1usize..8, cout in 1usize..5, side in 1usize..64) {
        let spec = MduSpec::new(cin, 4 * cout);
        for i in 0..BRANCHES.len() {
            let s = spec.branch_spec(i);
            prop_assert_eq!(s.transposed_output_extent(0, side).unwrap(), 2 * side);
            prop_assert_eq!(s.transposed_output_extent(1, side).unwrap(), 2 * side);
        }
    }

    #[test]
    fn learning_rate_decays_geometrically(lr0 in 1e-5f64..1e-1, decay in 0.5f64..0.999, epoch in 0usize..200) {
        let tc = TrainConfig { lr0, decay, ..TrainConfig::default() };
        let (a, b) = (tc.learning_rate(epoch), tc.learning_rate(epoch + 1));
        prop_assert!(b < a && b > 0.0);
        prop_assert!(((b / a) - decay).abs() <= 1e-12);
    }
}
