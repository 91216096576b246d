use std::collections::BTreeSet;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segkit::data::{
    augment, center_crop, flip, grid_distortion, load_dataset, mask_is_binary, rotate, sample_rng,
    split_ids, AugmentOp, AugmentSpec, DatasetLayout, DatasetSplit, FlipAxis, Sample, SplitName,
    SplitRatios,
};
use segkit::{Error, Tensor};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i:04}")).collect()
}

/// A random image whose channel 0 is the binary mask.
fn locked_sample(h: usize, w: usize, seed: u64) -> Sample {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<f32> = (0..h * w)
        .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    let mut image = mask.clone();
    image.extend((0..2 * h * w).map(|_| rng.random::<f32>()));
    Sample::new(
        "s",
        Tensor::new(vec![3, h, w], image).unwrap(),
        Tensor::new(vec![1, h, w], mask).unwrap(),
    )
    .unwrap()
}

fn channel0(s: &Sample) -> &[f32] {
    &s.image.data()[..s.height() * s.width()]
}

fn op_strategy() -> impl Strategy<Value = AugmentOp> {
    prop_oneof![
        (0.0f64..=180.0).prop_map(|max_deg| AugmentOp::RandomRotate { max_deg }),
        (0.0f64..=1.0).prop_map(|p| AugmentOp::HorizontalFlip { p }),
        (0.0f64..=1.0).prop_map(|p| AugmentOp::VerticalFlip { p }),
        (2usize..8, 0.0f64..0.9, 0.0f64..=1.0)
            .prop_map(|(steps, limit, p)| AugmentOp::GridDistortion { steps, limit, p }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_deterministic_partition(n in prop::sample::select(vec![3usize, 4, 10, 37, 1000]), seed in any::<u64>()) {
        let all = ids(n);
        let ratios = SplitRatios::default();
        let a = split_ids(&all, ratios, seed).unwrap();
        let b = split_ids(&all, ratios, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut seen = BTreeSet::new();
        for name in SplitName::ALL {
            prop_assert!(!a.ids(name).is_empty());
            for id in a.ids(name) {
                prop_assert!(seen.insert(id.clone()), "{} appears twice", id);
            }
        }
        prop_assert_eq!(seen.len(), n);
        let reversed: Vec<String> = all.iter().rev().cloned().collect();
        prop_assert_eq!(split_ids(&reversed, ratios, seed).unwrap(), a.clone());
        prop_assert_eq!(DatasetSplit::from_manifest(&a.to_manifest()).unwrap().to_manifest(), a.to_manifest());
    }

    #[test]
    fn flips_are_involutions(h in 1..12usize, w in 1..12usize, seed in any::<u64>()) {
        let s = locked_sample(h, w, seed);
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            prop_assert_eq!(&flip(&flip(&s, axis), axis), &s);
        }
    }

    #[test]
    fn quarter_turns_match_index_permutation(side in 1..12usize, seed in any::<u64>(), turns in 1..4usize) {
        let s = locked_sample(side, side, seed);
        let r = rotate(&s, 90.0 * turns as f64);
        let mut want = s.clone();
        for _ in 0..turns {
            want = rotate90_oracle(&want);
        }
        prop_assert_eq!(&r, &want);
        prop_assert_eq!(rotate(&r, 90.0 * (4 - turns) as f64), s);
    }

    #[test]
    fn grid_distortion_without_limit_is_identity(h in 2..16usize, w in 2..16usize, steps in 2..8usize, seed in any::<u64>()) {
        let s = locked_sample(h, w, seed);
        let out = grid_distortion(&s, steps, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&out.image), bits(&s.image));
        prop_assert_eq!(bits(&out.mask), bits(&s.mask));
    }

    #[test]
    fn any_op_sequence_keeps_masks_binary_and_shapes(
        ops in prop::collection::vec(op_strategy(), 0..6), side in 4..20usize, seed in any::<u64>(), epoch in 0..50usize,
    ) {
        let s = locked_sample(side, side, seed);
        let spec = AugmentSpec { ops, seed };
        let out = augment(&s, &spec, &mut sample_rng(seed, &s.id, epoch)).unwrap();
        prop_assert!(mask_is_binary(&out.mask));
        prop_assert_eq!(out.image.shape(), s.image.shape());
        prop_assert_eq!(out.mask.shape(), s.mask.shape());
        prop_assert_eq!(&out, &augment(&s, &spec, &mut sample_rng(seed, &s.id, epoch)).unwrap());
    }

    #[test]
    fn image_and_mask_move_in_lockstep(side in 4..16usize, seed in any::<u64>(), deg in -180.0f64..180.0) {
        let s = locked_sample(side, side, seed);
        // exact for permutations
        for out in [flip(&s, FlipAxis::Horizontal), flip(&s, FlipAxis::Vertical), rotate(&s, 90.0), rotate(&s, -90.0)] {
            prop_assert_eq!(channel0(&out), out.mask.data());
        }
        // general angles differ only by interpolation: the mask takes the
        // nearest of the four bilinear taps, which carries weight >= 1/4
        let out = rotate(&s, deg);
        let agree = channel0(&out)
            .iter()
            .zip(out.mask.data())
            .filter(|&(&i, &m)| if m == 1.0 { i >= 0.25 - 1e-6 } else { i <= 0.75 + 1e-6 })
            .count();
        prop_assert_eq!(agree, side * side);
    }

    #[test]
    fn center_crop_yields_exact_side(h in 4..20usize, w in 4..20usize, frac in 0.1f64..=1.0, seed in any::<u64>()) {
        let s = locked_sample(h, w, seed);
        let side = ((h.min(w) as f64 * frac) as usize).max(1);
        let out = center_crop(&s, side).unwrap();
        prop_assert_eq!(out.image.shape(), &[3, side, side]);
        prop_assert_eq!(out.mask.shape(), &[1, side, side]);
        prop_assert_eq!(channel0(&out), out.mask.data());
    }
}

fn rotate90_oracle(s: &Sample) -> Sample {
    let n = s.height();
    let turn = |t: &Tensor<f32>| {
        let c = t.shape()[0];
        let mut out = vec![0.0; t.numel()];
        for ch in 0..c {
            for y in 0..n {
                for x in 0..n {
                    // counter-clockwise: destination (y, x) reads source (x, n-1-y)
                    out[(ch * n + y) * n + x] = t.data()[(ch * n + x) * n + (n - 1 - y)];
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    };
    Sample::new(s.id.clone(), turn(&s.image), turn(&s.mask)).unwrap()
}

#[test]
fn split_sizes_follow_ratios() {
    for (n, want) in [
        (1000, [800, 100, 100]),
        (10, [8, 1, 1]),
        (3, [1, 1, 1]),
        (4, [2, 1, 1]),
    ] {
        let split = split_ids(&ids(n), SplitRatios::default(), 7).unwrap();
        let got = [split.train.len(), split.val.len(), split.test.len()];
        assert_eq!(got, want, "N={n}");
    }
    assert!(split_ids(&ids(2), SplitRatios::default(), 0).is_err());
    let mut dup = ids(5);
    dup.push("img0001".into());
    assert!(split_ids(&dup, SplitRatios::default(), 0).is_err());
}

#[test]
fn masks_stay_binary_over_many_default_draws() {
    let s = locked_sample(24, 24, 3);
    let spec = AugmentSpec::default();
    for epoch in 0..1000 {
        let out = augment(&s, &spec, &mut sample_rng(9, &s.id, epoch)).unwrap();
        assert!(mask_is_binary(&out.mask), "epoch {epoch}");
    }
}

fn write_pair(root: &Path, id: &str, w: u32, h: u32, mask_ext: &str) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, 200]))
        .save(root.join("images").join(format!("{id}.png")))
        .unwrap();
    GrayImage::from_fn(w, h, |x, _| Luma([if x < w / 2 { 0 } else { 250 }]))
        .save(root.join("masks").join(format!("{id}.{mask_ext}")))
        .unwrap();
}

#[test]
fn loads_resizes_and_binarizes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "b", 40, 30, "png");
    write_pair(dir.path(), "a", 16, 16, "jpg");
    let layout = DatasetLayout::from_root(dir.path());
    let samples = load_dataset(&layout.images_dir, &layout.masks_dir, 32).unwrap();
    assert_eq!(
        samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
        ["a", "b"]
    );
    for s in &samples {
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert_eq!(s.mask.shape(), &[1, 32, 32]);
        assert!(mask_is_binary(&s.mask));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn unmatched_files_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "ok", 8, 8, "png");
    write_pair(dir.path(), "lost", 8, 8, "png");
    std::fs::remove_file(dir.path().join("masks/lost.png")).unwrap();
    GrayImage::new(8, 8)
        .save(dir.path().join("masks/extra.png"))
        .unwrap();
    let layout = DatasetLayout::from_root(dir.path());
    match load_dataset(&layout.images_dir, &layout.masks_dir, 8) {
        Err(Error::Unmatched {
            images_without_masks,
            masks_without_images,
        }) => {
            assert_eq!(images_without_masks, ["lost"]);
            assert_eq!(masks_without_images, ["extra"]);
        }
        other => panic!("expected an unmatched error, got {other:?}"),
    }
}
