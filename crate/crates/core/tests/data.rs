use std::collections::BTreeSet;

use pavedet_core::data::{
    decode_pgm, featuremap_dump, load_image_pgm, load_image_ppm, parse_yolo_label_file,
    serialize_yolo_label, split_dataset, synth_generate, write_pgm, write_ppm, NUM_CLASSES,
};
use pavedet_core::eval::{GroundTruthBox, Rect};
use pavedet_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_boxes(n: usize, seed: u64) -> Vec<GroundTruthBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x0 = rng.gen_range(0.0..0.9);
            let y0 = rng.gen_range(0.0..0.9);
            GroundTruthBox {
                image_id: 0,
                class_id: rng.gen_range(0..NUM_CLASSES),
                rect: Rect::new(
                    x0,
                    y0,
                    rng.gen_range(x0 + 0.01..1.0),
                    rng.gen_range(y0 + 0.01..1.0),
                ),
            }
        })
        .collect()
}

#[test]
fn label_round_trip_is_stable() {
    let boxes = random_boxes(1000, 1);
    let text = serialize_yolo_label(&boxes);
    let parsed = parse_yolo_label_file(&text).unwrap();
    assert_eq!(parsed.len(), boxes.len());
    for (a, b) in boxes.iter().zip(&parsed) {
        assert_eq!(a.class_id, b.class_id);
        for (x, y) in [
            (a.rect.x_min, b.rect.x_min),
            (a.rect.y_min, b.rect.y_min),
            (a.rect.x_max, b.rect.x_max),
            (a.rect.y_max, b.rect.y_max),
        ] {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
    let again = serialize_yolo_label(&parsed);
    assert_eq!(again, text);
    assert_eq!(parse_yolo_label_file(&again).unwrap(), parsed);
}

#[test]
fn netpbm_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut map = Tensor::from_fn(&[5, 7], |_| rng.gen_range(0.0..1.0));
    map.data_mut()[0] = 0.0;
    map.data_mut()[1] = 1.0;
    let p = dir.path().join("m.pgm");
    write_pgm(&map, &p).unwrap();
    let back = load_image_pgm(&p).unwrap();
    assert_eq!(back.shape(), &[5, 7]);
    for (a, b) in map.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }

    let img = Tensor::from_fn(&[3, 4, 6], |_| rng.gen_range(0.0..1.0));
    let p = dir.path().join("i.ppm");
    write_ppm(&img, &p).unwrap();
    let back = load_image_ppm(&p).unwrap();
    assert_eq!(back.shape(), &[3, 4, 6]);
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn synthetic_data_is_deterministic_and_valid() {
    let a = synth_generate(20, 64, 3).unwrap();
    let b = synth_generate(20, 64, 3).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.annotations, b.annotations);
    assert_ne!(a.images, synth_generate(20, 64, 4).unwrap().images);
    for (img, boxes) in a.images.iter().zip(a.targets()) {
        assert_eq!(img.shape(), &[3, 64, 64]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((1..=3).contains(&boxes.len()));
        let mut cells = BTreeSet::new();
        for g in &boxes {
            let r = g.rect;
            assert!(r.is_valid() && r.x_min >= 0.0 && r.y_max <= 1.0);
            assert!(r.width() >= 1.0 / 8.0 && r.height() >= 1.0 / 8.0);
            let cx = ((r.x_min + r.x_max) / 2.0 * 8.0).floor() as usize;
            let cy = ((r.y_min + r.y_max) / 2.0 * 8.0).floor() as usize;
            assert!(cells.insert((cx, cy)), "two centers in one cell");
        }
    }
    assert!(synth_generate(1, 31, 0).is_err());
}

#[test]
fn synthetic_classes_are_balanced() {
    let d = synth_generate(1000, 64, 11).unwrap();
    let mut counts = [0usize; NUM_CLASSES];
    for boxes in d.targets() {
        for g in boxes {
            counts[g.class_id] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for (c, n) in counts.iter().enumerate() {
        let f = *n as f64 / total as f64;
        assert!((f - 1.0 / 7.0).abs() <= 0.03, "class {c}: {f}");
    }
}

#[test]
fn featuremap_dump_files() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("fm");
    // channel 0 all zeros, channel 1 all ones, then two varying channels
    let fm = Tensor::from_fn(&[1, 4, 3, 3], |i| match i / 9 {
        0 => 0.0,
        1 => 1.0,
        c => (i % 9) as f64 * c as f64,
    });
    let files = featuremap_dump(&fm, &prefix).unwrap();
    assert_eq!(files.len(), 5);
    assert!(files[0].ends_with("fm_mean.pgm"));
    assert!(files[4].ends_with("fm_c03.pgm"));
    for f in &files {
        assert!(f.exists());
    }
    let c0 = decode_pgm(&std::fs::read(&files[1]).unwrap()).unwrap();
    assert!(c0.data().iter().all(|&v| v == 0.0));

    let two = Tensor::from_fn(&[1, 2, 2, 2], |i| (i / 4) as f64);
    let files = featuremap_dump(&two, &dir.path().join("two")).unwrap();
    assert_eq!(files.len(), 3);
    // mean is the constant 0.5 map, which normalizes to zeros
    let mean = load_image_pgm(&files[0]).unwrap();
    assert!(mean.data().iter().all(|&v| v == 0.0));

    let wide = Tensor::zeros(&[2, 20, 2, 2]);
    assert_eq!(
        featuremap_dump(&wide, &dir.path().join("w")).unwrap().len(),
        17
    );
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 10usize..300, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("img{i}")).collect();
        let m = split_dataset(&ids, seed).unwrap();
        prop_assert_eq!(&m, &split_dataset(&ids, seed).unwrap());
        prop_assert_eq!(m.train.len(), n * 8 / 10);
        prop_assert_eq!(m.val.len(), n / 10);
        let all: BTreeSet<&String> = m.train.iter().chain(&m.val).chain(&m.test).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all, ids.iter().collect::<BTreeSet<_>>());
    }

    #[test]
    fn canonical_text_is_byte_stable(seed in any::<u64>(), n in 0usize..20) {
        let text = serialize_yolo_label(&random_boxes(n, seed));
        let once = serialize_yolo_label(&parse_yolo_label_file(&text).unwrap());
        prop_assert_eq!(&once, &text);
    }
}
