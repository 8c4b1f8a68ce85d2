use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use saliencytune::data::{load_dataset, simulate_feedback, write_dataset, ClassSet, FeedbackSource, ATTRIBUTES};
use saliencytune::model::InputShape;
use saliencytune::synthetic::{generate_synthetic_dataset, input_shape};
use saliencytune::Error;

const SIDE: u32 = 16;

fn shape() -> InputShape {
    InputShape {
        height: SIDE as usize,
        width: SIDE as usize,
        channels: 3,
    }
}

fn write_image(root: &Path, id: &str) {
    let img = RgbImage::from_fn(SIDE, SIDE, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 128]));
    img.save(root.join("images").join(format!("{id}.jpg"))).unwrap();
}

/// Attribute `a` of the fixture covers the rectangle rows `a..a+3`, columns `2a..2a+2`.
fn attribute_rect(a: usize) -> (std::ops::Range<u32>, std::ops::Range<u32>) {
    let a = a as u32;
    (a..a + 3, 2 * a..2 * a + 2)
}

fn write_masks(root: &Path, id: &str, skip: Option<usize>) {
    for (a, name) in ATTRIBUTES.iter().enumerate() {
        if Some(a) == skip {
            continue;
        }
        let (rows, cols) = attribute_rect(a);
        let m = GrayImage::from_fn(SIDE, SIDE, |x, y| {
            Luma([if rows.contains(&y) && cols.contains(&x) { 255 } else { 0 }])
        });
        m.save(root.join("masks").join(format!("{id}_attribute_{name}.png"))).unwrap();
    }
}

fn fixture(root: &Path, labels: &[(&str, &str)]) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    let mut csv = String::from("id,label\n");
    for (id, label) in labels {
        csv.push_str(&format!("{id},{label}\n"));
    }
    std::fs::write(root.join("labels.csv"), csv).unwrap();
}

#[test]
fn complete_fixture_loads_with_hand_computed_union() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root, &[("a", "MEL"), ("b", "NV"), ("c", "BKL")]);
    for id in ["a", "b", "c"] {
        write_image(root, id);
        write_masks(root, id, None);
    }
    let mut samples = load_dataset(root, &ClassSet::default(), shape()).unwrap();
    samples.sort_by(|x, y| x.id.cmp(&y.id));
    assert_eq!(samples.len(), 3);
    assert_eq!(samples.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 1, 2]);
    for s in &samples {
        assert_eq!(s.image.dim(), (16, 16, 3));
        let m = s.gt_mask.as_ref().unwrap();
        assert_eq!(m.resolution(), (16, 16));
        for ((y, x), &v) in m.values.indexed_iter() {
            let expected = (0..5).any(|a| {
                let (rows, cols) = attribute_rect(a);
                rows.contains(&(y as u32)) && cols.contains(&(x as u32))
            });
            assert_eq!(v, expected, "pixel ({y}, {x})");
        }
    }
    // rows 0..7 over columns 0..10 in a staircase: 5 rectangles of 6 pixels,
    // neighbours never overlap since their columns are disjoint
    assert_eq!(samples[0].gt_mask.as_ref().unwrap().count_ones(), 30);
}

#[test]
fn missing_attribute_counts_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root, &[("a", "MEL")]);
    write_image(root, "a");
    write_masks(root, "a", Some(2));
    let s = load_dataset(root, &ClassSet::default(), shape()).unwrap().remove(0);
    let m = s.gt_mask.unwrap();
    assert_eq!(m.count_ones(), 24);
    let (rows, cols) = attribute_rect(2);
    for y in rows {
        for x in cols.clone() {
            let covered_by_other = [0usize, 1, 3, 4].iter().any(|&a| {
                let (r, c) = attribute_rect(a);
                r.contains(&y) && c.contains(&x)
            });
            assert_eq!(m.values[[y as usize, x as usize]], covered_by_other);
        }
    }
}

#[test]
fn problem_rows_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root, &[("ok", "NV"), ("nomask", "MEL"), ("other", "VASC"), ("broken", "BKL")]);
    write_image(root, "ok");
    write_masks(root, "ok", None);
    write_image(root, "nomask");
    std::fs::write(root.join("images/broken.jpg"), b"not a jpeg").unwrap();
    let mut samples = load_dataset(root, &ClassSet::default(), shape()).unwrap();
    samples.sort_by(|x, y| x.id.cmp(&y.id));
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, vec!["nomask", "ok"]);
    assert!(samples[0].gt_mask.is_none());
    let fb = simulate_feedback(&samples[0]);
    assert_eq!(fb.corrected_label, Some(0));
    assert!(fb.corrected_mask.is_none());
    assert_eq!(fb.source, FeedbackSource::Simulated);
}

#[test]
fn empty_or_missing_dataset_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dataset(dir.path(), &ClassSet::default(), shape()),
        Err(Error::Dataset { .. })
    ));
    fixture(dir.path(), &[("gone", "MEL")]);
    assert!(matches!(
        load_dataset(dir.path(), &ClassSet::default(), shape()),
        Err(Error::Dataset { .. })
    ));
}

#[test]
fn synthetic_round_trip_through_layout() {
    let data = generate_synthetic_dataset(30, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, &ClassSet::default()).unwrap();
    let mut back = load_dataset(dir.path(), &ClassSet::default(), input_shape()).unwrap();
    back.sort_by(|x, y| x.id.cmp(&y.id));
    assert_eq!(back.len(), 30);
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        // masks are lossless, images go through JPEG
        assert_eq!(a.gt_mask, b.gt_mask);
        let err = (&a.image - &b.image).mapv(f64::abs).mean().unwrap();
        assert!(err < 0.1, "mean abs error {err}");
    }
}
