use saliencytune::synthetic::{generate_synthetic_dataset, texture, NUM_CLASSES};

/// Correlates the marker region with each class texture after removing
/// brightness and tint; picks the best match.
fn template_match(s: &saliencytune::data::ImageSample) -> usize {
    let mask = s.gt_mask.as_ref().unwrap();
    let cells: Vec<(usize, usize)> = mask
        .values
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|(p, _)| p)
        .collect();
    let top = cells.iter().map(|p| p.0).min().unwrap();
    let left = cells.iter().map(|p| p.1).min().unwrap();
    let gray = |y: usize, x: usize| (0..3).map(|c| s.image[[y, x, c]]).sum::<f64>() / 3.0;
    let mean = cells.iter().map(|&(y, x)| gray(y, x)).sum::<f64>() / cells.len() as f64;
    (0..NUM_CLASSES)
        .map(|c| {
            let score: f64 = cells
                .iter()
                .map(|&(y, x)| (gray(y, x) - mean) * (texture(c, y - top, x - left) - 0.5))
                .sum();
            (c, score)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn marker_alone_determines_the_class() {
    let data = generate_synthetic_dataset(600, 42).unwrap();
    let correct = data.iter().filter(|s| template_match(s) == s.label).count();
    let rate = correct as f64 / data.len() as f64;
    assert!(rate >= 0.95, "template matching accuracy {rate}");
}
