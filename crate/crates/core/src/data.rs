//! Datasets, ground-truth explanation masks and simulated feedback.
//!
//! On-disk layout (shared by real and synthetic data):
//!
//! ```text
//! root/
//!   labels.csv                        id,label
//!   images/<id>.jpg
//!   masks/<id>_attribute_<name>.png   8-bit, 0 = background, 255 = attribute
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{error, warn};

use crate::error::{input, Error, Result};
use crate::explainer::{ExplanationMask, MaskOrigin};
use crate::model::InputShape;
use crate::Image;

/// The five lesion attributes whose union forms the ground-truth explanation.
pub const ATTRIBUTES: [&str; 5] = [
    "pigment_network",
    "negative_network",
    "streaks",
    "milia_like_cyst",
    "globules",
];

/// Ordered class names; a sample's label is an index into this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    names: Vec<String>,
}

impl Default for ClassSet {
    fn default() -> Self {
        Self::new(["MEL", "NV", "BKL"])
    }
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    /// Ground-truth explanation at image resolution.
    pub gt_mask: Option<ExplanationMask>,
    /// Id of the sample this one was copied from during balancing.
    pub duplicate_of: Option<String>,
}

impl ImageSample {
    /// The id of the original image, following a duplication link.
    pub fn original_id(&self) -> &str {
        self.duplicate_of.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Simulated,
    Human,
}

/// A correction of the predicted label, of the explanation mask, or of both.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackRecord {
    pub sample_id: String,
    pub corrected_label: Option<usize>,
    /// At image resolution.
    pub corrected_mask: Option<ExplanationMask>,
    pub source: FeedbackSource,
    /// Unix seconds.
    pub created_at: u64,
}

impl FeedbackRecord {
    pub fn new(
        sample_id: impl Into<String>,
        corrected_label: Option<usize>,
        corrected_mask: Option<ExplanationMask>,
        source: FeedbackSource,
    ) -> Result<Self> {
        if corrected_label.is_none() && corrected_mask.is_none() {
            return input("feedback must correct the label, the mask, or both");
        }
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            sample_id: sample_id.into(),
            corrected_label,
            corrected_mask,
            source,
            created_at,
        })
    }
}

/// A sample paired with the correction a user gave for it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackExample {
    pub sample: ImageSample,
    pub feedback: FeedbackRecord,
}

impl FeedbackExample {
    pub fn simulated(sample: ImageSample) -> Self {
        let feedback = simulate_feedback(&sample);
        Self { sample, feedback }
    }
}

/// Feedback taken from ground truth: the true label plus the union mask when
/// the sample has one.
pub fn simulate_feedback(sample: &ImageSample) -> FeedbackRecord {
    FeedbackRecord {
        sample_id: sample.id.clone(),
        corrected_label: Some(sample.label),
        corrected_mask: sample.gt_mask.clone().map(|mut m| {
            m.origin = MaskOrigin::GroundTruth;
            m
        }),
        source: FeedbackSource::Simulated,
        created_at: 0,
    }
}

/// Pixelwise OR.
pub fn union_masks(masks: &[ExplanationMask]) -> Result<ExplanationMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Input("no masks to combine".into()))?;
    let mut out = first.values.clone();
    for m in &masks[1..] {
        if m.resolution() != first.resolution() {
            return input(format!(
                "mask resolutions differ: {:?} vs {:?}",
                first.resolution(),
                m.resolution()
            ));
        }
        out.zip_mut_with(&m.values, |a, &b| *a |= b);
    }
    Ok(ExplanationMask::new(out, MaskOrigin::GroundTruth))
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    id: String,
    label: String,
}

/// Loads a dataset in the layout above, resizing images bilinearly and masks
/// by nearest neighbour to the model's input size.
///
/// A missing attribute file counts as an empty attribute. A sample without any
/// attribute file has no ground-truth mask. Unreadable images are skipped.
pub fn load_dataset(
    root: impl AsRef<Path>,
    classes: &ClassSet,
    input_shape: InputShape,
) -> Result<Vec<ImageSample>> {
    let root = root.as_ref();
    let labels_path = root.join("labels.csv");
    let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| Error::Dataset {
        path: labels_path.clone(),
        reason: e.to_string(),
    })?;
    let rows: Vec<LabelRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset {
            path: labels_path.clone(),
            reason: e.to_string(),
        })?;

    let samples: Vec<ImageSample> = rows
        .par_iter()
        .filter_map(|row| {
            let Some(label) = classes.index_of(&row.label) else {
                warn!(id = %row.id, label = %row.label, "label not in class set, skipping");
                return None;
            };
            match load_sample(root, &row.id, label, input_shape) {
                Ok(s) => Some(s),
                Err(e) => {
                    error!(id = %row.id, error = %e, "skipping unreadable sample");
                    None
                }
            }
        })
        .collect();

    if samples.is_empty() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            reason: "no usable samples".into(),
        });
    }
    Ok(samples)
}

/// Resizes bilinearly to `shape` and scales pixel values to `[0, 1]`.
pub fn image_to_input(raw: &image::DynamicImage, shape: InputShape) -> Result<Image> {
    let resized = raw.resize_exact(shape.width as u32, shape.height as u32, FilterType::Triangle);
    match shape.channels {
        1 => {
            let g = resized.to_luma8();
            Ok(Array3::from_shape_fn((shape.height, shape.width, 1), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            }))
        }
        3 => {
            let rgb = resized.to_rgb8();
            Ok(Array3::from_shape_fn((shape.height, shape.width, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            }))
        }
        c => input(format!("unsupported channel count {c}")),
    }
}

/// Decodes an encoded image (PNG, JPEG) into model input.
pub fn decode_image(bytes: &[u8], shape: InputShape) -> Result<Image> {
    image_to_input(&image::load_from_memory(bytes)?, shape)
}

fn load_sample(root: &Path, id: &str, label: usize, shape: InputShape) -> Result<ImageSample> {
    let (w, h) = (shape.width as u32, shape.height as u32);
    let image = image_to_input(&image::open(root.join("images").join(format!("{id}.jpg")))?, shape)?;

    let mut masks = Vec::new();
    let mut missing = Vec::new();
    for name in ATTRIBUTES {
        let path = root.join("masks").join(format!("{id}_attribute_{name}.png"));
        if !path.exists() {
            missing.push(name);
            continue;
        }
        let gray = image::open(&path)?.to_luma8();
        let gray = image::imageops::resize(&gray, w, h, FilterType::Nearest);
        masks.push(ExplanationMask::from_gray_image(&gray, MaskOrigin::GroundTruth));
    }
    let gt_mask = if masks.is_empty() {
        warn!(id, "no attribute masks found");
        None
    } else {
        if !missing.is_empty() {
            warn!(id, ?missing, "attribute masks missing, treated as empty");
        }
        Some(union_masks(&masks)?)
    };
    Ok(ImageSample {
        id: id.to_string(),
        image,
        label,
        gt_mask,
        duplicate_of: None,
    })
}

/// Writes samples in the dataset layout. The ground-truth mask is stored as
/// the `pigment_network` attribute; the other attributes are written empty.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[ImageSample], classes: &ClassSet) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut writer = csv::Writer::from_path(root.join("labels.csv"))?;
    for s in samples {
        writer.serialize(LabelRow {
            id: s.id.clone(),
            label: classes.name(s.label).to_string(),
        })?;
    }
    writer.flush()?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let (h, w, c) = s.image.dim();
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| to_u8(s.image[[y as usize, x as usize, ch.min(c - 1)]]);
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(root.join("images").join(format!("{}.jpg", s.id)))?;
        if let Some(mask) = &s.gt_mask {
            for (i, name) in ATTRIBUTES.iter().enumerate() {
                let m = if i == 0 {
                    mask.clone()
                } else {
                    ExplanationMask::zeros(mask.resolution(), MaskOrigin::GroundTruth)
                };
                m.save_png(root.join("masks").join(format!("{}_attribute_{name}.png", s.id)))?;
            }
        }
        Ok(())
    })
}

/// Copies random members of every minority class until each class matches
/// the largest one. Originals keep their order; copies are appended and
/// carry `duplicate_of`.
pub fn balance_by_upsampling(samples: &[ImageSample], seed: u64) -> Vec<ImageSample> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = samples.to_vec();
    for members in by_class.values() {
        for k in 0..target - members.len() {
            let src = &samples[members[rng.random_range(0..members.len())]];
            let original = src.original_id().to_string();
            out.push(ImageSample {
                id: format!("{original}#dup{k}"),
                duplicate_of: Some(original),
                ..src.clone()
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub pool: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            pool: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Split the originals, then upsample only the fine-tuning pool.
    #[default]
    LeakageSafe,
    /// Upsample everything, then split; copies of one image may land in
    /// different splits.
    Fidelity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub pool: Vec<ImageSample>,
    pub validation: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Partitions samples into fine-tuning pool, validation and test sets.
pub fn split(
    samples: &[ImageSample],
    fractions: SplitFractions,
    seed: u64,
    mode: SplitMode,
) -> Result<Splits> {
    let SplitFractions {
        pool,
        validation,
        test,
    } = fractions;
    if [pool, validation, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (pool + validation + test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {pool}/{validation}/{test} must be in [0, 1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = |n: usize| {
        let n_test = (n as f64 * test).round() as usize;
        let n_val = ((n as f64 * validation).round() as usize).min(n - n_test);
        (n_test, n_val)
    };

    match mode {
        SplitMode::Fidelity => {
            let mut all = balance_by_upsampling(samples, seed);
            all.shuffle(&mut rng);
            let (n_test, n_val) = cut(all.len());
            let pool = all.split_off(n_test + n_val);
            let validation = all.split_off(n_test);
            Ok(Splits {
                pool,
                validation,
                test: all,
            })
        }
        SplitMode::LeakageSafe => {
            // group by original so a duplicate chain never straddles splits
            let mut order: Vec<&str> = Vec::new();
            let mut groups: HashMap<&str, Vec<&ImageSample>> = HashMap::new();
            for s in samples {
                let key = s.original_id();
                if !groups.contains_key(key) {
                    order.push(key);
                }
                groups.entry(key).or_default().push(s);
            }
            order.shuffle(&mut rng);
            let (n_test, n_val) = cut(order.len());
            let take = |keys: &[&str]| -> Vec<ImageSample> {
                keys.iter()
                    .flat_map(|k| groups[k].iter().map(|s| (*s).clone()))
                    .collect()
            };
            let test_set = take(&order[..n_test]);
            let val_set = take(&order[n_test..n_test + n_val]);
            let pool_set = balance_by_upsampling(&take(&order[n_test + n_val..]), seed);
            let classes: HashSet<usize> = samples.iter().map(|s| s.label).collect();
            for (name, part) in [("pool", &pool_set), ("validation", &val_set), ("test", &test_set)] {
                let present: HashSet<usize> = part.iter().map(|s| s.label).collect();
                for c in classes.difference(&present) {
                    warn!(split = name, class = c, "class absent from split");
                }
            }
            Ok(Splits {
                pool: pool_set,
                validation: val_set,
                test: test_set,
            })
        }
    }
}

/// Disjoint, near-equal chunks of the fine-tuning pool, in training order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSchedule {
    pub slices: Vec<Vec<String>>,
}

impl SliceSchedule {
    pub fn sizes(&self) -> Vec<usize> {
        self.slices.iter().map(Vec::len).collect()
    }

    /// Resolves ids back to samples from `pool`.
    pub fn materialize<'a>(&self, pool: &'a [ImageSample]) -> Vec<Vec<&'a ImageSample>> {
        let index: HashMap<&str, &ImageSample> = pool.iter().map(|s| (s.id.as_str(), s)).collect();
        self.slices
            .iter()
            .map(|ids| ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect())
            .collect()
    }
}

/// Shuffles the pool and deals it into `n_slices` chunks; the first
/// `len % n_slices` chunks get one extra member.
pub fn make_slices(pool_ids: &[String], n_slices: usize, seed: u64) -> Result<SliceSchedule> {
    if n_slices == 0 {
        return input("number of slices must be positive");
    }
    if n_slices > pool_ids.len() {
        return input(format!(
            "{n_slices} slices requested from a pool of {}",
            pool_ids.len()
        ));
    }
    let mut ids = pool_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / n_slices;
    let extra = ids.len() % n_slices;
    let mut rest = ids.into_iter();
    let slices = (0..n_slices)
        .map(|i| rest.by_ref().take(base + usize::from(i < extra)).collect())
        .collect();
    Ok(SliceSchedule { slices })
}
