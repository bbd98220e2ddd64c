//! Loading manifest samples into memory for estimator training. Images stay
//! quantized until batch assembly so multi-thousand-sample sets fit easily.

use ndarray::{Array2, Array3};
use tacgen_core::{ContactPose, ForceVector, Manifest, ObjectSymmetry, Provenance, Split, TactileImage};

use crate::error::{Result, TaskError};

/// One training example with every label the three estimator families use.
#[derive(Debug, Clone)]
pub struct TaskItem {
    pub image: TactileImage,
    pub force: ForceVector,
    pub pose: ContactPose,
    pub symmetry: ObjectSymmetry,
    pub object_id: String,
    pub provenance: Provenance,
    /// Depth target in scale-normalized units, present on oracle frames only.
    pub height: Option<Array2<f64>>,
    /// Contact-mask target in {0, 1}, present whenever the record has a mask.
    pub mask: Option<Array2<f64>>,
}

/// Loads one split of a manifest. `with_aux` controls whether height and
/// mask targets are read (estimator auxiliary decoders need them; classifiers
/// do not, and skipping the reads keeps classifier set-up fast).
pub fn load_task_items(manifest: &Manifest, split: Split, with_aux: bool) -> Result<Vec<TaskItem>> {
    let mut items = Vec::new();
    for record in manifest.split_samples(split) {
        let image = manifest.load_image(record)?;
        let height = if with_aux {
            manifest.load_height(record)?.map(|hm| {
                hm.depth_mm().mapv(|d| d / tacgen_core::height::HEIGHT_SCALE_MM)
            })
        } else {
            None
        };
        let mask = if with_aux {
            Some(manifest.load_mask(record)?.to_f64())
        } else {
            None
        };
        items.push(TaskItem {
            image,
            force: record.force,
            pose: record.pose,
            symmetry: manifest.symmetry_of(&record.object_id),
            object_id: record.object_id.clone(),
            provenance: record.provenance,
            height,
            mask,
        });
    }
    Ok(items)
}

/// Sorted distinct object ids; the classifier's label space.
pub fn class_vocab(items: &[TaskItem]) -> Vec<String> {
    let mut v: Vec<String> = items.iter().map(|i| i.object_id.clone()).collect();
    v.sort();
    v.dedup();
    v
}

pub fn class_index(classes: &[String], object_id: &str) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == object_id)
        .ok_or_else(|| TaskError::Invalid(format!("object {object_id} is not in the class vocabulary")))
}

/// Network input layout: channels-first, values centred to `[-0.5, 0.5]`.
pub fn image_to_input(img: &TactileImage) -> Array3<f64> {
    let hwc = img.to_f64();
    let (h, w) = (img.height(), img.width());
    Array3::from_shape_fn((3, h, w), |(c, y, x)| hwc[[y, x, c]] - 0.5)
}

pub fn check_input_dims(expected: (usize, usize), img: &TactileImage) -> Result<()> {
    if img.height() != expected.0 || img.width() != expected.1 {
        return Err(TaskError::InputShape {
            h: expected.0,
            w: expected.1,
            actual_h: img.height(),
            actual_w: img.width(),
        });
    }
    Ok(())
}
