//! Contact-pose estimation: centre in pixels plus an in-plane angle, with
//! the auxiliary decoder supervised by the contact mask instead of depth.
//! The angle target is stretched by the object's rotational symmetry so one
//! full turn of the head's circular code spans exactly one symmetry period;
//! equivalent poses then share a target and the wrap-around is seamless.

use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use tacgen_core::rng::tagged_rng;
use tacgen_core::{ContactPose, ObjectSymmetry, TactileImage};
use tacgen_diffusion::embed::patchify;
use tacgen_diffusion::net::Params;
use tacgen_nn::init::linear_init;
use tacgen_nn::{AdamW, ParamStore, Tape};

use crate::data::{check_input_dims, image_to_input, TaskItem};
use crate::error::{Result, TaskError};
use crate::weights::{EstimatorMeta, EstimatorTrainConfig, EstimatorWeights, TaskTag};

/// Relative pressure on the angle terms of the loss; the centre terms carry
/// the frame dimensions as weights so they read in pixels.
const ANGLE_WEIGHT: f64 = 30.0;

/// Angle encoding: circular (sin, cos) by default, raw scaled degrees kept
/// for comparison runs.
#[derive(Debug, Clone)]
pub struct PoseTrainConfig {
    pub base: EstimatorTrainConfig,
    pub circular: bool,
}

impl Default for PoseTrainConfig {
    fn default() -> Self {
        Self { base: EstimatorTrainConfig::default(), circular: true }
    }
}

fn stretched_angle_deg(pose: &ContactPose, sym: ObjectSymmetry) -> Option<f64> {
    if sym.period_deg <= 0.0 {
        return None;
    }
    let canonical = sym.canonicalize(pose.theta_deg);
    Some(canonical * 360.0 / sym.period_deg)
}

fn pose_target(
    pose: &ContactPose,
    sym: ObjectSymmetry,
    w: usize,
    h: usize,
    circular: bool,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let cxn = pose.cx / w as f64 - 0.5;
    let cyn = pose.cy / h as f64 - 0.5;
    let phi = stretched_angle_deg(pose, sym);
    let aw = if phi.is_some() { ANGLE_WEIGHT } else { 0.0 };
    let phi = phi.unwrap_or(0.0).to_radians();
    if circular {
        (
            ndarray::arr2(&[[cxn, cyn, phi.sin(), phi.cos()]]).into_dyn(),
            ndarray::arr2(&[[w as f64, h as f64, aw, aw]]).into_dyn(),
        )
    } else {
        (
            ndarray::arr2(&[[cxn, cyn, phi.to_degrees() / 360.0]]).into_dyn(),
            ndarray::arr2(&[[w as f64, h as f64, aw]]).into_dyn(),
        )
    }
}

fn mask_tokens(mask: &Array2<f64>, patch: usize) -> ArrayD<f64> {
    let chw = mask.clone().insert_axis(Axis(0));
    patchify(&chw, patch).into_dyn()
}

/// Trains a per-object pose regressor. All items must share one symmetry
/// period (pose estimators are object-specific).
pub fn train_pose_estimator(
    items: &[TaskItem],
    config: &PoseTrainConfig,
    seed: u64,
) -> Result<EstimatorWeights> {
    if items.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    config.base.vit.validate()?;
    let (h, w) = (items[0].image.height(), items[0].image.width());
    config.base.vit.check_image(h, w)?;
    let sym = items[0].symmetry;
    for it in items {
        check_input_dims((h, w), &it.image)?;
        if (it.symmetry.period_deg - sym.period_deg).abs() > 1e-9 {
            return Err(TaskError::Invalid(
                "pose estimator needs a single symmetry period across the dataset".into(),
            ));
        }
    }

    let head_out = if config.circular { 4 } else { 3 };
    let mut store = ParamStore::new();
    let mut rng = tagged_rng(seed, "pose.init", 0);
    crate::vit::init_vit(&mut store, "pe.enc", &config.base.vit, 3, &mut rng);
    {
        let (hw, hb) = linear_init(&mut rng, config.base.vit.dim, head_out);
        store.add("pe.head.w", hw);
        store.add("pe.head.b", hb);
    }
    if config.base.lambda_aux > 0.0 {
        let out = config.base.vit.patch * config.base.vit.patch;
        let (dw, db) = linear_init(&mut rng, config.base.vit.dim, out);
        store.add("pe.dec.w", dw);
        store.add("pe.dec.b", db);
    }

    let mut opt = AdamW::new(&store, config.base.lr_start, config.base.weight_decay);
    for step in 0..config.base.steps {
        let mut srng = tagged_rng(seed, "pose.step", step as u64);
        let mut tape = Tape::new();
        let loss = {
            let p = Params::trainable(&store);
            let mut acc = None;
            for _ in 0..config.base.batch {
                let item = &items[srng.random_range(0..items.len())];
                let input = image_to_input(&item.image);
                let tokens =
                    crate::vit::vit_tokens(&mut tape, &p, "pe.enc", &config.base.vit, &input);
                let pooled = tape.mean_rows(tokens);
                let pred = p.linear(&mut tape, "pe.head", pooled);
                let (target, weight) = pose_target(&item.pose, sym, w, h, config.circular);
                let mut l = tape.l1_loss(pred, &target, Some(&weight));
                if config.base.lambda_aux > 0.0 {
                    if let Some(mask) = &item.mask {
                        let dec = p.linear(&mut tape, "pe.dec", tokens);
                        let target = mask_tokens(mask, config.base.vit.patch);
                        let aux = tape.mse_loss(dec, &target, None);
                        l = tape.add_scaled(l, aux, 1.0, config.base.lambda_aux);
                    }
                }
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l),
                });
            }
            tape.scale(acc.expect("batch nonempty"), 1.0 / config.base.batch as f64)
        };
        let grads = tape.backward(loss, store.len());
        opt.lr = tacgen_nn::cosine_lr(
            step as u64,
            config.base.steps as u64,
            config.base.lr_start,
            config.base.lr_end,
        );
        opt.step(&mut store, &grads);
    }

    Ok(EstimatorWeights::new(
        store,
        EstimatorMeta {
            task: TaskTag::Pose,
            input: (h, w),
            vit: Some(config.base.vit),
            classes: vec![],
            symmetry_deg: sym.period_deg,
            circular: config.circular,
            lambda_aux: config.base.lambda_aux,
        },
    ))
}

pub fn predict_pose(weights: &EstimatorWeights, image: &TactileImage) -> Result<ContactPose> {
    weights.expect_task(TaskTag::Pose)?;
    check_input_dims(weights.meta.input, image)?;
    let vit = weights.meta.vit.ok_or_else(|| TaskError::Invalid("missing encoder config".into()))?;
    let (h, w) = weights.meta.input;
    let sym = ObjectSymmetry { period_deg: weights.meta.symmetry_deg };
    let mut tape = Tape::new();
    let p = Params::frozen(&weights.store);
    let input = image_to_input(image);
    let pooled = crate::vit::vit_pooled(&mut tape, &p, "pe.enc", &vit, &input);
    let pred = p.linear(&mut tape, "pe.head", pooled);
    let row = tape.value(pred);
    let cx = (row[[0, 0]] + 0.5) * w as f64;
    let cy = (row[[0, 1]] + 0.5) * h as f64;
    let phi_deg = if weights.meta.circular {
        // Head columns are (sin, cos); atan2 takes the sine first.
        row[[0, 2]].atan2(row[[0, 3]]).to_degrees().rem_euclid(360.0)
    } else {
        (row[[0, 2]] * 360.0).rem_euclid(360.0)
    };
    let theta = if sym.period_deg > 0.0 {
        sym.canonicalize(phi_deg * sym.period_deg / 360.0)
    } else {
        0.0
    };
    Ok(ContactPose::new(cx, cy, theta))
}

/// Mean centre error (px, Euclidean) and mean angle error (degrees, modulo
/// the symmetry period) over a labelled set.
pub fn pose_errors(weights: &EstimatorWeights, items: &[TaskItem]) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    let sym = ObjectSymmetry { period_deg: weights.meta.symmetry_deg };
    let mut centre = 0.0;
    let mut angle = 0.0;
    for it in items {
        let p = predict_pose(weights, &it.image)?;
        centre += ((p.cx - it.pose.cx).powi(2) + (p.cy - it.pose.cy).powi(2)).sqrt();
        angle += sym.angle_error_deg(p.theta_deg, it.pose.theta_deg);
    }
    let n = items.len() as f64;
    Ok((centre / n, angle / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;
    use tacgen_core::{ForceVector, Provenance};

    fn tiny_config(steps: usize) -> PoseTrainConfig {
        PoseTrainConfig {
            base: EstimatorTrainConfig {
                steps,
                batch: 4,
                lambda_aux: 0.0,
                vit: VitConfig { patch: 8, depth: 1, dim: 16, heads: 2 },
                ..EstimatorTrainConfig::default()
            },
            circular: true,
        }
    }

    fn blob_item(cx: usize, cy: usize, theta: f64, sym: ObjectSymmetry) -> TaskItem {
        let mut raw = ndarray::Array3::<f64>::zeros((16, 16, 3));
        for dy in 0..3 {
            for dx in 0..3 {
                let (y, x) = (cy + dy - 1, cx + dx - 1);
                raw[[y, x, 0]] = 1.0;
                raw[[y, x, 1]] = 0.5 + theta / 720.0;
            }
        }
        TaskItem {
            image: TactileImage::from_f64(&raw),
            force: ForceVector::new(0.0, 0.0, 5.0),
            pose: ContactPose::new(cx as f64, cy as f64, sym.canonicalize(theta)),
            symmetry: sym,
            object_id: "obj".into(),
            provenance: Provenance::Generated,
            height: None,
            mask: Some(Array2::zeros((16, 16))),
        }
    }

    #[test]
    fn angle_stretching_maps_period_onto_full_turn() {
        let sym = ObjectSymmetry::FOUR_FOLD;
        let a = stretched_angle_deg(&ContactPose::new(0.0, 0.0, 0.0), sym).unwrap();
        let b = stretched_angle_deg(&ContactPose::new(0.0, 0.0, 45.0), sym).unwrap();
        let c = stretched_angle_deg(&ContactPose::new(0.0, 0.0, 90.0), sym).unwrap();
        assert!((a - 0.0).abs() < 1e-9);
        assert!((b - 180.0).abs() < 1e-9);
        // One period wraps back to the start of the circular code.
        assert!((c - 0.0).abs() < 1e-9);
        assert!(stretched_angle_deg(
            &ContactPose::new(0.0, 0.0, 10.0),
            ObjectSymmetry::ROTATION_INVARIANT
        )
        .is_none());
    }

    #[test]
    fn degenerate_single_pose_collapses_predictions() {
        let items: Vec<TaskItem> =
            (0..6).map(|_| blob_item(8, 6, 30.0, ObjectSymmetry::ASYMMETRIC)).collect();
        let mut config = tiny_config(400);
        // The constant-target head must travel ~0.5 in output space and the
        // step size is roughly the learning rate, so keep it high here.
        config.base.lr_start = 5e-3;
        config.base.lr_end = 1e-3;
        let w = train_pose_estimator(&items, &config, 3).unwrap();
        let p = predict_pose(&w, &items[0].image).unwrap();
        assert!((p.cx - 8.0).abs() < 2.0, "cx {}", p.cx);
        assert!((p.cy - 6.0).abs() < 2.0, "cy {}", p.cy);
        let err = ObjectSymmetry::ASYMMETRIC.angle_error_deg(p.theta_deg, 30.0);
        assert!(err < 20.0, "angle error {err}");
    }

    #[test]
    fn mixed_symmetry_is_rejected_and_training_is_deterministic() {
        let mut items: Vec<TaskItem> = (0..4)
            .map(|i| blob_item(4 + 2 * i, 8, 0.0, ObjectSymmetry::TWO_FOLD))
            .collect();
        let a = train_pose_estimator(&items, &tiny_config(5), 7).unwrap();
        let b = train_pose_estimator(&items, &tiny_config(5), 7).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.meta.symmetry_deg, 180.0);
        items[2].symmetry = ObjectSymmetry::FOUR_FOLD;
        assert!(train_pose_estimator(&items, &tiny_config(5), 7).is_err());
    }

    #[test]
    fn raw_degree_mode_trains_with_a_three_wide_head() {
        let items: Vec<TaskItem> =
            (0..4).map(|i| blob_item(6, 6, 15.0 * i as f64, ObjectSymmetry::ASYMMETRIC)).collect();
        let config = PoseTrainConfig { circular: false, ..tiny_config(5) };
        let w = train_pose_estimator(&items, &config, 1).unwrap();
        assert_eq!(w.store.get(w.store.id_of("pe.head.w").unwrap()).shape(), &[16, 3]);
        assert!(predict_pose(&w, &items[0].image).is_ok());
    }

    #[test]
    fn rotation_invariant_objects_always_predict_zero_angle() {
        let items: Vec<TaskItem> =
            (0..4).map(|i| blob_item(6, 8, 90.0 * i as f64, ObjectSymmetry::ROTATION_INVARIANT)).collect();
        let w = train_pose_estimator(&items, &tiny_config(5), 2).unwrap();
        let p = predict_pose(&w, &items[1].image).unwrap();
        assert_eq!(p.theta_deg, 0.0);
    }
}
