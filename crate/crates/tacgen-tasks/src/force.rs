//! Force estimation: a patch-transformer encoder with a 3-component
//! regression head, plus an auxiliary per-token depth decoder that only
//! oracle frames (which carry ground-truth depth) supervise.

use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use tacgen_core::rng::tagged_rng;
use tacgen_core::{ForceVector, TactileImage};
use tacgen_diffusion::embed::patchify;
use tacgen_diffusion::net::Params;
use tacgen_nn::init::linear_init;
use tacgen_nn::{AdamW, ParamStore, Tape};

use crate::data::{check_input_dims, image_to_input, TaskItem};
use crate::error::{Result, TaskError};
use crate::weights::{EstimatorMeta, EstimatorTrainConfig, EstimatorWeights, TaskTag};

/// Forces are regressed in units of this scale to keep the head near unity.
pub const FORCE_SCALE: f64 = 10.0;

fn force_target(f: ForceVector) -> ArrayD<f64> {
    ndarray::arr2(&[[f.fx / FORCE_SCALE, f.fy / FORCE_SCALE, f.fz / FORCE_SCALE]]).into_dyn()
}

fn height_tokens(height: &Array2<f64>, patch: usize) -> ArrayD<f64> {
    let chw = height.clone().insert_axis(Axis(0));
    patchify(&chw, patch).into_dyn()
}

/// Trains on every item; items with a depth target additionally supervise
/// the decoder with weight `lambda_aux`.
pub fn train_force_estimator(
    items: &[TaskItem],
    config: &EstimatorTrainConfig,
    seed: u64,
) -> Result<EstimatorWeights> {
    if items.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    config.vit.validate()?;
    let (h, w) = (items[0].image.height(), items[0].image.width());
    config.vit.check_image(h, w)?;
    for it in items {
        check_input_dims((h, w), &it.image)?;
    }

    let mut store = ParamStore::new();
    let mut rng = tagged_rng(seed, "force.init", 0);
    crate::vit::init_vit(&mut store, "fe.enc", &config.vit, 3, &mut rng);
    {
        let (hw, hb) = linear_init(&mut rng, config.vit.dim, 3);
        store.add("fe.head.w", hw);
        store.add("fe.head.b", hb);
    }
    if config.lambda_aux > 0.0 {
        let out = config.vit.patch * config.vit.patch;
        let (dw, db) = linear_init(&mut rng, config.vit.dim, out);
        store.add("fe.dec.w", dw);
        store.add("fe.dec.b", db);
    }

    let mut opt = AdamW::new(&store, config.lr_start, config.weight_decay);
    for step in 0..config.steps {
        let mut srng = tagged_rng(seed, "force.step", step as u64);
        let mut tape = Tape::new();
        let loss = {
            let p = Params::trainable(&store);
            let mut acc = None;
            for _ in 0..config.batch {
                let item = &items[srng.random_range(0..items.len())];
                let input = image_to_input(&item.image);
                let tokens = crate::vit::vit_tokens(&mut tape, &p, "fe.enc", &config.vit, &input);
                let pooled = tape.mean_rows(tokens);
                let pred = p.linear(&mut tape, "fe.head", pooled);
                let mut l = tape.l1_loss(pred, &force_target(item.force), None);
                if config.lambda_aux > 0.0 {
                    if let Some(height) = &item.height {
                        let dec = p.linear(&mut tape, "fe.dec", tokens);
                        let target = height_tokens(height, config.vit.patch);
                        let aux = tape.mse_loss(dec, &target, None);
                        l = tape.add_scaled(l, aux, 1.0, config.lambda_aux);
                    }
                }
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l),
                });
            }
            tape.scale(acc.expect("batch nonempty"), 1.0 / config.batch as f64)
        };
        let grads = tape.backward(loss, store.len());
        opt.lr = tacgen_nn::cosine_lr(step as u64, config.steps as u64, config.lr_start, config.lr_end);
        opt.step(&mut store, &grads);
    }

    Ok(EstimatorWeights::new(
        store,
        EstimatorMeta {
            task: TaskTag::Force,
            input: (h, w),
            vit: Some(config.vit),
            classes: vec![],
            symmetry_deg: 0.0,
            circular: false,
            lambda_aux: config.lambda_aux,
        },
    ))
}

pub fn predict_force(weights: &EstimatorWeights, image: &TactileImage) -> Result<ForceVector> {
    weights.expect_task(TaskTag::Force)?;
    check_input_dims(weights.meta.input, image)?;
    let vit = weights.meta.vit.ok_or_else(|| TaskError::Invalid("missing encoder config".into()))?;
    let mut tape = Tape::new();
    let p = Params::frozen(&weights.store);
    let input = image_to_input(image);
    let pooled = crate::vit::vit_pooled(&mut tape, &p, "fe.enc", &vit, &input);
    let pred = p.linear(&mut tape, "fe.head", pooled);
    let row = tape.value(pred);
    let f = ForceVector::new(
        row[[0, 0]] * FORCE_SCALE,
        row[[0, 1]] * FORCE_SCALE,
        row[[0, 2]] * FORCE_SCALE,
    );
    if !(f.fx.is_finite() && f.fy.is_finite() && f.fz.is_finite()) {
        return Err(TaskError::Invalid("force prediction is not finite".into()));
    }
    Ok(f)
}

/// Mean absolute error over all three components, in newtons.
pub fn force_mae(weights: &EstimatorWeights, items: &[TaskItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    let mut acc = 0.0;
    for it in items {
        let p = predict_force(weights, &it.image)?;
        acc += ((p.fx - it.force.fx).abs() + (p.fy - it.force.fy).abs() + (p.fz - it.force.fz).abs()) / 3.0;
    }
    Ok(acc / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;
    use tacgen_core::{ContactPose, ObjectSymmetry, Provenance};

    fn tiny_config() -> EstimatorTrainConfig {
        EstimatorTrainConfig {
            steps: 30,
            batch: 4,
            vit: VitConfig { patch: 8, depth: 1, dim: 16, heads: 2 },
            ..EstimatorTrainConfig::default()
        }
    }

    fn item(fz: f64, seed: u64, with_height: bool) -> TaskItem {
        let mut rng = tagged_rng(seed, "force.test", 0);
        let mut raw = ndarray::Array3::<f64>::from_shape_fn((16, 16, 3), |_| rng.random_range(0.0..1.0));
        // Brightness tracks force so the toy task is learnable.
        raw.mapv_inplace(|v| (v * fz / 10.0).clamp(0.0, 1.0));
        TaskItem {
            image: TactileImage::from_f64(&raw),
            force: ForceVector::new(0.0, 0.0, fz),
            pose: ContactPose::new(8.0, 8.0, 0.0),
            symmetry: ObjectSymmetry::ASYMMETRIC,
            object_id: "obj".into(),
            provenance: if with_height { Provenance::Synthetic } else { Provenance::Generated },
            height: with_height.then(|| Array2::from_elem((16, 16), fz / 10.0)),
            mask: None,
        }
    }

    #[test]
    fn training_is_reproducible_and_predicts_finitely() {
        let items: Vec<TaskItem> = (0..8).map(|i| item(1.0 + i as f64, i as u64, i % 2 == 0)).collect();
        let a = train_force_estimator(&items, &tiny_config(), 5).unwrap();
        let b = train_force_estimator(&items, &tiny_config(), 5).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let pred = predict_force(&a, &items[0].image).unwrap();
        let again = predict_force(&a, &items[0].image).unwrap();
        assert_eq!(pred.to_array(), again.to_array());
    }

    #[test]
    fn lambda_zero_trains_without_heights() {
        let items: Vec<TaskItem> = (0..6).map(|i| item(2.0 + i as f64, i as u64, false)).collect();
        let config = EstimatorTrainConfig { lambda_aux: 0.0, ..tiny_config() };
        let w = train_force_estimator(&items, &config, 1).unwrap();
        assert!(w.store.id_of("fe.dec.w").is_none(), "decoder absent when disabled");
        assert!(predict_force(&w, &items[0].image).is_ok());
    }

    #[test]
    fn learns_a_brightness_force_toy_problem() {
        let items: Vec<TaskItem> =
            (0..24).map(|i| item(1.0 + (i % 8) as f64, i as u64, false)).collect();
        let config = EstimatorTrainConfig { steps: 300, lambda_aux: 0.0, ..tiny_config() };
        let w = train_force_estimator(&items, &config, 9).unwrap();
        let mae = force_mae(&w, &items).unwrap();
        assert!(mae < 1.0, "toy training should fit closely, got MAE {mae}");
    }

    #[test]
    fn task_tag_and_shape_are_enforced() {
        let items: Vec<TaskItem> = (0..4).map(|i| item(3.0, i as u64, false)).collect();
        let config = EstimatorTrainConfig { steps: 2, lambda_aux: 0.0, ..tiny_config() };
        let w = train_force_estimator(&items, &config, 2).unwrap();
        let wrong = TactileImage::zeros(8, 8);
        assert!(matches!(predict_force(&w, &wrong), Err(TaskError::InputShape { .. })));
    }
}
