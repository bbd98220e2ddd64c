//! Object classifiers: a four-block convolutional network (3→32→64→128→256,
//! each block conv 3x3 + batch norm + ReLU + 2x2 max pool, then 512-wide
//! fully connected with dropout) and a patch-transformer alternative.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tacgen_core::rng::tagged_rng;
use tacgen_core::TactileImage;
use tacgen_diffusion::net::Params;
use tacgen_nn::init::{conv_init, linear_init};
use tacgen_nn::{AdamW, NodeId, ParamStore, Tape};

use crate::data::{check_input_dims, class_index, class_vocab, image_to_input, TaskItem};
use crate::error::{Result, TaskError};
use crate::vit::VitConfig;
use crate::weights::{EstimatorMeta, EstimatorWeights, TaskTag};

const CONV_CHANNELS: [usize; 4] = [32, 64, 128, 256];
const FC_WIDTH: usize = 512;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Cnn,
    Vit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub vit: VitConfig,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            lr_start: 1e-3,
            lr_end: 1e-4,
            weight_decay: 1e-4,
            dropout: 0.5,
            vit: VitConfig::default(),
        }
    }
}

/// Width of the flattened feature map entering the first dense layer:
/// 256 channels at 1/16 the input resolution per axis (50,176 at 224,
/// 4,096 at 64).
pub fn cnn_flatten_width(input: usize) -> usize {
    256 * (input / 16) * (input / 16)
}

fn init_cnn(store: &mut ParamStore, input: usize, classes: usize, rng: &mut ChaCha8Rng) {
    let mut c_in = 3;
    for (i, &c_out) in CONV_CHANNELS.iter().enumerate() {
        let (w, b) = conv_init(rng, c_in, c_out, 3);
        store.add(&format!("cls.c{i}.w"), w);
        store.add(&format!("cls.c{i}.b"), b);
        store.add(&format!("cls.c{i}.g"), Array1::<f64>::ones(c_out));
        store.add(&format!("cls.c{i}.be"), Array1::<f64>::zeros(c_out));
        // Running statistics: saved with the weights, never optimized.
        store.add(&format!("cls.c{i}.rm"), Array1::<f64>::zeros(c_out));
        store.add(&format!("cls.c{i}.rv"), Array1::<f64>::ones(c_out));
        c_in = c_out;
    }
    let flat = cnn_flatten_width(input);
    let (w1, b1) = linear_init(rng, flat, FC_WIDTH);
    store.add("cls.fc1.w", w1);
    store.add("cls.fc1.b", b1);
    let (w2, b2) = linear_init(rng, FC_WIDTH, classes);
    store.add("cls.fc2.w", w2);
    store.add("cls.fc2.b", b2);
}

fn running_stat(store: &ParamStore, name: &str) -> Array1<f64> {
    let id = store.id_of(name).expect("running stat present");
    store
        .get(id)
        .to_owned()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("running stats are vectors")
}

enum CnnMode<'r> {
    Train { rng: &'r mut ChaCha8Rng, dropout: f64 },
    Eval,
}

/// Shared forward; in train mode returns the batch-norm nodes so the caller
/// can fold their batch statistics into the running averages.
fn cnn_forward(
    tape: &mut Tape,
    p: &Params,
    input: Array4<f64>,
    mode: &mut CnnMode,
) -> (NodeId, Vec<NodeId>) {
    let batch = input.shape()[0];
    let mut x = tape.constant(input);
    let mut bn_nodes = Vec::new();
    for i in 0..CONV_CHANNELS.len() {
        let w = p.node(tape, &format!("cls.c{i}.w"));
        let b = p.node(tape, &format!("cls.c{i}.b"));
        x = tape.conv2d(x, w, b, 1);
        let g = p.node(tape, &format!("cls.c{i}.g"));
        let be = p.node(tape, &format!("cls.c{i}.be"));
        x = match mode {
            CnnMode::Train { .. } => {
                let bn = tape.batch_norm_train(x, g, be);
                bn_nodes.push(bn);
                bn
            }
            CnnMode::Eval => {
                let rm = running_stat(p.store(), &format!("cls.c{i}.rm"));
                let rv = running_stat(p.store(), &format!("cls.c{i}.rv"));
                tape.batch_norm_eval(x, g, be, &rm, &rv)
            }
        };
        x = tape.relu(x);
        x = tape.max_pool2(x);
    }
    let flat = tape.value(x).len() / batch;
    let mut h = tape.reshape(x, &[batch, flat]);
    h = p.linear(tape, "cls.fc1", h);
    h = tape.relu(h);
    if let CnnMode::Train { rng, dropout } = mode {
        if *dropout > 0.0 {
            let keep = 1.0 - *dropout;
            let mask = Array2::from_shape_fn((1, FC_WIDTH), |_| {
                if rng.random_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let mask = tape.constant(mask);
            h = tape.mul_vec(h, mask);
        }
    }
    let logits = p.linear(tape, "cls.fc2", h);
    (logits, bn_nodes)
}

fn update_running_stats(store: &mut ParamStore, stats: &[(Array1<f64>, Array1<f64>)]) {
    for (i, (mean, var)) in stats.iter().enumerate() {
        for (suffix, fresh) in [("rm", mean), ("rv", var)] {
            let id = store.id_of(&format!("cls.c{i}.{suffix}")).expect("stat present");
            let running = store.get_mut(id).as_slice_mut().expect("stats are contiguous");
            for (r, &f) in running.iter_mut().zip(fresh.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * f;
            }
        }
    }
}

fn train_cnn(
    items: &[TaskItem],
    labels: &[usize],
    classes: &[String],
    config: &ClassifierTrainConfig,
    input: (usize, usize),
    seed: u64,
) -> Result<ParamStore> {
    if input.0 % 16 != 0 || input.1 % 16 != 0 || input.0 != input.1 {
        return Err(TaskError::Invalid(format!(
            "convolutional classifier needs a square input divisible by 16, got {}x{}",
            input.0, input.1
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = tagged_rng(seed, "cls.init", 0);
    init_cnn(&mut store, input.0, classes.len(), &mut rng);

    let trainable: Vec<_> = store
        .ids()
        .filter(|&id| {
            let name = store.name(id);
            !name.ends_with(".rm") && !name.ends_with(".rv")
        })
        .collect();
    let mut opt = AdamW::for_params(&store, trainable, config.lr_start, config.weight_decay);

    for step in 0..config.steps {
        let mut srng = tagged_rng(seed, "cls.step", step as u64);
        let picks: Vec<usize> =
            (0..config.batch).map(|_| srng.random_range(0..items.len())).collect();
        let mut batch = Array4::<f64>::zeros((config.batch, 3, input.0, input.1));
        let mut batch_labels = Vec::with_capacity(config.batch);
        for (row, &pick) in picks.iter().enumerate() {
            batch
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&image_to_input(&items[pick].image));
            batch_labels.push(labels[pick]);
        }

        let mut tape = Tape::new();
        let (loss, stats) = {
            let p = Params::trainable(&store);
            let mut mode = CnnMode::Train { rng: &mut srng, dropout: config.dropout };
            let (logits, bn_nodes) = cnn_forward(&mut tape, &p, batch, &mut mode);
            let loss = tape.cross_entropy(logits, &batch_labels);
            let stats: Vec<_> = bn_nodes.iter().map(|&n| tape.bn_batch_stats(n)).collect();
            (loss, stats)
        };
        let grads = tape.backward(loss, store.len());
        drop(tape);
        opt.lr = tacgen_nn::cosine_lr(step as u64, config.steps as u64, config.lr_start, config.lr_end);
        opt.step(&mut store, &grads);
        update_running_stats(&mut store, &stats);
    }
    Ok(store)
}

fn train_vit_classifier(
    items: &[TaskItem],
    labels: &[usize],
    classes: &[String],
    config: &ClassifierTrainConfig,
    input: (usize, usize),
    seed: u64,
) -> Result<ParamStore> {
    config.vit.validate()?;
    config.vit.check_image(input.0, input.1)?;
    let mut store = ParamStore::new();
    let mut rng = tagged_rng(seed, "cls.init", 0);
    crate::vit::init_vit(&mut store, "cls.enc", &config.vit, 3, &mut rng);
    let (hw, hb) = linear_init(&mut rng, config.vit.dim, classes.len());
    store.add("cls.head.w", hw);
    store.add("cls.head.b", hb);

    let mut opt = AdamW::new(&store, config.lr_start, config.weight_decay);
    for step in 0..config.steps {
        let mut srng = tagged_rng(seed, "cls.step", step as u64);
        let mut tape = Tape::new();
        let loss = {
            let p = Params::trainable(&store);
            let mut acc = None;
            for _ in 0..config.batch {
                let pick = srng.random_range(0..items.len());
                let x = image_to_input(&items[pick].image);
                let pooled = crate::vit::vit_pooled(&mut tape, &p, "cls.enc", &config.vit, &x);
                let logits = p.linear(&mut tape, "cls.head", pooled);
                let l = tape.cross_entropy(logits, &[labels[pick]]);
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
    Ok(store)
}

pub fn train_classifier(
    kind: ClassifierKind,
    items: &[TaskItem],
    config: &ClassifierTrainConfig,
    seed: u64,
) -> Result<EstimatorWeights> {
    if items.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    let classes = class_vocab(items);
    if classes.len() < 2 {
        return Err(TaskError::TooFewClasses { found: classes.len() });
    }
    let input = (items[0].image.height(), items[0].image.width());
    for it in items {
        check_input_dims(input, &it.image)?;
    }
    let labels: Vec<usize> = items
        .iter()
        .map(|it| class_index(&classes, &it.object_id))
        .collect::<Result<_>>()?;

    let (store, task, vit) = match kind {
        ClassifierKind::Cnn => (
            train_cnn(items, &labels, &classes, config, input, seed)?,
            TaskTag::CnnClassifier,
            None,
        ),
        ClassifierKind::Vit => (
            train_vit_classifier(items, &labels, &classes, config, input, seed)?,
            TaskTag::VitClassifier,
            Some(config.vit),
        ),
    };
    Ok(EstimatorWeights::new(
        store,
        EstimatorMeta {
            task,
            input,
            vit,
            classes,
            symmetry_deg: 0.0,
            circular: false,
            lambda_aux: 0.0,
        },
    ))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Predicted class index plus the full normalized score vector.
pub fn classify(weights: &EstimatorWeights, image: &TactileImage) -> Result<(usize, Vec<f64>)> {
    let logits: Vec<f64> = match weights.meta.task {
        TaskTag::CnnClassifier => {
            check_input_dims(weights.meta.input, image)?;
            let mut tape = Tape::new();
            let p = Params::frozen(&weights.store);
            let mut batch = Array4::<f64>::zeros((1, 3, weights.meta.input.0, weights.meta.input.1));
            batch.index_axis_mut(ndarray::Axis(0), 0).assign(&image_to_input(image));
            let (logits, _) = cnn_forward(&mut tape, &p, batch, &mut CnnMode::Eval);
            tape.value(logits).iter().copied().collect()
        }
        TaskTag::VitClassifier => {
            check_input_dims(weights.meta.input, image)?;
            let vit = weights
                .meta
                .vit
                .ok_or_else(|| TaskError::Invalid("missing encoder config".into()))?;
            let mut tape = Tape::new();
            let p = Params::frozen(&weights.store);
            let x = image_to_input(image);
            let pooled = crate::vit::vit_pooled(&mut tape, &p, "cls.enc", &vit, &x);
            let logits = p.linear(&mut tape, "cls.head", pooled);
            tape.value(logits).iter().copied().collect()
        }
        other => {
            return Err(TaskError::TaskMismatch {
                expected: "classifier.cnn or classifier.vit",
                actual: other.as_str().to_string(),
            })
        }
    };
    let scores = softmax(&logits);
    let arg = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
        .map(|(i, _)| i)
        .expect("nonempty score vector");
    Ok((arg, scores))
}

/// Fraction of items whose argmax class matches the label.
pub fn classification_accuracy(weights: &EstimatorWeights, items: &[TaskItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    let mut hits = 0usize;
    for it in items {
        let want = class_index(&weights.meta.classes, &it.object_id)?;
        let (got, _) = classify(weights, &it.image)?;
        if got == want {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tacgen_core::{ContactPose, ForceVector, ObjectSymmetry, Provenance};

    fn class_item(class: usize, seed: u64, size: usize) -> TaskItem {
        let mut rng = tagged_rng(seed, "cls.test", class as u64);
        let mut raw = ndarray::Array3::<f64>::from_shape_fn((size, size, 3), |_| {
            rng.random_range(0.0..0.15)
        });
        // Each class lights up a distinct channel band.
        for y in 0..size {
            for x in 0..size {
                raw[[y, x, class % 3]] = 0.6 + 0.4 * ((class / 3) as f64);
            }
        }
        TaskItem {
            image: TactileImage::from_f64(&raw),
            force: ForceVector::new(0.0, 0.0, 5.0),
            pose: ContactPose::new(1.0, 1.0, 0.0),
            symmetry: ObjectSymmetry::ASYMMETRIC,
            object_id: format!("class{class}"),
            provenance: Provenance::Generated,
            height: None,
            mask: None,
        }
    }

    #[test]
    fn flatten_widths_match_the_fixed_block_chain() {
        assert_eq!(cnn_flatten_width(224), 50176);
        assert_eq!(cnn_flatten_width(64), 4096);
    }

    #[test]
    fn cnn_trains_deterministically_and_scores_normalize() {
        let items: Vec<TaskItem> =
            (0..12).map(|i| class_item(i % 3, 100 + i as u64, 16)).collect();
        let config = ClassifierTrainConfig { steps: 12, batch: 4, ..Default::default() };
        let a = train_classifier(ClassifierKind::Cnn, &items, &config, 4).unwrap();
        let b = train_classifier(ClassifierKind::Cnn, &items, &config, 4).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let (arg, scores) = classify(&a, &items[0].image).unwrap();
        assert!(arg < 3);
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(classify(&a, &items[0].image).unwrap(), (arg, scores));
    }

    #[test]
    fn cnn_separates_easy_classes() {
        let items: Vec<TaskItem> =
            (0..30).map(|i| class_item(i % 3, 200 + i as u64, 16)).collect();
        let config = ClassifierTrainConfig { steps: 120, batch: 6, ..Default::default() };
        let w = train_classifier(ClassifierKind::Cnn, &items, &config, 9).unwrap();
        let acc = classification_accuracy(&w, &items).unwrap();
        assert!(acc > 0.9, "easy three-class toy should be separable, got {acc}");
    }

    #[test]
    fn vit_classifier_trains_and_is_deterministic() {
        let items: Vec<TaskItem> =
            (0..12).map(|i| class_item(i % 2, 300 + i as u64, 16)).collect();
        let config = ClassifierTrainConfig {
            steps: 40,
            batch: 4,
            vit: VitConfig { patch: 8, depth: 1, dim: 16, heads: 2 },
            ..Default::default()
        };
        let a = train_classifier(ClassifierKind::Vit, &items, &config, 6).unwrap();
        let b = train_classifier(ClassifierKind::Vit, &items, &config, 6).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let acc = classification_accuracy(&a, &items).unwrap();
        assert!(acc > 0.9, "two trivially separable classes, got {acc}");
    }

    #[test]
    fn single_class_and_tag_mismatch_are_rejected() {
        let items: Vec<TaskItem> = (0..4).map(|i| class_item(0, i as u64, 16)).collect();
        let config = ClassifierTrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(
            train_classifier(ClassifierKind::Cnn, &items, &config, 0),
            Err(TaskError::TooFewClasses { found: 1 })
        ));
        let two: Vec<TaskItem> = (0..4).map(|i| class_item(i % 2, i as u64, 16)).collect();
        let w = train_classifier(ClassifierKind::Cnn, &two, &config, 0).unwrap();
        let force_like = EstimatorWeights::new(
            ParamStore::new(),
            EstimatorMeta { task: TaskTag::Force, ..w.meta.clone() },
        );
        assert!(matches!(
            classify(&force_like, &two[0].image),
            Err(TaskError::TaskMismatch { .. })
        ));
    }
}
