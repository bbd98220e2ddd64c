//! Label bookkeeping of the augmentation pipelines over a real on-disk
//! corpus: record counts, per-item rejection, closed-form pose labels, and
//! byte-level reproducibility. Generation quality is irrelevant here, so the
//! generator is untrained and tiny.

use std::path::{Path, PathBuf};

use tacgen_core::pose::pose_from_transform;
use tacgen_core::synth::{build_synthetic_dataset, AngleSet, MaskPrototype, ObjectSpec, SynthDatasetSpec};
use tacgen_core::{ForceVector, Manifest, MaskTransform, Provenance, SensorConfig, Split};
use tacgen_diffusion::schedule::ScheduleConfig;
use tacgen_diffusion::{init_generator, init_controlnet, Codec, CondMode, DiTConfig};
use tacgen_tasks::{force_augment, full_augment, traditional_augment, AugmentConfig, TraditionalMode};

fn scratch(label: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tacgen-aug-{}-{label}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_corpus(dir: &Path) -> Manifest {
    let spec = SynthDatasetSpec {
        sensor: SensorConfig { h: 32, w: 32, mm_per_px: 0.1 },
        objects: vec![ObjectSpec::of(MaskPrototype::CylinderMid), ObjectSpec::of(MaskPrototype::Cross)],
        train_positions: 3,
        val_positions: 1,
        test_positions: 1,
        frames_per_position: 2,
        max_translation: 5,
        angles: AngleSet::Choices(vec![0, 90]),
        ..SynthDatasetSpec::small(41)
    };
    build_synthetic_dataset(&spec, dir).unwrap()
}

struct Fixture {
    manifest: Manifest,
    codec: Codec,
    gen: tacgen_diffusion::GeneratorWeights,
    ref_id: String,
}

fn fixture(label: &str) -> Fixture {
    let dir = scratch(&format!("src-{label}"));
    let manifest = tiny_corpus(&dir);
    let codec = Codec::identity();
    let config = DiTConfig { patch: 4, depth: 2, dim: 16, heads: 2, mode: CondMode::ForceOnly };
    let schedule = ScheduleConfig { steps: 8, ..ScheduleConfig::default() };
    let gen = init_generator(&config, codec.latent_dims(32, 32), schedule, &codec.fingerprint(), 5)
        .unwrap();
    let ref_id = manifest
        .split_samples(Split::Train)
        .find(|s| s.force.fz > 0.0)
        .expect("corpus has contact frames")
        .id
        .clone();
    Fixture { manifest, codec, gen, ref_id }
}

#[test]
fn force_augment_rejects_out_of_band_and_copies_reference_labels() {
    let fx = fixture("force");
    let out_dir = scratch("force-out");
    let forces = [
        ForceVector::new(0.1, -0.2, 2.0),
        ForceVector::new(0.0, 0.0, 0.5),   // below the accepted band
        ForceVector::new(0.3, 0.0, 9.5),
        ForceVector::new(0.0, 0.0, 12.0),  // above the accepted band
    ];
    let config = AugmentConfig { sample_steps: 4, ..AugmentConfig::default() };
    let report = force_augment(
        &fx.manifest, &fx.ref_id, &forces, &fx.gen, &fx.codec, &config, &out_dir, 77,
    )
    .unwrap();
    assert_eq!(report.rejected_forces, 2);
    let records: Vec<_> = report.manifest.split_samples(Split::Train).collect();
    assert_eq!(records.len(), 2);
    let reference = fx.manifest.sample_by_id(&fx.ref_id).unwrap();
    for r in &records {
        assert_eq!(r.pose, reference.pose);
        assert_eq!(r.provenance, Provenance::Generated);
        assert!(r.height.is_none());
    }
    assert_eq!(records[0].force, forces[0]);
    assert_eq!(records[1].force, forces[2]);
    report.manifest.validate_files().unwrap();

    // Byte-identical rerun.
    let out2 = scratch("force-out2");
    let again =
        force_augment(&fx.manifest, &fx.ref_id, &forces, &fx.gen, &fx.codec, &config, &out2, 77)
            .unwrap();
    for (a, b) in report
        .manifest
        .split_samples(Split::Train)
        .zip(again.manifest.split_samples(Split::Train))
    {
        let pa = std::fs::read(out_dir.join(&a.image)).unwrap();
        let pb = std::fs::read(out2.join(&b.image)).unwrap();
        assert_eq!(pa, pb, "same inputs and seed reproduce the same bytes");
    }
}

#[test]
fn force_augment_with_no_targets_yields_an_empty_manifest() {
    let fx = fixture("empty");
    let out_dir = scratch("empty-out");
    let report = force_augment(
        &fx.manifest,
        &fx.ref_id,
        &[],
        &fx.gen,
        &fx.codec,
        &AugmentConfig { sample_steps: 2, ..AugmentConfig::default() },
        &out_dir,
        1,
    )
    .unwrap();
    assert_eq!(report.manifest.split_samples(Split::Train).count(), 0);
    assert_eq!(report.rejected_forces, 0);
}

#[test]
fn full_augment_counts_the_grid_and_labels_poses_in_closed_form() {
    let fx = fixture("full");
    let cn = init_controlnet(&fx.gen).unwrap();
    let out_dir = scratch("full-out");
    let forces = [ForceVector::new(0.0, 0.0, 5.0), ForceVector::new(0.0, 0.0, 8.0)];
    let transforms = [
        MaskTransform::new(0, 0, 0),
        MaskTransform::new(3, -2, 90),
        MaskTransform::new(500, 0, 0), // centre leaves the frame
    ];
    let config = AugmentConfig { sample_steps: 3, ..AugmentConfig::default() };
    let report = full_augment(
        &fx.manifest, &fx.ref_id, &forces, &transforms, &fx.gen, &cn, &fx.codec, &config,
        &out_dir, 13,
    )
    .unwrap();
    assert_eq!(report.skipped_transforms, 1);
    assert_eq!(report.rejected_forces, 0);
    let records: Vec<_> = report.manifest.split_samples(Split::Train).collect();
    assert_eq!(records.len(), 2 * 2, "two forces times two usable transforms");

    let reference = fx.manifest.sample_by_id(&fx.ref_id).unwrap();
    let sym = fx.manifest.symmetry_of(&reference.object_id);
    for (i, t) in transforms.iter().take(2).enumerate() {
        let want = pose_from_transform(&reference.pose, t, sym, 32, 32).unwrap();
        for k in 0..forces.len() {
            let r = records[i * forces.len() + k];
            assert!((r.pose.cx - want.cx).abs() < 1e-9);
            assert!((r.pose.cy - want.cy).abs() < 1e-9);
            assert!((r.pose.theta_deg - want.theta_deg).abs() < 1e-9);
            assert_eq!(r.force, forces[k]);
        }
    }
    report.manifest.validate_files().unwrap();
}

#[test]
fn traditional_augment_writes_the_exact_variant_counts() {
    let fx = fixture("trad");
    let out_dir = scratch("trad-out");
    let report = traditional_augment(
        &fx.manifest,
        &[fx.ref_id.as_str()],
        TraditionalMode::Geometric,
        &out_dir,
        0,
    )
    .unwrap();
    let records: Vec<_> = report.manifest.split_samples(Split::Train).collect();
    assert_eq!(records.len(), 864);
    let reference = fx.manifest.sample_by_id(&fx.ref_id).unwrap();
    assert!(records.iter().all(|r| r.object_id == reference.object_id));
    assert!(records.iter().all(|r| r.force == reference.force));
    // The identity variant is a byte-exact copy of the reference image.
    let ref_img = fx.manifest.load_image(reference).unwrap();
    let identical = records.iter().any(|r| {
        let img = report.manifest.load_image(r).unwrap();
        img.data() == ref_img.data()
    });
    assert!(identical, "enumeration contains the identity member");
}
