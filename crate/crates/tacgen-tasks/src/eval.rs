//! Generation-quality evaluation: per-model aggregate pixel MSE and SSIM,
//! plus tiled error-map panels for visual inspection.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use tacgen_core::metrics::{error_map, pixel_mse, ssim, GenerationReport, ReportRow};
use tacgen_core::TactileImage;

use crate::error::{Result, TaskError};

/// One generated/reference pair under a model label.
#[derive(Debug, Clone)]
pub struct GenEvalEntry {
    pub model: String,
    pub generated: TactileImage,
    pub reference: TactileImage,
}

/// Horizontal tiling with a 2px separator, used for error-map panels.
pub fn tile_row(images: &[TactileImage]) -> Result<TactileImage> {
    if images.is_empty() {
        return Err(TaskError::Invalid("cannot tile zero images".into()));
    }
    let h = images[0].height();
    let gap = 2usize;
    let total_w: usize =
        images.iter().map(|i| i.width()).sum::<usize>() + gap * (images.len() - 1);
    let mut out = Array3::<u8>::zeros((h, total_w, 3));
    let mut x0 = 0usize;
    for img in images {
        if img.height() != h {
            return Err(TaskError::Invalid("tiled images must share a height".into()));
        }
        for y in 0..h {
            for x in 0..img.width() {
                for c in 0..3 {
                    out[[y, x0 + x, c]] = img.data()[[y, x, c]];
                }
            }
        }
        x0 += img.width() + gap;
    }
    Ok(TactileImage::new(out))
}

/// Aggregates per-model metrics over the entries (rows sorted by model
/// label). When `panels_dir` is given, writes one
/// `generated | reference | error` panel per model for its first few pairs.
pub fn eval_generation(
    entries: &[GenEvalEntry],
    split: &str,
    panels_dir: Option<&Path>,
) -> Result<GenerationReport> {
    if entries.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    let mut grouped: BTreeMap<&str, Vec<&GenEvalEntry>> = BTreeMap::new();
    for e in entries {
        grouped.entry(e.model.as_str()).or_default().push(e);
    }
    let mut report = GenerationReport::default();
    for (model, group) in &grouped {
        let mut mses = Vec::with_capacity(group.len());
        let mut ssims = Vec::with_capacity(group.len());
        for e in group {
            mses.push(pixel_mse(&e.generated, &e.reference)?);
            ssims.push(ssim(&e.generated, &e.reference)?);
        }
        report.rows.push(ReportRow::from_samples(model, split, &mses, &ssims));
        if let Some(dir) = panels_dir {
            std::fs::create_dir_all(dir)
                .map_err(|source| TaskError::Io { path: dir.to_path_buf(), source })?;
            for (k, e) in group.iter().take(4).enumerate() {
                let err = error_map(&e.generated, &e.reference)?;
                let panel = tile_row(&[e.generated.clone(), e.reference.clone(), err])?;
                panel.save_png(&dir.join(format!("{model}.{k}.png")))?;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tacgen_core::rng::tagged_rng;

    fn noise_image(seed: u64) -> TactileImage {
        let mut rng = tagged_rng(seed, "eval.test", 0);
        TactileImage::from_f64(&Array3::from_shape_fn((16, 16, 3), |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn perfect_pairs_score_zero_mse_and_unit_ssim() {
        let img = noise_image(1);
        let entries = vec![GenEvalEntry {
            model: "exact".into(),
            generated: img.clone(),
            reference: img,
        }];
        let report = eval_generation(&entries, "test", None).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].n, 1);
        assert!(report.rows[0].mse_mean.abs() < 1e-12);
        assert!((report.rows[0].ssim_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn models_group_into_sorted_rows_and_panels_save() {
        let entries = vec![
            GenEvalEntry { model: "b".into(), generated: noise_image(1), reference: noise_image(2) },
            GenEvalEntry { model: "a".into(), generated: noise_image(3), reference: noise_image(4) },
            GenEvalEntry { model: "b".into(), generated: noise_image(5), reference: noise_image(6) },
        ];
        let dir = std::env::temp_dir().join(format!("tacgen-eval-{}", std::process::id()));
        let report = eval_generation(&entries, "val", Some(&dir)).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].model, "a");
        assert_eq!(report.rows[1].model, "b");
        assert_eq!(report.rows[1].n, 2);
        assert!(dir.join("a.0.png").exists());
        assert!(dir.join("b.1.png").exists());
        let csv = report.to_csv_string();
        assert!(csv.starts_with("# tacgen-report-v1"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tiling_rejects_mismatched_heights() {
        let a = TactileImage::zeros(8, 4);
        let b = TactileImage::zeros(6, 4);
        assert!(tile_row(&[a.clone(), b]).is_err());
        let row = tile_row(&[a.clone(), a]).unwrap();
        assert_eq!(row.width(), 4 + 2 + 4);
    }
}
