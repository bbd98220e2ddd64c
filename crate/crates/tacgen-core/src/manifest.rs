//! Dataset manifest: one JSON file describing sensor geometry plus every
//! sample's image, mask, optional height map, force, pose, and provenance.
//!
//! Loading is strict: every referenced file must exist, decode, and match the
//! declared sensor dimensions, and label invariants (force range, pose in
//! frame, provenance/height consistency, zero force exactly for empty masks)
//! are checked eagerly so failures name the offending sample instead of
//! surfacing mid-training.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::force::{ForceVector, FZ_MAX};
use crate::height::{HeightMap, HEIGHT_SCALE_MM};
use crate::image::{BackgroundImage, TactileImage};
use crate::mask::ContactMask;
use crate::pose::{ContactPose, ObjectSymmetry};

/// Height-map support may exceed the mask by this Chebyshev radius; covers
/// sub-pixel shear shifts plus bilinear bleed.
pub const HEIGHT_SUPPORT_DILATION_PX: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub h: usize,
    pub w: usize,
    pub mm_per_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str, id: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(CoreError::UnknownSplit { id: id.to_string(), value: s.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Captured on hardware (or stood in for by the synthetic oracle when a
    /// pipeline treats oracle frames as its "real" corpus).
    Real,
    /// Rendered by the sensor oracle; always carries a height reference.
    Synthetic,
    /// Produced by a generative model; never carries a height reference.
    Generated,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
            Provenance::Generated => "generated",
        }
    }

    fn parse(s: &str, id: &str) -> Result<Self> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            "generated" => Ok(Provenance::Generated),
            _ => Err(CoreError::UnknownProvenance { id: id.to_string(), value: s.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub symmetry_deg: f64,
}

impl ObjectInfo {
    pub fn symmetry(&self) -> ObjectSymmetry {
        ObjectSymmetry { period_deg: self.symmetry_deg }
    }
}

/// One labelled frame. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub background: String,
    pub mask: String,
    pub height: Option<String>,
    pub force: ForceVector,
    pub pose: ContactPose,
    pub object_id: String,
    pub split: Split,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSample {
    id: String,
    image: String,
    background: String,
    mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<String>,
    force: [f64; 3],
    pose: [f64; 3],
    object_id: String,
    split: String,
    provenance: String,
}

fn default_height_scale() -> f64 {
    HEIGHT_SCALE_MM
}

#[derive(Debug, Serialize, Deserialize)]
struct RawManifest {
    sensor: SensorConfig,
    seed: u64,
    #[serde(default = "default_height_scale")]
    height_scale_mm: f64,
    #[serde(default)]
    objects: BTreeMap<String, ObjectInfo>,
    samples: Vec<RawSample>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub sensor: SensorConfig,
    pub seed: u64,
    pub height_scale_mm: f64,
    pub objects: BTreeMap<String, ObjectInfo>,
    pub samples: Vec<SampleRecord>,
    root: PathBuf,
}

impl Manifest {
    pub fn new(sensor: SensorConfig, seed: u64, root: PathBuf) -> Self {
        Self {
            sensor,
            seed,
            height_scale_mm: HEIGHT_SCALE_MM,
            objects: BTreeMap::new(),
            samples: Vec::new(),
            root,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn symmetry_of(&self, object_id: &str) -> ObjectSymmetry {
        self.objects.get(object_id).map(|o| o.symmetry()).unwrap_or_default()
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn sample_by_id(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn load_image(&self, s: &SampleRecord) -> Result<TactileImage> {
        TactileImage::load_png(&self.resolve(&s.image))
    }

    pub fn load_background(&self, s: &SampleRecord) -> Result<BackgroundImage> {
        Ok(BackgroundImage(TactileImage::load_png(&self.resolve(&s.background))?))
    }

    pub fn load_mask(&self, s: &SampleRecord) -> Result<ContactMask> {
        ContactMask::load_png(&self.resolve(&s.mask))
    }

    pub fn load_height(&self, s: &SampleRecord) -> Result<Option<HeightMap>> {
        match &s.height {
            Some(rel) => Ok(Some(HeightMap::load_png(&self.resolve(rel), self.height_scale_mm)?)),
            None => Ok(None),
        }
    }

    /// Parse, convert, and fully validate a manifest on disk.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CoreError::Io { path: path.to_path_buf(), source })?;
        let raw: RawManifest = serde_json::from_str(&text)?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let manifest = Self::from_raw(raw, root)?;
        manifest.validate_files()?;
        Ok(manifest)
    }

    /// Serialize to pretty JSON. Field order is fixed and `objects` is an
    /// ordered map, so equal manifests produce identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = self.to_raw();
        let text = serde_json::to_string_pretty(&raw)?;
        std::fs::write(path, text.as_bytes())
            .map_err(|source| CoreError::Io { path: path.to_path_buf(), source })
    }

    fn from_raw(raw: RawManifest, root: PathBuf) -> Result<Manifest> {
        if raw.sensor.h == 0 || raw.sensor.w == 0 {
            return Err(CoreError::Invalid("sensor dimensions must be positive".into()));
        }
        if !(raw.sensor.mm_per_px > 0.0) {
            return Err(CoreError::Invalid("sensor mm_per_px must be positive".into()));
        }
        if !(raw.height_scale_mm > 0.0) {
            return Err(CoreError::Invalid("height_scale_mm must be positive".into()));
        }
        let mut manifest = Manifest {
            sensor: raw.sensor,
            seed: raw.seed,
            height_scale_mm: raw.height_scale_mm,
            objects: raw.objects,
            samples: Vec::with_capacity(raw.samples.len()),
            root,
        };
        let mut seen = HashSet::new();
        for rs in raw.samples {
            if !seen.insert(rs.id.clone()) {
                return Err(CoreError::DuplicateId { id: rs.id });
            }
            let split = Split::parse(&rs.split, &rs.id)?;
            let provenance = Provenance::parse(&rs.provenance, &rs.id)?;
            let record = SampleRecord {
                split,
                provenance,
                force: ForceVector::from(rs.force),
                pose: ContactPose::from_array(rs.pose),
                id: rs.id,
                image: rs.image,
                background: rs.background,
                mask: rs.mask,
                height: rs.height,
                object_id: rs.object_id,
            };
            manifest.push_validated(record)?;
        }
        manifest.check_object_splits()?;
        Ok(manifest)
    }

    fn to_raw(&self) -> RawManifest {
        RawManifest {
            sensor: self.sensor,
            seed: self.seed,
            height_scale_mm: self.height_scale_mm,
            objects: self.objects.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| RawSample {
                    id: s.id.clone(),
                    image: s.image.clone(),
                    background: s.background.clone(),
                    mask: s.mask.clone(),
                    height: s.height.clone(),
                    force: s.force.to_array(),
                    pose: s.pose.to_array(),
                    object_id: s.object_id.clone(),
                    split: s.split.as_str().to_string(),
                    provenance: s.provenance.as_str().to_string(),
                })
                .collect(),
        }
    }

    /// Label-level checks that need no file access; canonicalizes the pose
    /// angle under the object's symmetry before storing.
    pub fn push_validated(&mut self, mut record: SampleRecord) -> Result<()> {
        let invalid = |id: &str, message: String| CoreError::InvalidSample { id: id.to_string(), message };
        if record.force.fz < 0.0 || record.force.fz > FZ_MAX {
            return Err(CoreError::ForceOutOfRange { fz: record.force.fz, min: 0.0, max: FZ_MAX });
        }
        if !record.force.fz.is_finite() || !record.force.fx.is_finite() || !record.force.fy.is_finite() {
            return Err(invalid(&record.id, "non-finite force".into()));
        }
        if !record.pose.in_frame(self.sensor.w, self.sensor.h) {
            return Err(invalid(
                &record.id,
                format!("pose centre ({}, {}) outside frame", record.pose.cx, record.pose.cy),
            ));
        }
        match record.provenance {
            Provenance::Synthetic if record.height.is_none() => {
                return Err(invalid(&record.id, "synthetic sample without height reference".into()));
            }
            Provenance::Generated if record.height.is_some() => {
                return Err(invalid(&record.id, "generated sample with height reference".into()));
            }
            _ => {}
        }
        let sym = self.symmetry_of(&record.object_id);
        record.pose.theta_deg = sym.canonicalize(record.pose.theta_deg);
        self.samples.push(record);
        Ok(())
    }

    fn check_object_splits(&self) -> Result<()> {
        let mut per_split: BTreeMap<Split, HashSet<&str>> = BTreeMap::new();
        for s in &self.samples {
            per_split.entry(s.split).or_default().insert(s.object_id.as_str());
        }
        let splits: Vec<_> = per_split.iter().collect();
        for pair in splits.windows(2) {
            let (sa, a) = pair[0];
            let (sb, b) = pair[1];
            if a != b {
                let only_a: Vec<_> = a.difference(b).collect();
                let only_b: Vec<_> = b.difference(a).collect();
                return Err(CoreError::ObjectSetMismatch {
                    details: format!(
                        "{} has {:?} not in {}, {} has {:?} not in {}",
                        sa.as_str(),
                        only_a,
                        sb.as_str(),
                        sb.as_str(),
                        only_b,
                        sa.as_str()
                    ),
                });
            }
        }
        Ok(())
    }

    /// File-level checks: existence, decodability, dimensions, and the
    /// pixel-label invariants that need pixel access. Dimension results are
    /// cached per path so shared backgrounds are read once.
    pub fn validate_files(&self) -> Result<()> {
        let mut rgb_cache: HashMap<String, (usize, usize)> = HashMap::new();
        let (want_h, want_w) = (self.sensor.h, self.sensor.w);
        let dim_err = |id: &str, what: &str, h: usize, w: usize| CoreError::DimensionMismatch {
            id: id.to_string(),
            what: what.to_string(),
            expected_w: want_w,
            expected_h: want_h,
            actual_w: w,
            actual_h: h,
        };
        for s in &self.samples {
            for (what, rel) in [("image", &s.image), ("background", &s.background)] {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(CoreError::MissingFile { id: s.id.clone(), path });
                }
                let dims = match rgb_cache.get(rel.as_str()) {
                    Some(&d) => d,
                    None => {
                        let img = TactileImage::load_png(&path)?;
                        let d = (img.height(), img.width());
                        rgb_cache.insert(rel.clone(), d);
                        d
                    }
                };
                if dims != (want_h, want_w) {
                    return Err(dim_err(&s.id, what, dims.0, dims.1));
                }
            }

            let mask_path = self.resolve(&s.mask);
            if !mask_path.is_file() {
                return Err(CoreError::MissingFile { id: s.id.clone(), path: mask_path });
            }
            let mask = ContactMask::load_png(&mask_path)?;
            if (mask.height(), mask.width()) != (want_h, want_w) {
                return Err(dim_err(&s.id, "mask", mask.height(), mask.width()));
            }
            let empty = mask.is_empty();
            if empty != (s.force.fz == 0.0) {
                return Err(CoreError::InvalidSample {
                    id: s.id.clone(),
                    message: if empty {
                        format!("empty mask with fz = {} N", s.force.fz)
                    } else {
                        "zero force with non-empty mask".to_string()
                    },
                });
            }

            if let Some(rel) = &s.height {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(CoreError::MissingFile { id: s.id.clone(), path });
                }
                let height = HeightMap::load_png(&path, self.height_scale_mm)?;
                if (height.height(), height.width()) != (want_h, want_w) {
                    return Err(dim_err(&s.id, "height", height.height(), height.width()));
                }
                let support = height.support(1e-6);
                if !support.is_subset_of(&mask.dilate(HEIGHT_SUPPORT_DILATION_PX)) {
                    return Err(CoreError::InvalidSample {
                        id: s.id.clone(),
                        message: "height support extends beyond the dilated contact mask".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn write_fixture(dir: &Path) -> Manifest {
        std::fs::create_dir_all(dir).unwrap();
        let sensor = SensorConfig { h: 16, w: 16, mm_per_px: 0.05 };
        let bg = BackgroundImage(TactileImage::from_f64(&Array3::from_elem((16, 16, 3), 0.4)));
        bg.image().save_png(&dir.join("bg.png")).unwrap();
        let img = TactileImage::from_f64(&Array3::from_elem((16, 16, 3), 0.5));
        img.save_png(&dir.join("img.png")).unwrap();
        let mut mask = ContactMask::zeros(16, 16);
        mask.set(8, 8, 1);
        mask.save_png(&dir.join("mask.png")).unwrap();
        let mut depth = Array2::zeros((16, 16));
        depth[[8, 8]] = 0.5;
        HeightMap::new(depth).save_png(&dir.join("h.png"), HEIGHT_SCALE_MM).unwrap();

        let mut m = Manifest::new(sensor, 7, dir.to_path_buf());
        m.objects.insert("obj".into(), ObjectInfo { symmetry_deg: 180.0 });
        m.push_validated(SampleRecord {
            id: "s0".into(),
            image: "img.png".into(),
            background: "bg.png".into(),
            mask: "mask.png".into(),
            height: Some("h.png".into()),
            force: ForceVector::new(0.1, -0.2, 3.0),
            pose: ContactPose::new(8.0, 8.0, 190.0),
            object_id: "obj".into(),
            split: Split::Train,
            provenance: Provenance::Synthetic,
        })
        .unwrap();
        m
    }

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("tacgen_manifest_{name}"))
    }

    #[test]
    fn round_trip_preserves_records_and_canonicalizes_angle() {
        let dir = tmp("roundtrip");
        let m = write_fixture(&dir);
        // 190 deg under two-fold symmetry canonicalizes to 10.
        assert!((m.samples[0].pose.theta_deg - 10.0).abs() < 1e-12);
        let path = dir.join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.samples, m.samples);
        assert_eq!(back.seed, 7);
        // Byte-identical re-serialization.
        let again = dir.join("manifest2.json");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn missing_file_error_names_the_sample() {
        let dir = tmp("missing");
        let mut m = write_fixture(&dir);
        m.samples[0].image = "nope.png".into();
        let path = dir.join("manifest.json");
        m.save(&path).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s0") && msg.contains("nope.png"), "{msg}");
    }

    #[test]
    fn unknown_provenance_names_the_sample() {
        let dir = tmp("prov");
        let m = write_fixture(&dir);
        let path = dir.join("manifest.json");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"synthetic\"", "\"dreamt\"");
        std::fs::write(&path, text).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        match err {
            CoreError::UnknownProvenance { id, value } => {
                assert_eq!(id, "s0");
                assert_eq!(value, "dreamt");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn generated_sample_must_not_carry_height() {
        let dir = tmp("genheight");
        let mut m = write_fixture(&dir);
        let mut s = m.samples[0].clone();
        s.id = "g0".into();
        s.provenance = Provenance::Generated;
        let err = m.push_validated(s).unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn zero_force_requires_empty_mask() {
        let dir = tmp("zeroforce");
        let mut m = write_fixture(&dir);
        m.samples[0].force = ForceVector::ZERO;
        let path = dir.join("manifest.json");
        m.save(&path).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("zero force"), "{err}");
    }

    #[test]
    fn split_object_sets_must_agree() {
        let dir = tmp("splitobj");
        let mut m = write_fixture(&dir);
        let mut s = m.samples[0].clone();
        s.id = "s1".into();
        s.object_id = "other".into();
        s.split = Split::Val;
        m.push_validated(s).unwrap();
        let path = dir.join("manifest.json");
        m.save(&path).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(matches!(err, CoreError::ObjectSetMismatch { .. }), "{err}");
    }

    #[test]
    fn force_above_range_is_rejected() {
        let dir = tmp("force");
        let mut m = write_fixture(&dir);
        let mut s = m.samples[0].clone();
        s.id = "s1".into();
        s.force = ForceVector::new(0.0, 0.0, 10.5);
        assert!(matches!(m.push_validated(s), Err(CoreError::ForceOutOfRange { .. })));
    }
}
