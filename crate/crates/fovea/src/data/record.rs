//! Image records, dataset manifests, and the on-disk layout.
//!
//! A dataset is a directory of 8-bit images plus a `labels.csv` with the
//! header `id,participant_id,label,mask`. The `id` doubles as the image
//! path relative to the dataset root; `label` and `mask` may be empty
//! (unlabeled / no lesion annotation). Masks are binary images stored
//! next to the images with a `_mask` suffix.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::GenericImageView;
use ndarray::{Array2, Array3};
use once_cell::sync::OnceCell;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct ImageRecord {
    pub id: String,
    pub participant_id: String,
    pub label: Option<usize>,
    path: Option<PathBuf>,
    mask_path: Option<PathBuf>,
    pixels: OnceCell<Array3<f64>>,
    mask: OnceCell<Option<Array2<bool>>>,
}

impl ImageRecord {
    /// Record backed by in-memory arrays (synthetic data or tests).
    pub fn from_memory(
        id: impl Into<String>,
        participant_id: impl Into<String>,
        label: Option<usize>,
        pixels: Array3<f64>,
        mask: Option<Array2<bool>>,
    ) -> Result<Self> {
        let id = id.into();
        validate_pixels(&id, &pixels)?;
        if let Some(m) = &mask {
            let (h, w, _) = pixels.dim();
            if m.dim() != (h, w) {
                return Err(Error::Data(format!(
                    "record {id}: mask shape {:?} does not match image {:?}",
                    m.dim(),
                    (h, w)
                )));
            }
        }
        let cell = OnceCell::new();
        cell.set(pixels).ok();
        let mask_cell = OnceCell::new();
        mask_cell.set(mask).ok();
        Ok(ImageRecord {
            id,
            participant_id: participant_id.into(),
            label,
            path: None,
            mask_path: None,
            pixels: cell,
            mask: mask_cell,
        })
    }

    /// Record backed by files, decoded on first access.
    pub fn from_files(
        id: impl Into<String>,
        participant_id: impl Into<String>,
        label: Option<usize>,
        path: PathBuf,
        mask_path: Option<PathBuf>,
    ) -> Self {
        ImageRecord {
            id: id.into(),
            participant_id: participant_id.into(),
            label,
            path: Some(path),
            mask_path,
            pixels: OnceCell::new(),
            mask: OnceCell::new(),
        }
    }

    /// Pixels as H x W x C floats in [0, 1]; decodes lazily and caches.
    pub fn pixels(&self) -> Result<&Array3<f64>> {
        self.pixels.get_or_try_init(|| {
            let path = self.path.as_ref().ok_or_else(|| {
                Error::Data(format!("record {}: no pixel source", self.id))
            })?;
            let img = image::open(path)
                .map_err(|e| Error::Data(format!("record {}: {e}", self.id)))?;
            let rgb = img.to_rgb8();
            let (w, h) = img.dimensions();
            let mut arr = Array3::<f64>::zeros((h as usize, w as usize, 3));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    arr[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
                }
            }
            Ok(arr)
        })
    }

    /// Lesion mask when annotated; `None` otherwise.
    pub fn lesion_mask(&self) -> Result<Option<&Array2<bool>>> {
        let loaded = self.mask.get_or_try_init(|| -> Result<Option<Array2<bool>>> {
            match &self.mask_path {
                None => Ok(None),
                Some(path) => {
                    let img = image::open(path)
                        .map_err(|e| Error::Data(format!("record {} mask: {e}", self.id)))?;
                    let gray = img.to_luma8();
                    let (w, h) = gray.dimensions();
                    let mut arr = Array2::<bool>::default((h as usize, w as usize));
                    for (x, y, p) in gray.enumerate_pixels() {
                        arr[[y as usize, x as usize]] = p.0[0] >= 128;
                    }
                    Ok(Some(arr))
                }
            }
        })?;
        Ok(loaded.as_ref())
    }

    pub fn has_mask(&self) -> bool {
        self.mask_path.is_some() || matches!(self.mask.get(), Some(Some(_)))
    }
}

fn validate_pixels(id: &str, pixels: &Array3<f64>) -> Result<()> {
    if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::Data(format!(
            "record {id}: pixels must be finite and within [0,1]"
        )));
    }
    Ok(())
}

#[derive(Debug)]
pub struct DatasetManifest {
    pub name: String,
    pub n_classes: usize,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, n_classes: usize, records: Vec<ImageRecord>) -> Result<Self> {
        let manifest = DatasetManifest {
            name: name.into(),
            n_classes,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate record id {} in manifest {}",
                    r.id, self.name
                )));
            }
            if let Some(label) = r.label {
                if label >= self.n_classes {
                    return Err(Error::Data(format!(
                        "record {}: label {} out of range [0, {})",
                        r.id, label, self.n_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct participant ids in first-appearance order.
    pub fn participants(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.participant_id.as_str()) {
                out.push(r.participant_id.as_str());
            }
        }
        out
    }
}

/// Read a dataset from `root` using the `id,participant_id,label,mask`
/// table at `labels_file`. Images decode lazily, but every referenced
/// file must exist up front so missing data fails at load time.
pub fn load_manifest(root: &Path, labels_file: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(labels_file)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", labels_file.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header in {}: {e}", labels_file.display())))?
        .clone();
    let expect = ["id", "participant_id", "label", "mask"];
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expect {
        return Err(Error::Data(format!(
            "labels file header must be id,participant_id,label,mask; got {}",
            actual.join(",")
        )));
    }

    let mut records = Vec::new();
    let mut max_label = None::<usize>;
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("bad row in labels file: {e}")))?;
        let id = row.get(0).unwrap_or("").trim().to_string();
        let participant = row.get(1).unwrap_or("").trim().to_string();
        if id.is_empty() || participant.is_empty() {
            return Err(Error::Data("labels row with empty id or participant_id".into()));
        }
        let label = match row.get(2).unwrap_or("").trim() {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| {
                Error::Data(format!("record {id}: label {s:?} is not a class index"))
            })?),
        };
        if let Some(l) = label {
            max_label = Some(max_label.map_or(l, |m: usize| m.max(l)));
        }
        let path = root.join(&id);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "record {id}: image file {} does not exist",
                path.display()
            )));
        }
        let mask_path = match row.get(3).unwrap_or("").trim() {
            "" => None,
            m => {
                let mp = root.join(m);
                if !mp.is_file() {
                    return Err(Error::Data(format!(
                        "record {id}: mask file {} does not exist",
                        mp.display()
                    )));
                }
                Some(mp)
            }
        };
        records.push(ImageRecord::from_files(id, participant, label, path, mask_path));
    }
    let n_classes = max_label.map_or(0, |m| m + 1);
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    DatasetManifest::new(name, n_classes, records)
}

/// Write a manifest to `dir` in the layout `load_manifest` reads:
/// 8-bit PNGs, `_mask.png` companions, and `labels.csv`.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("labels.csv"))
        .map_err(|e| Error::Data(format!("cannot write labels.csv: {e}")))?;
    writer
        .write_record(["id", "participant_id", "label", "mask"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in &manifest.records {
        let pixels = r.pixels()?;
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Data(format!(
                "record {}: only 3-channel images can be saved, got {c}",
                r.id
            )));
        }
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    to_u8(pixels[[y, x, 0]]),
                    to_u8(pixels[[y, x, 1]]),
                    to_u8(pixels[[y, x, 2]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(dir.join(&r.id)).map_err(Error::from)?;

        let mask_name = match r.lesion_mask()? {
            Some(mask) => {
                let name = mask_file_name(&r.id);
                let mut m = image::GrayImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        m.put_pixel(
                            x as u32,
                            y as u32,
                            image::Luma([if mask[[y, x]] { 255 } else { 0 }]),
                        );
                    }
                }
                m.save(dir.join(&name)).map_err(Error::from)?;
                name
            }
            None => String::new(),
        };
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        writer
            .write_record([r.id.as_str(), r.participant_id.as_str(), &label, &mask_name])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

fn mask_file_name(id: &str) -> String {
    match id.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}_mask.{ext}"),
        None => format!("{id}_mask"),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_pixels(v: f64) -> Array3<f64> {
        Array3::from_elem((4, 4, 3), v)
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageRecord::from_memory("a", "p", None, tiny_pixels(1.5), None).is_err());
        assert!(ImageRecord::from_memory("a", "p", None, tiny_pixels(0.5), None).is_ok());
    }

    #[test]
    fn rejects_mask_shape_mismatch() {
        let mask = Array2::<bool>::default((3, 4));
        assert!(
            ImageRecord::from_memory("a", "p", None, tiny_pixels(0.5), Some(mask)).is_err()
        );
    }

    #[test]
    fn manifest_rejects_duplicate_ids_and_bad_labels() {
        let mk = |id: &str, label: Option<usize>| {
            ImageRecord::from_memory(id, "p", label, tiny_pixels(0.1), None).unwrap()
        };
        assert!(DatasetManifest::new("d", 2, vec![mk("a", None), mk("a", None)]).is_err());
        assert!(DatasetManifest::new("d", 2, vec![mk("a", Some(2))]).is_err());
        assert!(DatasetManifest::new("d", 2, vec![mk("a", Some(1)), mk("b", None)]).is_ok());
    }

    #[test]
    fn roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = Array2::<bool>::default((4, 4));
        mask[[1, 2]] = true;
        let records = vec![
            ImageRecord::from_memory("a.png", "p0", Some(0), tiny_pixels(0.25), None).unwrap(),
            ImageRecord::from_memory("b.png", "p0", Some(1), tiny_pixels(0.75), Some(mask))
                .unwrap(),
            ImageRecord::from_memory("c.png", "p1", None, tiny_pixels(0.5), None).unwrap(),
            ImageRecord::from_memory("d.png", "p1", Some(0), tiny_pixels(0.0), None).unwrap(),
        ];
        let manifest = DatasetManifest::new("toy", 2, records).unwrap();
        save_manifest(&manifest, dir.path()).unwrap();

        let loaded = load_manifest(dir.path(), &dir.path().join("labels.csv")).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded.participants().len(), 2);
        assert_eq!(loaded.n_classes, 2);
        // 0.25 * 255 rounds to 64; decoded back as 64/255.
        let px = loaded.records[0].pixels().unwrap();
        assert!((px[[0, 0, 0]] - 64.0 / 255.0).abs() < 1e-12);
        assert_eq!(loaded.records[0].label, Some(0));
        assert_eq!(loaded.records[2].label, None);
        let m = loaded.records[1].lesion_mask().unwrap().unwrap();
        assert!(m[[1, 2]]);
        assert!(!m[[0, 0]]);
        assert!(loaded.records[0].lesion_mask().unwrap().is_none());
    }

    #[test]
    fn missing_image_file_is_an_error_naming_the_id() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("labels.csv"),
            "id,participant_id,label,mask\nghost.png,p0,0,\n",
        )
        .unwrap();
        let err = load_manifest(dir.path(), &dir.path().join("labels.csv")).unwrap_err();
        assert!(err.to_string().contains("ghost.png"), "{err}");
    }

    #[test]
    fn unlabeled_manifest_has_zero_classes() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            ImageRecord::from_memory("a.png", "p0", None, tiny_pixels(0.3), None).unwrap(),
        ];
        save_manifest(&DatasetManifest::new("u", 0, records).unwrap(), dir.path()).unwrap();
        let loaded = load_manifest(dir.path(), &dir.path().join("labels.csv")).unwrap();
        assert_eq!(loaded.n_classes, 0);
        assert!(loaded.records.iter().all(|r| r.label.is_none()));
    }
}
