//! On-disk dataset layout and loading.
//!
//! ```text
//! data_dir/
//!   manifest.csv            patient_id,laterality,view,split,image,meta
//!   images/<pid>_<lat>_<view>.pgm
//!   cases/<pid>.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::{read_pgm, write_pgm, GrayImage};
use crate::phantom::{Laterality, Lesion, PhantomCase, Split, View};
use crate::sampling::{breast_mask, FrameLesion, Mask, SampleSource};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewMeta {
    pub view: View,
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub lesions: Vec<Lesion>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BreastMeta {
    pub laterality: Laterality,
    pub label: bool,
    pub views: Vec<ViewMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseMeta {
    pub patient_id: String,
    pub breasts: Vec<BreastMeta>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Write cases, metadata and the manifest. Returns per-split patient counts.
pub fn write_dataset(
    cases: &[PhantomCase],
    splits: &BTreeMap<String, Split>,
    dir: &Path,
) -> Result<SplitCounts> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("cases"))?;
    let mut manifest = String::from("patient_id,laterality,view,split,image,meta\n");
    let mut counts = SplitCounts::default();
    for case in cases {
        let split = *splits.get(&case.patient_id).ok_or_else(|| {
            Error::InvalidArgument(format!("no split for patient {}", case.patient_id))
        })?;
        match split {
            Split::Train => counts.train += 1,
            Split::Val => counts.val += 1,
            Split::Test => counts.test += 1,
        }
        let meta_rel = format!("cases/{}.json", case.patient_id);
        let mut breasts = Vec::new();
        for breast in &case.breasts {
            let mut views = Vec::new();
            for v in &breast.views {
                let image_rel =
                    format!("images/{}_{}_{}.pgm", case.patient_id, breast.laterality, v.view);
                write_pgm(&dir.join(&image_rel), &v.image)?;
                views.push(ViewMeta {
                    view: v.view,
                    image: image_rel.clone(),
                    height: v.image.height,
                    width: v.image.width,
                    lesions: v.lesions.clone(),
                });
                manifest.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    case.patient_id, breast.laterality, v.view, split, image_rel, meta_rel
                ));
            }
            breasts.push(BreastMeta { laterality: breast.laterality, label: breast.label, views });
        }
        let meta = CaseMeta { patient_id: case.patient_id.clone(), breasts };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Format(format!("case json: {e}")))?;
        std::fs::write(dir.join(&meta_rel), json)?;
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(counts)
}

/// One loaded view-image with its ground truth.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub patient_id: String,
    pub laterality: Laterality,
    pub view: View,
    pub image: GrayImage,
    pub lesions: Vec<Lesion>,
    pub breast_label: bool,
}

/// Parse the manifest and load every image of `split`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<ImageSample>> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let mut meta_cache: BTreeMap<String, CaseMeta> = BTreeMap::new();
    let mut wanted: Vec<(String, Laterality, View, PathBuf, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("manifest line {}: {line}", i + 1)));
        }
        let row_split = match f[3] {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Format(format!("manifest: unknown split {other}"))),
        };
        if row_split != split {
            continue;
        }
        let lat = if f[1] == "L" { Laterality::Left } else { Laterality::Right };
        let view = if f[2] == "CC" { View::Cc } else { View::Mlo };
        wanted.push((f[0].to_string(), lat, view, dir.join(f[4]), f[5].to_string()));
    }

    let mut samples = Vec::with_capacity(wanted.len());
    for (patient_id, laterality, view, image_path, meta_rel) in wanted {
        if !meta_cache.contains_key(&meta_rel) {
            let raw = std::fs::read_to_string(dir.join(&meta_rel))
                .map_err(|e| Error::Format(format!("{meta_rel}: {e}")))?;
            let meta: CaseMeta = serde_json::from_str(&raw)
                .map_err(|e| Error::Format(format!("{meta_rel}: {e}")))?;
            meta_cache.insert(meta_rel.clone(), meta);
        }
        let meta = &meta_cache[&meta_rel];
        let breast = meta
            .breasts
            .iter()
            .find(|b| b.laterality == laterality)
            .ok_or_else(|| Error::Format(format!("{meta_rel}: missing breast {laterality}")))?;
        let view_meta = breast
            .views
            .iter()
            .find(|v| v.view == view)
            .ok_or_else(|| Error::Format(format!("{meta_rel}: missing view {view}")))?;
        samples.push(ImageSample {
            patient_id,
            laterality,
            view,
            image: read_pgm(&image_path)?,
            lesions: view_meta.lesions.clone(),
            breast_label: breast.label,
        });
    }
    Ok(samples)
}

/// An image sample with the derived products patch sampling needs.
pub struct PreparedSample {
    pub sample: ImageSample,
    pub frame_lesions: Vec<FrameLesion>,
    pub mask: Mask,
}

impl PreparedSample {
    pub fn source(&self) -> SampleSource<'_> {
        SampleSource {
            image: &self.sample.image,
            lesions: &self.frame_lesions,
            mask: &self.mask,
        }
    }
}

/// Compute foreground masks (the slow part) in parallel.
pub fn prepare_samples(samples: Vec<ImageSample>) -> Result<Vec<PreparedSample>> {
    samples
        .into_par_iter()
        .map(|sample| {
            let mask = breast_mask(&sample.image)?;
            let frame_lesions = sample.lesions.iter().map(Lesion::to_frame_lesion).collect();
            Ok(PreparedSample { sample, frame_lesions, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, split_patients, PhantomConfig};

    #[test]
    fn write_load_round_trip() {
        let config = PhantomConfig {
            height_range: (160, 180),
            width_range: (100, 120),
            ..PhantomConfig::default()
        };
        let cases: Vec<PhantomCase> =
            (0..4).map(|s| generate_case(s, &config).unwrap()).collect();
        let ids: Vec<String> = cases.iter().map(|c| c.patient_id.clone()).collect();
        let splits = split_patients(&ids, (0.5, 0.25, 0.25), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let counts = write_dataset(&cases, &splits, dir.path()).unwrap();
        assert_eq!(counts.train + counts.val + counts.test, 4);

        let train = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), counts.train * 4); // 2 breasts x 2 views
        let back = &train[0];
        let case = cases.iter().find(|c| c.patient_id == back.patient_id).unwrap();
        let breast = case.breasts.iter().find(|b| b.laterality == back.laterality).unwrap();
        let view = breast.views.iter().find(|v| v.view == back.view).unwrap();
        assert_eq!(view.image, back.image);
        assert_eq!(view.lesions.len(), back.lesions.len());
        assert_eq!(breast.label, back.breast_label);
    }
}
