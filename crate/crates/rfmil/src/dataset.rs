//! In-memory datasets: manifest rows joined with their bags and ROI truth.

use crate::error::{Error, Result};
use crate::preprocess::{self, RoiBag, RoiSpec};
use crate::synth::{self, CoreLabel, ManifestRow};
use rayon::prelude::*;
use std::path::Path;

/// One core ready for training: bag, grid indices, weak label, truth.
#[derive(Debug, Clone)]
pub struct CoreSample {
    pub core_id: String,
    pub patient_id: String,
    /// 0 benign, 1 cancer.
    pub label: usize,
    pub involvement: f64,
    pub gleason_surrogate: u8,
    pub bag: RoiBag,
    /// Quantized (axial, lateral) grid index per ROI.
    pub grid: Vec<(usize, usize)>,
    /// Ground-truth cancer flag per ROI; all false when no truth file.
    pub truth: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CoreSet {
    pub cores: Vec<CoreSample>,
    pub roi_spec: RoiSpec,
}

impl CoreSet {
    pub fn len(&self) -> usize {
        self.cores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cores.is_empty()
    }

    /// Flattened (core index, roi index) pairs across all bags.
    pub fn roi_pool(&self) -> Vec<(usize, usize)> {
        let mut pool = Vec::new();
        for (ci, core) in self.cores.iter().enumerate() {
            for ri in 0..core.bag.len() {
                pool.push((ci, ri));
            }
        }
        pool
    }

    pub fn core_labels(&self) -> Vec<bool> {
        self.cores.iter().map(|c| c.label == 1).collect()
    }
}

fn load_one(root: &Path, row: &ManifestRow, spec: &RoiSpec, write_bags: bool) -> Result<CoreSample> {
    let bag_path = root.join(row.bag_path());
    let bag = if bag_path.exists() {
        let (bag, bag_spec) = preprocess::read_bag(&bag_path)?;
        if bag_spec != *spec {
            return Err(Error::ConfigMismatch(format!(
                "bag {} was built with a different ROI spec",
                bag_path.display()
            )));
        }
        bag
    } else {
        let image = preprocess::read_image(root.join(&row.image_path))?;
        let mask = preprocess::read_mask(root.join(&row.mask_path))?;
        let bag = preprocess::build_bag(&image, &mask, spec)?;
        if write_bags {
            preprocess::write_bag(&bag, spec, &bag_path)?;
        }
        bag
    };

    let truth_path = root.join(&row.truth_path);
    let truth = if !row.truth_path.is_empty() && truth_path.exists() {
        let grid = synth::read_truth(&truth_path)?;
        bag.positions
            .iter()
            .map(|p| {
                let ia = spec.grid_index(p.axial_mm);
                let il = spec.grid_index(p.lateral_mm);
                ia < grid.nrows() && il < grid.ncols() && grid[[ia, il]]
            })
            .collect()
    } else {
        vec![false; bag.len()]
    };

    let grid = bag
        .positions
        .iter()
        .map(|p| (spec.grid_index(p.axial_mm), spec.grid_index(p.lateral_mm)))
        .collect();

    Ok(CoreSample {
        core_id: row.core_id.clone(),
        patient_id: row.patient_id.clone(),
        label: usize::from(row.label == CoreLabel::Cancer),
        involvement: row.involvement,
        gleason_surrogate: row.gleason_surrogate,
        bag,
        grid,
        truth,
    })
}

/// Load (building bags on demand) every core of a manifest slice.
/// Loading is parallel per core; output order follows the manifest.
pub fn load_coreset(
    root: impl AsRef<Path>,
    rows: &[ManifestRow],
    spec: &RoiSpec,
    write_bags: bool,
) -> Result<CoreSet> {
    let root = root.as_ref();
    let cores: Result<Vec<CoreSample>> = rows
        .par_iter()
        .map(|row| load_one(root, row, spec, write_bags))
        .collect();
    Ok(CoreSet {
        cores: cores?,
        roi_spec: spec.clone(),
    })
}

/// Build and persist bags (with position sidecars) for a whole manifest.
pub fn preprocess_manifest(
    root: impl AsRef<Path>,
    rows: &[ManifestRow],
    spec: &RoiSpec,
) -> Result<usize> {
    let root = root.as_ref();
    let n: Result<Vec<usize>> = rows
        .par_iter()
        .map(|row| {
            let image = preprocess::read_image(root.join(&row.image_path))?;
            let mask = preprocess::read_mask(root.join(&row.mask_path))?;
            let bag = preprocess::build_bag(&image, &mask, spec)?;
            preprocess::write_bag(&bag, spec, root.join(row.bag_path()))?;
            Ok(bag.len())
        })
        .collect();
    Ok(n?.into_iter().sum())
}

#[cfg(test)]
pub mod tests {
    use super::*;
    use crate::preprocess::RoiPosition;
    use ndarray::Array3;
    use rand::Rng;
    use rfmil_nn::rng::{stream, tag};

    /// Small synthetic in-memory core set. Labels differ in spatial
    /// structure (checkerboard vs smooth ramp) rather than mean level,
    /// which per-sample normalization inside the backbone would erase.
    pub fn tiny_coreset(n_cores: usize, bag_size: usize, roi_px: usize, seed: u64) -> CoreSet {
        let spec = RoiSpec {
            stride_mm: 1.0,
            output_size_px: (roi_px, roi_px),
            ..RoiSpec::default()
        };
        let mut cores = Vec::new();
        for ci in 0..n_cores {
            let label = ci % 2;
            let mut rng = stream(seed, &[tag("tiny"), ci as u64]);
            let rois = Array3::from_shape_fn((bag_size, roi_px, roi_px), |(_, i, j)| {
                let pattern = if label == 1 {
                    0.5 * (((i + j) % 2) as f32)
                } else {
                    0.5 * (i as f32 / roi_px as f32)
                };
                (pattern + rng.gen_range(0.0f32..0.5)).clamp(0.0, 1.0)
            });
            let positions: Vec<RoiPosition> = (0..bag_size)
                .map(|ri| RoiPosition {
                    axial_mm: (ri % 4) as f64,
                    lateral_mm: (ri / 4) as f64,
                })
                .collect();
            let grid = positions
                .iter()
                .map(|p| (spec.grid_index(p.axial_mm), spec.grid_index(p.lateral_mm)))
                .collect();
            let truth = (0..bag_size).map(|_| label == 1).collect();
            cores.push(CoreSample {
                core_id: format!("t{ci:03}"),
                patient_id: format!("tp{ci:03}"),
                label,
                involvement: if label == 1 { 0.8 } else { 0.0 },
                gleason_surrogate: if label == 1 { 8 } else { 6 },
                bag: RoiBag {
                    rois,
                    positions,
                    core_id: format!("t{ci:03}"),
                },
                grid,
                truth,
            });
        }
        CoreSet {
            cores,
            roi_spec: spec,
        }
    }

    #[test]
    fn roi_pool_flattens_bags() {
        let set = tiny_coreset(3, 5, 8, 1);
        let pool = set.roi_pool();
        assert_eq!(pool.len(), 15);
        assert_eq!(pool[0], (0, 0));
        assert_eq!(pool[14], (2, 4));
    }

    #[test]
    fn load_coreset_round_trips_generated_data() {
        let dir = tempfile::tempdir().unwrap();
        let params = crate::synth::DatasetParams {
            n_patients: 2,
            cores_per_patient: 2,
            cancer_rate: 0.5,
            n_centers: 1,
        };
        let config = crate::synth::PhantomConfig {
            image_size_px: (96, 144),
            ..Default::default()
        };
        let spec = RoiSpec {
            stride_mm: 2.0,
            output_size_px: (16, 16),
            ..RoiSpec::default()
        };
        let manifest =
            crate::synth::generate_dataset(dir.path(), &params, &config, &spec, 12).unwrap();
        let set = load_coreset(dir.path(), &manifest, &spec, true).unwrap();
        assert_eq!(set.len(), 4);
        for core in &set.cores {
            assert!(!core.bag.is_empty());
            assert_eq!(core.bag.len(), core.truth.len());
            assert_eq!(core.bag.len(), core.grid.len());
            if core.label == 1 && core.involvement >= 0.99 {
                assert!(core.truth.iter().all(|&t| t));
            }
            if core.label == 0 {
                assert!(core.truth.iter().all(|&t| !t));
            }
        }
        // bags were persisted; a second load reads them back identically
        let again = load_coreset(dir.path(), &manifest, &spec, false).unwrap();
        for (a, b) in set.cores.iter().zip(again.cores.iter()) {
            assert_eq!(a.bag.rois, b.bag.rois);
        }
    }

    #[test]
    fn mismatched_bag_spec_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let params = crate::synth::DatasetParams {
            n_patients: 1,
            cores_per_patient: 1,
            cancer_rate: 0.0,
            n_centers: 1,
        };
        let config = crate::synth::PhantomConfig {
            image_size_px: (96, 144),
            ..Default::default()
        };
        let spec = RoiSpec {
            stride_mm: 2.0,
            output_size_px: (16, 16),
            ..RoiSpec::default()
        };
        let manifest =
            crate::synth::generate_dataset(dir.path(), &params, &config, &spec, 13).unwrap();
        load_coreset(dir.path(), &manifest, &spec, true).unwrap();
        let other = RoiSpec {
            stride_mm: 3.0,
            output_size_px: (16, 16),
            ..RoiSpec::default()
        };
        match load_coreset(dir.path(), &manifest, &other, false) {
            Err(Error::ConfigMismatch(_)) => {}
            other => panic!("expected ConfigMismatch, got {other:?}"),
        }
    }
}
