//! ROI extraction from RF frames: tiling along the needle trace, resizing,
//! and per-ROI intensity normalization.
//!
//! Geometry is specified in millimetres and snapped to the pixel raster.
//! The pixel pitch per axis is `extent_mm / pixel_count`. Windows are laid
//! on a regular stride grid and kept when their fractional overlap with the
//! needle mask (mask pixels inside the window divided by window pixel count)
//! reaches the threshold.
//!
//! Window order is lateral-major: the lateral anchor advances in the outer
//! loop and the axial anchor in the inner loop, so index
//! `= i_lateral * n_axial + i_axial`. The order is part of the bag contract
//! because positional embeddings downstream key on it being stable.

use crate::container::Container;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Raw per-core RF frame: echo amplitudes on an axial × lateral grid.
#[derive(Debug, Clone)]
pub struct RfImage {
    /// Axial (depth) × lateral (width) echo amplitudes.
    pub samples: Array2<f32>,
    pub depth_mm: f64,
    pub width_mm: f64,
    pub core_id: String,
}

impl RfImage {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.samples.dim();
        if r < 2 || c < 2 {
            return Err(Error::InvalidInput(format!(
                "image {}: needs at least 2x2 samples, got {r}x{c}",
                self.core_id
            )));
        }
        if !(self.depth_mm > 0.0 && self.width_mm > 0.0) {
            return Err(Error::InvalidInput(format!(
                "image {}: non-positive physical extent",
                self.core_id
            )));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "image {}: non-finite amplitude",
                self.core_id
            )));
        }
        Ok(())
    }

    /// Pixel pitch (mm/px) along (axial, lateral).
    pub fn pitch_mm(&self) -> (f64, f64) {
        let (r, c) = self.samples.dim();
        (self.depth_mm / r as f64, self.width_mm / c as f64)
    }
}

/// Boolean raster aligned with the paired [`RfImage`] pixel grid.
#[derive(Debug, Clone)]
pub struct NeedleMask {
    pub mask: Array2<bool>,
}

/// ROI tiling parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoiSpec {
    pub roi_size_mm: f64,
    pub stride_mm: f64,
    /// Minimum fraction of window pixels inside the mask.
    pub overlap_threshold: f64,
    /// (height, width) of the resized ROI.
    pub output_size_px: (usize, usize),
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec {
            roi_size_mm: 5.0,
            stride_mm: 1.0,
            overlap_threshold: 0.66,
            output_size_px: (256, 256),
        }
    }
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride_mm > 0.0 && self.stride_mm <= self.roi_size_mm) {
            return Err(Error::InvalidInput(format!(
                "stride {} must be in (0, roi_size {}]",
                self.stride_mm, self.roi_size_mm
            )));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "overlap threshold {} must be in (0, 1]",
                self.overlap_threshold
            )));
        }
        if self.output_size_px.0 == 0 || self.output_size_px.1 == 0 {
            return Err(Error::InvalidInput("output size must be nonzero".into()));
        }
        Ok(())
    }

    /// Number of grid anchors along an axis of the given extent.
    pub fn anchors(&self, extent_mm: f64) -> usize {
        if extent_mm < self.roi_size_mm {
            return 0;
        }
        ((extent_mm - self.roi_size_mm) / self.stride_mm + 1e-9).floor() as usize + 1
    }

    /// Quantized grid index of an anchor position.
    pub fn grid_index(&self, anchor_mm: f64) -> usize {
        (anchor_mm / self.stride_mm).round() as usize
    }
}

/// Top-left anchor of a window, in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiPosition {
    pub axial_mm: f64,
    pub lateral_mm: f64,
}

/// A normalized bag of ROIs for one core.
#[derive(Debug, Clone)]
pub struct RoiBag {
    /// `[n, out_h, out_w]`, every value in [0, 1].
    pub rois: Array3<f32>,
    pub positions: Vec<RoiPosition>,
    pub core_id: String,
}

impl RoiBag {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Summed-area table over the mask for O(1) window counts.
pub(crate) struct IntegralMask {
    table: Vec<u64>,
    rows: usize,
    cols: usize,
}

impl IntegralMask {
    pub(crate) fn new(mask: &Array2<bool>) -> Self {
        let (rows, cols) = mask.dim();
        let w = cols + 1;
        let mut table = vec![0u64; (rows + 1) * w];
        for r in 0..rows {
            for c in 0..cols {
                let v = u64::from(mask[[r, c]]);
                table[(r + 1) * w + (c + 1)] =
                    v + table[r * w + (c + 1)] + table[(r + 1) * w + c] - table[r * w + c];
            }
        }
        IntegralMask { table, rows, cols }
    }

    /// Count of true pixels in rows [r0, r1) × cols [c0, c1).
    pub(crate) fn count(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> u64 {
        debug_assert!(r1 <= self.rows && c1 <= self.cols);
        let w = self.cols + 1;
        self.table[r1 * w + c1] + self.table[r0 * w + c0]
            - self.table[r0 * w + c1]
            - self.table[r1 * w + c0]
    }
}

/// Pixel rectangle of a window anchored at `pos`, snapped to the raster and
/// clamped so it fits inside the image.
pub(crate) fn window_rect(
    pos: RoiPosition,
    roi_size_mm: f64,
    pitch: (f64, f64),
    dims: (usize, usize),
) -> (usize, usize, usize, usize) {
    let (pitch_ax, pitch_lat) = pitch;
    let (rows, cols) = dims;
    let h_px = ((roi_size_mm / pitch_ax).round() as usize).clamp(1, rows);
    let w_px = ((roi_size_mm / pitch_lat).round() as usize).clamp(1, cols);
    let r0 = ((pos.axial_mm / pitch_ax).round() as usize).min(rows - h_px);
    let c0 = ((pos.lateral_mm / pitch_lat).round() as usize).min(cols - w_px);
    (r0, r0 + h_px, c0, c0 + w_px)
}

/// Every stride-grid window whose overlap with the mask reaches the
/// threshold, in lateral-major order, with its raw pixel samples.
pub fn tile_rois(
    image: &RfImage,
    mask: &NeedleMask,
    spec: &RoiSpec,
) -> Result<Vec<(Array2<f32>, RoiPosition)>> {
    image.validate()?;
    spec.validate()?;
    if mask.mask.dim() != image.samples.dim() {
        return Err(Error::Alignment(format!(
            "mask {:?} does not match image {:?}",
            mask.mask.dim(),
            image.samples.dim()
        )));
    }
    let pitch = image.pitch_mm();
    let dims = image.samples.dim();
    let integral = IntegralMask::new(&mask.mask);

    let n_ax = spec.anchors(image.depth_mm);
    let n_lat = spec.anchors(image.width_mm);
    let mut out = Vec::new();
    for i_lat in 0..n_lat {
        for i_ax in 0..n_ax {
            let pos = RoiPosition {
                axial_mm: i_ax as f64 * spec.stride_mm,
                lateral_mm: i_lat as f64 * spec.stride_mm,
            };
            let (r0, r1, c0, c1) = window_rect(pos, spec.roi_size_mm, pitch, dims);
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            let frac = integral.count(r0, r1, c0, c1) as f64 / area;
            if frac >= spec.overlap_threshold {
                let window = image
                    .samples
                    .slice(ndarray::s![r0..r1, c0..c1])
                    .to_owned();
                out.push((window, pos));
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with endpoint-aligned sampling; same-size input is
/// returned unchanged and constant inputs stay constant.
pub fn resize_roi(window: &Array2<f32>, out_h: usize, out_w: usize) -> Result<Array2<f32>> {
    let (h, w) = window.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "degenerate resize {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    let src_y = |i: usize| -> f64 {
        if out_h == 1 {
            (h - 1) as f64 / 2.0
        } else {
            i as f64 * (h - 1) as f64 / (out_h - 1) as f64
        }
    };
    let src_x = |j: usize| -> f64 {
        if out_w == 1 {
            (w - 1) as f64 / 2.0
        } else {
            j as f64 * (w - 1) as f64 / (out_w - 1) as f64
        }
    };
    let mut out = Array2::zeros((out_h, out_w));
    for i in 0..out_h {
        let y = src_y(i);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = (y - y0 as f64) as f32;
        for j in 0..out_w {
            let x = src_x(j);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = (x - x0 as f64) as f32;
            let a = window[[y0, x0]];
            let b = window[[y0, x1]];
            let c = window[[y1, x0]];
            let d = window[[y1, x1]];
            out[[i, j]] = a * (1.0 - fy) * (1.0 - fx)
                + b * (1.0 - fy) * fx
                + c * fy * (1.0 - fx)
                + d * fy * fx;
        }
    }
    Ok(out)
}

/// Clamp values beyond ±4σ of the per-ROI mean, then min-max rescale to
/// [0, 1]. A constant ROI maps to 0.5 everywhere.
pub fn normalize_roi(roi: &Array2<f32>) -> Array2<f32> {
    let n = roi.len() as f64;
    let mean = roi.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = roi
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let lo = (mean - 4.0 * std) as f32;
    let hi = (mean + 4.0 * std) as f32;
    let clamped = roi.mapv(|v| v.clamp(lo, hi));
    let min = clamped.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = clamped.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max > min {
        clamped.mapv(|v| (v - min) / (max - min))
    } else {
        Array2::from_elem(roi.dim(), 0.5)
    }
}

/// tile → resize → normalize. Errors when no window qualifies.
pub fn build_bag(image: &RfImage, mask: &NeedleMask, spec: &RoiSpec) -> Result<RoiBag> {
    let tiles = tile_rois(image, mask, spec)?;
    if tiles.is_empty() {
        return Err(Error::EmptyBag(format!(
            "core {}: no window overlaps the needle trace by >= {}",
            image.core_id, spec.overlap_threshold
        )));
    }
    let (oh, ow) = spec.output_size_px;
    let mut rois = Array3::zeros((tiles.len(), oh, ow));
    let mut positions = Vec::with_capacity(tiles.len());
    for (k, (window, pos)) in tiles.into_iter().enumerate() {
        let resized = resize_roi(&window, oh, ow)?;
        rois.index_axis_mut(ndarray::Axis(0), k)
            .assign(&normalize_roi(&resized));
        positions.push(pos);
    }
    Ok(RoiBag {
        rois,
        positions,
        core_id: image.core_id.clone(),
    })
}

// --- container I/O -----------------------------------------------------

pub fn write_image(image: &RfImage, path: impl AsRef<Path>) -> Result<()> {
    let (r, c) = image.samples.dim();
    let mut con = Container::new("rf_image");
    con.set_meta("core_id", image.core_id.as_str());
    con.set_meta("depth_mm", image.depth_mm);
    con.set_meta("width_mm", image.width_mm);
    con.push_f32("samples", &[r, c], image.samples.iter().cloned().collect());
    con.write(path)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RfImage> {
    let con = Container::read(path)?;
    if con.kind != "rf_image" {
        return Err(Error::Format(format!("expected rf_image, got {}", con.kind)));
    }
    let (shape, data) = con.f32("samples")?;
    let samples = Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(RfImage {
        samples,
        depth_mm: con.meta_f64("depth_mm")?,
        width_mm: con.meta_f64("width_mm")?,
        core_id: con.meta_str("core_id")?.to_string(),
    })
}

pub fn write_mask(mask: &NeedleMask, core_id: &str, path: impl AsRef<Path>) -> Result<()> {
    let (r, c) = mask.mask.dim();
    let mut con = Container::new("needle_mask");
    con.set_meta("core_id", core_id);
    con.push_u8(
        "mask",
        &[r, c],
        mask.mask.iter().map(|&b| u8::from(b)).collect(),
    );
    con.write(path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<NeedleMask> {
    let con = Container::read(path)?;
    if con.kind != "needle_mask" {
        return Err(Error::Format(format!("expected needle_mask, got {}", con.kind)));
    }
    let (shape, data) = con.u8("mask")?;
    let mask = Array2::from_shape_vec((shape[0], shape[1]), data.iter().map(|&v| v != 0).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(NeedleMask { mask })
}

/// Writes the bag container plus a sidecar position table
/// (`<path>.positions.csv` with columns index, axial_mm, lateral_mm).
pub fn write_bag(bag: &RoiBag, spec: &RoiSpec, path: impl AsRef<Path>) -> Result<()> {
    let (n, h, w) = bag.rois.dim();
    let mut con = Container::new("roi_bag");
    con.set_meta("core_id", bag.core_id.as_str());
    con.set_meta(
        "roi_spec",
        serde_json::to_value(spec).map_err(|e| Error::Format(e.to_string()))?,
    );
    con.push_f32("rois", &[n, h, w], bag.rois.iter().cloned().collect());
    let mut pos = Vec::with_capacity(n * 2);
    for p in &bag.positions {
        pos.push(p.axial_mm);
        pos.push(p.lateral_mm);
    }
    con.push_f64("positions", &[n, 2], pos);
    con.write(path.as_ref())?;

    let csv_path = sidecar_positions_path(path.as_ref());
    let mut wtr = csv::Writer::from_path(&csv_path)?;
    wtr.write_record(["index", "axial_mm", "lateral_mm"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (i, p) in bag.positions.iter().enumerate() {
        wtr.write_record(&[i.to_string(), p.axial_mm.to_string(), p.lateral_mm.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn sidecar_positions_path(bag_path: &Path) -> std::path::PathBuf {
    let mut s = bag_path.as_os_str().to_os_string();
    s.push(".positions.csv");
    std::path::PathBuf::from(s)
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<(RoiBag, RoiSpec)> {
    let con = Container::read(path)?;
    if con.kind != "roi_bag" {
        return Err(Error::Format(format!("expected roi_bag, got {}", con.kind)));
    }
    let (shape, data) = con.f32("rois")?;
    let rois = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    let (pshape, pdata) = con.f64("positions")?;
    if pshape[1] != 2 || pshape[0] != shape[0] {
        return Err(Error::Format("positions table malformed".into()));
    }
    let positions = pdata
        .chunks_exact(2)
        .map(|c| RoiPosition {
            axial_mm: c[0],
            lateral_mm: c[1],
        })
        .collect();
    let spec: RoiSpec = serde_json::from_value(
        con.meta
            .get("roi_spec")
            .cloned()
            .ok_or_else(|| Error::Format("bag missing roi_spec meta".into()))?,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    Ok((
        RoiBag {
            rois,
            positions,
            core_id: con.meta_str("core_id")?.to_string(),
        },
        spec,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rfmil_nn::rng::{stream, tag};

    fn flat_image(rows: usize, cols: usize, depth_mm: f64, width_mm: f64) -> RfImage {
        RfImage {
            samples: Array2::from_shape_fn((rows, cols), |(r, c)| {
                ((r * 31 + c * 17) % 11) as f32 * 0.2 - 1.0
            }),
            depth_mm,
            width_mm,
            core_id: "test".into(),
        }
    }

    /// Brute-force tiling oracle: enumerates the same grid and counts mask
    /// pixels with naive loops, independently of the integral-image path.
    fn tile_rois_naive(
        image: &RfImage,
        mask: &NeedleMask,
        spec: &RoiSpec,
    ) -> Vec<RoiPosition> {
        let pitch = image.pitch_mm();
        let dims = image.samples.dim();
        let n_ax = spec.anchors(image.depth_mm);
        let n_lat = spec.anchors(image.width_mm);
        let mut out = Vec::new();
        for i_lat in 0..n_lat {
            for i_ax in 0..n_ax {
                let pos = RoiPosition {
                    axial_mm: i_ax as f64 * spec.stride_mm,
                    lateral_mm: i_lat as f64 * spec.stride_mm,
                };
                let (r0, r1, c0, c1) = window_rect(pos, spec.roi_size_mm, pitch, dims);
                let mut count = 0u64;
                for r in r0..r1 {
                    for c in c0..c1 {
                        count += u64::from(mask.mask[[r, c]]);
                    }
                }
                let frac = count as f64 / (((r1 - r0) * (c1 - c0)) as f64);
                if frac >= spec.overlap_threshold {
                    out.push(pos);
                }
            }
        }
        out
    }

    #[test]
    fn full_mask_default_spec_yields_1008_windows() {
        // 46 mm wide, 28 mm deep, 5 mm ROI, 1 mm stride: 42 lateral x 24 axial
        let image = flat_image(140, 230, 28.0, 46.0);
        let mask = NeedleMask {
            mask: Array2::from_elem((140, 230), true),
        };
        let spec = RoiSpec::default();
        let tiles = tile_rois(&image, &mask, &spec).unwrap();
        assert_eq!(tiles.len(), 1008);
        assert_eq!(tiles.len(), tile_rois_naive(&image, &mask, &spec).len());
        // lateral-major order: first window at (0,0), second advances axially
        assert_eq!(tiles[0].1, RoiPosition { axial_mm: 0.0, lateral_mm: 0.0 });
        assert_eq!(tiles[1].1, RoiPosition { axial_mm: 1.0, lateral_mm: 0.0 });
        assert_eq!(tiles[24].1, RoiPosition { axial_mm: 0.0, lateral_mm: 1.0 });
    }

    #[test]
    fn empty_mask_gives_no_windows_and_empty_bag_error() {
        let image = flat_image(60, 80, 28.0, 46.0);
        let mask = NeedleMask {
            mask: Array2::from_elem((60, 80), false),
        };
        let spec = RoiSpec::default();
        assert!(tile_rois(&image, &mask, &spec).unwrap().is_empty());
        match build_bag(&image, &mask, &spec) {
            Err(Error::EmptyBag(_)) => {}
            other => panic!("expected EmptyBag, got {other:?}"),
        }
    }

    #[test]
    fn mask_image_mismatch_is_alignment_error() {
        let image = flat_image(60, 80, 28.0, 46.0);
        let mask = NeedleMask {
            mask: Array2::from_elem((60, 81), true),
        };
        match tile_rois(&image, &mask, &RoiSpec::default()) {
            Err(Error::Alignment(_)) => {}
            other => panic!("expected Alignment, got {other:?}"),
        }
    }

    #[test]
    fn fully_contained_window_included_for_any_threshold() {
        let image = flat_image(60, 80, 30.0, 40.0);
        let mut m = Array2::from_elem((60, 80), false);
        // fill generously around the first window
        for r in 0..30 {
            for c in 0..30 {
                m[[r, c]] = true;
            }
        }
        let mask = NeedleMask { mask: m };
        let spec = RoiSpec {
            overlap_threshold: 1.0,
            ..RoiSpec::default()
        };
        let tiles = tile_rois(&image, &mask, &spec).unwrap();
        assert!(tiles
            .iter()
            .any(|(_, p)| p.axial_mm == 0.0 && p.lateral_mm == 0.0));
    }

    #[test]
    fn tiling_matches_brute_force_on_random_masks() {
        let mut rng = stream(11, &[tag("tiling")]);
        for trial in 0..200 {
            let rows = rng.gen_range(8..=64);
            let cols = rng.gen_range(8..=64);
            let depth = rng.gen_range(8.0..30.0);
            let width = rng.gen_range(8.0..30.0);
            let image = flat_image(rows, cols, depth, width);
            let density: f64 = rng.gen_range(0.2..0.9);
            let mask = NeedleMask {
                mask: Array2::from_shape_fn((rows, cols), |_| rng.gen_bool(density)),
            };
            let spec = RoiSpec {
                roi_size_mm: rng.gen_range(2.0..6.0),
                stride_mm: rng.gen_range(0.5..2.0),
                overlap_threshold: rng.gen_range(0.1..1.0),
                output_size_px: (8, 8),
            };
            let fast: Vec<RoiPosition> = tile_rois(&image, &mask, &spec)
                .unwrap()
                .into_iter()
                .map(|(_, p)| p)
                .collect();
            let naive = tile_rois_naive(&image, &mask, &spec);
            assert_eq!(fast, naive, "trial {trial} diverged");
        }
    }

    #[test]
    fn raising_threshold_never_grows_the_bag() {
        let mut rng = stream(12, &[tag("mono")]);
        let image = flat_image(50, 70, 25.0, 35.0);
        let mask = NeedleMask {
            mask: Array2::from_shape_fn((50, 70), |_| rng.gen_bool(0.5)),
        };
        let mut last = usize::MAX;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let spec = RoiSpec {
                overlap_threshold: t,
                ..RoiSpec::default()
            };
            let n = tile_rois(&image, &mask, &spec).unwrap().len();
            assert!(n <= last, "threshold {t} grew bag {last} -> {n}");
            last = n;
        }
    }

    #[test]
    fn resize_constant_stays_constant_and_identity_holds() {
        let w = Array2::from_elem((37, 11), 3.25f32);
        let out = resize_roi(&w, 256, 256).unwrap();
        assert!(out.iter().all(|&v| (v - 3.25).abs() < 1e-6));

        let w = Array2::from_shape_fn((17, 13), |(i, j)| (i * 13 + j) as f32);
        let same = resize_roi(&w, 17, 13).unwrap();
        assert_eq!(w, same);
    }

    #[test]
    fn resize_handles_paper_scale_window() {
        let w = Array2::from_shape_fn((1780, 55), |(i, j)| ((i + j) % 7) as f32);
        let out = resize_roi(&w, 256, 256).unwrap();
        assert_eq!(out.dim(), (256, 256));
    }

    #[test]
    fn degenerate_window_is_invalid_input() {
        let w = Array2::<f32>::zeros((0, 5));
        assert!(matches!(resize_roi(&w, 4, 4), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn normalize_rescales_to_unit_range() {
        let roi = Array2::from_shape_fn((16, 16), |(i, j)| (i * 16 + j) as f32 * 0.01 - 0.9);
        let out = normalize_roi(&roi);
        let min = out.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = out.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
        // affine map preserves ordering
        assert!(out[[0, 0]] < out[[15, 15]]);
    }

    #[test]
    fn normalize_clamps_far_outlier_to_four_sigma() {
        // mostly alternating ±1 with one huge spike
        let mut roi = Array2::from_shape_fn((10, 10), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        roi[[0, 0]] = 1000.0;
        let n = roi.len() as f64;
        let mean = roi.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let std = (roi.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(1000.0 > mean + 10.0 * std / 2.0); // spike is a genuine outlier
        let out = normalize_roi(&roi);
        // spike clamps to mean + 4σ and still maps to the range maximum
        assert_eq!(out[[0, 0]], 1.0);
        let second = out
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != 0)
            .map(|(_, &v)| v)
            .fold(f32::NEG_INFINITY, f32::max);
        // the +1 pixels land at (1 - min) / (clamped_max - min); without
        // clamping they would sit at 2/1001 instead
        let expected = (1.0 - (-1.0)) / ((mean + 4.0 * std) as f32 - (-1.0));
        assert!(
            (second - expected).abs() < 1e-4,
            "second max {second}, expected {expected}"
        );
        assert!((second - 2.0 / 1001.0).abs() > 1e-3, "clamp had no effect");
    }

    #[test]
    fn normalize_constant_gives_half() {
        let roi = Array2::from_elem((8, 8), -3.7f32);
        let out = normalize_roi(&roi);
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn built_bags_are_deterministic_and_in_range() {
        let image = flat_image(80, 120, 28.0, 46.0);
        let mut m = Array2::from_elem((80, 120), false);
        for r in 30..50 {
            for c in 0..120 {
                m[[r, c]] = true;
            }
        }
        let mask = NeedleMask { mask: m };
        let spec = RoiSpec {
            output_size_px: (32, 32),
            ..RoiSpec::default()
        };
        let a = build_bag(&image, &mask, &spec).unwrap();
        let b = build_bag(&image, &mask, &spec).unwrap();
        assert_eq!(a.rois, b.rois);
        assert_eq!(a.positions, b.positions);
        for k in 0..a.len() {
            let roi = a.rois.index_axis(ndarray::Axis(0), k);
            let min = roi.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = roi.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(min >= 0.0 && max <= 1.0);
            assert_eq!(min, 0.0, "non-degenerate ROI must reach 0");
            assert_eq!(max, 1.0, "non-degenerate ROI must reach 1");
        }
    }

    #[test]
    fn bag_io_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let image = flat_image(60, 90, 28.0, 46.0);
        let mask = NeedleMask {
            mask: Array2::from_elem((60, 90), true),
        };
        let spec = RoiSpec {
            stride_mm: 3.0,
            output_size_px: (16, 16),
            ..RoiSpec::default()
        };
        let bag = build_bag(&image, &mask, &spec).unwrap();
        let path = dir.path().join("core.bag.rfbc");
        write_bag(&bag, &spec, &path).unwrap();
        let (back, back_spec) = read_bag(&path).unwrap();
        assert_eq!(back.rois, bag.rois);
        assert_eq!(back.positions, bag.positions);
        assert_eq!(back_spec, spec);
        assert!(sidecar_positions_path(&path).exists());
    }
}
