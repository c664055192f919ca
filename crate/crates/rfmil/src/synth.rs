//! Synthetic RF-like phantom cores with ground-truth labels.
//!
//! A core is a speckle texture (sparse scatterers convolved with an axially
//! oriented modulated kernel) plus white noise, with a needle band crossing
//! the frame. Cancer cores carry a second texture painted over a contiguous
//! lateral sub-band covering the `involvement` fraction of the needle-trace
//! length. Per-core RNG streams derive from `(seed, core index)`, so
//! parallel and serial generation agree and identical seeds give
//! byte-identical datasets.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::preprocess::{self, NeedleMask, RfImage, RoiSpec};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rfmil_nn::rng::{stream, tag};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Speckle texture parameters: scatterer density (fraction of pixels),
/// amplitude scale (output standard deviation), correlation length (mm).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TextureParams {
    pub density: f64,
    pub amplitude: f64,
    pub corr_len_mm: f64,
}

/// Needle-trace band: a tilted strip across the lateral extent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NeedleBand {
    pub angle_deg: f64,
    pub width_mm: f64,
    /// Axial center of the band at lateral position 0.
    pub anchor_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomConfig {
    /// (axial, lateral) pixel counts of the frame.
    pub image_size_px: (usize, usize),
    /// (depth, width) in mm.
    pub extent_mm: (f64, f64),
    pub benign_texture: TextureParams,
    pub cancer_texture: TextureParams,
    pub needle_band: NeedleBand,
    /// Standard deviation of additive white noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size_px: (256, 360),
            extent_mm: (28.0, 46.0),
            benign_texture: TextureParams {
                density: 0.15,
                amplitude: 1.0,
                corr_len_mm: 0.8,
            },
            cancer_texture: TextureParams {
                density: 0.25,
                amplitude: 1.35,
                corr_len_mm: 0.45,
            },
            needle_band: NeedleBand {
                angle_deg: 3.0,
                width_mm: 6.0,
                anchor_mm: 12.0,
            },
            noise_level: 0.5,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_level < 0.0 {
            return Err(Error::InvalidInput("noise_level must be >= 0".into()));
        }
        if self.benign_texture == self.cancer_texture {
            return Err(Error::InvalidInput(
                "benign and cancer textures must differ in at least one parameter".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreLabel {
    Benign,
    Cancer,
}

impl fmt::Display for CoreLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreLabel::Benign => write!(f, "benign"),
            CoreLabel::Cancer => write!(f, "cancer"),
        }
    }
}

impl std::str::FromStr for CoreLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(CoreLabel::Benign),
            "cancer" => Ok(CoreLabel::Cancer),
            other => Err(Error::Format(format!("unknown label '{other}'"))),
        }
    }
}

/// A generated core: frame, needle mask, labels, and per-grid-position truth.
#[derive(Debug, Clone)]
pub struct SyntheticCore {
    pub image: RfImage,
    pub mask: NeedleMask,
    pub label: CoreLabel,
    pub involvement: f64,
    pub gleason_surrogate: u8,
    /// Cancer-painted pixels.
    pub cancer_mask: Array2<bool>,
    /// True where the tiling-grid window at (axial index, lateral index)
    /// majority-overlaps the cancer region.
    pub roi_truth: Array2<bool>,
}

impl SyntheticCore {
    /// Truth lookup for a bag position (anchors are exact stride multiples).
    pub fn truth_at(&self, pos: preprocess::RoiPosition, spec: &RoiSpec) -> bool {
        let ia = spec.grid_index(pos.axial_mm);
        let il = spec.grid_index(pos.lateral_mm);
        self.roi_truth[[ia, il]]
    }
}

/// Separable speckle field: Bernoulli scatterers convolved with a modulated
/// Gaussian along the axial axis and a plain Gaussian along the lateral
/// axis. Kernels are L2-normalized so `amplitude` sets the output scale.
fn speckle_field(
    dims: (usize, usize),
    pitch: (f64, f64),
    tex: &TextureParams,
    rng: &mut impl Rng,
) -> Array2<f32> {
    let (rows, cols) = dims;
    let mut field = Array2::<f32>::zeros((rows, cols));
    for v in field.iter_mut() {
        if rng.gen_bool(tex.density.clamp(0.0, 1.0)) {
            let z: f32 = rng.sample(StandardNormal);
            *v = z;
        }
    }

    let sigma_ax = (tex.corr_len_mm / pitch.0).max(0.51);
    let sigma_lat = (0.5 * tex.corr_len_mm / pitch.1).max(0.51);
    let k_ax = modulated_kernel(sigma_ax);
    let k_lat = gaussian_kernel(sigma_lat);

    let scale = (tex.amplitude / tex.density.max(1e-6).sqrt()) as f32;
    let mut out = convolve_separable(&field, &k_ax, &k_lat);
    out.mapv_inplace(|v| v * scale);
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let half = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-half..=half)
        .map(|t| (-(t as f64).powi(2) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm = k.iter().map(|v| v * v).sum::<f32>().sqrt();
    for v in &mut k {
        *v /= norm;
    }
    k
}

/// Gaussian envelope times a cosine carrier, mimicking the oscillatory
/// axial point response of RF data.
fn modulated_kernel(sigma: f64) -> Vec<f32> {
    let half = (3.0 * sigma).ceil() as i64;
    let wavelength = (2.0 * sigma).max(2.0);
    let mut k: Vec<f32> = (-half..=half)
        .map(|t| {
            let t = t as f64;
            ((-t * t / (2.0 * sigma * sigma)).exp()
                * (2.0 * std::f64::consts::PI * t / wavelength).cos()) as f32
        })
        .collect();
    let norm = k.iter().map(|v| v * v).sum::<f32>().sqrt();
    for v in &mut k {
        *v /= norm;
    }
    k
}

fn convolve_separable(field: &Array2<f32>, k_ax: &[f32], k_lat: &[f32]) -> Array2<f32> {
    let (rows, cols) = field.dim();
    let ha = (k_ax.len() / 2) as i64;
    let hl = (k_lat.len() / 2) as i64;
    // axial pass
    let mut tmp = Array2::<f32>::zeros((rows, cols));
    for c in 0..cols {
        for r in 0..rows {
            let mut s = 0.0f32;
            for (ki, kv) in k_ax.iter().enumerate() {
                let rr = r as i64 + ki as i64 - ha;
                if rr >= 0 && (rr as usize) < rows {
                    s += field[[rr as usize, c]] * kv;
                }
            }
            tmp[[r, c]] = s;
        }
    }
    // lateral pass
    let mut out = Array2::<f32>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0f32;
            for (ki, kv) in k_lat.iter().enumerate() {
                let cc = c as i64 + ki as i64 - hl;
                if cc >= 0 && (cc as usize) < cols {
                    s += tmp[[r, cc as usize]] * kv;
                }
            }
            out[[r, c]] = s;
        }
    }
    out
}

/// Generate one core. `involvement` must be 0 exactly when `label` is
/// benign. The cancer sub-band start is drawn from the core's RNG stream,
/// as is a mild jitter of the needle anchor and angle so cores differ.
pub fn generate_core(
    config: &PhantomConfig,
    label: CoreLabel,
    involvement: f64,
    rng_seed: u64,
    roi_spec: &RoiSpec,
) -> Result<SyntheticCore> {
    config.validate()?;
    if !(0.0..=1.0).contains(&involvement) {
        return Err(Error::InvalidInput(format!(
            "involvement {involvement} outside [0,1]"
        )));
    }
    if (label == CoreLabel::Benign) != (involvement == 0.0) {
        return Err(Error::InvalidInput(
            "label must be cancer iff involvement > 0".into(),
        ));
    }

    let (rows, cols) = config.image_size_px;
    let (depth_mm, width_mm) = config.extent_mm;
    let pitch = (depth_mm / rows as f64, width_mm / cols as f64);

    let mut rng = stream(rng_seed, &[tag("phantom")]);
    let benign = speckle_field((rows, cols), pitch, &config.benign_texture, &mut rng);
    let cancer = speckle_field((rows, cols), pitch, &config.cancer_texture, &mut rng);

    // per-core needle geometry jitter
    let anchor = config.needle_band.anchor_mm + rng.gen_range(-0.15..0.15) * depth_mm;
    let angle = (config.needle_band.angle_deg + rng.gen_range(-3.0..3.0)).to_radians();
    let halfw = config.needle_band.width_mm / 2.0;
    let line = |lat_mm: f64| anchor + angle.tan() * lat_mm;

    // cancer occupies a contiguous lateral strip over an axial band slightly
    // wider than the needle so that qualifying windows sit fully inside it
    let cancer_halfw = halfw + roi_spec.roi_size_mm / 2.0;
    let strip_len = involvement * width_mm;
    let strip_start = if strip_len < width_mm {
        rng.gen_range(0.0..(width_mm - strip_len))
    } else {
        0.0
    };
    let strip_end = strip_start + strip_len;

    let mut mask = Array2::from_elem((rows, cols), false);
    let mut cancer_mask = Array2::from_elem((rows, cols), false);
    let mut samples = Array2::<f32>::zeros((rows, cols));
    for r in 0..rows {
        let ax_mm = (r as f64 + 0.5) * pitch.0;
        for c in 0..cols {
            let lat_mm = (c as f64 + 0.5) * pitch.1;
            let center = line(lat_mm);
            mask[[r, c]] = (ax_mm - center).abs() <= halfw;
            let in_cancer = involvement > 0.0
                && (ax_mm - center).abs() <= cancer_halfw
                && lat_mm >= strip_start
                && lat_mm <= strip_end;
            cancer_mask[[r, c]] = in_cancer;
            let noise: f32 = rng.sample(StandardNormal);
            let tex = if in_cancer { cancer[[r, c]] } else { benign[[r, c]] };
            samples[[r, c]] = tex + noise * config.noise_level as f32;
        }
    }

    // per-grid-position majority-overlap truth
    let n_ax = roi_spec.anchors(depth_mm);
    let n_lat = roi_spec.anchors(width_mm);
    let integral = preprocess::IntegralMask::new(&cancer_mask);
    let mut roi_truth = Array2::from_elem((n_ax, n_lat), false);
    for il in 0..n_lat {
        for ia in 0..n_ax {
            let pos = preprocess::RoiPosition {
                axial_mm: ia as f64 * roi_spec.stride_mm,
                lateral_mm: il as f64 * roi_spec.stride_mm,
            };
            let (r0, r1, c0, c1) =
                preprocess::window_rect(pos, roi_spec.roi_size_mm, pitch, (rows, cols));
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            let frac = integral.count(r0, r1, c0, c1) as f64 / area;
            roi_truth[[ia, il]] = frac >= 0.5;
        }
    }

    let gleason_surrogate = match label {
        CoreLabel::Benign => 6,
        CoreLabel::Cancer => {
            if involvement <= 0.55 {
                7
            } else if involvement <= 0.70 {
                8
            } else if involvement <= 0.85 {
                9
            } else {
                10
            }
        }
    };

    Ok(SyntheticCore {
        image: RfImage {
            samples,
            depth_mm,
            width_mm,
            core_id: String::new(),
        },
        mask: NeedleMask { mask },
        label,
        involvement,
        gleason_surrogate,
        cancer_mask,
        roi_truth,
    })
}

/// One manifest line per core.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub core_id: String,
    pub patient_id: String,
    pub center_id: String,
    pub label: CoreLabel,
    pub involvement: f64,
    pub gleason_surrogate: u8,
    pub image_path: String,
    pub mask_path: String,
    pub truth_path: String,
}

impl ManifestRow {
    /// Bags are stored next to the image under a derived name.
    pub fn bag_path(&self) -> String {
        self.image_path.replace(".rfbc", ".bag.rfbc")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DatasetParams {
    pub n_patients: usize,
    pub cores_per_patient: usize,
    /// Per-core probability of a cancer label.
    pub cancer_rate: f64,
    pub n_centers: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_patients: 100,
            cores_per_patient: 10,
            cancer_rate: 0.4,
            n_centers: 5,
        }
    }
}

/// Cancer involvement distribution: uniform over [0.45, 0.95]. Mirrors the
/// selection policy downstream, which drops cores at or below 0.40.
pub fn draw_involvement(rng: &mut impl Rng) -> f64 {
    rng.gen_range(0.45..0.95)
}

/// Generate all cores in memory. Patients are assigned to centers
/// round-robin; every core's stream derives from `(seed, core index)`.
pub fn generate_cores(
    params: &DatasetParams,
    config: &PhantomConfig,
    roi_spec: &RoiSpec,
    seed: u64,
) -> Result<Vec<(ManifestRow, SyntheticCore)>> {
    if params.n_patients == 0 || params.cores_per_patient == 0 || params.n_centers == 0 {
        return Err(Error::InvalidInput("dataset counts must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(params.n_patients * params.cores_per_patient);
    let mut core_index = 0u64;
    for p in 0..params.n_patients {
        let patient_id = format!("p{p:04}");
        let center_id = format!("center{}", p % params.n_centers);
        for c in 0..params.cores_per_patient {
            let core_id = format!("p{p:04}_c{c:02}");
            let mut rng = stream(seed, &[tag("core"), core_index]);
            let label = if rng.gen_bool(params.cancer_rate) {
                CoreLabel::Cancer
            } else {
                CoreLabel::Benign
            };
            let involvement = match label {
                CoreLabel::Benign => 0.0,
                CoreLabel::Cancer => draw_involvement(&mut rng),
            };
            let core_seed = rng.gen::<u64>();
            let mut core = generate_core(config, label, involvement, core_seed, roi_spec)?;
            core.image.core_id = core_id.clone();
            let row = ManifestRow {
                core_id: core_id.clone(),
                patient_id: patient_id.clone(),
                center_id: center_id.clone(),
                label,
                involvement,
                gleason_surrogate: core.gleason_surrogate,
                image_path: format!("cores/{core_id}.rfbc"),
                mask_path: format!("cores/{core_id}.mask.rfbc"),
                truth_path: format!("cores/{core_id}.truth.rfbc"),
            };
            out.push((row, core));
            core_index += 1;
        }
    }
    Ok(out)
}

fn write_truth(core: &SyntheticCore, roi_spec: &RoiSpec, path: &Path) -> Result<()> {
    let (r, c) = core.cancer_mask.dim();
    let (ta, tl) = core.roi_truth.dim();
    let mut con = Container::new("core_truth");
    con.set_meta("core_id", core.image.core_id.as_str());
    con.set_meta("label", core.label.to_string());
    con.set_meta("involvement", core.involvement);
    con.set_meta("gleason_surrogate", core.gleason_surrogate as u64);
    con.set_meta(
        "roi_spec",
        serde_json::to_value(roi_spec).map_err(|e| Error::Format(e.to_string()))?,
    );
    con.push_u8(
        "cancer_mask",
        &[r, c],
        core.cancer_mask.iter().map(|&b| u8::from(b)).collect(),
    );
    con.push_u8(
        "roi_truth",
        &[ta, tl],
        core.roi_truth.iter().map(|&b| u8::from(b)).collect(),
    );
    con.write(path)
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Array2<bool>> {
    let con = Container::read(path)?;
    if con.kind != "core_truth" {
        return Err(Error::Format(format!("expected core_truth, got {}", con.kind)));
    }
    let (shape, data) = con.u8("roi_truth")?;
    Array2::from_shape_vec((shape[0], shape[1]), data.iter().map(|&v| v != 0).collect())
        .map_err(|e| Error::Format(e.to_string()))
}

/// Generate and write a full dataset: per-core containers plus
/// `manifest.csv`. Returns the manifest.
pub fn generate_dataset(
    out_dir: impl AsRef<Path>,
    params: &DatasetParams,
    config: &PhantomConfig,
    roi_spec: &RoiSpec,
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("cores"))?;
    let cores = generate_cores(params, config, roi_spec, seed)?;
    let mut manifest = Vec::with_capacity(cores.len());
    for (row, core) in &cores {
        preprocess::write_image(&core.image, out_dir.join(&row.image_path))?;
        preprocess::write_mask(&core.mask, &row.core_id, out_dir.join(&row.mask_path))?;
        write_truth(core, roi_spec, &out_dir.join(&row.truth_path))?;
        manifest.push(row.clone());
    }
    write_manifest(&manifest, out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

pub fn write_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Root directory a manifest's relative paths resolve against.
pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::tile_rois;

    fn quick_config() -> PhantomConfig {
        PhantomConfig {
            image_size_px: (96, 144),
            ..PhantomConfig::default()
        }
    }

    fn quick_spec() -> RoiSpec {
        RoiSpec {
            output_size_px: (16, 16),
            ..RoiSpec::default()
        }
    }

    #[test]
    fn benign_core_has_no_truth() {
        let core = generate_core(&quick_config(), CoreLabel::Benign, 0.0, 1, &quick_spec()).unwrap();
        assert!(core.roi_truth.iter().all(|&b| !b));
        assert_eq!(core.gleason_surrogate, 6);
        assert!(core.cancer_mask.iter().all(|&b| !b));
    }

    #[test]
    fn full_involvement_marks_every_needle_roi() {
        let config = quick_config();
        let spec = quick_spec();
        let core = generate_core(&config, CoreLabel::Cancer, 1.0, 2, &spec).unwrap();
        let tiles = tile_rois(&core.image, &core.mask, &spec).unwrap();
        assert!(!tiles.is_empty());
        for (_, pos) in &tiles {
            assert!(core.truth_at(*pos, &spec), "needle ROI at {pos:?} not marked");
        }
    }

    #[test]
    fn half_involvement_truth_fraction_in_band() {
        let config = quick_config();
        let spec = quick_spec();
        // average over several cores; edge effects move single cores around
        let mut fracs = Vec::new();
        for s in 0..10u64 {
            let core = generate_core(&config, CoreLabel::Cancer, 0.5, 100 + s, &spec).unwrap();
            let tiles = tile_rois(&core.image, &core.mask, &spec).unwrap();
            let truths = tiles
                .iter()
                .filter(|(_, p)| core.truth_at(*p, &spec))
                .count();
            fracs.push(truths as f64 / tiles.len() as f64);
        }
        for f in &fracs {
            assert!(
                (0.35..=0.65).contains(f),
                "cancer ROI fraction {f} outside [0.35, 0.65]"
            );
        }
    }

    #[test]
    fn label_involvement_consistency_is_enforced() {
        let config = quick_config();
        let spec = quick_spec();
        assert!(generate_core(&config, CoreLabel::Benign, 0.5, 1, &spec).is_err());
        assert!(generate_core(&config, CoreLabel::Cancer, 0.0, 1, &spec).is_err());
        assert!(generate_core(&config, CoreLabel::Cancer, 1.5, 1, &spec).is_err());
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let params = DatasetParams {
            n_patients: 10,
            cores_per_patient: 10,
            cancer_rate: 0.4,
            n_centers: 3,
        };
        let config = quick_config();
        let spec = quick_spec();
        let a = generate_cores(&params, &config, &spec, 42).unwrap();
        assert_eq!(a.len(), 100);
        let b = generate_cores(&params, &config, &spec, 42).unwrap();
        for ((ra, ca), (rb, cb)) in a.iter().zip(b.iter()) {
            assert_eq!(ra, rb);
            assert_eq!(ca.image.samples, cb.image.samples);
        }
        // patients round-robin over centers
        assert_eq!(a[0].0.center_id, "center0");
        assert_eq!(a[10].0.center_id, "center1");
        assert_eq!(a[30].0.center_id, "center0");
    }

    #[test]
    fn zero_cancer_rate_is_all_benign() {
        let params = DatasetParams {
            n_patients: 4,
            cores_per_patient: 3,
            cancer_rate: 0.0,
            n_centers: 2,
        };
        let cores = generate_cores(&params, &quick_config(), &quick_spec(), 7).unwrap();
        assert!(cores.iter().all(|(r, _)| r.label == CoreLabel::Benign));
    }

    #[test]
    fn involvement_draws_stay_in_selection_range() {
        let mut rng = stream(9, &[tag("inv")]);
        for _ in 0..1000 {
            let v = draw_involvement(&mut rng);
            assert!((0.45..0.95).contains(&v));
        }
    }

    #[test]
    fn textures_are_separable_by_needle_amplitude() {
        // sanity floor: mean |amplitude| inside the needle trace splits
        // involvement-1.0 cancer cores from benign cores at >= 90% accuracy
        let config = quick_config();
        let spec = quick_spec();
        let mut benign_stats = Vec::new();
        let mut cancer_stats = Vec::new();
        for s in 0..50u64 {
            let b = generate_core(&config, CoreLabel::Benign, 0.0, 2000 + s, &spec).unwrap();
            let c = generate_core(&config, CoreLabel::Cancer, 1.0, 3000 + s, &spec).unwrap();
            for (core, out) in [(b, &mut benign_stats), (c, &mut cancer_stats)] {
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for (v, m) in core.image.samples.iter().zip(core.mask.mask.iter()) {
                    if *m {
                        sum += f64::from(v.abs());
                        n += 1;
                    }
                }
                out.push(sum / n as f64);
            }
        }
        let mb = benign_stats.iter().sum::<f64>() / 50.0;
        let mc = cancer_stats.iter().sum::<f64>() / 50.0;
        let thresh = (mb + mc) / 2.0;
        let correct = benign_stats.iter().filter(|&&v| v < thresh).count()
            + cancer_stats.iter().filter(|&&v| v >= thresh).count();
        let acc = correct as f64 / 100.0;
        assert!(acc >= 0.9, "threshold separability only {acc}");
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            n_patients: 2,
            cores_per_patient: 2,
            cancer_rate: 0.5,
            n_centers: 2,
        };
        let manifest =
            generate_dataset(dir.path(), &params, &quick_config(), &quick_spec(), 5).unwrap();
        assert_eq!(manifest.len(), 4);
        let back = read_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest, back);
        let img = preprocess::read_image(dir.path().join(&manifest[0].image_path)).unwrap();
        assert_eq!(img.samples.dim(), (96, 144));
        let mask = preprocess::read_mask(dir.path().join(&manifest[0].mask_path)).unwrap();
        assert_eq!(mask.mask.dim(), (96, 144));
        read_truth(dir.path().join(&manifest[0].truth_path)).unwrap();
    }
}
