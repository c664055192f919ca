//! Per-ROI relevancy for a chosen class, computed by propagating
//! gradient-weighted positive attention through the transformer stack.
//!
//! The relevancy matrix starts as the identity and each attention layer
//! applies `R ← R + Ā·R` in forward order, where `Ā` is the head-mean of
//! the elementwise-positive part of `A ⊙ ∂score/∂A`. After the last layer
//! the initial identity is subtracted (an uninformative model then yields
//! exactly zero) and the matrix is pooled to one score per ROI.

use crate::error::{Error, Result};
use crate::preprocess::RoiPosition;
use crate::synth::CoreLabel;
use crate::transformer::CoreTransformer;
use ndarray::{Array2, Array3, Axis};
use std::path::Path;

/// Which axis of the final relevancy matrix is averaged.
///
/// `R[i, j]` accumulates how much source ROI `j` contributed to receiver
/// position `i`. With mean pooling ahead of the classifier every receiver
/// row feeds the score, so averaging over receivers credits sources. The
/// alternative is kept behind this switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelevancyPooling {
    /// Average over the first index (receivers): per-source credit.
    #[default]
    MeanOverReceivers,
    /// Average over the second index (sources): per-receiver credit.
    MeanOverSources,
}

#[derive(Debug, Clone)]
pub struct RelevancyVector {
    pub scores: Vec<f32>,
    pub class: CoreLabel,
}

/// Head-mean of the positive part of `A ⊙ ∇A` for one layer.
pub fn modified_attention(attn: &Array3<f32>, grad: &Array3<f32>) -> Result<Array2<f32>> {
    if attn.dim() != grad.dim() {
        return Err(Error::InvalidInput(format!(
            "attention {:?} and gradient {:?} shapes differ",
            attn.dim(),
            grad.dim()
        )));
    }
    let (h, n, m) = attn.dim();
    let mut out = Array2::zeros((n, m));
    for hi in 0..h {
        for i in 0..n {
            for j in 0..m {
                let v = attn[[hi, i, j]] * grad[[hi, i, j]];
                if v > 0.0 {
                    out[[i, j]] += v;
                }
            }
        }
    }
    out.mapv_inplace(|v| v / h as f32);
    Ok(out)
}

/// One propagation step: `R ← R + Ā·R`.
pub fn propagate(r: &mut Array2<f32>, abar: &Array2<f32>) {
    let update = abar.dot(r);
    *r += &update;
}

/// Relevancy scores for `class` on a bag already encoded as features.
/// Runs one forward and one backward pass; the backward is used only to
/// read `∂score/∂A`, so parameter gradients are zeroed again afterwards.
pub fn roi_relevance_from_features(
    transformer: &mut CoreTransformer,
    features: &Array2<f32>,
    pos_rows: &[usize],
    class: CoreLabel,
    pooling: RelevancyPooling,
) -> Result<RelevancyVector> {
    let n = features.nrows();
    let (_, cache) = transformer.forward(features, pos_rows)?;
    let grad_logits = match class {
        CoreLabel::Benign => [1.0, 0.0],
        CoreLabel::Cancer => [0.0, 1.0],
    };
    let mut attn_grads: Vec<Array3<f32>> = Vec::new();
    transformer.backward(&cache, grad_logits, Some(&mut attn_grads));
    // not a training step
    let mut params = Vec::new();
    transformer.collect_params(&mut params);
    for p in params {
        p.zero_grad();
    }

    let attn = cache.attention_maps();
    let mut r = Array2::eye(n);
    for (a, g) in attn.iter().zip(attn_grads.iter()) {
        let abar = modified_attention(a, g)?;
        propagate(&mut r, &abar);
    }
    for i in 0..n {
        r[[i, i]] -= 1.0;
    }
    let scores = pool_relevancy(&r, pooling);
    Ok(RelevancyVector { scores, class })
}

pub fn pool_relevancy(r: &Array2<f32>, pooling: RelevancyPooling) -> Vec<f32> {
    match pooling {
        RelevancyPooling::MeanOverReceivers => {
            r.mean_axis(Axis(0)).unwrap().to_vec()
        }
        RelevancyPooling::MeanOverSources => r.mean_axis(Axis(1)).unwrap().to_vec(),
    }
}

/// Splat per-ROI scores over their physical footprints; overlapping
/// footprints average. Output is aligned with the RF pixel grid.
pub fn map_to_image(
    rel: &RelevancyVector,
    positions: &[RoiPosition],
    image_dims: (usize, usize),
    extent_mm: (f64, f64),
    roi_size_mm: f64,
) -> Result<Array2<f32>> {
    if rel.scores.len() != positions.len() {
        return Err(Error::InvalidInput("scores/positions length mismatch".into()));
    }
    let (rows, cols) = image_dims;
    let (depth_mm, width_mm) = extent_mm;
    let pitch = (depth_mm / rows as f64, width_mm / cols as f64);
    let mut sum = Array2::<f32>::zeros((rows, cols));
    let mut count = Array2::<f32>::zeros((rows, cols));
    for (score, pos) in rel.scores.iter().zip(positions.iter()) {
        if pos.axial_mm < -1e-9
            || pos.lateral_mm < -1e-9
            || pos.axial_mm + roi_size_mm > depth_mm + 1e-9
            || pos.lateral_mm + roi_size_mm > width_mm + 1e-9
        {
            return Err(Error::InvalidInput(format!(
                "ROI at ({}, {}) mm falls outside the {depth_mm}x{width_mm} mm frame",
                pos.axial_mm, pos.lateral_mm
            )));
        }
        let (r0, r1, c0, c1) =
            crate::preprocess::window_rect(*pos, roi_size_mm, pitch, (rows, cols));
        for r in r0..r1 {
            for c in c0..c1 {
                sum[[r, c]] += *score;
                count[[r, c]] += 1.0;
            }
        }
    }
    ndarray::Zip::from(&mut sum).and(&count).for_each(|s, &c| {
        if c > 0.0 {
            *s /= c;
        }
    });
    Ok(sum)
}

/// Write a heatmap as an 8-bit grayscale PNG, scaled by the map maximum.
pub fn write_heatmap_png(heatmap: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = heatmap.dim();
    let max = heatmap.iter().cloned().fold(0.0f32, f32::max);
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            let v = if max > 0.0 {
                (heatmap[[r, c]] / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path.as_ref())
        .map_err(|e| Error::Format(format!("png save failed: {e}")))
}

/// Relevance table with one row per ROI and a score column per class.
pub fn write_relevance_csv(
    benign: &RelevancyVector,
    cancer: &RelevancyVector,
    positions: &[RoiPosition],
    path: impl AsRef<Path>,
) -> Result<()> {
    if benign.scores.len() != positions.len() || cancer.scores.len() != positions.len() {
        return Err(Error::InvalidInput("relevance/positions length mismatch".into()));
    }
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    wtr.write_record(["roi_index", "axial_mm", "lateral_mm", "benign_score", "cancer_score"])?;
    for (i, p) in positions.iter().enumerate() {
        wtr.write_record(&[
            i.to_string(),
            p.axial_mm.to_string(),
            p.lateral_mm.to_string(),
            benign.scores[i].to_string(),
            cancer.scores[i].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;
    use rand::Rng;
    use rfmil_nn::rng::{stream, tag};

    #[test]
    fn zero_or_negative_gradients_give_zero_abar() {
        let attn = Array3::from_elem((2, 3, 3), 0.4f32);
        let zeros = Array3::zeros((2, 3, 3));
        let abar = modified_attention(&attn, &zeros).unwrap();
        assert!(abar.iter().all(|&v| v == 0.0));
        let neg = Array3::from_elem((2, 3, 3), -1.0f32);
        let abar = modified_attention(&attn, &neg).unwrap();
        assert!(abar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_head_hand_computation() {
        // head 0: A=[[.5,.5],[.2,.8]], grad=[[1,-1],[2,0]]
        //   (A⊙g)+ = [[.5,0],[.4,0]]
        // head 1: A=[[1,0],[0,1]],    grad=[[-3,1],[1,4]]
        //   (A⊙g)+ = [[0,0],[0,4]]
        // mean: [[.25,0],[.2,2]]
        let mut attn = Array3::zeros((2, 2, 2));
        attn[[0, 0, 0]] = 0.5;
        attn[[0, 0, 1]] = 0.5;
        attn[[0, 1, 0]] = 0.2;
        attn[[0, 1, 1]] = 0.8;
        attn[[1, 0, 0]] = 1.0;
        attn[[1, 1, 1]] = 1.0;
        let mut grad = Array3::zeros((2, 2, 2));
        grad[[0, 0, 0]] = 1.0;
        grad[[0, 0, 1]] = -1.0;
        grad[[0, 1, 0]] = 2.0;
        grad[[1, 0, 0]] = -3.0;
        grad[[1, 0, 1]] = 1.0;
        grad[[1, 1, 0]] = 1.0;
        grad[[1, 1, 1]] = 4.0;
        let abar = modified_attention(&attn, &grad).unwrap();
        let expect = [[0.25, 0.0], [0.2, 2.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((abar[[i, j]] - expect[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let attn = Array3::zeros((2, 3, 3));
        let grad = Array3::zeros((2, 4, 4));
        assert!(modified_attention(&attn, &grad).is_err());
    }

    #[test]
    fn propagation_fixed_point_and_identity_step() {
        let mut r = Array2::<f32>::eye(4);
        propagate(&mut r, &Array2::zeros((4, 4)));
        assert_eq!(r, Array2::<f32>::eye(4));

        let mut r = Array2::<f32>::eye(3);
        let abar = Array2::<f32>::eye(3);
        propagate(&mut r, &abar);
        assert_eq!(r, Array2::<f32>::eye(3) * 2.0);
    }

    #[test]
    fn iterative_propagation_equals_closed_form_product() {
        let mut rng = stream(50, &[tag("rel")]);
        for _ in 0..20 {
            let n = rng.gen_range(2..10);
            // magnitudes like real modified attention: rows of A sum to 1
            // and gradients are small, so Ā entries are well below 1/n
            let layers: Vec<Array2<f32>> = (0..rng.gen_range(1..6))
                .map(|_| Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..0.5 / n as f32)))
                .collect();
            let mut r = Array2::<f32>::eye(n);
            for a in &layers {
                propagate(&mut r, a);
            }
            // closed form: later layers multiply on the left
            let mut product = Array2::<f32>::eye(n);
            for a in &layers {
                let factor = Array2::<f32>::eye(n) + a;
                product = factor.dot(&product);
            }
            let err = r
                .iter()
                .zip(product.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err < 1e-6, "max err {err}");
        }
    }

    fn tiny_transformer(seed: u64) -> CoreTransformer {
        let cfg = TransformerConfig {
            blocks: 3,
            heads: 2,
            dim: 16,
            mlp_dim: 32,
            input_dim: 8,
            num_classes: 2,
            roi_dropout_rate: 0.0,
            max_grid: (16, 16),
        };
        let mut rng = stream(seed, &[tag("rel-tf")]);
        CoreTransformer::new(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_classifier_yields_zero_relevance() {
        let mut tf = tiny_transformer(1);
        tf.zero_classifier();
        let mut rng = stream(2, &[tag("rel-f")]);
        let f = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0f32..1.0));
        let rows: Vec<usize> = (0..5).collect();
        let rel = roi_relevance_from_features(
            &mut tf,
            &f,
            &rows,
            CoreLabel::Cancer,
            RelevancyPooling::default(),
        )
        .unwrap();
        assert!(rel.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn relevance_length_matches_bag_size_and_is_nonnegative() {
        let mut tf = tiny_transformer(3);
        let mut rng = stream(4, &[tag("rel-f")]);
        for &n in &[1usize, 13, 55] {
            let f = Array2::from_shape_fn((n, 8), |_| rng.gen_range(-1.0f32..1.0));
            let rows: Vec<usize> = (0..n).map(|i| i % 256).collect();
            let rel = roi_relevance_from_features(
                &mut tf,
                &f,
                &rows,
                CoreLabel::Cancer,
                RelevancyPooling::default(),
            )
            .unwrap();
            assert_eq!(rel.scores.len(), n);
            assert!(rel.scores.iter().all(|&s| s >= 0.0), "negative relevance");
        }
    }

    #[test]
    fn classes_get_distinct_relevance() {
        let mut tf = tiny_transformer(5);
        let mut rng = stream(6, &[tag("rel-f")]);
        let f = Array2::from_shape_fn((7, 8), |_| rng.gen_range(-1.0f32..1.0));
        let rows: Vec<usize> = (0..7).collect();
        let benign = roi_relevance_from_features(
            &mut tf,
            &f,
            &rows,
            CoreLabel::Benign,
            RelevancyPooling::default(),
        )
        .unwrap();
        let cancer = roi_relevance_from_features(
            &mut tf,
            &f,
            &rows,
            CoreLabel::Cancer,
            RelevancyPooling::default(),
        )
        .unwrap();
        let linf = benign
            .scores
            .iter()
            .zip(&cancer.scores)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(linf > 0.0, "benign and cancer relevance identical");
    }

    #[test]
    fn heatmap_splats_and_averages() {
        let positions = vec![
            RoiPosition { axial_mm: 0.0, lateral_mm: 0.0 },
            RoiPosition { axial_mm: 0.0, lateral_mm: 5.0 },
        ];
        let rel = RelevancyVector {
            scores: vec![1.0, 3.0],
            class: CoreLabel::Cancer,
        };
        // 10x10 mm frame on a 20x20 raster: each ROI covers a 10x10 block
        let map = map_to_image(&rel, &positions, (20, 20), (10.0, 10.0), 5.0).unwrap();
        assert_eq!(map[[0, 0]], 1.0);
        assert_eq!(map[[0, 15]], 3.0);
        assert_eq!(map[[15, 15]], 0.0);

        // full overlap with equal scores stays constant over the union
        let rel = RelevancyVector {
            scores: vec![2.0, 2.0],
            class: CoreLabel::Cancer,
        };
        let positions = vec![
            RoiPosition { axial_mm: 0.0, lateral_mm: 0.0 },
            RoiPosition { axial_mm: 0.0, lateral_mm: 2.0 },
        ];
        let map = map_to_image(&rel, &positions, (20, 20), (10.0, 10.0), 5.0).unwrap();
        for c in 0..14 {
            assert_eq!(map[[0, c]], 2.0, "col {c}");
        }
    }

    #[test]
    fn out_of_bounds_position_errors() {
        let rel = RelevancyVector {
            scores: vec![1.0],
            class: CoreLabel::Benign,
        };
        let positions = vec![RoiPosition { axial_mm: 8.0, lateral_mm: 0.0 }];
        assert!(map_to_image(&rel, &positions, (20, 20), (10.0, 10.0), 5.0).is_err());
    }
}
