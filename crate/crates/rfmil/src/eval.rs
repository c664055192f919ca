//! Data selection policy, patient-exclusive splits, classification metrics,
//! and multi-run statistics.

use crate::error::{Error, Result};
use crate::synth::{CoreLabel, ManifestRow};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// --- splits --------------------------------------------------------------

/// Patient-exclusive split fractions, applied per center then unioned.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.60,
            val_frac: 0.15,
            test_frac: 0.25,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split fractions sum to {sum}")));
        }
        if self.train_frac <= 0.0 {
            return Err(Error::InvalidInput("train fraction must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<ManifestRow>,
    pub val: Vec<ManifestRow>,
    pub test: Vec<ManifestRow>,
}

/// Split patients 60/15/25 within each center, then union the cohorts.
/// Deterministic under the seed. Centers with fewer than 3 patients get a
/// best-effort assignment (1 patient → train; 2 → train and test) and a
/// warning.
pub fn make_splits(manifest: &[ManifestRow], spec: &SplitSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::InvalidInput("empty manifest".into()));
    }
    // patient -> center consistency, and first-appearance order per center
    let mut per_center: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for row in manifest {
        match seen.get(row.patient_id.as_str()) {
            None => {
                seen.insert(&row.patient_id, &row.center_id);
                per_center.entry(&row.center_id).or_default().push(&row.patient_id);
            }
            Some(center) if *center != row.center_id => {
                return Err(Error::InvalidInput(format!(
                    "patient {} appears in centers {} and {}",
                    row.patient_id, center, row.center_id
                )));
            }
            _ => {}
        }
    }

    let mut assign: BTreeMap<&str, u8> = BTreeMap::new(); // 0 train, 1 val, 2 test
    for (center, mut patients) in per_center {
        let mut rng = rfmil_nn::rng::stream(seed, &[
            rfmil_nn::rng::tag("split"),
            rfmil_nn::rng::tag(center),
        ]);
        patients.shuffle(&mut rng);
        let n = patients.len();
        if n < 3 {
            log::warn!("center {center} has only {n} patient(s); best-effort split");
        }
        let n_train = ((spec.train_frac * n as f64).round() as usize).min(n);
        let n_val = ((spec.val_frac * n as f64).round() as usize).min(n - n_train);
        for (i, p) in patients.into_iter().enumerate() {
            let bucket = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            assign.insert(p, bucket);
        }
    }

    let mut out = Splits::default();
    for row in manifest {
        match assign[row.patient_id.as_str()] {
            0 => out.train.push(row.clone()),
            1 => out.val.push(row.clone()),
            _ => out.test.push(row.clone()),
        }
    }
    Ok(out)
}

// --- selection policy ----------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SelectionPolicy {
    /// Cancer cores with involvement at or below this are excluded.
    pub min_involvement: f64,
    /// Subsample benign cores to match the cancer count.
    pub benign_match: bool,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            min_involvement: 0.40,
            benign_match: true,
        }
    }
}

/// Drop low-involvement cancer cores, then randomly subsample benign cores
/// to the cancer count. Output preserves manifest order.
pub fn select_cores(
    manifest: &[ManifestRow],
    policy: &SelectionPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<ManifestRow>> {
    let cancer: Vec<usize> = manifest
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == CoreLabel::Cancer && r.involvement > policy.min_involvement)
        .map(|(i, _)| i)
        .collect();
    if cancer.is_empty() {
        return Err(Error::InvalidInput(
            "selection produced zero cancer cores".into(),
        ));
    }
    let mut benign: Vec<usize> = manifest
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == CoreLabel::Benign)
        .map(|(i, _)| i)
        .collect();
    if policy.benign_match && benign.len() > cancer.len() {
        benign.shuffle(rng);
        benign.truncate(cancer.len());
    } else if policy.benign_match && benign.len() < cancer.len() {
        log::warn!(
            "only {} benign cores for {} cancer cores; keeping all benign",
            benign.len(),
            cancer.len()
        );
    }
    let mut keep: Vec<usize> = cancer.into_iter().chain(benign).collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| manifest[i].clone()).collect())
}

// --- metrics ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub average_precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub n_cores: usize,
}

/// Rank-statistic AUROC (ties get half credit), step-integrated average
/// precision, and thresholded sensitivity/specificity on the cancer score.
pub fn compute_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }

    // average ranks with ties
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let auroc = u / (n_pos as f64 * n_neg as f64);

    // average precision over descending score groups
    let mut desc = order.clone();
    desc.reverse();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < desc.len() {
        let mut j = i;
        while j + 1 < desc.len() && scores[desc[j + 1]] == scores[desc[i]] {
            j += 1;
        }
        for &k in &desc[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }

    let mut tp = 0usize;
    let mut tn = 0usize;
    for (s, l) in scores.iter().zip(labels.iter()) {
        let pred = *s >= threshold;
        if *l && pred {
            tp += 1;
        }
        if !*l && !pred {
            tn += 1;
        }
    }

    Ok(MetricsReport {
        auroc,
        average_precision: ap,
        sensitivity: tp as f64 / n_pos as f64,
        specificity: tn as f64 / n_neg as f64,
        threshold,
        n_cores: scores.len(),
    })
}

// --- multi-run statistics --------------------------------------------------

/// Sample mean and (n−1)-normalized standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn gamma_ln(x: f64) -> f64 {
    // Lanczos approximation, g = 7
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
            - gamma_ln(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 3e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (gamma_ln(a + b) - gamma_ln(a) - gamma_ln(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Welch two-sample two-tailed p-value between AUROC (or any metric)
/// samples. With zero pooled variance the p-value degenerates to 1 for
/// equal means and 0 otherwise.
pub fn welch_p(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedMetric(
            "Welch test needs at least 2 runs per method".into(),
        ));
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let va = sa * sa / a.len() as f64;
    let vb = sb * sb / b.len() as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    // two-tailed: P(|T| >= |t|) = I_{dof/(dof+t^2)}(dof/2, 1/2)
    Ok(beta_inc(dof / 2.0, 0.5, dof / (dof + t * t)))
}

/// Mean ± std per metric over runs of one method.
#[derive(Debug, Clone, Serialize)]
pub struct MultiRunSummary {
    pub n_runs: usize,
    pub auroc: (f64, f64),
    pub average_precision: (f64, f64),
    pub sensitivity: (f64, f64),
    pub specificity: (f64, f64),
}

pub fn multi_run_summary(runs: &[MetricsReport]) -> Result<MultiRunSummary> {
    if runs.len() < 2 {
        return Err(Error::UndefinedMetric(
            "multi-run summary needs at least 2 runs".into(),
        ));
    }
    let take = |f: fn(&MetricsReport) -> f64| -> (f64, f64) {
        let xs: Vec<f64> = runs.iter().map(f).collect();
        mean_std(&xs)
    };
    Ok(MultiRunSummary {
        n_runs: runs.len(),
        auroc: take(|r| r.auroc),
        average_precision: take(|r| r.average_precision),
        sensitivity: take(|r| r.sensitivity),
        specificity: take(|r| r.specificity),
    })
}

/// Render summaries as a table in percent with one decimal, columns
/// AUROC / Avg-Prec / Sens / Spec.
pub fn format_summary_table(methods: &[(String, MultiRunSummary)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>14} {:>14} {:>14} {:>14}\n",
        "Method", "AUROC", "Avg-Prec", "Sens", "Spec"
    ));
    let cell = |(m, s): (f64, f64)| format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s);
    for (name, s) in methods {
        out.push_str(&format!(
            "{:<28} {:>14} {:>14} {:>14} {:>14}\n",
            name,
            cell(s.auroc),
            cell(s.average_precision),
            cell(s.sensitivity),
            cell(s.specificity),
        ));
    }
    out
}
