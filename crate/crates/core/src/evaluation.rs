//! Dice metrics, fold-level reports and the annotation-cost calculator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodes::{eval_tasks, Episode, EpisodeConfig, EpisodeSampler, EvalTask, FoldSpec, SupportShot};
use crate::error::{Error, Result};
use crate::model::{combine_support, prototype, segment, ModelParams};
use crate::objectives::PrototypeRegistry;
use crate::volume::{image_slice, LabelMask, MaskKind, Volume};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_WEAK_FACTOR: f64 = 15.0;

/// `2|P ∩ T| / (|P| + |T|)` over nonzero labels; two empty masks score 1.
pub fn dice_labels(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "dice",
            detail: format!("{} vs {} voxels", pred.len(), truth.len()),
        });
    }
    let (mut p, mut t, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a != 0, b != 0);
        p += a as u64;
        t += b as u64;
        both += (a && b) as u64;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

pub fn dice(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape {
            op: "dice",
            detail: format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        });
    }
    dice_labels(pred.labels(), truth.labels())
}

/// Segments every axial slice of `query` against the combined support mask,
/// thresholds, and restacks into a full mask labelled `class_id`.
pub fn predict_volume(
    params: &ModelParams,
    support: &[SupportShot],
    query: &Volume,
    class_id: u8,
    threshold: f32,
) -> Result<LabelMask> {
    let combined = combine_support(support.iter().map(|s| &s.annotation))?;
    let [d, h, w] = query.dims();
    if combined.shape() != [1, h, w] {
        return Err(Error::Shape {
            op: "predict_volume",
            detail: format!("support {:?} vs query slices {h}x{w}", combined.shape()),
        });
    }
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let probs = segment(params, &image_slice(query, z), &combined)?;
        labels.extend(probs.data().iter().map(|&p| if p >= threshold { class_id } else { 0 }));
    }
    LabelMask::new([d, h, w], labels, MaskKind::Full)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientDice {
    pub patient_id: u32,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub class_id: u8,
    /// `FSL` or `SS-FSL`.
    pub arm: String,
    pub config_digest: String,
    pub per_patient: Vec<PatientDice>,
    pub mean: f64,
    pub median: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Middle value, or the mean of the two middle values for an even count.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl DiceReport {
    pub fn new(class_id: u8, arm: &str, config_digest: &str, per_patient: Vec<PatientDice>) -> Self {
        let mut r = Self {
            class_id,
            arm: arm.to_string(),
            config_digest: config_digest.to_string(),
            per_patient,
            mean: 0.0,
            median: 0.0,
        };
        r.recompute();
        r
    }

    pub fn dice_values(&self) -> Vec<f64> {
        self.per_patient.iter().map(|p| p.dice).collect()
    }

    /// Refreshes `mean` and `median` from the per-patient list.
    pub fn recompute(&mut self) {
        let v = self.dice_values();
        self.mean = mean(&v);
        self.median = median(&v);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("dice report: {e}")))
    }
}

/// Scores every evaluation task of the fold with `predict`, one 3D dice per
/// query patient.
pub fn evaluate_with(
    fold: &FoldSpec,
    data: &[crate::volume::AnnotatedVolume],
    episode_cfg: &EpisodeConfig,
    arm: &str,
    config_digest: &str,
    mut predict: impl FnMut(&EvalTask) -> Result<LabelMask>,
) -> Result<DiceReport> {
    let tasks = eval_tasks(fold, data, episode_cfg)?;
    let mut per_patient = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let pred = predict(task)?;
        per_patient.push(PatientDice {
            patient_id: task.query.patient_id,
            dice: dice(&pred, &task.query.mask)?,
        });
    }
    Ok(DiceReport::new(fold.test_class, arm, config_digest, per_patient))
}

pub fn evaluate_fold(
    fold: &FoldSpec,
    data: &[crate::volume::AnnotatedVolume],
    params: &ModelParams,
    episode_cfg: &EpisodeConfig,
    arm: &str,
    config_digest: &str,
    threshold: f32,
) -> Result<DiceReport> {
    evaluate_with(fold, data, episode_cfg, arm, config_digest, |task| {
        predict_volume(params, &task.support, &task.query.volume, fold.test_class, threshold)
    })
}

/// `full_shot / (support_full + support_weak / weak_factor)`.
pub fn annotation_cost_ratio(full_shot: u64, support_full: u64, support_weak: u64, weak_factor: f64) -> Result<f64> {
    if !(weak_factor > 0.0 && weak_factor.is_finite()) {
        return Err(Error::Invalid(format!("weak factor must be > 0, got {weak_factor}")));
    }
    let denom = support_full as f64 + support_weak as f64 / weak_factor;
    if denom <= 0.0 {
        return Err(Error::Invalid("support set has no annotations".into()));
    }
    Ok(full_shot as f64 / denom)
}

pub const PGM_TRUTH_ONLY: u8 = 64;
pub const PGM_PREDICTION: u8 = 128;
pub const PGM_OVERLAP: u8 = 255;

/// Binary PGM of one slice: 0 background, 64 missed truth, 128 prediction
/// outside the truth, 255 overlap.
pub fn pgm_preview(pred: &[u8], truth: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if pred.len() != height * width || truth.len() != height * width {
        return Err(Error::Shape {
            op: "pgm_preview",
            detail: format!("{} / {} pixels for {height}x{width}", pred.len(), truth.len()),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pred.iter().zip(truth).map(|(&p, &t)| match (p != 0, t != 0) {
        (true, true) => PGM_OVERLAP,
        (true, false) => PGM_PREDICTION,
        (false, true) => PGM_TRUTH_ONLY,
        (false, false) => 0,
    }));
    Ok(out)
}

/// Writes `<prefix>_z<NNN>.pgm` for every slice of the pair of masks.
pub fn write_pgm_previews(dir: &Path, prefix: &str, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape {
            op: "pgm_preview",
            detail: format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [d, h, w] = pred.dims();
    for z in 0..d {
        let bytes = pgm_preview(pred.slice(z), truth.slice(z), h, w)?;
        let path = dir.join(format!("{prefix}_z{z:03}.pgm"));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Episode prototype as the trainer forms it: per query slice the mean of
/// the shot prototypes, then the mean over query slices.
pub fn episode_prototype(params: &ModelParams, ep: &Episode) -> Result<Vec<f32>> {
    if ep.support.is_empty() || ep.query.is_empty() {
        return Err(Error::Sampling(format!("episode {} has no support or no query", ep.index)));
    }
    let mut acc: Vec<f32> = Vec::new();
    let scale = 1.0 / (ep.support.len() * ep.query.len()) as f32;
    for q in &ep.query {
        for s in &ep.support {
            let p = prototype(params, &q.image, &s.annotation)?;
            if acc.is_empty() {
                acc = vec![0.0; p.numel()];
            }
            for (a, &v) in acc.iter_mut().zip(p.data()) {
                *a += v * scale;
            }
        }
    }
    Ok(acc)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Similarity of one probe episode's prototype to its own registry entry and,
/// on average, to every other entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterProbe {
    pub episode: u64,
    pub class_id: u8,
    pub intra: f64,
    pub inter: f64,
}

impl ClusterProbe {
    pub fn margin(&self) -> f64 {
        self.intra - self.inter
    }
}

/// Scores the episodes `indices` of `sampler` against the registry.
pub fn probe_clustering(
    params: &ModelParams,
    registry: &PrototypeRegistry,
    sampler: &EpisodeSampler,
    indices: impl IntoIterator<Item = u64>,
) -> Result<Vec<ClusterProbe>> {
    if registry.len() < 2 {
        return Err(Error::Invalid("clustering needs at least two registry classes".into()));
    }
    let mut out = Vec::new();
    for i in indices {
        let ep = sampler.sample(i);
        let own = registry.get(ep.class_id).ok_or(Error::MissingClass(ep.class_id as u32))?;
        let p = episode_prototype(params, &ep)?;
        let intra = cosine(&p, &own.prototype);
        let others: Vec<f64> = registry
            .iter()
            .filter(|(k, _)| *k != ep.class_id)
            .map(|(_, e)| cosine(&p, &e.prototype))
            .collect();
        out.push(ClusterProbe {
            episode: i,
            class_id: ep.class_id,
            intra,
            inter: mean(&others),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice_labels(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice_labels(&[1, 0, 0], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(dice_labels(&[0, 0], &[0, 0]).unwrap(), 1.0);
        let p = [1, 1, 1, 1, 0, 0, 0, 0];
        let t = [0, 0, 1, 1, 1, 1, 0, 0];
        assert_eq!(dice_labels(&p, &t).unwrap(), 0.5);
        assert!(dice_labels(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn labels_compare_as_binary() {
        assert_eq!(dice_labels(&[3, 0], &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0, 3.0, 6.0]), 3.0);
    }

    #[test]
    fn cost_examples() {
        assert!((annotation_cost_ratio(300, 1, 3, DEFAULT_WEAK_FACTOR).unwrap() - 250.0).abs() < 1e-12);
        assert_eq!(annotation_cost_ratio(7, 7, 0, 3.0).unwrap(), 1.0);
        assert!(annotation_cost_ratio(10, 0, 0, 15.0).is_err());
        assert!(annotation_cost_ratio(10, 1, 0, 0.0).is_err());
    }

    #[test]
    fn pgm_layout() {
        let bytes = pgm_preview(&[1, 1, 0, 0], &[1, 0, 1, 0], 2, 2).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], [255, 128, 64, 0]);
    }

    #[test]
    fn report_round_trip() {
        let entries = vec![
            PatientDice { patient_id: 1, dice: 0.25 },
            PatientDice { patient_id: 2, dice: 0.75 },
            PatientDice { patient_id: 3, dice: 0.5 },
        ];
        let r = DiceReport::new(2, "FSL", "abc", entries);
        assert_eq!(r.median, 0.5);
        assert_eq!(r.mean, 0.5);
        assert_eq!(DiceReport::from_json(&r.to_json()).unwrap(), r);
    }
}
