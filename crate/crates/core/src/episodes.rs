//! Hold-one-class-out folds and episodic support/query sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::stream_seed;
use crate::tensor::Tensor;
use crate::volume::{image_slice, label_slice, to_bounding_box, AnnotatedVolume, LabelMask, MaskKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub test_class: u8,
    pub train_classes: Vec<u8>,
    /// Patient whose annotations serve as support at evaluation time.
    pub support_patient: u32,
    pub query_patients: Vec<u32>,
}

/// One fold per class; patient 0 is the evaluation support source.
pub fn make_folds(n_classes: u8, n_patients: u32) -> Result<Vec<FoldSpec>> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    if n_patients < 2 {
        return Err(Error::Config(format!("need at least 2 patients, got {n_patients}")));
    }
    Ok((1..=n_classes)
        .map(|test_class| FoldSpec {
            test_class,
            train_classes: (1..=n_classes).filter(|&k| k != test_class).collect(),
            support_patient: 0,
            query_patients: (1..n_patients).collect(),
        })
        .collect())
}

/// The fold holding out `test_class`.
pub fn fold_for(n_classes: u8, n_patients: u32, test_class: u8) -> Result<FoldSpec> {
    make_folds(n_classes, n_patients)?
        .into_iter()
        .find(|f| f.test_class == test_class)
        .ok_or_else(|| Error::Config(format!("test class {test_class} not in 1..={n_classes}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Support shots carrying a full mask.
    pub shots_full: usize,
    /// Support shots carrying a bounding-box mask.
    pub shots_weak: usize,
    pub query_size: usize,
    /// Probability that a training query slice is drawn among slices that
    /// contain the organ.
    pub fg_slice_prob: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            shots_full: 1,
            shots_weak: 3,
            query_size: 8,
            fg_slice_prob: 0.7,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots_full + self.shots_weak == 0 {
            return Err(Error::Config("support needs at least one shot".into()));
        }
        if self.query_size == 0 {
            return Err(Error::Config("query_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_slice_prob) {
            return Err(Error::Config(format!("fg_slice_prob {} outside [0, 1]", self.fg_slice_prob)));
        }
        Ok(())
    }

    pub fn shots(&self) -> usize {
        self.shots_full + self.shots_weak
    }

    /// The same shot budget with every shot fully annotated.
    pub fn fully_supervised(&self) -> Self {
        Self {
            shots_full: self.shots(),
            shots_weak: 0,
            ..self.clone()
        }
    }

    /// Annotation kind of each support shot, full shots first.
    pub fn support_kinds(&self) -> Vec<MaskKind> {
        std::iter::repeat_n(MaskKind::Full, self.shots_full)
            .chain(std::iter::repeat_n(MaskKind::BoundingBox, self.shots_weak))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportShot {
    /// `[1, H, W]` support image slice.
    pub image: Tensor,
    /// `[1, H, W]` binary annotation (a filled box for weak shots).
    pub annotation: Tensor,
    pub kind: MaskKind,
    pub patient_id: u32,
    pub z: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySlice {
    pub image: Tensor,
    pub label: Tensor,
    pub patient_id: u32,
    pub z: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub class_id: u8,
    pub support: Vec<SupportShot>,
    pub query: Vec<QuerySlice>,
}

/// Slice indices ordered by decreasing foreground area, ties by lower z.
pub fn rank_slices_by_area(mask: &LabelMask) -> Vec<usize> {
    let mut z: Vec<usize> = (0..mask.dims()[0]).collect();
    z.sort_by_key(|&i| (std::cmp::Reverse(mask.slice_foreground(i)), i));
    z
}

/// Support shots from one annotated volume: shot `i` uses the `i`-th largest
/// foreground slice; the first `shots_full` shots keep the full mask and the
/// rest are degraded to per-slice bounding boxes.
pub fn build_support(record: &AnnotatedVolume, cfg: &EpisodeConfig) -> Vec<SupportShot> {
    let ranked = rank_slices_by_area(&record.mask);
    let boxed = (cfg.shots_weak > 0).then(|| to_bounding_box(&record.mask));
    cfg.support_kinds()
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let z = ranked[i % ranked.len()];
            let annotation = match (kind, &boxed) {
                (MaskKind::BoundingBox, Some(b)) => label_slice(b, z),
                _ => label_slice(&record.mask, z),
            };
            SupportShot {
                image: image_slice(&record.volume, z),
                annotation,
                kind,
                patient_id: record.patient_id,
                z,
            }
        })
        .collect()
}

struct ClassPool<'a> {
    records: Vec<&'a AnnotatedVolume>,
    foreground: Vec<Vec<usize>>,
}

/// Draws training episodes of one fold. Only the fold's train classes are
/// indexed, so the held-out class can never be sampled.
pub struct EpisodeSampler<'a> {
    test_class: u8,
    train_classes: Vec<u8>,
    pools: BTreeMap<u8, ClassPool<'a>>,
    cfg: EpisodeConfig,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(fold: &FoldSpec, data: &'a [AnnotatedVolume], cfg: &EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        if fold.train_classes.is_empty() {
            return Err(Error::Sampling("fold has no train classes".into()));
        }
        let mut pools = BTreeMap::new();
        for &k in &fold.train_classes {
            if k == fold.test_class {
                return Err(Error::Sampling(format!("test class {k} listed as a train class")));
            }
            let mut records: Vec<&AnnotatedVolume> = data.iter().filter(|r| r.class_id == k).collect();
            records.sort_by_key(|r| r.patient_id);
            if records.len() < 2 {
                return Err(Error::Sampling(format!(
                    "class {k} has {} patient(s); support and query need distinct patients",
                    records.len()
                )));
            }
            let foreground = records
                .iter()
                .map(|r| {
                    (0..r.mask.dims()[0])
                        .filter(|&z| r.mask.slice_foreground(z) > 0)
                        .collect()
                })
                .collect();
            pools.insert(k, ClassPool { records, foreground });
        }
        Ok(Self {
            test_class: fold.test_class,
            train_classes: fold.train_classes.clone(),
            pools,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    /// Episode number `index`; a pure function of the fold, seed and index.
    pub fn sample(&self, index: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
            self.cfg.seed,
            self.test_class as u64,
            index,
            3,
        ]));
        let class_id = self.train_classes[rng.random_range(0..self.train_classes.len())];
        let pool = &self.pools[&class_id];
        let n = pool.records.len();
        let support_idx = rng.random_range(0..n);
        let support = build_support(pool.records[support_idx], &self.cfg);

        let query = (0..self.cfg.query_size)
            .map(|_| {
                // Uniform over the other patients.
                let mut q = rng.random_range(0..n - 1);
                if q >= support_idx {
                    q += 1;
                }
                let record = pool.records[q];
                let fg = &pool.foreground[q];
                let z = if !fg.is_empty() && rng.random_bool(self.cfg.fg_slice_prob) {
                    fg[rng.random_range(0..fg.len())]
                } else {
                    rng.random_range(0..record.mask.dims()[0])
                };
                QuerySlice {
                    image: image_slice(&record.volume, z),
                    label: label_slice(&record.mask, z),
                    patient_id: record.patient_id,
                    z,
                }
            })
            .collect();
        Episode {
            index,
            class_id,
            support,
            query,
        }
    }
}

pub fn sample_episode(
    fold: &FoldSpec,
    data: &[AnnotatedVolume],
    cfg: &EpisodeConfig,
    index: u64,
) -> Result<Episode> {
    Ok(EpisodeSampler::new(fold, data, cfg)?.sample(index))
}

/// One evaluation task: a fixed support set and a whole query volume.
#[derive(Clone, Debug)]
pub struct EvalTask<'a> {
    pub support: Vec<SupportShot>,
    pub query: &'a AnnotatedVolume,
}

/// One task per query patient of the held-out class, all sharing the support
/// drawn from the fold's support patient.
pub fn eval_tasks<'a>(
    fold: &FoldSpec,
    data: &'a [AnnotatedVolume],
    cfg: &EpisodeConfig,
) -> Result<Vec<EvalTask<'a>>> {
    cfg.validate()?;
    let find = |patient: u32| {
        data.iter()
            .find(|r| r.class_id == fold.test_class && r.patient_id == patient)
            .ok_or_else(|| {
                Error::Sampling(format!("no record for class {} patient {patient}", fold.test_class))
            })
    };
    let support = build_support(find(fold.support_patient)?, cfg);
    fold.query_patients
        .iter()
        .filter(|&&p| p != fold.support_patient)
        .map(|&p| {
            Ok(EvalTask {
                support: support.clone(),
                query: find(p)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantoms, PhantomSpec};

    fn data() -> Vec<AnnotatedVolume> {
        generate_phantoms(&PhantomSpec {
            n_classes: 3,
            n_patients: 4,
            dims: [16, 32, 32],
            seed: 5,
            noise_sigma: 0.05,
        })
        .unwrap()
    }

    #[test]
    fn folds_cover_all_classes() {
        let folds = make_folds(4, 20).unwrap();
        assert_eq!(folds.len(), 4);
        let tests: Vec<u8> = folds.iter().map(|f| f.test_class).collect();
        assert_eq!(tests, vec![1, 2, 3, 4]);
        for f in &folds {
            assert!(!f.train_classes.contains(&f.test_class));
            assert_eq!(f.train_classes.len(), 3);
            assert_eq!(f.query_patients.len(), 19);
            assert!(!f.query_patients.contains(&f.support_patient));
        }
        for f in make_folds(2, 3).unwrap() {
            assert_eq!(f.train_classes.len(), 1);
        }
        assert!(make_folds(1, 20).is_err());
    }

    #[test]
    fn semi_supervised_kinds() {
        let data = data();
        let fold = fold_for(3, 4, 3).unwrap();
        let ep = sample_episode(&fold, &data, &EpisodeConfig::default(), 0).unwrap();
        let kinds: Vec<MaskKind> = ep.support.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![MaskKind::Full, MaskKind::BoundingBox, MaskKind::BoundingBox, MaskKind::BoundingBox]
        );
        let full = EpisodeConfig {
            shots_full: 4,
            shots_weak: 0,
            ..EpisodeConfig::default()
        };
        let ep = sample_episode(&fold, &data, &full, 0).unwrap();
        assert!(ep.support.iter().all(|s| s.kind == MaskKind::Full));
        assert_eq!(EpisodeConfig::default().fully_supervised().support_kinds(), vec![MaskKind::Full; 4]);
    }

    #[test]
    fn first_shot_is_largest_slice() {
        let data = data();
        let rec = &data[0];
        let shots = build_support(rec, &EpisodeConfig::default());
        let max_area = (0..16).map(|z| rec.mask.slice_foreground(z)).max().unwrap();
        assert_eq!(rec.mask.slice_foreground(shots[0].z), max_area);
        let lowest = (0..16).find(|&z| rec.mask.slice_foreground(z) == max_area).unwrap();
        assert_eq!(shots[0].z, lowest);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let data = data();
        let fold = fold_for(3, 4, 1).unwrap();
        let sampler = EpisodeSampler::new(&fold, &data, &EpisodeConfig::default()).unwrap();
        for i in 0..50 {
            let a = sampler.sample(i);
            assert_eq!(a, sampler.sample(i));
            assert_ne!(a.class_id, 1);
            let sp = a.support[0].patient_id;
            assert!(a.support.iter().all(|s| s.patient_id == sp));
            assert!(a.query.iter().all(|q| q.patient_id != sp));
        }
    }

    #[test]
    fn single_patient_class_errors() {
        let data: Vec<AnnotatedVolume> = data().into_iter().filter(|r| r.patient_id == 0).collect();
        let fold = fold_for(3, 4, 1).unwrap();
        assert!(matches!(
            EpisodeSampler::new(&fold, &data, &EpisodeConfig::default()),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn eval_tasks_skip_support_patient() {
        let data = data();
        let fold = fold_for(3, 4, 2).unwrap();
        let tasks = eval_tasks(&fold, &data, &EpisodeConfig::default()).unwrap();
        assert_eq!(tasks.len(), 3);
        for t in &tasks {
            assert_ne!(t.query.patient_id, 0);
            assert_eq!(t.query.class_id, 2);
            assert!(t.support.iter().all(|s| s.patient_id == 0));
        }
        let again = eval_tasks(&fold, &data, &EpisodeConfig::default()).unwrap();
        for (a, b) in tasks.iter().zip(&again) {
            assert_eq!(a.support, b.support);
            assert_eq!(a.query.patient_id, b.query.patient_id);
        }
    }
}
