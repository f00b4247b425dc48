//! Phantom statistics and episode sampling invariants over the default data.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use protoseg::episodes::{eval_tasks, fold_for, make_folds, EpisodeConfig, EpisodeSampler};
use protoseg::evaluation::dice_labels;
use protoseg::phantom::{generate_phantoms, PhantomSpec};
use protoseg::volume::{image_slice, label_slice, to_bounding_box, AnnotatedVolume, MaskKind};

fn default_data() -> &'static [AnnotatedVolume] {
    static DATA: OnceLock<Vec<AnnotatedVolume>> = OnceLock::new();
    DATA.get_or_init(|| generate_phantoms(&PhantomSpec::default()).unwrap())
}

fn record(data: &[AnnotatedVolume], k: u8, p: u32) -> &AnnotatedVolume {
    data.iter().find(|r| r.class_id == k && r.patient_id == p).unwrap()
}

#[test]
fn foreground_fraction_within_bounds() {
    let extra = PhantomSpec {
        n_patients: 5,
        seed: 1,
        ..PhantomSpec::default()
    };
    let more = generate_phantoms(&extra).unwrap();
    let all: Vec<&AnnotatedVolume> = default_data().iter().chain(&more).collect();
    assert_eq!(all.len(), 100);
    for r in all {
        let frac = r.mask.foreground_count() as f64 / r.mask.labels().len() as f64;
        assert!((0.005..=0.20).contains(&frac), "class {} patient {}: {frac}", r.class_id, r.patient_id);
        assert!(r.mask.labels().iter().all(|&l| l == 0 || l == r.class_id));
        assert_eq!(r.mask.kind(), MaskKind::Full);
    }
}

#[test]
fn classes_have_distinct_shapes() {
    let data = default_data();
    let binary = |r: &AnnotatedVolume| -> Vec<u8> { r.mask.labels().iter().map(|&l| (l != 0) as u8).collect() };
    let mut inter = Vec::new();
    let mut intra = Vec::new();
    for p in 0..20 {
        for a in 1..=4u8 {
            for b in a + 1..=4 {
                inter.push(dice_labels(&binary(record(data, a, p)), &binary(record(data, b, p))).unwrap());
            }
        }
    }
    for k in 1..=4u8 {
        for p in 0..19 {
            intra.push(dice_labels(&binary(record(data, k, p)), &binary(record(data, k, p + 1))).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (inter, intra) = (mean(&inter), mean(&intra));
    assert!(inter < 0.5, "inter-class dice {inter}");
    assert!(intra > inter, "intra-class dice {intra} vs inter {inter}");
}

#[test]
fn generation_is_deterministic() {
    let spec = PhantomSpec {
        n_patients: 2,
        ..PhantomSpec::default()
    };
    assert_eq!(generate_phantoms(&spec).unwrap(), generate_phantoms(&spec).unwrap());
}

#[test]
fn folds_cover_every_class() {
    let folds = make_folds(4, 20).unwrap();
    assert_eq!(folds.len(), 4);
    let tests: Vec<u8> = folds.iter().map(|f| f.test_class).collect();
    assert_eq!(tests, [1, 2, 3, 4]);
    for f in &folds {
        assert_eq!(f.train_classes.len(), 3);
        assert!(!f.train_classes.contains(&f.test_class));
        assert!(!f.query_patients.contains(&f.support_patient));
    }
    for f in make_folds(2, 20).unwrap() {
        assert_eq!(f.train_classes.len(), 1);
    }
}

#[test]
fn episodes_respect_isolation_and_frequency() {
    let data = default_data();
    let fold = fold_for(4, 20, 2).unwrap();
    let cfg = EpisodeConfig::default();
    let sampler = EpisodeSampler::new(&fold, data, &cfg).unwrap();
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    let n = 1000;
    for i in 0..n {
        let ep = sampler.sample(i);
        assert_ne!(ep.class_id, fold.test_class);
        *counts.entry(ep.class_id).or_default() += 1;
        let kinds: Vec<MaskKind> = ep.support.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [MaskKind::Full, MaskKind::BoundingBox, MaskKind::BoundingBox, MaskKind::BoundingBox]);
        let sp = ep.support[0].patient_id;
        assert!(ep.support.iter().all(|s| s.patient_id == sp));
        let src = record(data, ep.class_id, sp);
        let boxed = to_bounding_box(&src.mask);
        for s in &ep.support {
            assert_eq!(s.image, image_slice(&src.volume, s.z));
            let full = label_slice(&src.mask, s.z);
            let weak = label_slice(&boxed, s.z);
            let want = if s.kind == MaskKind::Full { &full } else { &weak };
            assert_eq!(&s.annotation, want);
            for (&f, &b) in full.data().iter().zip(weak.data()) {
                assert!(f <= b);
            }
        }
        for q in &ep.query {
            assert_ne!(q.patient_id, sp);
            let r = record(data, ep.class_id, q.patient_id);
            assert_eq!(q.image, image_slice(&r.volume, q.z));
        }
        if i < 20 {
            assert_eq!(sampler.sample(i), ep);
        }
    }
    let expected = n as f64 / fold.train_classes.len() as f64;
    for (&k, &c) in &counts {
        let dev = (c as f64 - expected).abs() / n as f64;
        assert!(dev <= 0.05, "class {k} drawn {c} times");
    }
    assert_eq!(counts.len(), 3);
}

#[test]
fn fully_supervised_support_is_all_full() {
    let data = default_data();
    let fold = fold_for(4, 20, 1).unwrap();
    let cfg = EpisodeConfig::default().fully_supervised();
    let ep = EpisodeSampler::new(&fold, data, &cfg).unwrap().sample(0);
    assert_eq!(ep.support.len(), 4);
    assert!(ep.support.iter().all(|s| s.kind == MaskKind::Full));
}

#[test]
fn eval_tasks_hold_out_the_support_patient() {
    let data = default_data();
    let fold = fold_for(4, 20, 3).unwrap();
    let cfg = EpisodeConfig::default();
    let tasks = eval_tasks(&fold, data, &cfg).unwrap();
    assert_eq!(tasks.len(), 19);
    for t in &tasks {
        assert_eq!(t.query.class_id, 3);
        assert_ne!(t.query.patient_id, fold.support_patient);
        assert!(t.support.iter().all(|s| s.patient_id == fold.support_patient));
    }
    let again = eval_tasks(&fold, data, &cfg).unwrap();
    for (a, b) in tasks.iter().zip(&again) {
        assert_eq!(a.support, b.support);
        assert_eq!(a.query.patient_id, b.query.patient_id);
    }
}
