use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use protoseg::checkpoint::{Checkpoint, RunMeta};
use protoseg::config::RunConfig;
use protoseg::model::{init_params, ModelConfig};
use protoseg::objectives::PrototypeRegistry;
use protoseg_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = ps_last_error();
    assert!(!p.is_null(), "an error message is set");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn small_model(dir: &Path) -> std::path::PathBuf {
    let cfg = ModelConfig {
        levels: 3,
        base_channels: 4,
        proto_dim: 8,
        input_size: [32, 32],
        paper_scale: false,
    };
    let run = RunConfig {
        model: cfg.clone(),
        ..RunConfig::default()
    };
    let path = dir.join("model.fspm");
    Checkpoint {
        params: init_params(&cfg, 1).unwrap(),
        registry: PrototypeRegistry::new(0.9),
        meta: Some(RunMeta {
            config_json: run.canonical_json(),
            digest: run.digest(),
            test_class: 1,
        }),
    }
    .write(&path)
    .unwrap();
    path
}

#[test]
fn end_to_end_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let data = cstr(dir.path());
    assert_eq!(unsafe { ps_generate_phantoms(data.as_ptr(), 2, 2, 32, 12, 3, 0.05) }, PsStatus::Ok);

    let img = |p: u32, kind: &str| cstr(&dir.path().join(format!("class1_patient{p:03}_{kind}.fsv")));
    let mut support = ptr::null_mut();
    let mut support_mask = ptr::null_mut();
    let mut query = ptr::null_mut();
    let mut truth = ptr::null_mut();
    unsafe {
        assert_eq!(ps_volume_read(img(0, "image").as_ptr(), &mut support), PsStatus::Ok);
        assert_eq!(ps_mask_read(img(0, "mask").as_ptr(), &mut support_mask), PsStatus::Ok);
        assert_eq!(ps_volume_read(img(1, "image").as_ptr(), &mut query), PsStatus::Ok);
        assert_eq!(ps_mask_read(img(1, "mask").as_ptr(), &mut truth), PsStatus::Ok);
    }

    let mut dims = [0usize; 3];
    assert_eq!(unsafe { ps_volume_dims(query, dims.as_mut_ptr()) }, PsStatus::Ok);
    assert_eq!(dims, [12, 32, 32]);

    let model_path = cstr(&small_model(dir.path()));
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ps_model_load(model_path.as_ptr(), &mut model) }, PsStatus::Ok);
    let (mut h, mut w) = (0, 0);
    assert_eq!(unsafe { ps_model_input_size(model, &mut h, &mut w) }, PsStatus::Ok);
    assert_eq!((h, w), (32, 32));

    let mut pred = ptr::null_mut();
    let status = unsafe { ps_predict(model, support, support_mask, query, 0.5, &mut pred) };
    assert_eq!(status, PsStatus::Ok);
    let mut pdims = [0usize; 3];
    assert_eq!(unsafe { ps_mask_dims(pred, pdims.as_mut_ptr()) }, PsStatus::Ok);
    assert_eq!(pdims, dims);

    let (mut labels, mut len) = (ptr::null(), 0usize);
    assert_eq!(unsafe { ps_mask_labels(pred, &mut labels, &mut len) }, PsStatus::Ok);
    assert_eq!(len, 12 * 32 * 32);
    let labels = unsafe { std::slice::from_raw_parts(labels, len) };
    assert!(labels.iter().all(|&l| l == 0 || l == 1));

    let mut d = -1.0;
    assert_eq!(unsafe { ps_dice(pred, truth, &mut d) }, PsStatus::Ok);
    assert!((0.0..=1.0).contains(&d));
    assert_eq!(unsafe { ps_dice(truth, truth, &mut d) }, PsStatus::Ok);
    assert_eq!(d, 1.0);

    let out = cstr(&dir.path().join("pred.fsv"));
    assert_eq!(unsafe { ps_mask_write(pred, out.as_ptr()) }, PsStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { ps_mask_read(out.as_ptr(), &mut back) }, PsStatus::Ok);
    assert_eq!(unsafe { ps_dice(pred, back, &mut d) }, PsStatus::Ok);
    assert_eq!(d, 1.0);

    unsafe {
        ps_mask_free(back);
        ps_mask_free(pred);
        ps_mask_free(truth);
        ps_mask_free(support_mask);
        ps_volume_free(query);
        ps_volume_free(support);
        ps_model_free(model);
    }
}

#[test]
fn in_memory_handles() {
    let voxels = [0.5f32; 2 * 4 * 4];
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { ps_volume_new(2, 4, 4, voxels.as_ptr(), &mut v) }, PsStatus::Ok);
    let mut dims = [0usize; 3];
    assert_eq!(unsafe { ps_volume_dims(v, dims.as_mut_ptr()) }, PsStatus::Ok);
    assert_eq!(dims, [2, 4, 4]);
    unsafe { ps_volume_free(v) };

    let mut a_labels = [0u8; 16];
    let mut b_labels = [0u8; 16];
    a_labels[..4].fill(1);
    b_labels[2..6].fill(1);
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(ps_mask_new(1, 4, 4, a_labels.as_ptr(), &mut a), PsStatus::Ok);
        assert_eq!(ps_mask_new(1, 4, 4, b_labels.as_ptr(), &mut b), PsStatus::Ok);
    }
    let mut d = 0.0;
    assert_eq!(unsafe { ps_dice(a, b, &mut d) }, PsStatus::Ok);
    assert!((d - 0.5).abs() < 1e-12);
    unsafe {
        ps_mask_free(a);
        ps_mask_free(b);
    }
}

#[test]
fn cost_ratio() {
    let mut r = 0.0;
    assert_eq!(unsafe { ps_annotation_cost_ratio(300, 1, 3, 15.0, &mut r) }, PsStatus::Ok);
    assert!((r - 250.0).abs() < 1e-9);
    assert_eq!(unsafe { ps_annotation_cost_ratio(300, 0, 0, 15.0, &mut r) }, PsStatus::Usage);
    assert!(!last_error().is_empty());
}

#[test]
fn errors_map_to_status_codes() {
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { ps_volume_read(ptr::null(), &mut v) }, PsStatus::NullArgument);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/volume.fsv").unwrap();
    assert_eq!(unsafe { ps_volume_read(missing.as_ptr(), &mut v) }, PsStatus::Data);
    assert!(v.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.fsv");
    std::fs::write(&junk, b"not a volume").unwrap();
    let junk = cstr(&junk);
    assert_eq!(unsafe { ps_volume_read(junk.as_ptr(), &mut v) }, PsStatus::Data);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ps_model_load(junk.as_ptr(), &mut m) }, PsStatus::Data);

    let labels = [0u8; 16];
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(ps_mask_new(1, 4, 4, labels.as_ptr(), &mut a), PsStatus::Ok);
        assert_eq!(ps_mask_new(1, 2, 8, labels.as_ptr(), &mut b), PsStatus::Ok);
    }
    let mut d = 0.0;
    assert_ne!(unsafe { ps_dice(a, b, &mut d) }, PsStatus::Ok);
    assert_eq!(unsafe { ps_dice(a, ptr::null(), &mut d) }, PsStatus::NullArgument);
    unsafe {
        ps_mask_free(a);
        ps_mask_free(b);
        ps_mask_free(ptr::null_mut());
    }

    let ok = CString::new("x").unwrap();
    assert_eq!(unsafe { ps_generate_phantoms(ok.as_ptr(), 1, 2, 32, 12, 0, 0.05) }, PsStatus::Usage);
}

#[test]
fn success_clears_last_error() {
    let mut r = 0.0;
    unsafe { ps_annotation_cost_ratio(1, 0, 0, 15.0, &mut r) };
    assert!(!ps_last_error().is_null());
    unsafe { ps_annotation_cost_ratio(1, 1, 0, 15.0, &mut r) };
    assert!(ps_last_error().is_null());
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(ps_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/protoseg.h")).unwrap();
    for f in ["ps_model_load", "ps_predict", "ps_dice", "ps_last_error", "PS_STATUS_NUMERIC = 4"] {
        assert!(header.contains(f), "header lacks {f}");
    }
}
