use std::ffi::{CStr, CString};
use std::ptr;

use phreg_ffi::*;

fn teacher() -> *mut PhregModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { phreg_teacher_new(ptr::null(), &mut m) }, PhregStatus::Ok);
    assert!(!m.is_null());
    m
}

fn ramp(h: usize, w: usize) -> Vec<f32> {
    (0..h * w * 3).map(|i| (i % 97) as f32 / 97.0).collect()
}

fn read(f: *const PhregFeatures) -> (Vec<f32>, Vec<u32>, [usize; 3]) {
    let (mut r, mut c, mut d) = (0, 0, 0);
    unsafe {
        assert_eq!(phreg_features_shape(f, &mut r, &mut c, &mut d), PhregStatus::Ok);
        let data = std::slice::from_raw_parts(phreg_features_data(f), r * c * d).to_vec();
        let cov = std::slice::from_raw_parts(phreg_features_coverage(f), r * c).to_vec();
        (data, cov, [r, c, d])
    }
}

fn last_error() -> String {
    let p = phreg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn forward_and_single_view_denoise_agree() {
    let m = teacher();
    let (mut h, mut w, mut k, mut d, mut regs) = (0, 0, 0, 0, 0);
    assert_eq!(unsafe { phreg_model_info(m, &mut h, &mut w, &mut k, &mut d, &mut regs) }, PhregStatus::Ok);
    assert_eq!(regs, 0);
    let px = ramp(h, w);
    let (mut raw, mut den) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(phreg_forward(m, px.as_ptr(), h, w, &mut raw), PhregStatus::Ok);
        assert_eq!(phreg_denoise(m, px.as_ptr(), h, w, 1, 3, &mut den), PhregStatus::Ok);
    }
    let (a, cov_a, shape) = read(raw);
    let (b, cov_b, _) = read(den);
    assert_eq!(shape, [h / k, w / k, d]);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(cov_a.iter().chain(&cov_b).all(|&c| c == 1));
    unsafe {
        phreg_features_free(raw);
        phreg_features_free(den);
        phreg_model_free(m);
    }
}

#[test]
fn denoise_is_deterministic_and_fully_covered() {
    let m = teacher();
    let px = ramp(32, 32);
    let run = || {
        let mut f = ptr::null_mut();
        assert_eq!(unsafe { phreg_denoise(m, px.as_ptr(), 32, 32, 6, 11, &mut f) }, PhregStatus::Ok);
        let out = read(f);
        unsafe { phreg_features_free(f) };
        out
    };
    let (a, cov, _) = run();
    let (b, _, _) = run();
    assert_eq!(a, b);
    assert!(cov.iter().all(|&c| (1..=6).contains(&c)));
    unsafe { phreg_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut f = ptr::null_mut();
    let px = ramp(32, 32);
    assert_eq!(unsafe { phreg_forward(ptr::null(), px.as_ptr(), 32, 32, &mut f) }, PhregStatus::NullPointer);
    assert!(last_error().contains("model"));

    let m = teacher();
    // 30 is not a multiple of the patch size.
    assert_eq!(unsafe { phreg_forward(m, px.as_ptr(), 30, 30, &mut f) }, PhregStatus::InvalidArgument);
    assert!(f.is_null());
    assert_eq!(unsafe { phreg_denoise(m, px.as_ptr(), 32, 32, 0, 0, &mut f) }, PhregStatus::InvalidArgument);

    let missing = CString::new("/nonexistent/model.phrg").unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { phreg_model_load(missing.as_ptr(), &mut loaded) }, PhregStatus::Io);
    assert!(last_error().contains("/nonexistent/model.phrg"));

    let bad = CString::new("bogus = 1").unwrap();
    assert_eq!(unsafe { phreg_teacher_new(bad.as_ptr(), &mut loaded) }, PhregStatus::Config);
    unsafe {
        phreg_model_free(m);
        phreg_model_free(ptr::null_mut());
        phreg_features_free(ptr::null_mut());
    }
}

#[test]
fn save_then_load_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.phrg").to_str().unwrap()).unwrap();
    let m = teacher();
    assert_eq!(unsafe { phreg_model_save(m, path.as_ptr()) }, PhregStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { phreg_model_load(path.as_ptr(), &mut back) }, PhregStatus::Ok);
    let px = ramp(32, 32);
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        phreg_forward(m, px.as_ptr(), 32, 32, &mut a);
        phreg_forward(back, px.as_ptr(), 32, 32, &mut b);
    }
    assert_eq!(read(a).0, read(b).0);
    unsafe {
        phreg_features_free(a);
        phreg_features_free(b);
        phreg_model_free(m);
        phreg_model_free(back);
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/phreg.h")).unwrap();
    for sym in [
        "phreg_last_error",
        "phreg_teacher_new",
        "phreg_model_load",
        "phreg_model_free",
        "phreg_forward",
        "phreg_denoise",
        "phreg_features_data",
        "phreg_features_free",
        "PHREG_STATUS_OK",
        "typedef struct PhregModel PhregModel",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}
