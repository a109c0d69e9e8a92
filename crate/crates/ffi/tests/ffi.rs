use std::ffi::{CStr, CString};
use std::ptr;

use fusion_counting_ffi::*;

fn last_error() -> String {
    let p = fc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn init_forward_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("model.fcck"));
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(fc_model_init(FcMode::Multitask, 5, &mut m), FcStatus::Ok);
        assert!(!m.is_null());

        let mut n = 0usize;
        assert_eq!(fc_model_num_params(m, &mut n), FcStatus::Ok);
        assert!(n > 100_000);

        let (h, w) = (32usize, 32usize);
        let (mut dh, mut dw) = (0usize, 0usize);
        assert_eq!(fc_density_size(h, w, &mut dh, &mut dw), FcStatus::Ok);
        assert_eq!((dh, dw), (2, 2));
        let vis = vec![0.4f32; 3 * h * w];
        let ir = vec![0.6f32; h * w];
        let mut fused = vec![-1.0f32; h * w];
        let mut density = vec![-1.0f32; dh * dw];
        let mut count = -1.0f64;
        let st = fc_model_forward(
            m,
            vis.as_ptr(),
            ir.as_ptr(),
            h,
            w,
            fused.as_mut_ptr(),
            density.as_mut_ptr(),
            &mut count,
        );
        assert_eq!(st, FcStatus::Ok);
        assert!(fused.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(density.iter().all(|v| *v >= 0.0));
        let sum: f64 = density.iter().map(|&v| f64::from(v)).sum();
        assert!((sum - count).abs() < 1e-4);

        assert_eq!(fc_model_save(m, path.as_ptr()), FcStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(fc_model_load(path.as_ptr(), &mut loaded), FcStatus::Ok);
        let mut again = vec![0.0f32; h * w];
        let st = fc_model_forward(
            loaded,
            vis.as_ptr(),
            ir.as_ptr(),
            h,
            w,
            again.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        );
        assert_eq!(st, FcStatus::Ok);
        assert_eq!(again, fused);

        let mut mode = FcMode::Series;
        assert_eq!(fc_model_mode(loaded, &mut mode), FcStatus::Ok);
        assert_eq!(mode, FcMode::Multitask);

        fc_model_free(loaded);
        fc_model_free(m);
        fc_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(fc_model_load(ptr::null(), &mut m), FcStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = cpath(&dir.path().join("absent.fcck"));
        assert_eq!(fc_model_load(missing.as_ptr(), &mut m), FcStatus::Io);
        assert!(m.is_null());

        let garbage = dir.path().join("garbage.fcck");
        std::fs::write(&garbage, b"not a checkpoint").unwrap();
        let garbage = cpath(&garbage);
        assert_eq!(fc_model_load(garbage.as_ptr(), &mut m), FcStatus::Format);
        assert!(last_error().contains("magic"));

        let (mut dh, mut dw) = (0usize, 0usize);
        assert_eq!(fc_density_size(30, 32, &mut dh, &mut dw), FcStatus::InvalidArgument);

        assert_eq!(fc_model_init(FcMode::Multitask, 1, &mut m), FcStatus::Ok);
        let vis = vec![0.5f32; 3 * 24 * 24];
        let ir = vec![0.5f32; 24 * 24];
        let st = fc_model_forward(m, vis.as_ptr(), ir.as_ptr(), 24, 24, ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, FcStatus::Compute);
        assert!(last_error().contains("divisible"));
        fc_model_free(m);
    }
}

#[test]
fn synth_dataset_writes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpath(&dir.path().join("set"));
    unsafe {
        assert_eq!(fc_synth_dataset(out.as_ptr(), 2, 32, 32, 1, 3, 4), FcStatus::Ok);
        assert_eq!(fc_synth_dataset(out.as_ptr(), 0, 32, 32, 1, 3, 4), FcStatus::InvalidArgument);
        assert_eq!(fc_synth_dataset(out.as_ptr(), 1, 20, 32, 1, 3, 4), FcStatus::InvalidArgument);
    }
    let samples = fusion_counting::data::read_dataset(&dir.path().join("set")).unwrap();
    assert_eq!(samples.len(), 2);
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(fc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fusion_counting.h")).unwrap();
    for sym in [
        "typedef struct FcModel FcModel",
        "fc_model_init",
        "fc_model_load",
        "fc_model_save",
        "fc_model_free",
        "fc_model_forward",
        "fc_synth_dataset",
        "FC_STATUS_OK = 0",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
}
