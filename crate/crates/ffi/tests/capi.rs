//! Exercises the C surface the way a foreign caller would: through the
//! exported extern "C" functions, raw pointers and all.

use std::ffi::{CStr, CString};
use std::ptr;

use gode_ffi::{
    gode_basis_eval, gode_last_error, gode_model_build, gode_model_forward, gode_model_free,
    gode_model_load, gode_model_num_classes, gode_model_param_count, gode_model_save, gode_version,
    GodeModel, GodeStatus,
};

const TINY_SPEC: &str = r#"{
    "family": "gode",
    "width": 4,
    "in_channels": 1,
    "control_points": 2,
    "basis_degree": 1,
    "solver": {"step": 0.25}
}"#;

fn build_tiny(seed: u64) -> *mut GodeModel {
    let spec = CString::new(TINY_SPEC).unwrap();
    let mut handle: *mut GodeModel = ptr::null_mut();
    let status = unsafe { gode_model_build(spec.as_ptr(), seed, &mut handle) };
    assert_eq!(status, GodeStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gode_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(gode_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn build_forward_and_introspect() {
    let model = build_tiny(3);

    let mut classes = 0usize;
    assert_eq!(
        unsafe { gode_model_num_classes(model, &mut classes) },
        GodeStatus::Ok
    );
    assert_eq!(classes, 10);

    let mut params = 0u64;
    assert_eq!(
        unsafe { gode_model_param_count(model, &mut params) },
        GodeStatus::Ok
    );
    assert!(params > 0);

    let (n, c, h, w) = (2usize, 1usize, 16usize, 16usize);
    let input: Vec<f64> = (0..n * c * h * w).map(|i| (i % 7) as f64 / 7.0).collect();
    let mut logits = vec![0.0f64; n * classes];
    let status = unsafe {
        gode_model_forward(
            model,
            input.as_ptr(),
            n,
            c,
            h,
            w,
            logits.as_mut_ptr(),
            logits.len(),
        )
    };
    assert_eq!(status, GodeStatus::Ok, "{}", last_error());
    assert!(logits.iter().all(|v| v.is_finite()));
    // the two rows differ (different inputs through a real network)
    assert_ne!(&logits[..classes], &logits[classes..]);

    // wrong logits buffer length is rejected with a message
    let status =
        unsafe { gode_model_forward(model, input.as_ptr(), n, c, h, w, logits.as_mut_ptr(), 3) };
    assert_eq!(status, GodeStatus::InvalidArgument);
    assert!(last_error().contains("logits"));

    unsafe { gode_model_free(model) };
}

#[test]
fn deterministic_across_handles() {
    let a = build_tiny(11);
    let b = build_tiny(11);
    let input: Vec<f64> = (0..256).map(|i| (i as f64) / 256.0).collect();
    let mut la = vec![0.0f64; 10];
    let mut lb = vec![0.0f64; 10];
    unsafe {
        assert_eq!(
            gode_model_forward(a, input.as_ptr(), 1, 1, 16, 16, la.as_mut_ptr(), 10),
            GodeStatus::Ok
        );
        assert_eq!(
            gode_model_forward(b, input.as_ptr(), 1, 1, 16, 16, lb.as_mut_ptr(), 10),
            GodeStatus::Ok
        );
        gode_model_free(a);
        gode_model_free(b);
    }
    assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let model = build_tiny(5);
    assert_eq!(
        unsafe { gode_model_save(model, path.as_ptr()) },
        GodeStatus::Ok
    );

    let mut loaded: *mut GodeModel = ptr::null_mut();
    assert_eq!(
        unsafe { gode_model_load(path.as_ptr(), &mut loaded) },
        GodeStatus::Ok,
        "{}",
        last_error()
    );

    let input: Vec<f64> = (0..256).map(|i| ((i * 13) % 11) as f64 / 11.0).collect();
    let mut la = vec![0.0f64; 10];
    let mut lb = vec![0.0f64; 10];
    unsafe {
        gode_model_forward(model, input.as_ptr(), 1, 1, 16, 16, la.as_mut_ptr(), 10);
        gode_model_forward(loaded, input.as_ptr(), 1, 1, 16, 16, lb.as_mut_ptr(), 10);
        gode_model_free(model);
        gode_model_free(loaded);
    }
    assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn error_paths_set_messages() {
    // null spec
    let mut handle: *mut GodeModel = ptr::null_mut();
    assert_eq!(
        unsafe { gode_model_build(ptr::null(), 0, &mut handle) },
        GodeStatus::NullArgument
    );

    // malformed json
    let bad = CString::new("{not json").unwrap();
    assert_eq!(
        unsafe { gode_model_build(bad.as_ptr(), 0, &mut handle) },
        GodeStatus::InvalidArgument
    );
    assert!(last_error().contains("spec parse"));

    // invalid basis configuration surfaces as invalid argument
    let degenerate =
        CString::new(r#"{"family":"gode","control_points":1,"basis_degree":2}"#).unwrap();
    assert_eq!(
        unsafe { gode_model_build(degenerate.as_ptr(), 0, &mut handle) },
        GodeStatus::InvalidArgument
    );

    // missing checkpoint file
    let missing = CString::new("/no/such/file.ckpt").unwrap();
    assert_eq!(
        unsafe { gode_model_load(missing.as_ptr(), &mut handle) },
        GodeStatus::Io
    );

    // free(null) is a no-op
    unsafe { gode_model_free(ptr::null_mut()) };
}

#[test]
fn basis_eval_partition_of_unity() {
    let mut out = vec![0.0f64; 5];
    for t in [0.0, 0.3, 0.77, 1.0] {
        assert_eq!(
            unsafe { gode_basis_eval(2, 5, 1.0, t, out.as_mut_ptr()) },
            GodeStatus::Ok
        );
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(out.iter().all(|&v| v >= 0.0));
    }
    // out-of-domain t
    assert_eq!(
        unsafe { gode_basis_eval(2, 5, 1.0, 1.5, out.as_mut_ptr()) },
        GodeStatus::InvalidArgument
    );
    // degenerate basis
    assert_eq!(
        unsafe { gode_basis_eval(3, 2, 1.0, 0.5, out.as_mut_ptr()) },
        GodeStatus::InvalidArgument
    );
}
