use std::ffi::{CStr, CString};
use std::ptr;

use wwt_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(wwt_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn new_model() -> *mut WwtModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { wwt_model_new(8, 3, &mut m) }, WwtStatus::Ok);
    assert!(!m.is_null());
    m
}

fn grey_image() -> Vec<f32> {
    vec![0.3; 64 * 64 * 3]
}

#[test]
fn classify_returns_a_distribution() {
    let m = new_model();
    let img = grey_image();
    let mut probs = [0.0f64; 8];
    let st = unsafe { wwt_classify(m, img.as_ptr(), img.len(), probs.as_mut_ptr(), probs.len()) };
    assert_eq!(st, WwtStatus::Ok);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    unsafe { wwt_model_free(m) };
}

#[test]
fn dims_and_masks() {
    let m = new_model();
    let (mut size, mut slots, mut classes) = (0u32, 0u32, 0u32);
    assert_eq!(
        unsafe { wwt_model_dims(m, &mut size, &mut slots, &mut classes) },
        WwtStatus::Ok
    );
    assert_eq!((size, slots, classes), (64, 8, 8));
    let img = grey_image();
    let mut masks = vec![0.0f64; 64 * 8];
    let st = unsafe { wwt_slot_masks(m, img.as_ptr(), img.len(), masks.as_mut_ptr(), masks.len()) };
    assert_eq!(st, WwtStatus::Ok);
    assert!(masks.iter().all(|v| v.is_finite()));
    unsafe { wwt_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = new_model();
    let img = grey_image();
    let mut probs = [0.0f64; 8];
    let st = unsafe { wwt_classify(m, img.as_ptr(), 10, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(st, WwtStatus::Shape);
    assert!(last_error().starts_with("shape:"), "{}", last_error());
    let st = unsafe {
        wwt_classify(
            ptr::null(),
            img.as_ptr(),
            img.len(),
            probs.as_mut_ptr(),
            probs.len(),
        )
    };
    assert_eq!(st, WwtStatus::NullPointer);
    let st = unsafe { wwt_classify(m, img.as_ptr(), img.len(), probs.as_mut_ptr(), 3) };
    assert_eq!(st, WwtStatus::Shape);
    let mut b = [0.0f64; 4];
    let st = unsafe { wwt_discover(m, img.as_ptr(), img.len(), 1.5, b.as_mut_ptr()) };
    assert_eq!(st, WwtStatus::InvalidArgument);
    let missing = CString::new("/nonexistent/model.wwt").unwrap();
    let mut out = ptr::null_mut();
    let st = unsafe { wwt_model_load(ptr::null(), missing.as_ptr(), &mut out) };
    assert_eq!(st, WwtStatus::Io);
    assert!(out.is_null());
    assert!(last_error().starts_with("io:"));
    unsafe { wwt_model_free(m) };
}

#[test]
fn save_and_load_round_trip() {
    let m = new_model();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.wwt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { wwt_model_save(m, path.as_ptr()) }, WwtStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe { wwt_model_load(ptr::null(), path.as_ptr(), &mut back) },
        WwtStatus::Ok
    );
    let img = grey_image();
    let (mut a, mut b) = ([0.0f64; 8], [0.0f64; 8]);
    unsafe {
        wwt_classify(m, img.as_ptr(), img.len(), a.as_mut_ptr(), 8);
        wwt_classify(back, img.as_ptr(), img.len(), b.as_mut_ptr(), 8);
        wwt_model_free(m);
        wwt_model_free(back);
    }
    assert_eq!(a, b);
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/wwt.h")).unwrap();
    for name in [
        "typedef struct WwtModel WwtModel",
        "wwt_last_error",
        "wwt_model_new",
        "wwt_model_load",
        "wwt_model_free",
        "wwt_classify",
        "wwt_discover",
        "WWT_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    assert!(!unsafe { CStr::from_ptr(wwt_version()) }
        .to_bytes()
        .is_empty());
}

#[test]
fn header_compiles_as_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"wwt.h\"\nint main(void) { WwtModel *m = 0; return wwt_model_new(8, 1, &m) == WWT_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = match std::process::Command::new("cc")
        .args([
            "-std=c99",
            "-Wall",
            "-Werror",
            "-fsyntax-only",
            "-I",
            include,
        ])
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => return, // no C compiler on this machine
    };
    assert!(status.success());
}
