use std::ffi::{c_void, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use matfuse_ffi::*;

const W: u32 = 32;
const H: u32 = 32;

struct Inputs {
    image: Vec<u8>,
    mask: Vec<u8>,
    material: Vec<u8>,
}

fn inputs() -> Inputs {
    let n = (W * H) as usize;
    let image = (0..n).flat_map(|_| [200u8, 120, 40]).collect();
    let material = (0..n).flat_map(|i| [(i % 251) as u8, 90, 180]).collect();
    let mask = (0..n)
        .map(|i| {
            let (y, x) = (i / W as usize, i % W as usize);
            if (8..24).contains(&y) && (8..24).contains(&x) {
                255
            } else {
                0
            }
        })
        .collect();
    Inputs { image, mask, material }
}

fn config(json: &str) -> *mut MfConfig {
    let json = CString::new(json).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { mf_config_from_json(json.as_ptr(), &mut cfg) }, MfStatus::Ok);
    cfg
}

fn toy() -> *mut MfBackend {
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { mf_backend_new_toy(7, H, W, &mut b) }, MfStatus::Ok);
    b
}

fn last_error() -> String {
    let p = mf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn transfer(b: *const MfBackend, cfg: *const MfConfig, inp: &Inputs, cb: MfProgressFn, data: *mut c_void, out: *mut *mut MfImage) -> MfStatus {
    let src = CString::new("a cup").unwrap();
    let trg = CString::new("a golden cup").unwrap();
    mf_transfer(b, cfg, inp.image.as_ptr(), W, H, inp.mask.as_ptr(), inp.material.as_ptr(), W, H, src.as_ptr(), trg.as_ptr(), cb, data, out)
}

#[test]
fn config_round_trip_and_validation() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(mf_config_new_default(&mut cfg), MfStatus::Ok);
        let key = CString::new("lam").unwrap();
        assert_eq!(mf_config_set(cfg, key.as_ptr(), 0.25), MfStatus::Ok);
        let steps = CString::new("T").unwrap();
        assert_eq!(mf_config_set(cfg, steps.as_ptr(), 20.0), MfStatus::Config);
        assert!(last_error().contains("tau"));
        let mut json = ptr::null_mut();
        assert_eq!(mf_config_to_json(cfg, &mut json), MfStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(v["lam"], 0.25);
        assert_eq!(v["T"], 50);
        mf_string_free(json);
        let bad = CString::new("{\"w\": \"high\"}").unwrap();
        let mut other = ptr::null_mut();
        assert_ne!(mf_config_from_json(bad.as_ptr(), &mut other), MfStatus::Ok);
        assert!(other.is_null());
        mf_config_free(cfg);
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(mf_config_new_default(ptr::null_mut()), MfStatus::NullArgument);
        assert!(last_error().contains("out"));
        let mut out = ptr::null_mut();
        assert_eq!(transfer(ptr::null(), ptr::null(), &inputs(), None, ptr::null_mut(), &mut out), MfStatus::NullArgument);
        assert!(last_error().contains("backend"));
        mf_config_free(ptr::null_mut());
        mf_backend_free(ptr::null_mut());
        mf_image_free(ptr::null_mut());
        mf_string_free(ptr::null_mut());
    }
}

#[test]
fn transfer_keeps_background_and_reports_progress() {
    let cfg = config(r#"{"T": 6, "tau_g": 4, "tau_m": 6}"#);
    let b = toy();
    unsafe extern "C" fn count(data: *mut c_void, step: u32, total: u32) -> i32 {
        let seen = &mut *(data as *mut Vec<(u32, u32)>);
        seen.push((step, total));
        0
    }
    let run = |inp: &Inputs, seen: &mut Vec<(u32, u32)>| unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(transfer(b, cfg, inp, Some(count), seen as *mut _ as *mut c_void, &mut out), MfStatus::Ok);
        assert_eq!((mf_image_width(out), mf_image_height(out)), (W, H));
        let px = std::slice::from_raw_parts(mf_image_data(out), (W * H * 3) as usize).to_vec();
        mf_image_free(out);
        px
    };
    let mut seen = Vec::new();
    let a = inputs();
    let mut other = inputs();
    other.material.iter_mut().for_each(|v| *v = 255 - *v);
    let (pa, pb) = (run(&a, &mut seen), run(&other, &mut Vec::new()));
    let at = |y: usize, x: usize| (y * W as usize + x) * 3;
    assert_eq!(pa[at(0, 0)..at(0, 0) + 3], pb[at(0, 0)..at(0, 0) + 3]);
    assert_eq!(pa[at(31, 31)..at(31, 31) + 3], pb[at(31, 31)..at(31, 31) + 3]);
    assert_ne!(pa, pb);
    assert_eq!(seen, (1..=6).map(|s| (s, 6)).collect::<Vec<_>>());
    unsafe {
        mf_backend_free(b);
        mf_config_free(cfg);
    }
}

#[test]
fn callback_can_cancel() {
    let cfg = config(r#"{"T": 6, "tau_g": 4, "tau_m": 5}"#);
    let b = toy();
    unsafe extern "C" fn stop_at_two(_: *mut c_void, step: u32, _: u32) -> i32 {
        (step >= 2) as i32
    }
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(transfer(b, cfg, &inputs(), Some(stop_at_two), ptr::null_mut(), &mut out), MfStatus::Cancelled);
        assert!(out.is_null());
        assert!(last_error().contains("cancelled"));
        mf_backend_free(b);
        mf_config_free(cfg);
    }
}

#[test]
fn empty_mask_and_missing_weights_map_to_codes() {
    let cfg = config(r#"{"T": 6, "tau_g": 4, "tau_m": 5}"#);
    let b = toy();
    let mut inp = inputs();
    inp.mask.iter_mut().for_each(|v| *v = 0);
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(transfer(b, cfg, &inp, None, ptr::null_mut(), &mut out), MfStatus::Mask);
        assert!(last_error().contains("mask empty"));
        let dir = CString::new("/nonexistent/weights").unwrap();
        let mut pb = ptr::null_mut();
        assert_eq!(mf_backend_new_pretrained(dir.as_ptr(), &mut pb), MfStatus::BackendLoad);
        let mut json = ptr::null_mut();
        assert_eq!(mf_backend_manifest_json(b, &mut json), MfStatus::Ok);
        let m: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(m["image_size"], serde_json::json!([H, W]));
        mf_string_free(json);
        mf_backend_free(b);
        mf_config_free(cfg);
    }
}

#[test]
fn file_transfer_writes_png() {
    let tmp = tempfile::tempdir().unwrap();
    let inp = inputs();
    let write = |name: &str, data: &[u8], color: bool| -> CString {
        let p = tmp.path().join(name);
        let (w, h) = (W as usize, H as usize);
        if color {
            matfuse::ImageRGB::from_rgb8_raw(w, h, data).unwrap().save_png(&p).unwrap();
        } else {
            matfuse::BinaryMask::from_raw_levels(w, h, data, matfuse::MaskResolution::Pixel).unwrap().save_png(&p).unwrap();
        }
        CString::new(p.to_str().unwrap()).unwrap()
    };
    let image = write("x.png", &inp.image, true);
    let mask = write("m.png", &inp.mask, false);
    let material = write("y.png", &inp.material, true);
    let out = tmp.path().join("out.png");
    let out_c = CString::new(out.to_str().unwrap()).unwrap();
    let (src, trg) = (CString::new("a cup").unwrap(), CString::new("a golden cup").unwrap());
    let cfg = config(r#"{"T": 6, "tau_g": 4, "tau_m": 5}"#);
    let b = toy();
    unsafe {
        let s = mf_transfer_files(b, cfg, image.as_ptr(), mask.as_ptr(), material.as_ptr(), src.as_ptr(), trg.as_ptr(), out_c.as_ptr());
        assert_eq!(s, MfStatus::Ok);
        mf_backend_free(b);
        mf_config_free(cfg);
    }
    assert_eq!(matfuse::ImageRGB::load(&out).unwrap().dims(), (H as usize, W as usize));
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header_and_library() {
    let lib = target_dir().join("libmatfuse_ffi.a");
    if !lib.is_file() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C smoke test: static library or C compiler unavailable");
        return;
    }
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "smoke exited {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
