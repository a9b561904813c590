use hyperlab_ffi::*;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 1024];
    let status = unsafe { hyperlab_last_error(buf.as_mut_ptr(), buf.len(), ptr::null_mut()) };
    assert_eq!(status, HyperlabStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn mde_solve_free_case() {
    let mut p = HyperlabMdePoint::default();
    assert_eq!(unsafe { hyperlab_mde_solve(0.0, 0.0, 0.0, 1.0, &mut p) }, HyperlabStatus::Ok);
    assert!((p.m_im - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-14);
    assert!(p.residual < 1e-12);
    assert_eq!(unsafe { hyperlab_mde_solve(0.0, 0.0, 0.0, 1.0, ptr::null_mut()) }, HyperlabStatus::NullPointer);
}

#[test]
fn beta_pm_example() {
    // z1 = 0.3, z2 = -0.3 close to the real axis: beta- ~ 0.18, beta+ ~ 2
    let z = [0.3, 0.0, -0.3, 0.0];
    let w = [0.0, 1e-9, 0.0, 1e-9];
    let mut out = [0.0; 4];
    assert_eq!(unsafe { hyperlab_beta_pm(z.as_ptr(), w.as_ptr(), out.as_mut_ptr()) }, HyperlabStatus::Ok);
    let mut re = [out[0], out[2]];
    re.sort_by(f64::total_cmp);
    assert!((re[0] - 0.18).abs() < 1e-6 && (re[1] - 2.0).abs() < 1e-6, "{out:?}");
}

#[test]
fn singular_values_are_ascending_and_validated() {
    let mut v = vec![0.0; 16];
    assert_eq!(unsafe { hyperlab_singular_values(16, false, 1, 0, 0.2, 0.0, v.as_mut_ptr()) }, HyperlabStatus::Ok);
    assert!(v.windows(2).all(|w| w[0] <= w[1]) && v[0] >= 0.0);
    let mut big = vec![0.0; 1];
    assert_eq!(
        unsafe { hyperlab_singular_values(0, false, 1, 0, 0.2, 0.0, big.as_mut_ptr()) },
        HyperlabStatus::Validation
    );
    assert!(last_error().contains("ensemble.n"));
}

#[test]
fn config_round_trip_and_run() {
    let text = CString::new("command = \"stab\"\nseed = 3\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { hyperlab_config_parse(text.as_ptr(), &mut cfg) }, HyperlabStatus::Ok);
    let mut needed = 0usize;
    assert_eq!(unsafe { hyperlab_config_hash(cfg, ptr::null_mut(), 0, &mut needed) }, HyperlabStatus::BufferTooSmall);
    assert_eq!(needed, 33);
    let mut hash = vec![0 as c_char; needed];
    assert_eq!(
        unsafe { hyperlab_config_hash(cfg, hash.as_mut_ptr(), hash.len(), ptr::null_mut()) },
        HyperlabStatus::Ok
    );

    let mut res = ptr::null_mut();
    assert_eq!(unsafe { hyperlab_run(cfg, 2, &mut res) }, HyperlabStatus::Ok);
    let mut json = vec![0 as c_char; 1 << 16];
    assert_eq!(
        unsafe { hyperlab_result_text(res, HyperlabArtifact::Json, json.as_mut_ptr(), json.len(), ptr::null_mut()) },
        HyperlabStatus::Ok
    );
    let json = unsafe { CStr::from_ptr(json.as_ptr()) }.to_string_lossy().into_owned();
    let hash = unsafe { CStr::from_ptr(hash.as_ptr()) }.to_string_lossy().into_owned();
    assert!(json.contains(&hash));
    unsafe {
        hyperlab_result_free(res);
        hyperlab_config_free(cfg);
        hyperlab_config_free(ptr::null_mut());
    }
}

#[test]
fn bad_configs_report_paths() {
    let text = CString::new("command = \"stab\"\nunknown = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { hyperlab_config_parse(text.as_ptr(), &mut cfg) }, HyperlabStatus::Validation);
    assert!(cfg.is_null());
    assert!(last_error().contains("unknown"));
    assert_eq!(unsafe { hyperlab_config_parse(ptr::null(), &mut cfg) }, HyperlabStatus::NullPointer);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(crate_dir().join("include/hyperlab.h")).unwrap();
    for name in [
        "hyperlab_last_error",
        "hyperlab_mde_solve",
        "hyperlab_beta_pm",
        "hyperlab_singular_values",
        "hyperlab_config_parse",
        "hyperlab_config_free",
        "hyperlab_config_hash",
        "hyperlab_run",
        "hyperlab_result_free",
        "hyperlab_result_text",
        "typedef struct HyperlabConfig HyperlabConfig",
        "HYPERLAB_STATUS_VALIDATION = 2",
        "HYPERLAB_STATUS_NUMERICAL = 3",
    ] {
        assert!(h.contains(name), "{name}");
    }
}

fn static_lib() -> Option<PathBuf> {
    // tests/<name> lives in target/<profile>/deps
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libhyperlab_ffi.a");
    lib.exists().then_some(lib)
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn c_program_links_against_the_static_library() {
    let (Some(lib), true) = (static_lib(), have("cc")) else {
        eprintln!("skipping: no C compiler or static library");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
