use std::ffi::{CStr, CString};
use std::ptr;

use bispik_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bispik_last_error()) }.to_string_lossy().into_owned()
}

const SMALL: &str = "[model]\nvocab_size = 13\nd_model = 8\nn_layers = 1\nn_heads = 2\nd_ff = 16\nmax_seq_len = 6\ninit_std = 0.5\n";

fn init(kind: BispikKind) -> *mut BispikModel {
    let cfg = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bispik_model_init(kind, cfg.as_ptr(), 7, &mut m) }, BispikStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

#[test]
fn forward_generate_energy_round_trip() {
    let m = init(BispikKind::Spiking);
    let (mut v, mut l, mut n) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { bispik_model_info(m, &mut v, &mut l, &mut n) }, BispikStatus::Ok);
    assert_eq!((v, l), (13, 6));
    assert!(n > 0);

    let toks = [1u32, 5, 9, 2];
    let mut logits = vec![0.0; toks.len() * v];
    let st = unsafe { bispik_model_forward(m, toks.as_ptr(), toks.len(), logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, BispikStatus::Ok);
    assert!(logits.iter().all(|x| x.is_finite()));

    let mut out = [0u32; 10];
    let mut len = 0;
    let st = unsafe { bispik_generate(m, toks.as_ptr(), 4, 6, 0.0, 1, out.as_mut_ptr(), out.len(), &mut len) };
    assert_eq!(st, BispikStatus::Ok, "{}", last_error());
    assert_eq!(len, 10);
    assert_eq!(&out[..4], &toks);
    assert!(out.iter().all(|&t| t < 13));

    let mut e = BispikEnergy::default();
    assert_eq!(unsafe { bispik_energy(m, toks.as_ptr(), 4, 0.0, 0.0, &mut e) }, BispikStatus::Ok);
    assert!(e.ann_energy_mj > 0.0 && e.snn_energy_mj > 0.0 && e.total_flops > 0);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bispik_model_save(m, path.as_ptr()) }, BispikStatus::Ok);
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { bispik_model_load(path.as_ptr(), &mut m2) }, BispikStatus::Ok);
    let mut logits2 = vec![0.0; logits.len()];
    unsafe { bispik_model_forward(m2, toks.as_ptr(), 4, logits2.as_mut_ptr(), logits2.len()) };
    assert_eq!(logits, logits2);
    unsafe {
        bispik_model_free(m);
        bispik_model_free(m2);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let m = init(BispikKind::Dense);
    let toks = [1u32, 99];
    let mut logits = vec![0.0; 2 * 13];
    let st = unsafe { bispik_model_forward(m, toks.as_ptr(), 2, logits.as_mut_ptr(), logits.len()) };
    assert_ne!(st, BispikStatus::Ok);
    assert!(last_error().contains("99"), "{}", last_error());

    let st = unsafe { bispik_model_forward(m, toks.as_ptr(), 1, logits.as_mut_ptr(), 3) };
    assert_eq!(st, BispikStatus::BufferTooSmall);

    let mut e = BispikEnergy::default();
    assert_eq!(unsafe { bispik_energy(m, toks.as_ptr(), 1, 0.0, 0.0, &mut e) }, BispikStatus::InvalidArgument);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { bispik_model_load(ptr::null(), &mut out) }, BispikStatus::NullPointer);
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { bispik_model_load(missing.as_ptr(), &mut out) }, BispikStatus::Io);
    let bad = CString::new("[model]\nd_model = 0\n").unwrap();
    assert_ne!(unsafe { bispik_model_init(BispikKind::Spiking, bad.as_ptr(), 0, &mut out) }, BispikStatus::Ok);
    assert!(out.is_null());

    let mut v = 0;
    assert_eq!(unsafe { bispik_model_info(m, &mut v, ptr::null_mut(), ptr::null_mut()) }, BispikStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        bispik_model_free(m);
        bispik_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_api_and_compiles() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/bispik.h")).unwrap();
    for name in [
        "bispik_last_error",
        "bispik_model_load",
        "bispik_model_init",
        "bispik_model_save",
        "bispik_model_free",
        "bispik_model_forward",
        "bispik_generate",
        "bispik_energy",
        "BISPIK_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"bispik.h\"\nint main(void){BispikModel*m=0;BispikStatus s=bispik_model_init(BISPIK_KIND_SPIKING,0,1,&m);bispik_model_free(m);return (int)s;}\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
