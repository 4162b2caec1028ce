use std::ffi::{CStr, CString};
use std::ptr;

use edgeloop::exchange::{export_model, OpSupportTable};
use edgeloop::graph::Op;
use edgeloop::preprocess::{encode_ppm, ChannelStats, Image, PreprocessSpec};
use edgeloop::rng::Rng;
use edgeloop::runtime::load_session;
use edgeloop::zoo::{build_small_cnn, SmallCnnConfig};
use edgeloop_ffi::*;

const CLASSES: usize = 5;

fn model(reshape: bool) -> Vec<u8> {
    let mut g = build_small_cnn(&SmallCnnConfig::new(16, 2, 4, CLASSES).with_fc1_out(8), 3).unwrap();
    g.meta.preprocess = Some(PreprocessSpec::with_margin(16, ChannelStats::identity()).unwrap());
    if reshape {
        for n in &mut g.nodes {
            if n.op == Op::Flatten {
                n.op = Op::Reshape { shape: vec![0, -1] };
            }
        }
    }
    export_model(&g, None)
}

fn image(seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    Image::new(21, 18, (0..21 * 18 * 3).map(|_| rng.below(256) as u8).collect()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(edgeloop_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn open(bytes: &[u8]) -> *mut EdgeloopSession {
    let mut s = ptr::null_mut();
    assert_eq!(
        unsafe { edgeloop_session_load(bytes.as_ptr(), bytes.len(), &mut s) },
        EdgeloopStatus::Ok
    );
    assert!(!s.is_null());
    s
}

#[test]
fn predictions_match_the_rust_runtime() {
    let bytes = model(false);
    let native = load_session(&bytes, &OpSupportTable::default_table()).unwrap();
    let s = open(&bytes);
    unsafe {
        assert_eq!(edgeloop_session_num_classes(s), CLASSES);
        assert_eq!(edgeloop_session_image_size(s), 16);
        assert_eq!(edgeloop_session_storage_bytes(s), bytes.len() as u64);
    }
    for seed in 0..5 {
        let img = image(seed);
        let want = native.predict(&img).unwrap();

        let ppm = encode_ppm(&img);
        let mut out = EdgeloopPrediction::default();
        let mut confs = [0.0f64; CLASSES];
        let st = unsafe { edgeloop_predict_ppm(s, ppm.as_ptr(), ppm.len(), &mut out, confs.as_mut_ptr(), CLASSES) };
        assert_eq!(st, EdgeloopStatus::Ok);
        assert_eq!(out.class_id as usize, want.class_id);
        assert_eq!(confs.to_vec(), want.confidences);
        assert_eq!(out.confidence_pct, want.confidence());

        let mut rgb = EdgeloopPrediction::default();
        let st = unsafe {
            edgeloop_predict_rgb(
                s,
                img.data().as_ptr(),
                img.width(),
                img.height(),
                &mut rgb,
                ptr::null_mut(),
                0,
            )
        };
        assert_eq!(st, EdgeloopStatus::Ok);
        assert_eq!((rgb.class_id, rgb.confidence_pct), (out.class_id, out.confidence_pct));
    }
    unsafe { edgeloop_session_free(s) };
}

#[test]
fn small_confidence_buffer_is_reported() {
    let s = open(&model(false));
    let ppm = encode_ppm(&image(1));
    let mut out = EdgeloopPrediction::default();
    let mut confs = [0.0f64; 2];
    let st = unsafe { edgeloop_predict_ppm(s, ppm.as_ptr(), ppm.len(), &mut out, confs.as_mut_ptr(), 2) };
    assert_eq!(st, EdgeloopStatus::BufferTooSmall);
    assert!(last_error().contains("need 5"));
    unsafe { edgeloop_session_free(s) };
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut s = ptr::null_mut();
    let junk = b"not a model";
    assert_eq!(
        unsafe { edgeloop_session_load(junk.as_ptr(), junk.len(), &mut s) },
        EdgeloopStatus::Format
    );
    assert!(s.is_null());
    assert!(!last_error().is_empty());

    let reshape = model(true);
    assert_eq!(
        unsafe { edgeloop_session_load(reshape.as_ptr(), reshape.len(), &mut s) },
        EdgeloopStatus::Unsupported
    );
    assert!(last_error().contains("Reshape"));

    assert_eq!(
        unsafe { edgeloop_session_load(ptr::null(), 0, &mut s) },
        EdgeloopStatus::NullArgument
    );

    let missing = CString::new("/nonexistent/model.nnex").unwrap();
    assert_eq!(
        unsafe { edgeloop_session_load_file(missing.as_ptr(), &mut s) },
        EdgeloopStatus::Io
    );

    let s = open(&model(false));
    let mut out = EdgeloopPrediction::default();
    let bad_ppm = b"P6\n2 2\n255\n\x00";
    let st = unsafe { edgeloop_predict_ppm(s, bad_ppm.as_ptr(), bad_ppm.len(), &mut out, ptr::null_mut(), 0) };
    assert_eq!(st, EdgeloopStatus::Data);
    let st = unsafe {
        edgeloop_predict_ppm(
            ptr::null(),
            bad_ppm.as_ptr(),
            bad_ppm.len(),
            &mut out,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(st, EdgeloopStatus::NullArgument);
    unsafe { edgeloop_session_free(s) };
    unsafe { edgeloop_session_free(ptr::null_mut()) };
}

#[test]
fn check_and_rewrite_round_trip() {
    let plain = model(false);
    let reshape = model(true);
    let mut count = usize::MAX;
    assert_eq!(
        unsafe { edgeloop_check(reshape.as_ptr(), reshape.len(), &mut count) },
        EdgeloopStatus::Ok
    );
    assert_eq!(count, 1);

    let mut buf = ptr::null_mut();
    assert_eq!(
        unsafe { edgeloop_rewrite(reshape.as_ptr(), reshape.len(), &mut buf) },
        EdgeloopStatus::Ok
    );
    let fixed = unsafe { std::slice::from_raw_parts(edgeloop_buffer_data(buf), edgeloop_buffer_len(buf)) }.to_vec();
    unsafe { edgeloop_buffer_free(buf) };
    assert_eq!(fixed, plain);

    assert_eq!(
        unsafe { edgeloop_check(fixed.as_ptr(), fixed.len(), &mut count) },
        EdgeloopStatus::Ok
    );
    assert_eq!(count, 0);
}

#[test]
fn load_from_file_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nnex");
    std::fs::write(&path, model(false)).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(
        unsafe { edgeloop_session_load_file(c.as_ptr(), &mut s) },
        EdgeloopStatus::Ok
    );
    unsafe { edgeloop_session_free(s) };
    let v = unsafe { CStr::from_ptr(edgeloop_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/edgeloop.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Some(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"edgeloop.h\"\nint main(void) { EdgeloopPrediction p; (void)p; return edgeloop_version() == 0; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args([
            "-fsyntax-only",
            "-Wall",
            "-Werror",
            "-I",
            concat!(env!("CARGO_MANIFEST_DIR"), "/include"),
        ])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
}
