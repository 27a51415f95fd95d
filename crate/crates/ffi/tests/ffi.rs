use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bitsnap::{synth, Checkpoint};
use bitsnap_ffi::*;

fn last_error() -> String {
    let p = bs_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn delta_round_trip_and_size() {
    let base: Vec<u16> = (0..4096u32).map(|i| (i * 13) as u16).collect();
    let mut target = base.clone();
    for i in (0..4096).step_by(7) {
        target[i] ^= 0x8000;
    }
    let changed = target.iter().zip(&base).filter(|(a, b)| a != b).count() as u64;
    let mut buf = BsBuffer {
        data: ptr::null_mut(),
        len: 0,
        capacity: 0,
    };
    unsafe {
        assert_eq!(
            bs_delta_encode(base.as_ptr(), target.as_ptr(), 4096, &mut buf),
            BsStatus::Ok
        );
        let mut size = 0;
        assert_eq!(bs_delta_size_bytes(4096, changed, &mut size), BsStatus::Ok);
        assert_eq!(buf.len as u64, size);
        let mut back = vec![0u16; 4096];
        assert_eq!(
            bs_delta_decode(base.as_ptr(), 4096, buf.data, buf.len, back.as_mut_ptr()),
            BsStatus::Ok
        );
        assert_eq!(back, target);
        *buf.data = b'X';
        assert_eq!(
            bs_delta_decode(base.as_ptr(), 4096, buf.data, buf.len, back.as_mut_ptr()),
            BsStatus::Format
        );
        assert!(last_error().contains("magic"));
        bs_buffer_free(&mut buf);
        assert!(buf.data.is_null());
    }
}

#[test]
fn quantize_round_trip_and_errors() {
    let mut rng = synth::rng(5);
    let v = synth::normal_f32(&mut rng, 10_000, 0.0, 1.0);
    let mut buf = BsBuffer {
        data: ptr::null_mut(),
        len: 0,
        capacity: 0,
    };
    unsafe {
        assert_eq!(
            bs_quantize_f32(v.as_ptr(), v.len(), 16, &mut buf),
            BsStatus::Ok
        );
        let mut expect = 0;
        assert_eq!(
            bs_quantized_size_bytes(10_000, 16, &mut expect),
            BsStatus::Ok
        );
        assert!(buf.len as u64 >= expect);
        let mut w = vec![0f32; v.len()];
        assert_eq!(
            bs_dequantize_f32(buf.data, buf.len, w.as_mut_ptr(), w.len()),
            BsStatus::Ok
        );
        let mse: f64 = v
            .iter()
            .zip(&w)
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / v.len() as f64;
        assert!(mse < 1e-5, "{mse}");
        assert_eq!(
            bs_dequantize_f32(buf.data, buf.len, w.as_mut_ptr(), 10),
            BsStatus::Mismatch
        );
        bs_buffer_free(&mut buf);
        let nan = [1.0f32, f32::NAN];
        assert_eq!(
            bs_quantize_f32(nan.as_ptr(), 2, 16, &mut buf),
            BsStatus::InvalidArgument
        );
        assert_eq!(
            bs_quantize_f32(ptr::null(), 5, 16, &mut buf),
            BsStatus::InvalidArgument
        );
        assert_eq!(
            bs_quantized_size_bytes(10, 1, &mut expect),
            BsStatus::InvalidArgument
        );
    }
}

#[test]
fn checksum_matches_engine() {
    unsafe {
        assert_eq!(bs_checksum(ptr::null(), 0), 0x2D06_8005_38D3_94C2);
        let d = b"payload";
        assert_eq!(
            bs_checksum(d.as_ptr(), d.len()),
            bitsnap::engine::checksum(d)
        );
    }
}

#[test]
fn store_handle_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let root = cstr(&dir.path().join("store"));
    let mut store: *mut BsStore = ptr::null_mut();
    let c0 = synth::random_checkpoint(0, &[5000], &[2000], 1);
    let c1 = synth::mutate(&c0, 1, 0.1, 2);
    let f0 = dir.path().join("c0.bsnp");
    let f1 = dir.path().join("c1.bsnp");
    c0.write_file(&f0).unwrap();
    c1.write_file(&f1).unwrap();
    unsafe {
        assert_eq!(bs_store_open(root.as_ptr(), 0, 0, &mut store), BsStatus::Ok);
        let (mut latest, mut base) = (0u64, 0u64);
        assert_eq!(
            bs_store_latest(store, &mut latest, &mut base),
            BsStatus::NotFound
        );
        let mut kind = 9u32;
        assert_eq!(
            bs_store_save_file(store, 10, cstr(&f0).as_ptr(), &mut kind),
            BsStatus::Ok
        );
        assert_eq!(kind, 0);
        assert_eq!(
            bs_store_save_file(store, 20, cstr(&f1).as_ptr(), &mut kind),
            BsStatus::Ok
        );
        assert_eq!(kind, 1);
        assert_eq!(
            bs_store_save_file(store, 20, cstr(&f1).as_ptr(), ptr::null_mut()),
            BsStatus::Stale
        );
        assert_eq!(bs_store_latest(store, &mut latest, &mut base), BsStatus::Ok);
        assert_eq!((latest, base), (20, 10));
        let out = dir.path().join("out.bsnp");
        assert_eq!(
            bs_store_load_file(store, 1, 10, cstr(&out).as_ptr()),
            BsStatus::Ok
        );
        assert_eq!(
            Checkpoint::read_file(&out).unwrap().model_states,
            c0.model_states
        );
        assert_eq!(
            bs_store_load_file(store, 0, 0, cstr(&out).as_ptr()),
            BsStatus::Ok
        );
        assert_eq!(
            Checkpoint::read_file(&out).unwrap().model_states,
            c1.model_states
        );
        assert_eq!(
            bs_store_load_file(store, 1, 15, cstr(&out).as_ptr()),
            BsStatus::NotFound
        );
        bs_store_close(store);
        bs_store_close(ptr::null_mut());
    }
}

/// Newest static library cargo built for this test run.
fn static_lib() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    std::fs::read_dir(deps)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with("libbitsnap_ffi") && name.ends_with(".a")
        })
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok())
        .expect("static library built")
}

#[test]
fn c_program_links_against_header_and_staticlib() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = static_lib();
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).ends_with(" ok\n"));
}
