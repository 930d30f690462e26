use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use orthmerge::io::{to_json, vector_to_json};
use orthmerge::{
    derive_stream, merge, sample_masks, save_adapter_pack, BaseLayer, LowRankAdapter, MaskKind, Matrix, MergePlan,
    Strategy, Stream, StreamKey,
};
use orthmerge_ffi::*;

struct Set(*mut OrthmergeAdapterSet);

impl Drop for Set {
    fn drop(&mut self) {
        unsafe { orthmerge_adapter_set_free(self.0) };
    }
}

fn last_error() -> String {
    let p = orthmerge_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn set_from(adapters: &[LowRankAdapter]) -> Set {
    let mut raw = ptr::null_mut();
    assert_eq!(unsafe { orthmerge_adapter_set_new(&mut raw) }, OrthmergeStatus::Ok);
    for a in adapters {
        let name = CString::new(a.name()).unwrap();
        let s = unsafe {
            orthmerge_adapter_set_push(
                raw,
                name.as_ptr(),
                a.factor_a().data().as_ptr(),
                a.rank(),
                a.d_in(),
                a.factor_b().data().as_ptr(),
                a.d_out(),
                a.scale(),
            )
        };
        assert_eq!(s, OrthmergeStatus::Ok);
    }
    Set(raw)
}

fn random_adapters(st: &mut Stream, k: usize, d_in: usize, d_out: usize) -> Vec<LowRankAdapter> {
    (0..k)
        .map(|j| LowRankAdapter::random(format!("adapter{j}"), d_in, d_out, d_in.min(d_out).min(3), st).unwrap())
        .collect()
}

fn params(strategy: u32, weights: &[f64], rates: &[f64], seed: u64, sample_index: u64) -> OrthmergeMergeParams {
    OrthmergeMergeParams {
        strategy,
        weights: weights.as_ptr(),
        rates: rates.as_ptr(),
        count: weights.len(),
        base_weight: ptr::null(),
        seed,
        layer_index: 0,
        sample_index,
    }
}

fn audit_json(set: &Set, p: &OrthmergeMergeParams, h: &[f32]) -> Result<String, OrthmergeStatus> {
    let mut json: *mut c_char = ptr::null_mut();
    let s = unsafe { orthmerge_merge_audit_json(set.0, p, h.as_ptr(), h.len(), &mut json) };
    if s != OrthmergeStatus::Ok {
        return Err(s);
    }
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    unsafe { orthmerge_string_free(json) };
    Ok(text)
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

#[test]
fn push_save_load_round_trip_matches_core_bytes() {
    let mut st = derive_stream(StreamKey::new(1, 0, 0, 0));
    let adapters = random_adapters(&mut st, 3, 5, 7);
    let set = set_from(&adapters);
    assert_eq!(unsafe { orthmerge_adapter_set_len(set.0) }, 3);

    let mut buf = OrthmergeBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(
        unsafe { orthmerge_adapter_set_save(set.0, &mut buf) },
        OrthmergeStatus::Ok
    );
    let bytes = unsafe { std::slice::from_raw_parts(buf.data, buf.len) }.to_vec();
    assert_eq!(bytes, save_adapter_pack(&adapters));

    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { orthmerge_adapter_set_load(buf.data, buf.len, &mut loaded) },
        OrthmergeStatus::Ok
    );
    let loaded = Set(loaded);
    unsafe { orthmerge_buffer_free(buf) };

    let (mut d_in, mut d_out, mut rank) = (0, 0, 0);
    let s = unsafe { orthmerge_adapter_set_info(loaded.0, 2, &mut d_in, &mut d_out, &mut rank) };
    assert_eq!(s, OrthmergeStatus::Ok);
    assert_eq!((d_in, d_out, rank), (5, 7, 3));
    let s = unsafe { orthmerge_adapter_set_info(loaded.0, 3, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(s, OrthmergeStatus::InvalidArgument);
}

#[test]
fn load_errors_map_to_status() {
    let mut out = ptr::null_mut();
    let junk = b"LRPK0000\0\0\0\0\0\0\0\0";
    assert_eq!(
        unsafe { orthmerge_adapter_set_load(junk.as_ptr(), junk.len(), &mut out) },
        OrthmergeStatus::Format
    );
    assert!(last_error().contains("magic"));
    assert!(out.is_null());

    let missing = CString::new("/nonexistent/pack.lrpk").unwrap();
    assert_eq!(
        unsafe { orthmerge_adapter_set_load_file(missing.as_ptr(), &mut out) },
        OrthmergeStatus::Io
    );

    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("p.lrpk");
    let mut st = derive_stream(StreamKey::new(2, 0, 0, 0));
    std::fs::write(&path, save_adapter_pack(&random_adapters(&mut st, 2, 3, 3))).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { orthmerge_adapter_set_load_file(c.as_ptr(), &mut out) },
        OrthmergeStatus::Ok
    );
    let set = Set(out);
    assert_eq!(unsafe { orthmerge_adapter_set_len(set.0) }, 2);
}

#[test]
fn push_rejects_bad_factors() {
    let set = set_from(&[]);
    let name = CString::new("bad").unwrap();
    let a = [1.0f32, f32::NAN];
    let b = [1.0f32];
    let s = unsafe { orthmerge_adapter_set_push(set.0, name.as_ptr(), a.as_ptr(), 1, 2, b.as_ptr(), 1, 1.0) };
    assert_ne!(s, OrthmergeStatus::Ok);
    let s = unsafe { orthmerge_adapter_set_push(set.0, name.as_ptr(), ptr::null(), 1, 2, b.as_ptr(), 1, 1.0) };
    assert_eq!(s, OrthmergeStatus::NullPointer);
    assert_eq!(unsafe { orthmerge_adapter_set_len(set.0) }, 0);
}

#[test]
fn sample_masks_match_core() {
    let rates = [0.7, 0.6, 0.7];
    let d = 40;
    let mut out = vec![9u8; rates.len() * d];
    let s = unsafe {
        orthmerge_sample_masks(
            ORTHMERGE_STRATEGY_ORTHOGONAL,
            rates.as_ptr(),
            rates.len(),
            d,
            5,
            2,
            3,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(s, OrthmergeStatus::Ok);
    let core = sample_masks(MaskKind::Orthogonal, &rates, d, &StreamKey::per_adapter(5, 2, 3, 3)).unwrap();
    assert_eq!(out, core.masks.concat());

    let eleven = [0.9; 11];
    let mut buf = vec![0u8; 11 * 4];
    let s = unsafe {
        orthmerge_sample_masks(
            ORTHMERGE_STRATEGY_ORTHOGONAL,
            eleven.as_ptr(),
            11,
            4,
            0,
            0,
            0,
            buf.as_mut_ptr(),
        )
    };
    assert_eq!(s, OrthmergeStatus::ConstraintViolation);
    let s = unsafe {
        orthmerge_sample_masks(
            ORTHMERGE_STRATEGY_DIRECT,
            eleven.as_ptr(),
            1,
            4,
            0,
            0,
            0,
            buf.as_mut_ptr(),
        )
    };
    assert_eq!(s, OrthmergeStatus::InvalidArgument);
    let s = unsafe {
        orthmerge_sample_masks(
            ORTHMERGE_STRATEGY_DROPOUT,
            eleven.as_ptr(),
            1,
            4,
            0,
            0,
            0,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, OrthmergeStatus::NullPointer);
}

#[test]
fn merge_matches_core_and_contributions_are_orthogonal() {
    let mut st = derive_stream(StreamKey::new(3, 0, 0, 0));
    let (d_in, d_out) = (6, 12);
    let adapters = random_adapters(&mut st, 3, d_in, d_out);
    let set = set_from(&adapters);
    let base = Matrix::random(d_out, d_in, &mut st);
    let h: Vec<f32> = (0..d_in).map(|_| st.uniform_f32(-1.0, 1.0)).collect();
    let (w, r) = ([1.0, 0.5, -2.0], [0.5, 0.8, 0.7]);
    let mut p = params(ORTHMERGE_STRATEGY_ORTHOGONAL, &w, &r, 9, 4);
    p.base_weight = base.data().as_ptr();

    let mut out = vec![0f32; d_out];
    let mut contrib = vec![0f32; 3 * d_out];
    let s = unsafe {
        orthmerge_merge(
            set.0,
            &p,
            h.as_ptr(),
            d_in,
            out.as_mut_ptr(),
            d_out,
            contrib.as_mut_ptr(),
            contrib.len(),
        )
    };
    assert_eq!(s, OrthmergeStatus::Ok, "{}", last_error());

    let plan = MergePlan::sequential(&w, &r, Strategy::OrthogonalMcDropout, 9).unwrap();
    let expected = merge(&plan, &adapters, &BaseLayer::new(base.clone()).unwrap(), &h, 0, 4).unwrap();
    assert_eq!(out, expected.output);
    assert_eq!(contrib, expected.contributions.concat());
    for i in 0..3 {
        for j in i + 1..3 {
            let dot: f64 = (0..d_out)
                .map(|c| contrib[i * d_out + c] as f64 * contrib[j * d_out + c] as f64)
                .sum();
            assert_eq!(dot, 0.0);
        }
    }

    let s = unsafe {
        orthmerge_merge(
            set.0,
            &p,
            h.as_ptr(),
            d_in,
            out.as_mut_ptr(),
            d_out - 1,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(s, OrthmergeStatus::DimensionMismatch);
    let s = unsafe {
        orthmerge_merge(
            set.0,
            &p,
            h.as_ptr(),
            d_in - 1,
            out.as_mut_ptr(),
            d_out,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(s, OrthmergeStatus::DimensionMismatch);
    let over = [0.1, 0.1, 0.1];
    let bad = params(ORTHMERGE_STRATEGY_ORTHOGONAL, &w, &over, 9, 4);
    let s = unsafe {
        orthmerge_merge(
            set.0,
            &bad,
            h.as_ptr(),
            d_in,
            out.as_mut_ptr(),
            d_out,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(s, OrthmergeStatus::ConstraintViolation);
    let one = [1.0, 0.5, 0.5];
    let bad = params(ORTHMERGE_STRATEGY_DROPOUT, &w, &one, 9, 4);
    let s = unsafe {
        orthmerge_merge(
            set.0,
            &bad,
            h.as_ptr(),
            d_in,
            out.as_mut_ptr(),
            d_out,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(s, OrthmergeStatus::InvalidRate);
}

#[test]
fn null_weights_and_rates_default_to_plain_sum() {
    let mut st = derive_stream(StreamKey::new(4, 0, 0, 0));
    let adapters = random_adapters(&mut st, 2, 4, 4);
    let set = set_from(&adapters);
    let h = [1.0f32, -1.0, 0.5, 2.0];
    let p = OrthmergeMergeParams {
        strategy: ORTHMERGE_STRATEGY_DIRECT,
        weights: ptr::null(),
        rates: ptr::null(),
        count: 2,
        base_weight: ptr::null(),
        seed: 0,
        layer_index: 0,
        sample_index: 0,
    };
    let mut out = [0f32; 4];
    let s = unsafe { orthmerge_merge(set.0, &p, h.as_ptr(), 4, out.as_mut_ptr(), 4, ptr::null_mut(), 0) };
    assert_eq!(s, OrthmergeStatus::Ok);
    let expected = orthmerge::merge_direct(&BaseLayer::absent(), &adapters, &[1.0, 1.0], &h).unwrap();
    assert_eq!(out.to_vec(), expected.output);

    let wrong_count = OrthmergeMergeParams { count: 3, ..p };
    assert_eq!(
        unsafe { orthmerge_validate_plan(set.0, &wrong_count) },
        OrthmergeStatus::DimensionMismatch
    );
}

#[test]
fn validate_plan_capacity_boundary() {
    let mut st = derive_stream(StreamKey::new(5, 0, 0, 0));
    let adapters = random_adapters(&mut st, 11, 4, 4);
    let ten = set_from(&adapters[..10]);
    let eleven = set_from(&adapters);
    let p10 = params(ORTHMERGE_STRATEGY_ORTHOGONAL, &[1.0; 10], &[0.9; 10], 0, 0);
    let p11 = params(ORTHMERGE_STRATEGY_ORTHOGONAL, &[1.0; 11], &[0.9; 11], 0, 0);
    assert_eq!(unsafe { orthmerge_validate_plan(ten.0, &p10) }, OrthmergeStatus::Ok);
    assert_eq!(
        unsafe { orthmerge_validate_plan(eleven.0, &p11) },
        OrthmergeStatus::ConstraintViolation
    );
    assert!(last_error().contains("1.0999"));
}

#[allow(clippy::too_many_arguments)]
fn cli_audit(
    cli: &Path,
    dir: &Path,
    pack: &Path,
    strategy: &str,
    w: &[f64],
    r: &[f64],
    seed: u64,
    h: &[f32],
) -> String {
    let input = dir.join("h.json");
    std::fs::write(&input, vector_to_json(h)).unwrap();
    let out = dir.join("y.json");
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let status = Command::new(cli)
        .args([
            "merge",
            "--adapters",
            pack.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
        ])
        .args([
            "--strategy",
            strategy,
            "--weights",
            &join(w),
            "--rates",
            &join(r),
            "--seed",
            &seed.to_string(),
        ])
        .args(["--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    std::fs::read_to_string(dir.join("y.audit.json")).unwrap()
}

/// Audit JSON from the C ABI equals the library's audit document and, when
/// the CLI binary has been built alongside, the file `orthmerge merge` writes.
#[test]
fn audit_json_matches_cli_for_twenty_configurations() {
    let cli = target_dir().join(format!("orthmerge{}", std::env::consts::EXE_SUFFIX));
    let cli = cli.exists().then_some(cli);
    if cli.is_none() {
        eprintln!("orthmerge binary not built; comparing against the library only");
    }
    let dir = tempfile::TempDir::new().unwrap();
    let mut st = derive_stream(StreamKey::new(6, 0, 0, 0));
    for c in 0..20u64 {
        let k = if c == 0 { 2 } else { 1 + (st.next_u64() % 5) as usize };
        let (d_in, d_out) = (1 + (st.next_u64() % 9) as usize, 1 + (st.next_u64() % 17) as usize);
        let adapters = random_adapters(&mut st, k, d_in, d_out);
        let rates: Vec<f64> = if c == 0 {
            vec![0.5, 0.5]
        } else {
            let u: Vec<f64> = (0..k).map(|_| 0.1 + st.next_f64()).collect();
            let s: f64 = u.iter().sum();
            u.iter().map(|x| 1.0 - x / s).collect()
        };
        let weights: Vec<f64> = (0..k).map(|_| (st.next_f64() * 3.0 - 1.0) as f32 as f64).collect();
        let h: Vec<f32> = (0..d_in).map(|_| st.uniform_f32(-2.0, 2.0)).collect();
        let (code, strategy, name) = match c % 3 {
            0 => (
                ORTHMERGE_STRATEGY_ORTHOGONAL,
                Strategy::OrthogonalMcDropout,
                "orthogonal",
            ),
            1 => (ORTHMERGE_STRATEGY_DROPOUT, Strategy::McDropout, "dropout"),
            _ => (ORTHMERGE_STRATEGY_DIRECT, Strategy::Direct, "direct"),
        };
        let seed = 1000 + c;
        let set = set_from(&adapters);
        let from_ffi = audit_json(&set, &params(code, &weights, &rates, seed, 0), &h).unwrap();

        let plan = MergePlan::sequential(&weights, &rates, strategy, seed).unwrap();
        let out = merge(&plan, &adapters, &BaseLayer::absent(), &h, 0, 0).unwrap();
        assert_eq!(from_ffi, to_json(&out.audit(&weights, &rates, seed)), "config {c}");

        if let Some(cli) = &cli {
            let pack = dir.path().join("pack.lrpk");
            std::fs::write(&pack, save_adapter_pack(&adapters)).unwrap();
            assert_eq!(
                from_ffi,
                cli_audit(cli, dir.path(), &pack, name, &weights, &rates, seed, &h),
                "config {c}"
            );
        }
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/orthmerge.h")).unwrap();
    for name in [
        "orthmerge_version",
        "orthmerge_last_error",
        "orthmerge_adapter_set_new",
        "orthmerge_adapter_set_push",
        "orthmerge_adapter_set_load",
        "orthmerge_adapter_set_load_file",
        "orthmerge_adapter_set_save",
        "orthmerge_adapter_set_free",
        "orthmerge_adapter_set_len",
        "orthmerge_adapter_set_info",
        "orthmerge_buffer_free",
        "orthmerge_sample_masks",
        "orthmerge_validate_plan",
        "orthmerge_merge",
        "orthmerge_merge_audit_json",
        "orthmerge_string_free",
        "typedef struct OrthmergeAdapterSet OrthmergeAdapterSet",
        "ORTHMERGE_STATUS_CONSTRAINT_VIOLATION = 4",
        "#define ORTHMERGE_STRATEGY_ORTHOGONAL 2",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compiles the C smoke program against the header and the static library
/// and runs it. Skipped when no C compiler or static library is available.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("liborthmerge_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C smoke test: no cc or {}", lib.display());
        return;
    }
    let dir = tempfile::TempDir::new().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).contains(" ok"));
}
