use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use tsdr::synth::{gen_hmpca_data, HmpcaSynthSpec, NoiseFamily};
use tsdr_ffi::*;

fn last_error() -> String {
    let p = tsdr_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synthetic() -> (Vec<f64>, usize, usize, usize) {
    let spec = HmpcaSynthSpec {
        p: 20,
        q: 20,
        p0_star: 4,
        q0_star: 4,
        r_star: 3,
        kappa: vec![60.0, 40.0, 20.0],
        c: 1.0,
        sigma2: 1.0,
        n: 300,
        noise_family: NoiseFamily::Gaussian,
        seed: 7,
        require_c_above_sigma2: false,
    };
    let data = gen_hmpca_data(&spec).unwrap();
    (data.stack.to_row_major(), spec.n, spec.p, spec.q)
}

unsafe fn make_stack(values: &[f64], n: usize, p: usize, q: usize) -> *mut TsdrStack {
    let mut h = ptr::null_mut();
    assert_eq!(
        tsdr_stack_from_row_major(n, p, q, values.as_ptr(), &mut h),
        TsdrStatus::Ok
    );
    h
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(tsdr_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn stack_round_trip_through_handle() {
    let values: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64 * 0.5).collect();
    unsafe {
        let h = make_stack(&values, 2, 3, 4);
        let (mut n, mut p, mut q) = (0, 0, 0);
        assert_eq!(tsdr_stack_dims(h, &mut n, &mut p, &mut q), TsdrStatus::Ok);
        assert_eq!((n, p, q), (2, 3, 4));

        let mut small = vec![0.0; 5];
        assert_eq!(
            tsdr_stack_copy_data(h, small.as_mut_ptr(), small.len()),
            TsdrStatus::BufferTooSmall
        );
        assert!(last_error().contains("24"));

        let mut out = vec![0.0; 24];
        assert_eq!(
            tsdr_stack_copy_data(h, out.as_mut_ptr(), out.len()),
            TsdrStatus::Ok
        );
        assert_eq!(out, values);
        assert!(tsdr_last_error_message().is_null());
        tsdr_stack_free(h);
    }
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(
            tsdr_stack_from_row_major(1, 2, 2, ptr::null(), &mut h),
            TsdrStatus::NullPointer
        );
        assert!(h.is_null());
        let data = [1.0; 4];
        assert_eq!(
            tsdr_stack_from_row_major(0, 2, 2, data.as_ptr(), &mut h),
            TsdrStatus::InvalidInput
        );
        let mut nan = [1.0; 4];
        nan[2] = f64::NAN;
        assert_eq!(
            tsdr_stack_from_row_major(1, 2, 2, nan.as_ptr(), &mut h),
            TsdrStatus::InvalidInput
        );
        assert_eq!(
            tsdr_stack_dims(ptr::null(), &mut 0, &mut 0, &mut 0),
            TsdrStatus::NullPointer
        );
        assert_eq!(last_error(), "stack is null");
        tsdr_stack_free(ptr::null_mut());
        tsdr_model_free(ptr::null_mut());

        let missing = CString::new("/nonexistent/dir/x.2sdr").unwrap();
        assert_eq!(tsdr_stack_read(missing.as_ptr(), &mut h), TsdrStatus::Io);
        assert!(last_error().contains("/nonexistent/dir/x.2sdr"));
    }
}

#[test]
fn fit_scores_denoise_and_persist() {
    let (values, n, p, q) = synthetic();
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let stack = make_stack(&values, n, p, q);
        let opts = TsdrFitOptions {
            p_u: 8,
            q_u: 8,
            sigma2: 1.0,
            r_max: 0,
        };
        let mut model = ptr::null_mut();
        assert_eq!(
            tsdr_fit(stack, &opts, &mut model),
            TsdrStatus::Ok,
            "{}",
            last_error_or_none()
        );

        let (mut p0, mut q0, mut r) = (0, 0, 0);
        assert_eq!(
            tsdr_model_ranks(model, &mut p0, &mut q0, &mut r),
            TsdrStatus::Ok
        );
        assert!(p0 >= 1 && q0 >= 1 && r >= 1 && r <= p0 * q0);
        let mut s2 = 0.0;
        assert_eq!(tsdr_model_sigma2(model, &mut s2), TsdrStatus::Ok);
        assert_eq!(s2, 1.0);

        let mut scores = vec![0.0; n * r];
        assert_eq!(
            tsdr_scores(model, stack, scores.as_mut_ptr(), scores.len() - 1),
            TsdrStatus::BufferTooSmall
        );
        assert_eq!(
            tsdr_scores(model, stack, scores.as_mut_ptr(), scores.len()),
            TsdrStatus::Ok
        );
        assert!(scores.iter().all(|v| v.is_finite()));
        for k in 0..r {
            let mean: f64 = (0..n).map(|i| scores[i * r + k]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-8, "score column {k} mean {mean}");
        }

        let mut den = ptr::null_mut();
        assert_eq!(tsdr_denoise(model, stack, &mut den), TsdrStatus::Ok);
        let mut mse = f64::NAN;
        assert_eq!(tsdr_mse(den, stack, &mut mse), TsdrStatus::Ok);
        assert!(mse > 0.0 && mse.is_finite());

        let path = CString::new(dir.path().join("m.2sdm").to_str().unwrap()).unwrap();
        assert_eq!(tsdr_model_save(model, path.as_ptr()), TsdrStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(tsdr_model_load(path.as_ptr(), &mut loaded), TsdrStatus::Ok);
        let mut again = vec![0.0; n * r];
        assert_eq!(
            tsdr_scores(loaded, stack, again.as_mut_ptr(), again.len()),
            TsdrStatus::Ok
        );
        assert_eq!(scores, again);

        let spath = CString::new(dir.path().join("den.mrcs").to_str().unwrap()).unwrap();
        assert_eq!(tsdr_stack_write(den, spath.as_ptr()), TsdrStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(tsdr_stack_read(spath.as_ptr(), &mut back), TsdrStatus::Ok);
        let mut diff = f64::NAN;
        assert_eq!(tsdr_mse(den, back, &mut diff), TsdrStatus::Ok);
        assert!(diff < 1e-9, "f32 MRC round trip error {diff}");

        let mut mismatched = ptr::null_mut();
        let other = vec![0.0; 2 * 3 * 3];
        let small = make_stack(&other, 2, 3, 3);
        assert_eq!(
            tsdr_denoise(model, small, &mut mismatched),
            TsdrStatus::InvalidInput
        );
        assert!(mismatched.is_null());

        let bad = CString::new(dir.path().join("bad.2sdm").to_str().unwrap()).unwrap();
        std::fs::write(dir.path().join("bad.2sdm"), b"2SDMgarbage").unwrap();
        assert_eq!(
            tsdr_model_load(bad.as_ptr(), &mut loaded),
            TsdrStatus::Format
        );

        for h in [stack, den, back, small] {
            tsdr_stack_free(h);
        }
        tsdr_model_free(model);
    }
}

fn last_error_or_none() -> String {
    let p = tsdr_last_error_message();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tsdr.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "tsdr_fit",
        "tsdr_scores",
        "tsdr_last_error_message",
        "TSDR_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ TsdrStack *s = 0; TsdrFitOptions o = {{0}}; \
             void (*release)(TsdrStack *) = tsdr_stack_free; return release == 0 || o.p_u || s; }}\n"
        ),
    )
    .unwrap();
    match Command::new("cc")
        .args(["-std=c99", "-Wall", "-fsyntax-only"])
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        ),
        Err(_) => eprintln!("no C compiler found, syntax check skipped"),
    }
}
