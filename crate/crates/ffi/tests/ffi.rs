use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use prolap::geometry::{csd_similarity, inclusion_score, DiagGaussian};
use prolap_ffi::*;

fn last_error() -> String {
    let p = prolap_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn gaussian_math_matches_the_library() {
    let (mu_a, lv_a) = ([0.3, -1.2, 0.5], [-0.4, 0.1, 0.9]);
    let (mu_t, lv_t) = ([1.0, 0.2, -0.7], [0.2, -1.0, 0.0]);
    let a = DiagGaussian::new(mu_a.to_vec(), lv_a.to_vec()).unwrap();
    let t = DiagGaussian::new(mu_t.to_vec(), lv_t.to_vec()).unwrap();
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(
            prolap_csd_similarity(
                mu_a.as_ptr(),
                lv_a.as_ptr(),
                mu_t.as_ptr(),
                lv_t.as_ptr(),
                3,
                &mut v
            ),
            ProlapStatus::Ok
        );
        assert_eq!(v, csd_similarity(&a, &t).unwrap());
        assert_eq!(
            prolap_inclusion_score(
                mu_a.as_ptr(),
                lv_a.as_ptr(),
                mu_t.as_ptr(),
                lv_t.as_ptr(),
                3,
                &mut v
            ),
            ProlapStatus::Ok
        );
        assert_eq!(v, inclusion_score(&a, &t).unwrap());
        assert!(prolap_last_error().is_null());

        let st = prolap_ppcl(
            mu_a.as_ptr(),
            lv_a.as_ptr(),
            mu_t.as_ptr(),
            lv_t.as_ptr(),
            3,
            1,
            2.0,
            -1.0,
            &mut v,
        );
        assert_eq!(st, ProlapStatus::Ok);
        let st = prolap_inclusion_loss(
            mu_a.as_ptr(),
            lv_a.as_ptr(),
            mu_t.as_ptr(),
            lv_t.as_ptr(),
            3,
            1.0,
            &mut v,
        );
        assert_eq!(st, ProlapStatus::Ok);
        assert!(v > 0.0);
        let st = prolap_kl_to_standard([0.0].as_ptr(), [0.0].as_ptr(), 1, &mut v);
        assert_eq!((st, v), (ProlapStatus::Ok, 0.0));
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut v = 0.0;
    unsafe {
        let st = prolap_csd_similarity(
            ptr::null(),
            [0.0].as_ptr(),
            [0.0].as_ptr(),
            [0.0].as_ptr(),
            1,
            &mut v,
        );
        assert_eq!(st, ProlapStatus::NullPointer);
        assert!(last_error().contains("mu"));

        let st = prolap_ppcl(
            [0.0].as_ptr(),
            [0.0].as_ptr(),
            [0.0].as_ptr(),
            [0.0].as_ptr(),
            1,
            3,
            1.0,
            0.0,
            &mut v,
        );
        assert_eq!(st, ProlapStatus::Usage);
        assert!(!last_error().is_empty());

        let st = prolap_kl_to_standard([f64::NAN].as_ptr(), [0.0].as_ptr(), 1, &mut v);
        assert_ne!(st, ProlapStatus::Ok);

        let path = CString::new("/nonexistent/prolap.tsv").unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(
            prolap_dataset_load(path.as_ptr(), &mut ds),
            ProlapStatus::Data
        );
        assert!(ds.is_null());
        prolap_dataset_free(ptr::null_mut());
        prolap_model_free(ptr::null_mut());
    }
}

#[test]
fn inclusion_rate_and_retrieval_metrics() {
    // Row 0: level 1 is a wider copy (included); row 1: identical (H = 0, fails).
    let mu = [0.0, 0.0, 1.0, 1.0];
    let lv1 = [4f64.ln(), 4f64.ln(), 0.0, 0.0];
    let lv4 = [0.0; 4];
    let mut pct = 0.0;
    unsafe {
        let st = prolap_inclusion_test_rate(
            mu.as_ptr(),
            lv1.as_ptr(),
            mu.as_ptr(),
            lv4.as_ptr(),
            2,
            2,
            &mut pct,
        );
        assert_eq!(st, ProlapStatus::Ok);
    }
    assert_eq!(pct, 50.0);

    // Query 0 ranks its relevant item 2nd, query 1 ranks it 1st.
    let scores = [0.9, 0.5, 0.1, 0.2, 0.8, 0.3];
    let relevant = [0u8, 1, 0, 0, 1, 0];
    let mut recall = [0.0; 3];
    let mut map = 0.0;
    unsafe {
        let st = prolap_retrieval_metrics(
            scores.as_ptr(),
            relevant.as_ptr(),
            2,
            3,
            recall.as_mut_ptr(),
            &mut map,
        );
        assert_eq!(st, ProlapStatus::Ok);
    }
    assert_eq!(recall, [0.5, 1.0, 1.0]);
    assert!((map - 0.75).abs() < 1e-15);
}

#[test]
fn dataset_train_embed_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(prolap_dataset_generate(24, 8, 5, &mut ds), ProlapStatus::Ok);
        assert_eq!((prolap_dataset_len(ds), prolap_dataset_dim(ds)), (24, 8));
        let mut feat = [0.0; 8];
        assert_eq!(
            prolap_dataset_features(ds, 3, 4, feat.as_mut_ptr(), 8),
            ProlapStatus::Ok
        );
        assert_eq!(
            prolap_dataset_features(ds, 3, 9, feat.as_mut_ptr(), 8),
            ProlapStatus::Usage
        );
        assert_eq!(
            prolap_dataset_features(ds, 3, 0, feat.as_mut_ptr(), 7),
            ProlapStatus::Data
        );

        let path = CString::new(dir.path().join("ds.tsv").to_str().unwrap()).unwrap();
        assert_eq!(prolap_dataset_save(ds, path.as_ptr()), ProlapStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(
            prolap_dataset_load(path.as_ptr(), &mut back),
            ProlapStatus::Ok
        );
        assert_eq!(prolap_dataset_len(back), 24);
        prolap_dataset_free(back);

        let preset = CString::new("prolap-full").unwrap();
        let over = CString::new("epochs = 2\nbatch_size = 8\nhidden = 8\nd_out = 4\n").unwrap();
        let out_dir = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
        let mut model = ptr::null_mut();
        let st = prolap_train(
            ds,
            preset.as_ptr(),
            over.as_ptr(),
            out_dir.as_ptr(),
            &mut model,
        );
        assert_eq!(st, ProlapStatus::Ok, "{}", last_error());
        assert_eq!(
            (
                prolap_model_input_dim(model),
                prolap_model_output_dim(model)
            ),
            (8, 4)
        );

        let (mut mu, mut lv) = ([0.0; 4], [0.0; 4]);
        let st = prolap_model_embed(
            model,
            ProlapModality::Audio,
            feat.as_ptr(),
            8,
            ptr::null(),
            mu.as_mut_ptr(),
            lv.as_mut_ptr(),
            4,
        );
        assert_eq!(st, ProlapStatus::Ok);
        let mut s = 0.0;
        assert_eq!(
            prolap_model_score(
                model,
                mu.as_ptr(),
                lv.as_ptr(),
                mu.as_ptr(),
                lv.as_ptr(),
                4,
                &mut s
            ),
            ProlapStatus::Ok
        );
        prolap_model_free(model);

        // The saved final checkpoint reproduces the in-memory model.
        let ck = CString::new(
            dir.path()
                .join("run/ckpt-epoch-0002.json")
                .to_str()
                .unwrap(),
        )
        .unwrap();
        let mut loaded = ptr::null_mut();
        assert_eq!(
            prolap_model_load(ck.as_ptr(), &mut loaded),
            ProlapStatus::Ok
        );
        let (mut mu2, mut lv2) = ([0.0; 4], [0.0; 4]);
        let vis = [1u8, 1, 0, 1, 1, 1, 1, 1];
        let st = prolap_model_embed(
            loaded,
            ProlapModality::Audio,
            feat.as_ptr(),
            8,
            ptr::null(),
            mu2.as_mut_ptr(),
            lv2.as_mut_ptr(),
            4,
        );
        assert_eq!(st, ProlapStatus::Ok);
        assert_eq!((mu, lv), (mu2, lv2));
        let st = prolap_model_embed(
            loaded,
            ProlapModality::Text,
            feat.as_ptr(),
            8,
            vis.as_ptr(),
            mu2.as_mut_ptr(),
            lv2.as_mut_ptr(),
            3,
        );
        assert_eq!(st, ProlapStatus::Data);
        prolap_model_free(loaded);
        prolap_dataset_free(ds);
    }
}

/// Compiles `tests/c/smoke.c` against the generated header and the static
/// library and runs it. Skipped when no C compiler or static library exists.
#[test]
fn c_program_links_against_the_header() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("prolap.h").exists(), "header not generated");
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| crate_dir.join("../../target"));
    let lib = ["debug", "release"]
        .iter()
        .map(|p| target.join(p).join("libprolap_ffi.a"))
        .find(|p| p.exists());
    let (Some(lib), Ok(_)) = (lib, Command::new("cc").arg("--version").output()) else {
        eprintln!("skipping: no static library or C compiler");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "smoke program exited with {:?}",
        out.status.code()
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
