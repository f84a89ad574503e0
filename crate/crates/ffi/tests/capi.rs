use std::ffi::{CStr, CString};
use std::ptr;

use hierssl_ffi::*;

const TOY: &str = "Kingdom,Phylum,Species\nK,P1,S1\nK,P1,S2\nK,P2,S3\nK,P2,S4\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(hierssl_last_error()) }.to_string_lossy().into_owned()
}

fn toy() -> *mut HierTaxonomy {
    let text = CString::new(TOY).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { hierssl_taxonomy_from_text(text.as_ptr(), &mut t) }, HierStatus::Ok);
    assert!(!t.is_null());
    t
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(hierssl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn taxonomy_queries() {
    let t = toy();
    unsafe {
        assert_eq!(hierssl_taxonomy_num_levels(t), 3);
        let mut n = 0;
        assert_eq!(hierssl_taxonomy_num_classes(t, 1, &mut n), HierStatus::Ok);
        assert_eq!(n, 2);
        let mut a = 99;
        assert_eq!(hierssl_taxonomy_ancestor(t, 2, 1, &mut a), HierStatus::Ok);
        assert_eq!(a, 1);
        assert_eq!(hierssl_taxonomy_ancestor(t, 7, 1, &mut a), HierStatus::Data);
        assert!(!last_error().is_empty());

        let probs = [0.1, 0.2, 0.3, 0.4];
        let mut out = [0.0; 2];
        assert_eq!(hierssl_taxonomy_marginalize(t, probs.as_ptr(), 4, 1, out.as_mut_ptr(), 2), HierStatus::Ok);
        assert!((out[0] - 0.3).abs() < 1e-15 && (out[1] - 0.7).abs() < 1e-15);
        assert_eq!(
            hierssl_taxonomy_marginalize(t, probs.as_ptr(), 4, 1, out.as_mut_ptr(), 1),
            HierStatus::BufferTooSmall
        );
        hierssl_taxonomy_free(t);
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(hierssl_taxonomy_from_text(ptr::null(), &mut t), HierStatus::NullPointer);
        assert!(last_error().contains("text"));
        assert_eq!(hierssl_taxonomy_num_levels(ptr::null()), 0);
        assert_eq!(hierssl_model_num_classes(ptr::null()), 0);
        hierssl_taxonomy_free(ptr::null_mut());
        hierssl_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_categories() {
    unsafe {
        let mut t = ptr::null_mut();
        let bad = CString::new("Kingdom\n").unwrap();
        assert_eq!(hierssl_taxonomy_from_text(bad.as_ptr(), &mut t), HierStatus::Data);
        assert!(t.is_null());

        let dir = tempfile::tempdir().unwrap();
        let missing = CString::new(dir.path().join("none.csv").to_str().unwrap()).unwrap();
        assert_eq!(hierssl_taxonomy_load(missing.as_ptr(), &mut t), HierStatus::Data);

        let mut m = ptr::null_mut();
        let mut top1 = 0.0;
        let cfg = CString::new("version = 1\ntrain.method = mixmatch\n").unwrap();
        assert_eq!(hierssl_train(cfg.as_ptr(), &mut m, &mut top1), HierStatus::Config);
        assert!(last_error().contains("mixmatch"));
    }
}

#[test]
fn train_predict_and_reload() {
    let cfg = CString::new(
        "version = 1\n\
         gen.level_names = Kingdom,Phylum,Species\n\
         gen.level_counts = 1,2,4\n\
         gen.sigmas = 0.7,0.7,0.7\n\
         gen.dim = 8\n\
         gen.out_attach_level = Phylum\n\
         train.steps = 50\n\
         train.use_hier = false\n",
    )
    .unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        let mut top1 = -1.0;
        let status = hierssl_train(cfg.as_ptr(), &mut m, &mut top1);
        assert_eq!(status, HierStatus::Ok, "{}", last_error());
        assert!((0.0..=1.0).contains(&top1));
        assert_eq!(hierssl_model_input_dim(m), 8);
        let k = hierssl_model_num_classes(m);
        assert!(k > 0);

        let x = [0.5; 8];
        let mut probs = vec![0.0; k];
        assert_eq!(hierssl_model_predict(m, x.as_ptr(), 8, probs.as_mut_ptr(), k), HierStatus::Ok);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(hierssl_model_predict(m, x.as_ptr(), 3, probs.as_mut_ptr(), k), HierStatus::Data);
        hierssl_model_free(m);
    }

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bogus.ckpt");
    std::fs::write(&ckpt, "not a checkpoint\n").unwrap();
    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { hierssl_model_load(path.as_ptr(), &mut m) }, HierStatus::Data);
}
