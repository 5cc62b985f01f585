use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dykonem_ffi::*;

const CONFIG: &str = "\
gen.patients=30
gen.doctors=6
gen.hospitals=3
gen.diseases=4
gen.consultations=100
gen.offline_visits=40
gen.failure_rate=0.25
gen.span_days=60
gen.seed=3
model.entity_dim=8
model.relation_dim=4
model.attr_dim=4
model.id_dim=4
model.text_dim=8
model.fusion_dim=16
model.hidden=8
train.epochs=2
train.batch_size=32
";

fn last_error() -> String {
    let p = dyk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn header() -> String {
    let path = Path::new(env!("OUT_DIR")).join("dykonem.h");
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn header_declares_the_api() {
    let h = header();
    for name in [
        "dyk_last_error",
        "dyk_version",
        "dyk_dataset_load",
        "dyk_dataset_generate",
        "dyk_dataset_write",
        "dyk_dataset_len",
        "dyk_dataset_free",
        "dyk_model_train",
        "dyk_model_load",
        "dyk_model_save",
        "dyk_model_predict",
        "dyk_model_evaluate",
        "dyk_model_free",
        "typedef struct DykDataset DykDataset",
        "typedef struct DykModel DykModel",
        "DYK_STATUS_OK = 0",
        "DYK_STATUS_NULL_POINTER",
        "DykMetrics",
    ] {
        assert!(h.contains(name), "header lacks `{name}`");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    if !cc.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"dykonem.h\"\n\
         int main(void) {\n\
           DykDataset *d = 0;\n\
           DykStatus s = dyk_dataset_generate(0, &d);\n\
           dyk_dataset_free(d);\n\
           return s == DYK_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", env!("OUT_DIR")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_train_predict_save_load() {
    let cfg = CString::new(CONFIG).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(dyk_dataset_generate(cfg.as_ptr(), &mut ds), DykStatus::Ok);
        let mut n = 0usize;
        assert_eq!(dyk_dataset_len(ds, &mut n), DykStatus::Ok);
        assert_eq!(n, 100);

        let mut model = ptr::null_mut();
        assert_eq!(dyk_model_train(ds, cfg.as_ptr(), &mut model), DykStatus::Ok, "{}", last_error());
        let mut probs = vec![0.0; n];
        assert_eq!(dyk_model_predict(model, ds, probs.as_mut_ptr(), n), DykStatus::Ok);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

        let mut m = DykMetrics::default();
        assert_eq!(dyk_model_evaluate(model, ds, &mut m), DykStatus::Ok);
        assert!((0.0..=1.0).contains(&m.f1));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.dykm").to_str().unwrap()).unwrap();
        assert_eq!(dyk_model_save(model, path.as_ptr()), DykStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(dyk_model_load(path.as_ptr(), &mut loaded), DykStatus::Ok);
        let mut again = vec![0.0; n];
        assert_eq!(dyk_model_predict(loaded, ds, again.as_mut_ptr(), n), DykStatus::Ok);
        assert_eq!(
            probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let data_dir = CString::new(dir.path().join("data").to_str().unwrap()).unwrap();
        assert_eq!(dyk_dataset_write(ds, data_dir.as_ptr()), DykStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(dyk_dataset_load(data_dir.as_ptr(), &mut reloaded), DykStatus::Ok);
        let mut n2 = 0;
        assert_eq!(dyk_dataset_len(reloaded, &mut n2), DykStatus::Ok);
        assert_eq!(n2, n);

        assert_eq!(dyk_model_predict(model, ds, probs.as_mut_ptr(), n - 1), DykStatus::BufferSize);
        assert!(last_error().contains("buffer"));

        dyk_dataset_free(reloaded);
        dyk_model_free(loaded);
        dyk_model_free(model);
        dyk_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(dyk_dataset_load(ptr::null(), &mut ds), DykStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert!(ds.is_null());

        let missing = CString::new("/nonexistent/dykonem/data").unwrap();
        assert_eq!(dyk_dataset_load(missing.as_ptr(), &mut ds), DykStatus::Io);

        let bad = CString::new("gen.bogus=1").unwrap();
        assert_eq!(dyk_dataset_generate(bad.as_ptr(), &mut ds), DykStatus::Config);
        assert!(last_error().contains("gen.bogus"));

        let not_pairs = CString::new("just words").unwrap();
        assert_eq!(dyk_dataset_generate(not_pairs.as_ptr(), &mut ds), DykStatus::Parse);

        let bad_model = CString::new("/nonexistent/model.dykm").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(dyk_model_load(bad_model.as_ptr(), &mut model), DykStatus::Io);
        assert_eq!(dyk_model_evaluate(ptr::null(), ptr::null(), ptr::null_mut()), DykStatus::NullPointer);

        // Freeing null is a no-op.
        dyk_dataset_free(ptr::null_mut());
        dyk_model_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(dyk_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
