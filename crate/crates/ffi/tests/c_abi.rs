use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use bridgelab_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = bl_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

const DATA: &str = "classes = 15\nper_class = 6\nimage_size = 8\nattributes = 4\nembedding_dim = 3\nseed = 5\n";
const RUN: &str = "variant = simpaux\nsteps = 3\nval_every = 0\nway = 3\nshot = 1\nquery = 2\neval_episodes = 6\n\
backbone.widths = 3,4\naux.widths = 3,4\nbridge.hidden = 5\nseed = 2\n";

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(bl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_model_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds: *mut BlDataset = ptr::null_mut();
    assert_eq!(unsafe { bl_dataset_generate(c(DATA).as_ptr(), &mut ds) }, BlStatus::Ok);
    assert!(bl_last_error_message().is_null());
    let (mut n, mut k) = (0usize, 0usize);
    assert_eq!(unsafe { bl_dataset_size(ds, &mut n, &mut k) }, BlStatus::Ok);
    assert_eq!((n, k), (90, 15));

    let data_path = c(dir.path().join("d.smpx").to_str().unwrap());
    assert_eq!(unsafe { bl_dataset_save(ds, data_path.as_ptr()) }, BlStatus::Ok);
    let mut loaded: *mut BlDataset = ptr::null_mut();
    assert_eq!(unsafe { bl_dataset_load(data_path.as_ptr(), &mut loaded) }, BlStatus::Ok);

    let mut model: *mut BlModel = ptr::null_mut();
    assert_eq!(unsafe { bl_model_train(loaded, c(RUN).as_ptr(), &mut model) }, BlStatus::Ok);
    let (mut m1, mut ci1) = (0.0, 0.0);
    assert_eq!(unsafe { bl_evaluate(model, ds, c(RUN).as_ptr(), &mut m1, &mut ci1) }, BlStatus::Ok);
    assert!((0.0..=1.0).contains(&m1) && ci1 >= 0.0);

    let ckpt = c(dir.path().join("m.smpx").to_str().unwrap());
    assert_eq!(unsafe { bl_model_save(model, ckpt.as_ptr()) }, BlStatus::Ok);
    let mut reloaded: *mut BlModel = ptr::null_mut();
    assert_eq!(unsafe { bl_model_load(ckpt.as_ptr(), &mut reloaded) }, BlStatus::Ok);
    let (mut m2, mut ci2) = (0.0, 0.0);
    assert_eq!(unsafe { bl_evaluate(reloaded, ds, c(RUN).as_ptr(), &mut m2, &mut ci2) }, BlStatus::Ok);
    assert_eq!((m1.to_bits(), ci1.to_bits()), (m2.to_bits(), ci2.to_bits()));

    unsafe {
        bl_model_free(model);
        bl_model_free(reloaded);
        bl_dataset_free(ds);
        bl_dataset_free(loaded);
        bl_dataset_free(ptr::null_mut());
        bl_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut ds: *mut BlDataset = ptr::null_mut();
    let status = unsafe { bl_dataset_generate(c("ambiguity = 1.5").as_ptr(), &mut ds) };
    assert_eq!(status, BlStatus::Config);
    assert!(ds.is_null());
    assert!(last_error().contains("ambiguity"));

    assert_eq!(unsafe { bl_dataset_generate(c("bogus = 1").as_ptr(), &mut ds) }, BlStatus::Config);
    assert_eq!(unsafe { bl_dataset_generate(ptr::null(), ptr::null_mut()) }, BlStatus::NullPointer);
    assert_eq!(
        unsafe { bl_dataset_load(c("/nonexistent/d.smpx").as_ptr(), &mut ds) },
        BlStatus::Io
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.smpx");
    std::fs::write(&junk, b"not a container").unwrap();
    let junk = c(junk.to_str().unwrap());
    assert_eq!(unsafe { bl_dataset_load(junk.as_ptr(), &mut ds) }, BlStatus::Format);

    assert_eq!(unsafe { bl_dataset_generate(c(DATA).as_ptr(), &mut ds) }, BlStatus::Ok);
    let mut model: *mut BlModel = ptr::null_mut();
    let too_wide = format!("{RUN}way = 20\n").replace("way = 3\n", "");
    let status = unsafe { bl_model_train(ds, c(&too_wide).as_ptr(), &mut model) };
    assert_eq!(status, BlStatus::InsufficientData, "{}", last_error());
    assert_eq!(
        unsafe { bl_evaluate(ptr::null(), ds, ptr::null(), ptr::null_mut(), ptr::null_mut()) },
        BlStatus::NullPointer
    );
    unsafe { bl_dataset_free(ds) };
}

#[test]
fn gradcheck_passes_through_the_abi() {
    let mut worst = f64::NAN;
    assert_eq!(unsafe { bl_gradcheck(0, &mut worst) }, BlStatus::Ok);
    assert!(worst <= 1e-4);
}

#[test]
fn generated_header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("bridgelab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["bl_dataset_generate", "bl_model_train", "bl_evaluate", "bl_gradcheck", "BL_STATUS_OK"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"bridgelab.h\"\n\
         int main(void) {\n\
           BlDataset *ds = NULL;\n\
           BlStatus s = bl_dataset_generate(\"classes = 10\", &ds);\n\
           if (s != BL_STATUS_OK) { return (int)s; }\n\
           bl_dataset_free(ds);\n\
           return bl_version() == NULL;\n\
         }\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&src)
            .output();
        match out {
            Ok(o) => assert!(o.status.success(), "{compiler}: {}", String::from_utf8_lossy(&o.stderr)),
            Err(e) => panic!("{compiler} unavailable: {e}"),
        }
    }
}
