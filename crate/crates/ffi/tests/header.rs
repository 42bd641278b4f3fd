use std::path::{Path, PathBuf};
use std::process::Command;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn compiler() -> String {
    std::env::var("CC").unwrap_or_else(|_| "cc".into())
}

fn syntax_check(args: &[&Path]) {
    let include = crate_dir().join("include");
    let out = Command::new(compiler())
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .args(args)
        .output()
        .expect("a C compiler is on PATH");
    assert!(out.status.success(), "compiler rejected input:\n{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn header_is_generated_and_valid_c() {
    let header = crate_dir().join("include/mixseg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "mixseg_last_error",
        "mixseg_mask_from_rle",
        "mixseg_mask_iou",
        "mixseg_class_probabilities",
        "mixseg_hungarian",
        "mixseg_fuse",
        "mixseg_panoptic_quality",
        "mixseg_equal_frequency_sample",
    ] {
        assert!(text.contains(name), "{name} missing from the header");
    }
    let tmp = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(tmp.path(), "#include \"mixseg.h\"\n").unwrap();
    syntax_check(&[tmp.path()]);
}

#[test]
fn c_smoke_program_compiles() {
    syntax_check(&[&crate_dir().join("tests/c/smoke.c")]);
}

/// The library is built with every crate type alongside the test binaries, so
/// the static archive sits next to the `deps` directory.
#[test]
fn c_smoke_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let archive = profile_dir.join("libmixseg_ffi.a");
    assert!(archive.exists(), "static library not found at {}", archive.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let out = Command::new(compiler())
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "link failed:\n{}", String::from_utf8_lossy(&out.stderr));
    let status = Command::new(&bin).status().unwrap();
    assert!(status.success());
}
