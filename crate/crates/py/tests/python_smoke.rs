use std::path::{Path, PathBuf};
use std::process::Command;

/// `target/<profile>`, found from this test binary's location in `deps/`.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn python_smoke_script() {
    let lib = profile_dir().join("libtierplan_py.so");
    if !lib.exists() {
        eprintln!("skipping: {} not built on this platform", lib.display());
        return;
    }
    if Command::new("python3").arg("--version").output().is_err() {
        eprintln!("skipping: no python3 on PATH");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(&lib, dir.path().join("tierplan_py.so")).unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let out = Command::new("python3")
        .arg(&script)
        .env("PYTHONPATH", dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "smoke test failed\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("smoke test passed"));
}
