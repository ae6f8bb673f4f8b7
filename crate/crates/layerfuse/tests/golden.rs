//! Emitted sources for the bundled fixtures are pinned byte-for-byte.
//! Regenerate with `LAYERFUSE_BLESS=1 cargo test --test golden`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use layerfuse::app::{cmd_codegen, RunConfig};

const FIXTURES: [&str; 4] = ["a1", "a2", "b1", "c1"];

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn emit(fixture: &str, out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut cfg = RunConfig::new(
        root().join(format!("fixtures/{fixture}.toml")),
        root().join("fixtures/titan_xp.toml"),
    );
    cfg.out = Some(out.to_path_buf());
    let o = cmd_codegen(&cfg).unwrap();
    o.written
        .iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
        .collect()
}

#[test]
fn codegen_matches_golden_files() {
    let bless = std::env::var_os("LAYERFUSE_BLESS").is_some();
    for f in FIXTURES {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = emit(f, d1.path());
        assert_eq!(first, emit(f, d2.path()), "{f}: two runs differ");
        assert_eq!(first.len(), 3, "{f}: expected kernel, host and manifest");
        let dir = root().join("tests/golden").join(f);
        if bless {
            fs::create_dir_all(&dir).unwrap();
            for (name, bytes) in &first {
                fs::write(dir.join(name), bytes).unwrap();
            }
        }
        for (name, bytes) in &first {
            let golden = fs::read(dir.join(name)).unwrap_or_else(|_| panic!("missing golden {f}/{name}"));
            assert!(golden == *bytes, "{f}/{name} differs from the golden copy");
        }
    }
}
