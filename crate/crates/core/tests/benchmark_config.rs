//! The committed benchmark configuration file must stay in lockstep with the
//! built-in default; both pin the thresholds the acceptance suite asserts.

use std::path::Path;

use dgtl_core::config::RunConfig;

#[test]
fn committed_benchmark_toml_matches_the_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded, RunConfig::benchmark());
}
