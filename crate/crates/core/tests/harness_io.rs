// SPDX-License-Identifier: MIT OR Apache-2.0

use sinkshift::harness::{cmd_ablate_components, cmd_ablate_sources, cmd_analyze_trace, cmd_bench, cmd_export_trace};
use sinkshift::{Error, InterventionConfig, RunConfig};

fn small() -> RunConfig {
    RunConfig {
        n: 10,
        ..Default::default()
    }
}

#[test]
fn bench_writes_csv_summary_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_bench(&small(), Some(dir.path())).unwrap();
    assert_eq!(out.episodes.len(), 10);

    let mut reader = csv::Reader::from_path(dir.path().join("episodes.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[0], "index");
    assert!(headers.iter().any(|h| h == "answer_after_eraser"));
    assert_eq!(reader.records().count(), 10);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["episodes"], 10);

    let reloaded = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(reloaded, small());
    // The snapshot reproduces the run exactly.
    assert_eq!(cmd_bench(&reloaded, None).unwrap().episodes, out.episodes);
}

#[test]
fn ablation_tables_have_four_rows_and_an_identity_row() {
    let sources = cmd_ablate_sources(&small()).unwrap();
    assert_eq!(sources.len(), 4);
    let none = &sources[0];
    assert!(!none.first && !none.second);
    assert_eq!(none.summary.acc_after_eraser, none.summary.acc_after_base);
    let comps = cmd_ablate_components(&small()).unwrap();
    assert_eq!(comps.len(), 4);
    assert!(comps[3].first && comps[3].second);
}

#[test]
fn exported_trace_analyzes_like_the_live_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s2.trace");
    let trace = cmd_export_trace(&small(), 2, &path).unwrap();
    assert!(path.exists() && dir.path().join("s2.trace.meta").exists());
    let report = cmd_analyze_trace(&path, &InterventionConfig::default(), true).unwrap();
    assert_eq!(report.layers, trace.layers());
    assert_eq!(report.seq_len, trace.seq_len());
    let in_range: Vec<bool> = report.per_layer.iter().map(|l| l.in_range).collect();
    assert_eq!(in_range, [true, true, true, true, false, false, false, false]);
    assert!(report.per_layer.iter().any(|l| l.modified_rows > 0));
}

#[test]
fn missing_files_surface_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.trace");
    assert!(matches!(
        cmd_analyze_trace(&missing, &InterventionConfig::default(), true),
        Err(Error::Io { .. })
    ));
    assert!(matches!(RunConfig::load(&dir.path().join("nope.toml")), Err(Error::Io { .. })));
}
