//! End-to-end pipeline run at smoke scale: every stage in order, twice, with
//! byte-identical reports, plus shape and ordering checks on the emitted
//! tables.

use std::fs;
use std::path::Path;

use ckba::pipeline::config::VariantSpec;
use ckba::pipeline::stages::read_csv;
use ckba::pipeline::{run_all, ExperimentConfig};

fn smoke_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::desk_default(2024);
    config.grid.nx = 16;
    config.grid.ny = 16;
    config.n_xi = 48;
    config.n_y_list = vec![8, 32];
    config.n_u = 8;
    config.q_train = 200;
    config.q_test = 200;
    config.uq.diagnostic_wells = 3;
    config.inversion.variants = vec![VariantSpec::TwoX1d];
    config.inversion.max_iters = 5_000;
    config
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<String>) {
    for entry in fs::read_dir(root.join(rel)).unwrap() {
        let entry = entry.unwrap();
        let sub = rel.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            collect_files(root, &sub, out);
        } else {
            out.push(sub.to_string_lossy().into_owned());
        }
    }
}

#[test]
fn full_pipeline_smoke() {
    let config = smoke_config();
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    run_all(&config, dir1.path()).unwrap();
    run_all(&config, dir2.path()).unwrap();

    // reports are byte-identical across runs
    let mut files = Vec::new();
    collect_files(dir1.path(), Path::new("report"), &mut files);
    files.sort();
    assert!(files.iter().any(|f| f.ends_with("rmse_test.csv")));
    assert!(files.iter().any(|f| f.ends_with("inversion.csv")));
    for rel in &files {
        let a = fs::read(dir1.path().join(rel)).unwrap();
        let b = fs::read(dir2.path().join(rel)).unwrap();
        assert_eq!(a, b, "report file {rel} differs between runs");
    }

    // RMSE table: one row per basis x variant, n_y ordered, finite values
    let (header, rows) = read_csv(&dir1.path().join("report/rmse_test.csv")).unwrap();
    assert_eq!(header[0], "basis");
    assert_eq!(header[1], "n_y");
    let expected_rows = (1 + config.n_y_list.len()) * config.ba.variants.len();
    assert_eq!(rows.len(), expected_rows);
    let mut last_ny = 0usize;
    for row in &rows {
        let n_y: usize = row[1].parse().unwrap();
        assert!(n_y >= last_ny, "rows must be ordered by n_y");
        last_ny = n_y;
        for field in &row[3..] {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    // conditional ensemble variances do not exceed the unconditional ones
    // (5% Monte-Carlo slack)
    let (var_header, var_rows) = read_csv(&dir1.path().join("uq/variance.csv")).unwrap();
    assert_eq!(var_header[0], "basis");
    let uncond: Vec<f64> = var_rows[0][2..].iter().map(|v| v.parse().unwrap()).collect();
    for row in &var_rows[1..] {
        for (w, field) in row[2..].iter().enumerate() {
            let v: f64 = field.parse().unwrap();
            assert!(
                v <= uncond[w] * 1.05,
                "conditional variance {v} exceeds unconditional {} at well {w}",
                uncond[w]
            );
        }
    }

    // inversion summary covers every method at every n_y with finite errors
    let (_, inv_rows) = read_csv(&dir1.path().join("report/inversion.csv")).unwrap();
    assert_eq!(
        inv_rows.len(),
        config.n_y_list.len() * (1 + 2 * config.inversion.variants.len())
    );
    for row in &inv_rows {
        let rel_l2: f64 = row[5].parse().unwrap();
        assert!(rel_l2.is_finite() && rel_l2 >= 0.0 && rel_l2 < 2.0);
    }

    // forward-query accounting: the surrogate data cost equals the training
    // ensemble plus the quadrature preimage queries
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir1.path().join("manifest.json")).unwrap(),
    )
    .unwrap();
    let counts = manifest["query_counts"].as_object().unwrap();
    for (key, value) in counts {
        if let Some(rest) = key.strip_prefix("surrogate-cost:") {
            let (tag, variant) = rest.rsplit_once(':').unwrap();
            let train = counts[&format!("ensemble:{tag}:train")].as_u64().unwrap();
            let quad = counts[&format!("train:{tag}:{variant}:quadrature")]
                .as_u64()
                .unwrap();
            assert_eq!(value.as_u64().unwrap(), train + quad, "accounting for {key}");
        }
    }

    // rerunning one stage rewrites identical artifacts (idempotence)
    let before = fs::read(dir1.path().join("report/rmse_test.csv")).unwrap();
    ckba::pipeline::run_stage(ckba::pipeline::Stage::Report, &config, dir1.path()).unwrap();
    let after = fs::read(dir1.path().join("report/rmse_test.csv")).unwrap();
    assert_eq!(before, after);
}
