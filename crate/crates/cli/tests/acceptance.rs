//! Acceptance runner: one PASS/FAIL line per criterion. Criteria 6 and 7
//! drive the `edgegnn` binary end to end.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use edgegnn::models::ArchKind;
use serde_json::Value;
use support::Check;

fn edgegnn(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_edgegnn"))
        .args(args)
        .arg("--json")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`edgegnn {}` exited {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    // train emits JSON lines; the summary is the last one
    let text = String::from_utf8_lossy(&out.stdout);
    let last = if args.first() == Some(&"train") {
        text.lines().last().unwrap_or_default().to_owned()
    } else {
        text.into_owned()
    };
    serde_json::from_str(&last).map_err(|e| format!("bad JSON from {}: {e}", args[0]))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn gradients() -> Check {
    let mut worst = Vec::new();
    for kind in [ArchKind::Gcn2, ArchKind::Sage2] {
        worst.push(format!("{kind} max rel err {:.1e}", support::gradient_check(kind, 2024)?));
    }
    Ok(worst.join(", "))
}

fn invariants() -> Check {
    let suites: [(&str, fn(u64) -> Check); 5] = [
        ("permutation equivariance", support::permutation_equivariance),
        ("K-hop locality", support::k_hop_locality),
        ("metric scale consistency", support::metric_scale_consistency),
        ("windowing count", support::windowing_count),
        ("error/accuracy complement", support::metric_complement),
    ];
    for (name, check) in suites {
        check(8).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok("permutation equivariance, K-hop locality, metric scale consistency, windowing count, complement identity".into())
}

struct Forecast {
    gcn_model: std::path::PathBuf,
    csv: std::path::PathBuf,
    _dir: tempfile::TempDir,
}

fn station_errors(report: &Value) -> Result<Vec<f64>, String> {
    report["stations"]
        .as_array()
        .ok_or("report lacks stations")?
        .iter()
        .map(|s| s["error_pct"].as_f64().ok_or_else(|| "station lacks error_pct".to_owned()))
        .collect()
}

/// Default synthetic dataset, both architectures trained with default
/// settings, evaluated on the chronological test split.
fn forecasting(state: &mut Option<Forecast>) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let csv = dir.path().join("pv.csv");
    edgegnn(&["gen-data", "--out", p(&csv), "--seed", "42", "--days", "150"])?;
    let mut means = Vec::new();
    let mut detail = Vec::new();
    for arch in ["gcn2", "sage2"] {
        let ckpt = dir.path().join(format!("{arch}.json"));
        let model = dir.path().join(format!("{arch}.egir"));
        edgegnn(&["train", "--data", p(&csv), "--arch", arch, "--seed", "42", "--out", p(&ckpt), "--export", p(&model)])?;
        let errors = station_errors(&edgegnn(&["eval", "--model", p(&model), "--data", p(&csv)])?)?;
        if let Some((i, e)) = errors.iter().enumerate().find(|(_, &e)| e > 15.0) {
            return Err(format!("{arch} station {} error {e:.2}% exceeds 15%", i + 1));
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        detail.push(format!(
            "{arch} [{}]",
            errors.iter().map(|e| format!("{e:.2}%")).collect::<Vec<_>>().join(", ")
        ));
        means.push(mean);
    }
    *state = Some(Forecast {
        gcn_model: dir.path().join("gcn2.egir"),
        csv,
        _dir: dir,
    });
    let (gcn, sage) = (means[0], means[1]);
    let summary = format!("{}; mean gcn2 {gcn:.2}% vs sage2 {sage:.2}%", detail.join(", "));
    if gcn <= sage + 2.0 {
        Ok(summary)
    } else {
        Err(format!("gcn2 mean exceeds sage2 mean + 2 points: {summary}"))
    }
}

fn throughput(state: &Option<Forecast>) -> Check {
    let f = state.as_ref().ok_or("needs the GCN2 model from criterion 6")?;
    let report = edgegnn(&[
        "bench", "--model", p(&f.gcn_model), "--data", p(&f.csv), "--split", "all", "--limit", "2209",
        "--repetitions", "5",
    ])?;
    let n = report["n_samples"].as_u64().unwrap_or(0);
    let rate = report["samples_per_sec"].as_f64().unwrap_or(0.0);
    let summary = format!("{n} samples, {rate:.0} samples/sec, median {:.4} s", report["seconds"].as_f64().unwrap_or(0.0));
    if n == 2209 && rate >= 2000.0 {
        Ok(summary)
    } else {
        Err(format!("needs 2209 samples at >= 2000 samples/sec: {summary}"))
    }
}

fn report(id: usize, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let result = run();
    let elapsed = started.elapsed();
    let over = limit.filter(|l| elapsed > *l);
    let (passed, detail) = match (result, over) {
        (Ok(d), None) => (true, d),
        (Ok(d), Some(l)) => (false, format!("{d}; took longer than {:.0?}", l)),
        (Err(e), _) => (false, e),
    };
    println!(
        "{} AC{id} {name}: {detail} [{:.2}s]",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    passed
}

fn main() -> ExitCode {
    let mut forecast = None;
    let results = [
        report(1, "gradient correctness", Some(Duration::from_secs(10)), gradients),
        report(2, "batched/serialized equivalence", Some(Duration::from_secs(5)), || {
            support::mode_equivalence(2024)
        }),
        report(3, "oracle equivalence", None, || support::oracle_equivalence(2024)),
        report(4, "serialization round trip", None, || support::serialization_round_trip(2024)),
        report(5, "custom-operator registration", None, || support::custom_operator_lifecycle(2024)),
        report(6, "desk-scale forecasting", Some(Duration::from_secs(15 * 60)), || {
            forecasting(&mut forecast)
        }),
        report(7, "throughput", None, || throughput(&forecast)),
        report(8, "invariant suites", None, invariants),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
