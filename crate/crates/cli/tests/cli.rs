use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ncma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncma"))
        .args(args)
        .env_remove("NCMA_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ncma(args);
    assert!(out.status.success(), "ncma {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key} = {:?}", row[key]))
}

fn mean_rows(dir: &Path) -> Vec<BTreeMap<String, String>> {
    read_csv(&dir.join("sweep.csv")).into_iter().filter(|r| r["row"] == "mean").collect()
}

#[test]
fn empty_sweep_axis_fails_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.cfg");
    fs::write(&cfg, "variant = NCMA-RMUD\nl_b =\n").unwrap();
    let out = ncma(&["sweep", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("l_b") && err.contains("empty"), "{err}");
    assert!(!dir.path().join("sweep.csv").exists());
}

#[test]
fn config_path_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.cfg");
    fs::write(&cfg, "variant = SU\nsnr_a = 10\nslots = 50\nk = 8\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ncma"))
        .args(["sweep", "-o", dir.path().to_str().unwrap()])
        .env("NCMA_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["variant"] == "SU" && r["slots"] == "50"));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config_hash"].as_str().unwrap(), rows[0]["config_hash"]);
}

#[test]
fn corrupted_trace_record_names_the_slot() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    ok(&["run", "--slots", "40", "--k", "8", "--snr-a", "6", "--trace", trace.to_str().unwrap(), "-o", "/dev/null"]);
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // Line 0 is the header, so slot 12 sits on line 13.
    lines[13] = lines[13].replace("\"channel_seed\":", "\"channel_seed\":\"oops\",\"was\":");
    fs::write(&trace, lines.join("\n")).unwrap();
    for cmd in ["replay", "stats"] {
        let out = ncma(&[cmd, trace.to_str().unwrap()]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("slot 12"), "{cmd}: {err}");
    }
}

#[test]
fn replay_ordering_holds_row_wise() {
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for (i, snr) in ["0", "3", "6", "10", "16"].iter().enumerate() {
        let path = dir.path().join(format!("t{i}.jsonl"));
        let seed = (40 + i).to_string();
        ok(&["run", "--slots", "1000", "--snr-a", snr, "--seed", &seed, "--trace", path.to_str().unwrap(), "-o", "/dev/null"]);
        traces.push(path.to_str().unwrap().to_string());
    }
    let table = dir.path().join("replay.csv");
    let mut args = vec!["replay", "-o", table.to_str().unwrap()];
    args.extend(traces.iter().map(String::as_str));
    ok(&args);
    let rows = read_csv(&table);
    assert_eq!(rows.len(), 3 * traces.len());
    for group in rows.chunks(3) {
        let th: BTreeMap<&str, f64> = group.iter().map(|r| (r["mode"].as_str(), num(r, "th_total"))).collect();
        let ub = num(&group[0], "upper_bound");
        assert!(
            th["su-projection"] <= th["mud-only"] && th["mud-only"] <= th["ncma"] && th["ncma"] <= ub && ub <= 2.0,
            "{}: {th:?}, bound {ub}",
            group[0]["trace"]
        );
    }
}

#[test]
fn lb_sweep_throughput_is_insensitive_to_absolute_length() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("long.jsonl");
    ok(&["run", "--slots", "10000", "--snr-a", "8", "--seed", "3", "--trace", trace.to_str().unwrap(), "-o", "/dev/null"]);
    let csv_text = ok(&["replay", trace.to_str().unwrap(), "--modes", "ncma", "--lb-sweep", "4,8,16,32", "--ratio", "1.5"]);
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let rows: Vec<BTreeMap<String, String>> = r.deserialize().map(|x| x.unwrap()).collect();
    let lb: Vec<&str> = rows.iter().map(|r| r["l_b"].as_str()).collect();
    assert_eq!(lb, ["4", "8", "16", "32"]);
    let la: Vec<&str> = rows.iter().map(|r| r["l_a"].as_str()).collect();
    assert_eq!(la, ["6", "12", "24", "48"]);
    let th: Vec<f64> = rows.iter().map(|r| num(r, "th_total")).collect();
    let mean = th.iter().sum::<f64>() / th.len() as f64;
    for t in &th {
        assert!((t - mean).abs() / mean <= 0.05, "{th:?}");
    }
}

#[test]
fn balanced_sweep_group_trends_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("balanced.cfg");
    fs::write(&cfg, "variant = NCMA-RMUD\nsnr_a = 6:14:2\nbalanced = true\nslots = 3000\nseed = 11\n").unwrap();
    ok(&["sweep", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    let rows = mean_rows(dir.path());
    assert_eq!(rows.len(), 5);
    // Slack of about two binomial standard errors at 3000 slots.
    let slack = 0.015;
    for w in rows.windows(2) {
        assert!(num(&w[1], "p_ab") + slack >= num(&w[0], "p_ab"), "Pr(AB) fell: {w:?}");
        assert!(num(&w[1], "p_none") <= num(&w[0], "p_none") + slack, "Pr(NONE) rose: {w:?}");
    }
    assert!(num(&rows[4], "p_ab") > num(&rows[0], "p_ab"));
}

#[test]
fn unbalanced_sweep_lifts_both_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("unbalanced.cfg");
    fs::write(&cfg, "variant = NCMA-RMUD\nsnr_a = 8\nsnr_b = -4:4:2\nslots = 3000\nseed = 5\n").unwrap();
    ok(&["sweep", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    let rows = mean_rows(dir.path());
    assert_eq!(rows.len(), 5);
    let slack = 0.01;
    for w in rows.windows(2) {
        for col in ["th_a", "th_b", "th_total"] {
            assert!(num(&w[1], col) + slack >= num(&w[0], col), "{col} fell between {w:?}");
        }
    }
    assert!(num(&rows[4], "th_b") > num(&rows[0], "th_b") + 0.5);
}

#[test]
fn run_is_reproducible_and_stats_matches() {
    let dir = tempfile::tempdir().unwrap();
    let (t1, t2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let args = |t: &Path| -> Vec<String> {
        ["run", "--slots", "200", "--k", "16", "--snr-a", "4", "--trace", t.to_str().unwrap()].map(String::from).to_vec()
    };
    let a = ok(&args(&t1).iter().map(String::as_str).collect::<Vec<_>>());
    let b = ok(&args(&t2).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(a, b);
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());

    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&ok(&["stats", t1.to_str().unwrap()])).unwrap();
    assert_eq!(summary["throughput"], report["stats"]["throughput"]);
    assert_eq!(summary["config_hash"], report["config_hash"]);
    assert_eq!(summary["records"], 200);
    let events: u64 = summary["event_counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(events, 200);
}
