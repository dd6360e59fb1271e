use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panel-ate"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn simulate(dir: &Path, effect: &str) {
    let out = run(&[
        "simulate",
        "--n0",
        "12",
        "--n1",
        "4",
        "--t0",
        "6",
        "--t1",
        "2",
        "--effect",
        effect,
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn estimate_args<'a>(sim: &'a str, out: &'a str) -> Vec<String> {
    [
        "estimate",
        "--data",
        &format!("{sim}/data.csv"),
        "--population",
        &format!("{sim}/population.csv"),
        "--roster",
        &format!("{sim}/roster.txt"),
        "--bootstrap-reps",
        "50",
        "--seed",
        "11",
        "--out",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn simulate_then_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let out = tmp.path().join("out");
    simulate(&sim, "4");
    let args = estimate_args(sim.to_str().unwrap(), out.to_str().unwrap());
    let res = bin().args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("Treatment effect"), "{stdout}");
    for f in [
        "bundle.json",
        "table.txt",
        "table.csv",
        "filter_log.csv",
        "rejects.csv",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let bundle: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bundle.json")).unwrap()).unwrap();
    let results = bundle["outcomes"][0]["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    for r in results {
        let ate = r["estimate"]["ate"].as_f64().unwrap();
        // Noise sd 1 over 4 treated units and 2 post periods.
        assert!((ate - 4.0).abs() < 3.0, "{ate}");
    }
}

#[test]
fn rerun_from_manifest_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    simulate(&sim, "1");
    let args = estimate_args(sim.to_str().unwrap(), first.to_str().unwrap());
    assert!(bin().args(&args).status().unwrap().success());
    let res = run(&[
        "estimate",
        "--from-manifest",
        first.join("bundle.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let a = std::fs::read(first.join("bundle.json")).unwrap();
    let b = std::fs::read(second.join("bundle.json")).unwrap();
    assert_eq!(a, b);

    std::fs::write(sim.join("population.csv"), "economy,population\n").unwrap();
    let res = run(&[
        "estimate",
        "--from-manifest",
        first.join("bundle.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_population_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "0");
    let pop = sim.join("population.csv");
    let text = std::fs::read_to_string(&pop).unwrap();
    let trimmed: Vec<&str> = text.lines().take(text.lines().count() - 2).collect();
    std::fs::write(&pop, trimmed.join("\n") + "\n").unwrap();
    let args = estimate_args(
        sim.to_str().unwrap(),
        tmp.path().join("out").to_str().unwrap(),
    );
    let res = bin().args(&args).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("population"));

    let res = run(&[
        "estimate",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--roster",
        sim.join("roster.txt").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn report_and_plot_from_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let out = tmp.path().join("out");
    simulate(&sim, "2");
    let mut args = estimate_args(sim.to_str().unwrap(), out.to_str().unwrap());
    args[8] = "0".into();
    assert!(bin().args(&args).status().unwrap().success());
    let bundle = out.join("bundle.json");

    let res = run(&[
        "report",
        "--bundle",
        bundle.to_str().unwrap(),
        "--methods",
        "sdid,did",
        "--effect-label",
        "Effect",
    ]);
    assert!(res.status.success());
    let table = String::from_utf8(res.stdout).unwrap();
    assert!(table.contains("Effect"));
    assert!(table.contains("(n/a)"), "{table}");
    assert!(
        table.find("SDID").unwrap() < table.find("DID").unwrap(),
        "{table}"
    );

    let figs = tmp.path().join("figs");
    let res = run(&[
        "plot",
        "--bundle",
        bundle.to_str().unwrap(),
        "--out",
        figs.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let listed = String::from_utf8(res.stdout).unwrap();
    assert!(listed.lines().count() >= 6, "{listed}");
    for line in listed.lines() {
        assert!(Path::new(line).is_file(), "{line}");
    }

    let res = run(&[
        "report",
        "--bundle",
        tmp.path().join("nope.json").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}
