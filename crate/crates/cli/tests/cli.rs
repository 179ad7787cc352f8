use std::path::Path;
use std::process::{Command, Output};

fn czsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_czsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const TWO_QUBIT: &str = "[device]\npreset = \"reference_two_qubit\"\n";

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let out = czsim(&["calibrate", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["error"], "usage");
    assert_eq!(line["path"], "/nonexistent/run.toml");
}

#[test]
fn unknown_flag_is_rejected() {
    let out = czsim(&["calibrate", "--config", "x.toml", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[device]\npreset = \"nine_qubit\"\n");
    let out = czsim(&["calibrate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn calibrate_reports_each_coupler() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "two.toml", TWO_QUBIT);
    let out = czsim(&["calibrate", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().next().unwrap();
    assert!(line.starts_with("coupler=1 idle_ghz=7.86"), "{line}");
    let khz: f64 = line.split("residual_zz_khz=").nth(1).unwrap().parse().unwrap();
    assert!(khz < 10.0);
}

#[test]
fn pulse_csv_starts_and_ends_at_idle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "two.toml", TWO_QUBIT);
    let out_path = dir.path().join("p.csv");
    let out = czsim(&[
        "pulse", "--config", &cfg, "--shape", "fourier", "--gate-time", "30", "--lambda", "-0.5", "--samples", "60",
        "--out", out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(&out_path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["t_ns", "omega_c_ghz"]);
    let rows: Vec<(f64, f64)> = r
        .records()
        .map(|x| {
            let x = x.unwrap();
            (x[0].parse().unwrap(), x[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 61);
    assert_eq!(rows[60].0, 30.0);
    assert!((rows[0].1 - rows[60].1).abs() < 1e-9);
    assert!(rows[30].1 < rows[0].1);
}

#[test]
fn zz_sweep_writes_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("zz.csv");
    let cfg = write(
        dir.path(),
        "zz.toml",
        &format!(
            "{TWO_QUBIT}\n[experiment]\nkind = \"zz_map\"\nsystems = [\"two_qubit\"]\n\
             coupler_ghz = {{ start = 6.0, stop = 7.0, count = 5 }}\noutput = {:?}\n",
            out_path.display().to_string()
        ),
    );
    let out = czsim(&["sweep", "--config", &cfg, "--workers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rows=5 failed=0"));
    let first = std::fs::read_to_string(&out_path).unwrap();
    let header = first.lines().next().unwrap();
    assert_eq!(
        header,
        "system,coupler_ghz,coupler_anharmonicity_ghz,nu_zz_ghz,abs_nu_zz_ghz,wall_time_s,status"
    );
    assert_eq!(first.lines().count(), 6);

    // a second run finds every key done and appends nothing
    let again = czsim(&["sweep", "--config", &cfg, "--workers", "1"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(&out_path).unwrap(), first);
}

#[test]
fn sweep_without_output_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "zz.toml",
        &format!("{TWO_QUBIT}\n[experiment]\nkind = \"zz_map\"\nsystems = [\"two_qubit\"]\n"),
    );
    let out = czsim(&["sweep", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        czsim_core::experiments::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 5);
}
