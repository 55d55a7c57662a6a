use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zoh(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zoh-cbf"));
    cmd.args(args).env_remove("ZOH_CBF_OUT");
    if let Some(dir) = out {
        cmd.env("ZOH_CBF_OUT", dir);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["margins-table"][..],
        &["simulate", "--bogus"],
        &["simulate", "--system", "integrator", "--variant", "phi9"],
        &["margins-table", "--system", "nowhere"],
        &[
            "margins-table",
            "--system",
            "integrator",
            "--config",
            "/no/such/file.toml",
        ],
        &["margins-table", "--system", "integrator", "--T", "0.1,0.01"],
        &["physical-table", "--system", "integrator", "--T", "-1"],
    ] {
        let o = zoh(args, None);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn static_system_has_zero_margins() {
    let o = zoh(&["margins-table", "--system", "static", "--T", "0.1"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,nu,samples,inflation,seed"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let nu: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(nu, 0.0, "{row}");
    }
}

#[test]
fn physical_table_has_a_row_per_variant_and_step() {
    let o = zoh(
        &[
            "physical-table",
            "--system",
            "double-integrator",
            "--T",
            "0.1,0.01,0.001",
        ],
        None,
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("variant,T,delta_inf\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 3);
}

#[test]
fn identical_flags_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "--system",
        "double-integrator",
        "--variant",
        "phi1l,phi3g",
        "--seed",
        "4",
    ];
    let (oa, ob) = (zoh(&args, Some(a.path())), zoh(&args, Some(b.path())));
    assert!(oa.status.success() && ob.status.success());
    assert_eq!(oa.stdout, ob.stdout);
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2);
    for name in names {
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    let table = ["margins-table", "--system", "unicycle", "--seed", "4"];
    assert_eq!(zoh(&table, None).stdout, zoh(&table, None).stdout);
}

#[test]
fn sweep_output_does_not_depend_on_workers() {
    let base = [
        "sweep",
        "--system",
        "integrator",
        "--variant",
        "phi2l,phi3l",
        "--T",
        "0.1,0.05",
        "--runs",
        "2",
    ];
    let one = zoh(&[&base[..], &["--workers", "1"]].concat(), None);
    let many = zoh(&base, None);
    assert!(one.status.success());
    assert_eq!(one.stdout, many.stdout);
    let text = stdout(&one);
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("integrator,phi2l,0.1,0,"));
}

#[test]
fn simulate_all_writes_one_trace_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = zoh(
        &[
            "simulate",
            "--system",
            "integrator",
            "--variant",
            "all",
            "--T",
            "0.1",
        ],
        Some(dir.path()),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in [
        "phi0g", "phi1l", "phi1g", "phi2l", "phi2g", "phi3l", "phi3g",
    ] {
        let path = dir.path().join(format!("integrator_{v}_T0.1_seed0.csv"));
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x1,u1,h,"), "{}", path.display());
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 7);
    assert_eq!(stdout(&o).lines().count(), 1 + 7);
}

#[test]
fn verify_fails_when_sup_estimates_are_deflated() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("deflated.toml");
    fs::write(&config, "[sup]\ninflation = 0.5\n").unwrap();
    let o = zoh(
        &["verify", "--quick", "--config", config.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("[FAIL] sup inflation >= 1"));
}
