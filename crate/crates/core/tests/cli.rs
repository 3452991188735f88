use std::process::{Command, Output};

use ergopt::dynamics::Rational;
use ergopt::maxsearch::{MaximizationResult, SweepRow};

fn ergopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergopt")).args(args).output().unwrap()
}

fn stdout_json(args: &[&str]) -> serde_json::Value {
    let out = ergopt(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn maximize_round_trips() {
    let out = ergopt(&[
        "maximize",
        "--map",
        "linear:k=2",
        "--obs",
        "cos(2*pi*(x-0.5))",
        "--max-period",
        "12",
    ]);
    assert!(out.status.success());
    let res: MaximizationResult = serde_json::from_slice(&out.stdout).unwrap();
    assert!((res.alpha + 0.5).abs() < 1e-12);
    assert_eq!(res.orbits_searched, 746);
    let exact = res.argmax_orbits[0].exact.clone().unwrap();
    assert_eq!(exact, vec![Rational::new(1, 3), Rational::new(2, 3)]);
    let again = serde_json::to_value(&res).unwrap();
    let orig: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["alpha", "runner_up_gap", "argmax_orbits", "tie_tol"] {
        assert_eq!(again[key], orig[key], "{key}");
    }
}

#[test]
fn subaction_of_constant() {
    let v = stdout_json(&["subaction", "--map", "linear:k=2", "--obs", "5"]);
    assert_eq!(v["alpha_est"].as_f64(), Some(-5.0));
    assert!(v["residual"].as_f64().unwrap() < 1e-12);
}

#[test]
fn sweep_csv() {
    let out = ergopt(&["sweep", "--thetas", "0:0.5:101", "--max-period", "12"]);
    assert!(out.status.success());
    let mut rdr = csv::Reader::from_reader(&out.stdout[..]);
    let rows: Vec<SweepRow> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 101);
    for w in rows.windows(2) {
        let a = Rational::new(w[0].rotation_num, w[0].rotation_den);
        let b = Rational::new(w[1].rotation_num, w[1].rotation_den);
        assert!(a <= b);
    }
}

#[test]
fn subaction_csv_reads_back() {
    let dir = std::env::temp_dir().join(format!("ergopt-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("u.csv");
    let summary = dir.join("u.json");
    let out = ergopt(&[
        "subaction",
        "--obs",
        "sin(2*pi*x)",
        "--n",
        "4096",
        "--format",
        "csv",
        "--output",
        path.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let (u, header) =
        ergopt::lax::GridFunction::read_csv(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(u.n, 4096);
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(&summary).unwrap()).unwrap();
    let alpha = header
        .iter()
        .find(|(k, _)| k == "alpha_est")
        .unwrap()
        .1
        .parse::<f64>()
        .unwrap();
    assert_eq!(Some(alpha), s["alpha_est"].as_f64());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn shadow_from_pseudo_orbit_file() {
    let dir = std::env::temp_dir().join(format!("ergopt-shadow-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("po.csv");
    std::fs::write(&path, "# periodic=true\nidx,x,defect\n0,0.3,0\n1,0.6,0\n2,0.2,0\n").unwrap();
    let v = stdout_json(&["shadow", "--input", path.to_str().unwrap()]);
    assert_eq!(v["result"]["exact_point"], "2/7");
    assert!((v["pseudo_orbit"]["delta"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn exit_codes() {
    assert_eq!(ergopt(&["maximize"]).status.code(), Some(0));
    assert_eq!(ergopt(&["nonsense"]).status.code(), Some(2));
    assert_eq!(ergopt(&["maximize", "--obs", "cos(2*pi*"]).status.code(), Some(2));
    assert_eq!(ergopt(&["maximize", "--n", "100"]).status.code(), Some(2));
    assert_eq!(
        ergopt(&["lock", "--epsilon", "1e-6", "--n", "1024"]).status.code(),
        Some(1)
    );
    let neg = ergopt(&["approx", "--target", "0", "--perturb", "3", "--gamma", "1e-12"]);
    assert_eq!(neg.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&neg.stderr).contains("error"));
}

#[test]
fn lock_report() {
    let v = stdout_json(&["lock", "--obs", "cos(2*pi*x)", "--target", "0", "--epsilon", "0.05"]);
    assert_eq!(v["locked"], true);
    assert_eq!(v["constants"]["feasible"], true);
    assert_eq!(v["far_point_violations"], 0);
    assert!(v["g"]["achieved_sup_error"].as_f64().unwrap() < v["constants"]["big_gamma1"].as_f64().unwrap());
}

#[test]
fn entropy_and_returns_csv() {
    let out = ergopt(&[
        "entropy",
        "--start",
        "1/3",
        "--samples",
        "1000",
        "--depth",
        "40",
        "--format",
        "csv",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("depth,rate,occupied\n"));
    assert_eq!(text.lines().count(), 41);

    let out = ergopt(&[
        "returns",
        "--start",
        "1/3",
        "--q-factor",
        "5",
        "--big-n",
        "1",
        "--length",
        "10",
        "--format",
        "csv",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text, "index,t,gap\n0,0,\n1,2,2\n2,4,2\n3,6,2\n4,8,2\n");
}
