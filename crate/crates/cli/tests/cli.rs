use std::path::PathBuf;
use std::process::{Command, Output};

fn spinfact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinfact")).args(args).env_remove("SPINFACT_TOL").env_remove("SPINFACT_DENSE_CAP").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn temp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("spinfact-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

const MG: [&str; 12] = ["--model", "mg_xxz", "--s", "0.5", "--pairs", "4", "--JE", "1", "--J", "1", "--JD", "0.25"];

#[test]
fn verify_dimerization_window() {
    let o = spinfact(&[&["verify"], &MG[..]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["verdict"], true);
    assert!((v["candidates"][0]["report"]["energy"].as_f64().unwrap() + 5.0).abs() < 1e-10);
}

#[test]
fn verify_without_real_angle() {
    let mut args = [&["verify"], &MG[..]].concat();
    *args.last_mut().unwrap() = "0.6";
    let o = spinfact(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no real xi"));
    assert!(o.stdout.is_empty());
}

#[test]
fn malformed_config_and_flags() {
    let path = temp("bad.toml");
    std::fs::write(&path, "spins = [0.5\n").unwrap();
    assert_eq!(spinfact(&["verify", "--config", path.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(spinfact(&["verify", "--model", "nope"]).status.code(), Some(1));
    assert_eq!(spinfact(&["verify", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(spinfact(&["verify", "--model", "mg_xxz", "--tol", "-1"]).status.code(), Some(1));
}

#[test]
fn verify_false_exit_code() {
    let path = temp("field.toml");
    let text = r#"
spins = [0.5, 0.5]
clusters = [[0, 1]]
couplings = [[0, 1, "x", "x", 1.0, 0.0], [0, 1, "y", "y", 1.0, 0.0], [0, 1, "z", "z", 1.0, 0.0]]
fields = [[0, "x", 0.3, 0.0]]

[[state]]
factor_spins = [0.5, 0.5]
amplitudes = [[0.0, 0.0], [0.7071067811865476, 0.0], [-0.7071067811865476, 0.0], [0.0, 0.0]]
"#;
    std::fs::write(&path, text).unwrap();
    let o = spinfact(&["verify", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(json(&o)["verdict"], false);
    std::fs::write(&path, text.replace("0.3", "0.0")).unwrap();
    assert_eq!(spinfact(&["verify", "--config", path.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn solve_coupling_spaces() {
    let v = json(&spinfact(&["solve", "--trial", "singlet", "--s", "0.5"]));
    assert_eq!(v["pairs"][0]["dimension"], 27);
    assert_eq!(v["pairs"][0]["full_dimension"], 36);
    assert_eq!(v["pairs"][0]["brute_force_dimension"], 27);

    let v = json(&spinfact(&["solve", "--trial", "coherent", "--theta", "0.7", "--phi", "0.2"]));
    assert_eq!(v["pairs"][0]["dimension"], 8);
    let line: Vec<f64> =
        v["factors"][0]["field_directions"][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let n = [0.7f64.sin() * 0.2f64.cos(), 0.7f64.sin() * 0.2f64.sin(), 0.7f64.cos()];
    let dot: f64 = line.iter().zip(n).map(|(a, b)| a * b).sum();
    assert!((dot.abs() - 1.0).abs() < 1e-12);

    let v = json(&spinfact(&["solve", "--trial", "singlet", "--xi", "0"]));
    assert_eq!(v["full_factorization"], true);
    assert_eq!(v["factors"].as_array().unwrap().len(), 4);
}

#[test]
fn spectrum_single_point_and_cap() {
    let o = spinfact(&["spectrum", "--model", "xyz_tetramer", "--param", "Jz", "--start", "0.5", "--lowest", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "Jz,pred_plus,pred_minus,pred_horizontal,e0");
    let cols: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert!((cols[4] - cols[3]).abs() < 1e-10, "horizontal state is the ground state at Jz = 0.5");

    let o = spinfact(&["spectrum", "--model", "mg_xxz", "--s", "1", "--J", "1.5", "--JD", "0.5"]);
    assert_eq!(o.status.code(), Some(3));
    let o = Command::new(env!("CARGO_BIN_EXE_spinfact"))
        .args(["spectrum", "--model", "xyz_tetramer"])
        .env("SPINFACT_DENSE_CAP", "8")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tetramer_sweep_boundaries() {
    let args = ["sweep", "--model", "xyz_tetramer", "--param", "Jz", "--start", "-2", "--stop", "2", "--steps", "9"];
    let o = spinfact(&args);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let b: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("boundary"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let jzc = 1.25f64.sqrt();
    assert_eq!(b.len(), 2);
    assert!((b[0] + jzc).abs() < 1e-4 && (b[1] - jzc).abs() < 1e-4);
    assert_eq!(text.lines().filter(|l| l.starts_with("point")).count(), 9);
    // identical inputs give byte-identical output
    assert_eq!(spinfact(&args).stdout, o.stdout);

    let o = spinfact(&["sweep", "--model", "xyz_tetramer", "--param", "Jz", "--start", "0", "--steps", "1"]);
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn export_round_trip() {
    let model = temp("mg.toml");
    let triplets = temp("mg.csv");
    let o = spinfact(&[
        &["export-model", "--out", model.to_str().unwrap(), "--triplets", triplets.to_str().unwrap()],
        &MG[..],
    ]
    .concat());
    assert_eq!(o.status.code(), Some(0));
    let o = spinfact(&["verify", "--config", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o)["verdict"], true);
    let csv = std::fs::read_to_string(&triplets).unwrap();
    assert_eq!(csv.lines().next(), Some("row,col,re,im"));
    let diag: f64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|c| c[0] == c[1])
        .map(|c| c[2].parse::<f64>().unwrap())
        .sum();
    // traceless spin operators: tr H = 0
    assert!(diag.abs() < 1e-9);
}
