use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "
[experiment]
modes = 8
horizon = 0.05
dt_out = 0.01
h_max = 5e-4
h = 5e-4
replicas = 2
epsilon = 0.5, averaged
workers = 1

[morris_lecar]
N_K = 5

[clt]
times = 0.02, 0.04
epsilon = 0.01

[phi_check]
instances = 5
";

fn slowfast(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slowfast"))
        .args(args)
        .current_dir(dir)
        .env_remove("PDMP_SEED")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn sweep_replays_byte_identically() {
    let dir = setup();
    let a = slowfast(&["sweep", "--config", "small.cfg", "--seed", "9", "--out", "a"], dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = slowfast(&["sweep", "--config", "small.cfg", "--seed", "9", "--out", "b"], dir.path());
    assert!(b.status.success());
    let sa = read(&dir.path().join("a"), "sweep.csv");
    assert!(sa.starts_with("epsilon,mean_sup_err,stderr,replicas\n"));
    assert_eq!(sa, read(&dir.path().join("b"), "sweep.csv"));
    assert_eq!(sa.lines().count(), 3);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = setup();
    let run = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_slowfast"));
        c.args(["simulate", "--config", "small.cfg", "--epsilon", "0.01", "--replicas", "1", "--out", out])
            .current_dir(dir.path())
            .env_remove("PDMP_SEED");
        if let Some(e) = env {
            c.env("PDMP_SEED", e);
        }
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        assert!(c.output().unwrap().status.success());
        read(&dir.path().join(out), "trajectory_eps0.01_0.csv")
    };
    let from_env = run("env", Some("41"), None);
    let from_flag = run("flag", None, Some("41"));
    let default = run("default", None, None);
    assert_eq!(from_env, from_flag);
    assert_ne!(from_env, default);
}

#[test]
fn clt_trace_and_phi_check_write_their_tables() {
    let dir = setup();
    for cmd in ["clt", "trace", "phi-check"] {
        let o = slowfast(&[cmd, "--config", "small.cfg", "--out", "out"], dir.path());
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = dir.path().join("out");
    assert!(read(&out, "clt.csv").starts_with("channel,t,empirical_var,predicted_var,ratio,ci_low,ci_high\n"));
    assert_eq!(read(&out, "clt.csv").lines().count(), 1 + 5 * 2);
    assert!(read(&out, "trace.csv").starts_with("t,trace,tail_bound,paper_bound\n"));
    assert!(read(&out, "trace.svg").starts_with("<svg"));
    let phi = read(&out, "phi_check.csv");
    assert!(phi.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn config_errors_exit_with_two_and_name_the_line() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.cfg"), "[experiment]\nmodes = 8\nreplicas = lots\n").unwrap();
    let o = slowfast(&["sweep", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    let o = slowfast(&["sweep", "--config", "small.cfg", "--epsilon", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = setup();
    let o = slowfast(&["sweep", "--config", "nope.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
