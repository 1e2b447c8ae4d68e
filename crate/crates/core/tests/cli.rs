use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfdepth::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use dfdepth::distiller::{Method, TrainConfig};
use dfdepth::evalkit::Report;
use dfdepth::nets::DepthNetworkSpec;

fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.domain_a.image_size = (16, 16);
    c.domain_b.image_size = (16, 16);
    c.teacher = DepthNetworkSpec::teacher(10.0, (16, 16));
    c.student = DepthNetworkSpec::student(10.0, (16, 16));
    c.sizes.train_a = 8;
    c.sizes.test_a = 4;
    c.sizes.ood = 8;
    c.teacher_train = TrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, ..Default::default() };
    c.train = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
    c.attack.steps = 2;
    c.attack.epsilons = vec![0.0, 4.0 / 255.0];
    c.output_root = root.join("runs");
    c
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, c.to_json()).unwrap();
    p
}

fn dfdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfdepth")).args(args).env("RUST_LOG", "warn").env_remove(OUTPUT_ROOT_ENV).output().unwrap()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_run_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny_config(tmp.path());
    let cfg = write_config(tmp.path(), &c);
    let cfg = cfg.to_str().unwrap();

    ok(&dfdepth(&["gen", "--config", cfg]));
    for split in ["train_a", "test_a", "ood"] {
        assert!(c.output_root.join("data").join(split).join("manifest.json").is_file());
    }
    let first = read_tree(&c.output_root.join("data"));
    ok(&dfdepth(&["gen", "--config", cfg]));
    assert_eq!(first, read_tree(&c.output_root.join("data")));

    // Distillation before the teacher exists names the missing artifact.
    let o = dfdepth(&["run", "--config", cfg, "--method", "kd_ood"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("teacher checkpoint"));

    ok(&dfdepth(&["run", "--config", cfg, "--method", "teacher_supervised"]));
    ok(&dfdepth(&["run", "--config", cfg, "--method", "kd_ood", "--method", "datafree_full"]));
    let root = &c.output_root;
    for d in ["teacher_supervised-seed0", "kd_ood-seed0", "datafree_full-seed0"] {
        assert!(root.join(d).join("run.json").is_file(), "{d}");
        assert!(root.join(d).join("loss.csv").is_file(), "{d}");
    }
    assert!(root.join("datafree_full-seed0/ckpt/transform.ckpt").is_file());

    // Single run → single row.
    let single = tmp.path().join("single");
    ok(&dfdepth(&["report", root.join("kd_ood-seed0").to_str().unwrap(), "--out", single.to_str().unwrap()]));
    assert_eq!(Report::load(&single).unwrap().rows.len(), 1);

    // Mixed methods → rows in method order; regeneration is byte-identical.
    let rep = tmp.path().join("report");
    let dirs: Vec<String> =
        ["datafree_full-seed0", "kd_ood-seed0", "teacher_supervised-seed0"].iter().map(|d| root.join(d).to_string_lossy().into_owned()).collect();
    let args = ["report", &dirs[0], &dirs[1], &dirs[2], "--out", rep.to_str().unwrap()];
    ok(&dfdepth(&args));
    let r = Report::load(&rep).unwrap();
    let methods: Vec<Method> = r.rows.iter().map(|r| r.method).collect();
    assert_eq!(methods, [Method::TeacherSupervised, Method::KdOod, Method::DatafreeFull]);
    let json = fs::read(rep.join("metrics.json")).unwrap();
    ok(&dfdepth(&args));
    assert_eq!(json, fs::read(rep.join("metrics.json")).unwrap());
    assert!(fs::read_to_string(rep.join("metrics.txt")).unwrap().contains("kd_ood"));

    // A directory of runs is expanded.
    ok(&dfdepth(&["report", root.to_str().unwrap(), "--out", tmp.path().join("all").to_str().unwrap()]));

    ok(&dfdepth(&["attack", "--config", cfg]));
    let a = Report::load(&root.join("attack-report")).unwrap();
    assert_eq!(a.rows.len(), 2);
    assert!(root.join("attack-report/eps_sweep.png").is_file());

    ok(&dfdepth(&["ablate", "--config", cfg]));
    assert_eq!(Report::load(&root.join("ablation-report")).unwrap().rows.len(), 6);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dfdepth(&["run", "--method", "not_a_method"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = dfdepth(&["gen", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    fs::write(&bad, r#"{"train": {"lr": -1.0}}"#).unwrap();
    assert_eq!(dfdepth(&["gen", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let o = dfdepth(&["gen", "--config", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    // Datasets not generated yet.
    let c = tiny_config(tmp.path());
    let cfg = write_config(tmp.path(), &c);
    let o = dfdepth(&["run", "--config", cfg.to_str().unwrap(), "--method", "student_supervised"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen"));

    let run = tmp.path().join("broken");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("run.json"), "{ nope").unwrap();
    let o = dfdepth(&["report", run.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken"));

    assert_eq!(dfdepth(&["--help"]).status.code(), Some(0));
    assert_eq!(dfdepth(&[]).status.code(), Some(2));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny_config(tmp.path());
    c.output_root = PathBuf::from("ignored");
    let cfg = write_config(tmp.path(), &c);
    let env_root = tmp.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_dfdepth"))
        .args(["gen", "--config", cfg.to_str().unwrap()])
        .env(OUTPUT_ROOT_ENV, &env_root)
        .current_dir(tmp.path())
        .output()
        .unwrap();
    ok(&o);
    assert!(env_root.join("data/ood/manifest.json").is_file());
    assert!(!tmp.path().join("ignored").exists());

    // --out beats the environment.
    let flag_root = tmp.path().join("from_flag");
    let o = Command::new(env!("CARGO_BIN_EXE_dfdepth"))
        .args(["gen", "--config", cfg.to_str().unwrap(), "--out", flag_root.to_str().unwrap()])
        .env(OUTPUT_ROOT_ENV, &env_root)
        .output()
        .unwrap();
    ok(&o);
    assert!(flag_root.join("data/train_a/manifest.json").is_file());
}

#[test]
fn in_process_entry_point() {
    assert_eq!(dfdepth::cli::main_with_args(["dfdepth", "ablate", "--seed", "x"]), 2);
}
