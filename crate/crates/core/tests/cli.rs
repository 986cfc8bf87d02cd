use std::path::Path;
use std::process::{Command, Output};

fn lrvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrvae")).args(args).output().expect("spawn lrvae")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn train_eval_probe_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let common = [
        "--synthetic",
        "mixture:3:5",
        "--n_synthetic",
        "300",
        "--latent_dim",
        "2",
        "--encoder_hidden",
        "12",
        "--decoder_hidden",
        "12",
        "--out_dir",
        &out_dir,
    ];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(common);
        args.extend(extra);
        lrvae(&args)
    };

    let train = with("train", &["--epochs", "3", "--alpha_T", "1", "--eval_every", "2"]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let rows = csv_rows(&dir.path().join("train.csv"));
    assert_eq!(rows[0], "epoch,dr,kl,lr,total,alpha_t,beta,wall_seconds");
    assert_eq!(rows.len(), 4);
    assert!(dir.path().join("checkpoint.lrv").exists());
    assert!(dir.path().join("checkpoint_epoch2.lrv").exists());

    let eval = with("eval", &[]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(dir.path().join("eval.csv").exists());

    let probe = with("probe", &["--n_probe_points", "4", "--probe_rows", "8"]);
    assert_eq!(code(&probe), 0, "{}", String::from_utf8_lossy(&probe.stderr));
    let summary = String::from_utf8(probe.stdout).unwrap();
    assert!(summary.starts_with("L_f,eta,L,verdict"), "{summary}");
    for f in ["bilip.csv", "collapse.csv", "probe_summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // synthetic rows are not images
    assert_eq!(code(&with("noise-recon", &[])), 7);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    assert_eq!(code(&lrvae(&["train", "--no_such_flag", "1"])), 3);
    assert_eq!(code(&lrvae(&["train", "--beta", "abc"])), 3);
    assert_eq!(code(&lrvae(&["train", "--images", "/nonexistent/images", "--out_dir", &out_dir])), 2);

    let bad = dir.path().join("bad.lrv");
    std::fs::write(&bad, b"NOPE\n").unwrap();
    let bad = bad.display().to_string();
    let eval = lrvae(&["eval", "--synthetic", "mixture:2:3", "--checkpoint", &bad, "--out_dir", &out_dir]);
    assert_eq!(code(&eval), 4);
}

#[test]
fn gen_synthetic_and_laplace_check_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let gen = lrvae(&["gen-synthetic", "--synthetic", "pinwheel:4", "--n_synthetic", "40", "--out_dir", &out_dir]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    assert_eq!(csv_rows(&dir.path().join("synthetic.csv")).len(), 41);

    let check = lrvae(&["laplace-check", "--out_dir", &out_dir]);
    assert_eq!(code(&check), 0, "{}", String::from_utf8_lossy(&check.stderr));
    assert!(dir.path().join("laplace_check.csv").exists());
}
