use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moments(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moments"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, views: &str, size: &str) {
    let o = moments(&["synth", "--views", views, "--size", size, "--out", "scene", "--seed", "3"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_scene_json_and_images() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3", "32");
    let scene = dir.path().join("scene");
    assert!(scene.join("scene.json").is_file());
    let pngs = fs::read_dir(&scene).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 3);
}

#[test]
fn eval_of_an_image_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "16");
    let o = moments(&["eval", "--pred", "scene/view_000.png", "--gt", "scene/view_000.png"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "scene,view_id,psnr,ssim,lpips,dists");
    assert_eq!(lines[1], "scene,0,99.000000,1.000000,,");
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(moments(&["synth", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(moments(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(moments(&["train", "--scene", "missing", "--iters", "1"], dir.path()).status.code(), Some(1));
    assert_eq!(moments(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn training_is_reproducible_and_feeds_render_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3", "16");
    let train = |out: &str| {
        let o = moments(
            &[
                "train", "--scene", "scene", "--iters", "12", "--seed", "7", "--batch", "8", "--train-views", "0,1",
                "--eval-views", "2", "--out", out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("a");
    train("b");
    let la = fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(la, fs::read_to_string(dir.path().join("b/loss.csv")).unwrap());
    assert_eq!(la.lines().count(), 13);
    assert_eq!(fs::read(dir.path().join("a/model.mfp1")).unwrap(), fs::read(dir.path().join("b/model.mfp1")).unwrap());
    let metrics = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("scene,2,"));

    let o = moments(
        &["render", "--checkpoint", "a/model.mfp1", "--scene", "scene", "--view", "2", "--source-views", "0,1", "--out", "r.png", "--raw", "r.mimg"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // the render matches the one written during training
    let o = moments(&["eval", "--pred", "r.png", "--gt", "a/eval_view2.png"], dir.path());
    assert!(stdout(&o).contains(",99.000000,1.000000,,"));
    assert_eq!(&fs::read(dir.path().join("r.mimg")).unwrap()[..4], b"MIMG");
}

#[test]
fn feature_and_basis_dumps() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "16");
    let o = moments(&["extract", "--image", "scene/view_000.png", "--out", "f.mfv", "--seed", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&fs::read(dir.path().join("f.mfv")).unwrap()[..4], b"MFV1");

    let o = moments(&["gabor-bank", "--out", "gb", "--image", "scene/view_000.png"], dir.path());
    assert!(o.status.success());
    let bank = fs::read_to_string(dir.path().join("gb/bank.csv")).unwrap();
    assert_eq!(bank.lines().count(), 9);
    assert!(dir.path().join("gb/kernel_7.png").is_file());
    assert!(dir.path().join("gb/response_0.png").is_file());

    let o = moments(&["zernike", "--out", "zk", "--size", "17", "--image", "scene/view_000.png"], dir.path());
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("zk/moments.csv")).unwrap().lines().count(), 16);
    assert_eq!(fs::read_to_string(dir.path().join("zk/gram.csv")).unwrap().lines().count(), 15);
}
