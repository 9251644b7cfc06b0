use std::path::Path;
use std::process::{Command, Output};

fn ndvg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndvg")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set", "coarse_iters=200",
    "--set", "fine_iters=100",
    "--set", "batch_rays=256",
    "--set", "coarse_deform_voxels=4096",
    "--set", "fine_deform_voxels=8000",
    "--set", "coarse_canonical_voxels=8000",
    "--set", "fine_canonical_voxels=27000",
    "--set", "coarse_samples=32",
    "--set", "fine_samples=48",
];

#[test]
fn gen_train_render_eval_on_static_scene() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let o = ndvg(&[
        "gen-scene", "--spec", "static", "--out", s(&data), "--seed", "3", "--width", "32", "--height", "32",
        "--train-views", "6", "--test-views", "2", "--times", "3", "--quadrature", "256",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("transforms_train.json").exists() && data.join("test/r_001.png").exists());

    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, "# overridden below\ncoarse_iters = 5\nalpha_init = 1e-4\n").unwrap();
    let mut args = vec!["--threads", "1", "train", "--data", s(&data), "--out", s(&out), "--config", s(&cfg)];
    args.extend_from_slice(TINY);
    let o = ndvg(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(csv.starts_with("iter,photo,ptc,bg,d_norm,d_tv,total,psnr_train\n"));
    // Flags beat the file: 200 coarse + 100 fine rows.
    assert_eq!(csv.lines().count(), 301);

    let ckpt = out.join("fine.ckpt");
    let o = ndvg(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(line.starts_with("mean PSNR ") && line.contains(" / mean SSIM "), "{line}");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("frame,psnr,ssim"));
    assert_eq!(metrics.lines().count(), 3);
    // Repeat evaluation is identical.
    let o = ndvg(&["--threads", "1", "eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), metrics);

    let png = dir.path().join("frame.png");
    let o = ndvg(&["render", "--ckpt", s(&ckpt), "--data", s(&data), "--frame", "1", "--out", s(&png)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(png.exists());

    let cam = serde_json::json!([
        {"width": 16, "height": 12, "fx": 20.0, "fy": 20.0, "cx": 8.0, "cy": 6.0,
         "c2w": ndvg::scene::look_at([0.0, -4.0, 1.0], [0.0, 0.0, 0.0])},
        {"width": 16, "height": 12, "fx": 20.0, "fy": 20.0, "cx": 8.0, "cy": 6.0,
         "c2w": ndvg::scene::look_at([4.0, 0.0, 1.0], [0.0, 0.0, 0.0])}
    ]);
    let poses = dir.path().join("poses.json");
    std::fs::write(&poses, cam.to_string()).unwrap();
    let views = dir.path().join("views");
    let o = ndvg(&["render", "--ckpt", s(&ckpt), "--pose-file", s(&poses), "--time", "0.5", "--out", s(&views)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = ndvg::image::Image::load_png(&views.join("r_001.png"), [0.0; 3]).unwrap();
    assert_eq!((img.width, img.height), (16, 12));
}

#[test]
fn usage_errors_exit_one() {
    let o = ndvg(&[]);
    assert_eq!(o.status.code(), Some(1));
    let o = ndvg(&["render", "--ckpt", "x.ckpt", "--pose-file", "p.json", "--time", "1.5", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("error: ") && e.lines().count() == 1, "{e}");
    let dir = tempfile::tempdir().unwrap();
    let o = ndvg(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ndvg(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    let mut parts = e.trim().splitn(3, ": ");
    assert_eq!(parts.next(), Some("error"));
    assert!(parts.next().is_some_and(|c| !c.is_empty() && !c.contains(' ')), "{e}");
}
