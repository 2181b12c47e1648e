//! End-to-end checks of the command-line surface: exit codes and the
//! files each subcommand leaves behind.

use std::fs;
use std::path::Path;

use hadeblur::cli;
use hadeblur::img::ImagePlane;

fn run(args: &[&str]) -> i32 {
    let argv = std::iter::once("hadeblur").chain(args.iter().copied());
    cli::run(argv)
}

fn write_frames(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = ImagePlane::from_fn(24, 16, 3, |x, y, c| {
            ((x + y * 3 + c * 5 + i) % 13) as f32 / 12.0
        });
        img.save_png(&dir.join(format!("frame_{i:03}.png"))).unwrap();
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["synth"]), 1); // missing required flags
}

#[test]
fn help_exits_0() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["train", "--help"]), 0);
}

#[test]
fn synth_writes_pair_and_center_frame() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let out = dir.path().join("out");
    write_frames(&frames, 5);
    let code = run(&[
        "synth",
        "--frames",
        frames.to_str().unwrap(),
        "--window",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let sharp = ImagePlane::load_png(&out.join("sharp.png")).unwrap();
    let center = ImagePlane::load_png(&frames.join("frame_002.png")).unwrap();
    assert_eq!(sharp.data, center.data);
    assert!(out.join("blur.png").is_file());
}

#[test]
fn synth_on_missing_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&[
        "synth",
        "--frames",
        dir.path().join("absent").to_str().unwrap(),
        "--window",
        "5",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn rasterize_writes_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann");
    let out = dir.path().join("masks");
    fs::create_dir_all(&ann).unwrap();
    fs::write(
        ann.join("a.json"),
        r#"{"image": "a.png", "width": 10, "height": 8, "boxes": [[2, 1, 5, 4]]}"#,
    )
    .unwrap();
    let code = run(&[
        "rasterize",
        "--annotations",
        ann.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let mask = ImagePlane::load_png(&out.join("a.png")).unwrap();
    let mut ones = 0usize;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) > 0.5 {
                ones += 1;
            }
        }
    }
    assert_eq!(ones, 9);
}

#[test]
fn eval_identity_reports_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let test_dir = dir.path().join("test");
    for sub in ["blur", "sharp", "annotations"] {
        fs::create_dir_all(test_dir.join(sub)).unwrap();
    }
    let img = ImagePlane::from_fn(20, 20, 3, |x, y, c| ((x * y + c) % 7) as f32 / 6.0);
    img.save_png(&test_dir.join("blur/s.png")).unwrap();
    img.save_png(&test_dir.join("sharp/s.png")).unwrap();
    fs::write(
        test_dir.join("annotations/s.json"),
        r#"{"image": "s.png", "width": 20, "height": 20, "boxes": [[4, 4, 12, 12]]}"#,
    )
    .unwrap();
    let csv_path = dir.path().join("report.csv");
    let code = run(&[
        "eval",
        "--data",
        dir.path().to_str().unwrap(),
        "--identity",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let global = csv
        .lines()
        .find(|l| l.starts_with("s.png,global"))
        .expect("global row");
    assert!(global.contains(",inf,"), "identity PSNR must be inf: {global}");
    assert!(global.contains(",1.000000,"), "identity SSIM must be 1: {global}");
}

#[test]
fn eval_without_checkpoint_or_identity_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let test_dir = dir.path().join("test");
    for sub in ["blur", "sharp"] {
        fs::create_dir_all(test_dir.join(sub)).unwrap();
    }
    let code = run(&[
        "eval",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}
