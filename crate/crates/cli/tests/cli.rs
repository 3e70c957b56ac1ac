use std::path::Path;
use std::process::{Command, Output};

use omnirwkvsr::imageio::{load_png, save_png};
use omnirwkvsr::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_omnirwkvsr");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn image(h: usize, w: usize, seed: usize) -> Tensor<f32> {
    Tensor::from_fn(&[1, 3, h, w], |i| ((i * 31 + seed * 17) % 97) as f32 / 96.0)
}

/// A few 40x40 images with one held out.
fn tiny_dataset(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..4 {
        save_png(&dir.join(format!("img{i}.png")), &image(40, 40, i)).unwrap();
    }
    std::fs::write(dir.join("val.txt"), "img3.png\n").unwrap();
}

const TINY: &str = "\
# small enough to train in a second
channels = 8
heads = 1
n_vrg = 1
vrbs_per_vrg = 1
batch = 2
patch_lr = 8
val_every = 0
";

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = out.with_extension("conf");
    std::fs::write(&cfg, TINY).unwrap();
    let mut args = vec!["train", "--config", s(&cfg), "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn help_config_lists_keys() {
    let o = run(&["--help-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for k in ["channels", "shift_mode", "lr", "patch_lr", "data", "seed"] {
        assert!(text.contains(k), "{k}");
    }
}

#[test]
fn missing_dataset_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = run(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o")), "--iters", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "chanels = 8\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--data", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("chanels"));
    let o = run(&["train", "--set", "scale=3", "--data", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["train", "--set", "noequals"])), 2);
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train_tiny(&data, out, &["--iters", "6", "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["final.ckpt", "best.ckpt", "log.csv", "loss.csv", "val.csv", "config.txt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.join("loss.csv")), read(&b.join("loss.csv")));
    assert_eq!(read(&a.join("final.ckpt")), read(&b.join("final.ckpt")));
    assert_eq!(String::from_utf8(read(&a.join("loss.csv"))).unwrap().lines().count(), 7);

    let c = dir.path().join("c");
    train_tiny(&data, &c, &["--iters", "6", "--seed", "4"]);
    assert_ne!(read(&a.join("loss.csv")), read(&c.join("loss.csv")));
}

#[test]
fn infer_shapes_naming_and_scale_check() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let run_dir = dir.path().join("x4");
    let o = train_tiny(&data, &run_dir, &["--iters", "0", "--set", "scale=4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run_dir.join("final.ckpt");

    let inputs = dir.path().join("in");
    std::fs::create_dir_all(&inputs).unwrap();
    save_png(&inputs.join("small.png"), &image(12, 10, 0)).unwrap();
    save_png(&inputs.join("other.png"), &image(5, 7, 1)).unwrap();
    let out = dir.path().join("out");
    let o = run(&["infer", "--ckpt", s(&ckpt), "--input", s(&inputs), "--out", s(&out), "--scale", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let y: Tensor<f32> = load_png(&out.join("small_x4.png")).unwrap();
    assert_eq!(y.shape(), &[1, 3, 48, 40]);
    let first = std::fs::read(out.join("small_x4.png")).unwrap();

    // single file, same name, identical bytes
    let o = run(&["infer", "--ckpt", s(&ckpt), "--input", s(&inputs.join("small.png")), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("small_x4.png")).unwrap(), first);

    let o = run(&["infer", "--ckpt", s(&ckpt), "--input", s(&inputs), "--out", s(&out), "--scale", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("x4"));
}

#[test]
fn eval_reports_baseline_and_rejects_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let run_dir = dir.path().join("r");
    assert_eq!(code(&train_tiny(&data, &run_dir, &["--iters", "2"])), 0);
    let ckpt = run_dir.join("final.ckpt");
    let csv = dir.path().join("eval.csv");
    let o = run(&["eval", "--ckpt", s(&ckpt), "--hr", s(&data), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("name,psnr,ssim,bicubic_psnr,bicubic_ssim"));
    assert_eq!(text.lines().count(), 1 + 4 + 1);
    let o = run(&["eval", "--ckpt", s(&ckpt), "--hr", s(&data), "--split", "val"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("img3"));

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&run(&["eval", "--ckpt", s(&ckpt), "--hr", s(&empty)])), 2);
    assert_eq!(code(&run(&["eval", "--ckpt", s(&ckpt), "--hr", s(&data), "--scale", "4"])), 2);
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["eval", "--ckpt", s(&bogus), "--hr", s(&data)])), 2);
}

#[test]
fn gradcheck_subset_and_unknown_module() {
    let o = run(&["gradcheck", "--module", "shifts"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("shifts/qshift"));
    assert!(!out.contains("tensor/"));
    let o = run(&["gradcheck", "--module", "optics"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("optics"));
}

#[test]
fn bench_modes() {
    let o = run(&["bench", "--mode", "wkv", "--sizes", ""]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "T,mean_ms,std_ms");

    let o = run(&["bench", "--mode", "wkv", "--sizes", "64,128", "--reps", "1", "--channels", "8", "--heads", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    let o = run(&["bench", "--mode", "forward", "--sizes", "48,96", "--reps", "1", "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("48,"));
    assert!(text.lines().nth(2).unwrap().starts_with("96,"));

    assert_eq!(code(&run(&["bench", "--sizes", "1,x"])), 2);
    assert_eq!(code(&run(&["bench", "--mode", "sideways"])), 2);
}

#[test]
fn ablate_emits_annotated_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let cfg = dir.path().join("tiny.conf");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("abl");
    let o = run(&[
        "ablate", "--axis", "scan", "--config", s(&cfg), "--data", s(&data), "--iters", "2", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    for want in ["WKV Scan", "WKV2D Scan", "30.1149", "30.1390"] {
        assert!(table.contains(want), "{want} missing from\n{table}");
    }
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("1d/final.ckpt").exists() && out.join("2d/final.ckpt").exists());
}

#[test]
fn toydata_writes_set() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["toydata", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("toy_00.png").exists());
    assert!(dir.path().join("val.txt").exists());
}

#[test]
fn no_subcommand_exits_2() {
    assert_eq!(code(&run(&[])), 2);
}
