use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ntg_core::featnet::build_extractor;
use ntg_core::formats::{read_ntx1, read_pgm, write_ntx1, write_pgm, Ntx1Map};
use ntg_core::generator::{GeneratorConfig, GeneratorNet};
use ntg_core::Grid;

fn ntg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntg"))
        .args(args)
        .env_remove("NTG_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn image(dir: &Path, name: &str, seed: u64, n: usize) -> PathBuf {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let g = Grid::from_fn(1, n, n, |_, _, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    });
    let p = dir.join(name);
    write_pgm(&g, &p).unwrap();
    p
}

/// Extractor and zero generator of the given scale.
fn zero_weights(dir: &Path, scale: usize) -> PathBuf {
    let plan = [4, 8];
    let mut map = Ntx1Map::new();
    build_extractor(1, plan.len(), &plan).unwrap().export(&mut map);
    GeneratorNet::zeros(GeneratorConfig::new(&plan, scale))
        .unwrap()
        .export("generator", &mut map);
    let p = dir.join(format!("zero{scale}.ntx1"));
    write_ntx1(&map, &p).unwrap();
    p
}

#[test]
fn help_and_usage_exit_codes() {
    let h = ntg(&["--help"]);
    assert_eq!(code(&h), 0);
    let text = String::from_utf8_lossy(&h.stdout);
    for cmd in ["extract", "match", "swap", "synthesize", "train", "eval", "gen-data", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(code(&ntg(&["synthesize", "--help"])), 0);
    assert_eq!(code(&ntg(&["frobnicate"])), 1);
    assert_eq!(code(&ntg(&["gradcheck", "--size", "32"])), 1);
    assert_eq!(code(&ntg(&["--threads", "0", "gradcheck"])), 1);
}

#[test]
fn synthesize_modes_and_errors() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let input = image(dir, "in.pgm", 1, 16);
    let r = image(dir, "ref.pgm", 2, 16);
    let w1 = zero_weights(dir, 1);
    let out = dir.join("out.pgm");

    let o = ntg(&["synthesize", "--input", s(&input), "--weights", s(&w1), "--mode", "none", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = read_pgm(&out).unwrap();
    assert!(g.as_slice().iter().all(|&v| v == 0.0));

    // Texture modes need a reference.
    let o = ntg(&["synthesize", "--input", s(&input), "--weights", s(&w1), "--out", s(&out)]);
    assert_eq!(code(&o), 1);

    let o = ntg(&[
        "synthesize", "--input", s(&input), "--ref", s(&r), "--ref", s(&input), "--weights", s(&w1),
        "--out", s(&out), "--target", s(&input),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "id,ssim,mse,psnr,histcorr");
    assert!(lines[1].starts_with("in,"));

    // Scale 2 doubles the output; a scale mismatch with the weights is a data error.
    let w2 = zero_weights(dir, 2);
    let big = dir.join("big.pgm");
    let o = ntg(&["synthesize", "--input", s(&input), "--ref", s(&r), "--weights", s(&w2), "--scale", "2", "--out", s(&big)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_pgm(&big).unwrap().shape(), ntg_core::Shape::new(1, 32, 32));
    let o = ntg(&["synthesize", "--input", s(&input), "--ref", s(&r), "--weights", s(&w1), "--scale", "2", "--out", s(&big)]);
    assert_eq!(code(&o), 2);

    // Seeded weights when none are given.
    let o = ntg(&["synthesize", "--input", s(&input), "--mode", "single", "--ref", s(&r), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let bad = dir.join("bad.pgm");
    std::fs::write(&bad, b"P5\n4 4\n255\n").unwrap();
    let o = ntg(&["synthesize", "--input", s(&bad), "--mode", "none", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn extract_match_swap_outputs() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let input = image(dir, "in.pgm", 3, 16);
    let r = image(dir, "ref.pgm", 4, 16);
    let feats = dir.join("f.ntx1");
    let o = ntg(&["extract", "--input", s(&input), "--plan", "4,8", "--out", s(&feats)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let map = read_ntx1(&feats).unwrap();
    assert_eq!(map["level1"].dims, vec![4, 16, 16]);
    assert_eq!(map["level2"].dims, vec![8, 8, 8]);

    let o = ntg(&["match", "--input", s(&input), "--ref", s(&r), "--plan", "4,8", "--level", "2"]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("level,y,x,index"));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("2,")));
    assert_eq!(code(&ntg(&["match", "--input", s(&input), "--ref", s(&r), "--plan", "4,8", "--level", "3"])), 1);

    // Matching an image against itself selects its own patches.
    let o = ntg(&["match", "--input", s(&input), "--ref", s(&input), "--plan", "4,8", "--level", "1", "--blur", "1"]);
    let csv = String::from_utf8(o.stdout).unwrap();
    let w = 14;
    for line in csv.lines().skip(1) {
        let f: Vec<usize> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[3], f[1] * w + f[2], "{line}");
    }

    let sw = dir.join("s.ntx1");
    let o = ntg(&["swap", "--input", s(&input), "--ref", s(&r), "--plan", "4,8", "--out", s(&sw)]);
    assert_eq!(code(&o), 0);
    let map = read_ntx1(&sw).unwrap();
    assert_eq!(map["swap.level1.features"].dims, vec![4, 16, 16]);
    assert_eq!(map["swap.level2.weight"].dims, vec![1, 8, 8]);
    assert_eq!(code(&ntg(&["swap", "--input", s(&input), "--ref", s(&r)])), 1);
}

#[test]
fn gen_data_train_eval_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let data = dir.join("data");
    let o = ntg(&["--seed", "5", "gen-data", "--out", s(&data), "--size", "16", "--train", "3", "--val", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("X/train/0002.pgm").is_file());
    assert!(data.join("pairs/val/0001_y.pgm").is_file());

    let cfg = dir.join("train.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nepochs = 2\nchannel_plan = 4,8\ndisc_channel_plan = 4,8\nimage_size = 16\ncheckpoint_every = 1\n",
    )
    .unwrap();
    let run = dir.join("run");
    let o = ntg(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3);
    for f in ["metrics.csv", "epoch_0000.ntx1", "epoch_0001.ntx1", "epoch_0002.ntx1", "final.ntx1"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let o = ntg(&["eval", "--pred", s(&data.join("pairs/val/0000_x.pgm")), "--target", s(&data.join("pairs/val/0000_y.pgm"))]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("id,ssim,mse,psnr,histcorr\n0000_x,"));
    assert!(csv.contains("# summary"));

    let o = ntg(&["eval", "--pred", s(&data.join("X/train")), "--target", s(&data.join("X/train"))]);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("000")).count(), 3);
    assert!(csv.lines().nth(1).unwrap().ends_with(",1,0,inf,1"));

    let bad_cfg = dir.join("bad.cfg");
    std::fs::write(&bad_cfg, "epochs = two\n").unwrap();
    assert_eq!(code(&ntg(&["--config", s(&bad_cfg), "train", "--out", s(&run)])), 2);
}

#[test]
fn gradcheck_passes_and_names_faulty_term() {
    let o = ntg(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.ends_with("result,PASS\n"));
    let o = ntg(&["gradcheck", "--inject-fault", "1.5"]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("gradient check failed for"), "{err}");
}
