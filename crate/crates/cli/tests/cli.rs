use std::path::Path;
use std::process::{Command, Output};

use mtur_core::imaging::{load_gray, load_image, save_image, ImageGray, ImageRGB};
use mtur_core::metrics::psnr;

fn mtur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtur")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn noisy(h: usize, w: usize, seed: u64) -> ImageRGB {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    ImageRGB::from_fn(h, w, |_, _| [next(), next(), next()])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn mt_of_airlight_coloured_image_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.mttb");
    save_image(&ImageRGB::filled(20, 24, [0.2, 0.5, 0.6]), &img).unwrap();
    for extra in [&[][..], &["--airlight", "0.2,0.5,0.6"][..]] {
        let out = dir.path().join("t.mttb");
        let mut args = vec!["mt", "-i", p(&img), "-o", p(&out)];
        args.extend_from_slice(extra);
        let o = mtur(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let t = load_gray(&out).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn classical_restore_with_known_medium_is_near_exact() {
    let dir = tempfile::tempdir().unwrap();
    let clean = noisy(32, 40, 1);
    let t = ImageGray::from_vec(32, 40, noisy(32, 40, 2).channel(1).iter().map(|v| 0.2 + 0.8 * v).collect()).unwrap();
    let [c, tp, d, r] = ["clean", "t", "deg", "rest"].map(|n| dir.path().join(format!("{n}.mttb")));
    save_image(&clean, &c).unwrap();
    save_image(&t, &tp).unwrap();
    let o = mtur(&["degrade", "-i", p(&c), "-o", p(&d), "--transmission", p(&tp), "--airlight", "0.1,0.6,0.7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mtur(&[
        "restore", "-i", p(&d), "-o", p(&r), "--mode", "classical", "--transmission", p(&tp), "--airlight",
        "0.1,0.6,0.7",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let db = psnr(&load_image(&r).unwrap(), &clean).unwrap();
    assert!(db > 60.0, "{db}");
}

#[test]
fn eval_of_self_pairs_hits_the_caps_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    std::fs::create_dir(&imgs).unwrap();
    for i in 0..5 {
        save_image(&noisy(24, 24, i), imgs.join(format!("{i}.png"))).unwrap();
    }
    let (r1, r2, csv) = (dir.path().join("r1.json"), dir.path().join("r2.json"), dir.path().join("r.csv"));
    for r in [&r1, &r2] {
        let o = mtur(&["eval", "-i", p(&imgs), "--reference", p(&imgs), "-o", p(r), "--csv", p(&csv)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&r1).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["psnr"]["mean"], 100.0);
    assert_eq!(report["aggregate"]["ssim"]["mean"], 1.0);
    assert_eq!(report["per_image"].as_array().unwrap().len(), 5);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("method,n,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mtur(&["--help"]).status.code(), Some(0));

    let o = mtur(&["mt", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[usage]:"));

    let missing = dir.path().join("missing.png");
    let o = mtur(&["mt", "-i", p(&missing), "-o", p(&dir.path().join("o.png"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[io]:"));

    let img = dir.path().join("a.png");
    save_image(&noisy(8, 8, 0), &img).unwrap();
    let o = mtur(&["restore", "-i", p(&img), "-o", p(&dir.path().join("o.png")), "--mode", "neural"]);
    assert_eq!(o.status.code(), Some(1));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.not_a_field = 3\n").unwrap();
    let o = mtur(&["describe", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[config]:"));
}

#[test]
fn diverging_training_aborts_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "dataset_size = 8\nval_size = 0\ntrain.lr = 1e30\ntrain.lr_schedule = constant\ntrain.batch_size = 4\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = mtur(&["train", "--config", p(&cfg), "--size", "32", "--iterations", "20", "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[numerical]:"));
    assert!(stderr(&o).contains("batch indices"));
    assert!(out.join("last_good.mttb").exists());
}

#[test]
fn config_layering_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 4, "train": {"lr": 0.01}}"#).unwrap();
    let o = mtur(&["describe", "--config", p(&cfg), "--seed", "9", "--dump-config"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["train"]["lr"], 0.01);
    assert_eq!(v["train"]["batch_size"], 8);

    let o = mtur(&["describe", "--seed", "3"]);
    assert!(o.status.success());
    let err = stderr(&o);
    assert!(err.contains("config: {") && err.contains("seed: 3"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("parameters"));
}

#[test]
fn synth_train_restore_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |name: &str| {
        let o = mtur(&["synth-data", "-o", p(&dir.path().join(name)), "--count", "8", "--size", "32", "--seed", "5"]);
        assert!(o.status.success(), "{}", stderr(&o));
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .find(|l| l.starts_with("dataset_hash"))
            .unwrap()
            .to_string()
    };
    assert_eq!(hash("a"), hash("b"));

    let cfg = dir.path().join("t.cfg");
    std::fs::write(&cfg, "train.batch_size = 4\nval_size = 2\n").unwrap();
    let manifest = dir.path().join("a/manifest.json");
    let runs: Vec<Vec<u8>> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            let o = mtur(&[
                "train", "--config", p(&cfg), "--data", p(&manifest), "--iterations", "2", "--seed", "1", "-o",
                p(&out),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            assert!(out.join("report.json").exists());
            std::fs::read(out.join("final.mttb")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);

    let ck = dir.path().join("r1/final.mttb");
    let (enh, mt) = (dir.path().join("e.png"), dir.path().join("m.png"));
    let input = dir.path().join("a/00000_degraded.png");
    let o = mtur(&[
        "restore", "-i", p(&input), "-o", p(&enh), "--mode", "neural", "--checkpoint", p(&ck), "--mt-output", p(&mt),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_image(&enh).unwrap().dims(), (32, 32));
    assert_eq!(load_gray(&mt).unwrap().dims(), (32, 32));
}

#[test]
fn bench_prints_a_table() {
    let o = mtur(&["bench", "--size", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.lines().next().unwrap().contains("fps"));
    assert_eq!(s.lines().count(), 2);
}
