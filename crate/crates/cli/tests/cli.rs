use std::path::Path;
use std::process::{Command, Output};

fn cainet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cainet")).args(args).output().expect("spawn cainet")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    let d = data.to_str().unwrap().to_string();
    let o = cainet(&["synth", "--out", &d, "--train", "6", "--val", "2", "--size", "16", "--seed", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    d
}

fn short_run(data: &str, out: &Path) -> Output {
    let out = format!("--out_dir={}", out.display());
    let data = format!("--data_root={data}");
    cainet(&[
        "train",
        &data,
        &out,
        "--steps_rgb=2",
        "--steps_thermal=2",
        "--steps_gcm=2",
        "--steps_full=3",
        "--batch_size=2",
    ])
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    let o = short_run(&data, &run);
    assert!(o.status.success(), "{}", text(&o));
    for stage in ["rgb", "thermal", "gcm", "full"] {
        assert!(run.join(format!("{stage}.ckpt")).is_file());
        let log = std::fs::read_to_string(run.join(format!("{stage}.log"))).unwrap();
        let first = log.lines().next().unwrap();
        assert!(first.starts_with("step=1 l_total="), "{first}");
        for key in ["l_target=", "l_att1=", "l_att2=", "l_binary=", "l_boundary=", "l_decoder="] {
            assert!(first.contains(key));
        }
    }

    let ckpt = run.join("full.ckpt");
    let o = cainet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "train"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("miou="), "{}", text(&o));

    let pred_dir = dir.path().join("pred");
    let o = cainet(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sample",
        "s0000",
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let labels = image::open(pred_dir.join("s0000_labels.png")).unwrap();
    let color = image::open(pred_dir.join("s0000_color.png")).unwrap();
    assert_eq!((labels.width(), labels.height()), (16, 16));
    assert_eq!((color.width(), color.height()), (16, 16));
}

#[test]
fn full_stage_without_prerequisites_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let o = cainet(&[
        "train",
        &format!("--data_root={data}"),
        &format!("--out_dir={}", dir.path().join("run").display()),
        "--stage=full",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let t = text(&o);
    assert!(t.contains("full") && t.contains("gcm"), "{t}");
}

#[test]
fn unknown_override_is_rejected() {
    let o = cainet(&["train", "--learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("learning_rate"));
}

#[test]
fn identical_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(short_run(&data, &a).status.success());
    assert!(short_run(&data, &b).status.success());
    for f in ["rgb.ckpt", "thermal.ckpt", "gcm.ckpt", "full.ckpt", "rgb.log", "full.log"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_reports_every_module() {
    let o = cainet(&["gradcheck", "--instances", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 11);
    assert!(out.lines().all(|l| l.ends_with("PASS")));
}

#[test]
fn auxmaps_writes_three_images_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("aux");
    let o = cainet(&["auxmaps", "--data-root", &data, "--out", out.to_str().unwrap(), "--sample", "s0001"]);
    assert!(o.status.success(), "{}", text(&o));
    for kind in ["binary", "boundary", "attention"] {
        let img = image::open(out.join(format!("s0001_{kind}.png"))).unwrap();
        assert_eq!(img.width(), 16);
    }
}
