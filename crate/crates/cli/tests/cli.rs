use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cs2_core::config::RunConfig;
use cs2_core::guidance::GuidanceStack;

fn cs2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cs2")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = cs2(args);
    assert!(
        out.status.success(),
        "cs2 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::with_seed(5);
    cfg.pipeline.n_phantoms = 3;
    cfg.pipeline.synth_per_guidance = 2;
    cfg.pipeline.n_labeled = 2;
    cfg.maskgen.max_iters = 4;
    cfg.gan.steps = 2;
    cfg.gan.encoder_widths = vec![4, 8];
    cfg.gan.n_resblocks = 1;
    cfg.gan.disc_widths = vec![4, 4, 4];
    cfg.ensemble.n_members = 2;
    cfg.ensemble.hidden = vec![8];
    cfg.ensemble.epochs = 1;
    cfg
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(work: &Path, config: &Path) {
    let d = |x: &str| work.join(x);
    let c = s(config);
    ok(&["phantom", "--config", c, "--out", s(&d("phantoms"))]);
    ok(&["maskgen", "--config", c, "--in", s(&d("phantoms")), "--out", s(&d("masks"))]);
    ok(&["guide", "--config", c, "--masks", s(&d("masks")), "--slabs", s(&d("masks")), "--out", s(&d("guides"))]);
    ok(&["train-gan", "--config", c, "--guidance", s(&d("guides")), "--slabs", s(&d("masks")), "--out", s(&d("gan"))]);
    let ckpt = d("gan/gan.ckpt");
    ok(&["synth", "--config", c, "--ckpt", s(&ckpt), "--guidance", s(&d("guides")), "--slabs", s(&d("masks")), "--out", s(&d("synth"))]);
    ok(&["train-seg", "--config", c, "--ckpt", s(&ckpt), "--synth", s(&d("synth")), "--truth", s(&d("phantoms")), "--out", s(&d("seg"))]);
    ok(&[
        "infer", "--config", c, "--gan", s(&ckpt), "--seg", s(&d("seg/ensemble.ckpt")),
        "--guidance", s(&d("guides")), "--slabs", s(&d("masks")), "--out", s(&d("infer")),
    ]);
    ok(&["eval", "--config", c, "--pred", s(&d("infer")), "--truth", s(&d("phantoms")), "--out", s(&d("report/dice.csv"))]);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "labeled.txt" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_reproducible_from_its_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    small_config().save(&config).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &config);
    pipeline(&b, &a.join("gan").join("config.toml"));

    let report = fs::read_to_string(a.join("report/dice.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(a.join("synth/synth_0000_1.cs2fea").exists());
    assert!(a.join("infer/mask_0002_1.cs2msk").exists());
    assert!(fs::read_to_string(a.join("gan/train_log.csv")).unwrap().starts_with("step,"));

    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 30);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(tb[k] == *v, "{} differs between runs", k.display());
    }
}

#[test]
fn seed_flag_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    small_config().save(&config).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["phantom", "--config", s(&config), "--n", "1", "--out", s(&a)]);
    ok(&["phantom", "--config", s(&config), "--seed", "6", "--n", "1", "--out", s(&b)]);
    assert_ne!(fs::read(a.join("vol_0000.cs2vol")).unwrap(), fs::read(b.join("vol_0000.cs2vol")).unwrap());
    let echo = RunConfig::load(&b.join("config.toml")).unwrap();
    assert_eq!(echo.seed, 6);
    assert_eq!(echo.pipeline.n_phantoms, 1);
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = cs2(&["maskgen", "--in", s(&missing), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_json(&out);
    assert_eq!(e["error"], "data");
    assert_eq!(e["exit_code"], 3);
}

#[test]
fn malformed_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = \"zero\"\n").unwrap();
    let out = cs2(&["phantom", "--config", s(&bad), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");

    let mut text = small_config().to_toml().unwrap();
    text = text.replace("kind = \"adam\"", "kind = \"rmsprop\"");
    fs::write(&bad, text).unwrap();
    let out = cs2(&["phantom", "--config", s(&bad), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn incompatible_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |x: &str| tmp.path().join(x);
    let config = d("small.toml");
    small_config().save(&config).unwrap();
    let c = s(&config);
    ok(&["phantom", "--config", c, "--out", s(&d("phantoms"))]);
    ok(&["maskgen", "--config", c, "--in", s(&d("phantoms")), "--out", s(&d("masks"))]);
    ok(&["guide", "--config", c, "--masks", s(&d("masks")), "--slabs", s(&d("masks")), "--out", s(&d("guides"))]);
    ok(&["train-gan", "--config", c, "--guidance", s(&d("guides")), "--slabs", s(&d("masks")), "--out", s(&d("gan"))]);

    let mut other = small_config();
    other.gan.encoder_widths = vec![4, 6];
    let other_path = d("other.toml");
    other.save(&other_path).unwrap();
    let out = cs2(&[
        "synth", "--config", s(&other_path), "--ckpt", s(&d("gan/gan.ckpt")),
        "--guidance", s(&d("guides")), "--slabs", s(&d("masks")), "--out", s(&d("synth")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    let e = error_json(&out);
    assert_eq!(e["error"], "checkpoint_mismatch");
    assert!(e["message"].as_str().unwrap().contains("encoder_widths"));
}

#[test]
fn guide_edits_only_touch_the_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |x: &str| tmp.path().join(x);
    let config = d("small.toml");
    let mut cfg = small_config();
    cfg.pipeline.n_phantoms = 1;
    cfg.save(&config).unwrap();
    let c = s(&config);
    ok(&["phantom", "--config", c, "--out", s(&d("phantoms"))]);
    ok(&["maskgen", "--config", c, "--in", s(&d("phantoms")), "--out", s(&d("masks"))]);
    ok(&["guide", "--config", c, "--masks", s(&d("masks")), "--slabs", s(&d("masks")), "--out", s(&d("plain"))]);
    let edits = d("edits.jsonl");
    fs::write(&edits, "{\"kind\":\"circle\",\"cx\":20.0,\"cy\":30.0,\"r\":6.0,\"hu\":-600.0,\"channel\":1}\n").unwrap();
    ok(&[
        "guide", "--config", c, "--masks", s(&d("masks")), "--slabs", s(&d("masks")),
        "--edits", s(&edits), "--out", s(&d("edited")),
    ]);
    let plain = GuidanceStack::load(&d("plain/guide_0000.cs2gdf")).unwrap();
    let edited = GuidanceStack::load(&d("edited/guide_0000.cs2gdf")).unwrap();
    let (h, w) = (plain.height(), plain.width());
    let mut changed_inside = 0;
    for (i, (a, b)) in plain.values().iter().zip(&edited.values()).enumerate() {
        let (ch, rem) = (i / (h * w), i % (h * w));
        let (y, x) = ((rem / w) as f64 + 0.5, (rem % w) as f64 + 0.5);
        let inside = ch == 1 && (x - 20.0).hypot(y - 30.0) <= 6.0;
        if inside {
            assert_eq!(*b, -600.0);
            changed_inside += 1;
        } else {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    assert!(changed_inside > 100);

    fs::write(&edits, "{\"kind\":\"circle\",\"cx\":20.0}\n").unwrap();
    let out = cs2(&[
        "guide", "--config", c, "--masks", s(&d("masks")), "--slabs", s(&d("masks")),
        "--edits", s(&edits), "--out", s(&d("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn defaults_prints_a_loadable_config() {
    let out = cs2(&["defaults", "--seed", "9"]);
    assert!(out.status.success());
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::with_seed(9));
}
