mod pipeline;

use pipeline::{cli_setup as setup, cli_train_all as train_all, gst, gst_ok as ok, s, tree};

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen-data", "--out", s(out), "--scenes", "6", "--views", "2", "--resolution", "8"]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.keys().any(|k| k.ends_with("view_01.png")));
    assert_eq!(ta, tb);
    let other = dir.path().join("c");
    ok(&["--seed", "9", "gen-data", "--out", s(&other), "--scenes", "6", "--views", "2", "--resolution", "8"]);
    assert_ne!(tree(&other), ta);
}

#[test]
fn usage_errors_exit_one_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = gst(&["gen-data", "--out", s(&out), "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert_eq!(gst(&["train-gst", "--data", s(&out), "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(gst(&["inspect-checkpoint", s(&out)]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let (run_a, run_b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    let (m_a, m_b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    train_all(&cfg, &data, &run_a, &m_a);
    train_all(&cfg, &data, &run_b, &m_b);
    assert_eq!(tree(&run_a), tree(&run_b));
    assert_eq!(std::fs::read(&m_a).unwrap(), std::fs::read(&m_b).unwrap());

    let windows = std::fs::read_to_string(&m_a).unwrap();
    assert_eq!(windows.lines().count(), 4, "8 steps in windows of 2");
    for line in windows.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["kind"], "train");
        assert!(v["window_loss"].as_f64().unwrap().is_finite());
    }

    let (c, d, r) = (s(&cfg), s(&data), s(&run_a));
    let pose = ok(&["--config", c, "eval", "--suite", "pose", "--data", d, "--run", r]);
    for needle in ["@15°", "@30°", "baseline", "ceiling"] {
        assert!(pose.contains(needle), "missing {needle} in {pose}");
    }
    let metrics = dir.path().join("eval.jsonl");
    let all = ok(&["--config", c, "--metrics-out", s(&metrics), "eval", "--suite", "all", "--data", d, "--run", r]);
    assert!(all.contains("nvs:") && all.contains("image tokenizer"), "{all}");
    assert!(std::fs::read_to_string(&metrics).unwrap().lines().count() >= 6);

    let info = ok(&["inspect-checkpoint", s(&run_a.join("gst.ckpt"))]);
    assert!(info.contains("gst") && info.contains("tok_emb"), "{info}");

    let scene = data.join("scenes").join("scene_00000");
    let (obs, target, poses) = (scene.join("view_00.png"), scene.join("view_01.png"), scene.join("poses.txt"));
    let out = dir.path().join("samples");
    let o = s(&out);
    ok(&["sample", "--mode", "nvs", "--run", r, "--observation", s(&obs), "--camera", s(&poses), "--num", "2", "--out", o]);
    assert!(out.join("nvs_001.png").exists());
    ok(&["sample", "--mode", "pose", "--run", r, "--observation", s(&obs), "--target", s(&target), "--out", o]);
    assert!(out.join("pose.txt").exists());
    ok(&["sample", "--mode", "camera-prior", "--run", r, "--observation", s(&obs), "--num", "3", "--out", o]);
    ok(&["sample", "--mode", "image-prior", "--run", r, "--observation", s(&obs), "--out", o]);
    assert!(out.join("image_prior_000.png").exists());
    let missing = gst(&["sample", "--mode", "nvs", "--run", r, "--observation", s(&obs), "--out", o]);
    assert_eq!(missing.status.code(), Some(1), "nvs without a camera is a usage error");
}

#[test]
fn interrupted_runs_resume_to_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let (c, d) = (s(&cfg), s(&data));
    let full = dir.path().join("full");
    train_all(&cfg, &data, &full, &dir.path().join("full.jsonl"));

    let split = dir.path().join("split");
    let r = s(&split);
    for cmd in ["train-image-tokenizer", "train-camera-tokenizer"] {
        ok(&["--config", c, cmd, "--data", d, "--run", r, "--stop-after", "3"]);
        ok(&["--config", c, cmd, "--data", d, "--run", r, "--resume"]);
    }
    let m = dir.path().join("split.jsonl");
    ok(&["--config", c, "train-gst", "--data", d, "--run", r, "--stop-after", "5"]);
    ok(&["--config", c, "--metrics-out", s(&m), "train-gst", "--data", d, "--run", r, "--resume"]);

    assert_eq!(tree(&split), tree(&full));
    assert_eq!(std::fs::read(&m).unwrap(), std::fs::read(dir.path().join("full.jsonl")).unwrap());

    // A resumed run must match the stored config.
    let o = gst(&["--config", c, "train-gst", "--data", d, "--run", r, "--resume", "--steps", "9"]);
    assert_eq!(o.status.code(), Some(2));
}
