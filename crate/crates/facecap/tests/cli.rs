use std::path::Path;
use std::process::{Command, Output};

use facecap::formats::read_obj;

fn facecap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facecap"))
        .args(args)
        .env_remove("FACECAP_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn gen(dir: &Path, seed: &str) {
    let o = facecap(&["gen-asset", "--seed", seed, "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn same_seed_writes_identical_files() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "7");
    gen(&b, "7");
    for f in [
        "asset.json",
        "neutral.obj",
        "plate_neutral.png",
        "plate_expression.png",
        "manifest.json",
    ] {
        let fa = std::fs::read(a.join(f)).unwrap();
        let fb = std::fs::read(b.join(f)).unwrap();
        if f == "manifest.json" {
            // Only the output path differs.
            let strip = |v: Vec<u8>| {
                String::from_utf8(v)
                    .unwrap()
                    .replace(s(&a), "X")
                    .replace(s(&b), "X")
            };
            assert_eq!(strip(fa), strip(fb));
        } else {
            assert!(fa == fb, "{f} differs");
        }
    }
}

#[test]
fn simulate_requires_precompute_then_reproduces_neutral() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let out = t.path().join("out");
    gen(&a, "3");
    let o = facecap(&["simulate", "--asset", s(&a), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("precompute"));

    let o = facecap(&["precompute", "--asset", s(&a)]);
    assert_eq!(code(&o), 0);
    let cache: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("basis.json")).unwrap()).unwrap();
    assert_eq!(cache["flesh_displacements"].as_array().unwrap().len(), 6);

    let o = facecap(&[
        "simulate",
        "--asset",
        s(&a),
        "--b",
        "0,0,0,0,0,0",
        "--j",
        "0,0,0,0,0,0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (neutral, _) = read_obj(&a.join("neutral.obj")).unwrap();
    let (surface, _) = read_obj(&out.join("surface.obj")).unwrap();
    assert_eq!(neutral.len(), surface.len());
    for (p, q) in neutral.iter().zip(&surface) {
        assert!((p - q).amax() < 1e-8);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["asset_hash"].as_str().unwrap().len(), 64);

    // Editing the asset invalidates the cache.
    let text = std::fs::read_to_string(a.join("asset.json")).unwrap();
    std::fs::write(
        a.join("asset.json"),
        text.replacen("\"seed\": 3", "\"seed\": 4", 1),
    )
    .unwrap();
    let o = facecap(&["simulate", "--asset", s(&a), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("precompute"));
}

#[test]
fn gradcheck_table_passes() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    gen(&a, "7");
    assert_eq!(code(&facecap(&["precompute", "--asset", s(&a)])), 0);
    let o = facecap(&["gradcheck", "--asset", s(&a), "--threads", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        table.lines().filter(|l| l.ends_with("ok")).count(),
        12,
        "{table}"
    );
}

#[test]
fn bad_input_exits_with_two() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    gen(&a, "5");
    assert_eq!(code(&facecap(&["precompute", "--asset", s(&a)])), 0);
    let out = t.path().join("o");
    let cases: Vec<Vec<&str>> = vec![
        vec!["simulate", "--asset", s(&a), "--b", "1,2", "--out", s(&out)],
        vec![
            "simulate",
            "--asset",
            "/nonexistent/asset",
            "--out",
            s(&out),
        ],
        vec![
            "fit-geometry",
            "--asset",
            s(&a),
            "--target",
            "/nonexistent.obj",
            "--out",
            s(&out),
        ],
        vec!["frobnicate"],
        vec!["gen-asset", "--shapes", "9", "--out", s(&out)],
        vec![
            "simulate",
            "--asset",
            s(&a),
            "--out",
            s(&out),
            "--threads",
            "0",
        ],
        vec![
            "fit-lighting",
            "--asset",
            s(&a),
            "--out",
            s(&out),
            "--lambda-lighting",
            "-1",
        ],
    ];
    for args in cases {
        let o = facecap(&args);
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn config_is_strict_and_flags_win() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    gen(&a, "7");
    assert_eq!(code(&facecap(&["precompute", "--asset", s(&a)])), 0);
    let bad = t.path().join("bad.json");
    std::fs::write(&bad, r#"{"asset": "x", "lamda": {}}"#).unwrap();
    assert_eq!(code(&facecap(&["precompute", "--config", s(&bad)])), 2);

    let good = t.path().join("good.json");
    let out = t.path().join("out");
    std::fs::write(
        &good,
        serde_json::json!({
            "asset": s(&a),
            "out": s(&out),
            "deformer": "blendshape",
            "lambda": {"geometry": 0.5},
            "threads": 2
        })
        .to_string(),
    )
    .unwrap();
    let o = facecap(&[
        "fit-geometry",
        "--config",
        s(&good),
        "--target",
        s(&a.join("neutral.obj")),
        "--lambda-geometry",
        "0.25",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["lambda"]["geometry"], 0.25);
    assert_eq!(m["config"]["lambda"]["roto"], 3600.0);
    assert_eq!(m["config"]["deformer"], "blendshape");
    assert_eq!(m["config"]["threads"], 2);
}

#[test]
fn thread_count_falls_back_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    gen(&a, "7");
    assert_eq!(code(&facecap(&["precompute", "--asset", s(&a)])), 0);
    let out = t.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_facecap"))
        .args(["simulate", "--asset", s(&a), "--out", s(&out)])
        .env("FACECAP_THREADS", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["threads"], 5);
}

#[test]
fn image_pipeline_commands_run() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    gen(&a, "7");
    assert_eq!(code(&facecap(&["precompute", "--asset", s(&a)])), 0);
    let l = t.path().join("l");
    let o = facecap(&["fit-lighting", "--asset", s(&a), "--out", s(&l)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let i = t.path().join("i");
    let o = facecap(&[
        "fit-image",
        "--asset",
        s(&a),
        "--lighting",
        s(&l.join("lighting.json")),
        "--deformer",
        "blendshape",
        "--out",
        s(&i),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(i.join("fit.json")).unwrap()).unwrap();
    assert!(fit["stage1"]["monotone"].as_bool().unwrap());
    assert!(fit["stage2"]["monotone"].as_bool().unwrap());
    assert_eq!(fit["w"].as_array().unwrap().len(), 12);
}
