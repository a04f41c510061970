use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::Value;

fn alfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alfa"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn alfa")
}

fn ok(args: &[&str]) -> Output {
    let out = alfa(args);
    assert!(
        out.status.success(),
        "alfa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out-dir",
        p(dir),
        "--normal",
        "12",
        "--abnormal",
        "12",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "prompts",
        "adapt",
        "score",
        "bank",
        "eval",
        "descriptors",
        "synth",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help:\n{text}");
    }
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = alfa(&["score", "--prompt-bundle", "p.alfb", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("--image-bundle"));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn unreadable_bundle_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.alfb");
    std::fs::write(&bogus, b"not a bundle at all").unwrap();
    let out = alfa(&[
        "score",
        "--image-bundle",
        p(&bogus),
        "--prompt-bundle",
        p(&bogus),
        "--out",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "data");
    assert!(err["path"].as_str().unwrap().ends_with("bogus.alfb"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("alfa.toml");
    std::fs::write(&cfg, "k = -1.0\n").unwrap();
    let out = alfa(&["--config", p(&cfg), "synth", "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn synth_score_eval_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("fixture");
    synth(&fixture, &["--seed", "3"]);
    let images = fixture.join("images");
    let prompts = fixture.join("prompts.alfb");

    let mut reports = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "4")] {
        let results = dir.path().join(format!("results_{run}"));
        let eval = dir.path().join(format!("eval_{run}.json"));
        ok(&[
            "--jobs",
            jobs,
            "score",
            "--image-bundle",
            p(&images),
            "--prompt-bundle",
            p(&prompts),
            "--sigma",
            "1",
            "--out",
            p(&results),
        ]);
        ok(&["eval", "--results", p(&results), "--out", p(&eval)]);
        reports.push(std::fs::read(&eval).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    let names: Vec<_> = std::fs::read_dir(dir.path().join("results_a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".json")).count(), 24);
    assert_eq!(
        names.iter().filter(|n| n.ends_with(".map.alfb")).count(),
        24
    );
    for name in names.iter().filter(|n| n.ends_with(".json")) {
        let a = std::fs::read(dir.path().join("results_a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("results_b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }

    let report = read_json(&dir.path().join("eval_a.json"));
    let class = &report["classes"]["synthetic"];
    assert_eq!(class["images"], 24);
    assert_eq!(class["anomalous"], 12);
    assert!(report["macro"]["image"]["auroc"].as_f64().unwrap() > 0.95);
    assert!(report["macro"]["pixel"]["pauroc"].as_f64().unwrap() > 0.9);
}

#[test]
fn single_image_result_names_its_map() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let image = dir.path().join("images/abnormal_0012.alfb");
    let out = dir.path().join("out/result.json");
    let map = dir.path().join("out/maps/result.map.alfb");
    ok(&[
        "score",
        "--image-bundle",
        p(&image),
        "--prompt-bundle",
        p(&dir.path().join("prompts.alfb")),
        "--out",
        p(&out),
        "--map-out",
        p(&map),
        "--no-rtp",
    ]);
    let result = read_json(&out);
    assert_eq!(result["image"], "synthetic/abnormal_0012");
    assert_eq!(result["kept"]["normal"], 20);
    assert_eq!(result["kept"]["abnormal"], 20);
    assert_eq!(result["map"], p(&map));
    assert!(map.exists());
    let s = result["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s));
}

#[test]
fn adapt_reports_every_prompt() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let out = dir.path().join("adapt.json");
    ok(&[
        "adapt",
        "--image-bundle",
        p(&dir.path().join("images/normal_0000.alfb")),
        "--prompt-bundle",
        p(&dir.path().join("prompts.alfb")),
        "--k",
        "2",
        "--out",
        p(&out),
    ]);
    let report = read_json(&out);
    let prompts = report["prompts"].as_array().unwrap();
    assert_eq!(prompts.len(), 40);
    let kept = prompts.iter().filter(|p| p["kept"] == true).count() as u64;
    let counts = &report["kept"];
    assert_eq!(
        kept,
        counts["normal"].as_u64().unwrap() + counts["abnormal"].as_u64().unwrap()
    );
    assert_eq!(report["k"], 2.0);
    let iv = &report["normal_interval"];
    assert!(iv["lo"].as_f64().unwrap() <= iv["hi"].as_f64().unwrap());
}

#[test]
fn descriptors_are_sorted_and_filtered() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let out = dir.path().join("desc.json");
    ok(&[
        "descriptors",
        "--image-bundle",
        p(&dir.path().join("images/abnormal_0012.alfb")),
        "--prompt-bundle",
        p(&dir.path().join("prompts.alfb")),
        "--top",
        "4",
        "--polarity",
        "abnormal",
        "--out",
        p(&out),
    ]);
    let report = read_json(&out);
    let items = report["descriptors"].as_array().unwrap();
    assert_eq!(items.len(), 4);
    assert!(items.iter().all(|d| d["polarity"] == "abnormal"));
    let sims: Vec<f64> = items
        .iter()
        .map(|d| d["similarity"].as_f64().unwrap())
        .collect();
    assert!(sims.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn bank_build_and_memory_scoring() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let refs = dir.path().join("refs");
    std::fs::create_dir(&refs).unwrap();
    for i in 0..4 {
        let name = format!("normal_{i:04}.alfb");
        std::fs::copy(dir.path().join("images").join(&name), refs.join(&name)).unwrap();
    }
    let bank = dir.path().join("bank.alfb");
    ok(&[
        "bank",
        "build",
        "--bundles",
        p(&refs),
        "--scales",
        "2,3",
        "--out",
        p(&bank),
    ]);
    let bytes = std::fs::read(&bank).unwrap();
    assert_eq!(&bytes[..4], b"ALFB");

    let score = |image: &str, out: &str| {
        let out = dir.path().join(out);
        ok(&[
            "score",
            "--image-bundle",
            p(&dir.path().join("images").join(image)),
            "--prompt-bundle",
            p(&dir.path().join("prompts.alfb")),
            "--bank",
            p(&bank),
            "--out",
            p(&out),
        ]);
        read_json(&out)["max_local"].as_f64().unwrap()
    };
    let reference = score("normal_0000.alfb", "ref.json");
    let defect = score("abnormal_0012.alfb", "defect.json");
    assert!(defect > reference, "{defect} <= {reference}");
}

#[test]
fn shipped_config_loads_and_applies_aliases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pcb1.json");
    let cfg = configs_dir().join("alfa.toml");
    ok(&[
        "--config",
        p(&cfg),
        "prompts",
        "--class",
        "pcb1",
        "--out",
        p(&out),
    ]);
    let set = read_json(&out);
    assert_eq!(set["class"], "pcb1");
    let prompts = set["prompts"].as_array().unwrap();
    assert!(prompts.iter().all(|p| p["source"] == "template"));
    assert!(prompts.iter().all(|p| p["text"]
        .as_str()
        .unwrap()
        .contains("printed circuit board")));
}

/// Serves OpenAI-style completions on a local port; each reply is distinct.
fn completion_server(replies: usize) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let served = Arc::new(AtomicUsize::new(0));
    let counter = served.clone();
    let handle = std::thread::spawn(move || {
        for stream in listener.incoming().take(replies) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        content_length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; content_length];
            reader.read_exact(&mut body).unwrap();
            let request: Value = serde_json::from_slice(&body).unwrap();
            let query = request["prompt"].as_str().unwrap();
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let lead = if query.contains("no anomaly") {
                "A normal image of printed circuit board"
            } else {
                "An abnormal image of printed circuit board"
            };
            let text = format!(" {lead} shows variant {n}. Trailing chatter.");
            let reply = serde_json::json!({"choices": [{"text": text}]}).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, served, handle)
}

#[test]
fn llm_prompts_come_from_the_endpoint_then_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (url, served, server) = completion_server(4);
    let cache = dir.path().join("cache.json");
    let aliases = configs_dir().join("class_aliases.json");
    let run = |out: &Path, endpoint: &str| {
        ok(&[
            "prompts",
            "--class",
            "pcb1",
            "--aliases",
            p(&aliases),
            "--llm-count",
            "2",
            "--llm-endpoint",
            endpoint,
            "--llm-cache",
            p(&cache),
            "--out",
            p(out),
        ]);
        read_json(out)
    };

    let first = run(&dir.path().join("a.json"), &url);
    server.join().unwrap();
    assert_eq!(served.load(Ordering::SeqCst), 4);
    let llm: Vec<&Value> = first["prompts"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["source"] == "llm")
        .collect();
    assert_eq!(llm.len(), 4);
    assert_eq!(llm[0]["polarity"], "normal");
    assert_eq!(
        llm[0]["text"],
        "A normal image of printed circuit board shows variant 0."
    );
    assert_eq!(llm[3]["polarity"], "abnormal");
    assert!(cache.exists());

    // Server is gone: everything must come from the cache.
    let second = run(&dir.path().join("b.json"), &url);
    assert_eq!(first, second);
}

#[test]
fn unreachable_endpoint_without_cache_is_a_data_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let dir = tempfile::tempdir().unwrap();
    let out = alfa(&[
        "prompts",
        "--class",
        "bottle",
        "--llm-count",
        "1",
        "--llm-endpoint",
        &format!("http://127.0.0.1:{port}/v1/completions"),
        "--out",
        p(&dir.path().join("p.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "data");
}

#[test]
fn tiles_of_one_image_merge_into_one_result() {
    use alfa_core::embeddings::TileOffset;
    use alfa_core::synth::{synth_fixture, SynthConfig};

    let dir = tempfile::tempdir().unwrap();
    let fixture = synth_fixture(&SynthConfig {
        n_normal: 1,
        n_abnormal: 1,
        ..SynthConfig::default()
    });
    let side = fixture.images[0].image_h;
    let tiles_dir = dir.path().join("tiles");
    std::fs::create_dir(&tiles_dir).unwrap();
    for (i, image) in fixture.images.iter().enumerate() {
        let mut tile = image.clone();
        tile.source_path = "wide/board_0001".into();
        tile.tile = Some(TileOffset {
            y: 0,
            x: i * side / 2,
            full_h: side,
            full_w: side + side / 2,
        });
        tile.to_bundle()
            .save(tiles_dir.join(format!("tile_{i}.alfb")))
            .unwrap();
    }
    let prompts = dir.path().join("prompts.alfb");
    fixture.prompts.to_bundle().save(&prompts).unwrap();

    let results = dir.path().join("results");
    ok(&[
        "score",
        "--image-bundle",
        p(&tiles_dir),
        "--prompt-bundle",
        p(&prompts),
        "--out",
        p(&results),
    ]);
    let result = read_json(&results.join("board_0001.json"));
    assert_eq!(result["image"], "wide/board_0001");
    let map = alfa_core::Bundle::load(results.join("board_0001.map.alfb")).unwrap();
    assert_eq!(
        map.tensor("anomaly_map").unwrap().shape(),
        &[side, side + side / 2]
    );
    assert!(map.get("gt_mask").is_some());

    // The merged score is the larger of the two tile scores.
    let mut tile_scores = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("t{i}.json"));
        ok(&[
            "score",
            "--image-bundle",
            p(&tiles_dir.join(format!("tile_{i}.alfb"))),
            "--prompt-bundle",
            p(&prompts),
            "--out",
            p(&out),
        ]);
        tile_scores.push(read_json(&out)["score"].as_f64().unwrap());
    }
    assert_eq!(
        result["score"].as_f64().unwrap(),
        tile_scores[0].max(tile_scores[1])
    );
    let names = std::fs::read_dir(&results).unwrap().count();
    assert_eq!(names, 2);
}
