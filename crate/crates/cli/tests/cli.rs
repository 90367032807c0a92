use std::fs;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use nasdip::archgraph::{compile, CompileOptions, Shape};
use nasdip::autodiff::Tensor;
use nasdip::dip::{add_gaussian_noise, synthetic_image};
use nasdip::fleet::wire::{read_frame, write_frame, Message};
use nasdip::genome::{Genome, Layout, SearchSpaceConfig, Variant};

/// Genome whose stages are all bypassed.
fn bypassed(units: usize) -> String {
    let layout = Layout::new(units, Variant::Asymmetric);
    let mut arch = Genome::zeros(layout).decode().unwrap();
    for u in &mut arch.units {
        u.enc_skip = true;
        u.dec_skip = true;
    }
    Genome::encode(layout, &arch).unwrap().to_hex()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nasdip"));
    c.env_remove("NASDIP_WORKERS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("run nasdip")
}

fn text(o: &Output) -> String {
    format!(
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn save_png(path: &Path, t: &Tensor<f32>) {
    let s = t.shape;
    let mut bytes = Vec::new();
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                bytes.push((t.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let color = if s.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &bytes, s.width as u32, s.height as u32, color).unwrap();
}

/// Writes `clean.png` and `noisy.png` of the given side into `dir`.
fn fixture(dir: &Path, side: usize) {
    let clean = synthetic_image(side, side, 1);
    save_png(&dir.join("clean.png"), &clean);
    save_png(&dir.join("noisy.png"), &add_gaussian_noise(&clean, 25.0 / 255.0, 2));
}

const SMALL_SEARCH: &[&str] = &[
    "search", "--task", "denoise", "--image", "noisy.png", "--reference", "clean.png", "--pop", "6",
    "--gens", "2", "--seed", "7", "--epochs", "4", "--noise-channels", "4", "--units", "3", "--out", "run",
];

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn loss_columns(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn search_rerun_is_byte_identical_and_reported() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        fixture(d, 16);
        let o = run(d, SMALL_SEARCH);
        assert!(o.status.success(), "{}", text(&o));
    }
    let ra = a.path().join("run");
    let rb = b.path().join("run");
    let names = files(&ra);
    assert_eq!(names, files(&rb));
    for want in [
        "run.json",
        "generations/gen000.json",
        "generations/gen001.json",
        "generations.csv",
        "population.csv",
        "best.genome",
        "best.json",
        "best.png",
        "trace.csv",
        "summary.json",
        "report.html",
    ] {
        assert!(names.contains(&PathBuf::from(want)), "missing {want}");
    }
    for n in &names {
        let (x, y) = (fs::read(ra.join(n)).unwrap(), fs::read(rb.join(n)).unwrap());
        if n == Path::new("trace.csv") {
            // the last column is wall-clock time
            let (x, y) = (String::from_utf8(x).unwrap(), String::from_utf8(y).unwrap());
            assert_eq!(loss_columns(&x), loss_columns(&y));
        } else {
            assert_eq!(x, y, "{} differs", n.display());
        }
    }

    // report on the 2-generation run: two CSV rows whose max column matches
    // the checkpointed history
    fs::remove_file(ra.join("generations.csv")).unwrap();
    let o = run(a.path(), &["report", "run"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(ra.join("generations.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ra.join("generations/gen001.json")).unwrap()).unwrap();
    for (row, h) in rows.iter().zip(ckpt["history"].as_array().unwrap()) {
        let max: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(max, h["max"].as_f64().unwrap());
    }
    let pop = fs::read_to_string(ra.join("population.csv")).unwrap();
    assert_eq!(pop.lines().count(), 1 + 6);
    assert!(fs::read_to_string(ra.join("report.html")).unwrap().contains("<svg"));
}

#[test]
fn resume_extends_a_run_like_a_longer_run() {
    let d = tempfile::tempdir().unwrap();
    fixture(d.path(), 16);
    let mut long: Vec<&str> = SMALL_SEARCH.to_vec();
    let gens = long.iter().position(|&a| a == "--gens").unwrap();
    long[gens + 1] = "3";
    let out = long.len() - 1;
    long[out] = "long";
    assert!(run(d.path(), &long).status.success());
    assert!(run(d.path(), SMALL_SEARCH).status.success());
    let o = run(d.path(), &["search", "--resume", "--out", "run", "--gens", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["generations.csv", "best.genome", "best.png", "generations/gen002.json"] {
        assert_eq!(
            fs::read(d.path().join("long").join(f)).unwrap(),
            fs::read(d.path().join("run").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn inpaint_without_mask_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    fixture(d.path(), 16);
    let o = run(d.path(), &["search", "--task", "inpaint", "--image", "noisy.png", "--reference", "clean.png"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--mask"));
}

#[test]
fn missing_image_file_is_usage_error_without_backtrace() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["search", "--image", "nope.png", "--fitness", "recon-proxy"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nope.png"));
    assert!(!err.contains("panicked"));
}

#[test]
fn upscale_restores_at_target_size() {
    let d = tempfile::tempdir().unwrap();
    save_png(&d.path().join("small.png"), &synthetic_image(32, 32, 4));
    let o = run(
        d.path(),
        &[
            "search", "--task", "upscale", "--scale", "4", "--image", "small.png", "--fitness",
            "recon-proxy", "--pop", "4", "--gens", "1", "--epochs", "2", "--noise-channels", "2",
            "--units", "2", "--out", "up",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let img = image::open(d.path().join("up/best.png")).unwrap();
    assert_eq!((img.width(), img.height()), (128, 128));
}

#[test]
fn train_baseline_writes_restored_image() {
    let d = tempfile::tempdir().unwrap();
    fixture(d.path(), 32);
    let o = run(
        d.path(),
        &[
            "train", "--baseline-dip", "--task", "denoise", "--image", "noisy.png", "--reference",
            "clean.png", "--epochs", "3", "--out", "base",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.path().join("base/restored.png").exists());
    let trace = fs::read_to_string(d.path().join("base/trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("epoch,loss,wall_ms"));
    assert_eq!(trace.lines().count(), 4);
    let summary = fs::read_to_string(d.path().join("base/summary.json")).unwrap();
    assert!(summary.contains("approximation"));
}

#[test]
fn train_rejects_bad_genomes() {
    let d = tempfile::tempdir().unwrap();
    fixture(d.path(), 16);
    let o = run(d.path(), &["train", "--genome", "abcd", "--image", "noisy.png"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    let dead = bypassed(3);
    let o = run(d.path(), &["train", "--genome", &dead, "--units", "3", "--image", "noisy.png"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid architecture"));

    let o = run(d.path(), &["train", "--image", "noisy.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn decode_bypassed_genome_is_invalid() {
    let o = run(Path::new("."), &["decode", &bypassed(5)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("INVALID: no active stages"));
}

#[test]
fn decode_malformed_hex_is_usage_error() {
    for bad in ["xyz", "00", "0"] {
        let o = run(Path::new("."), &["decode", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
}

fn table_rows(stdout: &str) -> Vec<Vec<String>> {
    stdout
        .lines()
        .skip_while(|l| !l.starts_with("row "))
        .skip(1)
        .take_while(|l| !l.starts_with("VALID") && !l.starts_with("INVALID"))
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

#[test]
fn decode_table_matches_genome() {
    let cfg = SearchSpaceConfig::new(5, Variant::Asymmetric);
    let mut checked_valid = false;
    for seed in 0..40 {
        let g = Genome::random(&cfg, seed);
        let arch = g.decode().unwrap();
        let round = Genome::encode(g.layout(), &arch).unwrap();
        assert_eq!(round, g);
        let o = run(Path::new("."), &["decode", &round.to_hex(), "--json", "-"]);
        assert!(o.status.success());
        let out = String::from_utf8_lossy(&o.stdout).to_string();
        let rows = table_rows(&out);
        let skips: usize = arch
            .units
            .iter()
            .map(|u| u.skip_gates.iter().filter(|&&x| x > 0).count())
            .sum();
        assert_eq!(rows.len(), 2 * arch.units.len() + skips);
        for (i, u) in arch.units.iter().enumerate() {
            let e = &rows[2 * i];
            let d = &rows[2 * i + 1];
            assert_eq!(e[1] == "skipped", u.enc_skip);
            assert_eq!(e[2], format!("{0}x{0}", u.enc_filter_size()));
            assert_eq!(e[3], u.enc_channels().to_string());
            assert_eq!(d[1] == "skipped", u.dec_skip);
            assert_eq!(d[2], format!("{0}x{0}", u.dec_filter_size()));
            assert_eq!(d[3], u.dec_channels().to_string());
        }
        let valid = compile(
            &arch.units,
            Shape::new(32, 64, 64),
            Shape::new(3, 64, 64),
            &CompileOptions::default(),
        );
        if let Some(graph) = valid.graph() {
            assert!(out.contains("\nVALID\n"));
            assert!(out.contains(&format!("parameters {}", graph.param_count())));
            let json_start = out.find("{\n").unwrap();
            let v: serde_json::Value = serde_json::from_str(&out[json_start..]).unwrap();
            assert_eq!(v["param_count"].as_u64().unwrap() as usize, graph.param_count());
            checked_valid = true;
        } else {
            assert!(out.contains("INVALID: "));
        }
    }
    assert!(checked_valid);
}

fn wait_for_addr(path: &Path, child: &mut Child) -> String {
    let start = Instant::now();
    loop {
        if let Ok(s) = fs::read_to_string(path) {
            if s.ends_with('\n') {
                return s.trim().to_string();
            }
        }
        assert!(child.try_wait().unwrap().is_none(), "worker exited early");
        assert!(start.elapsed() < Duration::from_secs(20), "worker did not start");
        thread::sleep(Duration::from_millis(20));
    }
}

fn spawn_worker(dir: &Path, extra: &[&str]) -> (Child, String) {
    let addr_file = dir.join(format!("worker{}.addr", extra.len()));
    let mut child = bin()
        .args(["worker", "--listen", "127.0.0.1:0", "--addr-file"])
        .arg(&addr_file)
        .args(extra)
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let addr = wait_for_addr(&addr_file, &mut child);
    (child, addr)
}

#[test]
fn worker_hello_bye_loopback_exits_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let (mut child, addr) = spawn_worker(d.path(), &["--max-connections", "1"]);
    let mut s = TcpStream::connect(&addr).unwrap();
    write_frame(&mut s, &Message::hello(0)).unwrap();
    assert!(matches!(read_frame(&mut s).unwrap(), Some(Message::Hello { .. })));
    write_frame(&mut s, &Message::Bye { error: None }).unwrap();
    assert!(read_frame(&mut s).unwrap().is_none());
    let start = Instant::now();
    let status = loop {
        if let Some(st) = child.try_wait().unwrap() {
            break st;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "worker did not exit");
        thread::sleep(Duration::from_millis(20));
    };
    assert!(status.success());
}

#[test]
fn remote_search_matches_local() {
    let d = tempfile::tempdir().unwrap();
    fixture(d.path(), 16);
    let (mut w1, a1) = spawn_worker(d.path(), &[]);
    let (mut w2, a2) = spawn_worker(d.path(), &["--slots", "2"]);
    let local = run(d.path(), SMALL_SEARCH);
    assert!(local.status.success(), "{}", text(&local));
    let mut remote_args = SMALL_SEARCH.to_vec();
    let out = remote_args.len() - 1;
    remote_args[out] = "remote";
    let remote = bin()
        .current_dir(d.path())
        .args(&remote_args)
        .env("NASDIP_WORKERS", format!("{a1},{a2}"))
        .output()
        .unwrap();
    let _ = w1.kill();
    let _ = w2.kill();
    let _ = w1.wait();
    let _ = w2.wait();
    assert!(remote.status.success(), "{}", text(&remote));
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("remote/run.json")).unwrap()).unwrap();
    assert_eq!(cfg["workers"].as_array().unwrap().len(), 2);
    for f in ["generations.csv", "best.genome", "best.png", "generations/gen001.json", "summary.json"] {
        assert_eq!(
            fs::read(d.path().join("run").join(f)).unwrap(),
            fs::read(d.path().join("remote").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn report_on_missing_dir_is_usage_error() {
    let o = run(Path::new("."), &["report", "/definitely/not/here"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(run(Path::new("."), &["--help"]).status.code(), Some(0));
    assert_eq!(run(Path::new("."), &["search", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(Path::new("."), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let d = tempfile::tempdir().unwrap();
    fixture(d.path(), 16);
    fs::write(
        d.path().join("cfg.json"),
        r#"{"image": "noisy.png", "reference": "clean.png", "population": 4, "generations": 1,
            "epochs": 2, "noise_channels": 2, "units": 2, "out": "from_file"}"#,
    )
    .unwrap();
    let o = run(d.path(), &["search", "--config", "cfg.json", "--seed", "11"]);
    assert!(o.status.success(), "{}", text(&o));
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("from_file/run.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 11);
    assert_eq!(saved["population"], 4);

    fs::write(d.path().join("bad.json"), r#"{"popultion": 4}"#).unwrap();
    let o = run(d.path(), &["search", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
}
