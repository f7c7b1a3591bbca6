use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lisn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lisn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("LISN_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_pgm(path: &Path, w: usize, h: usize, seed: usize) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = 128.0 + 60.0 * ((0.21 * x as f64 + 0.13 * y as f64 + seed as f64).sin()) + ((x * 7 + y * 3 + seed) % 11) as f64;
            bytes.push(v as u8);
        }
    }
    fs::write(path, bytes).unwrap();
}

fn data_dir(root: &Path, n: usize, side: usize) -> PathBuf {
    let dir = root.join("data");
    fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        write_pgm(&dir.join(format!("img{i}.pgm")), side, side, i);
    }
    dir
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny ×4 checkpoint written by a zero-epoch run.
fn tiny_checkpoint(root: &Path) -> PathBuf {
    let data = data_dir(root, 2, 48);
    let out = root.join("init");
    let o = lisn(&["train", "--data", path(&data), "--out", path(&out), "--epochs", "0", "--width", "8", "--blocks", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("checkpoint")
}

fn short_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", path(data), "--out", path(out), "--epochs", "2", "--steps-per-epoch", "2", "--batch-size", "2",
        "--patch-size", "8", "--width", "8", "--blocks", "1",
    ];
    args.extend_from_slice(extra);
    lisn(&args)
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expected: [(&str, &[&str]); 5] = [
        ("train", &["--data", "--epochs", "--scale", "--out", "--config", "--seed", "--resume"]),
        ("eval", &["--ckpt", "--data", "--shave", "--json"]),
        ("upscale", &["--ckpt", "--input", "--output"]),
        ("complexity", &["--scale", "--width", "--blocks", "--variant", "--input-size", "--mac-flops", "--detail"]),
        ("selftest", &["--only"]),
    ];
    for (sub, flags) in expected {
        let o = lisn(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        let text = stdout(&o);
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help lacks {flag}");
        }
    }
    assert_eq!(code(&lisn(&["--help"])), 0);
}

#[test]
fn train_without_data_is_a_usage_error() {
    let o = lisn(&["train", "--epochs", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn train_without_out_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(tmp.path(), 1, 48);
    assert_eq!(code(&lisn(&["train", "--data", path(&data)])), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "width = 8\ncolour = red\n").unwrap();
    let o = lisn(&["--config", path(&cfg), "complexity"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_lisn"))
        .args(["complexity"])
        .env("LISN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    for f in ["manifest.json", "params.bin", "optimizer.bin"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ckpt.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epoch"], 0);
    assert!(ckpt.parent().unwrap().join("config.txt").is_file());
}

#[test]
fn training_is_reproducible_from_seed_and_config_echo() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(tmp.path(), 3, 48);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for out in [&a, &b] {
        let o = short_train(&data, out, &["--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let echo = a.join("config.txt");
    let o = lisn(&["train", "--data", path(&data), "--out", path(&c), "--config", path(&echo)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["params.bin", "optimizer.bin", "manifest.json"] {
        let want = fs::read(a.join("checkpoint").join(f)).unwrap();
        assert_eq!(want, fs::read(b.join("checkpoint").join(f)).unwrap(), "{f} differs between seeded runs");
        assert_eq!(want, fs::read(c.join("checkpoint").join(f)).unwrap(), "{f} differs when rerun from the echo");
    }
    let log = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["mean_loss"].as_f64().unwrap().is_finite()));
}

#[test]
fn different_seeds_give_different_weights() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(tmp.path(), 2, 48);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&short_train(&data, &a, &["--seed", "1"])), 0);
    assert_eq!(code(&short_train(&data, &b, &["--seed", "2"])), 0);
    assert_ne!(fs::read(a.join("checkpoint/params.bin")).unwrap(), fs::read(b.join("checkpoint/params.bin")).unwrap());
}

#[test]
fn resume_continues_to_the_target_epoch() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(tmp.path(), 2, 48);
    let first = tmp.path().join("first");
    assert_eq!(code(&short_train(&data, &first, &[])), 0);
    let second = tmp.path().join("second");
    let o = lisn(&[
        "train", "--data", path(&data), "--out", path(&second), "--epochs", "3", "--steps-per-epoch", "2", "--batch-size", "2",
        "--patch-size", "8", "--resume", path(&first.join("checkpoint")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(second.join("checkpoint/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epoch"], 3);
    assert_eq!(manifest["config"]["width"], 8);
}

#[test]
fn eval_on_empty_directory_fails() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = lisn(&["eval", "--ckpt", path(&ckpt), "--data", path(&empty)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no evaluable images"), "{}", stderr(&o));
}

fn eval_json(ckpt: &Path, data: &Path, shave: &str) -> Vec<serde_json::Value> {
    let o = lisn(&["eval", "--ckpt", path(ckpt), "--data", path(data), "--json", "--shave", shave]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    stdout(&o).lines().map(|l| serde_json::from_str(l).expect("valid JSON line")).collect()
}

#[test]
fn eval_json_aggregate_is_the_mean_of_rows() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let data = tmp.path().join("data");
    let records = eval_json(&ckpt, &data, "0");
    let (rows, agg) = records.split_at(records.len() - 1);
    assert_eq!(rows.len(), 2);
    assert_eq!(agg[0]["record"], "aggregate");
    for key in ["psnr", "ssim"] {
        let mean = rows.iter().map(|r| r[key].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
        let got = agg[0][format!("mean_{key}")].as_f64().unwrap();
        assert!((got - mean).abs() < 1e-12, "{key}: {got} vs {mean}");
    }
}

#[test]
fn eval_shave_changes_the_measured_region() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let data = tmp.path().join("data");
    let full = eval_json(&ckpt, &data, "0");
    let shaved = eval_json(&ckpt, &data, "4");
    assert_ne!(full[0]["psnr"], shaved[0]["psnr"]);
    let out = tmp.path().join("metrics");
    let o = lisn(&["eval", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PSNR"));
    assert!(out.join("metrics.jsonl").is_file());
}

#[test]
fn eval_reports_a_corrupt_checkpoint_by_parameter() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let manifest = ckpt.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replace("\"width\": 8", "\"width\": 16");
    fs::write(&manifest, text).unwrap();
    let o = lisn(&["eval", "--ckpt", path(&ckpt), "--data", path(&tmp.path().join("data"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sfe.weight"), "{}", stderr(&o));
}

/// Reads width, height and maximum sample of an 8-bit binary PGM.
fn read_pgm(bytes: &[u8]) -> (usize, usize, u8) {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]).into_owned();
    let mut fields = text.split_ascii_whitespace();
    assert_eq!(fields.next(), Some("P5"));
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    let data = &bytes[bytes.len() - w * h..];
    (w, h, *data.iter().max().unwrap())
}

#[test]
fn upscale_writes_a_scaled_deterministic_image() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let input = tmp.path().join("lr.pgm");
    write_pgm(&input, 32, 32, 9);
    let (a, b) = (tmp.path().join("a.pgm"), tmp.path().join("b.pgm"));
    for out in [&a, &b] {
        let o = lisn(&["upscale", "--ckpt", path(&ckpt), "--input", path(&input), "--output", path(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let (w, h, _) = read_pgm(&bytes);
    assert_eq!((w, h), (128, 128));
}

#[test]
fn upscale_png_output_has_the_scaled_size() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let input = tmp.path().join("lr.pgm");
    write_pgm(&input, 20, 12, 1);
    let out = tmp.path().join("sr.png");
    assert_eq!(code(&lisn(&["upscale", "--ckpt", path(&ckpt), "--input", path(&input), "--output", path(&out)])), 0);
    let png = fs::read(&out).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let be = |i: usize| u32::from_be_bytes(png[i..i + 4].try_into().unwrap());
    assert_eq!((be(16), be(20)), (80, 48));
}

#[test]
fn upscale_to_unwritable_path_fails() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let input = tmp.path().join("lr.pgm");
    write_pgm(&input, 8, 8, 0);
    let out = tmp.path().join("missing-dir").join("sr.png");
    let o = lisn(&["upscale", "--ckpt", path(&ckpt), "--input", path(&input), "--output", path(&out)]);
    assert_eq!(code(&o), 1);
}

fn complexity_json(args: &[&str]) -> serde_json::Value {
    let mut all = vec!["complexity", "--json"];
    all.extend_from_slice(args);
    let o = lisn(&all);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

fn total_params(args: &[&str]) -> u64 {
    complexity_json(args)["report"]["total_params"].as_u64().unwrap()
}

#[test]
fn complexity_defaults() {
    let o = lisn(&["complexity"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("64x64"), "{text}");
    assert!(text.contains("MAC = 2"), "{text}");
    assert!(text.contains("total"), "{text}");
    let json = complexity_json(&[]);
    assert_eq!(json["report"]["input_hw"], serde_json::json!([64, 64]));
    assert_eq!(json["report"]["mac_flops"], 2);
}

#[test]
fn complexity_invalid_variant_is_a_usage_error() {
    assert_eq!(code(&lisn(&["complexity", "--variant", "wide"])), 2);
    assert_eq!(code(&lisn(&["complexity", "--scale", "3"])), 2);
}

#[test]
fn no_split_variant_is_much_larger() {
    let base = total_params(&[]);
    let wide = total_params(&["--variant", "no_split"]);
    assert!(wide as f64 > 2.5 * base as f64, "{wide} vs {base}");
}

#[test]
fn block_count_is_affine_in_parameters() {
    // One block at C = 64: two shift layers of (norm 64 + expand 3168 +
    // gate 9312 + project 3104), depthwise 160 + pointwise 272, attention
    // 1040 + 1088, plus its 64·64 share of the fusion convolution.
    let per_block = 2 * (64 + 3168 + 9312 + 3104) + 160 + 272 + 1040 + 1088 + 64 * 64;
    assert_eq!(per_block, 37_952);
    let counts: Vec<u64> = (4..=12).map(|n| total_params(&["--blocks", &n.to_string()])).collect();
    for pair in counts.windows(2) {
        assert_eq!(pair[1] - pair[0], per_block);
    }
    assert_eq!(counts[8] - counts[0], 8 * per_block);
}

#[test]
fn complexity_mac_convention_halves_conv_flops() {
    let two = complexity_json(&[])["report"]["total_flops"].as_u64().unwrap();
    let one = complexity_json(&["--mac-flops", "1"])["report"]["total_flops"].as_u64().unwrap();
    assert!(one < two && 2 * one > two, "{one} vs {two}");
    assert_eq!(code(&lisn(&["complexity", "--mac-flops", "3"])), 2);
}

#[test]
fn complexity_measure_reports_timings() {
    let json = complexity_json(&["--width", "8", "--blocks", "1", "--input-size", "8", "--measure", "3"]);
    let m = &json["measurement"];
    assert_eq!(m["repeats"], 3);
    assert!(m["median_ms"].as_f64().unwrap() >= 0.0);
    assert!(m["peak_bytes"].as_u64().unwrap() > 0);
}

#[test]
fn selftest_subset_lists_each_suite_and_duration() {
    let o = lisn(&["selftest", "--only", "3,4,7"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for id in [" 3. ", " 4. ", " 7. "] {
        let line = text.lines().find(|l| l.contains(id)).expect("suite listed");
        assert!(line.starts_with("[PASS]") && line.ends_with("s)"), "{line}");
    }
    assert!(text.contains("3 of 3 criteria passed"));
    assert_eq!(code(&lisn(&["selftest", "--only", "13"])), 2);
}
