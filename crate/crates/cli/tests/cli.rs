//! End-to-end CLI tests: the four subcommands against a generated dataset,
//! exit codes, and the predict pixel contract.

use std::path::Path;
use std::process::Command;

fn afford() -> Command {
    Command::new(env!("CARGO_BIN_EXE_afford"))
}

fn write_config(path: &Path, steps: u64) {
    std::fs::write(
        path,
        format!(
            "steps = {steps}\nn_queries = 2\nencoder_channels = [4, 4, 8, 8, 8]\n\
             projected_channels = 6\ndecoder_channels = 4\nk_bases = 4\n"
        ),
    )
    .unwrap();
}

#[test]
fn full_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let status = afford()
        .args(["gen-data", "--episodes", "6", "--seed", "5", "--n-queries", "2", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(data.join("categories.json").exists());
    assert!(data.join("splits/fold_3.json").exists());

    let config = dir.path().join("config.toml");
    write_config(&config, 3);
    let ckpt = dir.path().join("model.ckpt");
    let status = afford()
        .arg("train")
        .arg("--config").arg(&config)
        .arg("--data").arg(&data)
        .args(["--fold", "1"])
        .arg("--out").arg(&ckpt)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(ckpt.exists());
    let trace = std::fs::read_to_string(dir.path().join("model.trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    let report = dir.path().join("report.jsonl");
    let status = afford()
        .arg("eval")
        .arg("--ckpt").arg(&ckpt)
        .arg("--data").arg(&data)
        .args(["--fold", "1", "--episodes", "2"])
        .arg("--report").arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
    let (records, aggregates) =
        afford_core::metrics::read_report(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(aggregates.len(), 1);
    assert_eq!(aggregates[0].count, 4);

    // Predict against files from the generated dataset.
    let support = std::fs::read_dir(data.join("support"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .unwrap();
    let ann = support.with_extension("json");
    let query = std::fs::read_dir(data.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .unwrap();
    let preds = dir.path().join("preds");
    let status = afford()
        .arg("predict")
        .arg("--ckpt").arg(&ckpt)
        .arg("--support").arg(&support)
        .arg("--support-ann").arg(&ann)
        .arg("--queries").arg(&query)
        .arg("--out").arg(&preds)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(preds.join("manifest.json").exists());

    // Output PNG has the query's dimensions, identical reruns produce
    // identical bytes, and pixels equal round(255 * D1).
    let stem = query.file_stem().unwrap().to_str().unwrap();
    let mask_path = preds.join(format!("{stem}_mask.png"));
    let mask = image::open(&mask_path).unwrap().to_luma8();
    let qimg = image::open(&query).unwrap();
    assert_eq!((mask.width(), mask.height()), (qimg.width(), qimg.height()));

    let first_bytes = std::fs::read(&mask_path).unwrap();
    let status = afford()
        .arg("predict")
        .arg("--ckpt").arg(&ckpt)
        .arg("--support").arg(&support)
        .arg("--support-ann").arg(&ann)
        .arg("--queries").arg(&query)
        .arg("--out").arg(&preds)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read(&mask_path).unwrap(), first_bytes);

    let ck = afford_core::train::Checkpoint::load(&ckpt).unwrap();
    let (model, _) = ck.restore().unwrap();
    let image = afford_core::episodes::dir::load_image_tensor(&query).unwrap();
    let ann_parsed: afford_core::episodes::SupportAnnotation =
        serde_json::from_str(&std::fs::read_to_string(&ann).unwrap()).unwrap();
    let sup_img = afford_core::episodes::dir::load_image_tensor(&support).unwrap();
    let (h, w) = (sup_img.shape()[1], sup_img.shape()[2]);
    let (hb, ob) = ann_parsed.to_boxes(w, h, &ann).unwrap();
    let sample = afford_core::purpose::SupportSample {
        image: sup_img,
        human_box: hb,
        object_box: ob,
    };
    let maps = afford_core::train::predict_maps(&model, &sample, &[image]).unwrap();
    for (y, x) in [(0u32, 0u32), (13, 57), (31, 31), (63, 5)] {
        let want = (maps[0].data()[(y as usize) * 64 + x as usize].clamp(0.0, 1.0) * 255.0)
            .round() as u8;
        assert_eq!(mask.get_pixel(x, y).0[0], want, "pixel ({y},{x})");
    }
}

#[test]
fn usage_errors_exit_1() {
    let status = afford().args(["train", "--bogus"]).status().unwrap();
    assert_eq!(status.code(), Some(1));

    let status = afford().arg("no-such-command").status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn bad_config_exits_1_and_bad_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "mystery_knob = true\n").unwrap();
    let status = afford()
        .arg("train")
        .arg("--config").arg(&config)
        .arg("--data").arg(dir.path())
        .args(["--fold", "1"])
        .arg("--out").arg(dir.path().join("m.ckpt"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    // Valid config, corrupt dataset: an image without its mask.
    write_config(&config, 1);
    let data = dir.path().join("data");
    std::fs::create_dir_all(data.join("images")).unwrap();
    std::fs::create_dir_all(data.join("masks")).unwrap();
    std::fs::write(
        data.join("categories.json"),
        r#"{"0": "contain", "1": "support", "2": "roll"}"#,
    )
    .unwrap();
    let img = image::RgbImage::new(64, 64);
    img.save(data.join("images/0_0.png")).unwrap();
    let status = afford()
        .arg("train")
        .arg("--config").arg(&config)
        .arg("--data").arg(&data)
        .args(["--fold", "1"])
        .arg("--out").arg(dir.path().join("m.ckpt"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let status = afford().arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));
}
