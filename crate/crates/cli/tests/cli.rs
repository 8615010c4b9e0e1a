use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tilecodec::image_io::read_image;
use tilecodec::metrics::psnr;

fn tilecodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilecodec"))
        .args(args)
        .env("TILECODEC_LOG", "off")
        .output()
        .expect("run binary")
}

fn ok_lines(args: &[&str]) -> Vec<Value> {
    let out = tilecodec(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let gen = ok_lines(&["gen-corpus", "--out", s(&corpus), "--count", "2", "--width", "70", "--height", "66", "--seed", "5"]);
    assert_eq!(gen.len(), 2);
    assert_eq!(gen[1]["seed"], 6);
    assert!(corpus.join("img00.png").exists() && corpus.join("img01.png").exists());

    let ctx = d.join("ctx.tncm");
    let log = ok_lines(&[
        "train", "--phase", "context", "--corpus", s(&corpus), "--steps", "2", "--out", s(&ctx),
        "--patches-per-image", "2", "--log-every", "1",
    ]);
    assert_eq!(log.len(), 3);
    assert_eq!(log[0]["phase"], "context");
    assert_eq!(log[2]["context_steps"], 2);

    let model = d.join("model.tncm");
    let done = ok_lines(&[
        "train", "--phase", "residual", "--corpus", s(&corpus), "--steps", "1", "--model", s(&ctx), "--out",
        s(&model), "--patches-per-image", "2",
    ]);
    let digest = done.last().unwrap()["digest"].as_str().unwrap().to_string();

    let input = corpus.join("img00.png");
    let stream = d.join("a.tnc");
    let enc = ok_lines(&[
        "encode", "--input", s(&input), "--output", s(&stream), "--model", s(&model), "--k", "2", "--threads", "2",
    ]);
    let bytes = std::fs::metadata(&stream).unwrap().len();
    assert_eq!(enc[0]["bytes"], bytes);
    assert_eq!(bytes, 21 + 9 + 16 * 2 * 9);
    assert_eq!(enc[0]["k"], 2);
    assert_eq!(enc[0]["tiles"], 9);

    let info = ok_lines(&["inspect", "--input", s(&stream)]);
    assert_eq!((info[0]["width"].clone(), info[0]["height"].clone()), (70.into(), 66.into()));
    assert_eq!(info[0]["model_digest"].as_str().unwrap(), &digest[..16]);

    let out = d.join("out.png");
    ok_lines(&["decode", "--input", s(&stream), "--output", s(&out), "--model", s(&model)]);
    let p = psnr(&read_image(&input).unwrap(), &read_image(&out).unwrap()).unwrap();
    assert!((p - enc[0]["psnr"].as_f64().unwrap()).abs() < 1e-9);

    // Adaptive mode and a sweep with maps.
    let enc = ok_lines(&[
        "encode", "--input", s(&input), "--output", s(&stream), "--model", s(&model), "--mode", "adaptive",
        "--target-psnr", "25",
    ]);
    assert_eq!(enc[0]["target_psnr"], 25.0);
    let csv = d.join("rd.csv");
    let maps = d.join("maps");
    let sweep = ok_lines(&[
        "sweep", "--corpus", s(&corpus), "--model", s(&model), "--mode", "adaptive", "--params", "20,30", "--csv",
        s(&csv), "--maps-dir", s(&maps),
    ]);
    assert_eq!(sweep.len(), 2);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);
    assert!(std::fs::read(maps.join("img01_30.pgm")).unwrap().starts_with(b"P5\n3 3\n255\n"));

    // A different model is refused with a data error.
    let out = tilecodec(&["decode", "--input", s(&stream), "--output", s(&out), "--model", s(&ctx)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(tilecodec(&["--help"]).status.code(), Some(0));
    assert_eq!(tilecodec(&["--version"]).status.code(), Some(0));
    assert_eq!(tilecodec(&[]).status.code(), Some(1));
    assert_eq!(tilecodec(&["frobnicate"]).status.code(), Some(1));
    let missing = d.join("missing.tnc");
    assert_eq!(tilecodec(&["inspect", "--input", s(&missing)]).status.code(), Some(2));
    let junk = d.join("junk.tnc");
    std::fs::write(&junk, b"not a stream").unwrap();
    let out = tilecodec(&["inspect", "--input", s(&junk)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    // Constant mode needs --k.
    let out = tilecodec(&["encode", "--input", "x.png", "--output", "y", "--model", "m"]);
    assert_eq!(out.status.code(), Some(1));
    // Residual training without a starting model.
    let out = tilecodec(&["train", "--phase", "residual", "--corpus", s(d), "--steps", "1", "--out", "m"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        tilecodec(&["gen-corpus", "--out", s(&d.join("g")), "--count", "1", "--width", "0"]).status.code(),
        Some(1)
    );
}
