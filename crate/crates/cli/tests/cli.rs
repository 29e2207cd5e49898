use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
[model]
latent_width = 16
enc_blocks = 1
enc_heads = 2
dec_blocks = 1
dec_heads = 2
num_groups = 16
group_size = 32
timesteps = 50
[encoder_train]
epochs = 2
batch_size = 2
checkpoint_every = 2
[decoder_train]
epochs = 2
batch_size = 2
checkpoint_every = 2
[data]
target_points = 512
";

fn pointdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointdiff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pointdiff(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn vertex_count(path: &Path) -> usize {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .unwrap()
        .trim()
        .parse()
        .unwrap()
}

/// Writes the toy config and manifest, then trains both toy checkpoints.
fn trained(dir: &Path) {
    std::fs::write(dir.join("toy.conf"), TOY).unwrap();
    std::fs::write(
        dir.join("m.tsv"),
        "a\tsynth:sphere:seed=1\ttrain\nb\tsynth:torus:seed=2\ttrain\n",
    )
    .unwrap();
    ok(dir, &["train-encoder", "--config", "toy.conf", "--manifest", "m.tsv", "--out", "run"]);
    ok(
        dir,
        &[
            "train-decoder",
            "--config",
            "toy.conf",
            "--manifest",
            "m.tsv",
            "--out",
            "run",
            "--ckpt-encoder",
            "run/encoder.ckpt",
        ],
    );
}

const CKPTS: [&str; 4] = ["--ckpt-encoder", "run/encoder.ckpt", "--ckpt-decoder", "run/decoder.ckpt"];

#[test]
fn synth_then_reconstruct_keeps_arity() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    for f in ["encoder.ckpt", "decoder.ckpt", "encoder_loss.csv", "resolved_config.txt", "version.txt"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(d.join("run/decoder_loss.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,loss\n"));

    ok(d, &["synth", "--kind", "sphere", "--n", "512", "--seed", "1", "--out", "s.ply"]);
    assert_eq!(vertex_count(&d.join("s.ply")), 512);
    let mut args = vec!["reconstruct", "--input", "s.ply"];
    args.extend(CKPTS);
    ok(d, &args);
    assert_eq!(vertex_count(&d.join("s_recon.ply")), 512);
    let first = std::fs::read(d.join("s_recon.ply")).unwrap();
    ok(d, &args);
    assert_eq!(std::fs::read(d.join("s_recon.ply")).unwrap(), first);

    let mut args = vec!["trace", "--steps", "--input", "s.ply", "--out", "frames"];
    args.extend(CKPTS);
    ok(d, &args);
    for k in 0..50 {
        assert!(d.join(format!("frames/step_{k:04}.ply")).exists());
    }
    assert!(!d.join("frames/step_0050.ply").exists());
    assert!(d.join("frames/resolved_config.txt").exists());

    let out = ok(d, &["compress", "--config", "toy.conf", "--input", "s.ply", "--quant-bits", "12"]);
    assert!(out.contains("bpp"), "{out}");
    let mut args = vec!["decompress", "--input", "s.dpc"];
    args.extend(CKPTS);
    ok(d, &args);
    assert_eq!(vertex_count(&d.join("s_decoded.ply")), 512);
}

#[test]
fn eval_of_identical_sets_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::create_dir(d.join("set")).unwrap();
    ok(d, &["synth", "--kind", "cube", "--n", "300", "--seed", "2", "--out", "set/a.ply"]);
    ok(d, &["synth", "--kind", "torus", "--n", "200", "--seed", "3", "--out", "set/b.xyz"]);
    let csv = ok(d, &["eval", "--gen", "set", "--ref", "set"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,cd,hd");
    assert!(lines[1].starts_with("a,") && lines[2].starts_with("b,"));
    assert_eq!(lines[3], "mmd_cd,one_nn_cd,jsd,hd");
    assert!(lines[4].split(',').all(|v| v.parse::<f64>().unwrap() == 0.0), "{}", lines[4]);
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [vec!["bogus"], vec!["reconstruct"], vec!["synth", "--kind", "blob", "--n", "3", "--out", "x.ply"]] {
        let out = pointdiff(tmp.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
    let out = pointdiff(tmp.path(), &["synth", "--kind", "sphere", "--n", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_1_naming_path() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--kind", "sphere", "--n", "512", "--out", "s.ply"]);
    let out = pointdiff(
        d,
        &["reconstruct", "--input", "s.ply", "--ckpt-encoder", "absent.ckpt", "--ckpt-decoder", "absent2.ckpt"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("absent.ckpt"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.conf"), "[model]\nwidth = 3\n").unwrap();
    let out = pointdiff(d, &["synth", "--config", "bad.conf", "--kind", "sphere", "--n", "8", "--out", "s.ply"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("width") && err.contains("line 2"), "{err}");
}
