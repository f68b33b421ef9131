use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lobeseg::volume::{LabelVolume, ScalarVolume, Shape3};
use lobeseg::vvol::{read_volume, write_volume, Volume};

fn lobeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lobeseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_labels(path: &Path, dims: [usize; 3], data: Vec<u8>) {
    let shape = Shape3::new(dims[0], dims[1], dims[2]).unwrap();
    let labels = LabelVolume::inferred(shape, data).unwrap();
    write_volume(path, &Volume::Label(labels)).unwrap();
}

fn small_spec(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(&path, r#"{"dims": [12, 12, 12]}"#).unwrap();
    path
}

fn small_data(dir: &Path, cases: usize) -> PathBuf {
    let spec = small_spec(dir);
    let data = dir.join("data");
    let o = lobeseg(&[
        "gen-data",
        "--spec",
        p(&spec),
        "--out",
        p(&data),
        "--cases",
        &cases.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

#[test]
fn gen_data_writes_two_files_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = lobeseg(&["gen-data", "--out", p(&out), "--cases", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(printed.len(), 10);
    for line in &printed {
        assert!(Path::new(line).exists(), "{line}");
    }
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 10);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = lobeseg(&[
            "gen-data",
            "--spec",
            p(&spec),
            "--out",
            p(out),
            "--cases",
            "2",
        ]);
        assert!(o.status.success());
    }
    for name in [
        "case_0_img.vvol",
        "case_0_lab.vvol",
        "case_1_img.vvol",
        "case_1_lab.vvol",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
}

#[test]
fn gen_data_rejects_zero_cases() {
    let dir = tempfile::tempdir().unwrap();
    let o = lobeseg(&["gen-data", "--out", p(dir.path()), "--cases", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_rejects_unknown_spec_keys() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"size": 12}"#).unwrap();
    let o = lobeseg(&[
        "gen-data",
        "--spec",
        p(&spec),
        "--out",
        p(dir.path()),
        "--cases",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("size"), "{}", stderr(&o));
}

#[test]
fn fissure_gt_line_case() {
    let dir = tempfile::tempdir().unwrap();
    let (lab, out) = (dir.path().join("l.vvol"), dir.path().join("f.vvol"));
    write_labels(&lab, [1, 1, 4], vec![1, 1, 2, 2]);
    let o = lobeseg(&[
        "fissure-gt",
        "--labels",
        p(&lab),
        "--radius",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), p(&out));
    let f = read_volume(&out).unwrap().into_labels().unwrap();
    assert_eq!(f.data(), &[0, 1, 1, 0]);
}

#[test]
fn fissure_gt_single_lobe_is_background() {
    let dir = tempfile::tempdir().unwrap();
    let (lab, out) = (dir.path().join("l.vvol"), dir.path().join("f.vvol"));
    write_labels(&lab, [3, 3, 3], vec![4; 27]);
    let o = lobeseg(&["fissure-gt", "--labels", p(&lab), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let f = read_volume(&out).unwrap().into_labels().unwrap();
    assert!(f.data().iter().all(|&v| v == 0));
}

#[test]
fn fissure_gt_missing_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.vvol");
    let o = lobeseg(&[
        "fissure-gt",
        "--labels",
        p(&missing),
        "--out",
        p(&dir.path().join("f.vvol")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.vvol"), "{}", stderr(&o));
}

#[test]
fn fissure_gt_rejects_bad_labels() {
    let dir = tempfile::tempdir().unwrap();
    let lab = dir.path().join("l.vvol");
    write_labels(&lab, [1, 1, 2], vec![1, 9]);
    let o = lobeseg(&[
        "fissure-gt",
        "--labels",
        p(&lab),
        "--out",
        p(&dir.path().join("f.vvol")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn write_config(dir: &Path, steps: usize) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        format!(r#"{{"train": {{"total_steps": {steps}, "learning_rate": 0.05}}}}"#),
    )
    .unwrap();
    path
}

#[test]
fn train_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), 1);
    let cfg = write_config(dir.path(), 6);
    let mut summaries = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let o = lobeseg(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--arm",
            "ace+reg",
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let printed = stdout(&o);
        for name in [
            "steps.csv",
            "summary.json",
            "timing.json",
            "metrics.csv",
            "case_0_pred.vvol",
        ] {
            assert!(printed.contains(name), "{printed}");
            assert!(out.join(name).exists());
        }
        let steps = std::fs::read_to_string(out.join("steps.csv")).unwrap();
        assert_eq!(steps.lines().count(), 7);
        summaries.push((std::fs::read(out.join("summary.json")).unwrap(), steps));
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn train_rejects_unknown_arm() {
    let dir = tempfile::tempdir().unwrap();
    let o = lobeseg(&[
        "train",
        "--data",
        p(dir.path()),
        "--arm",
        "dice-only",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for arm in ["baseline-ce", "ace", "ace+dice-fissure", "ace+reg"] {
        assert!(err.contains(arm), "{err}");
    }
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"total_steps": 0}}"#).unwrap();
    let o = lobeseg(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(dir.path()),
        "--arm",
        "ace",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_without_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lobeseg(&[
        "train",
        "--data",
        p(&dir.path().join("empty")),
        "--arm",
        "ace",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn ablation_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), 2);
    let cfg = write_config(dir.path(), 3);
    let out = dir.path().join("abl");
    let o = lobeseg(&[
        "ablation",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("DSC(%),LU,LL,RU,RM,RL,Mean\n"), "{csv}");
    assert!(
        csv.contains("\nASSD,LOF,RHF,ROF-upper,ROF-lower,Mean,\n"),
        "{csv}"
    );
}

#[test]
fn eval_identical_volumes_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), 1);
    let gt = data.join("case_0_lab.vvol");
    let out = dir.path().join("m.csv");
    let o = lobeseg(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lobe_rows: Vec<&str> = csv.lines().filter(|l| l.contains(",lobe,")).collect();
    assert_eq!(lobe_rows.len(), 5);
    for row in lobe_rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[4].parse::<f64>().unwrap(), 1.0, "{row}");
        assert_eq!(cells[5].parse::<f64>().unwrap(), 0.0, "{row}");
    }
}

#[test]
fn eval_disjoint_voxels_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, out) = (
        dir.path().join("a.vvol"),
        dir.path().join("b.vvol"),
        dir.path().join("m.csv"),
    );
    let mut pa = vec![0u8; 8];
    let mut pb = vec![0u8; 8];
    pa[0] = 1;
    pb[7] = 1;
    write_labels(&a, [2, 2, 2], pa);
    write_labels(&b, [2, 2, 2], pb);
    let o = lobeseg(&["eval", "--pred", p(&a), "--gt", p(&b), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let row = csv.lines().find(|l| l.contains(",lobe,1,")).unwrap();
    assert_eq!(row.split(',').nth(4).unwrap().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn eval_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.vvol"), dir.path().join("b.vvol"));
    write_labels(&a, [2, 2, 2], vec![1; 8]);
    write_labels(&b, [2, 2, 3], vec![1; 12]);
    let o = lobeseg(&[
        "eval",
        "--pred",
        p(&a),
        "--gt",
        p(&b),
        "--out",
        p(&dir.path().join("m.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_ops() {
    let o = lobeseg(&["gradcheck", "--op", "ace", "--trials", "3", "--seed", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("ace: 3 trials"));
    let o = lobeseg(&["gradcheck", "--op", "fgm", "--trials", "3", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = lobeseg(&["gradcheck", "--op", "softmax"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_slice_scalar_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let shape = Shape3::new(3, 2, 2).unwrap();
    let constant = dir.path().join("c.vvol");
    write_volume(&constant, &Volume::Scalar(ScalarVolume::filled(shape, 0.4))).unwrap();
    let out = dir.path().join("c.pgm");
    let o = lobeseg(&[
        "export-slice",
        "--volume",
        p(&constant),
        "--axis",
        "z",
        "--index",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    let pixels = &bytes[b"P5\n3 2\n255\n".len()..];
    assert_eq!(pixels.len(), 6);
    assert!(pixels.iter().all(|&v| v == pixels[0]));

    let lab = dir.path().join("l.vvol");
    write_labels(&lab, [3, 1, 1], vec![0, 1, 2]);
    let out = dir.path().join("l.pgm");
    let o = lobeseg(&[
        "export-slice",
        "--volume",
        p(&lab),
        "--axis",
        "z",
        "--index",
        "0",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&out).unwrap();
    let pixels = &bytes[bytes.len() - 3..];
    assert!(pixels[0] != pixels[1] && pixels[1] != pixels[2] && pixels[0] != pixels[2]);

    let o = lobeseg(&[
        "export-slice",
        "--volume",
        p(&lab),
        "--axis",
        "z",
        "--index",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
