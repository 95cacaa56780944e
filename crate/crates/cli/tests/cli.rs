use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
out = "unused"
splits = [2]
methods = ["supervised", "mt", "ce-mt-u", "ce-mt-b"]
seeds = [0, 1]

[dataset]
seed = 3
count = 8
shape = [16, 16]
dims = 2
n_test = 2

[train]
iterations = 4
schedule_step = 2

[train.batch]
patch_shape = [16, 16]
labeled = 1
unlabeled = 1
"#;

fn cemt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cemt"))
        .arg("--spec")
        .arg(dir.join("spec.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("CEMT_OUT")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), TINY).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = setup();
    let o = cemt(dir.path(), &["train", "--method", "ce-mt", "--split", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn training_without_a_manifest_fails_with_status_one() {
    let dir = setup();
    let o = cemt(dir.path(), &["train", "--method", "supervised", "--split", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest"), "{}", stderr(&o));
}

#[test]
fn generate_data_is_idempotent_and_catches_tampering() {
    let dir = setup();
    let o = cemt(dir.path(), &["generate-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("17 files written, 0 verified"), "{}", stdout(&o));
    let volumes = fs::read_dir(dir.path().join("out/data/volumes")).unwrap().count();
    assert_eq!(volumes, 16);

    let manifest = dir.path().join("out/data/manifest.json");
    let before = fs::metadata(&manifest).unwrap().modified().unwrap();
    let o = cemt(dir.path(), &["generate-data"]);
    assert!(stdout(&o).contains("0 files written, 17 verified"), "{}", stdout(&o));
    assert_eq!(fs::metadata(&manifest).unwrap().modified().unwrap(), before);

    let victim = dir.path().join("out/data/volumes/case_0004_image.vseg");
    let mut bytes = fs::read(&victim).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    fs::write(&victim, bytes).unwrap();
    let o = cemt(dir.path(), &["generate-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
}

#[test]
fn out_dir_comes_from_the_environment_first() {
    let dir = setup();
    let env_out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_cemt"))
        .args(["--spec"])
        .arg(dir.path().join("spec.toml"))
        .arg("--out")
        .arg(dir.path().join("from_flag"))
        .arg("generate-data")
        .env("CEMT_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("data/manifest.json").exists());
    assert!(!dir.path().join("from_flag").exists());
}

#[test]
fn train_evaluate_and_compare() {
    let dir = setup();
    assert!(cemt(dir.path(), &["generate-data"]).status.success());

    let o = cemt(dir.path(), &["train", "--method", "mt", "--split", "2", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("out/runs/mt/split2/seed1");
    for f in ["trace.csv", "metrics.csv", "metrics.json", "timing.json", "m1.ckpt", "teacher.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trained = stdout(&o);

    let o = cemt(dir.path(), &["evaluate", "--method", "mt", "--split", "2", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), trained.lines().next().unwrap().to_string() + "\n");
    assert_eq!(
        fs::read(run.join("evaluation.csv")).unwrap(),
        fs::read(run.join("metrics.csv")).unwrap()
    );

    let o = cemt(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("missing cells:"));
    assert_eq!(text.matches("split2 seed").count(), 7);

    let o = cemt(dir.path(), &["compare"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = dir.path().join("out/compare");
    let table = fs::read_to_string(cmp.join("table.txt")).unwrap();
    assert!(!table.contains("missing"));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, m) in rows.iter().zip(["supervised", "mt", "ce-mt-u", "ce-mt-b"]) {
        assert!(row.starts_with(m) && row.contains("2/4") && row.contains('±'), "{row}");
    }
    assert_eq!(fs::read_to_string(cmp.join("table.csv")).unwrap().lines().count(), 5);
    let svg = fs::read_to_string(cmp.join("weights_split2.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("ce-mt-b r1"));
    assert!(cmp.join("dice_split2.svg").exists());

    let snapshot: Vec<Vec<u8>> = ["table.csv", "table.txt", "dice_split2.svg", "weights_split2.svg"]
        .iter()
        .map(|f| fs::read(cmp.join(f)).unwrap())
        .collect();
    let o = cemt(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again: Vec<Vec<u8>> = ["table.csv", "table.txt", "dice_split2.svg", "weights_split2.svg"]
        .iter()
        .map(|f| fs::read(cmp.join(f)).unwrap())
        .collect();
    assert!(snapshot == again, "cached comparison is not byte-identical");
}

#[test]
fn single_method_gives_one_row() {
    let dir = setup();
    let spec = TINY.replace(
        r#"methods = ["supervised", "mt", "ce-mt-u", "ce-mt-b"]"#,
        r#"methods = ["ce-mt-b"]"#,
    );
    fs::write(dir.path().join("spec.toml"), spec).unwrap();
    let o = cemt(dir.path(), &["compare"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("out/compare/table.txt")).unwrap();
    assert_eq!(table.lines().count(), 2);
}
