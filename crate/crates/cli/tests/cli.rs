use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hesslens::data::read_report;
use hesslens_cli::commands::{load_model, Context};
use hesslens_cli::config::{ExperimentConfig, Overrides, Stage};
use tempfile::TempDir;

const MODEL: &str = r#"
seed = 3

[model]
name = "cli-mlp"
input = [1, 4, 4]
classes = 3
layers = [
  { kind = "fully_connected", out = 8 },
  { kind = "relu" },
  { kind = "fully_connected", out = 3 },
  { kind = "softmax_ce" },
]

[data]
source = "synthetic"
n_per_class = 20
test_per_class = 8
"#;

const TRAIN: &str = r#"
[train]
batch_size = 12
lr = 0.05
max_epochs = 3

[train.metrics]
b_h = 30
"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(extra: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{MODEL}{TRAIN}{extra}");
        fs::write(dir.path().join("exp.toml"), text).unwrap();
        Run { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("exp.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    fn cmd(&self, sub: &str) -> Output {
        self.cmd_into(sub, &self.out())
    }

    fn cmd_into(&self, sub: &str, out: &Path) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hesslens"))
            .arg(sub)
            .arg(self.config())
            .arg("--out")
            .arg(out)
            .output()
            .unwrap()
    }

    fn ok(&self, sub: &str) {
        let o = self.cmd(sub);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }

    fn context(&self) -> Context {
        let overrides = Overrides {
            seed: None,
            out: Some(self.out()),
        };
        Context::prepare(ExperimentConfig::load(&self.config(), &overrides).unwrap(), Stage::Landscape).unwrap()
    }
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let r = read_report(path).unwrap();
    let j = r.columns.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    r.rows.iter().map(|row| row[j].render().parse().unwrap()).collect()
}

fn rows(path: &Path) -> usize {
    read_report(path).unwrap().rows.len()
}

#[test]
fn train_writes_checkpoint_and_one_row_per_epoch() {
    let run = Run::new("");
    run.ok("train");
    assert!(run.path("checkpoint.bin").exists());
    assert_eq!(column(&run.path("metrics.csv"), "epoch"), vec![1.0, 2.0, 3.0]);
}

#[test]
fn unknown_key_exits_1_and_writes_nothing() {
    let run = Run::new("\n[spectrum]\nk = 2\ncolour = \"blue\"\n");
    let o = run.cmd("train");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    assert!(!run.out().exists());
}

#[test]
fn subsample_larger_than_the_data_exits_1() {
    let run = Run::new("");
    assert_eq!(run.cmd("spectrum").status.code(), Some(1));
}

#[test]
fn invalid_value_exits_1() {
    let run = Run::new("\n[spectrum]\nk = 0\n");
    assert_eq!(run.cmd("spectrum").status.code(), Some(1));
    assert!(!run.out().exists());
}

#[test]
fn replayed_training_is_byte_identical() {
    let run = Run::new("");
    let a = run.dir.path().join("a");
    let b = run.dir.path().join("b");
    assert!(run.cmd_into("train", &a).status.success());
    assert!(run.cmd_into("train", &b).status.success());
    for f in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let run = Run::new("");
    let a = run.dir.path().join("a");
    assert!(run.cmd_into("train", &a).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_hesslens"))
        .args(["train", run.config().to_str().unwrap(), "--seed", "99", "--out"])
        .arg(run.dir.path().join("b"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let b = fs::read(run.dir.path().join("b/checkpoint.bin")).unwrap();
    assert_ne!(fs::read(a.join("checkpoint.bin")).unwrap(), b);
}

#[test]
fn missing_checkpoint_names_the_train_command() {
    let run = Run::new("\n[spectrum]\nb_h = [30]\n");
    let o = run.cmd("spectrum");
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train"));
}

#[test]
fn spectrum_with_k1_writes_a_single_row() {
    let run = Run::new("\n[spectrum]\nk = 1\ntol = 1e-8\nmax_iter = 2000\nb_h = [30]\n");
    run.ok("train");
    run.ok("spectrum");
    assert_eq!(rows(&run.path("spectrum_bh30.csv")), 1);
    assert!(run.path("eigvecs_bh30.bin").exists());
}

#[test]
fn spectrum_writes_one_file_per_subsample_size() {
    let run = Run::new("\n[spectrum]\nk = 2\ntol = 1e-8\nmax_iter = 2000\nb_h = [1, 30, 0]\n");
    run.ok("train");
    run.ok("spectrum");
    let mut names: Vec<String> = fs::read_dir(run.out())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("spectrum_bh"))
        .collect();
    names.sort();
    assert_eq!(names, ["spectrum_bh1.csv", "spectrum_bh30.csv", "spectrum_bh60.csv"]);
}

#[test]
fn unconverged_spectrum_exits_3_and_flags_rows() {
    let run = Run::new("\n[spectrum]\nk = 2\ntol = 1e-14\nmax_iter = 2\nb_h = [30]\n");
    run.ok("train");
    assert_eq!(run.cmd("spectrum").status.code(), Some(3));
    let r = read_report(&run.path("spectrum_bh30.csv")).unwrap();
    let j = r.columns.iter().position(|c| c == "converged").unwrap();
    assert!(r.rows.iter().any(|row| row[j].render() == "false"));
}

#[test]
fn divergence_exits_2_and_keeps_last_good_parameters() {
    let run = Run::new("");
    let text = fs::read_to_string(run.config()).unwrap().replace("lr = 0.05", "lr = 1e9");
    fs::write(run.config(), text).unwrap();
    assert_eq!(run.cmd("train").status.code(), Some(2));
    assert!(run.path("last_good.bin").exists());
    assert!(!run.path("checkpoint.bin").exists());
}

#[test]
fn landscape_without_sidecar_names_the_spectrum_command() {
    let run = Run::new("\n[landscape]\nmode = \"1d\"\n");
    run.ok("train");
    let o = run.cmd("landscape");
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spectrum"));
}

#[test]
fn landscape_at_origin_only_equals_the_base_loss() {
    let run = Run::new("\n[spectrum]\nk = 2\nb_h = [30]\n\n[landscape]\nmode = \"1d\"\ngrid = [0.0]\n");
    run.ok("train");
    run.ok("spectrum");
    run.ok("landscape");
    let path = run.path("landscape_1d.csv");
    assert_eq!(rows(&path), 1);
    let ctx = run.context();
    let base = load_model(&run.path("checkpoint.bin"), &ctx.model).unwrap();
    let train = &ctx.data.train;
    let (loss, _) = base.model.evaluate(&base.theta, &train.inputs, &train.labels).unwrap();
    assert!((column(&path, "train_loss")[0] - loss).abs() <= 1e-12 * loss.max(1.0));
}

#[test]
fn two_dimensional_axes_match_one_dimensional_scans() {
    let grid = "grid = [-0.1, 0.0, 0.1]\ngrid2 = [-0.1, 0.0, 0.1]\n";
    let run = Run::new(&format!("\n[spectrum]\nk = 2\ntol = 1e-8\nb_h = [30]\n\n[landscape]\nmode = \"1d\"\n{grid}"));
    run.ok("train");
    run.ok("spectrum");
    run.ok("landscape");
    let one = column(&run.path("landscape_1d.csv"), "train_loss");
    let text = fs::read_to_string(run.config()).unwrap().replace("mode = \"1d\"", "mode = \"2d\"");
    fs::write(run.config(), text).unwrap();
    run.ok("landscape");
    let path = run.path("landscape_2d.csv");
    let (e1, e2, loss) = (column(&path, "eps1"), column(&path, "eps2"), column(&path, "train_loss"));
    let axis: Vec<f64> = (0..loss.len()).filter(|&i| e2[i] == 0.0).map(|i| loss[i]).collect();
    assert_eq!(axis.len(), one.len());
    for (a, b) in axis.iter().zip(&one) {
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
    }
    assert_eq!(e1.len(), 9);
}

#[test]
fn interpolating_a_checkpoint_with_itself_is_constant() {
    let run = Run::new("\n[landscape]\nmode = \"interpolate\"\nother = \"PLACEHOLDER\"\n");
    let ck = run.path("checkpoint.bin");
    let text = fs::read_to_string(run.config()).unwrap().replace("PLACEHOLDER", ck.to_str().unwrap());
    fs::write(run.config(), text).unwrap();
    run.ok("train");
    run.ok("landscape");
    let loss = column(&run.path("interpolation.csv"), "train_loss");
    assert!(loss.len() > 1);
    assert!(loss.iter().all(|&l| l == loss[0]));
}

const ZERO_ATTACKS: &str = r#"
[attack]
attacks = [
  { kind = "fgsm", epsilon = 0.0 },
  { kind = "fgsm10", epsilon = 0.0 },
  { kind = "l2grad", epsilon = 0.0 },
  { kind = "fhsm", epsilon = 0.0 },
  { kind = "l2hess", epsilon = 0.0 },
]
"#;

#[test]
fn zero_budget_attacks_leave_clean_accuracy() {
    let run = Run::new(ZERO_ATTACKS);
    run.ok("train");
    run.ok("attack");
    let r = read_report(&run.path("attack_matrix.csv")).unwrap();
    assert_eq!(r.rows.len(), 1);
    let cells: Vec<String> = r.rows[0][1..].iter().map(|c| c.render()).collect();
    assert!(cells.iter().all(|c| c == &cells[0]), "{cells:?}");
}

#[test]
fn mean_adversarial_column_matches_recomputation() {
    let run = Run::new("");
    run.ok("train");
    run.ok("attack");
    let r = read_report(&run.path("attack_matrix.csv")).unwrap();
    assert_eq!(r.columns.len(), 8);
    let row: Vec<f64> = r.rows[0][1..].iter().map(|c| c.render().parse().unwrap()).collect();
    let adv = &row[1..row.len() - 1];
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    assert!((mean - row[row.len() - 1]).abs() <= 1e-12);
}

#[test]
fn attack_export_round_trips_through_idx() {
    let run = Run::new("\n[attack]\nattacks = [{ kind = \"fgsm\" }]\nexport = true\n");
    run.ok("train");
    run.ok("attack");
    let dir = fs::read_dir(run.path("adversarial")).unwrap().next().unwrap().unwrap().path();
    let ds = hesslens::data::load_idx(&dir.join("images.idx"), &dir.join("labels.idx")).unwrap();
    assert_eq!(ds.len(), 24);
    let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("fgsm"));
}

#[test]
fn sweep_with_one_batch_size_writes_one_row_and_replays() {
    let run = Run::new("\n[attack]\nattacks = [{ kind = \"fgsm\" }]\n\n[sweep]\nbatch_sizes = [15]\n");
    let a = run.dir.path().join("a");
    let b = run.dir.path().join("b");
    assert!(run.cmd_into("sweep", &a).status.success());
    assert!(run.cmd_into("sweep", &b).status.success());
    assert_eq!(rows(&a.join("sweep.csv")), 1);
    for f in ["sweep.csv", "sweep_legs.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn headers_record_tool_config_and_seed() {
    let run = Run::new("");
    run.ok("train");
    let r = read_report(&run.path("metrics.csv")).unwrap();
    for key in ["tool: hesslens", "config_sha256: ", "seed: 3"] {
        assert!(r.comments.iter().any(|c| c.starts_with(key)), "{key} missing in {:?}", r.comments);
    }
}
