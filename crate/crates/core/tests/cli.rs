use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adco::checkpoint::Checkpoint;
use adco::config::ExperimentConfig;
use adco::encoder::MlpEncoder;

const SMALL: &str = "seed = 5
[data]
num_classes = 3
train_per_class = 30
test_per_class = 10
dim = 6
[model]
dims = [6, 12, 4]
[negatives]
k = 48
[train]
epochs = 2
batch_size = 12
[probe]
epochs = 15
knn_k = 5
";

fn adco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adco")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("c.toml");
        std::fs::write(&config, text).unwrap();
        Self { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let o = self.out(out);
        let mut args = vec![cmd, "--config", s(&self.config), "--out", s(&o)];
        args.extend_from_slice(extra);
        adco(&args)
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pretrain_writes_three_artifacts() {
    let f = Fixture::new(SMALL);
    let o = f.run("pretrain", "run", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(f.out("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["checkpoint_final.ckpt", "resolved_config.toml", "train_log.csv"]);
    let log = std::fs::read_to_string(f.out("run").join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss,lr_net,lr_adv,mean_nn_cosine,outlier_count,elapsed_ms,rows_changed,rows_updated\n"));
    assert_eq!(log.lines().count(), 1 + 2 * (90 / 12));
}

#[test]
fn invalid_field_exits_2_and_names_it() {
    let f = Fixture::new(&format!("{SMALL}[loss]\ntau_adv = -1.0\n"));
    let o = f.run("pretrain", "bad", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.tau_adv"), "{}", stderr(&o));
    assert!(!f.out("bad").exists());

    let f = Fixture::new(SMALL);
    for set in ["loss.tau_net=0", "negatives.mode=\"ring\"", "train.batch_size", "model.widths=[1]"] {
        let o = f.run("pretrain", "bad", &["--set", set]);
        assert_eq!(o.status.code(), Some(2), "{set}: {}", stderr(&o));
    }
    assert_eq!(adco(&["pretrain"]).status.code(), Some(2));
    assert_eq!(adco(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn flags_override_config_and_are_recorded() {
    let f = Fixture::new(SMALL);
    let o = f.run("pretrain", "run", &["--seed", "9", "--set", "train.epochs=1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let snap = std::fs::read_to_string(f.out("run").join("resolved_config.toml")).unwrap();
    assert!(snap.contains("# override: seed = 9"));
    assert!(snap.contains("# override: train.epochs = 1"));
    let cfg = ExperimentConfig::from_toml_str(&snap).unwrap();
    assert_eq!((cfg.seed, cfg.train.epochs), (9, 1));
}

#[test]
fn snapshot_rerun_reproduces_log() {
    let f = Fixture::new(SMALL);
    assert_eq!(f.run("pretrain", "a", &["--set", "loss.symmetric=true"]).status.code(), Some(0));
    let snap = f.out("a").join("resolved_config.toml");
    let b = f.out("b");
    let o = adco(&["pretrain", "--config", s(&snap), "--out", s(&b)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for file in ["train_log.csv", "checkpoint_final.ckpt"] {
        assert_eq!(
            std::fs::read(f.out("a").join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn probe_is_idempotent_and_checks_inputs() {
    let f = Fixture::new(SMALL);
    assert_eq!(f.run("pretrain", "run", &[]).status.code(), Some(0));
    let ckpt = f.out("run").join("checkpoint_final.ckpt");
    for out in ["p1", "p2"] {
        let o = f.run("probe", out, &["--checkpoint", s(&ckpt)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let p1 = std::fs::read_to_string(f.out("p1").join("probe.csv")).unwrap();
    assert_eq!(p1, std::fs::read_to_string(f.out("p2").join("probe.csv")).unwrap());
    assert!(p1.contains("top1_accuracy,") && p1.contains("class_2_count,10"));

    let o = f.run("probe", "p3", &["--random-init"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let missing = f.out("nope.ckpt");
    assert_eq!(f.run("probe", "p4", &["--checkpoint", s(&missing)]).status.code(), Some(2));

    let wide = f.out("wide.ckpt");
    Checkpoint {
        encoder: MlpEncoder::init(&[9, 4], 0).unwrap(),
        bank: None,
    }
    .save(&wide)
    .unwrap();
    let o = f.run("probe", "p5", &["--checkpoint", s(&wide)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("expects 9 inputs"), "{}", stderr(&o));
}

#[test]
fn numeric_abort_exits_3_and_keeps_partial_artifacts() {
    let f = Fixture::new(SMALL);
    let o = f.run("pretrain", "boom", &["--set", "optim.net.lr=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    for file in ["resolved_config.toml", "train_log.csv", "checkpoint_partial.ckpt", "abort.txt"] {
        assert!(f.out("boom").join(file).exists(), "{file}");
    }
    Checkpoint::load(&f.out("boom").join("checkpoint_partial.ckpt")).unwrap();
}

#[test]
fn gradcheck_reports_every_family() {
    let f = Fixture::new(SMALL);
    let o = f.run("gradcheck", "g", &["--instances", "5", "--encoder-instances", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(f.out("g").join("gradcheck.csv")).unwrap();
    for fam in ["adversary", "query", "key", "encoder", "alt-loss"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{fam},")) && l.ends_with(",true")), "{fam}");
    }
}

#[test]
fn sweep_emits_one_row_per_k_with_shared_hash() {
    let f = Fixture::new(SMALL);
    let o = f.run("sweep-negatives", "sw", &["--k-list", "16,32,48", "--parallel"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(f.out("sw").join("sweep.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|x| x == name).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let ks: Vec<&str> = rows.iter().map(|r| &r[col("k")]).collect();
    assert_eq!(ks, ["16", "32", "48"]);
    assert!(rows.iter().all(|r| r[col("shared_hash")] == rows[0][col("shared_hash")]));
    assert!(rows.iter().all(|r| &r[col("status")] == "ok"));
    assert!(rows[0][col("config_hash")] != rows[1][col("config_hash")]);
}

#[test]
fn sweep_records_failures_and_continues() {
    let f = Fixture::new(SMALL);
    // A 4-slot queue cannot hold a 12-sample batch.
    let o = f.run("sweep-negatives", "sw", &["--k-list", "4,48", "--set", "negatives.mode=\"fifo\""]);
    assert_eq!(o.status.code(), Some(3));
    let table = std::fs::read_to_string(f.out("sw").join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().contains(",failed,"));
    assert!(table.lines().nth(2).unwrap().contains(",ok,"));
}

#[test]
fn export_labels_bank_rows() {
    let f = Fixture::new(SMALL);
    assert_eq!(f.run("pretrain", "run", &[]).status.code(), Some(0));
    let ckpt = f.out("run").join("checkpoint_final.ckpt");
    let o = f.run("export-embeddings", "emb", &["--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bank = std::fs::read_to_string(f.out("emb").join("embeddings_bank.csv")).unwrap();
    assert_eq!(bank.lines().count(), 48);
    assert!(bank.lines().all(|l| l.ends_with(",-1") && l.split(',').count() == 5));
    let test = std::fs::read_to_string(f.out("emb").join("embeddings_test.csv")).unwrap();
    assert_eq!(test.lines().count(), 30);
}

#[test]
fn bench_baselines_has_three_rows() {
    let f = Fixture::new(SMALL);
    let o = f.run("bench-baselines", "bb", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(f.out("bb").join("baselines.csv")).unwrap();
    let modes: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(modes, ["adversarial", "fifo", "in_batch"]);
}

#[test]
fn csv_data_source() {
    let f = Fixture::new("");
    let write = |name: &str, n: usize| {
        let mut text = String::new();
        for i in 0..n {
            let c = i % 2;
            let x: Vec<String> = (0..4).map(|j| format!("{}", if j == c { 1.0 } else { 0.1 * (i % 5) as f64 })).collect();
            text.push_str(&format!("{},{c}\n", x.join(",")));
        }
        let p = f.out(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let (train, test) = (write("train.csv", 40), write("test.csv", 10));
    let cfg = format!(
        "[data]\ntrain_csv = \"{}\"\ntest_csv = \"{}\"\n[model]\ndims = [4, 8, 3]\n[negatives]\nk = 16\n\
         [train]\nepochs = 2\nbatch_size = 8\n[probe]\nepochs = 10\nknn_k = 3\n",
        s(&train),
        s(&test)
    );
    std::fs::write(&f.config, cfg).unwrap();
    let o = f.run("pretrain", "run", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = f.run("probe", "p", &["--checkpoint", s(&f.out("run").join("checkpoint_final.ckpt"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let bench = ExperimentConfig::load(&root.join("benchmark.toml")).unwrap();
    assert_eq!(bench, ExperimentConfig::default());
    ExperimentConfig::load(&root.join("smoke.toml")).unwrap();
}

#[test]
fn parallel_sweep_matches_serial() {
    let f = Fixture::new(SMALL);
    for (out, extra) in [("par", &["--parallel"][..]), ("ser", &[][..])] {
        let mut args = vec!["--k-list", "16,48"];
        args.extend_from_slice(extra);
        assert_eq!(f.run("sweep-negatives", out, &args).status.code(), Some(0));
    }
    for file in ["sweep.csv", "k_16/train_log.csv", "k_48/checkpoint_final.ckpt"] {
        assert_eq!(
            std::fs::read(f.out("par").join(file)).unwrap(),
            std::fs::read(f.out("ser").join(file)).unwrap(),
            "{file}"
        );
    }
}
