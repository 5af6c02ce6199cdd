use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sts_cli::commands::{self, DataSource};
use sts_cli::{RunConfig, RunManifest};
use sts_core::stc::AttentionTrace;
use sts_core::stc::AttentionKind;
use sts_core::trainer::{Checkpoint, EPOCH_LOG_HEADER};

const TOY: &str = "\
seed = 7
grid_rows = 3
grid_cols = 3
n_slots = 200
t_window = 4
d = 4
layers = 1
heads = 2
epochs = 2
batch_size = 32
val_slots = 10
lr = 0.01
windows_per_pass = 32
";

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sts-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn sts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sts")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

#[test]
fn generate_writes_reproducible_files() {
    let dir = scratch("generate");
    let cfg = write_config(&dir, "seed = 3\nn_slots = 300\n");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let o = sts(&["generate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let z = value(&stdout(&o), "zero_ratio");
        assert!((z - 0.727).abs() <= 0.01 + 5e-5, "{z}");
    }
    for f in [commands::EVENTS_FILE, commands::GRAPH_FILE, "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let sparse = write_config(&dir, "seed = 3\nn_slots = 300\ntarget_zero_ratio = 0.887\n");
    let o = sts(&["generate", "--config", s(&sparse), "--out", s(&dir.join("c"))]);
    assert!((value(&stdout(&o), "zero_ratio") - 0.887).abs() <= 0.01 + 5e-5);
}

#[test]
fn generated_events_train_like_the_in_memory_data() {
    let dir = scratch("events");
    let cfg = write_config(&dir, TOY);
    let gen = dir.join("gen");
    assert!(sts(&["generate", "--config", s(&cfg), "--out", s(&gen)]).status.success());
    let from_file = dir.join("file");
    let in_memory = dir.join("mem");
    let o = sts(&[
        "train",
        "--config",
        s(&cfg),
        "--events",
        s(&gen.join(commands::EVENTS_FILE)),
        "--graph",
        s(&gen.join(commands::GRAPH_FILE)),
        "--out",
        s(&from_file),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sts(&["train", "--config", s(&cfg), "--out", s(&in_memory)]).status.success());
    assert_eq!(
        std::fs::read(from_file.join(commands::CHECKPOINT_FILE)).unwrap(),
        std::fs::read(in_memory.join(commands::CHECKPOINT_FILE)).unwrap()
    );
    let m = RunManifest::parse(&std::fs::read_to_string(from_file.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.inputs.len(), 2);
    assert_eq!(m.command, "train");
}

#[test]
fn train_eval_round_trip() {
    let dir = scratch("train");
    let cfg = write_config(&dir, TOY);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let o = sts(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = std::fs::read_to_string(a.join(commands::EPOCH_LOG_FILE)).unwrap();
    assert_eq!(log.lines().next(), Some(EPOCH_LOG_HEADER));
    assert_eq!(log.lines().count(), 3);
    for f in [commands::CHECKPOINT_FILE, commands::EPOCH_LOG_FILE, "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let ck = Checkpoint::load(&a.join(commands::CHECKPOINT_FILE)).unwrap();
    let ev = dir.join("eval");
    let o = sts(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&a.join(commands::CHECKPOINT_FILE)),
        "--split",
        "val",
        "--out",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(ev.join(commands::METRICS_FILE)).unwrap();
    assert_eq!(text, stdout(&o));
    assert!((value(&text, "mae") - ck.best_val_mae.unwrap()).abs() < 5e-5);

    // Re-running from the manifest repeats the run.
    let again = dir.join("again");
    let manifest = a.join("manifest.json");
    assert!(sts(&["train", "--config", s(&manifest), "--out", s(&again)]).status.success());
    assert_eq!(
        std::fs::read(a.join(commands::CHECKPOINT_FILE)).unwrap(),
        std::fs::read(again.join(commands::CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn eval_zero_baseline_is_the_closed_form() {
    let dir = scratch("baseline");
    let cfg = write_config(&dir, TOY);
    let o = sts(&["eval", "--config", s(&cfg), "--baseline", "zero", "--out", s(&dir)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rc = RunConfig::parse(TOY).unwrap();
    let data = commands::load_data(&rc, &DataSource::default()).unwrap();
    let ds = sts_core::trainer::make_windows(&data.x, &rc.train).unwrap();
    let (mut sum, mut sq, mut n, mut nz) = (0.0, 0.0, 0usize, 0usize);
    for i in ds.indices(sts_core::trainer::Split::Test) {
        let slot = ds.target_slot(i);
        for r in 0..data.x.n_regions() {
            for c in 0..data.x.n_categories() {
                let v = data.x.get(r, slot, c);
                sum += v;
                sq += v * v;
                n += 1;
                nz += usize::from(v > 0.0);
            }
        }
    }
    assert!((value(&text, "mae") - sum / n as f64).abs() < 5e-5);
    assert!((value(&text, "rmse") - (sq / n as f64).sqrt()).abs() < 5e-5);
    assert!((value(&text, "mae_star") - sum / nz as f64).abs() < 5e-5);
}

#[test]
fn eval_rejects_mismatched_region_count() {
    let dir = scratch("mismatch");
    let cfg = write_config(&dir, TOY);
    assert!(sts(&["train", "--config", s(&cfg), "--out", s(&dir)]).status.success());
    let graph = dir.join("g.txt");
    std::fs::write(&graph, "grid 2 2\n").unwrap();
    let o = sts(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&dir.join(commands::CHECKPOINT_FILE)),
        "--graph",
        s(&graph),
        "--out",
        s(&dir.join("e")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_regions"));
}

#[test]
fn no_mtp_checkpoint_has_no_exposure_head() {
    let dir = scratch("nomtp");
    let cfg = write_config(&dir, &format!("{TOY}ablation = -MTP\n"));
    assert!(sts(&["train", "--config", s(&cfg), "--out", s(&dir)]).status.success());
    let ck = Checkpoint::load(&dir.join(commands::CHECKPOINT_FILE)).unwrap();
    assert!(!ck.params.names().iter().any(|n| n.contains("exposure")));
}

#[test]
fn ablate_has_five_rows_and_matches_standalone_training() {
    let dir = scratch("ablate");
    let rc = RunConfig::parse(TOY).unwrap();
    let rows = commands::cmd_ablate(&rc, &DataSource::default(), &dir).unwrap();
    let csv = std::fs::read_to_string(dir.join(commands::ABLATION_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["none", "-MSA", "-TRR", "-DSA", "-MTP"]);

    let run = commands::cmd_train(&rc, &DataSource::default(), &dir.join("t")).unwrap();
    let test = run.dataset.indices(sts_core::trainer::Split::Test);
    let m = sts_core::trainer::evaluate(&run.outcome.model, &run.outcome.params, &run.dataset, &test, 32).unwrap();
    assert_eq!(rows[0].metrics, m);
}

#[test]
fn sparsity_rows_follow_factor_order() {
    let dir = scratch("sparsity");
    let cfg = write_config(&dir, TOY);
    let o = sts(&["sparsity", "--config", s(&cfg), "--factors", "1,2,4", "--out", s(&dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["1", "2", "4"]);
    let ratios: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[1] <= w[0]));
    let o = sts(&["sparsity", "--config", s(&cfg), "--factors", "0", "--out", s(&dir)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_flags_a_corrupted_rule() {
    let dir = scratch("gradcheck");
    let cfg = write_config(&dir, "grid_rows = 2\ngrid_cols = 2\nt_window = 3\nd = 4\nheads = 2\nlayers = 1\n");
    let o = sts(&["gradcheck", "--config", s(&cfg), "--out", s(&dir)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("layer0.msa"));
    let o = sts(&["gradcheck", "--config", s(&cfg), "--out", s(&dir), "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(3));

    let no_mtp = write_config(&dir, "grid_rows = 2\ngrid_cols = 2\nt_window = 3\nd = 4\nheads = 2\nlayers = 1\nablation = -MTP\n");
    assert!(sts(&["gradcheck", "--config", s(&no_mtp), "--out", s(&dir)]).status.success());

    let big = write_config(&dir, "grid_rows = 3\ngrid_cols = 3\nt_window = 3\n");
    let o = sts(&["gradcheck", "--config", s(&big), "--out", s(&dir)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn attention_export_is_normalized_and_parses_back() {
    let dir = scratch("attention");
    let cfg = write_config(&dir, TOY);
    assert!(sts(&["train", "--config", s(&cfg), "--out", s(&dir)]).status.success());
    let o = sts(&[
        "export-attention",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&dir.join(commands::CHECKPOINT_FILE)),
        "--out",
        s(&dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.join(commands::ATTENTION_FILE)).unwrap();
    let trace = AttentionTrace::parse_csv(&text).unwrap();
    for (key, sum) in trace.row_sums() {
        assert!((sum - 1.0).abs() < 1e-8, "{key:?} sums to {sum}");
    }
    let g = sts_core::RegionGraph::grid(3, 3).unwrap();
    for r in trace.rows.iter().filter(|r| r.kind == AttentionKind::Spatial) {
        assert!(r.query_index == r.key_index || g.is_adjacent(r.query_index, r.key_index));
    }
    let mut again = Vec::new();
    trace.write_csv(&mut again).unwrap();
    assert_eq!(String::from_utf8(again).unwrap(), text);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = scratch("codes");
    let cfg = write_config(&dir, "epohcs = 3\n");
    assert_eq!(sts(&["train", "--config", s(&cfg), "--out", s(&dir)]).status.code(), Some(2));
    let events = dir.join("e.csv");
    std::fs::write(&events, "when,where,what,how\n").unwrap();
    let good = write_config(&dir, TOY);
    let o = sts(&["train", "--config", s(&good), "--events", s(&events), "--out", s(&dir)]);
    assert_eq!(o.status.code(), Some(1));
    let o = sts(&["eval", "--config", s(&good), "--out", s(&dir)]);
    assert_eq!(o.status.code(), Some(2));
    let diverge = write_config(&dir, &format!("{TOY}lr = 1e300\n").replace("lr = 0.01\n", ""));
    let o = sts(&["train", "--config", s(&diverge), "--out", s(&dir)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}
