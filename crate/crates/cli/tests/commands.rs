use std::path::Path;
use std::process::{Command, Output};

use glr_core::dataset::{read_dataset, read_embedding_file};
use glr_core::head::checkpoint::load_head;
use glr_core::head::synth::{gen_synthetic, SynthConfig};
use glr_core::head::train::{epoch_orders, training_class_weights};
use glr_core::head::{weighted_ce_loss, CosineHead, SplitTag};
use glr_core::recipe::{derive_seed, run_stage, DatasetView, RecipeOptions, RecipeStage};
use glr_core::{l2_normalize, top_k_search};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn glr")
}

fn glr(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "glr {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn small_dataset(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen",
        "--classes",
        "10",
        "--dim-in",
        "8",
        "--seed",
        "3",
        "--out",
        "data",
    ];
    args.extend_from_slice(extra);
    glr(dir, &args);
}

#[test]
fn eval_prints_two_query_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "pred.csv", "id,images\nq1,a x b\nq2,y c\n");
    write(tmp.path(), "truth.csv", "id,images\nq1,a b\nq2,c\n");
    assert_eq!(
        glr(
            tmp.path(),
            &["eval", "--pred", "pred.csv", "--truth", "truth.csv"]
        ),
        "0.666667\n"
    );
}

#[test]
fn eval_rejects_unknown_query_and_bad_header() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "truth.csv", "id,images\nq1,a b\n");
    write(tmp.path(), "pred.csv", "id,images\nq1,a\nq9,b\n");
    assert!(!run(
        tmp.path(),
        &["eval", "--pred", "pred.csv", "--truth", "truth.csv"]
    )
    .status
    .success());
    write(tmp.path(), "pred.csv", "query,images\nq1,a\n");
    assert!(!run(
        tmp.path(),
        &["eval", "--pred", "pred.csv", "--truth", "truth.csv"]
    )
    .status
    .success());
}

#[test]
fn pipeline_runs_on_defaults_and_self_retrieves() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &[]);
    glr(
        dir,
        &[
            "train",
            "--data",
            "data",
            "--epochs",
            "2",
            "--emb-dim",
            "8",
            "--out",
            "head.glrh",
        ],
    );
    assert!(dir.join("head.trace.csv").exists());
    glr(
        dir,
        &[
            "embed",
            "--ckpt",
            "head.glrh",
            "--features",
            "data/index.glre",
            "--out",
            "x.glre",
        ],
    );
    glr(
        dir,
        &[
            "knn", "--query", "x.glre", "--index", "x.glre", "--out", "self.csv",
        ],
    );
    for row in csv_rows(&dir.join("self.csv")) {
        let first = row[1].split(' ').next().unwrap();
        assert_eq!(first, row[0]);
    }
    let index = read_embedding_file(&dir.join("x.glre")).unwrap();
    for list in top_k_search(&index, &index, 1).unwrap() {
        assert_eq!(list.neighbors[0].distance, 0.0);
    }

    glr(
        dir,
        &[
            "embed",
            "--ckpt",
            "head.glrh",
            "--features",
            "data/query.glre",
            "--out",
            "q.glre",
        ],
    );
    glr(
        dir,
        &[
            "knn", "--query", "q.glre", "--index", "x.glre", "--out", "pred.csv",
        ],
    );
    let printed = glr(
        dir,
        &["eval", "--pred", "pred.csv", "--truth", "data/truth.csv"],
    );
    let map: f64 = printed.trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(printed.trim().split('.').nth(1).unwrap().len(), 6);
}

#[test]
fn knn_k_flag_limits_list_length() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &[]);
    glr(
        dir,
        &[
            "knn",
            "--query",
            "data/query.glre",
            "--index",
            "data/index.glre",
            "--k",
            "2",
            "--out",
            "p.csv",
        ],
    );
    for row in csv_rows(&dir.join("p.csv")) {
        assert_eq!(row[1].split(' ').count(), 2);
    }
}

#[test]
fn embed_ids_selects_and_orders() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &[]);
    glr(
        dir,
        &[
            "train",
            "--data",
            "data",
            "--emb-dim",
            "4",
            "--out",
            "h.glrh",
        ],
    );
    let index = read_embedding_file(&dir.join("data/index.glre")).unwrap();
    let picked = [index.ids()[3].clone(), index.ids()[0].clone()];
    write(dir, "ids.txt", &format!("{}\n{}\n", picked[0], picked[1]));
    glr(
        dir,
        &[
            "embed",
            "--ckpt",
            "h.glrh",
            "--features",
            "data/index.glre",
            "--ids",
            "ids.txt",
            "--out",
            "e.glre",
        ],
    );
    let out = read_embedding_file(&dir.join("e.glre")).unwrap();
    assert_eq!(out.ids(), &picked);
    assert_eq!(out.dim(), 4);
    assert!(out.is_normalized());

    write(dir, "ids.txt", "no-such-id\n");
    let fail = run(
        dir,
        &[
            "embed",
            "--ckpt",
            "h.glrh",
            "--features",
            "data/index.glre",
            "--ids",
            "ids.txt",
            "--out",
            "e.glre",
        ],
    );
    assert!(!fail.status.success());
}

#[test]
fn identity_ensemble_keeps_neighbor_order() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &[]);
    let raw = read_embedding_file(&dir.join("data/index.glre")).unwrap();
    glr(
        dir,
        &[
            "ensemble",
            "--in",
            "data/index.glre:1.0",
            "--out",
            "ens.glre",
        ],
    );
    glr(
        dir,
        &[
            "knn", "--query", "ens.glre", "--index", "ens.glre", "--out", "ens.csv",
        ],
    );

    let normalized = l2_normalize(&raw).unwrap();
    glr_core::dataset::write_embedding_file(&dir.join("norm.glre"), &normalized).unwrap();
    glr(
        dir,
        &[
            "knn",
            "--query",
            "norm.glre",
            "--index",
            "norm.glre",
            "--out",
            "norm.csv",
        ],
    );
    assert_eq!(
        std::fs::read(dir.join("ens.csv")).unwrap(),
        std::fs::read(dir.join("norm.csv")).unwrap()
    );
}

#[test]
fn ensemble_concatenates_and_rejects_bad_members() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &[]);
    glr(
        dir,
        &[
            "ensemble",
            "--in",
            "data/index.glre:1.0",
            "--in",
            "data/index.glre:0.5",
            "--out",
            "e.glre",
        ],
    );
    assert_eq!(read_embedding_file(&dir.join("e.glre")).unwrap().dim(), 16);
    // Query and index ids are disjoint.
    let disjoint = run(
        dir,
        &[
            "ensemble",
            "--in",
            "data/index.glre:1",
            "--in",
            "data/query.glre:1",
            "--out",
            "e.glre",
        ],
    );
    assert!(!disjoint.status.success());
    let negative = run(
        dir,
        &["ensemble", "--in", "data/index.glre:-1", "--out", "e.glre"],
    );
    assert!(!negative.status.success());
}

#[test]
fn gen_without_noise_keeps_labels_true() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), &["--label-noise", "0.0"]);
    let data = read_dataset(&tmp.path().join("data")).unwrap();
    assert_eq!(data.train.labels(), data.train.true_labels());
}

#[test]
fn small_classes_give_no_validation_sample() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(
        tmp.path(),
        &[
            "--samples-min",
            "2",
            "--samples-max",
            "6",
            "--clean-fraction",
            "1.0",
        ],
    );
    let data = read_dataset(&tmp.path().join("data")).unwrap();
    // Same generator settings as the command, to learn each class's size.
    let synth = gen_synthetic(&SynthConfig {
        num_classes: 10,
        d_in: 8,
        samples_min: 2,
        samples_max: 6,
        clean_fraction: 1.0,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut sizes = [0usize; 10];
    for &c in synth.samples.true_labels() {
        sizes[c] += 1;
    }
    assert!(sizes.iter().any(|&n| n < 4) && sizes.iter().any(|&n| n >= 4));
    for (c, &n) in sizes.iter().enumerate() {
        let in_val = data.val.true_labels().contains(&c);
        assert_eq!(in_val, n >= 4, "class {c} with {n} samples");
    }
}

#[test]
fn single_stage_training_lowers_validation_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &["--label-noise", "0.0"]);
    glr(
        dir,
        &[
            "train",
            "--data",
            "data",
            "--epochs",
            "20",
            "--emb-dim",
            "8",
            "--out",
            "h.glrh",
            "--trace",
            "t.csv",
        ],
    );
    let rows = csv_rows(&dir.join("t.csv"));
    assert_eq!(rows.len(), 21);
    let val = |r: &Vec<String>| r[2].parse::<f64>().unwrap();
    assert!(val(rows.last().unwrap()) < val(&rows[0]));
}

#[test]
fn train_rejects_class_count_change_without_reinit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &[]);
    glr(
        dir,
        &[
            "train",
            "--data",
            "data",
            "--view",
            "clean-only",
            "--emb-dim",
            "4",
            "--out",
            "c.glrh",
        ],
    );
    let fail = run(
        dir,
        &[
            "train", "--data", "data", "--init", "c.glrh", "--out", "n.glrh",
        ],
    );
    assert!(!fail.status.success());
    glr(
        dir,
        &[
            "train", "--data", "data", "--init", "c.glrh", "--reinit", "--out", "n.glrh",
        ],
    );
}

#[test]
fn transfer_stage_starts_from_previous_projection() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &["--label-noise", "0.2"]);
    glr(
        dir,
        &[
            "recipe",
            "--data",
            "data",
            "--epochs",
            "2",
            "--emb-dim",
            "6",
            "--seed",
            "5",
            "--out",
            "r",
        ],
    );
    let stage1 = load_head(std::fs::File::open(dir.join("r/stage1.glrh")).unwrap()).unwrap();
    let data = read_dataset(&dir.join("data")).unwrap().recipe_data();
    let options = RecipeOptions {
        emb_dim: 6,
        seed: 5,
        ..RecipeOptions::default()
    };
    let stage2 = RecipeStage::new(DatasetView::FullNoisy, 1.0, true, 2).unwrap();
    let outcome = run_stage(Some(&stage1), &data, &stage2, &options, 1).unwrap();
    let bits = |h: &CosineHead<f32>| h.proj().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&outcome.initial_head), bits(&stage1));
    assert_ne!(outcome.initial_head.num_classes(), stage1.num_classes());
    // The recipe's own stage 2 is the same computation.
    let stage2_file = load_head(std::fs::File::open(dir.join("r/stage2.glrh")).unwrap()).unwrap();
    assert_eq!(bits(&stage2_file), bits(&outcome.result.head));
}

#[test]
fn doubled_clean_weight_adds_clean_contribution_to_first_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &["--label-noise", "0.2"]);
    let first_batch = |weight: &str| -> f64 {
        let name = format!("w{weight}");
        write(
            dir,
            &format!("{name}.csv"),
            &format!("dataset_view,clean_sample_weight,reinit_classifier,epochs\nfull-noisy,{weight},false,1\n"),
        );
        glr(
            dir,
            &[
                "recipe",
                "--data",
                "data",
                "--stages",
                &format!("{name}.csv"),
                "--emb-dim",
                "6",
                "--batch",
                "16",
                "--seed",
                "8",
                "--out",
                &name,
            ],
        );
        csv_rows(&dir.join(name).join("summary.csv"))[0][6]
            .parse()
            .unwrap()
    };
    let (one, two) = (first_batch("1.0"), first_batch("2.0"));

    // Recompute the clean samples' share of the first batch from scratch.
    let data = read_dataset(&dir.join("data")).unwrap();
    let train = &data.train;
    let classes = data.meta.num_classes;
    let head = CosineHead::<f32>::init(train.d_in(), 6, classes, derive_seed(8, 0)).unwrap();
    let class_w = training_class_weights(train, classes).unwrap();
    let order = &epoch_orders(train.len(), 1, derive_seed(8, 2))[0];
    let batch = &order[..16];
    let mut clean = 0.0;
    for &i in batch {
        if train.split_tags()[i] == SplitTag::Clean {
            let logits = head.forward(train.feature(i)).unwrap().logits;
            clean += weighted_ce_loss(&logits, train.labels()[i], &class_w, 1.0).unwrap();
        }
    }
    let clean = clean / batch.len() as f64;
    assert!(clean > 0.0);
    assert!(
        (two - (one + clean)).abs() <= 1e-12 * two,
        "{two} vs {one} + {clean}"
    );
}

#[test]
fn recipe_writes_per_stage_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, &[]);
    glr(
        dir,
        &[
            "recipe",
            "--data",
            "data",
            "--epochs",
            "1",
            "--emb-dim",
            "4",
            "--out",
            "r",
        ],
    );
    for n in 1..=3 {
        assert!(dir.join(format!("r/stage{n}.glrh")).exists());
        assert_eq!(
            csv_rows(&dir.join(format!("r/stage{n}_trace.csv"))).len(),
            2
        );
    }
    let summary = csv_rows(&dir.join("r/summary.csv"));
    let views: Vec<&str> = summary.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(views, ["clean-only", "full-noisy", "full-noisy"]);
    assert_eq!(summary[2][2], "2");
    assert_eq!(summary[1][3], "true");
}
