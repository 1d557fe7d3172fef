use std::fs;
use std::path::{Path, PathBuf};

use dmc_cli::config::{merge, parse_config};
use dmc_cli::manifest::manifest_path;
use dmc_cli::{run, RunManifest, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn dmc(args: &[&str]) -> i32 {
    run(std::iter::once("dmc").chain(args.iter().copied()))
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(dmc(&["--help"]), EXIT_OK);
    assert_eq!(dmc(&["gen", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(dmc(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(dmc(&[]), EXIT_USAGE);
    assert_eq!(dmc(&["train-baseline", "--kind", "cubic"]), EXIT_USAGE);
}

#[test]
fn missing_input_is_an_operational_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.txt");
    assert_eq!(
        dmc(&[
            "tokenize",
            "--captions",
            "/nonexistent/c.jsonl",
            "--out",
            &s(&out)
        ]),
        EXIT_FAILURE
    );
    assert!(!out.exists());
}

#[test]
fn config_file_parsing() {
    let e = parse_config("# comment\n\nmin_count = 2\n--out=x.txt\n").unwrap();
    assert_eq!(
        e,
        [
            ("min-count".into(), "2".into()),
            ("out".into(), "x.txt".into())
        ]
    );
    assert!(parse_config("novalue\n").is_err());
    assert!(parse_config("config = other\n").is_err());
}

#[test]
fn flags_win_over_config() {
    let args: Vec<std::ffi::OsString> = ["dmc", "tokenize", "--min-count=3"].map(Into::into).into();
    let merged = merge(
        args,
        &[("min-count".into(), "9".into()), ("out".into(), "v".into())],
    );
    let merged: Vec<_> = merged.iter().map(|a| a.to_str().unwrap()).collect();
    assert_eq!(merged, ["dmc", "tokenize", "--min-count=3", "--out", "v"]);
}

#[test]
fn config_values_reach_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (c, e) = (dir.path().join("c.jsonl"), dir.path().join("e.bin"));
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "n-images = 7\nvocab_size = 40\nseed = 5\n").unwrap();
    let code = dmc(&[
        "synth",
        "--config",
        &s(&cfg),
        "--captions",
        &s(&c),
        "--embeddings",
        &s(&e),
        "--seed",
        "6",
    ]);
    assert_eq!(code, EXIT_OK);
    let m = RunManifest::read(manifest_path(&c)).unwrap();
    assert_eq!(m.seed, 6);
    assert_eq!(m.params["n_images"], 7);
    assert_eq!(m.params["vocab_size"], 40);
    assert_eq!(fs::read_to_string(&c).unwrap().lines().count(), 35);

    fs::write(&cfg, "no-such-option = 1\n").unwrap();
    assert_eq!(
        dmc(&[
            "synth",
            "--config",
            &s(&cfg),
            "--captions",
            &s(&c),
            "--embeddings",
            &s(&e)
        ]),
        EXIT_USAGE
    );
}

struct Run {
    dir: PathBuf,
}

impl Run {
    fn p(&self, name: &str) -> String {
        s(&self.dir.join(name))
    }

    fn ok(&self, args: &[&str]) {
        assert_eq!(dmc(args), EXIT_OK, "{args:?}");
    }

    fn corpus<'a>(&'a self, extra: &[&'a str]) -> Vec<String> {
        let mut v = vec![
            "--captions".into(),
            self.p("c.jsonl"),
            "--embeddings".into(),
            self.p("e.bin"),
        ];
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    }

    /// synth → tokenize → train-pv → gen → split → train-ffnn → eval.
    fn pipeline(&self, threads: &str) {
        let t = ["--threads", threads, "--seed", "11"];
        let with = |head: &[&str], corpus: bool, tail: &[&str]| {
            let mut args: Vec<String> = head.iter().map(|x| x.to_string()).collect();
            if corpus {
                args.extend(self.corpus(&[]));
            }
            args.extend(tail.iter().map(|x| x.to_string()));
            args.extend(t.iter().map(|x| x.to_string()));
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            self.ok(&refs);
        };
        with(
            &["synth", "--n-images", "120", "--vocab-size", "60"],
            true,
            &[],
        );
        with(
            &[
                "tokenize",
                "--captions",
                &self.p("c.jsonl"),
                "--out",
                &self.p("v.txt"),
            ],
            false,
            &[],
        );
        with(
            &[
                "train-pv",
                "--dim",
                "16",
                "--grid",
                "16:3,6",
                "--out",
                &self.p("pv.bin"),
            ],
            true,
            &[],
        );
        with(
            &[
                "gen",
                "--pv",
                &self.p("pv.bin"),
                "--top-n",
                "40",
                "--out",
                &self.p("ds.jsonl"),
            ],
            true,
            &[],
        );
        with(
            &[
                "split",
                "--dataset",
                &self.p("ds.jsonl"),
                "--dev-images",
                "20",
                "--test-images",
                "20",
            ],
            false,
            &["--out", &self.p("sp.jsonl")],
        );
        with(
            &[
                "train-ffnn",
                "--dataset",
                &self.p("sp.jsonl"),
                "--d-w",
                "16",
                "--h1",
                "16",
                "--h2",
                "8",
            ],
            true,
            &[
                "--max-steps",
                "300",
                "--eval-every",
                "100",
                "--out",
                &self.p("f.ckpt"),
            ],
        );
        with(
            &[
                "eval",
                "--dataset",
                &self.p("sp.jsonl"),
                "--model",
                &self.p("f.ckpt"),
            ],
            true,
            &["--out", &self.p("report.csv")],
        );
    }
}

const ARTIFACTS: &[&str] = &[
    "c.jsonl",
    "e.bin",
    "v.txt",
    "pv.bin",
    "pv.bin.grid.csv",
    "ds.jsonl",
    "sp.jsonl",
    "f.ckpt",
    "f.ckpt.log.csv",
    "report.csv",
];

#[test]
fn pipeline_is_reproducible_across_runs_and_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = Run {
        dir: a.path().into(),
    };
    let rb = Run {
        dir: b.path().into(),
    };
    ra.pipeline("1");
    rb.pipeline("4");
    for name in ARTIFACTS {
        let (x, y) = (
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
        );
        assert!(x == y, "{name} differs between runs");
        let m = RunManifest::read(manifest_path(&a.path().join(name))).unwrap();
        assert_eq!(m.seed, 11);
        assert!(
            m.outputs.iter().any(|o| o.ends_with(name)),
            "{name}: {:?}",
            m.outputs
        );
    }
    let report = fs::read_to_string(a.path().join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("metric,split,value"));
    let acc: f64 = lines
        .next()
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // Nothing besides the artifacts and their manifests was written.
    let mut expected: Vec<String> = ARTIFACTS
        .iter()
        .flat_map(|n| [n.to_string(), format!("{n}.manifest.json")])
        .collect();
    expected.sort();
    let mut found: Vec<String> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    found.sort();
    assert_eq!(found, expected);

    // Baselines and captioner on the same dataset.
    let r = &ra;
    for kind in ["i2c", "c2i", "bilinear"] {
        let model = r.p(&format!("{kind}.bin"));
        let mut args = vec!["train-baseline".to_string(), "--kind".into(), kind.into()];
        args.extend(r.corpus(&[]));
        for x in [
            "--dataset",
            &r.p("sp.jsonl"),
            "--pv",
            &r.p("pv.bin"),
            "--projection-dim",
            "16",
            "--epochs",
            "3",
            "--out",
            &model,
        ] {
            args.push(x.into());
        }
        r.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        let mut args = vec!["eval".to_string()];
        args.extend(r.corpus(&[]));
        for x in [
            "--dataset",
            &r.p("sp.jsonl"),
            "--model",
            &model,
            "--split",
            "test",
            "--out",
            &r.p("b.csv"),
        ] {
            args.push(x.into());
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(dmc(&refs), EXIT_FAILURE, "--pv is required");
        let mut with_pv = refs.clone();
        let pv = r.p("pv.bin");
        with_pv.extend(["--pv", &pv]);
        r.ok(&with_pv);
    }

    let mut args = vec!["train-vec2seq".to_string()];
    args.extend(r.corpus(&[]));
    for x in [
        "--dataset",
        &r.p("sp.jsonl"),
        "--dim",
        "8",
        "--h1",
        "8",
        "--h2",
        "4",
        "--lambda-gen",
        "1",
        "--max-steps",
        "40",
        "--eval-every",
        "20",
        "--out",
        &r.p("v.ckpt"),
    ] {
        args.push(x.into());
    }
    r.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let log = fs::read_to_string(r.dir.join("v.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let mut args = vec!["eval".to_string()];
    args.extend(r.corpus(&[]));
    for x in [
        "--dataset",
        &r.p("sp.jsonl"),
        "--model",
        &r.p("v.ckpt"),
        "--metrics",
        "accuracy,rouge_l,cider",
        "--out",
        &r.p("v.csv"),
    ] {
        args.push(x.into());
    }
    r.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let rows = fs::read_to_string(r.dir.join("v.csv")).unwrap();
    assert!(
        rows.contains("rouge_l,dev,") && rows.contains("cider,dev,"),
        "{rows}"
    );

    let mut args = vec!["grid-lambda".to_string()];
    args.extend(r.corpus(&[]));
    for x in [
        "--pv",
        &r.p("pv.bin"),
        "--top-n",
        "30",
        "--lambdas",
        "0,0.5,1",
        "--out",
        &r.p("gl.csv"),
    ] {
        args.push(x.into());
    }
    r.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        fs::read_to_string(r.dir.join("gl.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn report_subcommand() {
    use dmc_evalserve::LogEvent;
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut events = Vec::new();
    for (inst, k) in [("a", 3), ("b", 1)] {
        for r in 0..3 {
            events.push(LogEvent::Response {
                rater_id: format!("r{r}"),
                instance_id: inst.into(),
                chosen_index: 0,
                canonical_index: 0,
                permutation_seed: 0,
                correct: r < k,
                at_ms: 0,
            });
        }
    }
    dmc_evalserve::log::write_log(&log, &events).unwrap();
    let out = dir.path().join("rep.json");
    assert_eq!(
        dmc(&["report", "--log", &s(&log), "--out", &s(&out)]),
        EXIT_OK
    );
    let rep: dmc_evalserve::AggregateReport =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rep.total_instances, 2);
    assert_eq!(rep.all_correct.count, 1);
    assert_eq!(rep.at_least_one.count, 2);
    assert_eq!(rep.correct_responses, 4);
}
