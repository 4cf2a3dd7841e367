use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfe_core::pipeline::{ExperimentConfig, LfeReport};

const SMALL_SPEC: &str = r#"
seed = 5
train_speakers = 4
train_utterances = 4
train_frames = 300
test_speakers = 3
test_utterances = 3
test_frames = 200

[[languages]]
name = "aa"
family = "north"
generator = "alpha"

[[languages]]
name = "bb"
family = "south"
generator = "beta"

[[languages]]
name = "cc"
family = "north"
generator = "gamma"

[[accents]]
language = "aa"
accent = "bb"

[ubm]
components = 8
iterations = 4
seed = 5

[tv]
rank = 4
iterations = 3
seed = 5

[stats]
n_resamples = 500
seed = 5
"#;

fn lfe_kit(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lfe-kit"));
    cmd.args(args).env_remove("LFE_CACHE_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let exp = dir.join("exp");
    let o = lfe_kit(&["synth", "--spec", spec.to_str().unwrap(), "--out", exp.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    exp.join("config.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_outputs_and_rerun_is_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let out = dir.path().join("out");
    let o = lfe_kit(&["run", "--config", s(&cfg), "--threads", "2", "--out", s(&out)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["report.csv", "report.md", "fig_abx.svg", "fig_family.svg", "report.json", "provenance.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let first = std::fs::read(out.join("report.json")).unwrap();
    let report: LfeReport = serde_json::from_slice(&first).unwrap();
    assert_eq!(report.pairs.len(), 3);
    assert_eq!(report.accented.len(), 1);
    assert!(stdout(&o).contains("aa-bb: LFE"));

    let o = lfe_kit(&["run", "--config", s(&cfg), "--out", s(&out), "--formats", "csv"], &[]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("stages computed: 0"), "{}", stdout(&o));
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), first);

    // single stages read the same cache entries
    let o = lfe_kit(&["abx", "--config", s(&cfg), "--test", "aa:bb", "--train", "bb"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cond = report
        .conditions
        .iter()
        .find(|c| c.test_set == "aa:bb" && c.train_language == "bb")
        .unwrap();
    assert!(stdout(&o).contains(&format!("error_rate\t{:.6}", cond.error_rate)));

    let o = lfe_kit(&["lfe", "--config", s(&cfg), "--pair", "aa,cc"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = report.pair("aa", "cc").unwrap();
    assert!(stdout(&o).contains(&format!("LFE {:+.2}%", row.score.lfe_percent)), "{}", stdout(&o));

    let rendered = dir.path().join("rendered");
    let o = lfe_kit(
        &["report", "--input", s(&out.join("report.json")), "--out", s(&rendered), "--formats", "markdown"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(rendered.join("report.md")).unwrap(),
        std::fs::read_to_string(out.join("report.md")).unwrap()
    );
}

#[test]
fn stage_subcommands_report_cache_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let o = lfe_kit(&["features", "--config", s(&cfg)], &[]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("aa: train 16 utterances / 4800 frames"), "{}", stdout(&o));
    assert!(stdout(&o).contains("accent bb 9 / 1800"));

    let o = lfe_kit(&["train-ubm", "--config", s(&cfg), "--language", "bb"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let key_line = stdout(&o).lines().find(|l| l.starts_with("key ")).unwrap().to_string();
    let key = key_line.split_whitespace().nth(1).unwrap();
    assert!(dir.path().join(format!("exp/cache/ubm/{key}.lfeg")).is_file());

    let o = lfe_kit(&["train-tv", "--config", s(&cfg), "--language", "bb", "--threads", "1"], &[]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("rank 4, 8 components x dim 12"));

    let tsv = dir.path().join("iv.tsv");
    let o = lfe_kit(&["extract", "--config", s(&cfg), "--test", "cc", "--train", "bb", "--out", s(&tsv)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&tsv).unwrap();
    assert_eq!(text.lines().count(), 1 + 9);
    assert_eq!(text.lines().next().unwrap().split('\t').count(), 2 + 4);
}

#[test]
fn cache_dir_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    // the override cache starts empty, so copy the synthetic features over
    let other = dir.path().join("other-cache");
    std::fs::create_dir_all(other.join("features")).unwrap();
    for e in std::fs::read_dir(dir.path().join("exp/cache/features")).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), other.join("features").join(e.file_name())).unwrap();
    }
    let o = lfe_kit(&["train-ubm", "--config", s(&cfg), "--language", "aa"], &[("LFE_CACHE_DIR", &other)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_dir(other.join("ubm")).unwrap().count() == 1);
    assert!(!dir.path().join("exp/cache/ubm").exists());
}

#[test]
fn failures_exit_nonzero_with_stage_tags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    std::fs::remove_file(dir.path().join("exp/manifests/cc_test.jsonl")).unwrap();
    let o = lfe_kit(&["run", "--config", s(&cfg)], &[]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("stage `manifest` failed for cc"), "{err}");
    assert!(err.contains("cc_test.jsonl"));

    let o = lfe_kit(&["run", "--config", s(&dir.path().join("absent.toml"))], &[]);
    assert!(!o.status.success());
    let o = lfe_kit(&["run", "--config", s(&cfg), "--formats", "pdf"], &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("pdf"));
    let o = lfe_kit(&["lfe", "--config", s(&cfg), "--pair", "aa"], &[]);
    assert!(!o.status.success());
    let o = lfe_kit(&["frobnicate"], &[]);
    assert!(!o.status.success());
}

#[test]
fn shipped_presets_parse() {
    let presets = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    for (name, k, r, n) in [("exp1", 128, 150, 3), ("exp2", 2048, 400, 9)] {
        let text = std::fs::read_to_string(presets.join(format!("{name}.toml"))).unwrap();
        let cfg = ExperimentConfig::from_toml_str(&text, &presets).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ubm_components().unwrap(), k);
        assert_eq!(cfg.tv_rank().unwrap(), r);
        assert_eq!(cfg.languages.len(), n);
        assert_eq!(n * (n - 1) / 2, if n == 9 { 36 } else { 3 });
    }
}
