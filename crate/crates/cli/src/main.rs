use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lfe_core::codec::{read_file, write_atomic};
use lfe_core::pipeline::{self, ExperimentConfig, LfeReport, PairResult, RunLog, RunOptions, Stages};
use lfe_core::report::{self, Format};
use lfe_core::synth::{self, SynthSpec};
use lfe_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lfe-kit", version, about = "Language familiarity experiments with i-vectors and machine ABX")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Recompute model, i-vector and ABX stages without touching the cache.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and cache features for every manifest in the config.
    Features(Common),
    /// Train the UBM of one language.
    TrainUbm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        language: String,
    },
    /// Train the UBM and total-variability model of one language.
    TrainTv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        language: String,
    },
    /// Extract i-vectors of a test set (`A` or accented `A:B`) under a model.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test: String,
        #[arg(long)]
        train: String,
        /// Also write the i-vectors as TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ABX error of one condition.
    Abx {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test: String,
        #[arg(long)]
        train: String,
    },
    /// LFE score and permutation test of one pair, `A,B` or accented `A:B,B`.
    Lfe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pair: String,
    },
    /// Render tables and figures from a saved report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Output directory (default: the directory of the input).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv,markdown,svg")]
        formats: String,
    },
    /// Run the full experiment and write the report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "csv,markdown,svg")]
        formats: String,
        /// Output directory (default: output_dir of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic experiment (feature caches, manifests, config).
    Synth {
        /// Synthetic spec (TOML); built-in two-language default when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every seed of the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lfe-kit: error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config)
}

fn options(common: &Common) -> RunOptions {
    RunOptions {
        threads: common.threads,
        no_cache: common.no_cache,
    }
}

/// Opens the stages of `common`'s config and runs `f` on the worker pool.
fn with_stages<T: Send>(common: &Common, f: impl FnOnce(&Stages<'_>) -> Result<T> + Send) -> Result<T> {
    let cfg = load_config(common)?;
    let opts = options(common);
    let log = RunLog::default();
    pipeline::with_threads(common.threads, || {
        let stages = Stages::open(&cfg, &opts, &log)?;
        f(&stages)
    })
}

fn cache_note(stages: &Stages<'_>, stage: &str, key: &str) -> String {
    match stages.cache_path(stage, key) {
        Some(p) => format!("{key} ({})", p.display()),
        None => format!("{key} (not cached)"),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Features(common) => with_stages(&common, |s| {
            for l in s.languages() {
                let frames = |set: &[pipeline::Utterance]| set.iter().map(|u| u.features.n_frames).sum::<usize>();
                let mut line = format!(
                    "{}: train {} utterances / {} frames, test {} / {}",
                    l.name,
                    l.train.len(),
                    frames(&l.train),
                    l.test.len(),
                    frames(&l.test)
                );
                for (accent, set) in &l.accented {
                    write!(line, ", accent {accent} {} / {}", set.len(), frames(set)).unwrap();
                }
                println!("{line}");
            }
            Ok(())
        }),
        Command::TrainUbm { common, language } => with_stages(&common, |s| {
            let (ubm, key) = s.ubm(&language)?;
            println!(
                "ubm {language}: {} components, dim {}, final log-likelihood {:.4}",
                ubm.n_components(),
                ubm.dim(),
                ubm.train_log.last().copied().unwrap_or(f64::NAN)
            );
            println!("key {}", cache_note(s, "ubm", &key));
            Ok(())
        }),
        Command::TrainTv { common, language } => with_stages(&common, |s| {
            let (tv, key) = s.tv(&language)?;
            println!(
                "tv {language}: rank {}, {} components x dim {}, final objective {:.4}",
                tv.rank,
                tv.n_components(),
                tv.dim(),
                tv.train_log.last().copied().unwrap_or(f64::NAN)
            );
            println!("key {}", cache_note(s, "tv", &key));
            Ok(())
        }),
        Command::Extract {
            common,
            test,
            train,
            out,
        } => with_stages(&common, |s| {
            let (ivs, key) = s.ivectors(&test, &train)?;
            let dim = ivs.first().map_or(0, |v| v.w.len());
            println!("Ts({test})Tr({train}): {} i-vectors of dim {dim}", ivs.len());
            println!("key {}", cache_note(s, "ivec", &key));
            if let Some(path) = out {
                let mut tsv = String::from("utterance_id\tspeaker_id");
                for j in 0..dim {
                    write!(tsv, "\tw{j}").unwrap();
                }
                tsv.push('\n');
                for v in &ivs {
                    write!(tsv, "{}\t{}", v.utterance_id, v.speaker_id).unwrap();
                    for x in &v.w {
                        write!(tsv, "\t{x}").unwrap();
                    }
                    tsv.push('\n');
                }
                write_atomic(&path, tsv.as_bytes())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }),
        Command::Abx { common, test, train } => with_stages(&common, |s| {
            print!("{}", s.abx(&test, &train)?.to_report());
            Ok(())
        }),
        Command::Lfe { common, pair } => {
            let (a, b) = pair
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument(format!("--pair `{pair}` is not of the form A,B")))?;
            let row = with_stages(&common, |s| s.pair(a.trim(), b.trim()))?;
            print!("{}", describe_pair(&row));
            Ok(())
        }
        Command::Report { input, out, formats } => {
            let formats = report::parse_formats(&formats)?;
            let bytes = read_file(&input)?;
            let rep: LfeReport = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
                context: input.display().to_string(),
                reason: e.to_string(),
            })?;
            let dir = out.unwrap_or_else(|| input.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            emit(&rep, &formats, &dir)
        }
        Command::Run { common, formats, out } => {
            let formats = report::parse_formats(&formats)?;
            let cfg = load_config(&common)?;
            let log = RunLog::default();
            let rep = pipeline::run_pipeline_with(&cfg, &options(&common), &log)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            for p in &rep.pairs {
                println!(
                    "{}-{}: LFE {:+.2}%{} (p = {:.4})",
                    p.score.language_a, p.score.language_b, p.score.lfe_percent, p.score.stars, p.test.p_value
                );
            }
            for p in &rep.accented {
                println!(
                    "{}({} accent)-{}: LFE {:+.2}%{} (p = {:.4})",
                    p.score.language_a,
                    p.score.language_b,
                    p.score.language_b,
                    p.score.lfe_percent,
                    p.score.stars,
                    p.test.p_value
                );
            }
            if let Some(o) = &rep.overall {
                println!(
                    "mean LFE {:.2}% [{:.2}, {:.2}]",
                    o.mean_lfe_percent, o.ci.lo, o.ci.hi
                );
            }
            emit(&rep, &formats, &dir)?;
            for p in report::write_provenance(&rep, &dir)? {
                println!("wrote {}", p.display());
            }
            println!(
                "stages computed: {} (0 means every stage came from the cache)",
                log.recomputed()
            );
            Ok(())
        }
        Command::Synth { spec, out, seed } => {
            let mut spec = match spec {
                Some(p) => {
                    let text = String::from_utf8_lossy(&read_file(&p)?).into_owned();
                    toml::from_str::<SynthSpec>(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
                spec.ubm.seed = s;
                spec.tv.seed = s;
                spec.abx.seed = s;
                spec.stats.seed = s;
            }
            let (cfg, path) = synth::synth_experiment(&spec, &out)?;
            println!("{} synthetic languages", cfg.languages.len());
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn emit(rep: &LfeReport, formats: &[Format], dir: &Path) -> Result<()> {
    let emitted = report::emit_report(rep, formats, dir)?;
    for n in &emitted.notices {
        eprintln!("lfe-kit: note: {n}");
    }
    for f in &emitted.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn describe_pair(row: &PairResult) -> String {
    let s = &row.score;
    let mut out = String::new();
    writeln!(out, "pair {}-{} ({})", s.language_a, s.language_b, row.kind).unwrap();
    writeln!(out, "  Ts(A)Tr(A) {:.4}  Ts(B)Tr(B) {:.4}", s.e_aa, s.e_bb).unwrap();
    writeln!(out, "  Ts(A)Tr(B) {:.4}  Ts(B)Tr(A) {:.4}", s.e_ab, s.e_ba).unwrap();
    writeln!(out, "  S_same {:.4}  S_diff {:.4}  LFE {:+.2}%{}", s.s_same, s.s_diff, s.lfe_percent, s.stars).unwrap();
    writeln!(
        out,
        "  {} permutation test: p = {:.4} ({} resamples)",
        if row.test.paired { "paired" } else { "unpaired" },
        row.test.p_value,
        row.test.n_resamples
    )
    .unwrap();
    out
}
