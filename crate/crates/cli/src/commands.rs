use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use amc_core::benchmark::{build_benchmark, parse_genres_tsv, read_benchmark, write_benchmark, MovieInput};
use amc_core::evaluation::{expected_random_accuracy, majority_baseline, EvalReport};
use amc_core::learners::{few_shot_evaluate, train_with, Model, TrainConfig};
use amc_core::screenplay::{parse_script_bytes, split_scenes, ParsedMovie, DEFAULT_MAX_BYTES};
use amc_core::synth::{generate_corpus, SynthConfig};

use crate::cli::{BuildArgs, EvalArgs, ParseArgs, Preset, SynthArgs, TrainArgs};
use crate::{CliError, CliResult};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_context(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_context(dir))?;
    }
    fs::write(path, bytes).map_err(io_context(path))
}

pub fn default_benchmark(root: &Path, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| root.join("benchmark"))
}

/// Script files of `dir`, sorted; hidden entries and subdirectories are left out.
fn script_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_context(dir))? {
        let entry = entry.map_err(io_context(dir))?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        if entry.file_type().is_ok_and(|t| t.is_dir()) {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

pub fn parse(args: &ParseArgs) -> CliResult<()> {
    let files = script_entries(&args.input)?;
    let mut lines = String::new();
    let mut parsed = 0;
    for path in &files {
        let title = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let elements = match parse_script_bytes(&bytes, DEFAULT_MAX_BYTES) {
            Ok(el) => el,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let scenes = split_scenes(&elements);
        if scenes.is_empty() {
            log::warn!("{}: no scenes found", path.display());
        }
        let movie = ParsedMovie { title, elements, scenes };
        lines.push_str(&serde_json::to_string(&movie).map_err(|e| CliError::Internal(e.to_string()))?);
        lines.push('\n');
        parsed += 1;
    }
    write_file(&args.out, lines.as_bytes())?;
    log::info!("parsed {parsed} of {} files into {}", files.len(), args.out.display());
    Ok(())
}

pub fn read_parsed(path: &Path) -> CliResult<Vec<ParsedMovie>> {
    let text = fs::read_to_string(path).map_err(io_context(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| usage(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn build(args: &BuildArgs, root: &Path) -> CliResult<()> {
    let parsed = read_parsed(&args.parsed)?;
    let genres = match &args.genres {
        Some(p) => parse_genres_tsv(&fs::read_to_string(p).map_err(io_context(p))?)?,
        None => Default::default(),
    };
    let movies: Vec<MovieInput> = parsed.iter().map(|m| MovieInput::from_parsed(m, &genres)).collect();
    let bench = build_benchmark(&movies, args.split, args.train_frac, args.seed)?;
    let out = default_benchmark(root, &args.out);
    write_benchmark(&bench, &out)?;
    print!("{}", bench.stats);
    log::info!("benchmark written to {}", out.display());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.marker_prob) {
        return Err(usage("--marker-prob must lie in [0, 1]"));
    }
    let cfg = SynthConfig {
        movies: args.movies,
        scenes_per_movie: args.scenes,
        marker_prob: args.marker_prob,
        seed: args.seed,
        ..SynthConfig::default()
    };
    fs::create_dir_all(&args.out).map_err(io_context(&args.out))?;
    for (id, script) in generate_corpus(&cfg) {
        write_file(&args.out.join(format!("{id}.txt")), script.as_bytes())?;
    }
    log::info!("wrote {} scripts to {}", cfg.movies, args.out.display());
    Ok(())
}

pub fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let base = match args.preset {
        Preset::Standard => TrainConfig::new(args.method),
        Preset::Desk => TrainConfig::desk_scale(args.method),
    };
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_context(p))?;
            base.with_overrides(&text)?
        }
        None => base,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(init) = &args.init {
        cfg.init_from = Some(init.to_string_lossy().into_owned());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs, root: &Path) -> CliResult<()> {
    let cfg = train_config(args)?;
    let bench_dir = default_benchmark(root, &args.benchmark);
    let bench = read_benchmark(&bench_dir)?;
    let init = match &cfg.init_from {
        Some(p) => Some(Model::load(Path::new(p))?),
        None => None,
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| root.join("runs").join(cfg.method.as_str()));
    fs::create_dir_all(&out).map_err(io_context(&out))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_context(&metrics_path))?);
    let outcome = train_with(&bench, &cfg, init.as_ref(), |row, model| {
        serde_json::to_writer(&mut metrics, row)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        if args.save_every_epoch {
            model.save(&out.join(format!("epoch-{:03}.ckpt", row.epoch)))?;
        }
        Ok(())
    })?;
    let ckpt = out.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    let summary = serde_json::json!({
        "method": cfg.method,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "best_epoch": outcome.best_epoch,
        "fingerprint": outcome.model.fingerprint(),
        "benchmark": bench_dir,
    });
    write_file(&out.join("train.json"), format!("{summary:#}\n").as_bytes())?;
    println!(
        "{} trained for {} epochs; kept epoch {}; checkpoint {}",
        cfg.method,
        cfg.epochs,
        outcome.best_epoch,
        ckpt.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs, root: &Path) -> CliResult<()> {
    let model = Model::load(&args.ckpt).map_err(|e| usage(format!("{}: {e}", args.ckpt.display())))?;
    let bench = read_benchmark(&default_benchmark(root, &args.benchmark))?;
    let tasks = bench.tasks(args.split);
    if tasks.iter().all(|t| t.test_instances.is_empty()) {
        return Err(usage(format!("the {} split has no test instances", args.split.as_str())));
    }
    let mut predictions = Vec::new();
    for t in tasks {
        predictions.extend(few_shot_evaluate(&model, t)?);
    }
    let report = EvalReport::new(&predictions, tasks)?;
    let out = args.out.clone().unwrap_or_else(|| {
        args.ckpt
            .with_file_name(format!("eval-{}.json", args.split.as_str()))
    });
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&out, (json + "\n").as_bytes())?;
    if let Some(p) = &args.predictions {
        let mut lines = String::new();
        for pr in &predictions {
            lines.push_str(&serde_json::to_string(pr).map_err(|e| CliError::Internal(e.to_string()))?);
            lines.push('\n');
        }
        write_file(p, lines.as_bytes())?;
    }
    println!("{} on {} ({} tasks)", model.method(), args.split.as_str(), tasks.len());
    print!("{}", report.render(args.by));
    println!(
        "baselines: random {:.1}, majority {:.1}",
        expected_random_accuracy(tasks)? * 100.0,
        majority_baseline(tasks)? * 100.0
    );
    Ok(())
}
