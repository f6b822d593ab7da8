use std::path::Path;

use mpsclip::backbone::{decode_bank, encode_bank, gen_corpus, Corpus, Split};
use mpsclip::diagnostics::gradient_suite;
use mpsclip::retrieval::{ReportTable, RetrievalReport};
use mpsclip::trainer::{ablate, ablation_markdown, train, write_ablation_csv, Checkpoint, Grid, HISTORY_COLUMNS};
use mpsclip::{Error, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::OutDir;
use crate::plot::line_chart;
use crate::{AblateArgs, Cli, Command, CorpusArgs, EvalArgs, GradcheckArgs, ReportArgs, TrainArgs};

const GRAD_TOLERANCE: f64 = 1e-4;

/// Runs the parsed command. `Ok(false)` means the command completed but its
/// check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

fn config_value(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn load_corpus(out: &mut OutDir, path: &Path) -> Result<Corpus> {
    let bytes = out.read_input(path)?;
    Corpus::from_bank(&decode_bank(&bytes)?)
}

/// Loads `--corpus` when given, otherwise generates from the resolved config.
/// The config echo is updated to the corpus actually used.
fn corpus_for(out: &mut OutDir, file: Option<&Path>, cfg: &mut RunConfig) -> Result<Corpus> {
    match file {
        Some(path) => {
            let corpus = load_corpus(out, path)?;
            cfg.corpus = corpus.config.clone();
            Ok(corpus)
        }
        None => gen_corpus(&cfg.corpus),
    }
}

fn gen_data(cli: &Cli, args: &CorpusArgs) -> Result<bool> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), None, cli.seed, |c, _| args.apply(c))?;
    let corpus = gen_corpus(&cfg.corpus)?;
    let mut out = OutDir::create(&cli.out)?;
    let path = out.write("corpus.mpsf", &encode_bank(&corpus.to_bank())?)?;
    out.write("config.json", cfg.to_json()?.as_bytes())?;
    let counts: Vec<String> =
        Split::ALL.iter().map(|&s| format!("{} {}", s.name(), corpus.indices(s).len())).collect();
    println!("wrote {} ({} images, {})", path.display(), corpus.len(), counts.join(", "));
    out.finish("gen-data", Some(cfg.seed), &config_value(&cfg)?)?;
    Ok(true)
}

fn resolve_train(cli: &Cli, args: &TrainArgs) -> Result<RunConfig> {
    RunConfig::resolve(cli.config.as_deref(), args.preset, cli.seed, |c, t| args.apply(c, t))
}

fn history_csv(ckpt: &Checkpoint<f64>) -> String {
    let mut s = format!("epoch,{}\n", HISTORY_COLUMNS.join(","));
    for (e, row) in ckpt.history.iter().enumerate() {
        let values: Vec<String> = row.0.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{},{}\n", e + 1, values.join(",")));
    }
    s
}

fn table_csv(table: &ReportTable) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    Ok(buf)
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<bool> {
    let mut cfg = resolve_train(cli, args)?;
    let mut out = OutDir::create(&cli.out)?;
    let corpus = corpus_for(&mut out, args.corpus.as_deref(), &mut cfg)?;
    let ckpt = train::<f64>(&corpus, &cfg.train)?;
    out.write("checkpoint.mpsf", &ckpt.to_bytes()?)?;
    out.write("history.csv", history_csv(&ckpt).as_bytes())?;
    out.write("config.json", cfg.to_json()?.as_bytes())?;

    println!("epoch   total    base     mpc      mpt      val mR");
    for (e, r) in ckpt.history.iter().enumerate() {
        let v = r.0;
        println!("{:>5}   {:.4}   {:.4}   {:.4}   {:.4}   {:.2}", e + 1, v[0], v[1], v[2], v[3], v[10]);
    }
    let mut table = ReportTable::new();
    table.push("val (final)", ckpt.model.evaluate(&corpus, Split::Val)?);
    table.push("test (final)", ckpt.model.evaluate(&corpus, Split::Test)?);
    table.push(format!("test (best val, epoch {})", ckpt.best_epoch + 1), ckpt.best_model().evaluate(&corpus, Split::Test)?);
    out.write("report.csv", &table_csv(&table)?)?;
    print!("\n{}", table.to_markdown());
    out.finish("train", Some(cfg.seed), &config_value(&cfg)?)?;
    Ok(true)
}

/// The stored row and a fresh report agree when every recall and mR rounds
/// to the same single-precision value.
fn matches_history(row: &[f64; 11], report: &RetrievalReport) -> bool {
    let fresh = report.recalls().into_iter().chain([report.mr]);
    row[4..].iter().zip(fresh).all(|(&stored, v)| stored == v as f32 as f64)
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<bool> {
    let mut out = OutDir::create(&cli.out)?;
    let ckpt = Checkpoint::<f64>::from_bank(&decode_bank(&out.read_input(&args.checkpoint)?)?)?;
    let corpus = match &args.corpus {
        Some(p) => load_corpus(&mut out, p)?,
        None => gen_corpus(&ckpt.corpus)?,
    };
    let split = args.split.into();
    let model = if args.best { ckpt.best_model() } else { ckpt.model.clone() };
    let report = model.evaluate(&corpus, split)?;
    let label = format!("{} ({})", split.name(), if args.best { "best" } else { "final" });
    let mut table = ReportTable::new();
    table.push(label, report.clone());
    out.write("eval.csv", &table_csv(&table)?)?;
    print!("{}", table.to_markdown());

    let mut consistent = true;
    if split == Split::Val && !ckpt.history.is_empty() {
        let epoch = if args.best { ckpt.best_epoch } else { ckpt.history.len() - 1 };
        consistent = matches_history(&ckpt.history[epoch].0, &report);
        println!(
            "history epoch {}: {}",
            epoch + 1,
            if consistent { "matches" } else { "MISMATCH" }
        );
    }
    let config = json!({ "corpus": ckpt.corpus, "train": ckpt.model.config, "split": split.name(), "best": args.best });
    out.finish("eval", Some(ckpt.model.config.seed), &config)?;
    if !consistent {
        eprintln!("error: evaluation differs from the values recorded in the checkpoint");
    }
    Ok(consistent)
}

fn gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<bool> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), None, cli.seed, |_, _| {})?;
    if args.seeds == 0 {
        return Err(Error::Argument("--seeds must be at least 1".into()));
    }
    let checks = gradient_suite(cfg.seed, args.seeds)?;
    let mut out = OutDir::create(&cli.out)?;
    println!("{:<24} {:>14} {:>9} {:>8}", "module", "worst rel err", "compared", "skipped");
    let mut all = true;
    for c in &checks {
        let ok = c.passes(GRAD_TOLERANCE);
        all &= ok;
        println!(
            "{:<24} {:>14.3e} {:>9} {:>8}  {}",
            c.module,
            c.worst_rel_error,
            c.compared,
            c.skipped,
            if ok { "ok" } else { "FAIL" }
        );
    }
    out.write("gradcheck.json", (serde_json::to_string_pretty(&checks)? + "\n").as_bytes())?;
    let config = json!({ "seed": cfg.seed, "seeds": args.seeds, "tolerance": GRAD_TOLERANCE });
    out.finish("gradcheck", Some(cfg.seed), &config)?;
    Ok(all)
}

fn ablate_cmd(cli: &Cli, args: &AblateArgs) -> Result<bool> {
    let grid: Grid = args.grid.parse()?;
    let mut cfg = resolve_train(cli, &args.train)?;
    let mut out = OutDir::create(&cli.out)?;
    let corpus = corpus_for(&mut out, args.train.corpus.as_deref(), &mut cfg)?;
    let rows = ablate(&corpus, &cfg.train, &grid.rows(cfg.train.flags), args.jobs)?;
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv)?;
    let markdown = ablation_markdown(&rows);
    out.write(&format!("ablation_{}.csv", args.grid), &csv)?;
    out.write(&format!("ablation_{}.md", args.grid), markdown.as_bytes())?;
    out.write("config.json", cfg.to_json()?.as_bytes())?;
    print!("{markdown}");
    let mut config = config_value(&cfg)?;
    config["grid"] = json!(args.grid);
    config["jobs"] = json!(args.jobs);
    out.finish("ablate", Some(cfg.seed), &config)?;
    Ok(true)
}

fn read_csv(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().map_err(|e| Error::Argument(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec.map_err(|e| Error::Argument(e.to_string()))?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cell = |s: &str| s.replace('|', "\\|");
    let mut s = format!("| {} |\n", header.iter().map(|h| cell(h)).collect::<Vec<_>>().join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.iter().map(|c| cell(c)).collect::<Vec<_>>().join(" | ")));
    }
    s
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Result<Vec<f64>> {
    let idx = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Argument(format!("history.csv has no column {name:?}")))?;
    rows.iter()
        .map(|r| {
            r.get(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Argument(format!("bad value in column {name:?}")))
        })
        .collect()
}

fn report(cli: &Cli, args: &ReportArgs) -> Result<bool> {
    let input = args.input.clone().unwrap_or_else(|| cli.out.clone());
    let mut files: Vec<_> = std::fs::read_dir(&input)
        .map_err(|e| Error::Argument(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Argument(format!("no CSV files in {}", input.display())));
    }
    let mut out = OutDir::create(&cli.out)?;
    let mut doc = String::from("# Report\n");
    for path in &files {
        let bytes = out.read_input(path)?;
        let (header, rows) = read_csv(&bytes)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
        doc.push_str(&format!("\n## {name}\n\n"));
        if name == "history" {
            let losses: Vec<(&str, Vec<f64>)> = ["total", "base", "mpc", "mpt"]
                .iter()
                .map(|&c| Ok((c, column(&header, &rows, c)?)))
                .collect::<Result<_>>()?;
            out.write("loss.svg", line_chart("Train loss", "epoch", &losses).as_bytes())?;
            let mr = vec![("val mR", column(&header, &rows, "mR")?)];
            out.write("mr.svg", line_chart("Validation mean recall", "epoch", &mr).as_bytes())?;
            doc.push_str("![train loss](loss.svg)\n\n![validation mR](mr.svg)\n\n");
        }
        doc.push_str(&markdown_table(&header, &rows));
    }
    out.write("report.md", doc.as_bytes())?;
    println!("wrote {}", out.path("report.md").display());
    let config = json!({ "input": input.display().to_string() });
    out.finish("report", None, &config)?;
    Ok(true)
}
