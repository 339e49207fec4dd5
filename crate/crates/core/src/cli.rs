//! Command-line front end. Each subcommand resolves a [`RunConfig`],
//! writes its snapshot into the run directory and orchestrates one module.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::backbone::Sample;
use crate::cache;
use crate::config::RunConfig;
use crate::dataio::{
    augment_caption, generate_synthetic, histogram_csv, rare_category_stats, rare_stats_csv, read_jsonl,
    token_length_histogram, write_jsonl, DatasetRecord,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::{FeatureMatrix, Modality};
use crate::fusion::{train_fused, FusionInputs, FusionStrategy};
use crate::metrics::{self, cluster_quality, paired_ttest, powerset_report, EvalResult, DEFAULT_TOP_M};
use crate::pipeline::Workspace;
use crate::probe;
use crate::schedule::NoiseMode;
use crate::search::{
    exhaustive_search, grid_table_csv, heatmap_csv, heuristic_search, ConfigPoint, Evaluator, SearchReport,
};

#[derive(Debug, Parser)]
#[command(name = "diffprobe", version, about = "Block-timestep feature probing, fusion and search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Run directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluate grid cells and pairs one at a time.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Text,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Text => Modality::Text,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark (records, catalog, planted optima).
    GenSynthetic {
        #[command(flatten)]
        common: Common,
    },
    /// Append label sentences to every caption of a record file.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
    },
    /// Extract pooled features of one cell for both splits into cache files.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        b: usize,
    },
    /// Train and evaluate a linear probe on one cell.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        b: usize,
    },
    /// Unimodal grids plus local fusion search; optionally the exhaustive oracle.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        exhaustive: bool,
    },
    /// Train fusion strategies on one image/text pair.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Restrict to one strategy; all four otherwise.
        #[arg(long)]
        strategy: Option<String>,
        /// Take the pair from a search report's winner.
        #[arg(long)]
        from_search: Option<PathBuf>,
        #[arg(long, requires_all = ["image_b", "text_t", "text_b"])]
        image_t: Option<usize>,
        #[arg(long)]
        image_b: Option<usize>,
        #[arg(long)]
        text_t: Option<usize>,
        #[arg(long)]
        text_b: Option<usize>,
    },
    /// Heatmap and grid tables from a search report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        search: Option<PathBuf>,
    },
    /// Rare-category and token-length statistics of the training split.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 15)]
        bucket_width: usize,
    },
    /// Paired t-test on two measurement files, or deterministic vs stochastic noising.
    Ttest {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        /// Compare noising modes over every cell of one modality's grid.
        #[arg(long, value_enum, conflicts_with = "a")]
        compare_noise: Option<ModalityArg>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenSynthetic { common }
            | Command::Augment { common, .. }
            | Command::Extract { common, .. }
            | Command::Probe { common, .. }
            | Command::Search { common, .. }
            | Command::Fuse { common, .. }
            | Command::Report { common, .. }
            | Command::Stats { common, .. }
            | Command::Ttest { common, .. } => common,
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
            overrides.push(format!("train.seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir={}", toml::Value::String(out.display().to_string())));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::available()
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Parses and runs one invocation; returns the run directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let common = cli.command.common().clone();
    let cfg = common.resolve()?;
    let out = cfg.out_dir.clone();
    cfg.write_snapshot(&out)?;
    let exec = common.exec();
    match cli.command {
        Command::GenSynthetic { .. } => cmd_gen_synthetic(&cfg, &out),
        Command::Augment { input, catalog, .. } => cmd_augment(&out, &input, &catalog),
        Command::Extract { modality, t, b, .. } => cmd_extract(cfg, &out, modality.into(), t, b, exec),
        Command::Probe { modality, t, b, .. } => cmd_probe(cfg, &out, modality.into(), t, b, exec),
        Command::Search { exhaustive, .. } => cmd_search(cfg, &out, exhaustive, exec),
        Command::Fuse {
            strategy,
            from_search,
            image_t,
            image_b,
            text_t,
            text_b,
            ..
        } => {
            let pair = match (from_search, image_t, image_b, text_t, text_b) {
                (Some(p), ..) => {
                    let report: SearchReport = read_json(&p)?;
                    (report.winner.image, report.winner.text)
                }
                (None, Some(it), Some(ib), Some(tt), Some(tb)) => (
                    ConfigPoint {
                        modality: Modality::Image,
                        t: it,
                        b: ib,
                    },
                    ConfigPoint {
                        modality: Modality::Text,
                        t: tt,
                        b: tb,
                    },
                ),
                _ => return Err(Error::invalid("fuse needs --from-search or all of --image-t/--image-b/--text-t/--text-b")),
            };
            let strategies = match strategy {
                Some(s) => vec![s.parse()?],
                None => FusionStrategy::ALL.to_vec(),
            };
            cmd_fuse(cfg, &out, pair, &strategies, exec)
        }
        Command::Report { search, .. } => {
            let path = search.unwrap_or_else(|| out.join("search_report.json"));
            cmd_report(&out, &path)
        }
        Command::Stats { bucket_width, .. } => cmd_stats(cfg, &out, bucket_width),
        Command::Ttest { a, b, compare_noise, .. } => match (a, b, compare_noise) {
            (Some(a), Some(b), None) => cmd_ttest_files(&out, &a, &b),
            (None, None, Some(m)) => cmd_compare_noise(cfg, &out, m.into(), exec),
            _ => Err(Error::invalid("ttest needs --a and --b, or --compare-noise")),
        },
    }?;
    Ok(out)
}

fn cmd_gen_synthetic(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.synthetic_spec()?;
    let data = generate_synthetic(&spec)?;
    write_jsonl(&out.join("train.jsonl"), &data.train)?;
    write_jsonl(&out.join("val.jsonl"), &data.val)?;
    write_json(&out.join("catalog.json"), &data.catalog)?;
    write_json(&out.join("planted.json"), &data.planted)?;
    write_json(&out.join("synthetic_spec.json"), &spec)
}

fn cmd_augment(out: &Path, input: &Path, catalog_path: &Path) -> Result<()> {
    let records = read_jsonl(input)?;
    let catalog: crate::dataio::ClassCatalog = read_json(catalog_path)?;
    catalog.validate()?;
    let augmented = records
        .iter()
        .map(|r| {
            Ok(DatasetRecord {
                caption: augment_caption(r, &catalog)?,
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&out.join("augmented.jsonl"), &augmented)
}

fn check_point(ws: &Workspace, p: ConfigPoint) -> Result<()> {
    let space = match p.modality {
        Modality::Image => &ws.image_space,
        _ => &ws.text_space,
    };
    if ws.planted.is_some() && space.index_of(p.t, p.b).is_none() {
        return Err(Error::OutOfRange {
            what: "grid cell",
            value: format!("({}, {})", p.t, p.b),
            allowed: format!("timesteps {:?} x blocks {:?}", space.timesteps, space.blocks),
        });
    }
    Ok(())
}

fn cmd_extract(cfg: RunConfig, out: &Path, modality: Modality, t: usize, b: usize, exec: Execution) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    check_point(&ws, ConfigPoint { modality, t, b })?;
    let backbone = ws.backbone(modality)?;
    let c = &ws.config;
    let dir = out.join("features");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (split, records) in [("train", &ws.train), ("val", &ws.val)] {
        let samples: Vec<Sample> = records
            .iter()
            .map(|r| ws.inputs().sample(r, modality, t, b))
            .collect::<Result<_>>()?;
        let features = backbone.extract(&samples, t, b, &ws.schedule, c.noise.mode, c.noise.seed, exec)?;
        cache::write_features(&dir.join(format!("{modality}_t{t}_b{b}_{split}.dfft")), &features)?;
    }
    Ok(())
}

fn metrics_csv(rows: &[(String, &EvalResult)], key: &str) -> String {
    let mut out = format!("{key},{}\n", metrics::TABLE_HEADER);
    for (name, r) in rows {
        out.push_str(&format!("{name},{}\n", r.table_row()));
    }
    out
}

fn cmd_probe(cfg: RunConfig, out: &Path, modality: Modality, t: usize, b: usize, exec: Execution) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    let point = ConfigPoint { modality, t, b };
    check_point(&ws, point)?;
    let ev = ws.evaluator(exec)?;
    let cell = ev.features(point)?;
    let (model, log) = probe::train_probe_array(cell.train.view(), ev.train_labels(), ws.config.loss, &ws.config.train)?;
    let scores = model.predict_array(cell.val.view())?;
    let result = metrics::evaluate(scores.view(), ev.val_labels(), ws.config.threshold)?;
    let stem = format!("probe_{modality}_t{t}_b{b}");
    write(&out.join(format!("{stem}.model")), cache::encode_model(&model))?;
    write(&out.join(format!("{stem}_loss.csv")), log.to_csv())?;
    write_json(&out.join(format!("{stem}_metrics.json")), &result)?;
    write(&out.join(format!("{stem}_metrics.csv")), metrics_csv(&[(format!("{modality}"), &result)], "features"))
}

fn cmd_search(cfg: RunConfig, out: &Path, exhaustive: bool, exec: Execution) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    let ev = ws.evaluator(exec)?;
    let c = &ws.config;
    let report = heuristic_search(&ev, &ws.image_space, &ws.text_space, c.fusion.strategy, c.search.radius)?;
    write_json(&out.join("search_report.json"), &report)?;
    write(&out.join("heatmap.csv"), heatmap_csv(&report.grids))?;
    if let Some(planted) = &ws.planted {
        write_json(&out.join("planted.json"), planted)?;
    }
    if exhaustive {
        let oracle = Evaluator::new(ws.context(exec), c.fusion.strategy.needs_tokens())?;
        let full = exhaustive_search(&oracle, &ws.image_space, &ws.text_space, c.fusion.strategy, c.search.exhaustive_budget)?;
        write_json(&out.join("exhaustive_report.json"), &full)?;
    }
    Ok(())
}

/// Rows of `records` with exactly one label, with that label.
fn single_label_rows(records: &[DatasetRecord]) -> (Vec<usize>, Vec<usize>) {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.labels.len() == 1)
        .map(|(i, r)| (i, r.labels[0]))
        .unzip()
}

fn embedding_csv(ids: &[u64], labels: &[usize], x: &Array2<f64>) -> String {
    let mut out = String::from("id,label");
    for j in 0..x.ncols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for ((id, label), row) in ids.iter().zip(labels).zip(x.rows()) {
        out.push_str(&format!("{id},{label}"));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct ClusterReport {
    samples: usize,
    image: metrics::ClusterQuality,
    text: metrics::ClusterQuality,
    fused: metrics::ClusterQuality,
}

fn cmd_fuse(
    cfg: RunConfig,
    out: &Path,
    (image, text): (ConfigPoint, ConfigPoint),
    strategies: &[FusionStrategy],
    exec: Execution,
) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    check_point(&ws, image)?;
    check_point(&ws, text)?;
    let ev = Evaluator::new(ws.context(exec), strategies.iter().any(|s| s.needs_tokens()))?;
    let c = &ws.config;
    let img = ev.features(image)?;
    let txt = ev.features(text)?;
    let split = |train: bool| FusionInputs {
        img: if train { img.train.view() } else { img.val.view() },
        txt: if train { txt.train.view() } else { txt.val.view() },
        img_tokens: if train { img.train_tokens.as_ref() } else { img.val_tokens.as_ref() }.map(|t| t.view()),
        txt_tokens: if train { txt.train_tokens.as_ref() } else { txt.val_tokens.as_ref() }.map(|t| t.view()),
    };

    let mut rows = Vec::new();
    for (name, cell) in [("image", &img), ("text", &txt)] {
        let (model, _) = probe::train_probe_array(cell.train.view(), ev.train_labels(), c.loss, &c.train)?;
        let scores = model.predict_array(cell.val.view())?;
        rows.push((name.to_string(), metrics::evaluate(scores.view(), ev.val_labels(), c.threshold)?));
    }

    let (single_rows, single_labels) = single_label_rows(&ws.val);
    let ids: Vec<u64> = single_rows.iter().map(|&i| ws.val[i].id).collect();
    let pick = |x: &Array2<f64>| x.select(Axis(0), &single_rows);
    write(&out.join("embeddings_image.csv"), embedding_csv(&ids, &single_labels, &pick(&img.val)))?;
    write(&out.join("embeddings_text.csv"), embedding_csv(&ids, &single_labels, &pick(&txt.val)))?;

    for &strategy in strategies {
        let (fusion_model, head, log) = train_fused(&split(true), ev.train_labels(), strategy, c.fusion_dims(), c.loss, &c.train)?;
        let fused = fusion_model.fuse(&split(false))?;
        let scores = head.predict_array(fused.view())?;
        let result = metrics::evaluate(scores.view(), ev.val_labels(), c.threshold)?;
        write(&out.join(format!("loss_{strategy}.csv")), log.to_csv())?;

        let fused_f32 = FeatureMatrix::new(fused.mapv(|v| v as f32), Modality::Fused, image.t, image.b)?;
        cache::write_features(&out.join(format!("fused_{strategy}_val.dfft")), &fused_f32)?;

        if strategy == c.fusion.strategy || strategies.len() == 1 {
            let truth_sets: Vec<Vec<usize>> = ws.val.iter().map(|r| r.labels.clone()).collect();
            let pred_sets: Vec<Vec<usize>> = scores
                .rows()
                .into_iter()
                .map(|r| r.iter().enumerate().filter(|(_, &s)| s >= c.threshold).map(|(k, _)| k).collect())
                .collect();
            write_json(&out.join("powerset.json"), &powerset_report(&pred_sets, &truth_sets, DEFAULT_TOP_M)?)?;
            let mut per_class = String::from("class,name,count,frequency,ap,f1\n");
            let n = ws.train.len() as f64;
            for k in 0..ws.catalog.classes() {
                per_class.push_str(&format!(
                    "{k},{},{},{},{},{}\n",
                    ws.catalog.names[k],
                    ws.catalog.counts[k],
                    ws.catalog.counts[k] as f64 / n,
                    result.per_class_ap[k],
                    result.per_class_f1[k]
                ));
            }
            write(&out.join("per_class.csv"), per_class)?;
            write(&out.join("embeddings_fused.csv"), embedding_csv(&ids, &single_labels, &pick(&fused)))?;
            if single_labels.len() > 1 {
                let clusters = ClusterReport {
                    samples: single_labels.len(),
                    image: cluster_quality(pick(&img.val).view(), &single_labels)?,
                    text: cluster_quality(pick(&txt.val).view(), &single_labels)?,
                    fused: cluster_quality(pick(&fused).view(), &single_labels)?,
                };
                write_json(&out.join("clusters.json"), &clusters)?;
            }
        }
        rows.push((strategy.to_string(), result));
    }
    let borrowed: Vec<(String, &EvalResult)> = rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    write(&out.join("fusion_metrics.csv"), metrics_csv(&borrowed, "features"))?;
    write_json(
        &out.join("fusion_pair.json"),
        &serde_json::json!({ "image": image, "text": text }),
    )
}

fn cmd_report(out: &Path, search: &Path) -> Result<()> {
    let report: SearchReport = read_json(search)?;
    write(&out.join("heatmap.csv"), heatmap_csv(&report.grids))?;
    for g in &report.grids {
        write(&out.join(format!("grid_{}.csv", g.modality)), grid_table_csv(g))?;
    }
    let w = &report.winner;
    write(
        &out.join("winner.csv"),
        format!(
            "image_t,image_b,text_t,text_b,{}\n{},{},{},{},{}\n",
            metrics::TABLE_HEADER,
            w.image.t,
            w.image.b,
            w.text.t,
            w.text.b,
            w.result.table_row()
        ),
    )?;
    let mut cand = String::from("image_t,image_b,text_t,text_b,mAP\n");
    for p in &report.candidates {
        cand.push_str(&format!("{},{},{},{},{}\n", p.image.t, p.image.b, p.text.t, p.text.b, p.map));
    }
    write(&out.join("candidates.csv"), cand)?;
    let n = report.eval_counts;
    write(
        &out.join("eval_counts.csv"),
        format!(
            "image_evals,text_evals,fusion_evals,total\n{},{},{},{}\n",
            n.image_evals,
            n.text_evals,
            n.fusion_evals,
            n.total()
        ),
    )
}

fn cmd_stats(cfg: RunConfig, out: &Path, bucket_width: usize) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    let rows = rare_category_stats(&ws.train, &ws.catalog)?;
    write(&out.join("rare_categories.csv"), rare_stats_csv(&rows))?;
    let lengths: Vec<usize> = ws
        .train
        .iter()
        .map(|r| r.tokens.as_ref().map_or_else(|| r.caption.split_whitespace().count(), Vec::len))
        .collect();
    write(&out.join("token_lengths.csv"), histogram_csv(&token_length_histogram(&lengths, bucket_width)?))
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let field = line.split(',').next_back().unwrap_or(line).trim();
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            // A non-numeric first line is a header.
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn cmd_ttest_files(out: &Path, a: &Path, b: &Path) -> Result<()> {
    let result = paired_ttest(&read_numbers(a)?, &read_numbers(b)?)?;
    write_json(&out.join("ttest.json"), &result)
}

fn cmd_compare_noise(cfg: RunConfig, out: &Path, modality: Modality, exec: Execution) -> Result<()> {
    let mut maps = Vec::new();
    for mode in [NoiseMode::Deterministic, NoiseMode::Stochastic] {
        let mut c = cfg.clone();
        c.noise.mode = mode;
        let ws = Workspace::prepare(c)?;
        let ev = ws.evaluator(exec)?;
        let space = match modality {
            Modality::Image => &ws.image_space,
            _ => &ws.text_space,
        };
        let grid = crate::search::unimodal_grid(&ev, modality, space)?;
        maps.push(grid.cells.iter().map(|c| (c.t, c.b, c.result.map)).collect::<Vec<_>>());
    }
    let mut csv = String::from("timestep,block,deterministic,stochastic\n");
    for (d, s) in maps[0].iter().zip(&maps[1]) {
        csv.push_str(&format!("{},{},{},{}\n", d.0, d.1, d.2, s.2));
    }
    write(&out.join("noise_comparison.csv"), csv)?;
    let det: Vec<f64> = maps[0].iter().map(|c| 100.0 * c.2).collect();
    let sto: Vec<f64> = maps[1].iter().map(|c| 100.0 * c.2).collect();
    write_json(&out.join("ttest.json"), &paired_ttest(&det, &sto)?)
}

/// Single-line error report for stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    let msg = msg.trim();
    format!("error kind={} code={} msg={msg}", e.kind(), e.exit_code())
}
