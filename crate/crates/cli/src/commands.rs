use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;

use semloc::config::PipelineConfig;
use semloc::contrastive::{finetune, train, write_loss_history, FinetuneMode};
use semloc::evalkit::{sweep_crop_ratio, sweep_w, table_crop_grid, table_w_grid, EvalConfig, EvalReport, RetrievalSetup};
use semloc::maskio::{load_dataset, load_mask, load_mask_dir, load_mask_pairs, resolve_palette, save_mask_pairs};
use semloc::pixelsim::pixelwise_similarity;
use semloc::projection::{generate_database_views, DEFAULT_FOV_DEG, DEFAULT_VIEW_COUNT, DEFAULT_VIEW_HEIGHT, DEFAULT_VIEW_WIDTH};
use semloc::rerank::{fuse_all, read_results, rerank_all, score_all, write_results, EmbedScorer, PixelScorer};
use semloc::synth::{generate, save_masks, training_masks, training_pairs};
use semloc::{CandidateList, ClassPalette, Dataset, EmbeddingModel, Error, RgbScoreTable, SemanticScorer};

use crate::{Command, GlobalOptions};

pub const METHOD_RGB: &str = "rgb-only";
pub const METHOD_PIXEL: &str = "pixel-wise";
pub const METHOD_EMBED: &str = "contrastive";

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Pipeline configuration whose `[scene]` section describes the dataset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Unlabeled training masks written to `<out>/train` (default from config).
    #[arg(long)]
    pub train_masks: Option<usize>,
    /// Labeled query/database pairs written to `<out>/pairs`.
    #[arg(long, default_value_t = 0)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Manifest whose panoramas are projected.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for the view masks and the augmented manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VIEW_COUNT)]
    pub views: usize,
    #[arg(long, default_value_t = DEFAULT_FOV_DEG)]
    pub fov: f64,
    #[arg(long, default_value_t = DEFAULT_VIEW_WIDTH)]
    pub width: usize,
    #[arg(long, default_value_t = DEFAULT_VIEW_HEIGHT)]
    pub height: usize,
}

#[derive(Debug, Args)]
pub struct PixelsimArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    /// Class palette file; defaults to the street palette.
    #[arg(long)]
    pub palette: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of unlabeled training masks.
    #[arg(long)]
    pub masks: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV (default: checkpoint path with `.loss.csv`).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// CSV `query_mask,db_mask` of labeled pairs.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.finetune_mode` from the config.
    #[arg(long)]
    pub mode: Option<FinetuneMode>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScorerKind {
    Pixel,
    Embed,
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// RGB score CSV `query_id,view_id,score`.
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "pixel")]
    pub scorer: ScorerKind,
    /// Checkpoint for the embedding scorer.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// RGB candidates per query before sibling expansion.
    #[arg(long)]
    pub s: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub input: ScorerArgs,
    #[arg(long)]
    pub w: Option<f64>,
    /// Results CSV `query_id,rank,view_id,rgb_norm,sem_norm,fused`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Result files, either `method=path` or a path whose stem names the method.
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<String>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// List sizes, e.g. `1..5` or `1,5,10`.
    #[arg(long)]
    pub n: Option<String>,
    /// Distance thresholds in meters, e.g. `5,10,15`.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Report CSV `method,N,threshold_m,recall`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepWArgs {
    #[command(flatten)]
    pub input: ScorerArgs,
    /// Comma-separated W values (default: 0 and 0.10..0.50 step 0.05).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepCropArgs {
    /// Directory of unlabeled training masks.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated minimum crop ratios (default: 0.3..0.9 step 0.1).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct E2eArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub train_masks: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn run(global: &GlobalOptions, command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(global, a),
        Command::Project(a) => project(a),
        Command::Pixelsim(a) => pixelsim(a),
        Command::Train(a) => train_cmd(global, a),
        Command::Finetune(a) => finetune_cmd(global, a),
        Command::Rerank(a) => rerank(global, a),
        Command::Eval(a) => eval(global, a),
        Command::SweepW(a) => sweep_w_cmd(global, a),
        Command::SweepCrop(a) => sweep_crop(global, a),
        Command::E2e(a) => e2e(global, a),
    }
}

fn load_config(path: Option<&Path>, global: &GlobalOptions) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(match global.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn config(global: &GlobalOptions) -> Result<PipelineConfig> {
    load_config(global.config.as_deref(), global)
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn open_dataset(manifest: &Path) -> Result<Dataset> {
    let palette = resolve_palette(None, parent_dir(manifest))?;
    Ok(load_dataset(manifest, &palette)?)
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| config_error(format!("invalid {what} value {t:?}"))))
        .collect()
}

/// `a..b` (inclusive) or a comma-separated list.
fn parse_n_values(text: &str) -> Result<Vec<usize>> {
    match text.split_once("..") {
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|_| config_error(format!("invalid N range {text:?}")))?;
            let b: usize = b.trim().parse().map_err(|_| config_error(format!("invalid N range {text:?}")))?;
            Ok((a..=b).collect())
        }
        None => parse_list(text, "N"),
    }
}

fn history_path(ckpt: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| ckpt.with_extension("loss.csv"))
}

fn synth(global: &GlobalOptions, args: SynthArgs) -> Result<()> {
    let cfg = load_config(args.spec.as_deref().or(global.config.as_deref()), global)?;
    let data = generate(&cfg.scene)?;
    let manifest = data.save(&args.out)?;
    let count = args.train_masks.unwrap_or(cfg.train_masks);
    let palette = cfg.scene.palette();
    if count > 0 {
        let train_dir = args.out.join("train");
        save_masks(&train_dir, "m", &training_masks(&cfg.scene, count)?)?;
        palette.save(&train_dir.join("palette.txt"))?;
    }
    if args.pairs > 0 {
        let pair_dir = args.out.join("pairs");
        save_mask_pairs(&pair_dir, &training_pairs(&cfg.scene, args.pairs)?)?;
        palette.save(&pair_dir.join("palette.txt"))?;
    }
    log::info!("{} queries, {} demoted", data.dataset.queries().len(), data.demoted.len());
    println!("{}", manifest.display());
    Ok(())
}

fn project(args: ProjectArgs) -> Result<()> {
    let src = parent_dir(&args.dataset);
    create_dir(&args.out)?;
    if fs::canonicalize(src)? == fs::canonicalize(&args.out)? {
        return Err(config_error("--out must differ from the dataset directory"));
    }
    let dataset = open_dataset(&args.dataset)?;
    let views = dataset
        .panoramas()
        .par_iter()
        .map(|p| generate_database_views(p, args.views, args.fov, args.width, args.height))
        .collect::<semloc::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let manifest = dataset.with_views(views)?.save(&args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn pixelsim(args: PixelsimArgs) -> Result<()> {
    let palette = match &args.palette {
        Some(p) => ClassPalette::load(p)?,
        None => ClassPalette::street(),
    };
    let q = load_mask(&args.query, &palette)?;
    let d = load_mask(&args.db, &palette)?;
    println!("{}", pixelwise_similarity(&q, &d)?);
    Ok(())
}

fn train_cmd(global: &GlobalOptions, args: TrainArgs) -> Result<()> {
    let mut cfg = config(global)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let palette = resolve_palette(None, &args.masks)?;
    let masks = load_mask_dir(&args.masks, &palette)?;
    let (model, history) = train(&masks, &cfg.train)?;
    model.save(&args.out)?;
    write_loss_history(&history_path(&args.out, args.history), &history)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("trained on {} masks: loss {first:.4} -> {last:.4}", masks.len());
    }
    Ok(())
}

fn finetune_cmd(global: &GlobalOptions, args: FinetuneArgs) -> Result<()> {
    let mut cfg = config(global)?;
    if let Some(m) = args.mode {
        cfg.train.finetune_mode = m;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let model = EmbeddingModel::load(&args.ckpt)?;
    let palette = resolve_palette(None, parent_dir(&args.pairs))?;
    let pairs = load_mask_pairs(&args.pairs, &palette)?;
    let (tuned, history) = finetune(&model, &pairs, &cfg.train)?;
    tuned.save(&args.out)?;
    write_loss_history(&history_path(&args.out, args.history), &history)?;
    println!("fine-tuned on {} pairs ({})", pairs.len(), cfg.train.finetune_mode);
    Ok(())
}

fn scorer(cfg: &PipelineConfig, kind: ScorerKind, ckpt: Option<&Path>) -> Result<Box<dyn SemanticScorer>> {
    Ok(match kind {
        ScorerKind::Pixel => Box::new(PixelScorer { width: cfg.rerank.compare_w, height: cfg.rerank.compare_h }),
        ScorerKind::Embed => {
            let ckpt = ckpt.ok_or_else(|| config_error("--scorer embed requires --ckpt"))?;
            Box::new(EmbedScorer::new(EmbeddingModel::load(ckpt)?))
        }
    })
}

struct Inputs {
    dataset: Dataset,
    rgb: RgbScoreTable,
    scorer: Box<dyn SemanticScorer>,
    s: usize,
}

fn load_inputs(cfg: &PipelineConfig, args: &ScorerArgs) -> Result<Inputs> {
    let dataset = open_dataset(&args.dataset)?;
    let rgb = RgbScoreTable::load(&args.rgb)?;
    rgb.validate(&dataset)?;
    let scorer = scorer(cfg, args.scorer, args.ckpt.as_deref())?;
    Ok(Inputs { dataset, rgb, scorer, s: args.s.unwrap_or(cfg.rerank.s) })
}

fn rerank(global: &GlobalOptions, args: RerankArgs) -> Result<()> {
    let mut cfg = config(global)?;
    if let Some(w) = args.w {
        cfg.rerank.w = w;
    }
    cfg.rerank.validate()?;
    let inp = load_inputs(&cfg, &args.input)?;
    let results =
        rerank_all(inp.dataset.queries(), &inp.rgb, &inp.dataset, inp.scorer.as_ref(), cfg.rerank.w, inp.s)?;
    write_results(&args.out, &results)?;
    println!("re-ranked {} queries with {} (W = {})", results.len(), inp.scorer.name(), cfg.rerank.w);
    Ok(())
}

fn eval_config(cfg: &PipelineConfig, n: Option<&str>, thresholds: Option<&str>) -> Result<EvalConfig> {
    let mut eval = cfg.eval.clone();
    if let Some(n) = n {
        eval.n_values = parse_n_values(n)?;
    }
    if let Some(t) = thresholds {
        eval.thresholds_m = parse_list(t, "threshold")?;
    }
    eval.validate()?;
    Ok(eval)
}

fn method_and_path(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((m, p)) if !m.is_empty() => (m.to_string(), PathBuf::from(p)),
        _ => {
            let path = PathBuf::from(spec);
            let method = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (method, path)
        }
    }
}

fn eval(global: &GlobalOptions, args: EvalArgs) -> Result<()> {
    let cfg = config(global)?;
    let eval = eval_config(&cfg, args.n.as_deref(), args.thresholds.as_deref())?;
    let dataset = open_dataset(&args.dataset)?;
    let mut report = EvalReport::default();
    for spec in &args.results {
        let (method, path) = method_and_path(spec);
        report.add_method(&method, &read_results(&path)?, &dataset, &eval)?;
    }
    if let Some(out) = &args.out {
        report.write_csv(out)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn sweep_w_cmd(global: &GlobalOptions, args: SweepWArgs) -> Result<()> {
    let cfg = config(global)?;
    let grid = match &args.grid {
        Some(g) => parse_list(g, "W")?,
        None => std::iter::once(0.0).chain(table_w_grid()).collect(),
    };
    let inp = load_inputs(&cfg, &args.input)?;
    let pools = score_all(inp.dataset.queries(), &inp.rgb, &inp.dataset, inp.scorer.as_ref(), inp.s)?;
    let table = sweep_w(&pools, &inp.dataset, &grid, &cfg.eval)?;
    table.write_csv(&args.out)?;
    print!("{}", table.to_table());
    Ok(())
}

fn sweep_crop(global: &GlobalOptions, args: SweepCropArgs) -> Result<()> {
    let mut cfg = config(global)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let grid = match &args.grid {
        Some(g) => parse_list(g, "crop ratio")?,
        None => table_crop_grid(),
    };
    let palette = resolve_palette(None, &args.masks)?;
    let masks = load_mask_dir(&args.masks, &palette)?;
    let dataset = open_dataset(&args.dataset)?;
    let rgb = RgbScoreTable::load(&args.rgb)?;
    rgb.validate(&dataset)?;
    let setup = RetrievalSetup {
        dataset: &dataset,
        rgb: &rgb,
        w: args.w.unwrap_or(cfg.rerank.w),
        s: args.s.unwrap_or(cfg.rerank.s),
    };
    let table = sweep_crop_ratio(&masks, &cfg.train, &grid, setup, &cfg.eval)?;
    table.write_csv(&args.out)?;
    print!("{}", table.to_table());
    Ok(())
}

fn e2e(global: &GlobalOptions, args: E2eArgs) -> Result<()> {
    let mut cfg = config(global)?;
    if let Some(n) = args.scenes {
        cfg.scene.n_scenes = n;
    }
    if let Some(n) = args.train_masks {
        cfg.train_masks = n;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    create_dir(&args.out)?;

    log::info!("synthesizing {} scenes", cfg.scene.n_scenes);
    let data = generate(&cfg.scene)?;
    let data_dir = args.out.join("data");
    let source = data.dataset.with_views(Vec::new())?;
    source.save(&data_dir.join("source"))?;

    log::info!("projecting database views");
    let spec = &cfg.scene;
    let views = source
        .panoramas()
        .par_iter()
        .map(|p| generate_database_views(p, spec.views_per_pano, spec.fov_deg, spec.view_w, spec.view_h))
        .collect::<semloc::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let dataset = source.with_views(views)?;
    dataset.save(&data_dir)?;
    data.rgb.save(&data_dir.join("rgb_scores.csv"))?;

    log::info!("training on {} masks for {} epochs", cfg.train_masks, cfg.train.epochs);
    let masks = training_masks(spec, cfg.train_masks)?;
    let (model, history) = train(&masks, &cfg.train)?;
    model.save(&args.out.join("model.ckpt"))?;
    write_loss_history(&args.out.join("loss.csv"), &history)?;

    log::info!("re-ranking");
    let (w, s) = (cfg.rerank.w, cfg.rerank.s);
    let pixel = PixelScorer { width: cfg.rerank.compare_w, height: cfg.rerank.compare_h };
    let pixel_pools = score_all(dataset.queries(), &data.rgb, &dataset, &pixel, s)?;
    let embed = EmbedScorer::new(model);
    let methods: Vec<(&str, BTreeMap<String, CandidateList>)> = vec![
        (METHOD_RGB, fuse_all(&pixel_pools, 0.0)?),
        (METHOD_PIXEL, fuse_all(&pixel_pools, w)?),
        (METHOD_EMBED, rerank_all(dataset.queries(), &data.rgb, &dataset, &embed, w, s)?),
    ];

    let results_dir = args.out.join("results");
    create_dir(&results_dir)?;
    let mut report = EvalReport::default();
    for (method, results) in &methods {
        write_results(&results_dir.join(format!("{method}.csv")), results)?;
        report.add_method(method, results, &dataset, &cfg.eval)?;
    }
    report.write_csv(&args.out.join("report.csv"))?;
    let table = report.to_table();
    fs::write(args.out.join("report.txt"), &table).with_context(|| "writing report.txt")?;
    print!("{table}");
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("training loss {first:.4} -> {last:.4}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_values_accept_ranges_and_lists() {
        assert_eq!(parse_n_values("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_n_values("1, 5,10").unwrap(), vec![1, 5, 10]);
        let err = parse_n_values("1..x").unwrap_err();
        assert!(err.downcast_ref::<Error>().is_some_and(Error::is_config));
    }

    #[test]
    fn result_specs_name_their_method() {
        assert_eq!(method_and_path("rgb-only=out/a.csv"), ("rgb-only".into(), PathBuf::from("out/a.csv")));
        assert_eq!(method_and_path("out/contrastive.csv"), ("contrastive".into(), PathBuf::from("out/contrastive.csv")));
    }

    #[test]
    fn default_history_sits_beside_the_checkpoint() {
        assert_eq!(history_path(Path::new("m/model.ckpt"), None), PathBuf::from("m/model.loss.csv"));
    }
}
