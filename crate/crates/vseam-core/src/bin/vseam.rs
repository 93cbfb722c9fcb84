//! `vseam` command-line interface.
//!
//! Subcommands: dataset, edit, patch, heads, rescale, lens, report, run,
//! model. Exit codes: 0 success, 2 validation failure, 3 stage/runtime
//! failure. `VSEAM_WORKERS` bounds worker parallelism.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vseam_core::dataset::{
    balance_and_stats, filter_causal_pairs, load_triples, write_triples,
};
use vseam_core::error::VseamError;
use vseam_core::heads::{scores_from_csv, scores_to_csv, select_key_heads, HeadSetSelection};
use vseam_core::lens::{lens_grid, LensMode};
use vseam_core::model::{
    save_toy_model, InterventionPlan, ModelHandle, ModuleKind, ToyConfig,
};
use vseam_core::patching::{causal_score_grid, CausalGrid, CorruptionStrategy, TokenGrouping};
use vseam_core::pipeline::{run_edit_stage, run_pipeline, strategy_correctness, RunConfig};
use vseam_core::report::{
    bootstrap_compare, render_heatmap, BootstrapOptions, HeatmapData, HeatmapStyle,
};
use vseam_core::rescale::{
    build_rescale_plan, evaluate_strategies, plan_to_interventions, EditingStrategy, EvalParams,
    EvalReport, RescalePlan,
};
use vseam_core::synthetic::{generate_fixture, FixtureOptions};
use vseam_core::{dataset, DatasetSplit_shim as _};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "vseam", version, about = "Causal interpretability toolkit for VLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model selection shared by model-driven subcommands.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Backend: toy | toy-planted (or load --weights).
    #[arg(long, default_value = "toy-planted")]
    backend: String,
    /// Weight-init seed for the toy backends.
    #[arg(long, default_value_t = 7)]
    model_seed: u64,
    /// Load weights from a container file instead.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl ModelArgs {
    fn build(&self) -> Result<ModelHandle, VseamError> {
        if let Some(path) = &self.weights {
            return ModelHandle::from_weights_file(path);
        }
        match self.backend.as_str() {
            "toy" => ModelHandle::toy(ToyConfig::default(), self.model_seed),
            "toy-planted" => Ok(ModelHandle::planted(self.model_seed)),
            other => Err(VseamError::Config {
                field: "--backend".to_string(),
                message: format!("unknown backend `{other}` (toy|toy-planted)"),
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate, filter, balance, or synthesize VQA triples.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Run the semantic-editing stage over a dataset with stub clients.
    Edit {
        #[arg(long = "dataset")]
        dataset: PathBuf,
        #[arg(long, default_value = ".")]
        images_root: PathBuf,
        /// Client configuration (TOML; the bundled set is `stub`).
        #[arg(long)]
        clients: Option<PathBuf>,
        #[arg(long, default_value_t = 0.85)]
        qc_threshold: f64,
        #[arg(long, default_value_t = 2)]
        dilation: u32,
        #[arg(long, default_value = "edits")]
        out_dir: PathBuf,
    },
    /// Compute a layers-by-token-groups causal grid.
    Patch {
        #[arg(long, default_value = "att")]
        tau: String,
        #[arg(long, default_value = "all-image")]
        strategy: String,
        #[arg(long, default_value = "pooled-image")]
        grouping: String,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long, default_value = ".")]
        images_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also render the grid as an SVG heatmap.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score or select attention heads.
    Heads {
        #[command(subcommand)]
        action: HeadsAction,
    },
    /// Build, apply, or evaluate rescale plans.
    Rescale {
        #[command(subcommand)]
        action: RescaleAction,
    },
    /// Project intermediate activations through the unembedding.
    Lens {
        #[arg(long, default_value = "att")]
        tau: String,
        /// Token position, or `last`.
        #[arg(long, default_value = "last")]
        position: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Lens the raw module contribution instead of the residual state.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        question: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Render report artifacts or significance comparisons.
    Report {
        #[command(subcommand)]
        action: ReportAction,
    },
    /// Execute the full pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export toy-model weights to the binary container.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Load and validate a JSONL dataset.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Keep triples whose edit flips the model's answer.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = ".")]
        images_root: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Balance yes/no answers per category.
    Balance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the balance report here (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate the bundled synthetic fixture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        per_category: usize,
        #[arg(long, default_value_t = 7)]
        model_seed: u64,
    },
}

#[derive(Subcommand)]
enum HeadsAction {
    /// Score every head over the correct/incorrect split.
    Score {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long, default_value = ".")]
        images_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Select top-K positive/negative heads from a score table.
    Select {
        #[arg(long)]
        scores: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RescaleAction {
    /// Build a normalized rescale plan from a head selection.
    Build {
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize a strategy as an intervention action list.
    Apply {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "rescaling")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate editing strategies over a dataset.
    Eval {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long, default_value = ".")]
        images_root: PathBuf,
        /// Comma-separated strategy list.
        #[arg(long, default_value = "original,rescaling")]
        strategy: String,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        random_count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Subcommand)]
enum ReportAction {
    /// Render a saved causal grid as an SVG heatmap.
    Heatmap {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Bootstrap paired-t comparison of two strategies in an eval report.
    Significance {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value = "rescaling")]
        treatment: String,
        #[arg(long, default_value = "original")]
        baseline: String,
        #[arg(long, default_value_t = 1000)]
        folds: usize,
        #[arg(long, default_value_t = 100)]
        fold_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample each fold without replacement instead.
        #[arg(long)]
        without_replacement: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ModelAction {
    /// Write toy-model weights to a container file.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn parse_tau(s: &str) -> Result<ModuleKind, VseamError> {
    s.parse()
}

fn parse_patch_strategy(s: &str) -> Result<CorruptionStrategy, VseamError> {
    match s {
        "all-image" => Ok(CorruptionStrategy::AllImage),
        "bbox-patches" => Ok(CorruptionStrategy::BboxPatches),
        "all-positions" => Ok(CorruptionStrategy::AllPositions),
        other => Err(VseamError::Config {
            field: "--strategy".to_string(),
            message: format!("unknown strategy `{other}`"),
        }),
    }
}

fn parse_grouping(s: &str) -> Result<TokenGrouping, VseamError> {
    match s {
        "pooled-image" => Ok(TokenGrouping::PooledImage),
        "pooled-text" => Ok(TokenGrouping::PooledText),
        "question-tokens" => Ok(TokenGrouping::QuestionTokens {
            include_image_group: true,
        }),
        "per-image-token" => Ok(TokenGrouping::PerImageToken),
        other => Err(VseamError::Config {
            field: "--grouping".to_string(),
            message: format!("unknown grouping `{other}`"),
        }),
    }
}

fn parse_eval_strategies(
    list: &str,
    seed: u64,
    count: usize,
) -> Result<Vec<EditingStrategy>, VseamError> {
    list.split(',')
        .map(|s| match s.trim() {
            "original" => Ok(EditingStrategy::Original),
            "rescaling" => Ok(EditingStrategy::Rescaling),
            "wo-negative" => Ok(EditingStrategy::WoNegative),
            "wo-positive" => Ok(EditingStrategy::WoPositive),
            "random-remove" => Ok(EditingStrategy::RandomRemove { seed, count }),
            other => Err(VseamError::Config {
                field: "--strategy".to_string(),
                message: format!("unknown strategy `{other}`"),
            }),
        })
        .collect()
}

fn write_out(path: &PathBuf, content: &str) -> Result<(), VseamError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| VseamError::io_at(parent, e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| VseamError::io_at(path, e))
}

fn run(cli: Cli) -> Result<(), VseamError> {
    match cli.command {
        Command::Dataset { action } => match action {
            DatasetAction::Validate { input } => {
                let triples = load_triples(&input)?;
                println!("ok: {} triples", triples.len());
                Ok(())
            }
            DatasetAction::Filter {
                input,
                out,
                images_root,
                model,
            } => {
                let triples = load_triples(&input)?;
                let handle = model.build()?;
                let kept = filter_causal_pairs(&handle, &triples, &images_root)?;
                println!("kept {} of {} triples", kept.len(), triples.len());
                write_triples(&kept, &out)?;
                Ok(())
            }
            DatasetAction::Balance {
                input,
                out,
                seed,
                report,
            } => {
                let triples = load_triples(&input)?;
                let (balanced, stats) = balance_and_stats(&triples, seed)?;
                write_triples(&balanced, &out)?;
                if let Some(report_path) = report {
                    write_out(&report_path, &serde_json::to_string_pretty(&stats)?)?;
                }
                println!("kept {} of {} triples", stats.kept_total, stats.input_total);
                for row in &stats.kept {
                    println!(
                        "  {:<10} {:<10} yes={} no={}",
                        row.level.as_str(),
                        row.category.as_str(),
                        row.yes,
                        row.no
                    );
                }
                Ok(())
            }
            DatasetAction::Synth {
                out,
                seed,
                per_category,
                model_seed,
            } => {
                let summary = generate_fixture(
                    &out,
                    FixtureOptions {
                        per_category,
                        seed,
                        model_seed,
                    },
                )?;
                println!(
                    "wrote {} triples ({} reliable, {} distracted) to {}",
                    summary.total,
                    summary.reliable,
                    summary.distracted,
                    summary.triples_path.display()
                );
                Ok(())
            }
        },
        Command::Edit {
            dataset,
            images_root,
            clients,
            qc_threshold,
            dilation,
            out_dir,
        } => {
            if let Some(path) = clients {
                let content =
                    std::fs::read_to_string(&path).map_err(|e| VseamError::io_at(&path, e))?;
                if !content.contains("stub") {
                    return Err(VseamError::Config {
                        field: "--clients".to_string(),
                        message: "this build bundles the `stub` client set; other tools plug in through the client traits".to_string(),
                    });
                }
            }
            let triples = load_triples(&dataset)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| VseamError::io_at(&out_dir, e))?;
            let clients = vseam_core::pipeline::stub_client_set();
            let (rewritten, results) = run_edit_stage(
                &triples,
                &images_root,
                &out_dir,
                &clients,
                qc_threshold,
                dilation,
            )?;
            let mut manifest = String::new();
            let mut accepted = 0;
            for r in &results {
                if r.status == vseam_core::editing::EditStatus::Accepted {
                    accepted += 1;
                }
                manifest.push_str(&serde_json::to_string(r)?);
                manifest.push('\n');
            }
            write_out(&out_dir.join("edits.jsonl"), &manifest)?;
            write_triples(&rewritten, &out_dir.join("edited_triples.jsonl"))?;
            println!("accepted {accepted} of {} edits", results.len());
            Ok(())
        }
        Command::Patch {
            tau,
            strategy,
            grouping,
            triples,
            images_root,
            out,
            heatmap,
            model,
        } => {
            let handle = model.build()?;
            let tau = parse_tau(&tau)?;
            let strategy = parse_patch_strategy(&strategy)?;
            let grouping = parse_grouping(&grouping)?;
            let data = load_triples(&triples)?;
            let grid = causal_score_grid(&handle, &data, &images_root, tau, &strategy, &grouping)?;
            write_out(&out, &grid.to_json()?)?;
            if let Some(heatmap_path) = heatmap {
                render_heatmap(
                    HeatmapData::Causal(&grid),
                    &HeatmapStyle::default(),
                    &heatmap_path,
                )?;
            }
            println!("grid: {} layers x {} groups over n={}", grid.layers, grid.groups.len(), grid.n);
            Ok(())
        }
        Command::Heads { action } => match action {
            HeadsAction::Score {
                triples,
                images_root,
                out,
                model,
            } => {
                let handle = model.build()?;
                let data = load_triples(&triples)?;
                let split = vseam_core::dataset::DatasetSplit::from_model(
                    &handle,
                    data,
                    &images_root,
                )?;
                let n_correct = split
                    .membership
                    .values()
                    .filter(|v| matches!(v, vseam_core::dataset::Verdict::Correct))
                    .count();
                if n_correct == 0 || n_correct == split.triples.len() {
                    eprintln!(
                        "warning: one correctness bucket is empty (correct={n_correct}/{}); scores for that side will be absent",
                        split.triples.len()
                    );
                }
                let scores = vseam_core::heads::head_causal_scores(&handle, &split, &images_root)?;
                write_out(&out, &scores_to_csv(&scores)?)?;
                println!("scored {} heads", scores.len());
                Ok(())
            }
            HeadsAction::Select { scores, k, out } => {
                let content = std::fs::read_to_string(&scores)
                    .map_err(|e| VseamError::io_at(&scores, e))?;
                let table = scores_from_csv(&content)?;
                let selection = select_key_heads(&table, k);
                write_out(&out, &serde_json::to_string_pretty(&selection)?)?;
                println!(
                    "positive: {:?}",
                    selection.positive.iter().map(|s| s.label()).collect::<Vec<_>>()
                );
                println!(
                    "negative: {:?}",
                    selection.negative.iter().map(|s| s.label()).collect::<Vec<_>>()
                );
                Ok(())
            }
        },
        Command::Rescale { action } => match action {
            RescaleAction::Build { selection, out } => {
                let content = std::fs::read_to_string(&selection)
                    .map_err(|e| VseamError::io_at(&selection, e))?;
                let selection: HeadSetSelection = serde_json::from_str(&content)?;
                let plan = build_rescale_plan(&selection);
                write_out(&out, &plan.to_json()?)?;
                println!("{} entries", plan.entries.len());
                Ok(())
            }
            RescaleAction::Apply {
                plan,
                strategy,
                seed,
                count,
                out,
                model,
            } => {
                let handle = model.build()?;
                let plan = RescalePlan::from_json(
                    &std::fs::read_to_string(&plan).map_err(|e| VseamError::io_at(&plan, e))?,
                )?;
                let strategies = parse_eval_strategies(&strategy, seed, count)?;
                let interventions = plan_to_interventions(
                    &plan,
                    &strategies[0],
                    handle.num_layers(),
                    handle.num_heads(),
                )?;
                let actions: Vec<serde_json::Value> = interventions
                    .actions()
                    .iter()
                    .map(|a| match a {
                        vseam_core::Action::MaskHead { layer, head } => serde_json::json!({
                            "action": "mask", "layer": layer, "head": head
                        }),
                        vseam_core::Action::RescaleHead { layer, head, factor } => serde_json::json!({
                            "action": "rescale", "layer": layer, "head": head, "factor": factor
                        }),
                        vseam_core::Action::Patch { .. } => serde_json::json!({"action": "patch"}),
                    })
                    .collect();
                write_out(&out, &serde_json::to_string_pretty(&actions)?)?;
                println!("{} actions", actions.len());
                Ok(())
            }
            RescaleAction::Eval {
                plan,
                triples,
                images_root,
                strategy,
                fraction,
                repeats,
                seed,
                k,
                random_count,
                out,
                csv,
                model,
            } => {
                let handle = model.build()?;
                let plan = RescalePlan::from_json(
                    &std::fs::read_to_string(&plan).map_err(|e| VseamError::io_at(&plan, e))?,
                )?;
                let data = load_triples(&triples)?;
                let strategies = parse_eval_strategies(&strategy, seed, random_count)?;
                let report = evaluate_strategies(
                    &handle,
                    &data,
                    &images_root,
                    &plan,
                    &EvalParams {
                        strategies,
                        sample_fraction: fraction,
                        repeats,
                        seed,
                        k,
                    },
                )?;
                write_out(&out, &report.to_json()?)?;
                if let Some(csv_path) = csv {
                    write_out(&csv_path, &report.to_csv()?)?;
                }
                for s in &report.strategies {
                    println!("{:<14} avg={:.2}%", s.strategy, s.average * 100.0);
                }
                Ok(())
            }
        },
        Command::Lens {
            tau,
            position,
            k,
            raw,
            question,
            image,
            out,
            heatmap,
            model,
        } => {
            let handle = model.build()?;
            let tau = parse_tau(&tau)?;
            let img = vseam_core::img::load_gray(&image)?;
            let seq = handle.encode_input(&question, &img)?;
            let pos = if position == "last" {
                seq.last_position()
            } else {
                position.parse().map_err(|_| VseamError::Config {
                    field: "--position".to_string(),
                    message: format!("expected an index or `last`, got `{position}`"),
                })?
            };
            let mode = if raw { LensMode::RawModule } else { LensMode::Residual };
            let grid = lens_grid(&handle, &seq, tau, pos, k, mode)?;
            write_out(&out, &grid.to_json()?)?;
            if let Some(heatmap_path) = heatmap {
                render_heatmap(
                    HeatmapData::Lens(&grid),
                    &HeatmapStyle::default(),
                    &heatmap_path,
                )?;
            }
            for (l, layer) in grid.layers.iter().enumerate() {
                let tops: Vec<String> =
                    layer.iter().take(3).map(|e| e.text.clone()).collect();
                println!("L{l}: {}", tops.join(" "));
            }
            Ok(())
        }
        Command::Report { action } => match action {
            ReportAction::Heatmap { grid, out, title } => {
                let content =
                    std::fs::read_to_string(&grid).map_err(|e| VseamError::io_at(&grid, e))?;
                let grid: CausalGrid = serde_json::from_str(&content)?;
                render_heatmap(
                    HeatmapData::Causal(&grid),
                    &HeatmapStyle {
                        title,
                        ..HeatmapStyle::default()
                    },
                    &out,
                )?;
                println!("wrote {}", out.display());
                Ok(())
            }
            ReportAction::Significance {
                eval,
                treatment,
                baseline,
                folds,
                fold_size,
                seed,
                without_replacement,
                out,
            } => {
                let report: EvalReport = serde_json::from_str(
                    &std::fs::read_to_string(&eval).map_err(|e| VseamError::io_at(&eval, e))?,
                )?;
                let (a, b) = strategy_correctness(&report, &treatment, &baseline)?;
                let result = bootstrap_compare(
                    &a,
                    &b,
                    &baseline,
                    BootstrapOptions {
                        folds,
                        fold_size: fold_size.min(a.len()),
                        seed,
                        with_replacement: !without_replacement,
                    },
                )?;
                write_out(&out, &serde_json::to_string_pretty(&result)?)?;
                println!(
                    "{} vs {}: mean dpp={:.3} sd={:.3} t={:.2} p={:.3e}",
                    treatment, baseline, result.mean_delta_pp, result.sd, result.t, result.p
                );
                Ok(())
            }
        },
        Command::Run { config } => {
            let config = RunConfig::load(&config)?;
            let summary = run_pipeline(&config)?;
            for stage in &summary.stages {
                println!(
                    "{:<14} {}",
                    stage.stage,
                    if stage.skipped { "skipped (up to date)" } else { "done" }
                );
            }
            println!("reports in {}", summary.output_dir.display());
            Ok(())
        }
        Command::Model { action } => match action {
            ModelAction::Export { out, model } => {
                let handle = model.build()?;
                let toy = handle
                    .backend()
                    .as_toy()
                    .ok_or_else(|| VseamError::Config {
                        field: "--backend".to_string(),
                        message: "export needs a toy backend".to_string(),
                    })?;
                save_toy_model(toy, &out)?;
                println!("wrote {}", out.display());
                Ok(())
            }
        },
    }
}
