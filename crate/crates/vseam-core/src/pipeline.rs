//! End-to-end run orchestration: validate -> edit -> filter -> patch ->
//! heads -> select -> plan -> eval -> significance -> report.
//!
//! Every stage writes its outputs plus a manifest carrying a hash of its
//! inputs (upstream manifest hash, stage parameters, input files). A rerun
//! with unchanged inputs skips the stage, so completed runs resume without
//! recomputation. All randomness funnels through the seeds recorded in the
//! config, and reports carry no timestamps, so identical configs produce
//! byte-identical JSON outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    balance_and_stats, filter_causal_pairs, image_path, load_triples, write_triples, DatasetSplit,
    VQATriple,
};
use crate::editing::clients::{
    EncoderClient, InpainterClient, LanguageClient, SegmenterClient, StubEncoder, StubInpainter,
    StubLanguageClient, StubSegmenter,
};
use crate::editing::{
    build_counterfactual_prompt, edit_region, qc_similarity, validate_counterfactual, EditOptions,
    EditProvenance, EditResult, EditStatus, DEFAULT_STOP_LIST,
};
use crate::error::{Result, VseamError};
use crate::heads::{head_causal_scores, scores_to_csv, select_key_heads, HeadSetSelection};
use crate::img::{load_gray, save_gray};
use crate::model::{BinaryAnswer, ModelHandle, ModuleKind, ToyConfig};
use crate::patching::{causal_score_grid, CausalGrid, CorruptionStrategy, TokenGrouping};
use crate::report::{
    bootstrap_compare, render_heatmap, BootstrapOptions, HeatmapData, HeatmapStyle,
    SignificanceReport,
};
use crate::rescale::{
    build_rescale_plan, evaluate_strategies, EditingStrategy, EvalParams, EvalReport, RescalePlan,
};

fn default_taus() -> Vec<String> {
    vec!["att".to_string(), "mlp".to_string()]
}

fn default_strategy() -> String {
    "all-image".to_string()
}

fn default_grouping() -> String {
    "pooled-image".to_string()
}

fn default_k() -> usize {
    10
}

fn default_fraction() -> f64 {
    1.0
}

fn default_repeats() -> usize {
    10
}

fn default_strategies() -> Vec<String> {
    vec![
        "original".to_string(),
        "rescaling".to_string(),
        "wo-negative".to_string(),
        "wo-positive".to_string(),
        "random-remove".to_string(),
    ]
}

fn default_folds() -> usize {
    1000
}

fn default_fold_size() -> usize {
    100
}

fn default_random_remove() -> usize {
    10
}

fn default_qc_threshold() -> f64 {
    0.85
}

fn default_dilation() -> u32 {
    2
}

fn default_clients() -> String {
    "stub".to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    pub triples: PathBuf,
    pub images_root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    /// `toy`, `toy-planted`, or `weights`.
    pub backend: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_qc_threshold")]
    pub qc_threshold: f64,
    #[serde(default = "default_dilation")]
    pub dilation: u32,
    #[serde(default = "default_clients")]
    pub clients: String,
}

impl Default for EditSection {
    fn default() -> Self {
        EditSection {
            enabled: true,
            qc_threshold: default_qc_threshold(),
            dilation: default_dilation(),
            clients: default_clients(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchSection {
    #[serde(default = "default_taus")]
    pub taus: Vec<String>,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default = "default_grouping")]
    pub grouping: String,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection {
            taus: default_taus(),
            strategy: default_strategy(),
            grouping: default_grouping(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadsSection {
    #[serde(default = "default_k")]
    pub k: usize,
}

impl Default for HeadsSection {
    fn default() -> Self {
        HeadsSection { k: default_k() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_random_remove")]
    pub random_remove_count: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            strategies: default_strategies(),
            fraction: default_fraction(),
            repeats: default_repeats(),
            random_remove_count: default_random_remove(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceSection {
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Clamped to the population size at run time.
    #[serde(default = "default_fold_size")]
    pub fold_size: usize,
    #[serde(default = "default_true")]
    pub with_replacement: bool,
}

impl Default for SignificanceSection {
    fn default() -> Self {
        SignificanceSection {
            folds: default_folds(),
            fold_size: default_fold_size(),
            with_replacement: true,
        }
    }
}

/// Full run configuration (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub edit: EditSection,
    #[serde(default)]
    pub patch: PatchSection,
    #[serde(default)]
    pub heads: HeadsSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub significance: SignificanceSection,
}

impl RunConfig {
    pub fn from_toml(content: &str) -> Result<Self> {
        toml::from_str(content).map_err(|e| VseamError::Config {
            field: "config".to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| VseamError::io_at(path, e))?;
        Self::from_toml(&content)
    }

    /// Check referenced paths and enum fields before running anything.
    pub fn validate(&self) -> Result<()> {
        if !self.dataset.triples.exists() {
            return Err(VseamError::Config {
                field: "dataset.triples".to_string(),
                message: format!("path does not exist: {}", self.dataset.triples.display()),
            });
        }
        if !self.dataset.images_root.exists() {
            return Err(VseamError::Config {
                field: "dataset.images_root".to_string(),
                message: format!("path does not exist: {}", self.dataset.images_root.display()),
            });
        }
        match self.model.backend.as_str() {
            "toy" | "toy-planted" => {}
            "weights" => {
                let path = self.model.weights.as_ref().ok_or_else(|| VseamError::Config {
                    field: "model.weights".to_string(),
                    message: "backend `weights` requires model.weights".to_string(),
                })?;
                if !path.exists() {
                    return Err(VseamError::Config {
                        field: "model.weights".to_string(),
                        message: format!("path does not exist: {}", path.display()),
                    });
                }
            }
            other => {
                return Err(VseamError::Config {
                    field: "model.backend".to_string(),
                    message: format!("unknown backend `{other}` (toy|toy-planted|weights)"),
                });
            }
        }
        for tau in &self.patch.taus {
            tau.parse::<ModuleKind>()?;
        }
        parse_strategy_name(&self.patch.strategy)?;
        parse_grouping_name(&self.patch.grouping)?;
        for s in &self.eval.strategies {
            parse_eval_strategy(s, self.run.seed, self.eval.random_remove_count)?;
        }
        if self.edit.clients != "stub" {
            return Err(VseamError::Config {
                field: "edit.clients".to_string(),
                message: format!(
                    "unknown client set `{}` (this build bundles `stub`; other tools plug in through the client traits)",
                    self.edit.clients
                ),
            });
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ModelHandle> {
        match self.model.backend.as_str() {
            "toy" => ModelHandle::toy(ToyConfig::default(), self.model.seed),
            "toy-planted" => Ok(ModelHandle::planted(self.model.seed)),
            "weights" => ModelHandle::from_weights_file(
                self.model.weights.as_ref().expect("validated"),
            ),
            other => Err(VseamError::Config {
                field: "model.backend".to_string(),
                message: other.to_string(),
            }),
        }
    }
}

fn parse_strategy_name(name: &str) -> Result<CorruptionStrategy> {
    match name {
        "all-image" => Ok(CorruptionStrategy::AllImage),
        "bbox-patches" => Ok(CorruptionStrategy::BboxPatches),
        "all-positions" => Ok(CorruptionStrategy::AllPositions),
        other => Err(VseamError::Config {
            field: "patch.strategy".to_string(),
            message: format!("unknown strategy `{other}` (all-image|bbox-patches|all-positions)"),
        }),
    }
}

fn parse_grouping_name(name: &str) -> Result<TokenGrouping> {
    match name {
        "pooled-image" => Ok(TokenGrouping::PooledImage),
        "pooled-text" => Ok(TokenGrouping::PooledText),
        "question-tokens" => Ok(TokenGrouping::QuestionTokens {
            include_image_group: true,
        }),
        "per-image-token" => Ok(TokenGrouping::PerImageToken),
        other => Err(VseamError::Config {
            field: "patch.grouping".to_string(),
            message: format!(
                "unknown grouping `{other}` (pooled-image|pooled-text|question-tokens|per-image-token)"
            ),
        }),
    }
}

fn parse_eval_strategy(name: &str, seed: u64, random_count: usize) -> Result<EditingStrategy> {
    match name {
        "original" => Ok(EditingStrategy::Original),
        "rescaling" => Ok(EditingStrategy::Rescaling),
        "wo-negative" => Ok(EditingStrategy::WoNegative),
        "wo-positive" => Ok(EditingStrategy::WoPositive),
        "random-remove" => Ok(EditingStrategy::RandomRemove {
            seed,
            count: random_count,
        }),
        other => Err(VseamError::Config {
            field: "eval.strategies".to_string(),
            message: format!("unknown strategy `{other}`"),
        }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub stages: Vec<StageOutcome>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    input_hash: String,
    outputs: Vec<PathBuf>,
}

fn hash_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| VseamError::io_at(path, e))?;
    hasher.update(&bytes);
    Ok(())
}

struct StageRunner {
    manifests_dir: PathBuf,
    chain_hash: String,
    outcomes: Vec<StageOutcome>,
}

impl StageRunner {
    fn new(out_dir: &Path, config_fingerprint: &str) -> Result<Self> {
        let manifests_dir = out_dir.join("manifests");
        std::fs::create_dir_all(&manifests_dir)
            .map_err(|e| VseamError::io_at(&manifests_dir, e))?;
        Ok(StageRunner {
            manifests_dir,
            chain_hash: config_fingerprint.to_string(),
            outcomes: Vec::new(),
        })
    }

    /// Run (or skip) one stage. `params` joins the hash chain; `inputs` are
    /// files hashed into it.
    fn stage<F>(&mut self, name: &str, params: &str, inputs: &[PathBuf], run: F) -> Result<()>
    where
        F: FnOnce() -> Result<Vec<PathBuf>>,
    {
        let mut hasher = Sha256::new();
        hasher.update(self.chain_hash.as_bytes());
        hasher.update(name.as_bytes());
        hasher.update(params.as_bytes());
        for input in inputs {
            hash_file(&mut hasher, input)
                .map_err(|e| stage_error(name, e))?;
        }
        let input_hash = format!("{:x}", hasher.finalize());

        let manifest_path = self.manifests_dir.join(format!("{name}.json"));
        if let Ok(content) = std::fs::read_to_string(&manifest_path) {
            if let Ok(manifest) = serde_json::from_str::<StageManifest>(&content) {
                if manifest.input_hash == input_hash
                    && manifest.outputs.iter().all(|p| p.exists())
                {
                    self.chain_hash = input_hash;
                    self.outcomes.push(StageOutcome {
                        stage: name.to_string(),
                        skipped: true,
                        outputs: manifest.outputs,
                    });
                    return Ok(());
                }
            }
        }

        let outputs = run().map_err(|e| stage_error(name, e))?;
        let manifest = StageManifest {
            stage: name.to_string(),
            input_hash: input_hash.clone(),
            outputs: outputs.clone(),
        };
        write_json_atomic(&manifest_path, &manifest)?;
        self.chain_hash = input_hash;
        self.outcomes.push(StageOutcome {
            stage: name.to_string(),
            skipped: false,
            outputs,
        });
        Ok(())
    }
}

fn stage_error(stage: &str, source: VseamError) -> VseamError {
    match source {
        e @ VseamError::Stage { .. } => e,
        other => VseamError::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    }
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let content = serde_json::to_string_pretty(value)?;
    std::fs::write(&tmp, content).map_err(|e| VseamError::io_at(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| VseamError::io_at(path, e))?;
    Ok(())
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| VseamError::io_at(path, e))
}

/// Derive the edit request's inpaint prompt: the prompt describes the
/// desired post-edit content, so yes-answers take the counterfactual
/// question and no-answers take the original (whose queried state the edit
/// makes true).
fn inpaint_prompt_for(triple: &VQATriple, counterfactual: &str) -> String {
    match triple.binary_answer() {
        Ok(BinaryAnswer::Yes) => counterfactual.to_string(),
        _ => triple.question.clone(),
    }
}

/// The tool clients an edit stage runs against.
pub struct EditClients {
    pub language: Box<dyn LanguageClient>,
    pub segmenter: Box<dyn SegmenterClient>,
    pub inpainter: Box<dyn InpainterClient>,
    pub encoder: Box<dyn EncoderClient>,
}

/// The bundled deterministic stub clients.
pub fn stub_client_set() -> EditClients {
    EditClients {
        language: Box::new(StubLanguageClient),
        segmenter: Box::new(StubSegmenter),
        inpainter: Box::new(StubInpainter::prompt_guided()),
        encoder: Box::new(StubEncoder::default()),
    }
}

/// Run the edit stage over `triples`, writing edited images and the
/// manifest, and returning triples rewritten to reference accepted edits.
/// Triples whose edit is rejected keep their original reference.
pub fn run_edit_stage(
    triples: &[VQATriple],
    images_root: &Path,
    out_dir: &Path,
    clients: &EditClients,
    qc_threshold: f64,
    dilation: u32,
) -> Result<(Vec<VQATriple>, Vec<EditResult>)> {
    let edited_dir = out_dir.join("edited");
    std::fs::create_dir_all(&edited_dir).map_err(|e| VseamError::io_at(&edited_dir, e))?;

    let mut results = Vec::new();
    let mut rewritten = Vec::new();
    for triple in triples {
        let mut updated = triple.clone();
        match edit_one(triple, images_root, &edited_dir, clients, qc_threshold, dilation) {
            Ok(result) => {
                if result.status == EditStatus::Accepted {
                    updated.edited_image = Some(result.edited_image.clone());
                }
                results.push(result);
            }
            Err(VseamError::Client { client, message }) => {
                // A failed tool call leaves the triple's existing reference
                // in place; the failure is recorded in the manifest.
                results.push(EditResult {
                    triple_id: triple.id.clone(),
                    edited_image: String::new(),
                    provenance: EditProvenance {
                        segmenter: String::new(),
                        inpainter: String::new(),
                        dilation,
                        prompt: String::new(),
                    },
                    qc_cosine: 0.0,
                    status: EditStatus::RejectedQc,
                });
                let _ = (client, message);
            }
            Err(e) => return Err(e),
        }
        rewritten.push(updated);
    }
    Ok((rewritten, results))
}

fn edit_one(
    triple: &VQATriple,
    images_root: &Path,
    edited_dir: &Path,
    clients: &EditClients,
    qc_threshold: f64,
    dilation: u32,
) -> Result<EditResult> {
    let first_box = triple.boxes.first().ok_or_else(|| VseamError::Client {
        client: "edit-stage".to_string(),
        message: format!("triple `{}` has no box to edit", triple.id),
    })?;
    let full_answer = format!("The answer is {}.", triple.answer);
    let prompt =
        build_counterfactual_prompt(triple.level, &triple.question, &triple.answer, &full_answer)?;
    let counterfactual = clients.language.complete(&prompt)?;
    let verdict = validate_counterfactual(&triple.question, &counterfactual, DEFAULT_STOP_LIST);
    if !verdict.is_accept() {
        return Err(VseamError::Client {
            client: clients.language.name().to_string(),
            message: format!("counterfactual rejected: {verdict:?}"),
        });
    }

    let image = load_gray(&image_path(images_root, &triple.image))?;
    let inpaint_prompt = inpaint_prompt_for(triple, &counterfactual);
    let (edited, provenance) = edit_region(
        &image,
        &first_box.rect(),
        &inpaint_prompt,
        clients.segmenter.as_ref(),
        clients.inpainter.as_ref(),
        EditOptions { dilation },
    )?;

    let clean_features = clients.encoder.encode(&image)?;
    let edited_features = clients.encoder.encode(&edited)?;
    let qc = qc_similarity(&clean_features, &edited_features)?;

    let file_name = format!("{}_edited.png", triple.id);
    let out_path = edited_dir.join(&file_name);
    save_gray(&edited, &out_path)?;

    Ok(EditResult {
        triple_id: triple.id.clone(),
        edited_image: out_path.to_string_lossy().to_string(),
        provenance,
        qc_cosine: qc,
        status: if qc >= qc_threshold {
            EditStatus::Accepted
        } else {
            EditStatus::RejectedQc
        },
    })
}

#[derive(Debug, Serialize)]
struct FinalReport<'a> {
    config_fingerprint: &'a str,
    validated: usize,
    filtered: usize,
    grids: Vec<PathBuf>,
    selection: &'a HeadSetSelection,
    plan: &'a RescalePlan,
    eval: &'a EvalReport,
    significance: &'a [SignificanceReport],
}

/// Execute the full pipeline. Stages already satisfied by on-disk
/// manifests are skipped.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let out_dir = &config.run.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| VseamError::io_at(out_dir, e))?;

    let fingerprint = {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(config)?.as_bytes());
        format!("{:x}", hasher.finalize())
    };
    let mut runner = StageRunner::new(out_dir, &fingerprint)?;
    let model = config.build_model()?;

    // 1. validate
    let validated_path = out_dir.join("validated.jsonl");
    let balance_path = out_dir.join("balance.json");
    runner.stage(
        "validate",
        "",
        &[config.dataset.triples.clone()],
        || {
            let triples = load_triples(&config.dataset.triples)?;
            for t in &triples {
                let p = image_path(&config.dataset.images_root, &t.image);
                if !p.exists() {
                    return Err(VseamError::Config {
                        field: "dataset.images_root".to_string(),
                        message: format!("missing image {} for triple `{}`", p.display(), t.id),
                    });
                }
            }
            let (_, report) = balance_and_stats(&triples, config.run.seed)?;
            write_triples(&triples, &validated_path)?;
            write_json_atomic(&balance_path, &report)?;
            Ok(vec![validated_path.clone(), balance_path.clone()])
        },
    )?;

    // 2. edit (optional)
    let edit_manifest_path = out_dir.join("edits.jsonl");
    let working_path = out_dir.join("working.jsonl");
    if config.edit.enabled {
        runner.stage(
            "edit",
            &format!("qc={};dilation={}", config.edit.qc_threshold, config.edit.dilation),
            &[validated_path.clone()],
            || {
                let triples = load_triples(&validated_path)?;
                let clients = stub_client_set();
                let (rewritten, results) = run_edit_stage(
                    &triples,
                    &config.dataset.images_root,
                    out_dir,
                    &clients,
                    config.edit.qc_threshold,
                    config.edit.dilation,
                )?;
                let mut manifest = String::new();
                for r in &results {
                    manifest.push_str(&serde_json::to_string(r)?);
                    manifest.push('\n');
                }
                write_text(&edit_manifest_path, &manifest)?;
                write_triples(&rewritten, &working_path)?;
                Ok(vec![edit_manifest_path.clone(), working_path.clone()])
            },
        )?;
    } else {
        runner.stage("edit", "disabled", &[validated_path.clone()], || {
            let triples = load_triples(&validated_path)?;
            write_triples(&triples, &working_path)?;
            Ok(vec![working_path.clone()])
        })?;
    }

    // Edited images may live under either root; use the filesystem root so
    // absolute and run-relative references both resolve.
    let images_root = config.dataset.images_root.clone();

    // 3. filter (Eq. 4)
    let filtered_path = out_dir.join("filtered.jsonl");
    runner.stage("filter", "", &[working_path.clone()], || {
        let triples = load_triples(&working_path)?;
        let kept = filter_causal_pairs(&model, &triples, &images_root)?;
        if kept.is_empty() {
            return Err(VseamError::EmptyDataset);
        }
        write_triples(&kept, &filtered_path)?;
        Ok(vec![filtered_path.clone()])
    })?;

    // 4. patch grids
    let mut grid_paths = Vec::new();
    for tau_name in &config.patch.taus {
        let tau: ModuleKind = tau_name.parse()?;
        let grid_path = out_dir.join(format!("grid_{tau_name}.json"));
        let heatmap_path = out_dir.join(format!("grid_{tau_name}.svg"));
        let strategy = parse_strategy_name(&config.patch.strategy)?;
        let grouping = parse_grouping_name(&config.patch.grouping)?;
        runner.stage(
            &format!("patch-{tau_name}"),
            &format!("{};{}", config.patch.strategy, config.patch.grouping),
            &[filtered_path.clone()],
            || {
                let triples = load_triples(&filtered_path)?;
                let grid =
                    causal_score_grid(&model, &triples, &images_root, tau, &strategy, &grouping)?;
                write_text(&grid_path, &grid.to_json()?)?;
                render_heatmap(
                    HeatmapData::Causal(&grid),
                    &HeatmapStyle {
                        title: Some(format!("patched logit delta ({tau_name})")),
                        ..HeatmapStyle::default()
                    },
                    &heatmap_path,
                )?;
                Ok(vec![grid_path.clone(), heatmap_path.clone()])
            },
        )?;
        grid_paths.push(grid_path);
    }

    // 5. head scores
    let scores_path = out_dir.join("head_scores.csv");
    runner.stage("heads", "", &[working_path.clone()], || {
        let triples = load_triples(&working_path)?;
        let split = DatasetSplit::from_model(&model, triples, &images_root)?;
        let scores = head_causal_scores(&model, &split, &images_root)?;
        write_text(&scores_path, &scores_to_csv(&scores)?)?;
        Ok(vec![scores_path.clone()])
    })?;

    // 6. selection
    let selection_path = out_dir.join("selection.json");
    runner.stage(
        "select",
        &format!("k={}", config.heads.k),
        &[scores_path.clone()],
        || {
            let scores = crate::heads::scores_from_csv(
                &std::fs::read_to_string(&scores_path)
                    .map_err(|e| VseamError::io_at(&scores_path, e))?,
            )?;
            let selection = select_key_heads(&scores, config.heads.k);
            write_json_atomic(&selection_path, &selection)?;
            Ok(vec![selection_path.clone()])
        },
    )?;

    // 7. rescale plan
    let plan_path = out_dir.join("plan.json");
    runner.stage("plan", "", &[selection_path.clone()], || {
        let selection: HeadSetSelection = serde_json::from_str(
            &std::fs::read_to_string(&selection_path)
                .map_err(|e| VseamError::io_at(&selection_path, e))?,
        )?;
        let mut plan = build_rescale_plan(&selection);
        plan.meta.source = Some(config.dataset.triples.display().to_string());
        plan.meta.seed = Some(config.run.seed);
        write_text(&plan_path, &plan.to_json()?)?;
        Ok(vec![plan_path.clone()])
    })?;

    // 8. strategy evaluation
    let eval_path = out_dir.join("eval.json");
    let eval_csv_path = out_dir.join("eval.csv");
    runner.stage(
        "eval",
        &format!(
            "fraction={};repeats={};strategies={}",
            config.eval.fraction,
            config.eval.repeats,
            config.eval.strategies.join(",")
        ),
        &[working_path.clone(), plan_path.clone()],
        || {
            let triples = load_triples(&working_path)?;
            let plan = RescalePlan::from_json(
                &std::fs::read_to_string(&plan_path)
                    .map_err(|e| VseamError::io_at(&plan_path, e))?,
            )?;
            let strategies = config
                .eval
                .strategies
                .iter()
                .map(|s| parse_eval_strategy(s, config.run.seed, config.eval.random_remove_count))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate_strategies(
                &model,
                &triples,
                &images_root,
                &plan,
                &EvalParams {
                    strategies,
                    sample_fraction: config.eval.fraction,
                    repeats: config.eval.repeats,
                    seed: config.run.seed,
                    k: config.heads.k,
                },
            )?;
            write_text(&eval_path, &report.to_json()?)?;
            write_text(&eval_csv_path, &report.to_csv()?)?;
            Ok(vec![eval_path.clone(), eval_csv_path.clone()])
        },
    )?;

    // 9. significance: rescaling vs every other evaluated strategy
    let significance_path = out_dir.join("significance.json");
    runner.stage(
        "significance",
        &format!(
            "folds={};fold_size={}",
            config.significance.folds, config.significance.fold_size
        ),
        &[eval_path.clone()],
        || {
            let report: EvalReport = serde_json::from_str(
                &std::fs::read_to_string(&eval_path)
                    .map_err(|e| VseamError::io_at(&eval_path, e))?,
            )?;
            let Some(rescaling) = report.strategy("rescaling") else {
                write_json_atomic(&significance_path, &Vec::<SignificanceReport>::new())?;
                return Ok(vec![significance_path.clone()]);
            };
            let mut comparisons = Vec::new();
            for s in &report.strategies {
                if s.strategy == "rescaling" {
                    continue;
                }
                let fold_size = config
                    .significance
                    .fold_size
                    .min(rescaling.per_example.len());
                comparisons.push(bootstrap_compare(
                    &rescaling.per_example,
                    &s.per_example,
                    &s.strategy,
                    BootstrapOptions {
                        folds: config.significance.folds,
                        fold_size,
                        seed: config.run.seed,
                        with_replacement: config.significance.with_replacement,
                    },
                )?);
            }
            write_json_atomic(&significance_path, &comparisons)?;
            Ok(vec![significance_path.clone()])
        },
    )?;

    // 10. combined report
    let report_path = out_dir.join("report.json");
    runner.stage(
        "report",
        "",
        &[
            filtered_path.clone(),
            selection_path.clone(),
            plan_path.clone(),
            eval_path.clone(),
            significance_path.clone(),
        ],
        || {
            let validated = load_triples(&validated_path)?.len();
            let filtered = load_triples(&filtered_path)?.len();
            let selection: HeadSetSelection = serde_json::from_str(
                &std::fs::read_to_string(&selection_path)
                    .map_err(|e| VseamError::io_at(&selection_path, e))?,
            )?;
            let plan = RescalePlan::from_json(
                &std::fs::read_to_string(&plan_path)
                    .map_err(|e| VseamError::io_at(&plan_path, e))?,
            )?;
            let eval: EvalReport = serde_json::from_str(
                &std::fs::read_to_string(&eval_path)
                    .map_err(|e| VseamError::io_at(&eval_path, e))?,
            )?;
            let significance: Vec<SignificanceReport> = serde_json::from_str(
                &std::fs::read_to_string(&significance_path)
                    .map_err(|e| VseamError::io_at(&significance_path, e))?,
            )?;
            let final_report = FinalReport {
                config_fingerprint: &fingerprint,
                validated,
                filtered,
                grids: grid_paths.clone(),
                selection: &selection,
                plan: &plan,
                eval: &eval,
                significance: &significance,
            };
            write_json_atomic(&report_path, &final_report)?;
            Ok(vec![report_path.clone()])
        },
    )?;

    Ok(RunSummary {
        output_dir: out_dir.clone(),
        stages: runner.outcomes,
    })
}

/// Paths of the JSON/CSV reports a completed run produces, relative to the
/// run directory. Used to compare reruns byte-for-byte.
pub fn report_files(config: &RunConfig) -> Vec<PathBuf> {
    let mut files = vec![
        PathBuf::from("validated.jsonl"),
        PathBuf::from("balance.json"),
        PathBuf::from("working.jsonl"),
        PathBuf::from("filtered.jsonl"),
        PathBuf::from("head_scores.csv"),
        PathBuf::from("selection.json"),
        PathBuf::from("plan.json"),
        PathBuf::from("eval.json"),
        PathBuf::from("eval.csv"),
        PathBuf::from("significance.json"),
        PathBuf::from("report.json"),
    ];
    if config.edit.enabled {
        files.push(PathBuf::from("edits.jsonl"));
    }
    for tau in &config.patch.taus {
        files.push(PathBuf::from(format!("grid_{tau}.json")));
        files.push(PathBuf::from(format!("grid_{tau}.svg")));
    }
    files.sort();
    files
}

/// Per-example correctness maps for two named strategies of an eval
/// report, the inputs to a standalone significance comparison.
pub fn strategy_correctness(
    report: &EvalReport,
    a: &str,
    b: &str,
) -> Result<(BTreeMap<String, bool>, BTreeMap<String, bool>)> {
    let get = |name: &str| -> Result<BTreeMap<String, bool>> {
        report
            .strategy(name)
            .map(|s| s.per_example.clone())
            .ok_or_else(|| VseamError::Config {
                field: "strategy".to_string(),
                message: format!("strategy `{name}` not present in the eval report"),
            })
    };
    Ok((get(a)?, get(b)?))
}
