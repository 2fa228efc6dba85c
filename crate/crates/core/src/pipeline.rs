//! End-to-end orchestration: gate → flow → coherence → alignment → balance →
//! split, each stage reading the previous stage's accepted set.
//!
//! Per-clip work inside a stage runs on a worker pool; results are merged in
//! `clip_id` order before the next stage starts, so a run is reproducible
//! from `(manifest, config, seed)` alone. Stage outputs are materialized as
//! intermediate manifests under the run directory, which lets any stage be
//! re-run in isolation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actionmap::{alignment_deviation, projected_trajectory, AlignmentConfig};
use crate::balance::{build_plan, execute_plan, largest_remainder, SamplingConfig};
use crate::coherence::{
    coherence_filter, CoherenceConfig, DeterministicStubProvider, EmbeddingProvider,
    HttpEmbeddingProvider, SidecarProvider,
};
use crate::error::{Error, Result};
use crate::flow::{
    farneback_flow, kinematic_score, motion_filter, sample_gray_frames, FlowConfig,
    KinematicScore,
};
use crate::gate::{apply_quality_gate, segment_by_task, GateConfig, GateDecision, RejectReason};
use crate::manifest::{record_decision, ClipRecord, Decision, Manifest, PipelineStage};
use crate::metrics::MetricConfig;
use crate::rng::{derive_rng, fisher_yates};

/// Which pipeline stages actually run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub gate: bool,
    pub flow: bool,
    pub coherence: bool,
    pub alignment: bool,
    pub balance: bool,
    pub split: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            gate: true,
            flow: true,
            coherence: true,
            alignment: true,
            balance: true,
            split: true,
        }
    }
}

/// Fractions of the balanced selection assigned to each training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub sft: f64,
    pub rl: f64,
    pub a2v: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            sft: 0.8,
            rl: 0.1,
            a2v: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sft, self.rl, self.a2v];
        if all.iter().any(|r| *r < 0.0 || !r.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "splits".into(),
                message: "ratios must be nonnegative".into(),
            });
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig {
                field: "splits".into(),
                message: format!("ratios must sum to 1, got {sum}"),
            });
        }
        Ok(())
    }
}

/// Which embedding backend the coherence stage uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingProviderConfig {
    #[default]
    Stub,
    Sidecar {
        dir: PathBuf,
    },
    Http {
        endpoint: String,
    },
}

impl EmbeddingProviderConfig {
    pub fn build(&self) -> Box<dyn EmbeddingProvider> {
        match self {
            EmbeddingProviderConfig::Stub => Box::new(DeterministicStubProvider),
            EmbeddingProviderConfig::Sidecar { dir } => Box::new(SidecarProvider::new(dir)),
            EmbeddingProviderConfig::Http { endpoint } => {
                Box::new(HttpEmbeddingProvider::new(endpoint.clone()))
            }
        }
    }
}

/// External judge services, used by the mining commands rather than the
/// filtering run itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct JudgeConfig {
    /// Base URL serving /propose, /answer, /compare, /verify_alignment.
    pub endpoint: Option<String>,
    /// Transcript to replay instead of (or while recording from) a live
    /// service.
    pub transcript: Option<PathBuf>,
    pub beta: f64,
}

/// One config file drives the whole run; sections are named after modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stages: StageToggles,
    pub splits: SplitRatios,
    pub gate: GateConfig,
    pub flow: FlowConfig,
    pub coherence: CoherenceConfig,
    pub alignment: AlignmentConfig,
    pub balance: SamplingConfig,
    pub render: crate::actionmap::RenderStyle,
    pub metrics: MetricConfig,
    pub judge: JudgeConfig,
    pub embedding_provider: EmbeddingProviderConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig {
            field: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.splits.validate()?;
        self.gate.validate()?;
        self.flow.validate()?;
        self.coherence.validate()?;
        self.balance.validate()?;
        self.render.validate()?;
        self.metrics.validate()?;
        Ok(())
    }
}

/// Per-stage accounting in the run report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub enabled: bool,
    pub input_count: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Records emitted downstream; differs from `accepted` when
    /// segmentation splits episodes into children.
    pub emitted: usize,
    pub reject_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub sft: usize,
    pub rl: usize,
    pub a2v: usize,
}

/// The reproducible artifact of one `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub final_count: usize,
    pub split_sizes: Option<SplitSizes>,
    /// True when the run used the built-in split ratios rather than values
    /// pinned in the config file.
    pub split_ratios_defaulted: bool,
    pub config: PipelineConfig,
}

/// Disjoint training splits covering the whole selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub sft: Vec<String>,
    pub rl: Vec<String>,
    pub a2v: Vec<String>,
}

/// Seeded shuffle of the sorted ids, partitioned contiguously with
/// largest-remainder sizing, each split re-sorted for stable output.
pub fn make_splits(selected: &[String], ratios: &SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let mut ids: Vec<String> = selected.to_vec();
    ids.sort_unstable();
    let mut rng = derive_rng(seed, "pipeline/split");
    fisher_yates(&mut ids, &mut rng);
    let sizes = largest_remainder(ids.len() as u64, &[ratios.sft, ratios.rl, ratios.a2v]);
    let sft_end = sizes[0] as usize;
    let rl_end = sft_end + sizes[1] as usize;
    let mut sft = ids[..sft_end].to_vec();
    let mut rl = ids[sft_end..rl_end].to_vec();
    let mut a2v = ids[rl_end..].to_vec();
    sft.sort_unstable();
    rl.sort_unstable();
    a2v.sort_unstable();
    Ok(Splits { sft, rl, a2v })
}

// ---------------------------------------------------------------------------
// Stage workers
// ---------------------------------------------------------------------------

fn stage_error(stage: PipelineStage, clip_id: &str, source: Error) -> Error {
    Error::Stage {
        stage: stage.name().to_string(),
        clip_id: clip_id.to_string(),
        source: Box::new(source),
    }
}

/// Outcome of one clip through one filter stage.
enum ClipOutcome {
    Accepted(Vec<ClipRecord>),
    Rejected(Box<ClipRecord>, RejectReason),
}

fn gate_one(record: &ClipRecord, cfg: &GateConfig) -> Result<ClipOutcome> {
    let border = record.scores.get("border_flow").copied();
    let decision = apply_quality_gate(record, cfg, border);
    if !decision.accepted {
        let rejected =
            record_decision(record, PipelineStage::Gate, Decision::Reject, decision.reason.as_str())?;
        return Ok(ClipOutcome::Rejected(Box::new(rejected), decision.reason));
    }
    let needs_segmentation = record.frame_count > cfg.max_frames
        || record
            .frame_task_index
            .as_ref()
            .is_some_and(|fti| fti.windows(2).any(|w| w[0] != w[1]));
    let children = if needs_segmentation {
        segment_by_task(record, cfg)?.children
    } else {
        vec![record.clone()]
    };
    let emitted = children.len() as u32;
    // Children inherit the parent's acceptance, each with its own ledger
    // entry; the parent's decision carries the emitted-segment count.
    let decision = GateDecision {
        accepted: true,
        reason: RejectReason::Ok,
        segments_emitted: emitted,
    };
    debug_assert!(decision.accepted);
    let children = children
        .iter()
        .map(|child| {
            record_decision(child, PipelineStage::Gate, Decision::Accept, "ok").map(|mut c| {
                debug_assert!(c.frame_count <= cfg.max_frames);
                c.scores
                    .insert("gate_segments".into(), decision.segments_emitted as f64);
                c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipOutcome::Accepted(children))
}

fn flow_one(record: &ClipRecord, cfg: &FlowConfig) -> Result<ClipOutcome> {
    let precomputed = match (
        record.scores.get("flow_clip_mean"),
        record.scores.get("flow_net_ratio"),
    ) {
        (Some(&mean), Some(&ratio)) => Some(KinematicScore {
            pair_means: vec![mean],
            clip_mean: mean,
            net_to_path_ratio: ratio,
        }),
        _ => None,
    };
    let score = match precomputed {
        Some(s) => s,
        None => {
            let frames = sample_gray_frames(record, cfg)?;
            let flows = frames
                .windows(2)
                .map(|pair| farneback_flow(&pair[0], &pair[1], cfg))
                .collect::<Result<Vec<_>>>()?;
            kinematic_score(&flows, cfg)?
        }
    };
    let decision = motion_filter(&score, cfg);
    let mut updated = record.clone();
    updated
        .scores
        .insert("flow_clip_mean".into(), score.clip_mean);
    updated
        .scores
        .insert("flow_net_ratio".into(), score.net_to_path_ratio);
    if decision.accepted {
        let accepted =
            record_decision(&updated, PipelineStage::Flow, Decision::Accept, "ok")?;
        Ok(ClipOutcome::Accepted(vec![accepted]))
    } else {
        let rejected = record_decision(
            &updated,
            PipelineStage::Flow,
            Decision::Reject,
            decision.reason.as_str(),
        )?;
        Ok(ClipOutcome::Rejected(Box::new(rejected), decision.reason))
    }
}

fn coherence_one(
    record: &ClipRecord,
    provider: &dyn EmbeddingProvider,
    cfg: &CoherenceConfig,
) -> Result<ClipOutcome> {
    let (updated, decision) = coherence_filter(record, provider, cfg)?;
    if decision.accepted {
        let accepted =
            record_decision(&updated, PipelineStage::Coherence, Decision::Accept, "ok")?;
        Ok(ClipOutcome::Accepted(vec![accepted]))
    } else {
        let rejected = record_decision(
            &updated,
            PipelineStage::Coherence,
            Decision::Reject,
            decision.reason.as_str(),
        )?;
        Ok(ClipOutcome::Rejected(Box::new(rejected), decision.reason))
    }
}

/// Detected gripper centers per clip, from an external detector.
pub type DetectionTable = BTreeMap<String, Vec<(f64, f64)>>;

fn alignment_one(
    record: &ClipRecord,
    detections: Option<&DetectionTable>,
    cfg: &AlignmentConfig,
) -> Result<ClipOutcome> {
    let deviation = if let Some(&d) = record.scores.get("alignment_deviation") {
        Some(d)
    } else if let Some(detected) = detections.and_then(|t| t.get(&record.clip_id)) {
        let projected = projected_trajectory(&record.camera, &record.action_frames)?;
        Some(alignment_deviation(&projected, detected)?)
    } else {
        None // nothing to verify against: pass through
    };
    let mut updated = record.clone();
    if let Some(d) = deviation {
        updated.scores.insert("alignment_deviation".into(), d);
    }
    match deviation {
        Some(d) if d > cfg.max_mean_deviation_px => {
            let rejected = record_decision(
                &updated,
                PipelineStage::Alignment,
                Decision::Reject,
                RejectReason::Misaligned.as_str(),
            )?;
            Ok(ClipOutcome::Rejected(Box::new(rejected), RejectReason::Misaligned))
        }
        _ => {
            let accepted =
                record_decision(&updated, PipelineStage::Alignment, Decision::Accept, "ok")?;
            Ok(ClipOutcome::Accepted(vec![accepted]))
        }
    }
}

// ---------------------------------------------------------------------------
// The run
// ---------------------------------------------------------------------------

fn write_stage_manifests(
    out_dir: &Path,
    stage: PipelineStage,
    index: usize,
    accepted: &Manifest,
    rejected: &[ClipRecord],
) -> Result<()> {
    let stage_path = out_dir
        .join("stages")
        .join(format!("{index:02}_{}.jsonl", stage.name()));
    crate::manifest::save_manifest(accepted, &stage_path)?;
    if !rejected.is_empty() {
        let mut sorted = rejected.to_vec();
        sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let rejects = Manifest::from_records(sorted)?;
        let path = out_dir
            .join("rejects")
            .join(format!("{}.jsonl", stage.name()));
        crate::manifest::save_manifest(&rejects, &path)?;
    }
    Ok(())
}

/// Output of running one stage over a manifest.
pub struct StageRun {
    pub report: StageReport,
    pub output: Manifest,
    pub rejected: Vec<ClipRecord>,
}

/// Runs a single filter stage in isolation, the building block behind the
/// per-stage CLI subcommands. Balance and split have their own entry points
/// ([`crate::balance::build_plan`], [`make_splits`]).
pub fn run_stage(
    stage: PipelineStage,
    config: &PipelineConfig,
    input: &Manifest,
    detections: Option<&DetectionTable>,
) -> Result<StageRun> {
    match stage {
        PipelineStage::Gate => {
            run_filter_stage(stage, true, input, |r| gate_one(r, &config.gate))
        }
        PipelineStage::Flow => {
            run_filter_stage(stage, true, input, |r| flow_one(r, &config.flow))
        }
        PipelineStage::Coherence => {
            let provider = config.embedding_provider.build();
            run_filter_stage(stage, true, input, |r| {
                coherence_one(r, provider.as_ref(), &config.coherence)
            })
        }
        PipelineStage::Alignment => run_filter_stage(stage, true, input, |r| {
            alignment_one(r, detections, &config.alignment)
        }),
        other => Err(Error::InvalidConfig {
            field: "stage".into(),
            message: format!("{other} is not a standalone filter stage"),
        }),
    }
}

fn run_filter_stage<F>(stage: PipelineStage, enabled: bool, input: &Manifest, f: F) -> Result<StageRun>
where
    F: Fn(&ClipRecord) -> Result<ClipOutcome> + Sync,
{
    let input_count = input.len();
    if !enabled {
        return Ok(StageRun {
            report: StageReport {
                stage: stage.name().to_string(),
                enabled: false,
                input_count,
                accepted: input_count,
                rejected: 0,
                emitted: input_count,
                reject_reasons: BTreeMap::new(),
            },
            output: input.clone(),
            rejected: Vec::new(),
        });
    }
    let outcomes: Vec<ClipOutcome> = input
        .records()
        .par_iter()
        .map(|r| f(r).map_err(|e| stage_error(stage, &r.clip_id, e)))
        .collect::<Result<_>>()?;

    let mut accepted_records = Vec::new();
    let mut rejected = Vec::new();
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut accepted_count = 0usize;
    for outcome in outcomes {
        match outcome {
            ClipOutcome::Accepted(children) => {
                accepted_count += 1;
                accepted_records.extend(children);
            }
            ClipOutcome::Rejected(record, reason) => {
                *reasons.entry(reason.as_str().to_string()).or_default() += 1;
                rejected.push(*record);
            }
        }
    }
    let output = Manifest::from_records(accepted_records)?;
    Ok(StageRun {
        report: StageReport {
            stage: stage.name().to_string(),
            enabled: true,
            input_count,
            accepted: accepted_count,
            rejected: rejected.len(),
            emitted: output.len(),
            reject_reasons: reasons,
        },
        output,
        rejected,
    })
}

/// Runs every enabled stage in order and materializes all artifacts under
/// `config.out_dir`: intermediate manifests, rejected records, the sampling
/// plan, split lists, and the run report. Byte-identical given the same
/// `(manifest, config)`.
pub fn run_pipeline(config: &PipelineConfig, manifest: &Manifest) -> Result<RunReport> {
    run_pipeline_with(config, manifest, None)
}

/// [`run_pipeline`] with an optional external detection table for the
/// alignment stage.
pub fn run_pipeline_with(
    config: &PipelineConfig,
    manifest: &Manifest,
    detections: Option<&DetectionTable>,
) -> Result<RunReport> {
    config.validate()?;
    let out_dir = &config.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut stages = Vec::new();
    let mut current = manifest.clone();

    // gate
    let run = run_filter_stage(PipelineStage::Gate, config.stages.gate, &current, |r| {
        gate_one(r, &config.gate)
    })?;
    write_stage_manifests(out_dir, PipelineStage::Gate, 1, &run.output, &run.rejected)?;
    stages.push(run.report);
    current = run.output;

    // flow
    let run = run_filter_stage(PipelineStage::Flow, config.stages.flow, &current, |r| {
        flow_one(r, &config.flow)
    })?;
    write_stage_manifests(out_dir, PipelineStage::Flow, 2, &run.output, &run.rejected)?;
    stages.push(run.report);
    current = run.output;

    // coherence
    let provider = config.embedding_provider.build();
    let run = run_filter_stage(
        PipelineStage::Coherence,
        config.stages.coherence,
        &current,
        |r| coherence_one(r, provider.as_ref(), &config.coherence),
    )?;
    write_stage_manifests(out_dir, PipelineStage::Coherence, 3, &run.output, &run.rejected)?;
    stages.push(run.report);
    current = run.output;

    // alignment
    let run = run_filter_stage(
        PipelineStage::Alignment,
        config.stages.alignment,
        &current,
        |r| alignment_one(r, detections, &config.alignment),
    )?;
    write_stage_manifests(out_dir, PipelineStage::Alignment, 4, &run.output, &run.rejected)?;
    stages.push(run.report);
    current = run.output;

    // balance
    let selected_ids: Vec<String>;
    if config.stages.balance && !current.is_empty() {
        let mut balance_cfg = config.balance.clone();
        balance_cfg.seed = config.seed;
        let plan = build_plan(&current, &balance_cfg)?;
        let plan_json =
            serde_json::to_string_pretty(&plan).expect("plan serialization cannot fail");
        let plan_path = out_dir.join("plan.json");
        std::fs::write(&plan_path, plan_json).map_err(|e| Error::io(&plan_path, e))?;
        selected_ids = execute_plan(&current, &plan, config.seed)?;

        let selected_set: std::collections::BTreeSet<&str> =
            selected_ids.iter().map(|s| s.as_str()).collect();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for r in current.iter() {
            if selected_set.contains(r.clip_id.as_str()) {
                kept.push(record_decision(r, PipelineStage::Balance, Decision::Accept, "selected")?);
            } else {
                dropped.push(record_decision(
                    r,
                    PipelineStage::Balance,
                    Decision::Reject,
                    "not_selected",
                )?);
            }
        }
        let input_count = current.len();
        current = Manifest::from_records(kept)?;
        stages.push(StageReport {
            stage: PipelineStage::Balance.name().to_string(),
            enabled: true,
            input_count,
            accepted: current.len(),
            rejected: dropped.len(),
            emitted: current.len(),
            reject_reasons: if dropped.is_empty() {
                BTreeMap::new()
            } else {
                BTreeMap::from([("not_selected".to_string(), dropped.len())])
            },
        });
        write_stage_manifests(out_dir, PipelineStage::Balance, 5, &current, &dropped)?;
    } else {
        selected_ids = current.iter().map(|r| r.clip_id.clone()).collect();
        stages.push(StageReport {
            stage: PipelineStage::Balance.name().to_string(),
            enabled: false,
            input_count: current.len(),
            accepted: current.len(),
            rejected: 0,
            emitted: current.len(),
            reject_reasons: BTreeMap::new(),
        });
    }

    // split
    let (split_sizes, split_ratios_defaulted) = if config.stages.split {
        let splits = make_splits(&selected_ids, &config.splits, config.seed)?;
        for (name, ids) in [("sft", &splits.sft), ("rl", &splits.rl), ("a2v", &splits.a2v)] {
            let path = out_dir.join(format!("{name}.txt"));
            std::fs::write(&path, ids.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
        }
        let split_of = |id: &str| {
            if splits.sft.binary_search_by(|x| x.as_str().cmp(id)).is_ok() {
                "sft"
            } else if splits.rl.binary_search_by(|x| x.as_str().cmp(id)).is_ok() {
                "rl"
            } else {
                "a2v"
            }
        };
        let records = current
            .iter()
            .map(|r| record_decision(r, PipelineStage::Split, Decision::Accept, split_of(&r.clip_id)))
            .collect::<Result<Vec<_>>>()?;
        let input_count = current.len();
        current = Manifest::from_records(records)?;
        write_stage_manifests(out_dir, PipelineStage::Split, 6, &current, &[])?;
        stages.push(StageReport {
            stage: PipelineStage::Split.name().to_string(),
            enabled: true,
            input_count,
            accepted: current.len(),
            rejected: 0,
            emitted: current.len(),
            reject_reasons: BTreeMap::new(),
        });
        (
            Some(SplitSizes {
                sft: splits.sft.len(),
                rl: splits.rl.len(),
                a2v: splits.a2v.len(),
            }),
            config.splits == SplitRatios::default(),
        )
    } else {
        stages.push(StageReport {
            stage: PipelineStage::Split.name().to_string(),
            enabled: false,
            input_count: current.len(),
            accepted: current.len(),
            rejected: 0,
            emitted: current.len(),
            reject_reasons: BTreeMap::new(),
        });
        (None, config.splits == SplitRatios::default())
    };

    let report = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        stages,
        final_count: current.len(),
        split_sizes,
        split_ratios_defaulted,
        config: config.clone(),
    };
    let report_json =
        serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report_json).map_err(|e| Error::io(&report_path, e))?;
    crate::manifest::save_manifest(&current, &out_dir.join("final.jsonl"))?;
    Ok(report)
}
