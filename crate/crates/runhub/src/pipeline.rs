//! Pipeline stages. Each stage resolves its inputs in the workspace, runs
//! one module operation, stores its outputs as new artifacts and writes a
//! run manifest whose config echo has every input id filled in.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use scrub_core::attack::{attack_sweep, SweepOptions};
use scrub_core::genmodels::{
    train_gan, train_probe, train_vae, DiscriminatorParams, GeneratorParams, ModelCheckpoint,
    ModelKind, ProbeParams, VaeParams,
};
use scrub_core::latentfeat::{collect_latents, identify_target, Labeler, LatentSource, TargetVector};
use scrub_core::metrics::{ablation_csv, ablation_run, dataset_stats, evaluate, EvalModels, EvalReport, LatentSpace};
use scrub_core::synthdata::{sample_dataset, DatasetManifest, LabeledImage, DATASET_FORMAT_VERSION};
use scrub_core::unlearner::{train_oracle, unlearn_with_progress, LossBreakdown, OracleInit, Track};

use crate::config::{
    AblateRun, AttackRun, EvalRun, IdentifyRun, OracleRun, SynthRun, TrainGanRun, TrainProbeRun,
    TrainVaeRun, UnlearnRun,
};
use crate::error::RunError;
use crate::workspace::{
    new_run_id, parse_latent_id, timestamp, ArtifactKind, ArtifactMeta, NewArtifact, Payload,
    RunManifest, RunStatus, Workspace,
};

const GENERATORS: &[ArtifactKind] = &[ArtifactKind::Gan, ArtifactKind::Vae];
const PROBES: &[ArtifactKind] = &[ArtifactKind::Probe];
const TRAIN_HINT: &str = "run train-gan or train-vae first";
const PROBE_HINT: &str = "run train-probe first";
const DATASET_HINT: &str = "run synth first";

/// Bookkeeping for one stage execution.
struct Run<'a> {
    ws: &'a Workspace,
    run_id: String,
    stage: &'static str,
    command: &'static str,
    started_at: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    seeds: BTreeMap<String, u64>,
}

impl<'a> Run<'a> {
    fn new(ws: &'a Workspace, command: &'static str, stage: &'static str, run_id: Option<String>) -> Self {
        Self {
            ws,
            run_id: run_id.unwrap_or_else(new_run_id),
            stage,
            command,
            started_at: timestamp(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
        }
    }

    fn input(&mut self, role: &str, meta: &ArtifactMeta) {
        self.inputs.insert(role.to_string(), meta.id.clone());
    }

    fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    fn store(
        &mut self,
        kind: ArtifactKind,
        role: &str,
        config: &Value,
        feature: Option<scrub_core::synthdata::FeatureName>,
        payload: Payload<'_>,
    ) -> Result<ArtifactMeta, RunError> {
        let meta = self.ws.write_artifact(
            NewArtifact {
                kind,
                stage: self.stage.to_string(),
                run_id: self.run_id.clone(),
                inputs: self.inputs.clone(),
                config: config.clone(),
                feature,
                role: role.to_string(),
            },
            payload,
        )?;
        self.outputs.push(meta.id.clone());
        Ok(meta)
    }

    fn finish(self, config: Value, metrics: Value) -> Result<RunManifest, RunError> {
        let manifest = RunManifest {
            run_id: self.run_id,
            stage: self.stage.to_string(),
            command: self.command.to_string(),
            status: RunStatus::Completed,
            error: None,
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            seeds: self.seeds,
            started_at: self.started_at,
            finished_at: timestamp(),
            metrics,
        };
        self.ws.write_manifest(&manifest)?;
        Ok(manifest)
    }
}

fn echo(cfg: &impl Serialize) -> Result<Value, RunError> {
    Ok(serde_json::to_value(cfg)?)
}

/// A stored generator with everything needed to continue from it.
pub struct LoadedModel {
    pub meta: ArtifactMeta,
    pub generator: GeneratorParams,
    pub discriminator: Option<DiscriminatorParams>,
    pub vae: Option<VaeParams>,
}

impl LoadedModel {
    pub fn kind(&self) -> ModelKind {
        if self.vae.is_some() {
            ModelKind::Vae
        } else {
            ModelKind::Gan
        }
    }

    pub fn track(&self) -> Track {
        match self.kind() {
            ModelKind::Vae => Track::Vae,
            _ => Track::Gan,
        }
    }

    pub fn source(&self) -> LatentSource<'_> {
        match &self.vae {
            Some(v) => LatentSource::Vae(v),
            None => LatentSource::Gan(&self.generator),
        }
    }

    pub fn latent_space(&self) -> LatentSpace<'_> {
        match &self.vae {
            Some(v) => LatentSpace::Encoder(v),
            None => LatentSpace::Prior,
        }
    }

    /// Checkpoint of a derived generator of the same kind; VAEs keep their encoder.
    fn derived(&self, generator: GeneratorParams, seed: u64, config: Value) -> ModelCheckpoint {
        match &self.vae {
            Some(v) => ModelCheckpoint::from_vae(
                &VaeParams {
                    decoder: generator,
                    ..v.clone()
                },
                seed,
                config,
            ),
            None => ModelCheckpoint::from_gan(&generator, None, seed, config),
        }
    }
}

pub fn load_model(ws: &Workspace, meta: ArtifactMeta) -> Result<LoadedModel, RunError> {
    let ckpt = ws.load_checkpoint(&meta)?;
    Ok(match ckpt.kind() {
        ModelKind::Gan => {
            let (generator, discriminator) = ckpt.to_gan()?;
            LoadedModel {
                meta,
                generator,
                discriminator,
                vae: None,
            }
        }
        ModelKind::Vae => {
            let vae = ckpt.to_vae()?;
            LoadedModel {
                meta,
                generator: vae.decoder.clone(),
                discriminator: None,
                vae: Some(vae),
            }
        }
        ModelKind::Probe => {
            return Err(RunError::invalid(format!("artifact `{}` is a probe, not a generator", meta.id)))
        }
    })
}

pub fn resolve_model(ws: &Workspace, id: Option<&str>) -> Result<LoadedModel, RunError> {
    let meta = ws.resolve(id, GENERATORS, "checkpoint", TRAIN_HINT)?;
    load_model(ws, meta)
}

pub fn resolve_probe(ws: &Workspace, id: Option<&str>) -> Result<(ArtifactMeta, ProbeParams), RunError> {
    let meta = ws.resolve(id, PROBES, "probe checkpoint", PROBE_HINT)?;
    let probe = ws.load_checkpoint(&meta)?.to_probe()?;
    Ok((meta, probe))
}

/// The dataset a model descends from, following `model` inputs back to training.
pub fn lineage_dataset(ws: &Workspace, meta: &ArtifactMeta) -> Result<Option<String>, RunError> {
    let mut current = meta.clone();
    for _ in 0..64 {
        if let Some(d) = current.inputs.get("dataset") {
            return Ok(Some(d.clone()));
        }
        match current.inputs.get("model") {
            Some(parent) => current = ws.meta(parent)?,
            None => return Ok(None),
        }
    }
    Ok(None)
}

fn resolve_dataset(
    ws: &Workspace,
    explicit: Option<&str>,
    model: Option<&ArtifactMeta>,
) -> Result<(ArtifactMeta, Vec<LabeledImage>), RunError> {
    let id = match (explicit, model) {
        (Some(id), _) => Some(id.to_string()),
        (None, Some(m)) => lineage_dataset(ws, m)?,
        (None, None) => None,
    };
    let meta = ws.resolve(id.as_deref(), &[ArtifactKind::Dataset], "dataset", DATASET_HINT)?;
    let data = ws.load_dataset(&meta)?;
    Ok((meta, data))
}

pub fn synth(ws: &Workspace, cfg: SynthRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "synth", "synth", None);
    let data = sample_dataset(cfg.n, cfg.seed, cfg.bar_prob)?;
    run.seed("dataset", cfg.seed);
    let manifest = DatasetManifest {
        seed: cfg.seed,
        n: cfg.n,
        bar_prob: cfg.bar_prob,
        version: DATASET_FORMAT_VERSION,
    };
    let config = echo(&cfg)?;
    run.store(ArtifactKind::Dataset, "", &config, None, Payload::Dataset(&manifest, &data))?;
    let bars = data.iter().filter(|d| d.spec().has_bar).count();
    run.finish(config, json!({ "n": data.len(), "bar_fraction": bars as f64 / data.len() as f64 }))
}

pub fn train_gan_stage(ws: &Workspace, mut cfg: TrainGanRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "train-gan", "train", None);
    let (dmeta, data) = resolve_dataset(ws, cfg.dataset.as_deref(), None)?;
    cfg.dataset = Some(dmeta.id.clone());
    run.input("dataset", &dmeta);
    run.seed("train", cfg.gan.seed);
    let model = train_gan(&data, &cfg.gan)?;
    let config = echo(&cfg)?;
    let ckpt = ModelCheckpoint::from_gan(
        &model.generator,
        Some(&model.discriminator),
        cfg.gan.seed,
        echo(&cfg.gan)?,
    );
    let meta = run.store(ArtifactKind::Gan, "", &config, None, Payload::Checkpoint(&ckpt))?;
    let last = model.history.last();
    run.finish(
        config,
        json!({
            "model": meta.id,
            "steps": model.history.len(),
            "final_d_loss": last.map(|s| s.d_loss),
            "final_g_loss": last.map(|s| s.g_loss),
        }),
    )
}

pub fn train_vae_stage(ws: &Workspace, mut cfg: TrainVaeRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "train-vae", "train", None);
    let (dmeta, data) = resolve_dataset(ws, cfg.dataset.as_deref(), None)?;
    cfg.dataset = Some(dmeta.id.clone());
    run.input("dataset", &dmeta);
    run.seed("train", cfg.vae.seed);
    let trained = train_vae(&data, &cfg.vae)?;
    let config = echo(&cfg)?;
    let ckpt = ModelCheckpoint::from_vae(&trained.params, cfg.vae.seed, echo(&cfg.vae)?);
    let meta = run.store(ArtifactKind::Vae, "", &config, None, Payload::Checkpoint(&ckpt))?;
    run.finish(
        config,
        json!({
            "model": meta.id,
            "steps": trained.history.len(),
            "final_loss": trained.history.last(),
        }),
    )
}

pub fn train_probe_stage(ws: &Workspace, mut cfg: TrainProbeRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "train-probe", "train", None);
    let (dmeta, data) = resolve_dataset(ws, cfg.dataset.as_deref(), None)?;
    cfg.dataset = Some(dmeta.id.clone());
    run.input("dataset", &dmeta);
    run.seed("train", cfg.probe.seed);
    let trained = train_probe(&data, &cfg.probe)?;
    let config = echo(&cfg)?;
    let ckpt = ModelCheckpoint::from_probe(&trained.params, echo(&cfg.probe)?);
    let meta = run.store(ArtifactKind::Probe, "", &config, None, Payload::Checkpoint(&ckpt))?;
    let mut metrics = serde_json::to_value(&trained.report)?;
    metrics["probe"] = json!(meta.id);
    run.finish(config, metrics)
}

pub fn identify(ws: &Workspace, mut cfg: IdentifyRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "identify", "identify", None);
    let selection = match cfg.selection.as_deref() {
        Some(id) => Some(ws.selection(id)?),
        None => None,
    };
    if let Some(sel) = &selection {
        match cfg.model.as_deref() {
            Some(m) if m != sel.model_id => {
                return Err(RunError::invalid(format!(
                    "selection `{}` was made on model `{}`, not `{m}`",
                    cfg.selection.as_deref().unwrap_or_default(),
                    sel.model_id
                )))
            }
            _ => cfg.model = Some(sel.model_id.clone()),
        }
        cfg.feature = sel.feature;
        cfg.probe = None;
    }
    let model = resolve_model(ws, cfg.model.as_deref())?;
    cfg.model = Some(model.meta.id.clone());
    run.input("model", &model.meta);

    let split = match &selection {
        Some(sel) => {
            let (seed, pairs) = selection_pairs(sel)?;
            cfg.n = pairs.len();
            cfg.seed = seed;
            run.inputs
                .insert("selection".into(), cfg.selection.clone().unwrap_or_default());
            collect_latents(model.source(), Labeler::Selections(&pairs), cfg.feature, pairs.len(), seed)?
        }
        None => {
            let (pmeta, probe) = resolve_probe(ws, cfg.probe.as_deref())?;
            cfg.probe = Some(pmeta.id.clone());
            run.input("probe", &pmeta);
            collect_latents(model.source(), Labeler::Probe(&probe), cfg.feature, cfg.n, cfg.seed)?
        }
    };
    run.seed("samples", cfg.seed);
    let mut tv = identify_target(&split.pos, &split.neg, cfg.feature)?;
    tv.model_checkpoint_id = Some(model.meta.id.clone());
    let config = echo(&cfg)?;
    let meta = run.store(
        ArtifactKind::Target,
        "",
        &config,
        Some(cfg.feature),
        Payload::Json(serde_json::to_value(&tv)?),
    )?;
    run.finish(
        config,
        json!({
            "target": meta.id,
            "n_pos": tv.n_pos,
            "n_neg": tv.n_neg,
            "raw_norm": tv.raw_norm,
            "threshold": tv.threshold,
        }),
    )
}

/// Selection entries as `(index, selected)` pairs of a single latent stream.
pub fn selection_pairs(sel: &crate::workspace::SelectionSet) -> Result<(u64, Vec<(u64, bool)>), RunError> {
    let mut seed = None;
    let mut pairs = Vec::with_capacity(sel.selections.len());
    for e in &sel.selections {
        let (s, i) = parse_latent_id(&e.latent_id)
            .ok_or_else(|| RunError::invalid(format!("malformed latent id `{}`", e.latent_id)))?;
        match seed {
            None => seed = Some(s),
            Some(prev) if prev != s => {
                return Err(RunError::invalid(format!(
                    "selection mixes sample seeds {prev} and {s}; one batch per selection"
                )))
            }
            Some(_) => {}
        }
        pairs.push((i, e.selected));
    }
    let seed = seed.ok_or_else(|| RunError::invalid("selection is empty"))?;
    Ok((seed, pairs))
}

fn resolve_target(
    ws: &Workspace,
    id: Option<&str>,
    model_id: Option<&str>,
) -> Result<Option<(ArtifactMeta, TargetVector)>, RunError> {
    if let Some(id) = id {
        let meta = ws.meta_of(id, &[ArtifactKind::Target])?;
        let tv = ws.load_target(&meta)?;
        return Ok(Some((meta, tv)));
    }
    for meta in ws.list(Some(&[ArtifactKind::Target]))?.into_iter().rev() {
        if model_id.is_none() || meta.inputs.get("model").map(String::as_str) == model_id {
            let tv = ws.load_target(&meta)?;
            return Ok(Some((meta, tv)));
        }
    }
    Ok(None)
}

fn require_target(
    ws: &Workspace,
    id: Option<&str>,
    model: &LoadedModel,
) -> Result<(ArtifactMeta, TargetVector), RunError> {
    let (meta, tv) = resolve_target(ws, id, Some(&model.meta.id))?.ok_or_else(|| RunError::Missing {
        what: "target vector".into(),
        detail: format!("no target identified on model `{}` (run identify first)", model.meta.id),
    })?;
    if let Some(owner) = &tv.model_checkpoint_id {
        if owner != &model.meta.id {
            return Err(RunError::invalid(format!(
                "target `{}` was identified on model `{owner}`, not `{}`",
                meta.id, model.meta.id
            )));
        }
    }
    Ok((meta, tv))
}

/// Model named by the config, else the one the target was identified on.
fn model_for_target(ws: &Workspace, model: Option<&str>, target: Option<&str>) -> Result<LoadedModel, RunError> {
    if model.is_none() {
        if let Some(t) = target {
            let meta = ws.meta_of(t, &[ArtifactKind::Target])?;
            if let Some(owner) = ws.load_target(&meta)?.model_checkpoint_id {
                return resolve_model(ws, Some(&owner));
            }
        }
    }
    resolve_model(ws, model)
}

pub fn unlearn_stage(
    ws: &Workspace,
    mut cfg: UnlearnRun,
    run_id: Option<String>,
    on_step: &mut dyn FnMut(usize, &LossBreakdown),
) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "unlearn", "unlearn", run_id);
    let model = model_for_target(ws, cfg.model.as_deref(), cfg.target.as_deref())?;
    let (tmeta, tv) = require_target(ws, cfg.target.as_deref(), &model)?;
    cfg.model = Some(model.meta.id.clone());
    cfg.target = Some(tmeta.id.clone());
    cfg.unlearn.track = model.track();
    run.input("model", &model.meta);
    run.input("target", &tmeta);
    run.seed("unlearn", cfg.unlearn.seed);

    let (g, report) = unlearn_with_progress(&model.generator, &tv, &cfg.unlearn, on_step)?;
    let config = echo(&cfg)?;
    let ckpt = model.derived(g, cfg.unlearn.seed, echo(&cfg.unlearn)?);
    let gmeta = run.store(
        model.meta.kind,
        "",
        &config,
        Some(cfg.unlearn.feature),
        Payload::Checkpoint(&ckpt),
    )?;
    let mut stored = report.clone();
    stored.final_params_id = Some(gmeta.id.clone());
    // Wall time goes to the manifest so the stored report is reproducible.
    let mut stored = serde_json::to_value(&stored)?;
    if let Some(obj) = stored.as_object_mut() {
        obj.remove("wall_time_secs");
    }
    let rmeta = run.store(ArtifactKind::Unlearn, "report", &config, Some(cfg.unlearn.feature), Payload::Json(stored))?;
    let last = |v: &Vec<f64>| v.last().copied();
    run.finish(
        config,
        json!({
            "model": gmeta.id,
            "report": rmeta.id,
            "steps": report.curves.len(),
            "final_recon": last(&report.curves.recon),
            "final_unlearn": last(&report.curves.unlearn),
            "final_percep": last(&report.curves.percep),
            "final_total": last(&report.curves.total),
            "wall_time_secs": report.wall_time_secs,
        }),
    )
}

pub fn oracle_stage(ws: &Workspace, mut cfg: OracleRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "oracle", "oracle", None);
    let model = resolve_model(ws, cfg.model.as_deref())?;
    let (dmeta, data) = resolve_dataset(ws, cfg.dataset.as_deref(), Some(&model.meta))?;
    cfg.model = Some(model.meta.id.clone());
    cfg.dataset = Some(dmeta.id.clone());
    run.input("model", &model.meta);
    run.input("dataset", &dmeta);
    run.seed("oracle", cfg.oracle.seed);
    let init = match (&model.vae, &model.discriminator) {
        (Some(v), _) => OracleInit::Vae(v.clone()),
        (None, Some(d)) => OracleInit::Gan {
            generator: model.generator.clone(),
            discriminator: d.clone(),
        },
        (None, None) => {
            return Err(RunError::invalid(format!(
                "model `{}` has no discriminator; oracle retraining needs a train-gan checkpoint",
                model.meta.id
            )))
        }
    };
    let g = train_oracle(init, &data, cfg.feature, &cfg.oracle)?;
    let config = echo(&cfg)?;
    let ckpt = model.derived(g, cfg.oracle.seed, echo(&cfg.oracle)?);
    let meta = run.store(model.meta.kind, "", &config, Some(cfg.feature), Payload::Checkpoint(&ckpt))?;
    let kept = data.iter().filter(|d| !d.label(cfg.feature)).count();
    run.finish(config, json!({ "model": meta.id, "n_train": kept }))
}

pub fn eval_stage(ws: &Workspace, mut cfg: EvalRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "eval", "eval", None);
    let model = resolve_model(ws, cfg.model.as_deref())?;
    let (pmeta, probe) = resolve_probe(ws, cfg.probe.as_deref())?;
    let (dmeta, data) = resolve_dataset(ws, cfg.dataset.as_deref(), Some(&model.meta))?;
    cfg.model = Some(model.meta.id.clone());
    cfg.probe = Some(pmeta.id.clone());
    cfg.dataset = Some(dmeta.id.clone());
    run.input("model", &model.meta);
    run.input("probe", &pmeta);
    run.input("dataset", &dmeta);
    let target = match cfg.target.as_deref() {
        Some(id) => {
            let meta = ws.meta_of(id, &[ArtifactKind::Target])?;
            let tv = ws.load_target(&meta)?;
            run.input("target", &meta);
            Some((meta, tv))
        }
        None => None,
    };
    run.seed("sample", cfg.eval.seed);
    run.seed("identification", cfg.eval.auc_seed);

    let reference = dataset_stats(&probe, &data)?;
    let report = evaluate(
        &model.generator,
        &probe,
        cfg.feature,
        &reference,
        target.as_ref().map(|(_, tv)| (tv, model.latent_space())),
        &cfg.eval,
        EvalModels {
            generator: Some(model.meta.id.clone()),
            probe: Some(pmeta.id.clone()),
            target: target.as_ref().map(|(m, _)| m.id.clone()),
        },
    )?;
    let config = echo(&cfg)?;
    let report_value = serde_json::to_value(&report)?;
    let meta = run.store(
        ArtifactKind::Eval,
        "",
        &config,
        Some(cfg.feature),
        Payload::Json(report_value.clone()),
    )?;
    let mut metrics = report_value;
    metrics["report"] = json!(meta.id);
    run.finish(config, metrics)
}

pub fn load_eval_report(ws: &Workspace, id: &str) -> Result<EvalReport, RunError> {
    let meta = ws.meta_of(id, &[ArtifactKind::Eval])?;
    ws.load_json(&meta)
}

pub fn attack_stage(ws: &Workspace, mut cfg: AttackRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "attack", "attack", None);
    let model = resolve_model(ws, cfg.model.as_deref())?;
    let (pmeta, probe) = resolve_probe(ws, cfg.probe.as_deref())?;
    let (emeta, eval_probe) = match cfg.eval_probe.as_deref() {
        Some(id) => resolve_probe(ws, Some(id))?,
        None => {
            let other = ws
                .list(Some(PROBES))?
                .into_iter()
                .rev()
                .find(|m| m.id != pmeta.id)
                .ok_or_else(|| RunError::Missing {
                    what: "evaluation probe".into(),
                    detail: "the attack needs a second, independently trained probe (run train-probe with another seed)".into(),
                })?;
            resolve_probe(ws, Some(&other.id))?
        }
    };
    let (dmeta, data) = resolve_dataset(ws, cfg.dataset.as_deref(), Some(&model.meta))?;
    cfg.model = Some(model.meta.id.clone());
    cfg.probe = Some(pmeta.id.clone());
    cfg.eval_probe = Some(emeta.id.clone());
    cfg.dataset = Some(dmeta.id.clone());
    run.input("model", &model.meta);
    run.input("probe", &pmeta);
    run.input("eval_probe", &emeta);
    run.input("dataset", &dmeta);
    run.seed("attack", cfg.attack.seed);

    let report = attack_sweep(
        &model.generator,
        &probe,
        &eval_probe,
        cfg.feature,
        cfg.n,
        &cfg.attack,
        &data,
        SweepOptions {
            splits: cfg.splits,
            record_success: cfg.record_success,
        },
    )?;
    let config = echo(&cfg)?;
    let value = serde_json::to_value(&report)?;
    let meta = run.store(ArtifactKind::Attack, "", &config, Some(cfg.feature), Payload::Json(value))?;
    run.finish(
        config,
        json!({
            "report": meta.id,
            "tfr_before": report.tfr_before,
            "tfr_after": report.tfr_after,
            "quality_before": report.quality_before,
            "quality_after": report.quality_after,
        }),
    )
}

pub fn ablate_stage(ws: &Workspace, mut cfg: AblateRun) -> Result<RunManifest, RunError> {
    let mut run = Run::new(ws, "ablate", "ablate", None);
    let model = model_for_target(ws, cfg.model.as_deref(), cfg.target.as_deref())?;
    let (tmeta, tv) = require_target(ws, cfg.target.as_deref(), &model)?;
    let (pmeta, probe) = resolve_probe(ws, cfg.probe.as_deref())?;
    let (dmeta, data) = resolve_dataset(ws, cfg.dataset.as_deref(), Some(&model.meta))?;
    cfg.model = Some(model.meta.id.clone());
    cfg.target = Some(tmeta.id.clone());
    cfg.probe = Some(pmeta.id.clone());
    cfg.dataset = Some(dmeta.id.clone());
    cfg.base.track = model.track();
    run.input("model", &model.meta);
    run.input("target", &tmeta);
    run.input("probe", &pmeta);
    run.input("dataset", &dmeta);
    run.seed("unlearn", cfg.base.seed);
    run.seed("sample", cfg.eval.seed);

    let reference = dataset_stats(&probe, &data)?;
    let rows = ablation_run(&model.generator, &tv, &probe, &reference, &cfg.base, &cfg.variants, &cfg.eval)?;
    let config = echo(&cfg)?;
    let meta = run.store(
        ArtifactKind::Ablation,
        "",
        &config,
        Some(cfg.base.feature),
        Payload::Text(ablation_csv(&rows)),
    )?;
    run.finish(config, json!({ "table": meta.id, "rows": rows }))
}
