//! One function per subcommand. Each reads `paths.dataset_dir` without
//! touching it and writes everything else under `paths.output_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use multistream::adapt::{
    export_features, feature_dim, train_downstream, write_label_file, AdaptMode, DownstreamModel, EvalReport,
    LabelRecord, LayerWeights, TaskBank,
};
use multistream::cluster::{assign_all, dump_cluster_samples, fit_all, ClusterModel};
use multistream::encoder::{load_checkpoint, Encoder};
use multistream::featio::{gen_synthetic, write_msf, Channel, NUM_CHANNELS};
use multistream::masking::MaskStrategy;
use multistream::pretrain::pretrain;

use crate::config::ExperimentConfig;
use crate::dataset::{load_labeled, split, Dataset, LABEL_FILE};
use crate::table::Table;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

fn out(cfg: &ExperimentConfig, rel: &str) -> Result<PathBuf> {
    let p = cfg.paths.output_dir.join(rel);
    fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
    Ok(p)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_table(path: &Path, table: &Table) -> Result<()> {
    let text = table.render();
    print!("{text}");
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_synthetic_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.paths.dataset_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = gen_synthetic(&cfg.synthetic)?;
    let mut labels = Vec::with_capacity(data.len());
    for (i, seq) in data.sequences.iter().enumerate() {
        let name = format!("seq_{i:05}.msf");
        write_msf(seq, dir.join(&name))?;
        labels.push(LabelRecord {
            sequence: name.into(),
            task: "sign".into(),
            class: data.clip_label(i),
        });
    }
    write_label_file(dir.join(LABEL_FILE), &labels)?;
    write_json(&dir.join("synthetic.json"), &cfg.synthetic)?;
    println!("wrote {} sequences to {}", data.len(), dir.display());
    Ok(())
}

fn cluster_path(dir: &Path, ch: Channel) -> PathBuf {
    dir.join(format!("{}.kmc", ch.name()))
}

fn fit_clusters(cfg: &ExperimentConfig, data: &Dataset) -> Result<[ClusterModel; NUM_CHANNELS]> {
    let dir = out(cfg, "clusters")?;
    info!("fitting k={} on {:.0}% of frames", cfg.cluster.kmeans.k, cfg.cluster.fraction * 100.0);
    let models = fit_all(&data.sequences, cfg.cluster.fraction, &cfg.cluster.kmeans)?;
    for m in &models {
        m.save(cluster_path(&dir, m.channel))?;
    }
    Ok(models)
}

fn load_clusters(cfg: &ExperimentConfig) -> Result<Option<[ClusterModel; NUM_CHANNELS]>> {
    let dir = cfg.paths.output_dir.join("clusters");
    if !Channel::ALL.iter().all(|&c| cluster_path(&dir, c).exists()) {
        return Ok(None);
    }
    let v = Channel::ALL
        .iter()
        .map(|&c| ClusterModel::load(cluster_path(&dir, c)))
        .collect::<multistream::Result<Vec<_>>>()?;
    Ok(Some(v.try_into().expect("four channels")))
}

/// Saved cluster models, fitting and saving them first when absent.
fn clusters(cfg: &ExperimentConfig, data: &Dataset) -> Result<[ClusterModel; NUM_CHANNELS]> {
    match load_clusters(cfg)? {
        Some(m) => Ok(m),
        None => fit_clusters(cfg, data),
    }
}

pub fn kmeans_fit(cfg: &ExperimentConfig) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let models = fit_clusters(cfg, &data)?;
    let mut t = Table::new(&["channel", "k", "dim"]);
    for m in &models {
        t.row(vec![m.channel.name().into(), m.k.to_string(), m.dim.to_string()]);
    }
    write_table(&cfg.paths.output_dir.join("clusters/summary.txt"), &t)
}

#[derive(Serialize)]
struct TargetRow<'a> {
    sequence: &'a str,
    labels: &'a [[u32; NUM_CHANNELS]],
}

pub fn kmeans_assign(cfg: &ExperimentConfig) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let Some(models) = load_clusters(cfg)? else {
        bail!("no cluster models under {}; run kmeans-fit first", cfg.paths.output_dir.join("clusters").display());
    };
    let mut lines = String::new();
    for (i, seq) in data.sequences.iter().enumerate() {
        let a = assign_all(&models, seq)?;
        lines += &serde_json::to_string(&TargetRow {
            sequence: &data.names[i],
            labels: &a.labels,
        })?;
        lines.push('\n');
    }
    let path = out(cfg, "targets")?.join("targets.jsonl");
    fs::write(&path, lines)?;
    println!("assigned {} sequences to {}", data.names.len(), path.display());
    Ok(())
}

fn run_pretrain(cfg: &ExperimentConfig, data: &Dataset, models: &[ClusterModel; NUM_CHANNELS], rel: &str) -> Result<Encoder<f32>> {
    let dir = out(cfg, rel)?;
    let first = &data.sequences[0];
    if first.dims() != cfg.encoder.channel_dims {
        bail!(
            "dataset channel widths {:?} differ from encoder.channel_dims {:?}",
            first.dims().0,
            cfg.encoder.channel_dims.0
        );
    }
    info!("pretraining {} steps with {} masking", cfg.train.total_steps, cfg.train.mask.strategy.name());
    let result = pretrain(&data.sequences, models, &cfg.encoder, &cfg.train, Some(&dir))?;
    if let Some(last) = result.log.last() {
        info!("final loss {:.4}", last.loss_total);
    }
    Ok(result.model)
}

pub fn pretrain_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let models = clusters(cfg, &data)?;
    run_pretrain(cfg, &data, &models, "pretrain")?;
    println!("checkpoint written to {}", cfg.paths.output_dir.join("pretrain/final.shb").display());
    Ok(())
}

fn checkpoint(cfg: &ExperimentConfig, given: Option<&Path>) -> Result<Encoder<f32>> {
    let path = given.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.output_dir.join("pretrain/final.shb"));
    load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn extract(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let enc = checkpoint(cfg, ckpt)?;
    let n = enc.n_layers();
    let lw = match cfg.adapter.export_layer {
        Some(j) if j < n => LayerWeights::one_hot(n, j),
        Some(j) => bail!("export layer {j} out of range for {n} layers"),
        None => LayerWeights::uniform(n),
    };
    let items: Vec<(String, _)> = (0..data.names.len()).map(|i| (data.stem(i).to_string(), data.sequences[i].clone())).collect();
    let dir = out(cfg, "features")?;
    let manifest = export_features(&enc, &lw, &items, &dir)?;
    println!("exported {} of {} sequences to {}", manifest.written.len(), items.len(), dir.display());
    if !manifest.failures.is_empty() {
        bail!("{} exports failed; see {}", manifest.failures.len(), dir.join("manifest.json").display());
    }
    Ok(())
}

fn report_table(reports: &[(String, EvalReport)]) -> Table {
    let mut t = Table::new(&["model", "task", "n", "rec@1", "rec@5", "rec@10"]);
    for (label, r) in reports {
        for task in &r.tasks {
            t.row(vec![
                label.clone(),
                task.name.clone(),
                task.n.to_string(),
                format!("{:.4}", task.recall_at_1),
                format!("{:.4}", task.recall_at_5),
                format!("{:.4}", task.recall_at_10),
            ]);
        }
    }
    t
}

fn downstream(
    cfg: &ExperimentConfig,
    enc: &Encoder<f32>,
    data: &Dataset,
    mode: AdaptMode,
) -> Result<(multistream::adapt::TrainedDownstream, EvalReport)> {
    let labeled = load_labeled(&cfg.paths.dataset_dir, data, &cfg.adapter.tasks)?;
    let splits = split(&labeled.set, cfg.adapter.split, cfg.seed)?;
    let d = &cfg.adapter.downstream;
    let bank = TaskBank::new(&labeled.tasks, feature_dim(enc, mode), d.label_smoothing, d.seed)?;
    info!("training {} on {} sequences", mode.name(), splits.train.len());
    let trained = train_downstream(enc, bank, &splits.train, &splits.val, mode, d)?;
    let report = trained.model.evaluate(&splits.test)?;
    Ok((trained, report))
}

pub fn finetune(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let enc = checkpoint(cfg, ckpt)?;
    let mode = cfg.adapter.mode;
    let (trained, report) = downstream(cfg, &enc, &data, mode)?;
    let dir = out(cfg, &format!("downstream/{}", mode.name()))?;
    trained.model.save(&dir)?;
    write_json(&dir.join("history.json"), &trained.history)?;
    write_json(&dir.join("report.json"), &report)?;
    write_table(&dir.join("report.txt"), &report_table(&[(mode.name().into(), report)]))
}

pub fn eval(cfg: &ExperimentConfig, model_dir: Option<&Path>, all: bool) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let dir = model_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join(format!("downstream/{}", cfg.adapter.mode.name())));
    let model = DownstreamModel::load(&dir).with_context(|| format!("loading downstream model {}", dir.display()))?;
    let tasks: Vec<_> = model
        .bank
        .tasks
        .iter()
        .map(|(name, h)| multistream::adapt::TaskSpec {
            name: name.clone(),
            n_classes: h.n_classes,
        })
        .collect();
    let labeled = load_labeled(&cfg.paths.dataset_dir, &data, &tasks)?;
    let set = if all { labeled.set } else { split(&labeled.set, cfg.adapter.split, cfg.seed)?.test };
    let report = model.evaluate(&set)?;
    let dir = out(cfg, "eval")?;
    write_json(&dir.join("report.json"), &report)?;
    write_table(&dir.join("report.txt"), &report_table(&[(model.mode.name().into(), report)]))
}

#[derive(Serialize)]
struct AblationRow {
    strategy: MaskStrategy,
    mode: AdaptMode,
    recall_at_1: f64,
    recall_at_5: f64,
    recall_at_10: f64,
}

pub const ABLATION_MODES: [AdaptMode; 3] = [AdaptMode::FrozenLast, AdaptMode::FrozenWeighted, AdaptMode::Finetune];

pub fn ablate(cfg: &ExperimentConfig) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let models = clusters(cfg, &data)?;
    let mut rows = Vec::new();
    let mut t = Table::new(&["masking", "adapter", "rec@1", "rec@5", "rec@10"]);
    for strategy in MaskStrategy::ALL {
        let mut c = cfg.clone();
        c.mask.strategy = strategy;
        c.train.mask.strategy = strategy;
        let enc = run_pretrain(&c, &data, &models, &format!("ablate/{}/pretrain", strategy.name()))?;
        for mode in ABLATION_MODES {
            let (_, report) = downstream(&c, &enc, &data, mode)?;
            let mean = |f: fn(&multistream::adapt::TaskReport) -> f64| {
                report.tasks.iter().map(f).sum::<f64>() / report.tasks.len() as f64
            };
            let row = AblationRow {
                strategy,
                mode,
                recall_at_1: mean(|r| r.recall_at_1),
                recall_at_5: mean(|r| r.recall_at_5),
                recall_at_10: mean(|r| r.recall_at_10),
            };
            t.row(vec![
                strategy.name().into(),
                mode.name().into(),
                format!("{:.4}", row.recall_at_1),
                format!("{:.4}", row.recall_at_5),
                format!("{:.4}", row.recall_at_10),
            ]);
            rows.push(row);
        }
    }
    let dir = out(cfg, "ablate")?;
    write_json(&dir.join("ablation.json"), &rows)?;
    write_table(&dir.join("ablation.txt"), &t)
}

pub fn dump_clusters(cfg: &ExperimentConfig, channel: Option<Channel>, ids: Option<&[u32]>, per_cluster: usize) -> Result<()> {
    let data = Dataset::load(&cfg.paths.dataset_dir)?;
    let Some(models) = load_clusters(cfg)? else {
        bail!("no cluster models under {}; run kmeans-fit first", cfg.paths.output_dir.join("clusters").display());
    };
    let dir = out(cfg, "clusters")?;
    for m in models.iter().filter(|m| channel.is_none_or(|c| c == m.channel)) {
        let all: Vec<u32> = (0..m.k as u32).collect();
        let manifest = dump_cluster_samples(m, &data.sequences, ids.unwrap_or(&all), per_cluster, cfg.seed)?;
        for row in &manifest.rows {
            if let Some(w) = &row.warning {
                log::warn!("{} cluster {}: {w}", m.channel, row.cluster);
            }
        }
        let rows: Vec<serde_json::Value> = manifest
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "cluster": r.cluster,
                    "total_members": r.total_members,
                    "samples": r.samples.iter().map(|&(s, t)| serde_json::json!({"sequence": data.names[s], "frame": t})).collect::<Vec<_>>(),
                })
            })
            .collect();
        let path = dir.join(format!("samples_{}.json", m.channel.name()));
        write_json(&path, &serde_json::json!({ "channel": m.channel, "rows": rows }))?;
        println!("{}: {} clusters sampled into {}", m.channel, manifest.rows.len(), path.display());
    }
    Ok(())
}
