use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use cleft_core::checkpoint::{self, Entries};
use cleft_core::data::{generate, Dataset, Split};
use cleft_core::eval::{
    data_ratio_sweep, full_finetune, linear_probe_model, param_ratio_report, published_ratio_report,
    trainable_counts, zero_shot_classify, EvalReport, Protocol,
};
use cleft_core::io::{write_atomic, DirLock};
use cleft_core::objectives::Temperature;
use cleft_core::prompt_tuning::{
    add_context, handcrafted_class_embeddings, prompt_tune_loop, PromptEncoder, PromptLayout, CONTEXT_PARAM,
};
use cleft_core::training::{parse_metrics, pretrain_loop, write_metrics, ContrastiveValidator, MetricRow};
use cleft_core::{ClipModel, Error as CoreError, FreezePolicy, ParameterStore, RunConfig, Tensor};

use crate::{Ablation, Cli, Command, EvalArgs, GenDataArgs, Paths, PresetArg, PromptTuneArgs, ReportArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PROMPT_METRICS_FILE: &str = "prompt_metrics.csv";
pub const SWEEP_FILE: &str = "prompt_sweep.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.jsonl";
pub const PLOT_FILE: &str = "metrics.svg";
pub const BEST_CHECKPOINT: &str = "stage1_best.ckpt";
pub const LAST_CHECKPOINT: &str = "stage1_last.ckpt";
pub const CONTEXT_CHECKPOINT: &str = "context.ckpt";
pub const CONTEXT_META: &str = "context.json";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain(&a.paths),
        Command::PromptTune(a) => prompt_tune(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a training or evaluation command needs, loaded before any
/// output is written.
struct RunInputs {
    cfg: RunConfig,
    data: Dataset,
    out_dir: PathBuf,
}

fn prepare(paths: &Paths) -> Result<RunInputs> {
    let mut cfg = load_config(&paths.config)?;
    if let Some(d) = &paths.data_dir {
        cfg.data_dir = d.display().to_string();
    }
    if let Some(d) = &paths.out_dir {
        cfg.out_dir = d.display().to_string();
    }
    let mut data = Dataset::load(Path::new(&cfg.data_dir))
        .with_context(|| format!("loading dataset from {}", cfg.data_dir))?;
    if data.n_classes() != cfg.n_classes {
        return Err(CoreError::Config(format!(
            "dataset has {} classes, config says {}",
            data.n_classes(),
            cfg.n_classes
        ))
        .into());
    }
    if let Some((mean, std)) = paths.normalize {
        data.normalize_images(mean, std)?;
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    Ok(RunInputs { cfg, data, out_dir })
}

fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<(ClipModel, ParameterStore)> {
    Ok(ClipModel::build(&cfg.model_config(data.vocab.len())?, cfg.seed)?)
}

/// Copies every checkpoint tensor into `store`. Each model entry must be
/// present with the same shape.
fn restore(store: &mut ParameterStore, entries: &Entries, source: &Path) -> Result<()> {
    for (name, p) in store.iter() {
        let t = entries.get(name).ok_or_else(|| {
            CoreError::Config(format!("{} lacks parameter {name}; was it written for this config?", source.display()))
        })?;
        if t.shape() != p.value.shape() {
            return Err(CoreError::Config(format!(
                "{}: {name} has shape {:?}, config expects {:?} (d_model or vocabulary mismatch)",
                source.display(),
                t.shape(),
                p.value.shape()
            ))
            .into());
        }
    }
    store.load_values(entries)?;
    Ok(())
}

fn load_stage1(cfg: &RunConfig, data: &Dataset, path: &Path) -> Result<(ClipModel, ParameterStore)> {
    let (model, mut store) = build_model(cfg, data)?;
    let entries = checkpoint::load(path)?;
    restore(&mut store, &entries, path)?;
    Ok((model, store))
}

fn metrics_bytes(rows: &[MetricRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, rows).expect("writing to memory");
    buf
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.display().to_string();
    }
    let dir = PathBuf::from(&cfg.data_dir);
    let data = generate(&cfg.synth_spec())?;
    let _lock = DirLock::acquire(&dir)?;
    data.save(&dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    println!("wrote {} samples to {}", data.samples.len(), dir.display());
    Ok(())
}

fn pretrain(paths: &Paths) -> Result<()> {
    let ctx = prepare(paths)?;
    let cfg = &ctx.cfg;
    if cfg.stage != 1 {
        bail!(CoreError::Config(format!("pretrain needs a stage 1 config, got stage {}", cfg.stage)));
    }
    let (model, mut store) = build_model(cfg, &ctx.data)?;
    cfg.freeze()?.apply(&mut store)?;
    let pc = cfg.pretrain_config();
    let mut validator = ContrastiveValidator {
        data: &ctx.data,
        batch_size: cfg.batch_size,
        max_len: cfg.max_seq_len,
        denominator: pc.denominator,
    };
    let _lock = DirLock::acquire(&ctx.out_dir)?;
    let outcome = pretrain_loop(&model, &mut store, &ctx.data, &pc, &mut validator, |r| {
        if r.split == "val" {
            info!("step {} val loss {:.4}", r.step, r.loss);
        }
    })?;
    // Outputs land only after the run succeeded.
    write_atomic(&ctx.out_dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    checkpoint::save(&ctx.out_dir.join(BEST_CHECKPOINT), &outcome.best.values())?;
    checkpoint::save(&ctx.out_dir.join(LAST_CHECKPOINT), &store.values())?;
    write_atomic(&ctx.out_dir.join(METRICS_FILE), &metrics_bytes(&outcome.metrics))?;
    println!(
        "pretrained {} steps; best validation loss {:?} at step {}; wrote {}",
        pc.schedule.total_steps,
        outcome.best_val_loss,
        outcome.best_step,
        ctx.out_dir.display()
    );
    Ok(())
}

fn split_arrays(data: &Dataset, split: Split) -> (Vec<Tensor>, Vec<usize>) {
    let idx = data.split_indices(split);
    (
        idx.iter().map(|&i| data.samples[i].image.clone()).collect(),
        idx.iter().map(|&i| data.samples[i].label).collect(),
    )
}

#[derive(Serialize)]
struct ContextMeta {
    context_length: usize,
    steps: usize,
    source_checkpoint: String,
    val_accuracy: f64,
    test_accuracy: f64,
}

struct TunedContext {
    store: ParameterStore,
    metrics: Vec<MetricRow>,
    val_accuracy: f64,
    test_accuracy: f64,
    final_train_loss: f64,
}

fn tune_one(model: &ClipModel, base: &ParameterStore, data: &Dataset, cfg: &RunConfig, length: usize) -> Result<TunedContext> {
    let mut pc = cfg.prompt_tune_config();
    pc.context_length = length;
    let mut store = base.clone();
    let out = prompt_tune_loop(model, &mut store, data, &pc, |_| {})?;
    let layout = PromptLayout::from_prompts(&data.prompts, &data.vocab)?;
    let classes = PromptEncoder::new(model, layout, true).class_embeddings(&store)?;
    let acc = |split| -> Result<f64> {
        let (images, labels) = split_arrays(data, split);
        Ok(zero_shot_classify(model, &store, &classes, &images, &labels)?.accuracy)
    };
    Ok(TunedContext {
        val_accuracy: acc(Split::Val)?,
        test_accuracy: acc(Split::Test)?,
        final_train_loss: out.train_losses.last().copied().unwrap_or(f64::NAN),
        metrics: out.metrics,
        store,
    })
}

fn prompt_tune(a: &PromptTuneArgs) -> Result<()> {
    let ctx = prepare(&a.paths)?;
    let cfg = &ctx.cfg;
    if cfg.stage != 2 {
        bail!(CoreError::Config(format!("prompt-tune needs a stage 2 config, got stage {}", cfg.stage)));
    }
    let (model, base) = load_stage1(cfg, &ctx.data, &a.checkpoint)?;
    let _lock = DirLock::acquire(&ctx.out_dir)?;
    write_atomic(&ctx.out_dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    if let Some(lengths) = &a.sweep {
        let mut csv = String::from("context_length,val_acc,test_acc,final_train_loss\n");
        for &l in &lengths.0 {
            let t = tune_one(&model, &base, &ctx.data, cfg, l)?;
            info!("L={l}: test accuracy {:.4}", t.test_accuracy);
            csv.push_str(&format!(
                "{l},{:.6},{:.6},{:.6}\n",
                t.val_accuracy, t.test_accuracy, t.final_train_loss
            ));
        }
        write_atomic(&ctx.out_dir.join(SWEEP_FILE), csv.as_bytes())?;
        print!("{csv}");
        return Ok(());
    }
    let length = a.context_length.unwrap_or(cfg.context_length);
    let t = tune_one(&model, &base, &ctx.data, cfg, length)?;
    let context: Entries = [(CONTEXT_PARAM.to_string(), t.store.tensor(CONTEXT_PARAM)?.clone())].into();
    checkpoint::save(&ctx.out_dir.join(CONTEXT_CHECKPOINT), &context)?;
    write_json(
        &ctx.out_dir.join(CONTEXT_META),
        &ContextMeta {
            context_length: length,
            steps: cfg.prompt_steps,
            source_checkpoint: a.checkpoint.display().to_string(),
            val_accuracy: t.val_accuracy,
            test_accuracy: t.test_accuracy,
        },
    )?;
    write_atomic(&ctx.out_dir.join(PROMPT_METRICS_FILE), &metrics_bytes(&t.metrics))?;
    println!(
        "tuned a {length}-token context; zero-shot test accuracy {:.4}; wrote {}",
        t.test_accuracy,
        ctx.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportLine<'r> {
    condition: &'r str,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(flatten)]
    report: &'r EvalReport,
}

fn eval(a: &EvalArgs) -> Result<()> {
    if !(a.zs || a.lp || a.ft || a.plot || a.ablation.is_some()) {
        bail!(CoreError::Config("nothing to do: pass --zs, --lp, --ft, --ablation or --plot".into()));
    }
    let ctx = prepare(&a.paths)?;
    let cfg = &ctx.cfg;
    let (model, mut store) = load_stage1(cfg, &ctx.data, &a.checkpoint)?;
    let condition = a.ablation.map_or("default", Ablation::as_str);
    if let Some(ab @ (Ablation::FreezeLm | Ablation::FullFtLm)) = a.ablation {
        if cfg.freeze_policy != ab.as_str() {
            bail!(CoreError::Config(format!(
                "--ablation {} needs a checkpoint trained with freeze_policy \"{}\", config has {:?}",
                ab.as_str(),
                ab.as_str(),
                cfg.freeze_policy
            )));
        }
    }
    let use_context = a.context.is_some() && a.ablation != Some(Ablation::NoPromptFt);
    let layout = PromptLayout::from_prompts(&ctx.data.prompts, &ctx.data.vocab)?;
    if let (true, Some(path)) = (use_context, &a.context) {
        let entries = checkpoint::load(path)?;
        let t = entries
            .get(CONTEXT_PARAM)
            .ok_or_else(|| CoreError::Config(format!("{} holds no {CONTEXT_PARAM}", path.display())))?;
        if t.shape().len() != 2 || t.last_dim() != cfg.text_d_model {
            bail!(CoreError::Config(format!(
                "{}: {CONTEXT_PARAM} has shape {:?}, config expects [L, {}] (d_model mismatch)",
                path.display(),
                t.shape(),
                cfg.text_d_model
            )));
        }
        add_context(&mut store, &layout, t.rows(), cfg.seed)?;
        store.set(CONTEXT_PARAM, t.clone())?;
    }
    let _lock = DirLock::acquire(&ctx.out_dir)?;
    let mut reports: Vec<(Option<f64>, Option<u64>, EvalReport)> = Vec::new();
    if a.zs || a.ablation.is_some() {
        let classes = if use_context {
            PromptEncoder::new(&model, layout, true).class_embeddings(&store)?
        } else {
            handcrafted_class_embeddings(&model, &store, &ctx.data.prompts, &ctx.data.vocab)?
        };
        let (images, labels) = split_arrays(&ctx.data, Split::Test);
        reports.push((None, None, zero_shot_classify(&model, &store, &classes, &images, &labels)?));
    }
    let train = ctx.data.split_indices(Split::Train);
    if a.lp {
        reports.push((None, None, linear_probe_model(&model, &store, &ctx.data, &train, &cfg.probe_config())?));
    }
    if a.ft {
        let (r, _) = full_finetune(&model, &store, &ctx.data, &train, &cfg.finetune_config())?;
        reports.push((None, None, r));
    }
    if let Some(ratios) = &a.data_ratios {
        let protocols: Vec<Protocol> = [(a.lp, Protocol::LinearProbe), (a.ft, Protocol::FineTune)]
            .into_iter()
            .filter_map(|(on, p)| on.then_some(p))
            .collect();
        if protocols.is_empty() {
            bail!(CoreError::Config("--data-ratios needs --lp and/or --ft".into()));
        }
        for p in protocols {
            let pc = if p == Protocol::FineTune { cfg.finetune_config() } else { cfg.probe_config() };
            for point in data_ratio_sweep(&model, &store, &ctx.data, p, &ratios.0, &a.seeds.0, &pc)? {
                for (r, &seed) in point.reports.into_iter().zip(&a.seeds.0) {
                    reports.push((Some(point.ratio), Some(seed), r));
                }
            }
        }
    }
    if !reports.is_empty() {
        let mut lines = String::new();
        for (ratio, seed, r) in &reports {
            let line = ReportLine {
                condition,
                data_ratio: *ratio,
                seed: *seed,
                report: r,
            };
            lines.push_str(&serde_json::to_string(&line)?);
            lines.push('\n');
        }
        write_atomic(&ctx.out_dir.join(EVAL_REPORT_FILE), lines.as_bytes())?;
        std::io::stdout().write_all(lines.as_bytes())?;
        let tau = f64::from(Temperature::read(&store)?.tau());
        let summary: Vec<&EvalReport> = reports.iter().filter(|(r, _, _)| r.is_none()).map(|(_, _, r)| r).collect();
        record_eval_metrics(&ctx.out_dir.join(METRICS_FILE), &summary, tau)?;
    }
    if a.plot {
        let csv_path = ctx.out_dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
        let rows = parse_metrics(&text)?;
        let svg = crate::plot::metrics_svg(&rows)?;
        write_atomic(&ctx.out_dir.join(PLOT_FILE), svg.as_bytes())?;
        println!("wrote {}", ctx.out_dir.join(PLOT_FILE).display());
    }
    Ok(())
}

/// Adds one `test_<protocol>` row per report to the metrics CSV, replacing
/// rows from an earlier evaluation so reruns leave the file unchanged.
fn record_eval_metrics(path: &Path, reports: &[&EvalReport], tau: f64) -> Result<()> {
    let mut rows = match std::fs::read_to_string(path) {
        Ok(text) => parse_metrics(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let step = rows.iter().map(|r| r.step).max().unwrap_or(0);
    for r in reports {
        let split = format!("test_{}", r.protocol.to_string().to_lowercase());
        rows.retain(|row| row.split != split);
        rows.push(MetricRow {
            step,
            split,
            loss: f64::NAN,
            lr: 0.0,
            tau,
            acc: Some(r.accuracy),
        });
    }
    write_atomic(path, &metrics_bytes(&rows))?;
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    if let Some(p) = a.preset {
        let cfg = match p {
            PresetArg::Toy => RunConfig::toy(),
            PresetArg::PaperScale => RunConfig::paper_scale(),
        };
        print!("{}", cfg.to_json());
    }
    if a.ratios {
        let cfg = match &a.config {
            Some(p) => load_config(p)?,
            None => RunConfig::toy(),
        };
        let vocab = match Dataset::load(Path::new(&cfg.data_dir)) {
            Ok(d) => d.vocab,
            Err(_) => generate(&cfg.synth_spec())?.vocab,
        };
        let (_, store) = ClipModel::build(&cfg.model_config(vocab.len())?, cfg.seed)?;
        let ours = trainable_counts(&store, &cfg.freeze()?)?;
        let baseline = trainable_counts(&store, &FreezePolicy::full_ft_lm())?;
        let published = published_ratio_report()?;
        let configured = param_ratio_report(&ours, &baseline)?;
        println!("# trainable-parameter ratios, ours / fully trained text tower");
        print!("{published}");
        for row in configured.to_string().lines().skip(1) {
            println!("{row}");
        }
        println!(
            "# configured model: {} trainable of {} ({} language-model, {} token-embedding)",
            ours.total,
            baseline.total,
            ours.language_model(),
            ours.tag(cleft_core::ComponentTag::TextEmbedding)
        );
    }
    if a.preset.is_none() && !a.ratios {
        bail!(CoreError::Config("nothing to report: pass --ratios or --preset".into()));
    }
    Ok(())
}
