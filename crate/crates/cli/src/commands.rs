use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use oceanprompt::checkpoint::Checkpoint;
use oceanprompt::config::RunConfig;
use oceanprompt::datastore::{write_dataset, AvailabilityMask, Dataset, Split};
use oceanprompt::entropy::{run_monotonicity_suite, SuiteConfig};
use oceanprompt::evaluator::{self, Evaluator, MetricsReport};
use oceanprompt::model::{Model, Variant};
use oceanprompt::pipeline::{generate_synthetic, provenance, synthetic_universe};
use oceanprompt::trainer::{log_records, Trainer};
use oceanprompt::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::Common;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn split_list(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let variants = split_list(list).iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        return Err(Error::Config("--variants lists no variant".into()));
    }
    Ok(variants)
}

fn apply_masks(cfg: &mut RunConfig, masks: Option<&str>) -> Result<()> {
    if let Some(list) = masks {
        cfg.eval.masks = split_list(list);
        if cfg.eval.masks.is_empty() {
            return Err(Error::Config("--masks lists no subset".into()));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(EFFECTIVE_CONFIG), &cfg.to_json())
}

fn run_dir(cfg: &RunConfig, variant: Variant) -> PathBuf {
    cfg.paths.runs.join(variant.name())
}

/// The best-validation checkpoint of a run, or its last one when no best was saved.
fn trained_checkpoint(cfg: &RunConfig, variant: Variant) -> PathBuf {
    let dir = run_dir(cfg, variant);
    let best = dir.join("best.ckpt");
    if best.exists() {
        best
    } else {
        dir.join("last.ckpt")
    }
}

pub fn gen(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let synth = generate_synthetic(&cfg.dataset.synth)?;
    create_dir(&out)?;
    let manifest = write_dataset(
        &synth.samples,
        &synthetic_universe(),
        &cfg.splits(),
        &out,
        &provenance(&cfg.dataset.synth),
    )?;
    echo_config(&out, &cfg)?;
    println!(
        "wrote {} samples ({}x{}, {} train / {} val / {} test) to {}",
        manifest.t_total,
        manifest.height,
        manifest.width,
        manifest.t_train,
        manifest.t_val,
        manifest.t_test,
        out.display()
    );
    Ok(())
}

pub fn train(common: &Common, resume: Option<&Path>, variants: Option<&str>) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let variants = match variants {
        Some(list) => parse_variants(list)?,
        None => vec![cfg.model.variant],
    };
    if resume.is_some() && variants.len() > 1 {
        return Err(Error::Config("--resume continues a single variant".into()));
    }
    let ds = Dataset::open(&cfg.paths.data)?;
    let stats = ds.read_stats()?;
    let train = ds.load_split(Split::Train, &stats)?;
    let val = if ds.manifest().t_val > 0 {
        Some(ds.load_split(Split::Val, &stats)?)
    } else {
        None
    };

    for &variant in &variants {
        let out = match (&common.out, variants.len()) {
            (Some(dir), 1) => dir.clone(),
            (Some(dir), _) => dir.join(variant.name()),
            (None, _) => run_dir(&cfg, variant),
        };
        create_dir(&out)?;
        let mut effective = cfg.clone();
        effective.model.variant = variant;
        echo_config(&out, &effective)?;

        let model = Model::new(&effective.model, ds.universe().len())?;
        let trainer = Trainer::new(&model, ds.universe(), &effective.policy, &effective.train, &train, val.as_ref())?;
        let mut state = match resume {
            Some(path) => trainer.state_from_checkpoint(&Checkpoint::load(path)?)?,
            None => trainer.fresh_state(),
        };

        let log_path = out.join("log.jsonl");
        let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for rec in state.history.iter().flat_map(log_records) {
            writeln!(log, "{}", serde_json::to_string(&rec).expect("serializable")).map_err(|e| Error::io(&log_path, e))?;
        }

        let last = out.join("last.ckpt");
        let best = out.join("best.ckpt");
        let every = effective.train.checkpoint_every.max(1);
        let epochs = effective.train.epochs;
        println!("training {} ({} parameters) into {}", variant.name(), state.params.num_scalars(), out.display());
        trainer.fit(&mut state, |st, rec, improved| {
            let mut log = OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            for line in log_records(rec) {
                writeln!(log, "{}", serde_json::to_string(&line).expect("serializable"))
                    .map_err(|e| Error::io(&log_path, e))?;
            }
            let val = rec.val_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into());
            println!(
                "epoch {:>3}  train {:.5}  val {}  {:.1}s",
                rec.epoch + 1,
                rec.train_loss,
                val,
                rec.wall_time_s
            );
            let ckpt = trainer.checkpoint(st);
            if improved {
                ckpt.save(&best)?;
            }
            if st.epoch % every == 0 || st.epoch == epochs {
                ckpt.save(&last)?;
            }
            Ok(())
        })?;
        if !last.exists() {
            trainer.checkpoint(&state).save(&last)?;
        }
    }
    Ok(())
}

fn print_reports(reports: &[MetricsReport]) {
    println!("{:<8} {:<12} {:<6} {:>12} {:>12} {:>8}", "variant", "mask", "depth", "rmse", "mae", "pcc");
    for r in reports {
        for l in &r.levels {
            let pcc = l.pcc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "{:<8} {:<12} {:<6} {:>12.4e} {:>12.4e} {:>8}",
                r.variant, r.mask, l.level, l.rmse, l.mae, pcc
            );
        }
    }
}

/// Predicted and true fields of one test sample, in physical units.
#[derive(Serialize, Deserialize)]
pub struct FieldDump {
    pub mask: String,
    pub time_index: usize,
    pub levels: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub prediction: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
}

fn dump_fields(ev: &Evaluator, ds: &Dataset, masks: &[AvailabilityMask], n: usize) -> Result<Vec<FieldDump>> {
    let mut out = Vec::new();
    for i in 0..n.min(ev.data.len()) {
        let raw = &ev.data.target_raw[i];
        let (c, h, w) = raw.dims3();
        for mask in masks {
            let pred = ev.stats.denormalize_target(&ev.predict(i, mask)?)?;
            out.push(FieldDump {
                mask: mask.label(ds.universe()),
                time_index: ev.data.indices[i],
                levels: ds.manifest().levels.clone(),
                height: h,
                width: w,
                prediction: (0..c).map(|k| pred.channel(k).to_vec()).collect(),
                target: (0..c).map(|k| raw.channel(k).to_vec()).collect(),
            });
        }
    }
    Ok(out)
}

struct Bound {
    cfg: RunConfig,
    ckpt_path: PathBuf,
    ckpt: Checkpoint,
    ds: Dataset,
}

fn bind(common: &Common, checkpoint: Option<&Path>, masks: Option<&str>) -> Result<Bound> {
    let mut cfg = load_config(common)?;
    apply_masks(&mut cfg, masks)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trained_checkpoint(&cfg, cfg.model.variant));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let ds = Dataset::open(&cfg.paths.data)?;
    Ok(Bound {
        cfg,
        ckpt_path,
        ckpt,
        ds,
    })
}

fn default_out(common: &Common, b: &Bound, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        b.ckpt_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .join(name)
    })
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, masks: Option<&str>, dump: bool) -> Result<()> {
    let b = bind(common, checkpoint, masks)?;
    let ev = Evaluator::new(&b.ckpt, &b.ds, Split::Test)?;
    let masks = b.cfg.eval_masks(b.ds.universe())?;
    let reports = masks.iter().map(|m| ev.evaluate(m)).collect::<Result<Vec<_>>>()?;
    let out = default_out(common, &b, "eval");
    create_dir(&out)?;
    echo_config(&out, &b.cfg)?;
    write_json(&out.join("metrics.json"), &reports)?;
    evaluator::write_csv(&reports, &out.join("metrics.csv"))?;
    if dump {
        write_json(&out.join("fields.json"), &dump_fields(&ev, &b.ds, &masks, b.cfg.eval.dump_samples)?)?;
    }
    print_reports(&reports);
    Ok(())
}

pub fn sweep(common: &Common, checkpoint: Option<&Path>, masks: Option<&str>) -> Result<()> {
    let b = bind(common, checkpoint, masks)?;
    let ev = Evaluator::new(&b.ckpt, &b.ds, Split::Test)?;
    let result = ev.sweep(&b.cfg.eval_masks(b.ds.universe())?)?;
    let out = default_out(common, &b, "sweep");
    create_dir(&out)?;
    echo_config(&out, &b.cfg)?;
    write_json(&out.join("sweep.json"), &result)?;
    evaluator::write_csv(&result.entries, &out.join("sweep.csv"))?;
    print_reports(&result.entries);
    Ok(())
}

fn paired_table(reports: &[MetricsReport], variants: &[Variant]) -> String {
    let mut text = format!("| scenario | depth | {} |\n", variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(" | "));
    text.push_str(&format!("|---|---|{}\n", "---|".repeat(variants.len())));
    let per_variant = reports.len() / variants.len().max(1);
    for s in 0..per_variant {
        let first = &reports[s];
        for (d, level) in first.levels.iter().enumerate() {
            let cells: Vec<String> = (0..variants.len())
                .map(|v| format!("{:.4e}", reports[v * per_variant + s].levels[d].rmse))
                .collect();
            text.push_str(&format!("| {} | {} | {} |\n", first.scenario, level.level, cells.join(" | ")));
        }
    }
    text
}

pub fn ablate(common: &Common, variants: Option<&str>, masks: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_masks(&mut cfg, masks)?;
    if let Some(list) = variants {
        cfg.eval.variants = parse_variants(list)?;
    }
    let ds = Dataset::open(&cfg.paths.data)?;
    let ckpts = cfg
        .eval
        .variants
        .iter()
        .map(|&v| Checkpoint::load(&trained_checkpoint(&cfg, v)))
        .collect::<Result<Vec<_>>>()?;
    for (c, v) in ckpts.iter().zip(&cfg.eval.variants) {
        if c.model.variant != *v {
            return Err(Error::Config(format!(
                "checkpoint under {} holds variant {}",
                run_dir(&cfg, *v).display(),
                c.model.variant.name()
            )));
        }
    }
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let reports = evaluator::ablate(&refs, &ds, &cfg.eval_masks(ds.universe())?)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.runs.join("ablation"));
    create_dir(&out)?;
    echo_config(&out, &cfg)?;
    write_json(&out.join("ablation.json"), &reports)?;
    evaluator::write_csv(&reports, &out.join("ablation.csv"))?;
    let table = paired_table(&reports, &cfg.eval.variants);
    write_text(&out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn entropy_check(common: &Common, trials: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let mut suite = SuiteConfig {
        seed: cfg.seed,
        ..SuiteConfig::default()
    };
    suite.synth.seed = cfg.seed;
    if let Some(t) = trials {
        if t == 0 {
            return Err(Error::Config("--trials must be positive".into()));
        }
        suite.trials = t;
    }
    let report = run_monotonicity_suite(&suite)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.runs.join("entropy"));
    create_dir(&out)?;
    echo_config(&out, &cfg)?;
    write_json(&out.join("entropy.json"), &report)?;
    let line = |name: &str, c: &oceanprompt::entropy::SuiteCount| {
        println!("{name:<26} {}/{} passed  (extreme gap {:.3e})", c.passed, c.trials, c.extreme_gap);
    };
    line("exact discrete", &report.exact_discrete);
    line("conditional independence", &report.conditional_independence);
    line("gaussian", &report.gaussian);
    line("plug-in (synthetic)", &report.plug_in);
    println!("{:<26} {:.6} nats", "coupled construction gap", report.coupled_gap);
    println!("{:<26} {:.4} nats", "plug-in I(w; SSH,U,V,B)", report.plug_in_mutual_information);
    if report.all_passed() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Error::Data("conditional entropy increased on at least one chain".into()))
    }
}
