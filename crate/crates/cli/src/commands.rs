use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ksm_core::data::{
    artifact_from_store, load_checkpoint, load_cifar_split, load_mask, save_checkpoint, save_mask, split_tasks,
    store_from_artifact, synthetic_tasks, write_atomic, CifarVariant, SyntheticSpec, TaskSequence, DATA_DIR_ENV,
};
use ksm_core::mask::MaskHyperparams;
use ksm_core::model::{Backbone, BackboneConfig};
use ksm_core::report::{layer_stats, ledger_csv, ledger_json, stats_csv, OverheadReport};
use ksm_core::trainer::{evaluate, run_sequence, TrainConfig};
use ksm_core::Error;
use serde_json::json;

use crate::{DataArgs, DatasetKind, EvalArgs, RunArgs, StatsArgs, StatsFormat};

fn load_tasks(d: &DataArgs) -> Result<TaskSequence> {
    let seq = match d.dataset {
        DatasetKind::Synthetic => synthetic_tasks(&SyntheticSpec {
            n_tasks: d.tasks,
            classes_per_task: d.classes_per_task,
            dims: [3, d.image_size, d.image_size],
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            separation: d.separation,
            seed: d.seed,
        })?,
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let variant = if d.dataset == DatasetKind::Cifar10 {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let root = d
                .data_dir
                .as_deref()
                .ok_or_else(|| Error::DataMissing(format!("pass --data-dir or set {DATA_DIR_ENV}")))?;
            let (train, test) = load_cifar_split(root, variant)?;
            split_tasks(&train, &test, d.tasks, d.classes_per_task, d.seed)?
        }
    };
    Ok(seq)
}

fn input_dims(seq: &TaskSequence) -> Result<[usize; 3]> {
    match seq.tasks.first() {
        Some(t) => Ok(t.train.dims),
        None => bail!(Error::Config("the sequence has no tasks".into())),
    }
}

fn mask_file(id: usize) -> String {
    format!("task_{id}.ksm")
}

pub fn run(args: RunArgs) -> Result<()> {
    let seq = load_tasks(&args.data)?;
    let preset = args.backbone.clone().unwrap_or_else(|| match args.data.dataset {
        DatasetKind::Synthetic => "tiny".into(),
        _ => "desk".into(),
    });
    let backbone = BackboneConfig::preset(&preset, input_dims(&seq)?)?;
    let cfg = TrainConfig {
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.data.seed,
        strategy: args.strategy,
        hp: MaskHyperparams {
            k: args.k,
            tau: args.tau,
            temperature: args.temperature,
            init_value: args.init_value,
            gumbel: args.gumbel,
        },
        init_task: args.init_task,
        ..TrainConfig::new(backbone).with_epochs(args.epochs)
    };
    let outcome = run_sequence::<f32>(&seq, &cfg)?;
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("ledger.csv"), ledger_csv(&outcome.ledger)?.as_bytes())?;
    write_atomic(&out.join("ledger.json"), ledger_json(&outcome.ledger)?.as_bytes())?;
    write_atomic(
        &out.join("config.json"),
        format!("{}\n", serde_json::to_string_pretty(&cfg)?).as_bytes(),
    )?;
    save_checkpoint(&out.join("backbone.ksmc"), &outcome.backbone)?;
    if let Some(tuned) = &outcome.finetuned {
        save_checkpoint(&out.join("backbone-finetuned.ksmc"), tuned)?;
    }
    for a in &outcome.artifacts {
        save_mask(&out.join(mask_file(a.task_id)), &store_from_artifact(a))?;
    }

    let l = &outcome.ledger;
    println!("strategy {}  seed {}  epochs {}", l.strategy, l.seed, cfg.epochs);
    println!("{:>6} {:>10} {:>10}", "task", "acc(%)", "seconds");
    for ((id, acc), secs) in l.task_ids.iter().zip(&l.final_accuracy).zip(&l.seconds) {
        println!("{id:>6} {:>10.2} {secs:>10.3}", acc * 100.0);
    }
    println!("mean accuracy {:.2}%", l.mean_final_accuracy() * 100.0);
    println!(
        "old-task accuracy {}",
        if l.no_forgetting() { "unchanged" } else { "changed" }
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// `kh·kw` per stored layer, or 1 where the stored layer is already
/// element-wise.
fn kernel_areas(config: &BackboneConfig, store: &ksm_core::data::MaskStore) -> Vec<usize> {
    config
        .conv_shapes()
        .iter()
        .zip(&store.layers)
        .map(|(s, l)| if l.bits.len() == s[0] * s[1] { s[2] * s[3] } else { 1 })
        .collect()
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let config = match &args.checkpoint {
        Some(p) => Some(load_checkpoint::<f32>(p)?.config),
        None => None,
    };
    let mut reports = Vec::new();
    for path in &args.files {
        let store = load_mask(path).with_context(|| format!("reading {}", path.display()))?;
        let areas = match &config {
            Some(c) => kernel_areas(c, &store),
            None => vec![args.kernel_size * args.kernel_size; store.layers.len()],
        };
        reports.push((path, layer_stats(&store), OverheadReport::new(&store, &areas), store));
    }
    match args.format {
        StatsFormat::Csv => {
            let names: Vec<String> = reports.iter().map(|r| r.0.display().to_string()).collect();
            let rows: Vec<(&str, &[_])> = names.iter().zip(&reports).map(|(n, r)| (n.as_str(), &r.1[..])).collect();
            print!("{}", stats_csv(&rows)?);
        }
        StatsFormat::Json => {
            let doc: Vec<_> = reports
                .iter()
                .map(|(p, s, o, store)| {
                    json!({
                        "file": p.display().to_string(),
                        "task": store.companion.as_ref().map(|c| c.task_id),
                        "layers": s,
                        "overhead": o,
                    })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&json!({ "schema": 1, "files": doc }))?);
        }
        StatsFormat::Table => {
            for (p, s, o, store) in &reports {
                match &store.companion {
                    Some(c) => println!("{} (task {})", p.display(), c.task_id),
                    None => println!("{}", p.display()),
                }
                println!("{:>6} {:>9} {:>11} {:>12} {:>11}", "layer", "entries", "ones_ratio", "scale_ratio", "mean_scale");
                for l in s {
                    println!(
                        "{:>6} {:>9} {:>11.4} {:>12.4} {:>11.4}",
                        l.layer_id, l.entries, l.ones_ratio, l.scale_ratio, l.mean_scale
                    );
                }
                print_overhead(o);
                println!();
            }
        }
    }
    Ok(())
}

fn print_overhead(o: &OverheadReport) {
    println!(
        "mask bits {}  element-wise bits {} ({:.2}x fewer)",
        o.stored_bits,
        o.element_bits,
        o.bit_reduction()
    );
    println!("scaling values {} ({} bytes)", o.scale_count, 4 * o.scale_count);
    println!(
        "mask bytes {}  binary-only {} ({:.2}x)  element-wise binary {} ({:.2}x)",
        o.mask_bytes,
        o.binary_bytes,
        o.vs_binary(),
        o.element_binary_bytes,
        o.vs_element_binary()
    );
}

fn hex(h: &[u8]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let backbone: Backbone<f32> = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let store = load_mask(&args.mask).with_context(|| format!("reading {}", args.mask.display()))?;
    check_provenance(&backbone, &store, &args.mask)?;
    let artifact = artifact_from_store::<f32>(&store, &backbone.config)?;
    let id = args.task.unwrap_or(artifact.task_id);
    let seq = load_tasks(&args.data)?;
    let task = seq.get(id).ok_or(Error::UnknownTask(id))?;
    let e = evaluate(&backbone, &artifact, &task.test)?;
    println!(
        "task {id} accuracy {} ({}/{}) loss {:.6}",
        e.accuracy, e.correct, e.total, e.loss
    );
    Ok(())
}

fn check_provenance(backbone: &Backbone<f32>, store: &ksm_core::data::MaskStore, path: &Path) -> Result<()> {
    let expected = backbone.content_hash();
    if let Some(c) = &store.companion {
        if c.backbone_hash != expected {
            bail!(Error::HashMismatch(format!(
                "{} was trained against backbone {}, checkpoint is {}",
                path.display(),
                hex(&c.backbone_hash),
                hex(&expected)
            )));
        }
    }
    Ok(())
}
