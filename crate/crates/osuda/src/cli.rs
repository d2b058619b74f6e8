//! Command implementations behind the thin binary.
//!
//! Filesystem layout under the `--out` directory:
//!   source/ target_eval/ target_pool/   datasets (gen-data)
//!   manifest.json                       resolved config echo (gen-data)
//!   pretrained.ckpt, pretrain_log.csv   (pretrain)
//!   adapt_aggregate.csv, adapt_iters.csv, adapted_run<k>.ckpt  (adapt)
//!   ablation_conf.csv, ablation_mixing.csv, ablation_patch.csv (ablate)
//!
//! Each command overwrites its outputs byte-identically when rerun with
//! the same config and inputs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapt::{
    ablation_suite, conf_cells, mixing_cells, patch_cells, pretrain_source, protocol_cells,
    run_cells, CellResult, RunResult,
};
use crate::benchdata::{evaluate, generate_benchmark, load_dataset, save_dataset, Benchmark,
    Dataset, MetricsReport};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::subseed;

/// `--config` falls back to built-in defaults; `--seed` overrides the
/// config's root seed.
pub fn resolve_config(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default_desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn field_needs_quoting(f: &str) -> bool {
    f.contains(',') || f.contains('"') || f.contains('\n') || f.contains('\r')
}

fn csv_row(fields: &[String]) -> String {
    let mut out = String::new();
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if field_needs_quoting(f) {
            out.push('"');
            out.push_str(&f.replace('"', "\"\""));
            out.push('"');
        } else {
            out.push_str(f);
        }
    }
    out.push('\n');
    out
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = csv_row(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    for row in rows {
        text.push_str(&csv_row(row));
    }
    fs::write(path, text).map_err(Error::io(path))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn source_dir(out: &Path) -> PathBuf {
    out.join("source")
}
pub fn target_eval_dir(out: &Path) -> PathBuf {
    out.join("target_eval")
}
pub fn target_pool_dir(out: &Path) -> PathBuf {
    out.join("target_pool")
}
pub fn pretrained_path(out: &Path) -> PathBuf {
    out.join("pretrained.ckpt")
}

/// Generates the three dataset splits and echoes the resolved config.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let bench = generate_benchmark(&cfg.bench_spec(), subseed(cfg.seed, "data"))?;
    save_dataset(&bench.source, &source_dir(out))?;
    save_dataset(&bench.target_eval, &target_eval_dir(out))?;
    save_dataset(&bench.target_pool, &target_pool_dir(out))?;
    let manifest = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format {
        what: "manifest",
        detail: e.to_string(),
    })?;
    let mpath = out.join("manifest.json");
    fs::write(&mpath, manifest).map_err(Error::io(&mpath))?;
    println!(
        "wrote {} source / {} target-eval / {} target-pool scenes under {}",
        bench.source.len(),
        bench.target_eval.len(),
        bench.target_pool.len(),
        out.display()
    );
    Ok(())
}

fn check_dataset(ds: &Dataset, cfg: &RunConfig, name: &str) -> Result<()> {
    if ds.classes != cfg.classes || ds.h != cfg.height || ds.w != cfg.width {
        return Err(Error::Config(format!(
            "{name} dataset is C={} {}x{}, config expects C={} {}x{}",
            ds.classes, ds.h, ds.w, cfg.classes, cfg.height, cfg.width
        )));
    }
    Ok(())
}

fn load_bench(cfg: &RunConfig, out: &Path) -> Result<Benchmark> {
    let source = load_dataset(&source_dir(out))?;
    let target_eval = load_dataset(&target_eval_dir(out))?;
    let target_pool = load_dataset(&target_pool_dir(out))?;
    check_dataset(&source, cfg, "source")?;
    check_dataset(&target_eval, cfg, "target_eval")?;
    check_dataset(&target_pool, cfg, "target_pool")?;
    Ok(Benchmark {
        source,
        target_eval,
        target_pool,
    })
}

/// Source-only training; writes the baseline checkpoint and its loss log.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let source = load_dataset(&source_dir(out))?;
    check_dataset(&source, cfg, "source")?;
    let outcome = pretrain_source(cfg.arch(), &source, &cfg.adapt_config())?;
    let ckpt = pretrained_path(out);
    save_checkpoint(&outcome.model, &ckpt)?;
    let rows: Vec<Vec<String>> = outcome
        .records
        .iter()
        .map(|r| vec![r.iter.to_string(), fmt(r.lr), fmt(r.loss)])
        .collect();
    write_csv(&out.join("pretrain_log.csv"), &["iter", "lr", "loss"], &rows)?;
    let report = evaluate(&outcome.model, &source)?;
    println!(
        "pretrained {} iters, final loss {:.4}, source mIoU {:.4} -> {}",
        outcome.records.len(),
        outcome.records.last().map_or(f64::NAN, |r| r.loss),
        report.miou,
        ckpt.display()
    );
    Ok(())
}

fn iou_headers(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("iou_class_{c}")).collect()
}

/// Per-class mean over runs, skipping absent-class NaN entries.
fn class_means(runs: &[RunResult], classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let vals: Vec<f64> = runs
                .iter()
                .map(|r| r.per_class_iou[c])
                .filter(|v| !v.is_nan())
                .collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect()
}

fn write_aggregate_csv(path: &Path, runs: &[RunResult], classes: usize) -> Result<()> {
    let mut header: Vec<String> = vec!["run_id".into(), "pick".into(), "seed".into()];
    header.extend(iou_headers(classes));
    header.push("miou".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut rows = Vec::with_capacity(runs.len() + 1);
    for r in runs {
        let mut row = vec![r.run_id.to_string(), r.pick.to_string(), r.seed.to_string()];
        row.extend(r.per_class_iou.iter().map(|&v| fmt(v)));
        row.push(fmt(r.miou));
        rows.push(row);
    }
    let mut summary = vec!["mean".to_string(), String::new(), String::new()];
    summary.extend(class_means(runs, classes).iter().map(|&v| fmt(v)));
    summary.push(fmt(
        runs.iter().map(|r| r.miou).sum::<f64>() / runs.len() as f64,
    ));
    rows.push(summary);
    write_csv(path, &header_refs, &rows)
}

fn write_iters_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut rows = Vec::new();
    for r in runs {
        for rec in &r.records {
            rows.push(vec![
                r.run_id.to_string(),
                rec.iter.to_string(),
                fmt(rec.lr),
                fmt(rec.l_ce),
                fmt(rec.l_pce),
                fmt(rec.total),
                rec.neg_conf_pixels.to_string(),
            ]);
        }
    }
    write_csv(
        path,
        &["run_id", "iter", "lr", "l_ce", "l_pce", "total", "neg_conf_pixels"],
        &rows,
    )
}

/// The multi-run one-shot protocol from the pretrained baseline.
/// `runs_cap` truncates the (pick, seed) grid in pick-major order.
pub fn cmd_adapt(cfg: &RunConfig, out: &Path, runs_cap: Option<usize>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let bench = load_bench(cfg, out)?;
    let pretrained = load_checkpoint(&pretrained_path(out))?;
    if pretrained.arch != cfg.arch() {
        return Err(Error::Config(
            "pretrained checkpoint architecture does not match config".into(),
        ));
    }
    let baseline = evaluate(&pretrained, &bench.target_eval)?;
    let cells = protocol_cells(cfg.n_picks, cfg.n_seeds, runs_cap);
    let runs = run_cells(&pretrained, &bench, &cfg.adapt_config(), &cells)?;
    write_aggregate_csv(&out.join("adapt_aggregate.csv"), &runs, cfg.classes)?;
    write_iters_csv(&out.join("adapt_iters.csv"), &runs)?;
    for r in &runs {
        save_checkpoint(&r.model, &out.join(format!("adapted_run{}.ckpt", r.run_id)))?;
    }
    let mean: f64 = runs.iter().map(|r| r.miou).sum::<f64>() / runs.len() as f64;
    let positive = runs.iter().filter(|r| r.miou > baseline.miou).count();
    println!(
        "source-only target mIoU {:.4}; adapted mean {:.4} over {} runs ({} improved)",
        baseline.miou,
        mean,
        runs.len(),
        positive
    );
    Ok(runs)
}

/// Evaluates any checkpoint on any dataset directory.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, out_csv: Option<&Path>) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    if ds.classes != model.arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint head has {}",
            ds.classes, model.arch.classes
        )));
    }
    let report = evaluate(&model, &ds)?;
    for (c, &iou) in report.per_class_iou.iter().enumerate() {
        println!("class {c} IoU {}", fmt(iou));
    }
    println!("mIoU {}", fmt(report.miou));
    if let Some(path) = out_csv {
        let mut rows: Vec<Vec<String>> = report
            .per_class_iou
            .iter()
            .enumerate()
            .map(|(c, &v)| vec![format!("iou_class_{c}"), fmt(v)])
            .collect();
        rows.push(vec!["miou".into(), fmt(report.miou)]);
        write_csv(path, &["metric", "value"], &rows)?;
    }
    Ok(report)
}

fn write_ablation_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.runs.len().to_string(),
                fmt(c.mean_miou),
                fmt(c.std_miou),
            ]
        })
        .collect();
    write_csv(path, &["cell", "runs", "mean_miou", "std_miou"], &rows)
}

/// Three study grids (weight variants, mixing variants, patch sizes), one
/// CSV each. Cells are compared across seeds on the first one-shot pick;
/// the full pick grid belongs to `cmd_adapt`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, runs_cap: Option<usize>) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let bench = load_bench(cfg, out)?;
    let pretrained = load_checkpoint(&pretrained_path(out))?;
    if pretrained.arch != cfg.arch() {
        return Err(Error::Config(
            "pretrained checkpoint architecture does not match config".into(),
        ));
    }
    let protocol = protocol_cells(1, cfg.n_seeds, runs_cap);
    let base = cfg.adapt_config();
    let p = cfg.train.patch_size;
    let grids: [(&str, Vec<_>); 3] = [
        ("ablation_conf.csv", conf_cells(p)),
        ("ablation_mixing.csv", mixing_cells(p)),
        ("ablation_patch.csv", patch_cells(&cfg.ablation_patch_sizes)),
    ];
    let mut all = Vec::new();
    for (file, cells) in grids {
        let results = ablation_suite(&pretrained, &bench, &base, &cells, &protocol)?;
        write_ablation_csv(&out.join(file), &results)?;
        for r in &results {
            println!(
                "{:<12} mean mIoU {:.4} (std {:.4}, {} runs)",
                r.name,
                r.mean_miou,
                r.std_miou,
                r.runs.len()
            );
        }
        all.extend(results);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_quote_only_when_needed() {
        let plain = csv_row(&["a".into(), "1.5".into()]);
        assert_eq!(plain, "a,1.5\n");
        let quoted = csv_row(&["a,b".into(), "say \"hi\"".into()]);
        assert_eq!(quoted, "\"a,b\",\"say \"\"hi\"\"\"\n");
    }

    #[test]
    fn float_formatting_round_trips() {
        // Display gives the shortest representation that parses back
        // exactly; that is what makes rerun CSVs byte-identical.
        for v in [0.1, 1.0 / 3.0, 5e-324, 1e300, -0.0] {
            assert_eq!(fmt(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt(f64::NAN), "NaN");
    }

    #[test]
    fn config_resolution_applies_seed_override() {
        let cfg = resolve_config(None, Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.classes, 5);
    }
}
