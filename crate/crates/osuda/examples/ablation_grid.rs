//! A miniature ablation sweep: which ingredients carry the gain? Runs the
//! confidence-weight variants and the mixing-site variants over two seeds
//! on the first one-shot pick. Expect five-plus minutes on one core; the
//! CLI `ablate` subcommand runs the full seed axis and writes CSVs.
//!
//!     cargo run --example ablation_grid

use osuda::adapt::{
    ablation_suite, conf_cells, mixing_cells, pretrain_source, protocol_cells, AdaptConfig,
};
use osuda::benchdata::{evaluate, generate_benchmark, BenchSpec};
use osuda::rng::subseed;
use osuda::segmentor::Arch;

fn main() {
    let spec = BenchSpec::default_desk();
    let bench = generate_benchmark(&spec, subseed(0, "data")).unwrap();
    let cfg = AdaptConfig {
        max_iters: 300,
        ..AdaptConfig::default_desk()
    };

    println!("pretraining shared baseline ({} iters)...", cfg.pretrain_iters);
    let pre = pretrain_source(Arch::default_desk(spec.classes), &bench.source, &cfg).unwrap();
    let baseline = evaluate(&pre.model, &bench.target_eval).unwrap();
    println!("source-only target mIoU: {:.4}\n", baseline.miou);

    let protocol = protocol_cells(1, 2, None);
    let mut cells = conf_cells(cfg.patch_size);
    cells.extend(mixing_cells(cfg.patch_size));

    println!("{:<14} {:>10} {:>8}", "cell", "mean mIoU", "std");
    for r in ablation_suite(&pre.model, &bench, &cfg, &cells, &protocol).unwrap() {
        println!("{:<14} {:>10.4} {:>8.4}", r.name, r.mean_miou, r.std_miou);
    }
    println!("\n(full = rectified weights, both mixing sites)");
}
