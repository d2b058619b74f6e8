//! End to end at desk scale: pretrain on source, adapt with one unlabeled
//! target image, compare target-set mIoU before and after. The pretrain
//! step dominates; expect a few minutes on one core.
//!
//!     cargo run --example one_shot_adaptation

use osuda::adapt::{adapt_one_shot, pretrain_source, AdaptConfig};
use osuda::benchdata::{evaluate, generate_benchmark, BenchSpec};
use osuda::rng::subseed;
use osuda::segmentor::Arch;

fn main() {
    let spec = BenchSpec::default_desk();
    let bench = generate_benchmark(&spec, subseed(0, "data")).unwrap();
    println!(
        "benchmark: {} source / {} target-eval scenes at {}x{}",
        bench.source.len(),
        bench.target_eval.len(),
        spec.h,
        spec.w
    );

    let mut cfg = AdaptConfig::default_desk();

    println!(
        "\npretraining on source ({} iters — the long step)...",
        cfg.pretrain_iters
    );
    let pre = pretrain_source(Arch::default_desk(spec.classes), &bench.source, &cfg).unwrap();
    let src = evaluate(&pre.model, &bench.source).unwrap();
    let before = evaluate(&pre.model, &bench.target_eval).unwrap();
    println!(
        "source mIoU {:.4}, target mIoU {:.4} — the domain gap",
        src.miou, before.miou
    );

    // one unlabeled target image drives the adaptation
    let one_shot = &bench.target_pool.samples[0];
    cfg.seed = subseed(0, "adapt/pick0/seed0");
    println!("\nadapting on one target image ({} iters)...", cfg.max_iters);
    let outcome = adapt_one_shot(&pre.model, &bench.source, &one_shot.image, &cfg).unwrap();
    println!(
        "distinct target images consumed: {} (audited)",
        outcome.distinct_targets
    );
    for r in outcome.records.iter().step_by(100) {
        println!(
            "  iter {:>3}  lr {:.2e}  ce {:.3}  weighted {:.3}  negative-weight px {}",
            r.iter, r.lr, r.l_ce, r.l_pce, r.neg_conf_pixels
        );
    }

    let after = evaluate(&outcome.model, &bench.target_eval).unwrap();
    println!("\ntarget mIoU {:.4} -> {:.4}", before.miou, after.miou);
    for (c, (b, a)) in before
        .per_class_iou
        .iter()
        .zip(&after.per_class_iou)
        .enumerate()
    {
        println!("  class {c}: {b:.4} -> {a:.4}");
    }
}
