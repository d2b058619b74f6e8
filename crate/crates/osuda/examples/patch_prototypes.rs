//! Patchwise prototypical matching on a feature map you can see: patch
//! prototypes, fused cosine confidence, entropy damping, and the final
//! rectified loss weights, rendered as ASCII heat maps.
//!
//!     cargo run --example patch_prototypes

use osuda::protomatch::{confidence, entropy_map, patchify, prototypes, rectify, ConfidenceMap};
use osuda::tensor::Tensor;

fn heat(map: &ConfidenceMap, label: &str) {
    // bucket [-1, 1] into shade characters
    const SHADES: [char; 6] = ['-', '.', ':', 'o', 'O', '#'];
    println!("{label} ({}x{}):", map.h, map.w);
    for y in 0..map.h {
        let row: String = (0..map.w)
            .map(|x| {
                let v = map.values[y * map.w + x];
                let idx = (((v + 1.0) / 2.0) * (SHADES.len() as f64 - 1.0))
                    .round()
                    .clamp(0.0, SHADES.len() as f64 - 1.0) as usize;
                SHADES[idx]
            })
            .collect();
        println!("  {row}");
    }
}

/// 2-channel 8x8 map holding two "semantic" directions: channel pattern
/// (1, 0) in the left half, (0, 1) in the right half.
fn two_region_feature(flip: bool) -> Tensor {
    let mut data = vec![0.0; 2 * 8 * 8];
    for y in 0..8 {
        for x in 0..8 {
            let left = x < 4;
            let ch = usize::from(left == flip);
            data[ch * 64 + y * 8 + x] = 1.0;
        }
    }
    Tensor::new(vec![2, 8, 8], data).unwrap()
}

fn main() {
    let f_target = two_region_feature(false);
    // source has the same two regions, mirrored
    let f_source = two_region_feature(true);

    let patches = patchify(&f_target, 4).unwrap();
    let protos = prototypes(&patches).unwrap();
    println!("target cut into {} patches of 4x4, grid {:?}", patches.n, patches.grid);
    for i in 0..protos.n {
        println!("  prototype {i}: {:?}", protos.proto(i));
    }

    // every source pixel matches one of the two prototypes perfectly:
    // max-cosine fuses the per-prototype maps, so sides don't matter
    let fused = confidence(&f_source, &protos).unwrap();
    heat(&fused, "\nfused confidence");

    // an anti-correlated source region scores negative and keeps its sign:
    // (-1, -1) has negative cosine against both prototypes, so even the max
    // stays below zero
    let mut data = f_source.data.clone();
    for y in 0..4 {
        for x in 0..4 {
            data[y * 8 + x] = -1.0; // top-left block, both channels
            data[64 + y * 8 + x] = -1.0;
        }
    }
    let f_anti = Tensor::new(vec![2, 8, 8], data).unwrap();
    let fused_anti = confidence(&f_anti, &protos).unwrap();
    heat(&fused_anti, "\nwith an anti-correlated block (negative values stay)");
    println!("negative pixels: {}", fused_anti.negative_count());

    // entropy damping: confident softmax -> weight kept, uniform -> zeroed
    let mut p = vec![0.0; 3 * 8 * 8];
    for y in 0..8 {
        for x in 0..8 {
            let pos = y * 8 + x;
            if y < 4 {
                // confident: (0.9, 0.05, 0.05)
                p[pos] = 0.9;
                p[64 + pos] = 0.05;
                p[128 + pos] = 0.05;
            } else {
                // uniform: maximal entropy
                p[pos] = 1.0 / 3.0;
                p[64 + pos] = 1.0 / 3.0;
                p[128 + pos] = 1.0 / 3.0;
            }
        }
    }
    let p = Tensor::new(vec![3, 8, 8], p).unwrap();
    let e = entropy_map(&p).unwrap();
    heat(&e, "\nprediction entropy (top confident, bottom uniform)");

    let rectified = rectify(&fused, &e).unwrap();
    heat(&rectified, "\nrectified weights Conf * (1 - E)");
    println!(
        "\nbottom half got weight ~0: high-entropy pixels are distrusted even when they match."
    );
}
