//! Rasterizes a crack, derives its keypoint box and maps the box back to pixels.
//!
//! `cargo run --example keypoint_labels`

use microcrack::labels::{keypoints_to_mask, mask_to_keypoints};
use microcrack::wavesim::{rasterize_crack, CrackSpec};

fn print_mask(mask: &microcrack::labels::Mask) {
    for r in 0..mask.height() {
        let row: String = (0..mask.width())
            .map(|c| if mask.get(r, c) == 1 { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }
}

fn main() -> microcrack::Result<()> {
    let crack = CrackSpec::segment([0.2, 0.3], [0.7, 0.55], 0.04);
    let mask = rasterize_crack(&crack, 24, 24);
    println!("crack mask ({} pixels):", mask.count_ones());
    print_mask(&mask);

    let Some(b) = mask_to_keypoints(&mask)? else {
        println!("empty mask, no box");
        return Ok(());
    };
    println!(
        "box x [{:.4}, {:.4}]  y [{:.4}, {:.4}]  area {:.4}",
        b.x_min,
        b.y_min,
        b.x_max,
        b.y_max,
        b.area()
    );
    let filled = keypoints_to_mask(&b, 24, 24)?;
    println!("box as mask ({} pixels):", filled.count_ones());
    print_mask(&filled);
    Ok(())
}
