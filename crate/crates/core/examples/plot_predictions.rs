//! Writes an SVG overlay of a truth box and a perturbed prediction.
//!
//! `cargo run --example plot_predictions -- [out.svg]`

use std::path::PathBuf;

use microcrack::labels::{mask_to_keypoints, KeypointBox};
use microcrack::metrics::PairScore;
use microcrack::plot::{render_svg, write_svg};
use microcrack::wavesim::{rasterize_crack, CrackSpec};

fn main() -> microcrack::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("microcrack_overlay.svg"));
    let mask = rasterize_crack(&CrackSpec::segment([0.25, 0.6], [0.7, 0.35], 0.03), 32, 32);
    let truth = mask_to_keypoints(&mask)?.expect("crack covers pixels");
    let pred = KeypointBox::new(
        truth.x_min + 0.04,
        truth.y_min - 0.02,
        truth.x_max + 0.05,
        truth.y_max + 0.01,
    );
    let score = PairScore::of(&pred, &truth);
    let title = format!(
        "IoU {:.3}  purity {:.3}  integrity {:.3}",
        score.iou, score.purity, score.integrity
    );
    write_svg(&out, &render_svg(&mask, Some(&truth), Some(&pred), &title))?;
    println!("{title}\nwrote {}", out.display());
    Ok(())
}
