//! Segmentation masks and the keypoint boxes derived from them.
//!
//! A [`KeypointBox`] is the axis-aligned rectangle whose four corners are the
//! regression targets. Coordinates are normalized by the label grid size and
//! pixel bounds are half-open, so `(x_max - x_min) * W` is an exact pixel count.

use crate::error::{Error, Result};

/// Binary label grid, row-major, `1` marks a crack pixel.
///
/// Rows run along `y`, columns along `x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    /// Wraps raw bytes. Entries are not checked here; see [`Mask::validate`].
    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask buffer has {} entries, expected {}x{}",
                data.len(),
                h,
                w
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.w + c] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "mask entry at ({}, {}) is {}, expected 0 or 1",
                pos / self.w,
                pos % self.w,
                self.data[pos]
            )));
        }
        Ok(())
    }

    /// Iterator over `(row, col)` of every crack pixel.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(move |(i, _)| (i / self.w, i % self.w))
    }
}

/// Normalized `(x_min, y_min, x_max, y_max)` rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl KeypointBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_ordered(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    /// The four corner keypoints, counter-clockwise from `(x_min, y_min)`.
    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
        ]
    }
}

/// Bounding box of the crack pixels, grown by one pixel on each side and
/// clamped to the grid. `None` for an all-zero mask.
pub fn mask_to_keypoints(mask: &Mask) -> Result<Option<KeypointBox>> {
    mask.validate()?;
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (r, c) in mask.ones() {
        bounds = Some(match bounds {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    let Some((r_min, c_min, r_max, c_max)) = bounds else {
        return Ok(None);
    };
    let (h, w) = (mask.h as f64, mask.w as f64);
    // Half-open pixel bounds [min - 1, max + 2) after the margin.
    let x_min = c_min.saturating_sub(1) as f64 / w;
    let y_min = r_min.saturating_sub(1) as f64 / h;
    let x_max = (c_max + 2).min(mask.w) as f64 / w;
    let y_max = (r_max + 2).min(mask.h) as f64 / h;
    Ok(Some(KeypointBox::new(x_min, y_min, x_max, y_max)))
}

/// Rasterizes a box: a cell is set iff its center lies inside the box.
pub fn keypoints_to_mask(b: &KeypointBox, h: usize, w: usize) -> Result<Mask> {
    if h == 0 || w == 0 {
        return Err(Error::Validation(format!(
            "label grid must be non-empty, got {h}x{w}"
        )));
    }
    if !b.is_ordered() {
        return Err(Error::Validation(format!("box is not ordered: {b:?}")));
    }
    let mut mask = Mask::zeros(h, w);
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        if cy <= b.y_min || cy >= b.y_max {
            continue;
        }
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            if cx > b.x_min && cx < b.x_max {
                mask.set(r, c, 1);
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(
        h: usize,
        w: usize,
        rows: std::ops::RangeInclusive<usize>,
        cols: std::ops::RangeInclusive<usize>,
    ) -> Mask {
        let mut m = Mask::zeros(h, w);
        for r in rows {
            for c in cols.clone() {
                m.set(r, c, 1);
            }
        }
        m
    }

    #[test]
    fn empty_mask_has_no_box() {
        assert_eq!(mask_to_keypoints(&Mask::zeros(16, 16)).unwrap(), None);
    }

    #[test]
    fn worked_block_example() {
        let m = block(16, 16, 5..=7, 3..=9);
        let b = mask_to_keypoints(&m).unwrap().unwrap();
        assert_eq!(b, KeypointBox::new(0.125, 0.25, 0.6875, 0.5625));
    }

    #[test]
    fn corner_pixel_is_clamped() {
        let m = block(16, 16, 0..=0, 0..=0);
        let b = mask_to_keypoints(&m).unwrap().unwrap();
        assert_eq!(b, KeypointBox::new(0.0, 0.0, 2.0 / 16.0, 2.0 / 16.0));
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let mut m = Mask::zeros(4, 4);
        m.set(1, 2, 3);
        assert!(matches!(mask_to_keypoints(&m), Err(Error::Validation(_))));
    }

    #[test]
    fn rasterize_full_and_degenerate() {
        let full = keypoints_to_mask(&KeypointBox::new(0.0, 0.0, 1.0, 1.0), 16, 16).unwrap();
        assert_eq!(full.count_ones(), 256);
        let thin = keypoints_to_mask(&KeypointBox::new(0.3, 0.0, 0.3, 1.0), 16, 16).unwrap();
        assert!(thin.is_empty());
        assert!(keypoints_to_mask(&KeypointBox::new(0.0, 0.0, 1.0, 1.0), 0, 4).is_err());
    }

    #[test]
    fn rasterize_worked_box() {
        let b = KeypointBox::new(0.125, 0.25, 0.6875, 0.5625);
        let m = keypoints_to_mask(&b, 16, 16).unwrap();
        // Cell-center oracle: rows with 0.25 < (r+0.5)/16 < 0.5625, cols with 0.125 < (c+0.5)/16 < 0.6875.
        let rows: Vec<usize> = (0..16)
            .filter(|&r| {
                let y = (r as f64 + 0.5) / 16.0;
                y > 0.25 && y < 0.5625
            })
            .collect();
        let cols: Vec<usize> = (0..16)
            .filter(|&c| {
                let x = (c as f64 + 0.5) / 16.0;
                x > 0.125 && x < 0.6875
            })
            .collect();
        assert_eq!(rows, (4..=8).collect::<Vec<_>>());
        assert_eq!(cols, (2..=10).collect::<Vec<_>>());
        assert_eq!(m, block(16, 16, 4..=8, 2..=10));
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop_oneof![3 => Just(0u8), 1 => Just(1u8)], h * w)
                .prop_map(move |d| Mask::from_raw(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn box_contains_every_crack_cell(m in arb_mask()) {
            match mask_to_keypoints(&m).unwrap() {
                None => prop_assert!(m.is_empty()),
                Some(b) => {
                    for v in b.to_array() {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                    prop_assert!(b.area() > 0.0);
                    let (h, w) = (m.height() as f64, m.width() as f64);
                    for (r, c) in m.ones() {
                        prop_assert!(b.x_min <= c as f64 / w && (c + 1) as f64 / w <= b.x_max);
                        prop_assert!(b.y_min <= r as f64 / h && (r + 1) as f64 / h <= b.y_max);
                    }
                }
            }
        }

        #[test]
        fn aligned_box_round_trip_contains_original(
            (h, w, r0, r1, c0, c1) in (2usize..20, 2usize..20).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), 0..h, 0..h, 0..w, 0..w)
            })
        ) {
            let (r0, r1) = (r0.min(r1), r0.max(r1) + 1);
            let (c0, c1) = (c0.min(c1), c0.max(c1) + 1);
            let b = KeypointBox::new(c0 as f64 / w as f64, r0 as f64 / h as f64, c1 as f64 / w as f64, r1 as f64 / h as f64);
            let m = keypoints_to_mask(&b, h, w).unwrap();
            prop_assert_eq!(m.count_ones(), (r1 - r0) * (c1 - c0));
            let back = mask_to_keypoints(&m).unwrap().unwrap();
            prop_assert!(back.x_min <= b.x_min && back.y_min <= b.y_min);
            prop_assert!(back.x_max >= b.x_max && back.y_max >= b.y_max);
        }
    }
}
