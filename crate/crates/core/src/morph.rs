//! Binary morphology with a square (Chebyshev) structuring element.

use crate::grid::BoolGrid;

/// Dilation by `radius`: a pixel turns on if any pixel within Chebyshev
/// distance `radius` is on. Pixels outside the grid count as off.
pub fn dilate(mask: &BoolGrid, radius: usize) -> BoolGrid {
    if radius == 0 {
        return mask.clone();
    }
    separable(mask, radius, true)
}

/// Erosion by `radius`: a pixel stays on only if every in-bounds pixel within
/// Chebyshev distance `radius` is on and the window does not leave the grid.
pub fn erode(mask: &BoolGrid, radius: usize) -> BoolGrid {
    if radius == 0 {
        return mask.clone();
    }
    separable(mask, radius, false)
}

// A square window factors into a horizontal pass followed by a vertical one.
fn separable(mask: &BoolGrid, radius: usize, any: bool) -> BoolGrid {
    let (h, w) = mask.dims();
    let horiz = BoolGrid::from_fn(h, w, |r, c| window(c, radius, w, any, |cc| *mask.get(r, cc)));
    BoolGrid::from_fn(h, w, |r, c| window(r, radius, h, any, |rr| *horiz.get(rr, c)))
}

fn window(center: usize, radius: usize, len: usize, any: bool, at: impl Fn(usize) -> bool) -> bool {
    let lo = center.saturating_sub(radius);
    let hi = (center + radius).min(len - 1);
    if any {
        (lo..=hi).any(at)
    } else {
        // Off-grid neighbours count as background.
        center >= radius && center + radius < len && (lo..=hi).all(at)
    }
}
