//! Standard (non center-sampled) label assignment.

use super::model::Grid;
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Per-location training targets on one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationTargets {
    pub grid: Grid,
    /// Class of each location, `None` for background.
    pub class: Vec<Option<usize>>,
    /// Index into the assigned box list, `None` for background.
    pub box_index: Vec<Option<usize>>,
    /// `[l, t, r, b]` in pixels; zero at background locations.
    pub ltrb: Vec<[f64; 4]>,
    /// Zero at background locations.
    pub centerness: Vec<f64>,
}

impl LocationTargets {
    pub fn num_foreground(&self) -> usize {
        self.class.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_foreground(&self, loc: usize) -> bool {
        self.class[loc].is_some()
    }
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`.
pub fn centerness_target(ltrb: [f64; 4]) -> Result<f64> {
    let [l, t, r, b] = ltrb;
    if !ltrb.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "centerness needs positive distances, got {ltrb:?}"
        )));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Marks every location whose center lies strictly inside a box as
/// foreground. Ambiguous locations take the smallest-area box, then the
/// lowest class id, then the earliest box.
pub fn assign_targets(boxes: &[BBox], grid: Grid) -> LocationTargets {
    let n = grid.len();
    let mut t = LocationTargets {
        grid,
        class: vec![None; n],
        box_index: vec![None; n],
        ltrb: vec![[0.0; 4]; n],
        centerness: vec![0.0; n],
    };
    for loc in 0..n {
        let (cx, cy) = grid.center(loc);
        let best = boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.contains_point(cx, cy))
            .min_by(|(ia, a), (ib, b)| {
                a.area()
                    .total_cmp(&b.area())
                    .then(a.class_id.cmp(&b.class_id))
                    .then(ia.cmp(ib))
            });
        if let Some((i, b)) = best {
            let d = [cx - b.x_min, cy - b.y_min, b.x_max - cx, b.y_max - cy];
            t.class[loc] = Some(b.class_id);
            t.box_index[loc] = Some(i);
            t.ltrb[loc] = d;
            t.centerness[loc] = centerness_target(d).expect("strictly inside");
        }
    }
    t
}
