use serde::{Deserialize, Serialize};

use crate::graph::ChunkRange;
use crate::{Error, Result};

/// Axis-aligned box with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let corners = [self.x1, self.y1, self.x2, self.y2];
        if corners.iter().any(|v| !v.is_finite()) || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::DegenerateBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Overlap area with another box; zero when they do not intersect.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// One box per frame over a contiguous half-open frame range
/// `[start, start + boxes.len())`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    start_frame: usize,
    boxes: Vec<BBox>,
}

impl Trajectory {
    pub fn new(start_frame: usize, boxes: Vec<BBox>) -> Result<Self> {
        let t = Trajectory { start_frame, boxes };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    pub fn start(&self) -> usize {
        self.start_frame
    }

    /// Exclusive end frame.
    pub fn end(&self) -> usize {
        self.start_frame + self.boxes.len()
    }

    pub fn range(&self) -> ChunkRange {
        ChunkRange {
            start: self.start_frame,
            end: self.end(),
        }
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
    }

    /// The part of this trajectory inside `[start, end)`, if any frame
    /// survives the cut.
    pub fn restricted(&self, start: usize, end: usize) -> Option<Trajectory> {
        let s = start.max(self.start_frame);
        let e = end.min(self.end());
        if s >= e {
            return None;
        }
        Some(Trajectory {
            start_frame: s,
            boxes: self.boxes[s - self.start_frame..e - self.start_frame].to_vec(),
        })
    }

    /// Extend with the part of `other` that lies past this trajectory's end,
    /// keeping this trajectory's boxes on every frame it already covers. The
    /// caller must ensure `other` starts at or before `self.end()` so the
    /// result stays contiguous.
    pub(crate) fn extended_by(&self, other: &Trajectory) -> Trajectory {
        debug_assert!(
            other.start() <= self.end(),
            "cannot bridge a frame gap between trajectories"
        );
        let mut boxes = self.boxes.clone();
        if other.end() > self.end() {
            boxes.extend_from_slice(&other.boxes[self.end() - other.start()..]);
        }
        Trajectory {
            start_frame: self.start_frame,
            boxes,
        }
    }
}

/// Volume IoU of two trajectories: per-frame intersection areas summed over
/// the frames both cover, divided by per-frame union areas summed over the
/// frames either covers. A frame only one trajectory covers contributes that
/// box's full area to the union. Zero when the union is empty.
pub fn viou(a: &Trajectory, b: &Trajectory) -> f64 {
    let lo = a.start().min(b.start());
    let hi = a.end().max(b.end());
    let mut inter = 0.0;
    let mut union = 0.0;
    for frame in lo..hi {
        match (a.box_at(frame), b.box_at(frame)) {
            (Some(ba), Some(bb)) => {
                let i = ba.intersection_area(bb);
                inter += i;
                union += ba.area() + bb.area() - i;
            }
            (Some(ba), None) => union += ba.area(),
            (None, Some(bb)) => union += bb.area(),
            (None, None) => {}
        }
    }
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// [`viou`] of the two trajectories restricted to `range`; zero when either
/// restriction is empty.
pub fn viou_over(a: &Trajectory, b: &Trajectory, range: &ChunkRange) -> f64 {
    match (
        a.restricted(range.start, range.end),
        b.restricted(range.start, range.end),
    ) {
        (Some(ra), Some(rb)) => viou(&ra, &rb),
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::substream;

    fn constant_track(start: usize, frames: usize, c: [f64; 4]) -> Trajectory {
        let b = BBox::new(c[0], c[1], c[2], c[3]).unwrap();
        Trajectory::new(start, vec![b; frames]).unwrap()
    }

    #[test]
    fn identical_trajectories_score_one() {
        let a = constant_track(3, 5, [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(viou(&a, &a.clone()), 1.0);
    }

    #[test]
    fn spatially_disjoint_trajectories_score_zero() {
        let a = constant_track(0, 4, [0.0, 0.0, 1.0, 1.0]);
        let b = constant_track(0, 4, [5.0, 5.0, 6.0, 6.0]);
        assert_eq!(viou(&a, &b), 0.0);
    }

    #[test]
    fn single_shared_frame_gives_one_third() {
        let a = constant_track(0, 1, [0.0, 0.0, 10.0, 10.0]);
        let b = constant_track(0, 1, [5.0, 0.0, 15.0, 10.0]);
        // intersection 5 x 10 = 50, union 100 + 100 - 50 = 150
        assert_eq!(viou(&a, &b), 1.0 / 3.0);
    }

    #[test]
    fn frames_covered_by_one_side_count_their_full_area() {
        // Same box, ranges [0,2) and [1,3): one shared frame plus one lone
        // frame on each side.
        let a = constant_track(0, 2, [0.0, 0.0, 10.0, 10.0]);
        let b = constant_track(1, 2, [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(viou(&a, &b), 1.0 / 3.0);
    }

    #[test]
    fn disjoint_frame_ranges_score_zero() {
        let a = constant_track(0, 2, [0.0, 0.0, 10.0, 10.0]);
        let b = constant_track(10, 2, [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(viou(&a, &b), 0.0);
    }

    #[test]
    fn viou_is_symmetric_and_bounded() {
        let mut rng = substream(41, "viou-symmetry");
        for _ in 0..200 {
            let mut tracks = Vec::new();
            for _ in 0..2 {
                let start = rng.random_range(0..6usize);
                let frames = rng.random_range(1..6usize);
                let boxes = (0..frames)
                    .map(|_| {
                        let x1 = rng.random_range(0.0..20.0);
                        let y1 = rng.random_range(0.0..20.0);
                        let w = rng.random_range(0.5..10.0);
                        let h = rng.random_range(0.5..10.0);
                        BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
                    })
                    .collect();
                tracks.push(Trajectory::new(start, boxes).unwrap());
            }
            let fwd = viou(&tracks[0], &tracks[1]);
            let bwd = viou(&tracks[1], &tracks[0]);
            assert_eq!(fwd, bwd);
            assert!((0.0..=1.0).contains(&fwd), "viou {fwd} out of range");
        }
    }

    #[test]
    fn restriction_clips_to_the_requested_range() {
        let a = constant_track(2, 4, [0.0, 0.0, 1.0, 1.0]); // frames [2,6)
        let r = a.restricted(3, 5).unwrap();
        assert_eq!(r.start(), 3);
        assert_eq!(r.end(), 5);
        assert!(a.restricted(6, 9).is_none());
        assert!(a.restricted(0, 2).is_none());
        assert!(a.box_at(1).is_none());
        assert!(a.box_at(2).is_some());
        assert!(a.box_at(6).is_none());
    }

    #[test]
    fn degenerate_boxes_and_empty_trajectories_are_rejected() {
        assert!(matches!(
            BBox::new(0.0, 0.0, 0.0, 10.0),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(matches!(
            BBox::new(0.0, 5.0, 10.0, 5.0),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(matches!(
            BBox::new(0.0, 0.0, f64::NAN, 10.0),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(matches!(
            Trajectory::new(0, Vec::new()),
            Err(Error::EmptyTrajectory)
        ));
    }

    #[test]
    fn extension_appends_only_frames_past_the_end() {
        let a = constant_track(0, 2, [0.0, 0.0, 10.0, 10.0]);
        let b = constant_track(1, 3, [1.0, 0.0, 11.0, 10.0]); // frames [1,4)
        let merged = a.extended_by(&b);
        assert_eq!(merged.start(), 0);
        assert_eq!(merged.end(), 4);
        // the shared frame keeps the earlier trajectory's box
        assert_eq!(merged.box_at(1).unwrap().x1, 0.0);
        assert_eq!(merged.box_at(2).unwrap().x1, 1.0);

        let inside = constant_track(1, 1, [2.0, 0.0, 12.0, 10.0]);
        let unchanged = a.extended_by(&inside);
        assert_eq!(unchanged, a);
    }
}
