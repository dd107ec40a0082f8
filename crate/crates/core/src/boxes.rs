//! Box geometry shared by training and evaluation.

use serde::{Deserialize, Serialize};

/// Center-format box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-format box `(x1, y1, x2, y2)` in any consistent unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// Corners in pixels for an image of the given size.
    pub fn to_pixels(self, width: f64, height: f64) -> Corners {
        let c = self.corners();
        Corners {
            x1: c.x1 * width,
            y1: c.y1 * height,
            x2: c.x2 * width,
            y2: c.y2 * height,
        }
    }

    pub fn is_normalized(self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Corners { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Corners::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(self) -> f64 {
        self.width() * self.height()
    }

    /// Normalized center box for an image of the given size.
    pub fn normalized(self, width: f64, height: f64) -> BBox {
        BBox {
            cx: (self.x1 + self.x2) / 2.0 / width,
            cy: (self.y1 + self.y2) / 2.0 / height,
            w: (self.x2 - self.x1) / width,
            h: (self.y2 - self.y1) / height,
        }
    }

    /// Smallest box covering every input box.
    pub fn cover(boxes: impl IntoIterator<Item = Corners>) -> Option<Corners> {
        boxes.into_iter().reduce(|a, b| Corners {
            x1: a.x1.min(b.x1),
            y1: a.y1.min(b.y1),
            x2: a.x2.max(b.x2),
            y2: a.y2.max(b.y2),
        })
    }

    fn intersection(self, other: Corners) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn max_abs_diff(self, other: Corners) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: Corners, b: Corners) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (|C| - |A ∪ B|) / |C|` for enclosing box `C`.
pub fn giou(a: Corners, b: Corners) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let base = if union <= 0.0 { 0.0 } else { inter / union };
    let enclosing = Corners::cover([a, b]).unwrap().area();
    if enclosing <= 0.0 {
        base
    } else {
        base - (enclosing - union) / enclosing
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Grid-sampled area oracle for union and intersection.
    fn sampled_areas(a: Corners, b: Corners, lo: f64, hi: f64, steps: usize) -> (f64, f64) {
        let cell = (hi - lo) / steps as f64;
        let inside = |c: Corners, x: f64, y: f64| x >= c.x1 && x < c.x2 && y >= c.y1 && y < c.y2;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..steps {
            for j in 0..steps {
                let x = lo + (i as f64 + 0.5) * cell;
                let y = lo + (j as f64 + 0.5) * cell;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        (inter as f64 * cell * cell, union as f64 * cell * cell)
    }

    #[test]
    fn iou_examples() {
        let a = Corners::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, Corners::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let b = Corners::new(0.0, 0.5, 1.0, 1.5);
        assert!((iou(a, b) - 1.0 / 3.0).abs() < 1e-15);
        let (inter, union) = sampled_areas(a, b, -0.5, 2.0, 1000);
        assert!((inter / union - 1.0 / 3.0).abs() < 1e-2);
        let dot = Corners::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(dot, dot), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = Corners::new(0.0, 0.0, 1.0, 1.0);
        let b = Corners::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(giou(a, a), 1.0);
        assert!((giou(a, b) + 7.0 / 9.0).abs() < 1e-12);
        assert_eq!(giou(a, b), giou(b, a));
        // Monte-Carlo cross-check of the enclosure/union terms
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mut in_union = 0;
        for _ in 0..n {
            let (x, y): (f64, f64) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            let hit = |c: Corners| x >= c.x1 && x < c.x2 && y >= c.y1 && y < c.y2;
            in_union += (hit(a) || hit(b)) as usize;
        }
        let union = 9.0 * in_union as f64 / n as f64;
        assert!(((0.0 - (9.0 - union) / 9.0) - giou(a, b)).abs() < 0.01);
    }

    #[test]
    fn giou_bounds_and_degenerate_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut random = || {
            let (x, y): (f64, f64) = (rng.gen(), rng.gen());
            Corners::new(x, y, x + rng.gen::<f64>(), y + rng.gen::<f64>())
        };
        for _ in 0..1000 {
            let (a, b) = (random(), random());
            let g = giou(a, b);
            assert!(g > -1.0 && g <= 1.0);
            assert!(g <= iou(a, b) + 1e-15);
            assert!((g - giou(b, a)).abs() < 1e-15);
        }
        let flat = Corners::new(0.0, 0.0, 1.0, 0.0);
        let g = giou(flat, Corners::new(0.0, 0.0, 1.0, 1.0));
        assert!(g.is_finite());
    }

    #[test]
    fn pixel_round_trip() {
        let c = Corners::new(10.0, 20.0, 110.0, 60.0);
        let b = c.normalized(200.0, 100.0);
        assert_eq!(b, BBox::new(0.3, 0.4, 0.5, 0.4));
        assert!(b.to_pixels(200.0, 100.0).max_abs_diff(c) < 1e-12);
    }
}
