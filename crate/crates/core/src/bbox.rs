//! Axis-aligned boxes and the Faster-RCNN offset parameterization.

use serde::{Deserialize, Serialize};

/// `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Box offsets `(tx, ty, tw, th)` relative to an anchor box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Bbox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Bbox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Bbox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_well_ordered(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    fn center(&self) -> (f64, f64) {
        (self.x1 + 0.5 * self.width(), self.y1 + 0.5 * self.height())
    }

    /// Offsets that move `self` (the anchor) onto `target`.
    pub fn encode(&self, target: &Bbox) -> BoxDelta {
        let (ax, ay) = self.center();
        let (gx, gy) = target.center();
        let (aw, ah) = (self.width(), self.height());
        BoxDelta {
            tx: (gx - ax) / aw,
            ty: (gy - ay) / ah,
            tw: libm::log(target.width() / aw),
            th: libm::log(target.height() / ah),
        }
    }

    /// Inverse of [`Bbox::encode`].
    pub fn decode(&self, delta: &BoxDelta) -> Bbox {
        let (ax, ay) = self.center();
        let (aw, ah) = (self.width(), self.height());
        let cx = delta.tx * aw + ax;
        let cy = delta.ty * ah + ay;
        let w = aw * libm::exp(delta.tw);
        let h = ah * libm::exp(delta.th);
        Bbox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

impl BoxDelta {
    pub fn from_slice(s: &[f64]) -> Self {
        BoxDelta {
            tx: s[0],
            ty: s[1],
            tw: s[2],
            th: s[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}
