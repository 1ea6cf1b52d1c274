//! Axis-aligned boxes in `[x, y, w, h]` pixel form and the overlap/distance
//! primitives used by rewards and metrics.
//!
//! Intervals are half-open: a box covers `[x, x + w) × [y, y + h)`, so two boxes
//! that only touch along an edge do not overlap.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error(
        "invalid box [{x}, {y}, {w}, {h}]: coordinates must be finite and extents non-negative"
    )]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("ground-truth box has degenerate extent ({w} x {h})")]
    DegenerateGroundTruth { w: f64, h: f64 },
}

/// Left/top corner plus width and height, in pixels.
///
/// Fields are public so that tracker outputs can carry arbitrary values;
/// every operation validates its inputs before use.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl fmt::Display for BoundingBox {
    /// Writes the `x,y,w,h` annotation line form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl BoundingBox {
    /// Builds a validated box.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Zero-area placeholder used for frames where the target is absent.
    pub const fn placeholder() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite =
            self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        if finite && self.w >= 0.0 && self.h >= 0.0 {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
            })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn has_positive_area(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU without validation. Callers must guarantee both boxes are valid.
pub(crate) fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    // Areas from the same rounded extents as the intersection, so a box
    // compared with itself scores exactly 1.
    let extent_area = |r: &BoundingBox| (r.right() - r.x) * (r.bottom() - r.y);
    let inter = a.intersection_area(b);
    let union = extent_area(a) + extent_area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers, in pixels.
pub fn center_distance(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Ok((ax - bx).hypot(ay - by))
}

/// Center offset with the x component scaled by `gt.w` and y by `gt.h`.
pub fn normalized_center_distance(
    pred: &BoundingBox,
    gt: &BoundingBox,
) -> Result<f64, GeometryError> {
    pred.validate()?;
    gt.validate()?;
    if !gt.has_positive_area() {
        return Err(GeometryError::DegenerateGroundTruth { w: gt.w, h: gt.h });
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    /// Counts unit cells covered by integer boxes.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let covers = |r: &BoundingBox, cx: i64, cy: i64| {
            (cx as f64) >= r.x
                && (cx as f64) < r.right()
                && (cy as f64) >= r.y
                && (cy as f64) < r.bottom()
        };
        let (x0, y0) = (a.x.min(b.x) as i64, a.y.min(b.y) as i64);
        let (x1, y1) = (
            a.right().max(b.right()) as i64,
            a.bottom().max(b.bottom()) as i64,
        );
        let (mut inter, mut union) = (0u64, 0u64);
        for cy in y0..y1 {
            for cx in x0..x1 {
                let (ia, ib) = (covers(a, cx, cy), covers(b, cx, cy));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(
            iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)).unwrap(),
            1.0
        );
        assert_eq!(
            iou(&bx(0., 0., 10., 10.), &bx(20., 20., 5., 5.)).unwrap(),
            0.0
        );
        let a = bx(0., 0., 10., 10.);
        let b = bx(5., 0., 10., 10.);
        // raster oracle: 50 shared cells, 150 in the union
        assert_abs_diff_eq!(raster_iou(&a, &b), 50.0 / 150.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_boxes_give_zero() {
        let p = BoundingBox::placeholder();
        assert_eq!(iou(&p, &p).unwrap(), 0.0);
        assert_eq!(iou(&p, &bx(0., 0., 10., 10.)).unwrap(), 0.0);
    }

    #[test]
    fn edge_touching_boxes_do_not_overlap() {
        assert_eq!(
            iou(&bx(0., 0., 10., 10.), &bx(10., 0., 10., 10.)).unwrap(),
            0.0
        );
    }

    #[test]
    fn rejects_invalid_input() {
        let bad = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: -1.0,
            h: 3.0,
        };
        assert!(matches!(
            iou(&bad, &bx(0., 0., 1., 1.)),
            Err(GeometryError::InvalidBox { .. })
        ));
        let nan = BoundingBox {
            x: f64::NAN,
            ..bx(0., 0., 1., 1.)
        };
        assert!(center_distance(&nan, &bx(0., 0., 1., 1.)).is_err());
        assert!(BoundingBox::new(0.0, f64::INFINITY, 1.0, 1.0).is_err());
    }

    #[test]
    fn center_distance_examples() {
        let a = bx(0., 0., 10., 10.);
        assert_eq!(center_distance(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(center_distance(&a, &bx(30., 0., 10., 10.)).unwrap(), 30.0);
        assert_abs_diff_eq!(
            center_distance(&a, &bx(3., 4., 10., 10.)).unwrap(),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn normalized_center_distance_examples() {
        let gt = bx(0., 0., 10., 10.);
        assert_eq!(normalized_center_distance(&gt, &gt).unwrap(), 0.0);
        assert_abs_diff_eq!(
            normalized_center_distance(&bx(10., 0., 10., 10.), &gt).unwrap(),
            1.0
        );
        // centers (10, 10) and (5, 10): offset (5, 0) scaled by (10, 20)
        let d = normalized_center_distance(&bx(5., 5., 10., 10.), &bx(0., 0., 10., 20.)).unwrap();
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-12);
        let d = normalized_center_distance(&bx(5., 5., 10., 10.), &bx(0., 0., 10., 10.)).unwrap();
        assert_abs_diff_eq!(d, 0.5f64.hypot(0.5), epsilon = 1e-12);
    }

    #[test]
    fn normalized_distance_rejects_degenerate_gt() {
        let err = normalized_center_distance(&bx(0., 0., 1., 1.), &bx(0., 0., 0., 5.)).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateGroundTruth { .. }));
    }

    #[test]
    fn serde_uses_array_form() {
        let b = bx(1.5, 2., 3., 4.);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.5,2.0,3.0,4.0]");
        assert_eq!(
            serde_json::from_str::<BoundingBox>("[1.5,2,3,4]").unwrap(),
            b
        );
        assert_eq!(b.to_string(), "1.5,2,3,4");
    }

    fn int_box() -> impl Strategy<Value = BoundingBox> {
        (-32i32..64, -32i32..64, 0i32..=64, 0i32..=64).prop_map(|(x, y, w, h)| BoundingBox {
            x: x as f64,
            y: y as f64,
            w: w as f64,
            h: h as f64,
        })
    }

    fn real_box() -> impl Strategy<Value = BoundingBox> {
        (-1e3f64..1e3, -1e3f64..1e3, 0f64..500.0, 0f64..500.0)
            .prop_map(|(x, y, w, h)| BoundingBox { x, y, w, h })
    }

    proptest! {
        #[test]
        fn self_iou_is_one(x in -1e4f64..1e4, y in -1e4f64..1e4, w in 1e-3f64..1e3, h in 1e-3f64..1e3) {
            let b = BoundingBox { x, y, w, h };
            prop_assert_eq!(iou(&b, &b).unwrap(), 1.0);
        }

        #[test]
        fn iou_matches_raster_count(a in int_box(), b in int_box()) {
            prop_assert!((iou(&a, &b).unwrap() - raster_iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn symmetric_and_bounded(a in real_box(), b in real_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(center_distance(&a, &b).unwrap(), center_distance(&b, &a).unwrap());
        }

        #[test]
        fn translation_invariant(a in int_box(), b in int_box(), dx in -100i32..100, dy in -100i32..100) {
            let (ta, tb) = (a.translated(dx as f64, dy as f64), b.translated(dx as f64, dy as f64));
            prop_assert!((iou(&a, &b).unwrap() - iou(&ta, &tb).unwrap()).abs() < 1e-12);
            prop_assert!((center_distance(&a, &b).unwrap() - center_distance(&ta, &tb).unwrap()).abs() < 1e-9);
        }
    }
}
