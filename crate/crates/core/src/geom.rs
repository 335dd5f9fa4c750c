//! Box geometry shared by every other module.
//!
//! Boxes are center-format `(cx, cy, w, h)` in pixels with screen
//! coordinates: `y` grows downward, as in MOT pixel data.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Displacements below this magnitude (per component) have no direction.
pub const DIRECTION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

/// One frame of a trajectory: the box and its change since the previous frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateVector {
    pub bbox: BoundingBox,
    pub vel: Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Center plus the four corners of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet {
    pub c: Point,
    pub lt: Point,
    pub rt: Point,
    pub lb: Point,
    pub rb: Point,
}

/// Motion directions of the five anchors of a [`CornerSet`], in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleSet {
    pub theta_c: f64,
    pub theta_lt: f64,
    pub theta_rt: f64,
    pub theta_lb: f64,
    pub theta_rb: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl BoundingBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_tlwh(tlwh: [f64; 4]) -> Self {
        let [left, top, w, h] = tlwh;
        Self::new(left + w / 2.0, top + h / 2.0, w, h)
    }

    pub fn to_tlwh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Componentwise `self + v`, without clamping.
    pub fn shifted(&self, v: &Velocity) -> Self {
        Self::new(self.cx + v.dx, self.cy + v.dy, self.w + v.dw, self.h + v.dh)
    }

    /// Change from `prev` to `self`.
    pub fn velocity_from(&self, prev: &BoundingBox) -> Velocity {
        Velocity::new(self.cx - prev.cx, self.cy - prev.cy, self.w - prev.w, self.h - prev.h)
    }

    pub fn translated(&self, tx: f64, ty: f64) -> Self {
        Self::new(self.cx + tx, self.cy + ty, self.w, self.h)
    }

    /// Clamps width and height to be non-negative.
    pub fn clamped(mut self) -> Self {
        self.w = self.w.max(0.0);
        self.h = self.h.max(0.0);
        self
    }
}

impl Velocity {
    pub const ZERO: Velocity = Velocity::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl StateVector {
    pub fn to_array(&self) -> [f64; 8] {
        let b = self.bbox.to_array();
        let v = self.vel.to_array();
        [b[0], b[1], b[2], b[3], v[0], v[1], v[2], v[3]]
    }
}

impl CornerSet {
    pub fn points(&self) -> [Point; 5] {
        [self.c, self.lt, self.rt, self.lb, self.rb]
    }
}

impl AngleSet {
    pub fn to_array(&self) -> [f64; 5] {
        [self.theta_c, self.theta_lt, self.theta_rt, self.theta_lb, self.theta_rb]
    }
}

/// Intersection over union. Degenerate pairs (zero union) give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
    let iy = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn corners(b: &BoundingBox) -> CornerSet {
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    CornerSet {
        c: Point::new(b.cx, b.cy),
        lt: Point::new(b.cx - hw, b.cy - hh),
        rt: Point::new(b.cx + hw, b.cy - hh),
        lb: Point::new(b.cx - hw, b.cy + hh),
        rb: Point::new(b.cx + hw, b.cy + hh),
    }
}

/// Direction of the displacement `to - from` as a quadrant-aware angle.
pub fn motion_direction(to: Point, from: Point) -> f64 {
    direction_of(to.x - from.x, to.y - from.y)
}

/// `atan2(dy, dx)` with the degenerate rule: displacements with both
/// components under [`DIRECTION_EPS`] have direction 0.
pub fn direction_of(dx: f64, dy: f64) -> f64 {
    if dx.abs() < DIRECTION_EPS && dy.abs() < DIRECTION_EPS {
        return 0.0;
    }
    // atan2 returns -π for (-0.0, negative x); fold it onto π.
    let a = dy.atan2(dx);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Directions of all five anchors moving from `from` to `to`.
pub fn anchor_directions(to: &BoundingBox, from: &BoundingBox) -> AngleSet {
    let t = corners(to).points();
    let f = corners(from).points();
    let d = |i: usize| motion_direction(t[i], f[i]);
    AngleSet {
        theta_c: d(0),
        theta_lt: d(1),
        theta_rt: d(2),
        theta_lb: d(3),
        theta_rb: d(4),
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Smallest absolute difference of two angles on the circle, in `[0, π]`.
pub fn angular_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(10.0, 10.0, 2.0, 2.0)), 0.0);
        // intersection 2, union 6
        assert_abs_diff_eq!(
            iou(&a, &BoundingBox::new(1.0, 0.0, 2.0, 2.0)),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        let degenerate = BoundingBox::new(3.0, 3.0, 0.0, 0.0);
        assert_eq!(iou(&degenerate, &degenerate), 0.0);
    }

    #[test]
    fn corners_examples() {
        let c = corners(&BoundingBox::new(0.0, 0.0, 2.0, 2.0));
        assert_eq!(c.lt, Point::new(-1.0, -1.0));
        assert_eq!(c.rt, Point::new(1.0, -1.0));
        assert_eq!(c.lb, Point::new(-1.0, 1.0));
        assert_eq!(c.rb, Point::new(1.0, 1.0));
        assert_eq!(c.c, Point::new(0.0, 0.0));

        let c = corners(&BoundingBox::new(10.0, 20.0, 4.0, 6.0));
        assert_eq!(c.lt, Point::new(8.0, 17.0));
        assert_eq!(c.rt, Point::new(12.0, 17.0));
        assert_eq!(c.lb, Point::new(8.0, 23.0));
        assert_eq!(c.rb, Point::new(12.0, 23.0));

        let c = corners(&BoundingBox::new(5.0, 7.0, 0.0, 0.0));
        assert!(c.points().iter().all(|p| *p == Point::new(5.0, 7.0)));
    }

    #[test]
    fn direction_examples() {
        let o = Point::new(0.0, 0.0);
        assert_abs_diff_eq!(motion_direction(Point::new(1.0, 1.0), o), FRAC_PI_4);
        assert_abs_diff_eq!(motion_direction(Point::new(0.0, 1.0), o), FRAC_PI_2);
        assert_eq!(motion_direction(o, o), 0.0);
        assert_eq!(motion_direction(Point::new(-1.0, 0.0), o), PI);
        assert_eq!(motion_direction(Point::new(-1.0, -0.0), o), PI);
        assert_eq!(direction_of(5e-10, -5e-10), 0.0);
    }

    #[test]
    fn angular_diff_examples() {
        assert_eq!(angular_diff(1.3, 1.3), 0.0);
        assert_abs_diff_eq!(angular_diff(3.1, -3.1), 2.0 * PI - 6.2, epsilon = 1e-12);
        assert_abs_diff_eq!(angular_diff(FRAC_PI_2, 0.0), FRAC_PI_2);
        assert_abs_diff_eq!(angular_diff(PI, -PI), 0.0);
    }

    #[test]
    fn tlwh_examples() {
        assert_eq!(BoundingBox::new(0.0, 0.0, 2.0, 2.0).to_tlwh(), [-1.0, -1.0, 2.0, 2.0]);
        assert_eq!(BoundingBox::new(10.0, 20.0, 4.0, 6.0).to_tlwh(), [8.0, 17.0, 4.0, 6.0]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 0.0..200.0f64, 0.0..200.0f64)
            .prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.w > 1e-6 && a.h > 1e-6);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn angular_diff_range_and_periodicity(a in -10.0..10.0f64, b in -10.0..10.0f64, k in -5i32..5) {
            let d = angular_diff(a, b);
            prop_assert!((0.0..=PI).contains(&d));
            prop_assert!(angular_diff(a, a + 2.0 * PI * k as f64) < 1e-9);
        }

        #[test]
        fn direction_translation_invariant(
            px in -100.0..100.0f64, py in -100.0..100.0f64,
            qx in -100.0..100.0f64, qy in -100.0..100.0f64,
            tx in -100.0..100.0f64, ty in -100.0..100.0f64,
        ) {
            prop_assume!((px - qx).abs() + (py - qy).abs() > 1e-3);
            let a = motion_direction(Point::new(px, py), Point::new(qx, qy));
            let b = motion_direction(Point::new(px + tx, py + ty), Point::new(qx + tx, qy + ty));
            prop_assert!(angular_diff(a, b) < 1e-9);
        }

        #[test]
        fn corner_mean_is_center(b in arb_box()) {
            let c = corners(&b);
            let mx = (c.lt.x + c.rt.x + c.lb.x + c.rb.x) / 4.0;
            let my = (c.lt.y + c.rt.y + c.lb.y + c.rb.y) / 4.0;
            prop_assert!((mx - b.cx).abs() < 1e-12);
            prop_assert!((my - b.cy).abs() < 1e-12);
            prop_assert!(c.lt.x <= c.rt.x && c.lt.y <= c.lb.y);
        }

        #[test]
        fn tlwh_round_trip(b in arb_box()) {
            let r = BoundingBox::from_tlwh(b.to_tlwh());
            prop_assert!((r.cx - b.cx).abs() < 1e-12 && (r.cy - b.cy).abs() < 1e-12);
            prop_assert_eq!(r.w, b.w);
            prop_assert_eq!(r.h, b.h);
        }
    }
}
