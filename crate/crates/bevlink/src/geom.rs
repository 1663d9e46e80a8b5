//! Minimal 3-D geometry: points, poses, and extruded oriented boxes.
//!
//! Boxes are rectangles in the ground plane (center, half extents, yaw)
//! extruded over a z interval. Buildings rise from z = 0 to their height;
//! vehicle boxes do the same. All intersection tests run in the box's local
//! frame via the slab method, which keeps them exact up to rounding.

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self.scale(1.0 / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, o: Vec3, t: f64) -> Vec3 {
        self.add(o.sub(self).scale(t))
    }
}

/// Normalize an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Planar position + height + heading. Yaw is normalized to (-pi, pi].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose {
            x,
            y,
            z,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn point(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Same position at a different height.
    pub fn at_height(&self, z: f64) -> Vec3 {
        Vec3::new(self.x, self.y, z)
    }

    /// Heading from this pose's position to a target point, in world frame.
    pub fn bearing_to(&self, tx: f64, ty: f64) -> f64 {
        (ty - self.y).atan2(tx - self.x)
    }

    /// Map a point from this pose's local frame (x forward) to world.
    pub fn local_to_world(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(
            self.x + c * p.x - s * p.y,
            self.y + s * p.x + c * p.y,
            p.z,
        )
    }

    /// Map a world point into this pose's local frame.
    pub fn world_to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Vec3::new(c * dx + s * dy, -s * dx + c * dy, p.z)
    }
}

/// Yaw-oriented rectangle footprint extruded over [z_min, z_max].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub yaw: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl OrientedBox {
    fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        Vec3::new(c * dx + s * dy, -s * dx + c * dy, p.z)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half_x && l.y.abs() <= self.half_y && p.z >= self.z_min && p.z <= self.z_max
    }

    /// Footprint-only test, ignoring z.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let l = self.to_local(Vec3::new(x, y, 0.0));
        l.x.abs() <= self.half_x && l.y.abs() <= self.half_y
    }

    /// Footprint corners in world coordinates, counter-clockwise.
    pub fn footprint_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [(0.0, 0.0); 4];
        for (i, (sx, sy)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .iter()
            .enumerate()
        {
            let lx = sx * self.half_x;
            let ly = sy * self.half_y;
            out[i] = (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly);
        }
        out
    }

    /// Parametric overlap of segment a→b with the box, as a t interval in
    /// [0, 1]. Returns `None` when the segment misses the box entirely.
    pub fn segment_interval(&self, a: Vec3, b: Vec3) -> Option<(f64, f64)> {
        let la = self.to_local(a);
        let lb = self.to_local(b);
        let d = lb.sub(la);
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        let axes = [
            (la.x, d.x, -self.half_x, self.half_x),
            (la.y, d.y, -self.half_y, self.half_y),
            (la.z, d.z, self.z_min, self.z_max),
        ];
        for (o, dd, lo, hi) in axes {
            if dd.abs() < 1e-15 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let mut ta = (lo - o) / dd;
                let mut tb = (hi - o) / dd;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }

    /// Entry distance of a ray (origin, unit direction) into the box, if it
    /// hits within `max_t`. An origin inside the box reports t = 0.
    pub fn ray_entry(&self, origin: Vec3, dir: Vec3, max_t: f64) -> Option<f64> {
        let far = origin.add(dir.scale(max_t));
        let (t0, t1) = self.segment_interval(origin, far)?;
        if t1 < 0.0 {
            return None;
        }
        Some(t0.max(0.0) * max_t)
    }
}

/// True when the open segment (a, b) passes through the box, using a small
/// relative margin so endpoint contact (e.g. a reflection point lying on the
/// reflecting wall) does not count as occlusion.
pub fn segment_blocked(bx: &OrientedBox, a: Vec3, b: Vec3, eps: f64) -> bool {
    match bx.segment_interval(a, b) {
        Some((t0, t1)) => t0 < 1.0 - eps && t1 > eps,
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_box() -> OrientedBox {
        OrientedBox {
            cx: 0.0,
            cy: 0.0,
            half_x: 1.0,
            half_y: 1.0,
            yaw: 0.0,
            z_min: 0.0,
            z_max: 2.0,
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(0.5), 0.5);
        for k in -10..10 {
            let a = wrap_angle(0.3 + k as f64 * 2.0 * PI);
            assert_relative_eq!(a, 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn local_world_round_trip() {
        let p = Pose::new(3.0, -2.0, 0.0, 1.1);
        let v = Vec3::new(5.0, 7.0, 1.5);
        let w = p.local_to_world(v);
        let back = p.world_to_local(w);
        assert_relative_eq!(back.x, v.x, epsilon = 1e-12);
        assert_relative_eq!(back.y, v.y, epsilon = 1e-12);
        assert_relative_eq!(back.z, v.z, epsilon = 1e-12);
    }

    #[test]
    fn segment_through_box() {
        let b = unit_box();
        let (t0, t1) = b
            .segment_interval(Vec3::new(-3.0, 0.0, 1.0), Vec3::new(3.0, 0.0, 1.0))
            .unwrap();
        assert_relative_eq!(t0, 2.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(t1, 4.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_over_box_clears() {
        let b = unit_box();
        assert!(b
            .segment_interval(Vec3::new(-3.0, 0.0, 2.5), Vec3::new(3.0, 0.0, 2.5))
            .is_none());
    }

    #[test]
    fn rotated_box_containment() {
        let b = OrientedBox {
            cx: 0.0,
            cy: 0.0,
            half_x: 2.0,
            half_y: 0.5,
            yaw: PI / 4.0,
            z_min: 0.0,
            z_max: 1.0,
        };
        // Along the rotated long axis.
        let along = Vec3::new(1.2 * (PI / 4.0).cos(), 1.2 * (PI / 4.0).sin(), 0.5);
        assert!(b.contains(along));
        // Same distance along the world x axis falls outside the thin side.
        assert!(!b.contains(Vec3::new(1.2, 0.0, 0.5)));
    }

    #[test]
    fn ray_entry_distance() {
        let b = unit_box();
        let t = b
            .ray_entry(Vec3::new(-5.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), 100.0)
            .unwrap();
        assert_relative_eq!(t, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn endpoint_contact_is_not_blocking() {
        let b = unit_box();
        // Segment ends exactly on the box face.
        let a = Vec3::new(-5.0, 0.0, 1.0);
        let end = Vec3::new(-1.0, 0.0, 1.0);
        assert!(!segment_blocked(&b, a, end, 1e-9));
        // Pushing through the face does block.
        let inside = Vec3::new(-0.5, 0.0, 1.0);
        assert!(segment_blocked(&b, a, inside, 1e-9));
    }
}
