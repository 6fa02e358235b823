//! Ray intersections against the shapes the scene renderer supports.
//!
//! Rays carry a unit direction, so every returned parameter is a metric
//! distance along the ray. Hits behind or within `RAY_EPS` of the origin are
//! discarded.

use nalgebra::{Point3, Vector3};

const RAY_EPS: f64 = 1e-9;

/// Renderable solid, fully positioned in world coordinates.
#[derive(Debug, Clone, Copy)]
pub enum Prim {
    Aabb {
        min: Point3<f64>,
        max: Point3<f64>,
    },
    /// Infinite plane normal to one coordinate axis (0 = x, 1 = y, 2 = z).
    AxisPlane {
        axis: usize,
        offset: f64,
    },
    Sphere {
        center: Point3<f64>,
        radius: f64,
    },
    /// Capped cylinder with a vertical axis; `base` is the bottom center.
    Cylinder {
        base: Point3<f64>,
        radius: f64,
        height: f64,
    },
    Ellipsoid {
        center: Point3<f64>,
        radii: Vector3<f64>,
    },
}

impl Prim {
    pub fn hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Prim::Aabb { min, max } => ray_aabb(origin, dir, &min, &max),
            Prim::AxisPlane { axis, offset } => ray_axis_plane(origin, dir, axis, offset),
            Prim::Sphere { center, radius } => ray_sphere(origin, dir, &center, radius),
            Prim::Cylinder {
                base,
                radius,
                height,
            } => ray_vertical_cylinder(origin, dir, &base, radius, height),
            Prim::Ellipsoid { center, radii } => ray_ellipsoid(origin, dir, &center, &radii),
        }
    }
}

pub fn ray_axis_plane(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    axis: usize,
    offset: f64,
) -> Option<f64> {
    let d = dir[axis];
    if d.abs() < 1e-12 {
        return None;
    }
    let t = (offset - origin[axis]) / d;
    (t > RAY_EPS).then_some(t)
}

/// Slab test. A ray starting inside the box hits the inner surface.
pub fn ray_aabb(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    min: &Point3<f64>,
    max: &Point3<f64>,
) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return None;
            }
        } else {
            let t1 = (min[a] - origin[a]) / dir[a];
            let t2 = (max[a] - origin[a]) / dir[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            t_near = t_near.max(lo);
            t_far = t_far.min(hi);
            if t_near > t_far {
                return None;
            }
        }
    }
    if t_far < RAY_EPS {
        return None;
    }
    Some(if t_near > RAY_EPS { t_near } else { t_far })
}

pub fn ray_sphere(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    center: &Point3<f64>,
    radius: f64,
) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = -b - sq;
    if t > RAY_EPS {
        return Some(t);
    }
    let t = -b + sq;
    (t > RAY_EPS).then_some(t)
}

pub fn ray_ellipsoid(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    center: &Point3<f64>,
    radii: &Vector3<f64>,
) -> Option<f64> {
    // Scaling both origin and direction by 1/radii maps the ellipsoid to the
    // unit sphere while preserving the ray parameter.
    let o = Vector3::new(
        (origin.x - center.x) / radii.x,
        (origin.y - center.y) / radii.y,
        (origin.z - center.z) / radii.z,
    );
    let d = Vector3::new(dir.x / radii.x, dir.y / radii.y, dir.z / radii.z);
    let a = d.norm_squared();
    if a < 1e-24 {
        return None;
    }
    let b = o.dot(&d);
    let c = o.norm_squared() - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = (-b - sq) / a;
    if t > RAY_EPS {
        return Some(t);
    }
    let t = (-b + sq) / a;
    (t > RAY_EPS).then_some(t)
}

pub fn ray_vertical_cylinder(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    base: &Point3<f64>,
    radius: f64,
    height: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > RAY_EPS && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };

    let ox = origin.x - base.x;
    let oy = origin.y - base.y;
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-24 {
        let b = ox * dir.x + oy * dir.y;
        let c = ox * ox + oy * oy - radius * radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let z = origin.z + t * dir.z;
                if z >= base.z && z <= base.z + height {
                    consider(t);
                }
            }
        }
    }
    if dir.z.abs() > 1e-12 {
        for cap_z in [base.z, base.z + height] {
            let t = (cap_z - origin.z) / dir.z;
            let x = ox + t * dir.x;
            let y = oy + t * dir.y;
            if x * x + y * y <= radius * radius {
                consider(t);
            }
        }
    }
    best
}
