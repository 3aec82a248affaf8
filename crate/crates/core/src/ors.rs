//! Occupancy ray-shape sampling: per-pixel camera rays, fixed-spacing sample
//! points, nearest-voxel category lookup, and the foreground-aware loss mask.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{BoxSet, CameraModel, CategoryTables, OccupancyGrid};
use crate::tensor::Tensor;

/// Unit ray per pixel from a shared origin with `n_sample` points spaced `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub size: [usize; 2],
    pub origin: [f64; 3],
    pub step: f64,
    pub n_sample: usize,
    dirs: Vec<[f64; 3]>,
}

impl RayBundle {
    pub fn direction(&self, u: usize, v: usize) -> [f64; 3] {
        self.dirs[u * self.size[1] + v]
    }

    /// Sample point `i` on the ray of pixel `(u, v)`.
    pub fn point(&self, u: usize, v: usize, i: usize) -> [f64; 3] {
        let d = self.direction(u, v);
        let s = self.step * i as f64;
        std::array::from_fn(|a| self.origin[a] + d[a] * s)
    }
}

pub fn cast_rays(cam: &CameraModel, step: f64, n_sample: usize) -> Result<RayBundle> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("rays", format!("step {step} must be > 0")));
    }
    if n_sample == 0 {
        return Err(Error::invalid("rays", "n_sample must be ≥ 1"));
    }
    let back = cam.r_matrix() * cam.k_inverse()?;
    let [nu, nv] = cam.image_size;
    let mut dirs = Vec::with_capacity(nu * nv);
    for u in 0..nu {
        for v in 0..nv {
            let d = (back * Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0)).normalize();
            dirs.push([d.x, d.y, d.z]);
        }
    }
    Ok(RayBundle {
        size: cam.image_size,
        origin: cam.center(),
        step,
        n_sample,
        dirs,
    })
}

/// Number of samples needed to span the grid diagonal, capped at `cap`.
pub fn sample_budget(grid: &OccupancyGrid, step: f64, cap: usize) -> usize {
    let diag = grid
        .dims
        .iter()
        .map(|&d| (d as f64 * grid.voxel_size).powi(2))
        .sum::<f64>()
        .sqrt();
    ((diag / step).ceil() as usize).clamp(1, cap.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Foreground,
    Background,
}

/// `U×V×N_sample` normalized category codes along each pixel ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayFeatureMap {
    pub values: Tensor,
    pub source: FeatureSource,
}

pub fn ors_project(
    grid: &OccupancyGrid,
    rays: &RayBundle,
    tables: &CategoryTables,
    source: FeatureSource,
) -> RayFeatureMap {
    let scale = 1.0 / tables.max_code() as f64;
    let [nu, nv] = rays.size;
    let n = rays.n_sample;
    let mut data = vec![0.0; nu * nv * n];
    for u in 0..nu {
        for v in 0..nv {
            let row = &mut data[(u * nv + v) * n..(u * nv + v + 1) * n];
            for (i, out) in row.iter_mut().enumerate() {
                if let Some([x, y, z]) = grid.voxel_of(rays.point(u, v, i)) {
                    *out = grid.get(x, y, z) as f64 * scale;
                }
            }
        }
    }
    RayFeatureMap {
        values: Tensor::new(vec![nu, nv, n], data).expect("feature volume shape"),
        source,
    }
}

/// Per-pixel loss weights at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub weights: Tensor,
    pub lambda_fg: f64,
}

impl ForegroundMask {
    pub fn uniform(size: [usize; 2]) -> Self {
        Self {
            weights: Tensor::ones(vec![size[0], size[1]]),
            lambda_fg: 0.0,
        }
    }

    /// Pixels with weight above 1 (the projected foreground).
    pub fn foreground(&self) -> Vec<bool> {
        self.weights.data().iter().map(|&w| w > 1.0).collect()
    }
}

type Point2 = [f64; 2];

const NEAR: f64 = 1e-6;

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain) without collinear points.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Inclusive containment test against a counter-clockwise convex polygon.
pub fn point_in_hull(p: Point2, hull: &[Point2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= -1e-12)
}

/// Image-plane footprint of a box after near-plane clipping, in latent pixel
/// units. Empty when the box lies entirely behind the camera.
pub fn project_box_footprint(corners: &[[f64; 3]; 8], cam: &CameraModel, latent: [usize; 2]) -> Vec<Point2> {
    let rt = cam.r_matrix().transpose();
    let k = cam.k_matrix();
    let c = Vector3::from(cam.center());
    let cam_pts: Vec<Vector3<f64>> = corners.iter().map(|p| rt * (Vector3::from(*p) - c)).collect();
    let sx = latent[0] as f64 / cam.image_size[0] as f64;
    let sy = latent[1] as f64 / cam.image_size[1] as f64;
    let project = |x: Vector3<f64>| -> Point2 {
        let p = k * x;
        [p.x / p.z * sx, p.y / p.z * sy]
    };
    let mut pts = Vec::new();
    for (i, x) in cam_pts.iter().enumerate() {
        if x.z > NEAR {
            pts.push(project(*x));
        }
        for bit in [1, 2, 4] {
            let j = i ^ bit;
            if j < i {
                continue;
            }
            let y = cam_pts[j];
            if (x.z > NEAR) != (y.z > NEAR) {
                let t = (NEAR - x.z) / (y.z - x.z);
                pts.push(project(x + (y - x) * t));
            }
        }
    }
    pts
}

/// Foreground-aware weights: `1 + λ − λ·a/(U'V')` on pixels covered by a box
/// footprint of `a` pixels (the smallest covering footprint wins), 1 elsewhere.
pub fn rasterize_fgm_mask(
    boxes: &BoxSet,
    cam: &CameraModel,
    latent: [usize; 2],
    lambda_fg: f64,
) -> Result<ForegroundMask> {
    if !(lambda_fg >= 0.0 && lambda_fg.is_finite()) {
        return Err(Error::invalid("foreground mask", format!("λ_fg = {lambda_fg} must be ≥ 0")));
    }
    let [nu, nv] = latent;
    let total = (nu * nv) as f64;
    let mut best_area = vec![usize::MAX; nu * nv];
    for b in &boxes.entries {
        let hull = convex_hull(&project_box_footprint(&b.corners, cam, latent));
        if hull.len() < 3 {
            continue;
        }
        let covered: Vec<usize> = (0..nu * nv)
            .filter(|&ix| point_in_hull([(ix / nv) as f64 + 0.5, (ix % nv) as f64 + 0.5], &hull))
            .collect();
        let area = covered.len();
        for ix in covered {
            best_area[ix] = best_area[ix].min(area);
        }
    }
    let weights = best_area
        .iter()
        .map(|&a| {
            if a == usize::MAX {
                1.0
            } else {
                1.0 + lambda_fg - lambda_fg * a as f64 / total
            }
        })
        .collect();
    Ok(ForegroundMask {
        weights: Tensor::new(vec![nu, nv], weights)?,
        lambda_fg,
    })
}
