//! Brute-force oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use occgen_core::ors::RayBundle;
use occgen_core::rng::{self, Prng};
use occgen_core::scene::{
    CameraModel, CategoryTables, OccupancyGrid, LANE_MARKING, PEDESTRIAN, ROAD, VEHICLE,
};
use rand::Rng;

/// Random grid with roughly `fill` of the cells occupied by any known code.
pub fn random_grid(rng: &mut Prng, dims: [usize; 3], voxel: f64, fill: f64) -> OccupancyGrid {
    let mut g = OccupancyGrid::new(dims, [0.0, 0.0, 0.0], voxel).unwrap();
    let codes = [VEHICLE, PEDESTRIAN, ROAD, LANE_MARKING];
    for c in g.cells.iter_mut() {
        if rng.random::<f64>() < fill {
            *c = codes[rng.random_range(0..codes.len())];
        }
    }
    g
}

/// A camera behind and above a small grid, looking into it.
pub fn small_grid_camera(size: [usize; 2]) -> CameraModel {
    CameraModel::forward_looking(
        size[0] as f64 * 0.6,
        size,
        [-0.6, 0.8, 0.6],
        [0.0, 0.0, 0.3],
        30f64.to_radians(),
    )
}

/// Containment by linear scan over every voxel: `lo ≤ p < lo + size` on
/// all three axes.
pub fn containing_voxel(grid: &OccupancyGrid, p: [f64; 3]) -> Option<[usize; 3]> {
    let [h, w, d] = grid.dims;
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let idx = [i, j, k];
                let inside = (0..3).all(|a| {
                    let lo = grid.voxel_lo(a, idx[a]);
                    let hi = grid.voxel_lo(a, idx[a] + 1);
                    p[a] >= lo && p[a] < hi
                });
                if inside {
                    return Some(idx);
                }
            }
        }
    }
    None
}

/// ORS values by exhaustive containment.
pub fn ors_oracle(grid: &OccupancyGrid, rays: &RayBundle, tables: &CategoryTables) -> Vec<f64> {
    let max = tables.max_code() as f64;
    let mut out = Vec::new();
    for u in 0..rays.size[0] {
        for v in 0..rays.size[1] {
            for i in 0..rays.n_sample {
                out.push(match containing_voxel(grid, rays.point(u, v, i)) {
                    Some([x, y, z]) => grid.get(x, y, z) as f64 / max,
                    None => 0.0,
                });
            }
        }
    }
    out
}

/// First hit per pixel: for every occupied voxel, the smallest half-voxel
/// march index whose sample lies inside it; the voxel with the smallest
/// index (distance) wins. Returns `(voxel, distance)` per pixel.
pub fn first_hit_oracle(grid: &OccupancyGrid, cam: &CameraModel) -> Vec<Option<([usize; 3], f64)>> {
    let step = grid.voxel_size / 2.0;
    let rays = occgen_core::ors::cast_rays(cam, step, 1).unwrap();
    let (lo, hi) = grid.bounds();
    let c = rays.origin;
    // every grid point is within this many steps of the camera
    let reach = (0..8)
        .map(|m| {
            (0..3)
                .map(|a| {
                    let corner = if m >> a & 1 == 1 { hi[a] } else { lo[a] };
                    (corner - c[a]).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    let n = (reach / step).ceil() as usize + 2;
    let [h, w, d] = grid.dims;
    let mut out = Vec::new();
    for u in 0..cam.image_size[0] {
        for v in 0..cam.image_size[1] {
            let samples: Vec<Option<[usize; 3]>> =
                (0..n).map(|i| containing_voxel(grid, ray_point(&rays, u, v, step, i))).collect();
            let mut candidates = Vec::new();
            for x in 0..h {
                for y in 0..w {
                    for z in 0..d {
                        if grid.get(x, y, z) == 0 {
                            continue;
                        }
                        if let Some(i) = samples.iter().position(|s| *s == Some([x, y, z])) {
                            candidates.push((i, [x, y, z]));
                        }
                    }
                }
            }
            candidates.sort();
            out.push(candidates.first().map(|&(i, vox)| (vox, step * i as f64)));
        }
    }
    out
}

fn ray_point(rays: &RayBundle, u: usize, v: usize, step: f64, i: usize) -> [f64; 3] {
    let d = rays.direction(u, v);
    let s = step * i as f64;
    std::array::from_fn(|a| rays.origin[a] + d[a] * s)
}

pub fn seeded(seed: u64) -> Prng {
    rng::prng(seed)
}

use occgen_core::config::Config;
use occgen_core::dataset::{prepare_clip, PreparedClip};
use occgen_core::diffusion::Model;
use occgen_core::scene::generate_synthetic_scene;
use occgen_core::tensor::Tensor;

/// A model small enough to finite-difference: 8×8 frames, two frames,
/// `d = 8`, a 2×2 token grid.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.scene.image_size = [8, 8];
    c.scene.focal = 3.5;
    c.scene.frames = 2;
    c.scene.boxes = 1;
    c.ors.n_sample = 6;
    c.ors.step = 0.6;
    c.model.d = 8;
    c.model.d_cat = 4;
    c.model.fourier_frequencies = 2;
    c.model.ors_channels = 2;
    c.model.deform_points = 2;
    c.diffusion.steps = 10;
    c.diffusion.sample_steps = 2;
    c.reward.sample_steps = 1;
    c.reward.rank = 2;
    c.validate().unwrap();
    c
}

pub fn tiny_clip(cfg: &Config, seed: u64) -> PreparedClip {
    prepare_clip(generate_synthetic_scene(seed, &cfg.scene).unwrap(), cfg).unwrap()
}

/// Replaces zero-initialized layers (injections, adapter `B`, gates) by
/// small random values so that every parameter influences the output.
pub fn activate(model: &mut Model, seed: u64) {
    let mut r = seeded(seed);
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(n, t)| {
            n.contains(".zero_") || n.ends_with(".gamma") || (n.starts_with("adapters.") && n.ends_with(".b"))
                || t.data().iter().all(|&v| v == 0.0)
        })
        .map(|(n, _)| n.clone())
        .collect();
    for n in names {
        let t = model.params.get_mut(&n).unwrap();
        *t = Tensor::from_fn(t.shape().to_vec(), |_| 0.3 * rng::normal(&mut r));
    }
}

/// First tiny clip (from `seed` upward) whose foreground rays hit something.
pub fn tiny_clip_with_foreground(cfg: &Config, seed: u64) -> PreparedClip {
    (seed..seed + 100)
        .map(|s| tiny_clip(cfg, s))
        .find(|c| c.ors_fg.data().iter().filter(|&&v| v > 0.0).count() > 8 && c.mask.data().iter().any(|&w| w > 1.0))
        .expect("some scene shows foreground")
}

/// `init_sfa` on a fresh store with a tiny model config.
pub fn sfa_store(d: usize, gamma: f64, seed: u64) -> (occgen_core::nn::ParamStore, occgen_core::config::ModelConfig) {
    let mut m = tiny_config().model;
    m.d = d;
    m.gamma_init = gamma;
    let mut store = occgen_core::nn::ParamStore::new();
    occgen_core::sfa::init_sfa(&mut store, &mut seeded(seed), "s", &m, 6);
    (store, m)
}

/// Row-major `[n, k] · [k, m]` by triple loop.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
        }
    }
    out
}

/// Single-head attention of `q [n, d]` over `c [m, d]` with the store's
/// `prefix.{q,k,v,o}`, by explicit loops.
pub fn attention_oracle(store: &occgen_core::nn::ParamStore, prefix: &str, q: &[f64], c: &[f64], d: usize) -> Vec<f64> {
    let w = |s: &str| store.get(&format!("{prefix}.{s}")).unwrap().data().to_vec();
    let (n, m) = (q.len() / d, c.len() / d);
    let qp = matmul(q, &w("q"), n, d, d);
    let kp = matmul(c, &w("k"), m, d, d);
    let vp = matmul(c, &w("v"), m, d, d);
    let mut mixed = vec![0.0; n * d];
    for i in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|l| qp[i * d + l] * kp[j * d + l]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..m {
            for l in 0..d {
                mixed[i * d + l] += e[j] / z * vp[j * d + l];
            }
        }
    }
    matmul(&mixed, &w("o"), n, d, d)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
