//! The toy driving world: categorical occupancy, boxes, map polylines,
//! captions and a pinhole camera, plus the deterministic first-hit renderer
//! that produces ground-truth frames.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ors;
use crate::rng;
use crate::tensor::Tensor;

pub const VEHICLE: u8 = 1;
pub const PEDESTRIAN: u8 = 2;
pub const ROAD: u8 = 8;
pub const LANE_MARKING: u8 = 9;

pub const CAPTION_TIMES: [&str; 3] = ["day", "dusk", "night"];
pub const CAPTION_WEATHER: [&str; 4] = ["sunny", "cloudy", "rainy", "foggy"];

/// Every caption token the generator can emit, in table order.
pub fn caption_vocabulary() -> Vec<String> {
    CAPTION_TIMES
        .iter()
        .chain(CAPTION_WEATHER.iter())
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub code: u8,
    pub name: String,
    pub color: [f64; 3],
}

/// Foreground (box) and background (map) category tables with render colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTables {
    pub foreground: Vec<Category>,
    pub background: Vec<Category>,
}

impl Default for CategoryTables {
    fn default() -> Self {
        let cat = |code, name: &str, color| Category {
            code,
            name: name.to_string(),
            color,
        };
        // channel 0 is high only for foreground classes
        Self {
            foreground: vec![
                cat(VEHICLE, "vehicle", [0.9, 0.15, 0.1]),
                cat(PEDESTRIAN, "pedestrian", [0.95, 0.25, 0.7]),
            ],
            background: vec![
                cat(ROAD, "road", [0.2, 0.3, 0.35]),
                cat(LANE_MARKING, "lane-marking", [0.1, 0.85, 0.8]),
            ],
        }
    }
}

impl CategoryTables {
    pub fn is_foreground(&self, code: u8) -> bool {
        self.foreground.iter().any(|c| c.code == code)
    }

    pub fn is_background(&self, code: u8) -> bool {
        self.background.iter().any(|c| c.code == code)
    }

    pub fn color(&self, code: u8) -> Option<[f64; 3]> {
        self.foreground
            .iter()
            .chain(&self.background)
            .find(|c| c.code == code)
            .map(|c| c.color)
    }

    pub fn max_code(&self) -> u8 {
        self.foreground
            .iter()
            .chain(&self.background)
            .map(|c| c.code)
            .max()
            .unwrap_or(1)
    }

    /// Codes of every category, foreground first.
    pub fn codes(&self) -> Vec<u8> {
        self.foreground
            .iter()
            .chain(&self.background)
            .map(|c| c.code)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let codes = self.codes();
        for (i, &c) in codes.iter().enumerate() {
            if c == 0 {
                return Err(Error::invalid("category table", "code 0 is reserved for empty"));
            }
            if codes[..i].contains(&c) {
                return Err(Error::invalid(
                    "category table",
                    format!("code {c} appears more than once"),
                ));
            }
        }
        Ok(())
    }
}

/// Categorical voxel grid; cell `(i, j, k)` spans
/// `[origin + (i, j, k)·voxel_size, origin + (i+1, j+1, k+1)·voxel_size)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_size: f64) -> Result<Self> {
        let grid = Self {
            dims,
            origin,
            voxel_size,
            cells: vec![0; dims.iter().product()],
        };
        grid.check_shape()?;
        Ok(grid)
    }

    fn check_shape(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid("occupancy grid", format!("dims {:?} must be ≥ 1", self.dims)));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid("occupancy grid", format!("voxel_size {} must be > 0", self.voxel_size)));
        }
        if self.cells.len() != self.dims.iter().product::<usize>() {
            return Err(Error::invalid(
                "occupancy grid",
                format!("{} cells for dims {:?}", self.cells.len(), self.dims),
            ));
        }
        Ok(())
    }

    pub fn validate(&self, tables: &CategoryTables) -> Result<()> {
        self.check_shape()?;
        for &c in &self.cells {
            if c != 0 && !tables.is_foreground(c) && !tables.is_background(c) {
                return Err(Error::UnknownCategory(c));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.cells[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, code: u8) {
        let ix = self.index(i, j, k);
        self.cells[ix] = code;
    }

    /// Lower corner of voxel `i` along `axis`.
    #[inline]
    pub fn voxel_lo(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.voxel_size
    }

    /// The voxel containing `p`, or `None` outside the grid.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !f.is_finite() || f < -1.0 || f > self.dims[a] as f64 {
                return None;
            }
            let mut i = f as i64;
            // reconcile rounding with the half-open bounds
            if i >= 0 && p[a] < self.voxel_lo(a, i as usize) {
                i -= 1;
            } else if i + 1 >= 0 && p[a] >= self.voxel_lo(a, (i + 1) as usize) {
                i += 1;
            }
            if i < 0 || i as usize >= self.dims[a] {
                return None;
            }
            out[a] = i as usize;
        }
        Some(out)
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let hi = std::array::from_fn(|a| self.voxel_lo(a, self.dims[a]));
        (self.origin, hi)
    }

    pub fn count_nonzero(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }
}

/// Splits a grid into its foreground and background views.
pub fn split_fg_bg(grid: &OccupancyGrid, tables: &CategoryTables) -> Result<(OccupancyGrid, OccupancyGrid)> {
    let mut fg = grid.clone();
    let mut bg = grid.clone();
    for ((f, b), &c) in fg.cells.iter_mut().zip(bg.cells.iter_mut()).zip(&grid.cells) {
        if c == 0 {
            continue;
        }
        if tables.is_foreground(c) {
            *b = 0;
        } else if tables.is_background(c) {
            *f = 0;
        } else {
            return Err(Error::UnknownCategory(c));
        }
    }
    Ok((fg, bg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Intrinsics.
    pub k: [[f64; 3]; 3],
    /// Camera-to-world rotation.
    pub r: [[f64; 3]; 3],
    /// Camera center offset from the ego position, meters.
    pub t: [f64; 3],
    pub p_ego: [f64; 3],
    /// `(U, V)`: horizontal then vertical pixel count.
    pub image_size: [usize; 2],
}

impl CameraModel {
    /// Pinhole camera at `p_ego + t` looking along world +x, pitched down by
    /// `pitch` radians, principal point at the image center.
    pub fn forward_looking(focal: f64, image_size: [usize; 2], p_ego: [f64; 3], t: [f64; 3], pitch: f64) -> Self {
        let fwd = Vector3::new(pitch.cos(), 0.0, -pitch.sin());
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = fwd.cross(&right);
        let r = Matrix3::from_columns(&[right, down, fwd]);
        Self {
            k: [
                [focal, 0.0, image_size[0] as f64 / 2.0],
                [0.0, focal, image_size[1] as f64 / 2.0],
                [0.0, 0.0, 1.0],
            ],
            r: mat_to_rows(&r),
            t,
            p_ego,
            image_size,
        }
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        rows_to_mat(&self.k)
    }

    pub fn r_matrix(&self) -> Matrix3<f64> {
        rows_to_mat(&self.r)
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.p_ego[a] + self.t[a])
    }

    pub fn k_inverse(&self) -> Result<Matrix3<f64>> {
        let k = self.k_matrix();
        if k.determinant().abs() < 1e-12 {
            return Err(Error::invalid("camera", "intrinsics K are singular"));
        }
        k.try_inverse()
            .ok_or_else(|| Error::invalid("camera", "intrinsics K are singular"))
    }

    pub fn validate(&self) -> Result<()> {
        self.k_inverse()?;
        let r = self.r_matrix();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera", "R must be a proper rotation"));
        }
        if self.image_size.contains(&0) {
            return Err(Error::invalid("camera", "image size must be ≥ 1"));
        }
        let finite = self.t.iter().chain(&self.p_ego).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("camera", "non-finite translation"));
        }
        Ok(())
    }

    /// The 21 scalars `[K, R, T]` flattened row-major.
    pub fn flattened(&self) -> Vec<f64> {
        self.k
            .iter()
            .flatten()
            .chain(self.r.iter().flatten())
            .chain(&self.t)
            .copied()
            .collect()
    }
}

pub(crate) fn rows_to_mat(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| rows[i][j])
}

pub(crate) fn mat_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// A categorized cuboid. Corner `c` sits at
/// `corners[0] + (c & 1)·e₀ + (c >> 1 & 1)·e₁ + (c >> 2 & 1)·e₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub category: u8,
    pub corners: [[f64; 3]; 8],
}

impl Box3 {
    pub fn axis_aligned(category: u8, lo: [f64; 3], hi: [f64; 3]) -> Self {
        let corners = std::array::from_fn(|c| {
            std::array::from_fn(|a| if c >> a & 1 == 1 { hi[a] } else { lo[a] })
        });
        Self { category, corners }
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            category: self.category,
            corners: self.corners.map(|p| std::array::from_fn(|a| p[a] + d[a])),
        }
    }

    /// Checks the corner layout describes a cuboid.
    pub fn validate(&self) -> Result<()> {
        let p = self.corners.map(Vector3::from);
        let e = [p[1] - p[0], p[2] - p[0], p[4] - p[0]];
        let scale = e.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
        if e.iter().any(|v| v.norm() < 1e-9) {
            return Err(Error::invalid("box", "degenerate edge"));
        }
        for c in 0..8 {
            let want = p[0]
                + e[0] * (c & 1) as f64
                + e[1] * (c >> 1 & 1) as f64
                + e[2] * (c >> 2 & 1) as f64;
            if (p[c] - want).norm() > 1e-6 * scale {
                return Err(Error::invalid("box", format!("corner {c} breaks face parallelism")));
            }
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if e[a].dot(&e[b]).abs() > 1e-6 * e[a].norm() * e[b].norm() {
                return Err(Error::invalid("box", "edges are not orthogonal"));
            }
        }
        Ok(())
    }

    pub fn flattened(&self) -> Vec<f64> {
        self.corners.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub entries: Vec<Box3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub category: u8,
    pub points: [[f64; 3]; 8],
}

impl MapElement {
    pub fn flattened(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorMap {
    pub entries: Vec<MapElement>,
}

/// `U×V×3` image, indexed `[u][v][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: [usize; 2],
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn black(size: [usize; 2]) -> Self {
        Self {
            size,
            pixels: vec![0.0; size[0] * size[1] * 3],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let o = (u * self.size[1] + v) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size[0], self.size[1], 3], self.pixels.clone())
            .expect("image buffer matches its size")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub grid: OccupancyGrid,
    pub boxes: BoxSet,
    pub camera: CameraModel,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneClip {
    pub seed: u64,
    pub caption: Vec<String>,
    pub categories: CategoryTables,
    pub map: VectorMap,
    pub frames: Vec<Frame>,
}

impl SceneClip {
    pub fn validate(&self) -> Result<()> {
        self.categories.validate()?;
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::invalid("scene", "a clip needs at least one frame"))?;
        let vocab = caption_vocabulary();
        if let Some(tok) = self.caption.iter().find(|t| !vocab.contains(t)) {
            return Err(Error::invalid("scene", format!("caption token `{tok}` is not in the vocabulary")));
        }
        for m in &self.map.entries {
            if !self.categories.is_background(m.category) {
                return Err(Error::UnknownCategory(m.category));
            }
            if m.points.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid("vector map", "consecutive polyline points coincide"));
            }
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.grid.validate(&self.categories)?;
            f.camera.validate()?;
            if f.camera.image_size != first.camera.image_size {
                return Err(Error::invalid("scene", format!("frame {i} has a different image size")));
            }
            if f.image.size != f.camera.image_size || f.image.pixels.len() != f.image.size[0] * f.image.size[1] * 3 {
                return Err(Error::invalid("scene", format!("frame {i} image does not match the camera")));
            }
            for b in &f.boxes.entries {
                if !self.categories.is_foreground(b.category) {
                    return Err(Error::UnknownCategory(b.category));
                }
                b.validate()?;
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> [usize; 2] {
        self.frames[0].camera.image_size
    }

    /// Reference frames stacked as `[F, U, V, 3]`.
    pub fn video(&self) -> Tensor {
        let size = self.image_size();
        let mut data = Vec::with_capacity(self.frames.len() * size[0] * size[1] * 3);
        for f in &self.frames {
            data.extend_from_slice(&f.image.pixels);
        }
        Tensor::new(vec![self.frames.len(), size[0], size[1], 3], data).expect("frame sizes validated")
    }
}

/// Counts and ranges for procedural scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub grid_dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub image_size: [usize; 2],
    pub frames: usize,
    pub boxes: usize,
    /// Inclusive range of the road band width, voxels.
    pub road_width: [usize; 2],
    /// Boxes start at least this many voxels from the near edge of the grid.
    pub min_box_depth: usize,
    pub focal: f64,
    pub pitch_deg: f64,
    pub p_ego: [f64; 3],
    pub camera_offset: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid_dims: [32, 32, 8],
            origin: [0.0, -3.2, 0.0],
            voxel_size: 0.2,
            image_size: [32, 32],
            frames: 4,
            boxes: 3,
            road_width: [12, 20],
            min_box_depth: 4,
            focal: 14.0,
            pitch_deg: 35.0,
            p_ego: [-0.2, 0.0, 0.9],
            camera_offset: [0.0, 0.0, 0.3],
        }
    }
}

const VEHICLE_SIZE: [usize; 3] = [8, 6, 4];
const PEDESTRIAN_SIZE: [usize; 3] = [3, 3, 6];
const PLACEMENT_ATTEMPTS: usize = 200;

struct Placement {
    category: u8,
    start: [usize; 3],
    size: [usize; 3],
    velocity: [i64; 3],
}

impl Placement {
    fn at(&self, frame: usize) -> [usize; 3] {
        std::array::from_fn(|a| (self.start[a] as i64 + self.velocity[a] * frame as i64) as usize)
    }

    fn overlaps(&self, other: &Placement, frames: usize) -> bool {
        (0..frames).any(|f| {
            let (p, q) = (self.at(f), other.at(f));
            (0..3).all(|a| p[a] < q[a] + other.size[a] && q[a] < p[a] + self.size[a])
        })
    }
}

/// Procedural scene; equal seeds give bit-identical clips.
pub fn generate_synthetic_scene(seed: u64, spec: &SceneSpec) -> Result<SceneClip> {
    if spec.frames == 0 {
        return Err(Error::invalid("scene spec", "frames must be ≥ 1"));
    }
    let [h, w, d] = spec.grid_dims;
    if spec.road_width[0] > spec.road_width[1] || spec.road_width[1] > w {
        return Err(Error::invalid("scene spec", "road width range exceeds the grid"));
    }
    if spec.min_box_depth >= h || d < 2 {
        return Err(Error::invalid("scene spec", "grid too small for boxes"));
    }
    let tables = CategoryTables::default();
    let mut rng = rng::prng(seed);
    let mut base = OccupancyGrid::new(spec.grid_dims, spec.origin, spec.voxel_size)?;

    // road band on the ground layer, dashed lane marking on its center line
    let road_w = rng.random_range(spec.road_width[0] as u64..=spec.road_width[1] as u64) as usize;
    let road_lo = rng.random_range(0..=(w - road_w) as u64) as usize;
    let lane_j = road_lo + road_w / 2;
    let dash_phase = rng.random_range(0..4u64) as usize;
    for i in 0..h {
        for j in road_lo..road_lo + road_w {
            base.set(i, j, 0, ROAD);
        }
        if (i + dash_phase) % 4 < 2 {
            base.set(i, lane_j, 0, LANE_MARKING);
        }
    }
    let map = road_map(&base, road_lo, road_w, lane_j);

    let frames = spec.frames;
    let mut placed: Vec<Placement> = Vec::with_capacity(spec.boxes);
    for _ in 0..spec.boxes {
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let vehicle = rng.random_range(0..10u32) < 7;
            let (category, size) = if vehicle {
                (VEHICLE, VEHICLE_SIZE)
            } else {
                (PEDESTRIAN, PEDESTRIAN_SIZE)
            };
            if size[0] + spec.min_box_depth > h || size[1] > w || size[2] + 1 > d {
                return Err(Error::invalid("scene spec", "grid cannot hold a box"));
            }
            let step = rng.random_range(0..3u32) as i64 - 1;
            let velocity = if vehicle { [step, 0, 0] } else { [0, step, 0] };
            let span = |a: usize, lo: usize, extent: usize| -> Option<(usize, usize)> {
                // start positions keeping every frame inside [lo, extent - size]
                let travel = velocity[a] * (frames as i64 - 1);
                let min = lo as i64 - travel.min(0);
                let max = (extent - size[a]) as i64 - travel.max(0);
                (min <= max).then_some((min as usize, max as usize))
            };
            let (Some(xs), Some(ys)) = (span(0, spec.min_box_depth, h), span(1, 0, w)) else {
                continue;
            };
            let cand = Placement {
                category,
                start: [
                    rng.random_range(xs.0 as u64..=xs.1 as u64) as usize,
                    rng.random_range(ys.0 as u64..=ys.1 as u64) as usize,
                    1,
                ],
                size,
                velocity,
            };
            if placed.iter().all(|p| !p.overlaps(&cand, frames)) {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok.ok_or_else(|| {
            Error::invalid("scene spec", format!("cannot place {} boxes in the grid", spec.boxes))
        })?);
    }

    let camera = CameraModel::forward_looking(
        spec.focal,
        spec.image_size,
        spec.p_ego,
        spec.camera_offset,
        spec.pitch_deg.to_radians(),
    );
    camera.validate()?;

    let mut out_frames = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut grid = base.clone();
        let mut boxes = BoxSet::default();
        for p in &placed {
            let at = p.at(f);
            for i in at[0]..at[0] + p.size[0] {
                for j in at[1]..at[1] + p.size[1] {
                    for k in at[2]..at[2] + p.size[2] {
                        grid.set(i, j, k, p.category);
                    }
                }
            }
            let lo = std::array::from_fn(|a| grid.voxel_lo(a, at[a]));
            let hi = std::array::from_fn(|a| grid.voxel_lo(a, at[a] + p.size[a]));
            boxes.entries.push(Box3::axis_aligned(p.category, lo, hi));
        }
        let image = render_reference(&grid, &camera, &tables)?;
        out_frames.push(Frame {
            grid,
            boxes,
            camera: camera.clone(),
            image,
        });
    }

    let time = CAPTION_TIMES[rng.random_range(0..CAPTION_TIMES.len() as u64) as usize];
    let weather = CAPTION_WEATHER[rng.random_range(0..CAPTION_WEATHER.len() as u64) as usize];
    Ok(SceneClip {
        seed,
        caption: vec![time.to_string(), weather.to_string()],
        categories: tables,
        map,
        frames: out_frames,
    })
}

fn road_map(grid: &OccupancyGrid, road_lo: usize, road_w: usize, lane_j: usize) -> VectorMap {
    let h = grid.dims[0];
    let line = |category: u8, y: f64| MapElement {
        category,
        points: std::array::from_fn(|p| {
            let i = p * (h - 1) / 7;
            [grid.voxel_lo(0, i) + grid.voxel_size / 2.0, y, grid.origin[2]]
        }),
    };
    let center = |j: usize| grid.voxel_lo(1, j) + grid.voxel_size / 2.0;
    VectorMap {
        entries: vec![
            line(ROAD, grid.voxel_lo(1, road_lo)),
            line(ROAD, grid.voxel_lo(1, road_lo + road_w)),
            line(LANE_MARKING, center(lane_j)),
        ],
    }
}

/// Distance along a unit ray at which it leaves the box `[lo, hi]`, or `None`
/// when it misses.
fn ray_exit(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some(t1)
}

/// First-hit shading: march each pixel ray at half-voxel steps and color by
/// the first occupied voxel, attenuated by `1 / (1 + distance / 10 m)`.
pub fn render_reference(grid: &OccupancyGrid, cam: &CameraModel, tables: &CategoryTables) -> Result<Image> {
    let rays = ors::cast_rays(cam, grid.voxel_size / 2.0, 1)?;
    let (lo, hi) = grid.bounds();
    let mut img = Image::black(cam.image_size);
    let step = rays.step;
    for u in 0..cam.image_size[0] {
        for v in 0..cam.image_size[1] {
            let dir = rays.direction(u, v);
            let Some(exit) = ray_exit(rays.origin, dir, lo, hi) else {
                continue;
            };
            let last = (exit / step).floor() as usize + 1;
            for i in 0..=last {
                let dist = step * i as f64;
                let p = std::array::from_fn(|a| rays.origin[a] + dir[a] * dist);
                let Some([x, y, z]) = grid.voxel_of(p) else { continue };
                let code = grid.get(x, y, z);
                if code == 0 {
                    continue;
                }
                let color = tables.color(code).ok_or(Error::UnknownCategory(code))?;
                let shade = 1.0 / (1.0 + dist / 10.0);
                let o = (u * cam.image_size[1] + v) * 3;
                for (px, c) in img.pixels[o..o + 3].iter_mut().zip(color) {
                    *px = c * shade;
                }
                break;
            }
        }
    }
    Ok(img)
}

pub fn save_scene(path: &Path, clip: &SceneClip) -> Result<()> {
    let text = serde_json::to_string(clip).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<SceneClip> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let clip: SceneClip = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    clip.validate()?;
    Ok(clip)
}

/// Sorted `*.json` scene files under `dir`.
pub fn scene_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}
