mod common;

use common::{first_hit_oracle, ors_oracle, random_grid, seeded, small_grid_camera};
use occgen_core::ors::{cast_rays, ors_project, rasterize_fgm_mask, FeatureSource};
use occgen_core::scene::{
    generate_synthetic_scene, load_scene, render_reference, save_scene, split_fg_bg, Box3, BoxSet, CameraModel,
    CategoryTables, OccupancyGrid, SceneSpec, PEDESTRIAN, VEHICLE,
};
use occgen_core::Error;
use proptest::prelude::*;

#[test]
fn render_matches_first_hit_oracle() {
    let tables = CategoryTables::default();
    let cam = small_grid_camera([16, 16]);
    for seed in 0..4 {
        let grid = random_grid(&mut seeded(seed), [8, 8, 4], 0.25, 0.15);
        let img = render_reference(&grid, &cam, &tables).unwrap();
        let hits = first_hit_oracle(&grid, &cam);
        let mut lit = 0;
        for (px, hit) in hits.iter().enumerate() {
            let expect = match hit {
                Some(([x, y, z], dist)) => {
                    lit += 1;
                    let c = tables.color(grid.get(*x, *y, *z)).unwrap();
                    c.map(|v| v / (1.0 + dist / 10.0))
                }
                None => [0.0; 3],
            };
            let got = &img.pixels[px * 3..px * 3 + 3];
            for c in 0..3 {
                assert!((got[c] - expect[c]).abs() < 1e-12, "seed {seed} pixel {px}: {got:?} vs {expect:?}");
            }
        }
        assert!(lit > 20, "camera should see the grid (seed {seed}: {lit} lit pixels)");
    }
}

#[test]
fn ors_matches_containment_oracle() {
    let tables = CategoryTables::default();
    let cam = small_grid_camera([8, 8]);
    let grid = random_grid(&mut seeded(11), [8, 8, 4], 0.25, 0.3);
    let rays = cast_rays(&cam, 0.1, 24).unwrap();
    let map = ors_project(&grid, &rays, &tables, FeatureSource::Foreground);
    assert_eq!(map.values.shape(), &[8, 8, 24]);
    let expect = ors_oracle(&grid, &rays, &tables);
    assert_eq!(map.values.data(), &expect[..]);
    assert!(expect.iter().any(|&v| v > 0.0));
    assert!(expect.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn ors_of_empty_grid_is_zero() {
    let tables = CategoryTables::default();
    let grid = OccupancyGrid::new([4, 4, 4], [0.0; 3], 0.25).unwrap();
    let rays = cast_rays(&small_grid_camera([4, 4]), 0.1, 16).unwrap();
    let map = ors_project(&grid, &rays, &tables, FeatureSource::Background);
    assert!(map.values.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_cells(seed in any::<u64>(), fill in 0.0f64..1.0) {
        let tables = CategoryTables::default();
        let grid = random_grid(&mut seeded(seed), [5, 4, 3], 0.5, fill);
        let (fg, bg) = split_fg_bg(&grid, &tables).unwrap();
        for i in 0..grid.cells.len() {
            let (c, f, b) = (grid.cells[i], fg.cells[i], bg.cells[i]);
            // disjoint, and together they recover the original
            prop_assert!(f == 0 || b == 0);
            prop_assert_eq!(f.max(b), c);
            prop_assert!(f == 0 || tables.is_foreground(f));
            prop_assert!(b == 0 || tables.is_background(b));
        }
    }

    #[test]
    fn voxel_lookup_agrees_with_linear_scan(x in -0.3f64..2.3, y in -0.3f64..2.3, z in -0.3f64..1.3) {
        let grid = OccupancyGrid::new([4, 4, 2], [0.0; 3], 0.5).unwrap();
        prop_assert_eq!(grid.voxel_of([x, y, z]), common::containing_voxel(&grid, [x, y, z]));
    }
}

#[test]
fn split_rejects_unknown_code() {
    let mut grid = OccupancyGrid::new([2, 2, 2], [0.0; 3], 1.0).unwrap();
    grid.set(1, 0, 1, 42);
    assert!(matches!(split_fg_bg(&grid, &CategoryTables::default()), Err(Error::UnknownCategory(42))));
}

#[test]
fn synthetic_scenes_are_deterministic_and_valid() {
    let spec = SceneSpec::default();
    let a = generate_synthetic_scene(5, &spec).unwrap();
    let b = generate_synthetic_scene(5, &spec).unwrap();
    let c = generate_synthetic_scene(6, &spec).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    a.validate().unwrap();
    assert_eq!(a.frames.len(), spec.frames);
    assert_eq!(a.video().shape(), &[spec.frames, 32, 32, 3]);
    // every frame shows some foreground and the images are the reference render
    for f in &a.frames {
        assert!(!f.boxes.entries.is_empty());
        assert_eq!(render_reference(&f.grid, &f.camera, &a.categories).unwrap(), f.image);
    }
}

#[test]
fn scene_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    let clip = generate_synthetic_scene(3, &SceneSpec::default()).unwrap();
    save_scene(&path, &clip).unwrap();
    assert_eq!(load_scene(&path).unwrap(), clip);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    match load_scene(&path) {
        Err(Error::Parse { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn loading_rejects_unknown_category() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    let mut clip = generate_synthetic_scene(3, &SceneSpec::default()).unwrap();
    clip.frames[0].grid.cells[0] = 77;
    save_scene(&path, &clip).unwrap();
    assert!(matches!(load_scene(&path), Err(Error::UnknownCategory(77))));
}

/// Identity rotation at the origin, unit focal length, principal point 0:
/// a point projects to `(x/z, y/z)` in latent pixels when image = latent.
fn unit_camera(size: [usize; 2]) -> CameraModel {
    CameraModel {
        k: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        t: [0.0; 3],
        p_ego: [0.0; 3],
        image_size: size,
    }
}

#[test]
fn fgm_quarter_and_full_coverage() {
    let cam = unit_camera([4, 4]);
    // footprint [0,2]×[0,2] at depth 1 (the far face projects inside it)
    let quarter = BoxSet {
        entries: vec![Box3::axis_aligned(VEHICLE, [0.0, 0.0, 1.0], [2.0, 2.0, 2.0])],
    };
    let m = rasterize_fgm_mask(&quarter, &cam, [4, 4], 1.0).unwrap();
    let w = m.weights.data();
    for u in 0..4 {
        for v in 0..4 {
            let expect = if u < 2 && v < 2 { 1.75 } else { 1.0 };
            assert_eq!(w[u * 4 + v], expect, "pixel ({u}, {v})");
        }
    }
    assert_eq!(m.foreground().iter().filter(|&&f| f).count(), 4);

    let full = BoxSet {
        entries: vec![Box3::axis_aligned(VEHICLE, [-1.0, -1.0, 0.2], [5.0, 5.0, 0.25])],
    };
    let m = rasterize_fgm_mask(&full, &cam, [4, 4], 1.0).unwrap();
    assert!(m.weights.data().iter().all(|&w| w == 1.0));
    assert!(m.foreground().iter().all(|&f| !f));
}

#[test]
fn fgm_weight_decreases_with_footprint_area() {
    let cam = unit_camera([8, 8]);
    let mut last = f64::INFINITY;
    for side in 1..8 {
        let boxes = BoxSet {
            entries: vec![Box3::axis_aligned(PEDESTRIAN, [0.0, 0.0, 1.0], [side as f64, side as f64, 1.5])],
        };
        let w = rasterize_fgm_mask(&boxes, &cam, [8, 8], 2.0).unwrap().weights.data()[0];
        assert!(w < last, "side {side}: {w} not below {last}");
        assert!((w - (3.0 - 2.0 * (side * side) as f64 / 64.0)).abs() < 1e-12);
        last = w;
    }
}

#[test]
fn fgm_smallest_box_wins_and_zero_lambda_is_uniform() {
    let cam = unit_camera([4, 4]);
    let boxes = BoxSet {
        entries: vec![
            Box3::axis_aligned(VEHICLE, [0.0, 0.0, 1.0], [4.0, 4.0, 2.0]),
            Box3::axis_aligned(PEDESTRIAN, [0.0, 0.0, 1.0], [1.0, 1.0, 2.0]),
        ],
    };
    let w = rasterize_fgm_mask(&boxes, &cam, [4, 4], 1.0).unwrap().weights;
    assert_eq!(w.data()[0], 1.0 + 1.0 - 1.0 / 16.0);
    assert_eq!(w.data()[5], 1.0);
    let w0 = rasterize_fgm_mask(&boxes, &cam, [4, 4], 0.0).unwrap().weights;
    assert!(w0.data().iter().all(|&x| x == 1.0));
    assert!(matches!(
        rasterize_fgm_mask(&boxes, &cam, [4, 4], -0.5),
        Err(Error::Invalid { .. })
    ));
}

#[test]
fn box_behind_camera_is_ignored() {
    let cam = unit_camera([4, 4]);
    let boxes = BoxSet {
        entries: vec![Box3::axis_aligned(VEHICLE, [0.0, 0.0, -3.0], [2.0, 2.0, -1.0])],
    };
    let w = rasterize_fgm_mask(&boxes, &cam, [4, 4], 1.0).unwrap().weights;
    assert!(w.data().iter().all(|&x| x == 1.0));
}
