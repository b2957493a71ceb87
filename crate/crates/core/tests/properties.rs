use std::collections::VecDeque;

use branchflow::aggregate::{aggregate, AggregateConfig, GridSpec, OutOfFramePolicy, VoxelGrid};
use branchflow::cameras::{make_rig, Camera, RigKind, RigLayout};
use branchflow::particleflow::{find_root, simulate, step_particle, FlowConfig, Particle, ParticleState};
use branchflow::plantgen::{generate_plant, PlantGenConfig};
use branchflow::probmap::{estimate_prob_map, render_masks, simulate_inference_sample, BinaryMask, InferenceSimConfig, ProbMap2D};
use branchflow::refine::{refine, simplify, smooth, snap_to_ridge, RefineConfig};
use branchflow::SkeletonGraph;
use nalgebra::Vector3;
use proptest::prelude::*;

fn small_plant_config(depth: u32) -> PlantGenConfig {
    PlantGenConfig {
        max_depth: depth,
        ..Default::default()
    }
}

/// Synthetic weights: `f` gives the normalised weight at each voxel centre.
fn grid_from(dims: [usize; 3], f: impl Fn(Vector3<f64>) -> f64) -> VoxelGrid {
    let spec = GridSpec {
        dims,
        origin: [0.0; 3],
        spacing: 1.0,
    };
    let mut g = VoxelGrid::filled(&spec, 1e-4, 8, 0.0);
    for idx in 0..g.len() {
        let w = f(g.center_of(idx)).clamp(0.0, 1.0);
        g.log_values[idx] = g.log_floor * (1.0 - w);
    }
    g
}

/// Weight falling off from a bent tube: a column up x = 8, z = 8 that leans toward +x above y = 10.
fn tube_grid(radius: f64) -> VoxelGrid {
    grid_from([20, 24, 17], |p| {
        let axis_x = if p.y > 10.0 { 8.0 + 0.5 * (p.y - 10.0) } else { 8.0 };
        let d = ((p.x - axis_x).powi(2) + (p.z - 8.0).powi(2)).sqrt();
        if p.y < 1.0 || p.y > 21.0 {
            0.0
        } else {
            (1.0 - d / radius).max(0.0)
        }
    })
}

fn random_tree(n: usize, picks: &[(usize, f64, f64, f64)]) -> SkeletonGraph {
    let mut vertices = vec![Vector3::new(8.0, 1.0, 8.0)];
    let mut parents = vec![None];
    for (i, &(pick, dx, dy, dz)) in picks.iter().take(n - 1).enumerate() {
        let p = pick % (i + 1);
        vertices.push(vertices[p] + Vector3::new(dx, dy.abs() + 0.3, dz));
        parents.push(Some(p));
    }
    SkeletonGraph::from_parents(vertices, &parents, 0).unwrap()
}

fn chord_dispersion(g: &SkeletonGraph) -> f64 {
    let n = g.vertices.len();
    let (a, b) = (g.vertices[0], g.vertices[n - 1]);
    let d = (b - a).normalize();
    g.vertices[1..n - 1]
        .iter()
        .map(|v| {
            let q = v - a;
            (q - d * q.dot(&d)).norm_squared()
        })
        .sum()
}

fn bfs_visits(g: &SkeletonGraph) -> Vec<usize> {
    let adj = g.neighbors().unwrap();
    let mut visits = vec![0; g.vertices.len()];
    let mut queue = VecDeque::from([g.root]);
    let mut seen = vec![false; g.vertices.len()];
    seen[g.root] = true;
    while let Some(v) = queue.pop_front() {
        visits[v] += 1;
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    visits
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plants_are_deterministic_connected_trees(seed in any::<u64>(), depth in 1u32..5) {
        let cfg = small_plant_config(depth);
        let a = generate_plant(&cfg, seed).unwrap();
        let b = generate_plant(&cfg, seed).unwrap();
        prop_assert_eq!(
            serde_json::to_string(&a.to_doc()).unwrap(),
            serde_json::to_string(&b.to_doc()).unwrap()
        );
        let sk = a.skeleton();
        prop_assert!(bfs_visits(&sk).iter().all(|&v| v == 1));
        let degrees = sk.degrees();
        let internal = (0..sk.len()).filter(|&v| v != sk.root && degrees[v] >= 2).count();
        prop_assert!(a.joint_count().unwrap() <= internal);
    }

    #[test]
    fn rig_cameras_see_their_target_at_the_principal_point(
        kind in prop::sample::select(vec![RigKind::Hemisphere, RigKind::ThreeRings, RigKind::Semicircle, RigKind::QuarterCircle]),
        count in 1usize..40,
        radius in 0.5f64..20.0,
        target in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
    ) {
        let look = Vector3::new(target.0, target.1, target.2);
        let cams = make_rig(&RigLayout::new(kind, count, radius, look)).unwrap();
        prop_assert_eq!(cams.len(), count);
        for c in &cams {
            let p = c.project(&look).unwrap().pixel;
            prop_assert!((p.x - c.cx).abs() <= 0.5 && (p.y - c.cy).abs() <= 0.5);
        }
    }

    #[test]
    fn projection_is_constant_along_a_ray(
        eye in (-5.0f64..5.0, 0.5f64..5.0, -5.0f64..5.0),
        point in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        scale in 0.05f64..20.0,
    ) {
        let eye = Vector3::new(eye.0, eye.1, eye.2);
        prop_assume!(eye.norm() > 1.5);
        let cam = Camera::look_at(eye, Vector3::zeros(), 128, 96, 60f64.to_radians()).unwrap();
        let x = Vector3::new(point.0, point.1, point.2);
        let c = cam.center();
        let a = cam.project(&x).unwrap().pixel;
        let b = cam.project(&(c + (x - c) * scale)).unwrap().pixel;
        prop_assert!((a - b).norm() <= 1e-6);
    }

    #[test]
    fn estimated_maps_are_probabilities(bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 1..20)) {
        let samples: Vec<BinaryMask> = bits
            .into_iter()
            .map(|b| BinaryMask { width: 4, height: 3, bits: b })
            .collect();
        let m = estimate_prob_map(&samples).unwrap();
        prop_assert!(m.values.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn visible_branch_is_inside_full_branch(seed in 0u64..1000, azimuth in 0.0f64..360.0, elevation in -20.0f64..80.0) {
        let plant = generate_plant(&small_plant_config(3), seed).unwrap();
        let (lo, hi) = plant.bounding_box();
        let center = (lo + hi) / 2.0;
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        let eye = center + Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * 3.0 * (hi - lo).norm();
        let cam = Camera::look_at(eye, center, 64, 64, 45f64.to_radians()).unwrap();
        let m = render_masks(&plant, &cam);
        prop_assert!(m.visible_branch.is_subset_of(&m.full_branch));
        prop_assert!(m.full_branch.is_subset_of(&m.whole_plant));
    }

    #[test]
    fn aggregation_ignores_view_order_and_stays_in_range(seed in any::<u64>(), views in 1usize..6, rotate in 1usize..6) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cams: Vec<Camera> = (0..views)
            .map(|_| {
                let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let eye = Vector3::new(az.cos(), rng.random_range(-0.5..0.8), az.sin()) * 3.0;
                Camera::look_at(eye, Vector3::zeros(), 20, 16, 50f64.to_radians()).unwrap()
            })
            .collect();
        let maps: Vec<ProbMap2D> = cams
            .iter()
            .map(|_| ProbMap2D::new(20, 16, (0..320).map(|_| rng.random::<f64>().powi(3)).collect()).unwrap())
            .collect();
        let cfg = AggregateConfig {
            grid: GridSpec { dims: [7, 6, 5], origin: [-0.6, -0.5, -0.4], spacing: 0.2 },
            eps_floor: 1e-3,
            out_of_frame: if seed % 2 == 0 { OutOfFramePolicy::Floor } else { OutOfFramePolicy::Skip },
        };
        let a = aggregate(&maps, &cams, &cfg).unwrap();
        let shift = rotate % views;
        let (mut m2, mut c2) = (maps.clone(), cams.clone());
        m2.rotate_left(shift);
        c2.rotate_left(shift);
        m2.reverse();
        c2.reverse();
        let b = aggregate(&m2, &c2, &cfg).unwrap();
        prop_assert_eq!(&a.log_values, &b.log_values);
        prop_assert!(a.log_values.iter().all(|&v| v >= a.log_floor && v <= 0.0));
    }

    #[test]
    fn steps_have_fixed_length(x in 6.0f64..11.0, y in 2.0f64..20.0, z in 6.0f64..10.0) {
        let g = tube_grid(4.0);
        let root = find_root(&g, 0.5).unwrap();
        let cfg = FlowConfig {
            particle_count: 1,
            neighborhood_radius: 2.5,
            lambda_r: 0.1,
            step_length: 0.7,
            max_steps: 10,
            root_capture_radius: 1.0,
            merge_radius: 1.0,
            min_weight_to_live: 0.0,
            root_threshold: 0.5,
        };
        let p = Particle::new(0, Vector3::new(x, y, z));
        let next = step_particle(&p, &g, &root, &cfg);
        if matches!(next.state, ParticleState::Moving | ParticleState::Captured) && next.trail.len() == 2 {
            prop_assert!(((next.position - p.position).norm() - 0.7).abs() <= 1e-9);
        }
    }

    #[test]
    fn simulation_yields_a_rooted_tree(seed in any::<u64>(), count in 1usize..200, radius in 2.0f64..5.0) {
        let g = tube_grid(radius);
        let mut cfg = FlowConfig::for_grid(&g);
        cfg.particle_count = count;
        let raw = simulate(&g, &cfg, seed).unwrap();
        let sk = raw.to_skeleton().unwrap();
        prop_assert_eq!(sk.edges.len(), sk.vertices.len() - 1);
        prop_assert!(bfs_visits(&sk).iter().all(|&v| v == 1));
    }

    #[test]
    fn smoothing_contracts_chains_toward_their_chord(offsets in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 3..14)) {
        let vertices: Vec<Vector3<f64>> = offsets
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Vector3::new(a, i as f64, b))
            .collect();
        let n = vertices.len();
        let parents: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
        let chain = SkeletonGraph::from_parents(vertices, &parents, 0).unwrap();
        let s = smooth(&chain).unwrap();
        prop_assert!(chord_dispersion(&s) <= chord_dispersion(&chain) + 1e-12);
    }

    #[test]
    fn refinement_shrinks_and_keeps_trees(
        n in 2usize..60,
        picks in prop::collection::vec((0usize..1000, -1.5f64..1.5, 0.0f64..1.5, -1.5f64..1.5), 60),
    ) {
        let g = tube_grid(4.0);
        let raw = random_tree(n, &picks);
        let cfg = RefineConfig { prune_threshold: 0.0, ..RefineConfig::for_grid(&g) };
        let s1 = smooth(&raw).unwrap();
        s1.validate().unwrap();
        let s2 = snap_to_ridge(&s1, &g, cfg.ridge_search_radius).unwrap();
        s2.validate().unwrap();
        let s3 = simplify(&s2, &g, &cfg).unwrap();
        s3.validate().unwrap();
        prop_assert!(s3.len() <= s2.len());
        let r = refine(&raw, &g, &cfg).unwrap();
        r.validate().unwrap();
        prop_assert!(r.len() <= raw.len());
        prop_assert_eq!(refine(&raw, &g, &cfg).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn more_occluded_recall_never_lowers_expected_probability(low in 0.0f64..0.9, gap in 0.0f64..0.1) {
        // Left half is branch; of that, only the top rows are visible.
        let (w, h) = (16, 12);
        let mut full = BinaryMask::empty(w, h);
        let mut visible = BinaryMask::empty(w, h);
        for v in 0..h {
            for u in 0..w / 2 {
                full.bits[v * w + u] = true;
                visible.bits[v * w + u] = v < 3;
            }
        }
        let occluded: Vec<usize> = (0..w * h).filter(|&i| full.bits[i] && !visible.bits[i]).collect();
        let mean_at = |recall: f64| {
            let cfg = InferenceSimConfig { occluded_recall: recall, ..Default::default() };
            let mut hits = 0usize;
            for seed in 0..120u64 {
                let s = simulate_inference_sample(&full, &visible, &cfg, seed, 0).unwrap();
                hits += occluded.iter().filter(|&&i| s.bits[i]).count();
            }
            hits as f64 / (120 * occluded.len()) as f64
        };
        prop_assert!(mean_at(low + gap) >= mean_at(low));
    }
}
