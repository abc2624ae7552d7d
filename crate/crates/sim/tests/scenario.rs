use cnav_sim::{
    build_background, build_scene, init_circle, init_random, place_obstacles, render_depth_at, Background,
    Bounds, Camera, InitPattern, ObstacleKind, ObstacleSpec, ScenarioSpec, Shape, Vec3, WorldConfig,
};
use nalgebra::Vector2;

#[test]
fn random_layout_separation_audit() {
    let b = Bounds::default();
    let r = 0.25;
    let mut min_sep = f64::INFINITY;
    for seed in 0..1000 {
        let p = init_random(seed, 4, &b, r).unwrap();
        for i in 0..p.len() {
            assert!(b.contains(&p[i].start) && b.contains(&p[i].goal));
            for j in 0..i {
                min_sep = min_sep.min((p[i].start - p[j].start).norm()).min((p[i].goal - p[j].goal).norm());
            }
        }
    }
    assert!(min_sep >= 4.0 * r, "min separation {min_sep}");
}

#[test]
fn circle_goals_are_antipodes_and_chords_match() {
    let center = Vector2::new(0.5, -0.5);
    let p = init_circle(8, 6.0, 2.0, center, 0.25).unwrap();
    let c = Vec3::new(center.x, center.y, 2.0);
    for pl in &p {
        assert!(((pl.goal - c) + (pl.start - c)).norm() < 1e-12);
        assert!(((pl.start - c).norm() - 6.0).abs() < 1e-12);
    }
    let chord = 2.0 * 6.0 * (std::f64::consts::PI / 8.0).sin();
    for i in 0..8 {
        let d = (p[(i + 1) % 8].start - p[i].start).norm();
        assert!((d - chord).abs() < 1e-12, "{d} vs {chord}");
    }
}

#[test]
fn obstacle_keepout_audit() {
    let b = Bounds::default();
    for seed in 0..50 {
        let layout = init_random(seed, 2, &b, 0.25).unwrap();
        let keep: Vec<Vec3> = layout.iter().flat_map(|p| [p.start, p.goal]).collect();
        for kind in [ObstacleKind::Cube, ObstacleKind::Sphere, ObstacleKind::Cylinder, ObstacleKind::Prism] {
            let shapes = place_obstacles(kind, 4, seed, &b, &keep, &[]).unwrap();
            assert_eq!(shapes.len(), 4);
            for s in &shapes {
                for k in &keep {
                    assert!(s.sdf(k) >= 1.5, "{s:?} too close to {k:?}");
                }
            }
            for i in 0..shapes.len() {
                for j in 0..i {
                    let (ci, ri) = shapes[i].footprint().unwrap();
                    let (cj, rj) = shapes[j].footprint().unwrap();
                    assert!((ci - cj).norm() >= ri + rj, "overlap");
                }
            }
        }
    }
    let keep = [Vec3::new(1.0, 1.0, 2.0)];
    assert_eq!(
        place_obstacles(ObstacleKind::Cylinder, 4, 9, &b, &keep, &[]).unwrap(),
        place_obstacles(ObstacleKind::Cylinder, 4, 9, &b, &keep, &[]).unwrap()
    );
}

#[test]
fn forest_is_deterministic() {
    let b = Bounds::default();
    let f = build_background(Background::Forest, 4, &b);
    assert_eq!(f, build_background(Background::Forest, 4, &b));
    assert_eq!(f.iter().filter(|s| matches!(s, Shape::Cylinder { .. })).count(), 20);
}

#[test]
fn scenes_start_collision_free() {
    let cfg = WorldConfig::default();
    for bg in Background::ALL {
        for seed in 0..30 {
            let spec = ScenarioSpec {
                name: None,
                background: bg,
                obstacles: vec![ObstacleSpec { kind: ObstacleKind::Cube, count: 4 }],
                init: InitPattern::Random,
                n_agents: 2,
                seed,
            };
            let world = build_scene(&spec, &cfg).unwrap().into_world(cfg.clone()).unwrap();
            assert!(world.colliding_agents().is_empty());
        }
    }
}

fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn forest_depth_differs_from_playground() {
    let cfg = WorldConfig::default();
    let camera = Camera::new(&cfg);
    let poses: Vec<(Vec3, f64)> = (0..16)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / 16.0;
            (Vec3::new(4.0 * a.cos(), 4.0 * a.sin(), 2.0), a + 2.0)
        })
        .collect();
    let pool = |bg| {
        let shapes = build_background(bg, 1, &cfg.bounds);
        let mut px = Vec::new();
        for (p, yaw) in &poses {
            if shapes.iter().any(|s| s.sdf(p) < cfg.agent_radius) {
                continue;
            }
            px.extend(render_depth_at(&cfg, &camera, &shapes, &[], p, *yaw).data.iter().map(|&v| v as f64));
        }
        px
    };
    let ks = ks_statistic(pool(Background::Forest), pool(Background::Playground));
    assert!(ks > 0.1, "KS statistic {ks}");
}
