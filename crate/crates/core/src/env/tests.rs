use super::*;
use tempfile::TempDir;

fn toy_env() -> EnvSpec {
    let ws = WorkspaceSpec::new([0.0, 0.0, 0.0], [0.8, 0.8, 0.4], 0.05).unwrap();
    EnvSpec::toy(ws, 32, 48, 8, 2).unwrap()
}

#[test]
fn fk_zero_pose_extends_along_x() {
    let env = toy_env();
    let kp = forward_kinematics(&env.arm, [0.0, 0.0, 0.0]).unwrap();
    assert_eq!(kp.len(), 4);
    let total: f64 = env.arm.link_lengths.iter().sum();
    let expect = [
        env.arm.base[0] + total,
        env.arm.base[1],
        env.arm.base[2],
    ];
    for a in 0..3 {
        assert!((kp[3][a] - expect[a]).abs() < 1e-12);
    }
}

#[test]
fn fk_rejects_out_of_limits() {
    let env = toy_env();
    assert!(forward_kinematics(&env.arm, [0.0, 3.0, 0.0]).is_err());
}

/// Independent oracle: compose homogeneous transforms.
fn homogeneous_fk(arm: &ArmSpec, angles: [f64; 3]) -> Vec<[f64; 3]> {
    type M4 = [[f64; 4]; 4];
    fn mul(a: &M4, b: &M4) -> M4 {
        let mut c = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }
    fn trans(x: f64, y: f64, z: f64) -> M4 {
        let mut m = ident();
        m[0][3] = x;
        m[1][3] = y;
        m[2][3] = z;
        m
    }
    fn ident() -> M4 {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        m
    }
    fn rz(t: f64) -> M4 {
        let mut m = ident();
        m[0][0] = t.cos();
        m[0][1] = -t.sin();
        m[1][0] = t.sin();
        m[1][1] = t.cos();
        m
    }
    fn ry(t: f64) -> M4 {
        let mut m = ident();
        m[0][0] = t.cos();
        m[0][2] = t.sin();
        m[2][0] = -t.sin();
        m[2][2] = t.cos();
        m
    }
    fn origin(m: &M4) -> [f64; 3] {
        [m[0][3], m[1][3], m[2][3]]
    }
    let [yaw, p2, p3] = angles;
    let mut t = mul(&trans(arm.base[0], arm.base[1], arm.base[2]), &rz(yaw));
    let p0 = origin(&t);
    t = mul(&t, &trans(arm.link_lengths[0], 0.0, 0.0));
    let p1 = origin(&t);
    // Positive pitch raises the link: rotation about -y.
    t = mul(&t, &ry(-p2));
    t = mul(&t, &trans(arm.link_lengths[1], 0.0, 0.0));
    let pt2 = origin(&t);
    t = mul(&t, &ry(-p3));
    t = mul(&t, &trans(arm.link_lengths[2], 0.0, 0.0));
    let pt3 = origin(&t);
    vec![p0, p1, pt2, pt3]
}

#[test]
fn fk_matches_homogeneous_oracle() {
    let env = toy_env();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let q = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-0.8..1.4),
            rng.gen_range(-2.0..2.0),
        ];
        let got = forward_kinematics(&env.arm, q).unwrap();
        let want = homogeneous_fk(&env.arm, q);
        for (g, w) in got.iter().zip(&want) {
            for a in 0..3 {
                assert!((g[a] - w[a]).abs() < 1e-12, "{:?} vs {:?}", g, w);
            }
        }
    }
}

#[test]
fn fk_preserves_link_lengths() {
    let env = toy_env();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let q = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-0.8..1.4),
            rng.gen_range(-2.0..2.0),
        ];
        let kp = forward_kinematics(&env.arm, q).unwrap();
        for i in 0..3 {
            let d: f64 = (0..3)
                .map(|a| (kp[i + 1][a] - kp[i][a]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d - env.arm.link_lengths[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn ik_reaches_target() {
    let env = toy_env();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut solved = 0;
    for _ in 0..50 {
        let target = [
            env.arm.base[0] + rng.gen_range(-0.3..0.3),
            env.arm.base[1] + rng.gen_range(-0.3..0.3),
            env.arm.base[2] + rng.gen_range(-0.02..0.2),
        ];
        if let Some(q) = inverse_kinematics(&env.arm, target) {
            let kp = forward_kinematics(&env.arm, q).unwrap();
            for a in 0..3 {
                assert!((kp[3][a] - target[a]).abs() < 1e-9);
            }
            solved += 1;
        }
    }
    assert!(solved > 20, "only {solved} IK solutions");
}

#[test]
fn raycast_box_face_and_sphere() {
    // Identity camera at the origin; pixel 8 is exactly on axis.
    let cam = CameraModel::new(
        20.0,
        20.0,
        8.5,
        8.5,
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0.0; 3],
        16,
        16,
    )
    .unwrap();
    // A large box whose near face is the plane z = 2.
    let pose = ScenePose {
        boxes: vec![Box3 {
            min: [-5.0, -5.0, 2.0],
            max: [5.0, 5.0, 3.0],
        }],
        capsules: vec![],
    };
    let depth = raycast_depth(&pose, &cam);
    assert_eq!(depth.at(8, 8), 2.0);
    assert_eq!(depth.at(0, 0), 2.0); // plane depth is constant in z-units

    // A sphere (degenerate capsule) of radius 0.1 at 1 m on axis.
    let pose2 = ScenePose {
        boxes: vec![],
        capsules: vec![([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 0.1)],
    };
    let depth2 = raycast_depth(&pose2, &cam);
    assert!((depth2.at(8, 8) - 0.9).abs() < 1e-12, "{}", depth2.at(8, 8));

    // Empty scene: all sentinel.
    let empty = ScenePose {
        boxes: vec![],
        capsules: vec![],
    };
    assert!(raycast_depth(&empty, &cam).data.iter().all(|&d| d == 0.0));
}

#[test]
fn episodes_are_seed_deterministic() {
    let env = toy_env();
    let a = generate_episode(&env, 1, 42).unwrap();
    let b = generate_episode(&env, 1, 42).unwrap();
    assert_eq!(a.angles.len(), b.angles.len());
    assert!(a
        .angles
        .iter()
        .zip(&b.angles)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a
        .depths
        .iter()
        .zip(&b.depths)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = generate_episode(&env, 1, 43).unwrap();
    assert!(a.angles.iter().zip(&c.angles).any(|(x, y)| x != y));
}

#[test]
fn actions_integrate_to_ee_trajectory() {
    let env = toy_env();
    let ep = generate_episode(&env, 0, 7).unwrap();
    let mut pos = ep.keypoint(0, 3);
    for t in 0..ep.steps - 1 {
        let a = &ep.actions[t * 7..t * 7 + 3];
        for d in 0..3 {
            pos[d] += a[d];
        }
    }
    let last = ep.keypoint(ep.steps - 1, 3);
    for d in 0..3 {
        assert!((pos[d] - last[d]).abs() < 1e-6);
    }
}

#[test]
fn keypoints_stay_inside_workspace() {
    let env = toy_env();
    for seed in [0u64, 5, 9] {
        let ep = generate_episode(&env, 0, seed).unwrap();
        for t in 0..ep.steps {
            for k in 0..ep.k {
                assert!(env.workspace.contains(ep.keypoint(t, k)), "step {t} kp {k}");
            }
        }
    }
}

#[test]
fn depth_and_keypoints_are_consistent() {
    // At a resolution where the pixel ray passes well inside the capsule
    // radius, the depth under a projected keypoint is at most the
    // keypoint's camera depth plus the capsule radius.
    let env = toy_env();
    let ep = generate_episode(&env, 0, 3).unwrap();
    let upscale = 8;
    for t in [0, ep.steps / 2, ep.steps - 1] {
        let q = [ep.angles[t * 3], ep.angles[t * 3 + 1], ep.angles[t * 3 + 2]];
        let pose = env.scene_pose(q, [5.0, 5.0, 5.0]);
        for cam in &ep.cameras {
            let f = upscale as f64;
            let fine = CameraModel::new(
                cam.fx * f,
                cam.fy * f,
                cam.cx * f,
                cam.cy * f,
                cam.rot,
                cam.trans,
                cam.width * upscale,
                cam.height * upscale,
            )
            .unwrap();
            let img = raycast_depth(&pose, &fine);
            for k in 0..ep.k {
                let p = ep.keypoint(t, k);
                let c = fine.world_to_camera(p);
                if c[2] <= 0.0 {
                    continue;
                }
                let u = fine.fx * c[0] / c[2] + fine.cx;
                let v = fine.fy * c[1] / c[2] + fine.cy;
                let (ix, iy) = (u.floor() as i64, v.floor() as i64);
                if ix < 0 || iy < 0 || ix >= fine.width as i64 || iy >= fine.height as i64 {
                    continue;
                }
                let d = img.at(ix as usize, iy as usize);
                assert!(
                    d > 0.0 && d <= c[2] + env.arm.capsule_radius + 1e-9,
                    "step {t} kp {k}: depth {d} vs z {}",
                    c[2]
                );
            }
        }
    }
}

#[test]
fn episode_save_load_round_trip() {
    let env = toy_env();
    let ep = generate_episode(&env, 2, 11).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("ep_0000");
    ep.save(&path).unwrap();
    let back = EpisodeRecord::load(&path, Some(&env.arm)).unwrap();
    assert_eq!(back.task_id, 2);
    assert_eq!(back.steps, ep.steps);
    assert_eq!(back.horizon, ep.horizon);
    assert!(ep
        .depths
        .iter()
        .zip(&back.depths)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(ep
        .actions
        .iter()
        .zip(&back.actions)
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    // Corrupt the keypoints: load must fail the kinematic check.
    let mut broken = ep.clone();
    broken.keypoints[5] += 0.05;
    let path2 = dir.path().join("ep_bad");
    broken.save(&path2).unwrap();
    assert!(EpisodeRecord::load(&path2, Some(&env.arm)).is_err());
    // Without an arm the check is skipped.
    assert!(EpisodeRecord::load(&path2, None).is_ok());
}

#[test]
fn gripper_ramps_and_object_moves() {
    let env = toy_env();
    let ep = generate_episode(&env, 0, 21).unwrap();
    let grips: Vec<f64> = (0..ep.steps).map(|t| ep.state(t)[3]).collect();
    assert_eq!(grips[0], 0.0);
    assert!(grips.iter().any(|&g| g == 1.0));
    assert_eq!(grips[ep.steps - 1], 0.0);
    // Depth maps change over time (the scene is dynamic).
    let first = ep.depth_image(0, 0);
    let later = ep.depth_image(ep.steps / 2, 0);
    assert!(first.iter().zip(later).any(|(a, b)| a != b));
}
