use nmp::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use nmp::config::RunConfig;
use nmp::mesh_file::{load_mesh, parse_mesh, save_mesh};
use nmp::report::{epoch_csv, surface_obj};
use nmp::trajectory_file::{decode_trajectory, encode_trajectory, load_trajectory, save_trajectory};
use nmp::CliError;
use nmp_core::diff::{ParamStore, Tensor};
use nmp_core::fem::{Frame, SimState, Trajectory, TrajectoryMeta};
use nmp_core::{make_cube_mesh, MaterialModel, MaterialParams, Tessellation};
use proptest::prelude::*;

fn sample_trajectory(n: usize, frames: usize, forces: bool) -> Trajectory {
    let v = |k: usize, i: usize, o: f64| [k as f64 + o, i as f64 * 0.5 - o, 1.0 / (1.0 + (k * i) as f64)];
    Trajectory {
        frames: (0..frames)
            .map(|k| Frame {
                state: SimState {
                    positions: (0..n).map(|i| v(k, i, 0.1)).collect(),
                    velocities: (0..n).map(|i| v(k, i, -2.0)).collect(),
                },
                forces: forces.then(|| (0..n).map(|i| v(k, i, 1e4)).collect()),
            })
            .collect(),
        dt_frame: 5e-4,
        meta: TrajectoryMeta::default(),
    }
}

#[test]
fn trajectory_header_matches_layout() {
    let t = sample_trajectory(1, 1, true);
    let bytes = encode_trajectory(&t).unwrap();
    let mut expected = b"NMPT".to_vec();
    for w in [1u32, 1, 1, 1] {
        expected.extend_from_slice(&w.to_le_bytes());
    }
    expected.extend_from_slice(&5e-4f64.to_le_bytes());
    let f = &t.frames[0];
    for v in f.state.positions[0].iter().chain(&f.state.velocities[0]).chain(&f.forces.as_ref().unwrap()[0]) {
        expected.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(bytes, expected);
    assert_eq!(bytes.len(), 28 + 9 * 8);
}

#[test]
fn trajectory_roundtrip_with_and_without_forces() {
    for forces in [true, false] {
        let t = sample_trajectory(7, 4, forces);
        let back = decode_trajectory(&encode_trajectory(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.has_forces(), forces);
    }
}

#[test]
fn trajectory_rejects_corruption() {
    let bytes = encode_trajectory(&sample_trajectory(3, 2, true)).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_trajectory(&bad), Err(CliError::Data(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(decode_trajectory(&bad).is_err());
    let mut bad = bytes.clone();
    bad[8] = 0b10;
    assert!(decode_trajectory(&bad).is_err());
    assert!(decode_trajectory(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_trajectory(&long).is_err());
    assert!(decode_trajectory(&bytes[..10]).is_err());
}

#[test]
fn sidecar_carries_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nmpt");
    let mut t = sample_trajectory(4, 3, true);
    t.meta = TrajectoryMeta {
        generator: "fem".into(),
        seed: 42,
        material: Some(MaterialParams::from_young_poisson(MaterialModel::StVK, 5e4, 0.45).unwrap()),
        mesh: "cube.json".into(),
    };
    save_trajectory(&path, &t).unwrap();
    assert!(dir.path().join("t.json").exists());
    let back = load_trajectory(&path).unwrap();
    assert_eq!(back, t);
}

fn sample_store() -> ParamStore {
    let mut s = ParamStore::new(17);
    s.stage = "finetune".into();
    s.insert("constitutive/l0/w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3e-300, 0.1, f64::MIN_POSITIVE, 7.0])).unwrap();
    s.insert("integration/head/l0/b", Tensor::from_vec(1, 3, vec![0.0, -0.0, 1.0 / 3.0])).unwrap();
    s.set_stat("constitutive/stress_scale", vec![1e5]);
    s.set_stat("integration/x_std", vec![0.1, 0.2, std::f64::consts::PI]);
    s
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let s = sample_store();
    let bytes = encode_checkpoint(&s).unwrap();
    assert_eq!(&bytes[..4], b"NMPC");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.seed, 17);
    assert_eq!(back.stage, "finetune");
    for (name, t) in s.iter() {
        let b = back.get(name).unwrap();
        assert_eq!(b.shape(), t.shape());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&b.data), bits(&t.data), "{name}");
    }
    assert_eq!(back.stats(), s.stats());
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.nmpc");
    save_checkpoint(&p, &s).unwrap();
    assert_eq!(encode_checkpoint(&load_checkpoint(&p).unwrap()).unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_corruption() {
    let bytes = encode_checkpoint(&sample_store()).unwrap();
    assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
    let mut long = bytes;
    long.push(1);
    assert!(decode_checkpoint(&long).is_err());
}

const UNIT_TET: &str = r#"{"vertices": [[0,0,0],[1,0,0],[0,1,0],[0,0,1]], "tets": [[0,1,2,3]]}"#;

#[test]
fn single_tet_mesh_file() {
    let m = parse_mesh(UNIT_TET, 1000.0).unwrap();
    assert!((m.rest_volumes[0] - 1.0 / 6.0).abs() < 1e-15);
    let d = m.dm_inv[0];
    for r in 0..3 {
        for c in 0..3 {
            assert_eq!(d.0[r][c], if r == c { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(m.density, 1000.0);
    let with_density = parse_mesh(
        r#"{"vertices": [[0,0,0],[1,0,0],[0,1,0],[0,0,1]], "tets": [[0,1,2,3]], "density": 500, "ground_height": -1, "fixed_vertices": [3]}"#,
        1000.0,
    )
    .unwrap();
    assert_eq!(with_density.density, 500.0);
    assert_eq!(with_density.ground_height, Some(-1.0));
    assert_eq!(with_density.fixed_vertices, vec![3]);
}

#[test]
fn mesh_file_errors() {
    let flipped = r#"{"vertices": [[0,0,0],[1,0,0],[0,1,0],[0,0,1]], "tets": [[0,2,1,3]]}"#;
    match parse_mesh(flipped, 1000.0) {
        Err(CliError::Core(nmp_core::Error::NegativeOrientation { element: 0, .. })) => {}
        other => panic!("expected orientation error, got {other:?}"),
    }
    let unknown = r#"{"vertices": [[0,0,0],[1,0,0],[0,1,0],[0,0,1]], "tets": [[0,1,2,3]], "color": "red"}"#;
    assert!(matches!(parse_mesh(unknown, 1000.0), Err(CliError::Data(_))));
    assert!(parse_mesh("{\"vertices\": [[0,0]]", 1000.0).is_err());
    let out_of_range = r#"{"vertices": [[0,0,0],[1,0,0],[0,1,0],[0,0,1]], "tets": [[0,1,2,4]]}"#;
    assert!(matches!(parse_mesh(out_of_range, 1000.0), Err(CliError::Data(_))));
}

#[test]
fn cube_mesh_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cube.json");
    let m = make_cube_mesh(10, 1.0, 1000.0, Tessellation::SixTet).unwrap().with_ground(Some(0.0));
    save_mesh(&p, &m).unwrap();
    let back = load_mesh(&p, 1.0).unwrap();
    assert_eq!(back.n_vertices(), 1000);
    assert_eq!(back, m);
}

#[test]
fn config_defaults_and_strictness() {
    let c = RunConfig::parse("{}").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.train.base_lr, 1e-3);
    assert_eq!(c.train.volume_weight, 0.1);
    assert_eq!(c.gen.velocity_min, [-2.0; 3]);
    let c = RunConfig::parse(r#"{"material": {"young": 1e5}, "train": {"epochs_finetune": 3}}"#).unwrap();
    assert_eq!(c.material.young, 1e5);
    assert_eq!(c.material.poisson, 0.45);
    assert_eq!(c.train.epochs_finetune, 3);
    assert!(RunConfig::parse(r#"{"train": {"epochs": 3}}"#).is_err());
    assert!(RunConfig::parse(r#"{"extra": {}}"#).is_err());
    let bad = RunConfig::parse(r#"{"train": {"reset_min": 300}}"#).unwrap();
    assert!(matches!(
        bad.train.train_config(nmp_core::train::Stage::Finetune, [0.0, 0.0, -9.81]),
        Err(CliError::Config(_))
    ));
    let snapshot = RunConfig::parse(&c.to_json().to_string()).unwrap();
    assert_eq!(snapshot, c);
}

#[test]
fn epoch_csv_layout() {
    use nmp_core::train::{EpochLog, LossComponents, Stage};
    let log = vec![EpochLog {
        epoch: 0,
        stage: Stage::Constitutive,
        total: 1.5,
        components: LossComponents { force: 1.0, velocity: 0.0, position: 0.5, volume: 0.0 },
        lr: 1e-3,
        reset_interval: 60,
        segments: 8,
        clipped: 2,
    }];
    let text = String::from_utf8(epoch_csv(&log).unwrap()).unwrap();
    assert_eq!(
        text,
        "epoch,stage,total,force,velocity,position,volume,lr,reset_interval,segments,clipped\n0,constitutive,1.5,1,0,0.5,0,0.001,60,8,2\n"
    );
}

#[test]
fn obj_surface_of_a_tet() {
    let m = parse_mesh(UNIT_TET, 1000.0).unwrap();
    let obj = surface_obj(&m, &m.vertices_rest, &m.boundary_faces());
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 4);
    assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 4);
}

proptest! {
    #[test]
    fn trajectory_bytes_roundtrip(n in 1usize..6, frames in 1usize..5, forces: bool, seed in any::<u64>()) {
        let mut t = sample_trajectory(n, frames, forces);
        let mut x = seed;
        for f in &mut t.frames {
            for p in f.state.positions.iter_mut().flatten() {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *p = f64::from_bits(x >> 2);
            }
        }
        let bytes = encode_trajectory(&t).unwrap();
        let back = decode_trajectory(&bytes).unwrap();
        prop_assert_eq!(encode_trajectory(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_bytes_roundtrip(rows in 1usize..5, cols in 1usize..5, vals in proptest::collection::vec(-1e6f64..1e6, 25)) {
        let mut s = ParamStore::new(3);
        s.insert("alignment/head/l0/w", Tensor::from_vec(rows, cols, vals[..rows * cols].to_vec())).unwrap();
        s.set_stat("integration/dv_scale", vals[..3].to_vec());
        let bytes = encode_checkpoint(&s).unwrap();
        prop_assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap(), bytes);
    }
}
