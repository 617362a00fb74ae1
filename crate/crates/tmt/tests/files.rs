//! Cube files and checkpoints through the library API.

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use tmt::checkpoint;
use tmt::cubes::{self, CubeMeta};
use tmt::AppError;
use tmt_core::data::Frames;
use tmt_core::model::{InputGeometry, ModelConfig, TmtModel};
use tmt_core::pooling::FeatureCube;
use tmt_core::Tensor;

fn cubes_of(seed: u64, t: usize, h: usize, w: usize, c: usize) -> [FeatureCube; 3] {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    [0, 1, 2].map(|_| FeatureCube::new(Tensor::uniform(&[t, h * w, c], 2.0, &mut r), h, w).unwrap())
}

#[test]
fn cube_files_round_trip_with_their_labels() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("a.tmtc");
    let cubes = cubes_of(1, 3, 2, 3, 4);
    let meta = CubeMeta {
        identity: 5,
        camera: 2,
        source: "unit".into(),
    };
    cubes::write_cube_file(&path, &cubes, &meta).unwrap();
    let (back, m) = cubes::read_cube_file(&path).unwrap();
    assert_eq!(m, meta);
    for (a, b) in cubes.iter().zip(&back) {
        assert_eq!((b.height(), b.width()), (2, 3));
        assert!(a.values().max_abs_diff(b.values()) < 1e-6);
    }
}

#[test]
fn directories_load_in_name_order() {
    let tmp = TempDir::new().unwrap();
    for (name, id) in [("b", 1), ("a", 0), ("c", 2)] {
        let meta = CubeMeta {
            identity: id,
            camera: 0,
            source: String::new(),
        };
        cubes::write_cube_file(&tmp.path().join(format!("{name}.tmtc")), &cubes_of(id as u64, 2, 1, 1, 2), &meta).unwrap();
    }
    fs::write(tmp.path().join("notes.txt"), "ignored").unwrap();
    let ts = cubes::load_tracklets(tmp.path()).unwrap();
    assert_eq!(ts.iter().map(|t| t.identity).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(ts.iter().all(|t| matches!(t.frames, Frames::Cubes(_))));
}

#[test]
fn damaged_cube_files_are_format_errors() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("x.tmtc");
    let meta = CubeMeta {
        identity: 0,
        camera: 0,
        source: String::new(),
    };
    cubes::write_cube_file(&path, &cubes_of(2, 2, 2, 2, 2), &meta).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(cubes::read_cube_file(&path), Err(AppError::Format { .. })));

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    fs::write(&path, &bad).unwrap();
    let err = cubes::read_cube_file(&path).unwrap_err();
    assert!(matches!(err, AppError::Format { .. }));
    assert!(err.to_string().contains("x.tmtc"));

    fs::write(&path, &bytes).unwrap();
    fs::write(cubes::sidecar_path(&path), "identity = \"zero\"\n").unwrap();
    assert!(matches!(cubes::read_cube_file(&path), Err(AppError::Format { .. })));
    fs::remove_file(cubes::sidecar_path(&path)).unwrap();
    assert!(matches!(cubes::read_cube_file(&path), Err(AppError::Io { .. })));
}

#[test]
fn checkpoints_restore_parameters_and_identity_tables() {
    let tmp = TempDir::new().unwrap();
    let cfg = ModelConfig {
        frames: 2,
        channels: 8,
        depth_self: 1,
        depth_cross: 1,
        frame_oim: true,
        input: InputGeometry::Images { height: 8, width: 4 },
        ..ModelConfig::default()
    };
    let model = TmtModel::new(cfg, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let path = tmp.path().join("m.tmtk");
    checkpoint::save(&path, &model, 3).unwrap();
    let (back, header) = checkpoint::load(&path).unwrap();
    assert_eq!(header.epochs_trained, 3);
    assert_eq!(back.config(), model.config());
    assert_eq!(back.num_identities(), 4);
    assert!(header.manifest.iter().any(|m| m.name == "oim.frame"));
    for id in model.tape.ids() {
        let (a, b) = (model.tape.get(id), back.tape.get(id));
        assert!(a.max_abs_diff(b) <= 1e-6 * (1.0 + a.norm()), "{}", model.tape.name(id));
    }
    for ((n, a), (_, b)) in model.oim.named().iter().zip(back.oim.named()) {
        assert!(a.lookup().max_abs_diff(b.lookup()) < 1e-6, "{n}");
    }

    let bytes = fs::read(&path).unwrap();
    for cut in [0, 5, 9, 40, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(checkpoint::load(&path), Err(AppError::Format { .. })), "cut at {cut}");
    }
}
