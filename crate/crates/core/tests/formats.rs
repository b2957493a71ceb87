use std::collections::BTreeSet;
use std::fs;

use branchflow::aggregate::{GridSpec, VoxelGrid};
use branchflow::cameras::{load_rig, make_rig, rig_to_json, RigKind, RigLayout};
use branchflow::pipeline::quantize_map;
use branchflow::plantgen::{generate_plant, PlantGenConfig, PlantModel};
use branchflow::probmap::{load_mask, load_prob_map, save_mask, save_prob_map, BinaryMask, ProbMap2D};
use branchflow::SkeletonGraph;
use nalgebra::Vector3;
use serde_json::Value;

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn plant_document_fields() {
    let dir = tempfile::tempdir().unwrap();
    let plant = generate_plant(&PlantGenConfig::default(), 6).unwrap();
    let path = dir.path().join("plant.json");
    plant.save_json(&path).unwrap();
    let doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(keys(&doc), set(&["nodes", "edges", "root", "leaves"]));
    assert_eq!(keys(&doc["nodes"][0]), set(&["id", "x", "y", "z", "r"]));
    assert_eq!(doc["edges"][0].as_array().unwrap().len(), 2);
    if let Some(leaf) = doc["leaves"].as_array().unwrap().first() {
        assert_eq!(keys(leaf), set(&["cx", "cy", "cz", "nx", "ny", "nz", "r"]));
    }
    let back = PlantModel::load_json(&path).unwrap();
    assert_eq!(serde_json::to_string(&back.to_doc()).unwrap(), serde_json::to_string(&plant.to_doc()).unwrap());
}

#[test]
fn rig_document_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cams = make_rig(&RigLayout::new(RigKind::ThreeRings, 6, 3.0, Vector3::new(0.0, 0.5, 0.0))).unwrap();
    let text = rig_to_json(&cams).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let first = doc.as_array().map(|a| &a[0]).unwrap_or_else(|| &doc["cameras"][0]);
    assert_eq!(keys(first), set(&["fx", "fy", "cx", "cy", "width", "height", "R", "t"]));
    assert_eq!(first["R"].as_array().unwrap().len(), 9);
    assert_eq!(first["t"].as_array().unwrap().len(), 3);
    // Row-major: the third row of R is the optical axis.
    let r: Vec<f64> = first["R"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let axis = cams[0].view_direction();
    assert_eq!([r[6], r[7], r[8]], [axis.x, axis.y, axis.z]);
    let path = dir.path().join("rig.json");
    fs::write(&path, text).unwrap();
    assert_eq!(load_rig(&path).unwrap(), cams);
}

#[test]
fn probability_maps_are_16_bit_big_endian_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let map = ProbMap2D::new(3, 2, vec![0.0, 1.0, 0.5, 1.0 / 65535.0, 0.25, 0.75]).unwrap();
    let path = dir.path().join("m.pgm");
    save_prob_map(&map, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let header = b"P5\n3 2\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    let raster = &bytes[header.len()..];
    assert_eq!(raster.len(), 12);
    assert_eq!(&raster[..4], &[0, 0, 0xFF, 0xFF]);
    assert_eq!(&raster[4..6], &32768u16.to_be_bytes());
    assert_eq!(&raster[6..8], &[0, 1]);
    assert_eq!(load_prob_map(&path).unwrap(), quantize_map(&map));
}

#[test]
fn masks_are_maxval_one_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let mask = BinaryMask {
        width: 4,
        height: 1,
        bits: vec![true, false, false, true],
    };
    let path = dir.path().join("mask.pgm");
    save_mask(&mask, &path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), b"P5\n4 1\n1\n\x01\x00\x00\x01");
    assert_eq!(load_mask(&path).unwrap(), mask);
}

#[test]
fn grid_dump_is_x_fastest_little_endian() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GridSpec {
        dims: [2, 3, 4],
        origin: [0.1, 0.2, 0.3],
        spacing: 0.5,
    };
    let mut g = VoxelGrid::filled(&spec, 1e-3, 2, 0.0);
    for k in 0..4 {
        for j in 0..3 {
            for i in 0..2 {
                let idx = g.index(i, j, k);
                g.log_values[idx] = -((100 * k + 10 * j + i) as f64) / 100.0;
            }
        }
    }
    g.save(dir.path().join("grid")).unwrap();
    let raw = fs::read(dir.path().join("grid.f32")).unwrap();
    assert_eq!(raw.len(), 24 * 4);
    let at = |n: usize| f32::from_le_bytes(raw[4 * n..4 * n + 4].try_into().unwrap());
    assert_eq!(at(1), -0.01);
    assert_eq!(at(2), -0.10);
    assert_eq!(at(6), -1.00);
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("grid.json")).unwrap()).unwrap();
    assert_eq!(meta["dims"], serde_json::json!([2, 3, 4]));
    assert_eq!(meta["spacing"], 0.5);
    assert_eq!(meta["eps_floor"], 1e-3);
    assert_eq!(meta["origin"][2], 0.3);
}

#[test]
fn skeleton_document_and_ply() {
    let dir = tempfile::tempdir().unwrap();
    let g = SkeletonGraph::from_parents(
        vec![Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.5, 1.5, -0.25)],
        &[None, Some(0), Some(1)],
        0,
    )
    .unwrap();
    let path = dir.path().join("sk.json");
    g.save_json(&path).unwrap();
    let doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(keys(&doc), set(&["nodes", "edges", "root"]));
    assert_eq!(keys(&doc["nodes"][0]), set(&["id", "x", "y", "z"]));
    assert_eq!(SkeletonGraph::load_json(&path).unwrap(), g);

    let ply = g.to_ply();
    let mut lines = ply.lines();
    assert_eq!(lines.next(), Some("ply"));
    assert_eq!(lines.next(), Some("format ascii 1.0"));
    assert!(ply.contains("element vertex 3\n"));
    assert!(ply.contains("element edge 2\n"));
    let body: Vec<&str> = ply.split("end_header\n").nth(1).unwrap().lines().collect();
    assert_eq!(body.len(), 5);
    assert_eq!(body[2].split_whitespace().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>(), vec![0.5, 1.5, -0.25]);
    assert_eq!(body[3], "0 1");
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.pgm");
    fs::write(&p, b"P5\n4 4\n65535\n\x00\x01").unwrap();
    assert!(matches!(load_prob_map(&p), Err(branchflow::Error::Format { .. })));
    fs::write(&p, b"P2\n1 1\n1\n1").unwrap();
    assert!(matches!(load_mask(&p), Err(branchflow::Error::Format { offset: 0, .. })));
    let g = dir.path().join("g");
    VoxelGrid::filled(
        &GridSpec {
            dims: [2, 2, 2],
            origin: [0.0; 3],
            spacing: 1.0,
        },
        1e-4,
        1,
        0.0,
    )
    .save(&g)
    .unwrap();
    fs::write(dir.path().join("g.f32"), [0u8; 12]).unwrap();
    assert!(VoxelGrid::load(&g).is_err());
}
