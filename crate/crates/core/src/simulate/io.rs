//! Dataset files: an MRC image stack, a per-image metadata CSV and a JSON
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::Rotation;
use crate::phantom::mrc::MrcMap;

use super::{CtfParams, DatasetManifest, ParticleDataset, Pose};

pub const STACK_FILE: &str = "particles.mrcs";
pub const METADATA_FILE: &str = "metadata.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    index: usize,
    r00: f64,
    r01: f64,
    r02: f64,
    r10: f64,
    r11: f64,
    r12: f64,
    r20: f64,
    r21: f64,
    r22: f64,
    tx: f64,
    ty: f64,
    defocus_u: f64,
    defocus_v: f64,
    astig_angle: f64,
    voltage: f64,
    cs: f64,
    amp_contrast: f64,
    phase_shift: f64,
    b_factor: f64,
    structure_id: usize,
}

pub fn write_metadata(ds: &ParticleDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for i in 0..ds.len() {
        let r = ds.poses[i].rotation.0;
        let c = &ds.ctfs[i];
        w.serialize(Row {
            index: i,
            r00: r[0][0],
            r01: r[0][1],
            r02: r[0][2],
            r10: r[1][0],
            r11: r[1][1],
            r12: r[1][2],
            r20: r[2][0],
            r21: r[2][1],
            r22: r[2][2],
            tx: ds.poses[i].shift.0,
            ty: ds.poses[i].shift.1,
            defocus_u: c.defocus_u,
            defocus_v: c.defocus_v,
            astig_angle: c.astig_angle,
            voltage: c.voltage,
            cs: c.cs,
            amp_contrast: c.amp_contrast,
            phase_shift: c.phase_shift,
            b_factor: c.b_factor,
            structure_id: ds.structure_ids[i],
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Reads poses, CTFs and labels in file order.
pub fn read_metadata(path: &Path) -> Result<(Vec<Pose>, Vec<CtfParams>, Vec<usize>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let (mut poses, mut ctfs, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row?;
        if row.index != i {
            return Err(Error::Format {
                field: "index",
                detail: format!("row {i} has index {}", row.index),
            });
        }
        poses.push(Pose {
            rotation: Rotation([
                [row.r00, row.r01, row.r02],
                [row.r10, row.r11, row.r12],
                [row.r20, row.r21, row.r22],
            ]),
            shift: (row.tx, row.ty),
        });
        ctfs.push(CtfParams {
            defocus_u: row.defocus_u,
            defocus_v: row.defocus_v,
            astig_angle: row.astig_angle,
            voltage: row.voltage,
            cs: row.cs,
            amp_contrast: row.amp_contrast,
            phase_shift: row.phase_shift,
            b_factor: row.b_factor,
        });
        ids.push(row.structure_id);
    }
    Ok((poses, ctfs, ids))
}

/// Writes stack, metadata and manifest into `dir` and returns the manifest path.
///
/// Manifest file references are relative to `dir`; `volumes` lists ground
/// truth maps the caller wrote alongside.
pub fn write_dataset(ds: &ParticleDataset, dir: &Path, volumes: &[String]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stack = MrcMap {
        nx: ds.size,
        ny: ds.size,
        nz: ds.len(),
        voxel_size: [ds.pixel_size as f32; 3],
        is_stack: true,
        data: ds.images.clone(),
    };
    stack.write(&dir.join(STACK_FILE))?;
    write_metadata(ds, &dir.join(METADATA_FILE))?;
    let mut manifest = ds.manifest.clone();
    manifest.files.stack = STACK_FILE.into();
    manifest.files.metadata = METADATA_FILE.into();
    manifest.files.volumes = volumes.to_vec();
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Resolves a dataset directory or manifest path to the manifest path.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn read_manifest(p: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(p);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a dataset from its directory or manifest path.
pub fn read_dataset(p: &Path) -> Result<ParticleDataset> {
    let path = manifest_path(p);
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = read_manifest(&path)?;
    let stack = MrcMap::read(&base.join(&manifest.files.stack))?;
    let (poses, ctfs, structure_ids) = read_metadata(&base.join(&manifest.files.metadata))?;
    if stack.nx != manifest.size || stack.ny != manifest.size || stack.nz != poses.len() {
        return Err(Error::Format {
            field: "NX/NY/NZ",
            detail: format!(
                "stack is {}x{}x{}, manifest expects {}x{} with {} images",
                stack.nx,
                stack.ny,
                stack.nz,
                manifest.size,
                manifest.size,
                poses.len()
            ),
        });
    }
    let ds = ParticleDataset {
        size: manifest.size,
        pixel_size: manifest.config.pixel_size,
        snr: manifest.config.snr,
        images: stack.data,
        poses,
        ctfs,
        structure_ids,
        manifest,
    };
    ds.validate()?;
    Ok(ds)
}
