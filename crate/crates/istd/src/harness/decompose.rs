//! Per-stage decomposition dumps: for every stage k the four planes
//! (background, target, noise, reconstruction) are written both as raw
//! 32-bit little-endian planes with a 16-byte header (8-byte magic + u32
//! height + u32 width) and as min-max scaled 8-bit grayscale PNGs, plus a
//! manifest mapping files to (stage, component).

use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::harness::eval::plane_to_batch;
use crate::model::{Phase, UnfoldedNet};
use crate::nn::{ParamStore, Tape};

pub const RAW_MAGIC: &[u8; 8] = b"ISTDPLN\0";

/// Raw plane format: 16-byte header (magic, height, width), then row-major
/// f32 little-endian samples.
pub fn write_raw_plane(path: &Path, plane: &Array2<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(RAW_MAGIC)?;
    f.write_all(&(plane.dim().0 as u32).to_le_bytes())?;
    f.write_all(&(plane.dim().1 as u32).to_le_bytes())?;
    for v in plane.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_raw_plane(path: &Path) -> Result<Array2<f32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != RAW_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a raw plane file",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let h = u32::from_le_bytes(b4) as usize;
    f.read_exact(&mut b4)?;
    let w = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        f.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Array2::from_shape_vec((h, w), data).map_err(|e| Error::Data(format!("bad plane: {e}")))
}

/// Min-max scale to 8 bits; a constant plane maps to all zeros.
pub fn scale_to_u8(plane: &Array2<f32>) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    let (h, w) = plane.dim();
    let min = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if max > min {
                ((plane[(y, x)] - min) / (max - min) * 255.0).round() as u8
            } else {
                0
            };
            out.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub file: String,
    pub stage: usize,
    pub component: &'static str,
    pub format: &'static str,
}

const COMPONENTS: [&str; 4] = ["background", "target", "noise", "recon"];

/// Run the model on one image with trace capture and dump every stage plane.
/// Returns the manifest, which is also written as `manifest.csv`.
pub fn decompose(
    net: &UnfoldedNet,
    store: &ParamStore<f32>,
    image: &Array2<f64>,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(out_dir)?;
    let mut tape = Tape::<f32>::new();
    let input = tape.leaf(plane_to_batch(image));
    let mut bn_updates = Vec::new();
    let out = net.forward(&mut tape, store, input, Phase::Eval, true, &mut bn_updates)?;
    let trace = out.trace.expect("trace requested");
    let (h, w) = image.dim();
    let mut manifest = Vec::new();
    for stage in trace {
        let planes = [
            &stage.background,
            &stage.target,
            &stage.noise,
            &stage.recon,
        ];
        for (component, plane4) in COMPONENTS.iter().zip(planes) {
            let plane = Array2::from_shape_fn((h, w), |(y, x)| plane4[(0, 0, y, x)]);
            let base = format!("stage{:02}_{component}", stage.stage_index);
            let raw_name = format!("{base}.raw");
            write_raw_plane(&out_dir.join(&raw_name), &plane)?;
            manifest.push(ManifestEntry {
                file: raw_name,
                stage: stage.stage_index,
                component,
                format: "raw_f32le",
            });
            let png_name = format!("{base}.png");
            scale_to_u8(&plane).save(out_dir.join(&png_name))?;
            manifest.push(ManifestEntry {
                file: png_name,
                stage: stage.stage_index,
                component,
                format: "png_u8_minmax",
            });
        }
    }
    let mut text = String::from("file,stage,component,format\n");
    for e in &manifest {
        text.push_str(&format!("{},{},{},{}\n", e.file, e.stage, e.component, e.format));
    }
    std::fs::write(out_dir.join("manifest.csv"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn raw_plane_roundtrips() {
        let plane = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f32 * 0.25 - 3.0);
        let path = std::env::temp_dir().join(format!("istd-plane-{}.raw", std::process::id()));
        write_raw_plane(&path, &plane).unwrap();
        let back = read_raw_plane(&path).unwrap();
        assert_eq!(plane, back);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 5 * 7 * 4);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn constant_plane_scales_to_black() {
        let plane = Array2::from_elem((4, 4), 2.5f32);
        let img = scale_to_u8(&plane);
        assert!(img.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn dump_counts_match_stage_count() {
        let model = ModelConfig {
            stages: 2,
            bottleneck_channels: 2,
            channels: 4,
            n_fill: 0,
            recon_layers: 1,
            se_ratio: 2,
            ..ModelConfig::default()
        };
        let net = UnfoldedNet::new(model).unwrap();
        let store = net.init_params::<f32>(3).unwrap();
        let image = Array2::from_elem((16, 16), 0.25f64);
        let dir = std::env::temp_dir().join(format!("istd-decomp-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let manifest = decompose(&net, &store, &image, &dir).unwrap();
        // 2 stages x 4 components x (raw + png)
        assert_eq!(manifest.len(), 16);
        assert!(dir.join("manifest.csv").is_file());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn zero_branch_dump_reproduces_the_input_background() {
        let model = ModelConfig {
            stages: 1,
            bottleneck_channels: 2,
            channels: 4,
            n_fill: 0,
            recon_layers: 1,
            se_ratio: 2,
            ..ModelConfig::default()
        };
        let net = UnfoldedNet::new(model).unwrap();
        // fresh init has zero projections: B1 = D0 exactly
        let store = net.init_params::<f32>(5).unwrap();
        let image = Array2::from_shape_fn((12, 12), |(y, x)| y as f64 * 0.05 + x as f64 * 0.01);
        let dir = std::env::temp_dir().join(format!("istd-decomp0-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        decompose(&net, &store, &image, &dir).unwrap();
        let b1 = read_raw_plane(&dir.join("stage01_background.raw")).unwrap();
        for (a, e) in b1.iter().zip(image.iter()) {
            assert_eq!(*a, *e as f32);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
