//! File formats: PFM rasters, 8-bit PNG, JSON scenes/cameras/configs and CSV histories.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::edges::{EdgeMask, Provenance};
use crate::error::{Error, Result};
use crate::gaussian::{Camera, GaussianPrimitive, Scene};
use crate::raster::{DepthMap, ImageBuffer};
use crate::train::LossReport;

fn read_pfm_raw(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let token = |r: &mut BufReader<fs::File>| -> Result<String> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        Ok(line.trim().to_string())
    };
    let channels = match token(&mut r)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    };
    let dims = token(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (w, h) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::Format(format!("bad PFM dimensions {dims:?}"))),
    };
    let scale: f64 = token(&mut r)?.parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let n = w * h * channels;
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!("PFM payload has {} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
        })
        .collect();
    // PFM stores rows bottom-to-top
    let mut out = vec![0.0; n];
    let row = w * channels;
    for r in 0..h {
        out[r * row..(r + 1) * row].copy_from_slice(&vals[(h - 1 - r) * row..(h - r) * row]);
    }
    Ok((h, w, channels, out))
}

fn write_pfm_raw(path: &Path, h: usize, w: usize, channels: usize, data: &[f32]) -> Result<()> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut buf = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    let row = w * channels;
    for r in (0..h).rev() {
        for v in &data[r * row..(r + 1) * row] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Writes a depth map as single-channel little-endian PFM (`Pf`), 32-bit floats.
pub fn write_depth_pfm(path: impl AsRef<Path>, d: &DepthMap<f64>) -> Result<()> {
    let data: Vec<f32> = d.data.iter().map(|&v| v as f32).collect();
    write_pfm_raw(path.as_ref(), d.height, d.width, 1, &data)
}

pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<DepthMap<f64>> {
    let (h, w, c, data) = read_pfm_raw(path.as_ref())?;
    if c != 1 {
        return Err(Error::Format("expected single-channel Pf depth".into()));
    }
    DepthMap::from_data(h, w, data.into_iter().map(f64::from).collect())
}

/// Writes a color image as three-channel little-endian PFM (`PF`).
pub fn write_color_pfm(path: impl AsRef<Path>, img: &ImageBuffer<f64>) -> Result<()> {
    let data: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    write_pfm_raw(path.as_ref(), img.height, img.width, 3, &data)
}

pub fn read_color_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer<f64>> {
    let (h, w, c, data) = read_pfm_raw(path.as_ref())?;
    if c != 3 {
        return Err(Error::Format("expected three-channel PF color".into()));
    }
    Ok(ImageBuffer { height: h, width: w, data: data.into_iter().map(f64::from).collect() })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: impl AsRef<Path>, img: &ImageBuffer<f64>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Format("buffer size mismatch".into()))?
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads any 8-bit PNG as RGB in [0, 1].
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(ImageBuffer { height: h as usize, width: w as usize, data })
}

/// Edge masks are written as black/white PNG.
pub fn write_mask_png(path: impl AsRef<Path>, m: &EdgeMask) -> Result<()> {
    let bytes: Vec<u8> = m.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(m.width as u32, m.height as u32, bytes)
        .ok_or_else(|| Error::Format("buffer size mismatch".into()))?
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<EdgeMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| u8::from(b >= 128)).collect();
    let mut m = EdgeMask::from_data(h as usize, w as usize, data)?;
    m.provenance = Provenance::Synthetic;
    Ok(m)
}

/// Depth maps as 8-bit grey PNG for viewing, normalized to the map's own range.
pub fn write_depth_png(path: impl AsRef<Path>, d: &DepthMap<f64>) -> Result<()> {
    let (lo, hi) = d.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = d.data.iter().map(|&v| quantize((v - lo) / span)).collect();
    image::GrayImage::from_raw(d.width as u32, d.height as u32, bytes)
        .ok_or_else(|| Error::Format("buffer size mismatch".into()))?
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PrimitiveFile {
    mu: [f64; 3],
    scale: [f64; 3],
    rotation: [f64; 4],
    opacity: f64,
    color: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    background: [f64; 3],
    primitives: Vec<PrimitiveFile>,
}

pub fn scene_to_json(scene: &Scene<f64>) -> Result<String> {
    let f = SceneFile {
        background: scene.background,
        primitives: scene
            .primitives
            .iter()
            .map(|p| PrimitiveFile { mu: p.mu, scale: p.scale, rotation: p.rotation, opacity: p.opacity, color: p.color })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&f)?)
}

/// Parses and validates a scene file.
pub fn scene_from_json(text: &str) -> Result<Scene<f64>> {
    let f: SceneFile = serde_json::from_str(text)?;
    let scene = Scene::new(
        f.primitives
            .into_iter()
            .map(|p| GaussianPrimitive { mu: p.mu, scale: p.scale, rotation: p.rotation, opacity: p.opacity, color: p.color })
            .collect(),
        f.background,
    );
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: impl AsRef<Path>, scene: &Scene<f64>) -> Result<()> {
    fs::write(path, scene_to_json(scene)?)?;
    Ok(())
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene<f64>> {
    scene_from_json(&fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    /// World-to-camera 4×4, row-major.
    pose: [[f64; 4]; 4],
    focal: [f64; 2],
    principal_point: [f64; 2],
    /// `[height, width]`.
    resolution: [usize; 2],
}

pub fn camera_to_json(cam: &Camera<f64>) -> Result<String> {
    let f = CameraFile {
        pose: cam.pose_matrix(),
        focal: cam.focal,
        principal_point: cam.principal_point,
        resolution: [cam.height, cam.width],
    };
    Ok(serde_json::to_string_pretty(&f)?)
}

pub fn camera_from_json(text: &str) -> Result<Camera<f64>> {
    let f: CameraFile = serde_json::from_str(text)?;
    Camera::from_pose_matrix(&f.pose, f.focal, f.principal_point, (f.resolution[0], f.resolution[1]))
}

pub fn write_camera(path: impl AsRef<Path>, cam: &Camera<f64>) -> Result<()> {
    fs::write(path, camera_to_json(cam)?)?;
    Ok(())
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<Camera<f64>> {
    camera_from_json(&fs::read_to_string(path)?)
}

/// Any serde value as pretty JSON (configs, specs, optimizer moments).
pub fn write_json<V: Serialize>(path: impl AsRef<Path>, value: &V) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<V: DeserializeOwned>(path: impl AsRef<Path>) -> Result<V> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub const HISTORY_HEADER: &str = "iteration,view,L_color,L_depth,L_edge,L_tv,total,PSNR,patch_size";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// CSV with one row per step; absent terms are empty cells. Floats use shortest round-trip formatting.
pub fn history_to_csv(history: &[LossReport<f64>]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{},{:e},{},{},{},{:e},{:e},{}\n",
            r.iteration,
            r.view,
            r.color,
            opt(r.depth),
            opt(r.edge),
            opt(r.tv),
            r.total,
            r.psnr,
            r.patch_size.map(|p| p.to_string()).unwrap_or_default()
        ));
    }
    s
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[LossReport<f64>]) -> Result<()> {
    fs::write(path, history_to_csv(history))?;
    Ok(())
}

/// One view of an on-disk dataset; paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub camera: String,
    /// PNG (8-bit) or PFM (`PF`) color image.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<String>,
    /// Ground-truth depth, when known (synthetic scenes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

/// `views.json`: the train/holdout split of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<ViewEntry>,
    #[serde(default)]
    pub holdout: Vec<ViewEntry>,
}

pub const MANIFEST: &str = "views.json";

/// A view loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedView {
    pub camera: Camera<f64>,
    pub image: ImageBuffer<f64>,
    pub prior: Option<DepthMap<f64>>,
    pub depth: Option<DepthMap<f64>>,
}

fn read_image_any(path: &Path) -> Result<ImageBuffer<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_color_pfm(path),
        _ => read_png(path),
    }
}

/// Writes `scene.json` (ground truth), per-view cameras, PNG images, PFM depth and prior, and `views.json`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &crate::synth::SyntheticScene) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_scene(dir.join("scene.json"), &data.scene)?;
    let mut manifest = DatasetManifest::default();
    for (split, views) in [("train", &data.train), ("holdout", &data.holdout)] {
        for (k, v) in views.iter().enumerate() {
            let stem = format!("{split}_{k:03}");
            let e = ViewEntry {
                camera: format!("{stem}_camera.json"),
                image: format!("{stem}.png"),
                prior: Some(format!("{stem}_prior.pfm")),
                depth: Some(format!("{stem}_depth.pfm")),
            };
            write_camera(dir.join(&e.camera), &v.camera)?;
            write_png(dir.join(&e.image), &v.image)?;
            write_depth_pfm(dir.join(e.prior.as_ref().expect("set")), &v.prior)?;
            write_depth_pfm(dir.join(e.depth.as_ref().expect("set")), &v.depth)?;
            if split == "train" { manifest.train.push(e) } else { manifest.holdout.push(e) }
        }
    }
    write_json(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn load_entry(dir: &Path, e: &ViewEntry) -> Result<LoadedView> {
    let camera = read_camera(dir.join(&e.camera))?;
    let image = read_image_any(&dir.join(&e.image))?;
    if image.resolution() != camera.resolution() {
        return Err(Error::ShapeMismatch { expected: camera.resolution(), got: image.resolution() });
    }
    let prior = e.prior.as_ref().map(|p| read_depth_pfm(dir.join(p))).transpose()?;
    let depth = e.depth.as_ref().map(|p| read_depth_pfm(dir.join(p))).transpose()?;
    Ok(LoadedView { camera, image, prior, depth })
}

/// Reads a dataset directory written by [`write_dataset`] (or by hand): `(train, holdout)`.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Vec<LoadedView>, Vec<LoadedView>)> {
    let dir = dir.as_ref();
    let m: DatasetManifest = read_json(dir.join(MANIFEST))?;
    let train = m.train.iter().map(|e| load_entry(dir, e)).collect::<Result<Vec<_>>>()?;
    let holdout = m.holdout.iter().map(|e| load_entry(dir, e)).collect::<Result<Vec<_>>>()?;
    Ok((train, holdout))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        // PFM stores 32-bit floats; every f32-representable value survives exactly
        let vals: Vec<f64> = [0.0f32, 1.5, -2.25, 1e-30, 3.4e38, 0.1, f32::MIN_POSITIVE, -0.0].iter().map(|&v| f64::from(v)).collect();
        let d = DepthMap::from_data(4, 2, vals).unwrap();
        let p = dir.path().join("d.pfm");
        write_depth_pfm(&p, &d).unwrap();
        assert_eq!(read_depth_pfm(&p).unwrap().data, d.data);
        let img = ImageBuffer::from_fn(2, 3, |r, c, ch| ((r * 7 + c * 3 + ch) as f32 / 11.0) as f64);
        let p = dir.path().join("c.pfm");
        write_color_pfm(&p, &img).unwrap();
        assert_eq!(read_color_pfm(&p).unwrap(), img);
        assert!(read_depth_pfm(&p).is_err());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(4, 5, |r, c, ch| (r * 5 + c) as f64 / 19.0 * (ch as f64 + 1.0) / 3.0);
        let p = dir.path().join("x.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.resolution(), (4, 5));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synth::SyntheticSceneSpec { num_primitives: 20, resolution: (12, 10), ..Default::default() };
        let data = crate::synth::generate_scene(&spec, 1).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let (train, holdout) = read_dataset(dir.path()).unwrap();
        assert_eq!(train.len(), data.train.len());
        assert_eq!(holdout.len(), data.holdout.len());
        assert_eq!(train[0].camera, data.train[0].camera);
        assert_eq!(read_scene(dir.path().join("scene.json")).unwrap(), data.scene);
        let prior = train[0].prior.as_ref().unwrap();
        for (a, b) in prior.data.iter().zip(&data.train[0].prior.data) {
            assert_eq!(*a, (*b as f32) as f64);
        }
    }

    #[test]
    fn scene_and_camera_json_round_trip() {
        let scene = Scene::new(
            vec![GaussianPrimitive { mu: [0.1, 0.2, 0.3], scale: [0.5; 3], rotation: [1.0, 0.0, 0.0, 0.0], opacity: 0.4, color: [0.1, 0.2, 0.3] }],
            [0.0, 0.5, 1.0],
        );
        assert_eq!(scene_from_json(&scene_to_json(&scene).unwrap()).unwrap(), scene);
        let cam = Camera::look_at([1.0, -2.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], [40.0, 41.0], [15.5, 11.5], (24, 32)).unwrap();
        let back = camera_from_json(&camera_to_json(&cam).unwrap()).unwrap();
        assert_eq!(back, cam);
        assert!(scene_from_json(r#"{"background":[0,0,0],"primitives":[{"mu":[0,0,0],"scale":[-1,1,1],"rotation":[1,0,0,0],"opacity":0.5,"color":[0,0,0]}]}"#).is_err());
    }

    #[test]
    fn history_csv_has_blank_absent_terms() {
        let r = LossReport { iteration: 3, view: 1, color: 0.5, depth: None, edge: Some(0.25), tv: None, total: 0.5, psnr: 20.0, patch_size: None };
        let csv = history_to_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), HISTORY_HEADER);
        assert_eq!(lines.next().unwrap(), "3,1,5e-1,,2.5e-1,,5e-1,2e1,");
    }

    #[test]
    fn malformed_pfm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"P6\n1 1\n-1\n\0\0\0\0").unwrap();
        assert!(read_depth_pfm(&p).is_err());
        fs::write(&p, b"Pf\n2 2\n-1\n\0\0\0\0").unwrap();
        assert!(read_depth_pfm(&p).is_err());
    }
}
