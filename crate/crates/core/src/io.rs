//! On-disk formats: scene directories, frame PNGs, point-cloud blobs and
//! checkpoints.
//!
//! A scene directory holds `meta.json`, `poses.json`, `frames/frame_%04d.png`,
//! `cloud.bin` (the noisy cloud), `clean_cloud.bin` and `corr.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use autograd::Tensor;
use nalgebra::Vector3;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, ParamStore};
use crate::flow::FlowConfig;
use crate::geometry::{CameraIntrinsics, CameraPose, ConfidentPointCloud};
use crate::latentcodec::{LatentVideo, Video};
use crate::optim::Adam;
use crate::pipeline::{AblationFlags, Variant};
use crate::scenegen::{Correspondence, SceneSample, SceneSpec};

pub const CLOUD_MAGIC: &[u8; 8] = b"CFCLOUD1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), msg: msg.into() }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes to a sibling temp file and renames, so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let tmp = path.with_extension("tmp");
    write_bytes(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

/// 8-bit RGB; values are clamped to `[0, 1]` and rounded.
pub fn write_png(path: &Path, rgb: &[f32], height: usize, width: usize) -> Result<(), IoError> {
    assert_eq!(rgb.len(), height * width * 3, "write_png: buffer size");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut w = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| format_err(path, e.to_string()))?;
    w.finish().map_err(|e| format_err(path, e.to_string()))
}

/// Returns `(rgb, height, width)` with values `k/255`.
pub fn read_png(path: &Path) -> Result<(Vec<f32>, usize, usize), IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| format_err(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((data, info.height as usize, info.width as usize))
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.png"))
}

pub fn write_video(dir: &Path, video: &Video) -> Result<(), IoError> {
    for t in 0..video.frames {
        write_png(&frame_path(dir, t), video.frame(t), video.height, video.width)?;
    }
    Ok(())
}

pub fn read_video(dir: &Path, frames: usize) -> Result<Video, IoError> {
    let mut data = Vec::new();
    let mut dims = None;
    for t in 0..frames {
        let path = frame_path(dir, t);
        let (rgb, h, w) = read_png(&path)?;
        if dims.is_some_and(|d| d != (h, w)) {
            return Err(format_err(&path, "frame size differs from frame 0"));
        }
        dims = Some((h, w));
        data.extend(rgb);
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Video::new(frames, h, w, data).map_err(|e| format_err(dir, e.to_string()))
}

/// 16-byte header (magic, u64 count) then `x y z r g b conf` as f32 LE.
pub fn encode_cloud(cloud: &ConfidentPointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 28 * cloud.len());
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for ((p, c), &w) in cloud.positions().iter().zip(cloud.colors()).zip(cloud.confidence()) {
        for v in [p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2], w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<ConfidentPointCloud, IoError> {
    if bytes.len() < 16 || &bytes[..8] != CLOUD_MAGIC {
        return Err(format_err(path, "bad point cloud header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 28 * n {
        return Err(format_err(path, format!("expected {n} records, file has {} bytes", bytes.len())));
    }
    let (mut pos, mut col, mut conf) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for rec in bytes[16..].chunks_exact(28) {
        let f: Vec<f32> = rec.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        pos.push(Vector3::new(f[0] as f64, f[1] as f64, f[2] as f64));
        col.push([f[3], f[4], f[5]]);
        conf.push(f[6]);
    }
    ConfidentPointCloud::new(pos, col, conf).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_cloud(path: &Path, cloud: &ConfidentPointCloud) -> Result<(), IoError> {
    write_bytes(path, &encode_cloud(cloud))
}

pub fn read_cloud(path: &Path) -> Result<ConfidentPointCloud, IoError> {
    decode_cloud(&fs::read(path).map_err(io_err(path))?, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
    pub sigma: f64,
    pub spec: SceneSpec,
}

pub fn write_scene(dir: &Path, scene: &SceneSample) -> Result<(), IoError> {
    let meta = SceneMeta {
        height: scene.frames.height,
        width: scene.frames.width,
        num_frames: scene.frames.frames,
        intrinsics: scene.intrinsics,
        seed: scene.spec.seed,
        sigma: scene.spec.depth_noise_sigma,
        spec: scene.spec.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    let poses: Vec<[[f64; 4]; 4]> = scene.poses.iter().map(|p| p.to_matrix()).collect();
    write_json(&dir.join("poses.json"), &poses)?;
    write_video(&dir.join("frames"), &scene.frames)?;
    write_cloud(&dir.join("cloud.bin"), &scene.noisy_cloud)?;
    write_cloud(&dir.join("clean_cloud.bin"), &scene.clean_cloud)?;
    write_json(&dir.join("corr.json"), &scene.correspondences)
}

pub fn read_scene(dir: &Path) -> Result<SceneSample, IoError> {
    let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
    let poses_path = dir.join("poses.json");
    let mats: Vec<[[f64; 4]; 4]> = read_json(&poses_path)?;
    let poses = mats
        .iter()
        .map(|m| CameraPose::from_matrix(m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(&poses_path, e.to_string()))?;
    if poses.len() != meta.num_frames {
        return Err(format_err(&poses_path, format!("{} poses for {} frames", poses.len(), meta.num_frames)));
    }
    let frames = read_video(&dir.join("frames"), meta.num_frames)?;
    if (frames.height, frames.width) != (meta.height, meta.width) {
        return Err(format_err(dir, "frame size does not match meta.json"));
    }
    let correspondences: Vec<Correspondence> = read_json(&dir.join("corr.json"))?;
    Ok(SceneSample {
        spec: meta.spec,
        frames,
        poses,
        intrinsics: meta.intrinsics,
        clean_cloud: read_cloud(&dir.join("clean_cloud.bin"))?,
        noisy_cloud: read_cloud(&dir.join("cloud.bin"))?,
        correspondences,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub sigma: f64,
    pub noiseless: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base: SceneSpec,
    pub scenes: Vec<ManifestEntry>,
}

pub fn read_manifest(data_dir: &Path) -> Result<Manifest, IoError> {
    read_json(&data_dir.join(MANIFEST))
}

/// Parameters, optimizer state and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub variant: Variant,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Adam,
}

fn f32_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    /// A safetensors archive: `param.*`, `adam.m.*`, `adam.v.*` tensors and a
    /// JSON metadata header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in self.params.iter() {
            owned.push((format!("param.{name}"), t.shape().to_vec(), f32_bytes(t)));
        }
        for (prefix, map) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for (name, t) in map {
                owned.push((format!("{prefix}.{name}"), t.shape().to_vec(), f32_bytes(t)));
            }
        }
        let views: Vec<(String, TensorView)> = owned
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).expect("tensor view")))
            .collect();
        let meta = CheckpointMeta {
            model: self.model.clone(),
            flow: self.flow.clone(),
            variant: self.variant,
            ablation_flags: self.variant.flags(),
            step: self.step,
            adam: AdamMeta { lr: self.adam.lr, beta1: self.adam.beta1, beta2: self.adam.beta2, eps: self.adam.eps, step: self.adam.step },
        };
        // a single key keeps the header byte-stable
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).unwrap())]);
        safetensors::serialize(views, Some(meta)).expect("serialize checkpoint")
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, IoError> {
        let bad = |m: String| format_err(path, m);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| bad("missing metadata".into()))?;
        let raw = meta.get(META_KEY).ok_or_else(|| bad(format!("missing metadata key {META_KEY}")))?;
        let CheckpointMeta { model, flow, variant, ablation_flags, step, adam: am } =
            serde_json::from_str(raw).map_err(|e| bad(format!("{META_KEY}: {e}")))?;
        if ablation_flags != variant.flags() {
            return Err(bad(format!("ablation flags do not match variant {variant}")));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let (mut params, mut m, mut v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{name}: expected F32")));
            }
            let data: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let t = Tensor::new(view.shape(), data);
            if let Some(n) = name.strip_prefix("param.") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.m.") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                v.insert(n.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor {name}")));
            }
        }
        let adam = Adam { lr: am.lr, beta1: am.beta1, beta2: am.beta2, eps: am.eps, step: am.step, m, v };
        Ok(Checkpoint { model, flow, variant, step, params: ParamStore::from_map(params), adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?, path)
    }
}

const META_KEY: &str = "confflow";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    flow: FlowConfig,
    variant: Variant,
    ablation_flags: AblationFlags,
    step: u64,
    adam: AdamMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatentMeta {
    patch: usize,
    source: [usize; 3],
}

/// Latents as a single-tensor safetensors file.
pub fn write_latent(path: &Path, z: &LatentVideo) -> Result<(), IoError> {
    let bytes: Vec<u8> = z.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let view = TensorView::new(Dtype::F32, z.shape().to_vec(), &bytes).expect("tensor view");
    let info = LatentMeta { patch: z.patch, source: z.source };
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&info).unwrap())]);
    let out = safetensors::serialize([("latent", view)], Some(meta)).expect("serialize latent");
    write_bytes(path, &out)
}

pub fn read_latent(path: &Path) -> Result<LatentVideo, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: String| format_err(path, m);
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let raw = meta.get(META_KEY).ok_or_else(|| bad(format!("missing metadata key {META_KEY}")))?;
    let LatentMeta { patch, source } = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let view = st.tensor("latent").map_err(|e| bad(e.to_string()))?;
    let s = view.shape();
    if s.len() != 4 {
        return Err(bad(format!("expected rank 4, got {s:?}")));
    }
    let data: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let mut z = LatentVideo::zeros(s[0], s[1], s[2], s[3], patch);
    z.source = source;
    z.data = data;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::KalmanDit;
    use crate::scenegen::make_scene;

    fn small_scene(seed: u64) -> SceneSample {
        make_scene(&SceneSpec { seed, num_points: 1500, height: 16, width: 16, num_frames: 5, ..Default::default() }).unwrap()
    }

    #[test]
    fn scene_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small_scene(1);
        write_scene(dir.path(), &scene).unwrap();
        assert_eq!(read_scene(dir.path()).unwrap(), scene);
        let bytes = fs::read(dir.path().join("cloud.bin")).unwrap();
        assert_eq!(&bytes[..8], CLOUD_MAGIC);
        assert_eq!(bytes.len(), 16 + 28 * scene.noisy_cloud.len());
    }

    #[test]
    fn corrupt_cloud_is_rejected() {
        let scene = small_scene(2);
        let mut bytes = encode_cloud(&scene.noisy_cloud);
        bytes.pop();
        assert!(decode_cloud(&bytes, Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(decode_cloud(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn png_round_trip_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<f32> = (0..4 * 5 * 3).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let p = dir.path().join("a.png");
        write_png(&p, &rgb, 4, 5).unwrap();
        assert_eq!(read_png(&p).unwrap(), (rgb, 4, 5));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig { embed_dim: 16, num_heads: 2, num_backbone_blocks: 2, num_kalman_blocks: 1, ..ModelConfig::for_video(3, 8, 8, 2) };
        let model = KalmanDit::new(cfg.clone()).unwrap();
        let params = model.init_params(3);
        let mut adam = Adam::new(1e-3);
        adam.step = 7;
        for (n, t) in params.iter().take(3) {
            adam.m.insert(n.clone(), t.clone());
            adam.v.insert(n.clone(), t.clone());
        }
        let ck = Checkpoint { model: cfg, flow: FlowConfig::default(), variant: Variant::C, step: 42, params, adam };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.safetensors");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert_eq!(ck.to_bytes(), ck.clone().to_bytes());
        assert!(Checkpoint::from_bytes(&ck.to_bytes()[..100], &p).is_err());
    }

    #[test]
    fn latent_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = LatentVideo::zeros(3, 12, 4, 4, 2);
        z.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32).sin());
        let p = dir.path().join("z.safetensors");
        write_latent(&p, &z).unwrap();
        assert_eq!(read_latent(&p).unwrap(), z);
    }
}
