use std::rc::Rc;

use autograd::{Graph, NodeId, Real, Tensor};

use super::params::{Init, ParamSpec, ParamStore};
use super::tokens::{patchify, unpatchify_index};
use super::{ControlMode, ModelConfig, ModelError};
use crate::geometry::PluckerImage;
use crate::latentcodec::LatentVideo;

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;
const INIT_STD: f64 = 0.02;

/// Per-scene conditioning signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Clean latent; only the conditioned frames are read.
    pub endpoints: LatentVideo,
    /// Projected point-cloud latent `ẑ_pc`.
    pub point_cloud: LatentVideo,
    /// Plücker planes per frame, `T×6×H×W` at pixel resolution.
    pub rays: LatentVideo,
}

impl Conditioning {
    pub fn new(endpoints: LatentVideo, point_cloud: LatentVideo, plucker: &[PluckerImage]) -> Self {
        let (h, w) = (plucker[0].height, plucker[0].width);
        let mut rays = LatentVideo::zeros(plucker.len(), 6, h, w, 1);
        for (t, p) in plucker.iter().enumerate() {
            rays.frame_mut(t).copy_from_slice(&p.channels());
        }
        Conditioning { endpoints, point_cloud, rays }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub z_t: &'a LatentVideo,
    pub t: f64,
    pub cond: &'a Conditioning,
}

/// Flattened token features for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    /// `[z_t | endpoint latent | endpoint mask]` per token.
    pub video: Vec<f32>,
    pub camera: Vec<f32>,
    pub point_cloud: Vec<f32>,
}

/// Token streams threaded through one Kalman block.
#[derive(Clone, Copy, Debug)]
pub struct KalmanBlockState {
    pub z: NodeId,
    pub z_pc: NodeId,
    pub cam: NodeId,
}

#[derive(Clone, Debug)]
pub struct KalmanDit {
    cfg: ModelConfig,
}

fn p<F: Real>(g: &mut Graph<F>, params: &ParamStore<F>, name: &str) -> Result<NodeId, ModelError> {
    if let Some(id) = g.param_id(name) {
        return Ok(id);
    }
    let t = params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    Ok(g.param(name, t))
}

fn linear<F: Real>(g: &mut Graph<F>, params: &ParamStore<F>, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
    let w = p(g, params, &format!("{prefix}.weight"))?;
    let b = p(g, params, &format!("{prefix}.bias"))?;
    Ok(g.linear(x, w, Some(b)))
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, init: Init) {
    out.push(ParamSpec { name: format!("{prefix}.weight"), shape: vec![fan_in, fan_out], init });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![fan_out], init: Init::Zeros });
}

fn dit_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, mlp: usize) {
    linear_specs(out, &format!("{prefix}.adaln"), d, 6 * d, Init::Zeros);
    for n in ["q", "k", "v", "o"] {
        linear_specs(out, &format!("{prefix}.attn.{n}"), d, d, Init::XavierUniform);
    }
    linear_specs(out, &format!("{prefix}.mlp.fc1"), d, mlp * d, Init::XavierUniform);
    linear_specs(out, &format!("{prefix}.mlp.fc2"), mlp * d, d, Init::XavierUniform);
}

/// `[cos(t·f_i), sin(t·f_i)]` with `f_i = 10000^(−i/half)`, `t` scaled by 1000.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let ts = t * TIME_SCALE;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    freqs.iter().map(|f| (ts * f).cos()).chain(freqs.iter().map(|f| (ts * f).sin())).collect()
}

impl KalmanDit {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(KalmanDit { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn uses_attention_control(&self) -> bool {
        self.cfg.control != ControlMode::Additive
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.cfg;
        let d = c.embed_dim;
        let (gh, gw) = c.grid();
        let mut s = Vec::new();
        linear_specs(&mut s, "time.fc1", d, d, Init::Normal(INIT_STD));
        linear_specs(&mut s, "time.fc2", d, d, Init::Normal(INIT_STD));
        linear_specs(&mut s, "embed.video", c.video_features(), d, Init::XavierUniform);
        linear_specs(&mut s, "embed.cam", c.camera_features(), d, Init::XavierUniform);
        linear_specs(&mut s, "embed.pc", c.latent_features(), d, Init::XavierUniform);
        s.push(ParamSpec { name: "pos.frame".into(), shape: vec![c.frames, d], init: Init::Normal(INIT_STD) });
        s.push(ParamSpec { name: "pos.row".into(), shape: vec![gh, d], init: Init::Normal(INIT_STD) });
        s.push(ParamSpec { name: "pos.col".into(), shape: vec![gw, d], init: Init::Normal(INIT_STD) });
        for i in 0..c.num_backbone_blocks {
            dit_specs(&mut s, &format!("blocks.{i}"), d, c.mlp_ratio);
        }
        for k in 0..c.num_kalman_blocks {
            if self.uses_attention_control() {
                for n in ["q", "k", "v", "o"] {
                    linear_specs(&mut s, &format!("kalman.{k}.predict.{n}"), d, d, Init::XavierUniform);
                }
            }
            linear_specs(&mut s, &format!("kalman.{k}.predict.zero"), d, d, Init::Zeros);
            if c.update {
                for j in 0..c.diff_blocks_per_update {
                    dit_specs(&mut s, &format!("kalman.{k}.update.diff.{j}"), d, c.mlp_ratio);
                }
                linear_specs(&mut s, &format!("kalman.{k}.update.zero"), d, d, Init::Zeros);
            }
            if k + 1 < c.num_kalman_blocks {
                dit_specs(&mut s, &format!("kalman.{k}.pc_step"), d, c.mlp_ratio);
            }
        }
        linear_specs(&mut s, "final.adaln", d, 2 * d, Init::Zeros);
        linear_specs(&mut s, "final.out", d, c.latent_features(), Init::Zeros);
        s
    }

    pub fn init_params<F: Real>(&self, seed: u64) -> ParamStore<F> {
        ParamStore::init(&self.param_specs(), seed)
    }

    fn check_latent(&self, what: &str, z: &LatentVideo, channels: usize, h: usize, w: usize) -> Result<(), ModelError> {
        let want = [self.cfg.frames, channels, h, w];
        if z.shape() != want {
            return Err(ModelError::Shape(format!("{what}: {:?}, expected {want:?}", z.shape())));
        }
        if !z.all_finite() {
            return Err(ModelError::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Validates one input and lays it out as token features.
    pub fn token_features(&self, input: &ModelInput) -> Result<TokenFeatures, ModelError> {
        let c = &self.cfg;
        if !(0.0..=1.0).contains(&input.t) {
            return Err(ModelError::Timestep(input.t));
        }
        let (ch, h, w) = (c.latent_channels, c.latent_height, c.latent_width);
        self.check_latent("z_t", input.z_t, ch, h, w)?;
        self.check_latent("endpoint latent", &input.cond.endpoints, ch, h, w)?;
        self.check_latent("point-cloud latent", &input.cond.point_cloud, ch, h, w)?;
        self.check_latent("camera rays", &input.cond.rays, 6, h * c.patch_size, w * c.patch_size)?;

        let plane = h * w;
        let (t_count, p) = (c.frames, c.token_patch);
        let mut video = vec![0.0f32; t_count * (2 * ch + 1) * plane];
        let conditioned = c.conditioned_frames();
        for t in 0..t_count {
            let dst = &mut video[t * (2 * ch + 1) * plane..(t + 1) * (2 * ch + 1) * plane];
            dst[..ch * plane].copy_from_slice(input.z_t.frame(t));
            if conditioned.contains(&t) {
                dst[ch * plane..2 * ch * plane].copy_from_slice(input.cond.endpoints.frame(t));
                dst[2 * ch * plane..].fill(1.0);
            }
        }
        Ok(TokenFeatures {
            video: patchify(&video, t_count, 2 * ch + 1, h, w, p),
            camera: patchify(&input.cond.rays.data, t_count, 6, h * c.patch_size, w * c.patch_size, p * c.patch_size),
            point_cloud: patchify(&input.cond.point_cloud.data, t_count, ch, h, w, p),
        })
    }

    /// Camera and point-cloud token streams, `[B, L, D]` each.
    pub fn embed_conditioning<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        feats: &[TokenFeatures],
    ) -> Result<(NodeId, NodeId), ModelError> {
        let (b, l) = (feats.len(), self.cfg.num_tokens());
        let cam: Vec<f32> = feats.iter().flat_map(|f| f.camera.iter().copied()).collect();
        let pc: Vec<f32> = feats.iter().flat_map(|f| f.point_cloud.iter().copied()).collect();
        let cam = g.constant(Tensor::<f32>::new(&[b, l, self.cfg.camera_features()], cam).cast());
        let pc = g.constant(Tensor::<f32>::new(&[b, l, self.cfg.latent_features()], pc).cast());
        Ok((linear(g, params, "embed.cam", cam)?, linear(g, params, "embed.pc", pc)?))
    }

    /// `c = fc2(silu(fc1(sinusoid(t))))`, returned as `silu(c)` `[B, D]`,
    /// the form every modulation consumes.
    pub fn timestep_embedding<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        t: &[f64],
    ) -> Result<NodeId, ModelError> {
        let d = self.cfg.embed_dim;
        let data: Vec<f64> = t.iter().flat_map(|&t| sinusoidal(t, d)).collect();
        let x = g.constant(Tensor::from_f64(&[t.len(), d], &data));
        let h = linear(g, params, "time.fc1", x)?;
        let h = g.silu(h);
        let c = linear(g, params, "time.fc2", h)?;
        Ok(g.silu(c))
    }

    /// adaLN-Zero transformer block.
    pub fn dit_block<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        prefix: &str,
        x: NodeId,
        cond: NodeId,
    ) -> Result<NodeId, ModelError> {
        let d = self.cfg.embed_dim;
        let m = linear(g, params, &format!("{prefix}.adaln"), cond)?;
        let h = g.layer_norm(x, LN_EPS);
        let h = g.modulate(h, m, 0, d);
        let q = linear(g, params, &format!("{prefix}.attn.q"), h)?;
        let k = linear(g, params, &format!("{prefix}.attn.k"), h)?;
        let v = linear(g, params, &format!("{prefix}.attn.v"), h)?;
        let a = g.attention(q, k, v, self.cfg.num_heads);
        let a = linear(g, params, &format!("{prefix}.attn.o"), a)?;
        let x = g.gated_add(x, a, m, 2 * d);
        let h = g.layer_norm(x, LN_EPS);
        let h = g.modulate(h, m, 3 * d, 4 * d);
        let h = linear(g, params, &format!("{prefix}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, params, &format!("{prefix}.mlp.fc2"), h)?;
        Ok(g.gated_add(x, h, m, 5 * d))
    }

    /// Control input `u` of block `k`.
    pub fn control_input<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        k: usize,
        state: &KalmanBlockState,
    ) -> Result<NodeId, ModelError> {
        let (query, memory) = match self.cfg.control {
            ControlMode::Additive => return Ok(g.add(state.cam, state.z_pc)),
            ControlMode::CrossAttention => (state.cam, state.z_pc),
            ControlMode::CrossAttentionSwapped => (state.z_pc, state.cam),
            ControlMode::CameraOnly => (state.cam, state.cam),
        };
        let qn = g.layer_norm(query, LN_EPS);
        let mn = if memory == query { qn } else { g.layer_norm(memory, LN_EPS) };
        let q = linear(g, params, &format!("kalman.{k}.predict.q"), qn)?;
        let kk = linear(g, params, &format!("kalman.{k}.predict.k"), mn)?;
        let v = linear(g, params, &format!("kalman.{k}.predict.v"), mn)?;
        let a = g.attention(q, kk, v, self.cfg.num_heads);
        linear(g, params, &format!("kalman.{k}.predict.o"), a)
    }

    /// `z_pred = z + zero_linear(u)`.
    pub fn kalman_predict<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        k: usize,
        state: &KalmanBlockState,
    ) -> Result<NodeId, ModelError> {
        let u = self.control_input(g, params, k, state)?;
        let r = linear(g, params, &format!("kalman.{k}.predict.zero"), u)?;
        Ok(g.add(state.z, r))
    }

    /// `z_pred + zero_linear(Diff(z_pred − z_pc))`; identity without the
    /// update submodule.
    pub fn kalman_update<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        k: usize,
        z_pred: NodeId,
        z_pc: NodeId,
        cond: NodeId,
    ) -> Result<NodeId, ModelError> {
        if !self.cfg.update {
            return Ok(z_pred);
        }
        let mut r = g.sub(z_pred, z_pc);
        for j in 0..self.cfg.diff_blocks_per_update {
            r = self.dit_block(g, params, &format!("kalman.{k}.update.diff.{j}"), r, cond)?;
        }
        let r = linear(g, params, &format!("kalman.{k}.update.zero"), r)?;
        Ok(g.add(z_pred, r))
    }

    pub fn pc_stream_step<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        k: usize,
        z_pc: NodeId,
        cond: NodeId,
    ) -> Result<NodeId, ModelError> {
        self.dit_block(g, params, &format!("kalman.{k}.pc_step"), z_pc, cond)
    }

    fn positions<F: Real>(&self, g: &mut Graph<F>, params: &ParamStore<F>) -> Result<NodeId, ModelError> {
        let d = self.cfg.embed_dim;
        let (gh, gw) = self.cfg.grid();
        let l = self.cfg.num_tokens();
        let table = |axis: &dyn Fn(usize) -> usize| -> Rc<Vec<usize>> {
            Rc::new((0..l).flat_map(|tok| (0..d).map(move |j| (tok, j))).map(|(tok, j)| axis(tok) * d + j).collect())
        };
        let f = p(g, params, "pos.frame")?;
        let r = p(g, params, "pos.row")?;
        let c = p(g, params, "pos.col")?;
        let f = g.gather(f, table(&|tok| tok / (gh * gw)), &[l, d]);
        let r = g.gather(r, table(&|tok| (tok / gw) % gh), &[l, d]);
        let c = g.gather(c, table(&|tok| tok % gw), &[l, d]);
        let fr = g.add(f, r);
        Ok(g.add(fr, c))
    }

    /// Velocity for a batch, `[B, T, C, H', W']`.
    pub fn forward_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        inputs: &[ModelInput],
    ) -> Result<NodeId, ModelError> {
        let c = &self.cfg;
        let (b, l, d) = (inputs.len(), c.num_tokens(), c.embed_dim);
        if b == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let feats = inputs.iter().map(|i| self.token_features(i)).collect::<Result<Vec<_>, _>>()?;
        let t: Vec<f64> = inputs.iter().map(|i| i.t).collect();
        let cond = self.timestep_embedding(g, params, &t)?;

        let video: Vec<f32> = feats.iter().flat_map(|f| f.video.iter().copied()).collect();
        let video = g.constant(Tensor::<f32>::new(&[b, l, c.video_features()], video).cast());
        let x = linear(g, params, "embed.video", video)?;
        let pos = self.positions(g, params)?;
        let mut z = g.add_rows(x, pos);
        let (cam, mut z_pc) = self.embed_conditioning(g, params, &feats)?;

        let insert = c.insertion_indices();
        let mut k = 0;
        for i in 0..c.num_backbone_blocks {
            z = self.dit_block(g, params, &format!("blocks.{i}"), z, cond)?;
            if k < insert.len() && insert[k] == i + 1 {
                let state = KalmanBlockState { z, z_pc, cam };
                let z_pred = self.kalman_predict(g, params, k, &state)?;
                z = self.kalman_update(g, params, k, z_pred, z_pc, cond)?;
                if k + 1 < c.num_kalman_blocks {
                    z_pc = self.pc_stream_step(g, params, k, z_pc, cond)?;
                }
                k += 1;
            }
        }

        let m = linear(g, params, "final.adaln", cond)?;
        let h = g.layer_norm(z, LN_EPS);
        let h = g.modulate(h, m, 0, d);
        let out = linear(g, params, "final.out", h)?;
        let (ch, hh, ww) = (c.latent_channels, c.latent_height, c.latent_width);
        let index = Rc::new(unpatchify_index(b, c.frames, ch, hh, ww, c.token_patch));
        Ok(g.gather(out, index, &[b, c.frames, ch, hh, ww]))
    }

    /// Velocity for a single input at 32-bit precision.
    pub fn forward(&self, params: &ParamStore<f32>, z_t: &LatentVideo, t: f64, cond: &Conditioning) -> Result<LatentVideo, ModelError> {
        let mut g = Graph::new();
        let v = self.forward_graph(&mut g, params, &[ModelInput { z_t, t, cond }])?;
        Ok(z_t.with_data(g.value(v).data().to_vec()))
    }
}
