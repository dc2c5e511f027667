//! The segmentation network: three encoders over the slice patch and the two
//! MIP images, a hard-attention block gated by the ROI mask, and one decoder
//! with three sigmoid heads (segmentation plus the two adjacent-slice ROI
//! predictions).
//!
//! Wiring per level `i` (spatial side `S / 2^(i-1)`):
//! - each encoder applies two [conv3x3 -> ReLU -> norm] rounds, exposing the
//!   pre-pool features as the skip, then max-pools;
//! - the gate generator runs the ROI mask through [conv3x3 -> norm -> ReLU]
//!   per level, pooling *between* levels so gate `i` matches the skips'
//!   pre-pool resolution;
//! - the three skips concatenate and are gated by attention coefficients
//!   `H = sigmoid(eta^T relu(W_l lam . W_g g + b_g) + b_eta)`, one coefficient
//!   per pixel, broadcast over channels;
//! - the decoder upsamples, concatenates the gated skip, and applies
//!   [conv3x3 -> ReLU -> norm] then [conv3x3 -> ReLU].

use crate::error::{CoreError, Result};
use crate::nn::{Elem, NodeId, NormMode, ParamId, Params, Tape};
use crate::preproc::PatchBundle;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "MESAHA-CKPT1";

/// How the projected skip features combine with the projected gate inside the
/// attention unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionCombine {
    /// Elementwise product (default).
    #[default]
    Multiplicative,
    /// Elementwise sum, kept for ablation.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    /// Channel width of the first encoder level; level `i` uses `C * 2^(i-1)`.
    pub base_channels: usize,
    /// Encoder/decoder depth. The full architecture uses 4; smaller values
    /// exist for reduced test configurations.
    pub levels: usize,
    /// Square input side; must be divisible by `2^levels`.
    pub patch_side: usize,
    pub attention: AttentionCombine,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 32,
            levels: 4,
            patch_side: crate::preproc::PATCH_SIDE,
            attention: AttentionCombine::Multiplicative,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(CoreError::Validation("base_channels must be >= 1".into()));
        }
        if !(1..=6).contains(&self.levels) {
            return Err(CoreError::Validation(format!(
                "levels must be in 1..=6, got {}",
                self.levels
            )));
        }
        let div = 1usize << self.levels;
        if self.patch_side == 0 || self.patch_side % div != 0 {
            return Err(CoreError::Validation(format!(
                "patch side {} must be a positive multiple of 2^levels = {div}",
                self.patch_side
            )));
        }
        Ok(())
    }

    /// Encoder output channels at `level` (1-based).
    pub fn enc_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    fn enc_in_channels(&self, level: usize) -> usize {
        if level == 1 {
            1
        } else {
            self.enc_channels(level - 1)
        }
    }

    /// Channels of the concatenated three-encoder skip at `level`.
    pub fn skip_channels(&self, level: usize) -> usize {
        3 * self.enc_channels(level)
    }

    /// Intermediate attention width: half the gated channel count.
    pub fn f_int(&self, level: usize) -> usize {
        (self.skip_channels(level) / 2).max(1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        3 * self.enc_channels(self.levels)
    }

    pub fn dec_channels(&self, level: usize) -> usize {
        self.enc_channels(level)
    }

    fn attention_tag(&self) -> &'static str {
        match self.attention {
            AttentionCombine::Multiplicative => "mul",
            AttentionCombine::Additive => "add",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncLevelIds {
    conv_a: ConvIds,
    norm_a: NormIds,
    conv_b: ConvIds,
    norm_b: NormIds,
}

#[derive(Debug, Clone, Copy)]
struct GateLevelIds {
    conv: ConvIds,
    norm: NormIds,
}

#[derive(Debug, Clone, Copy)]
struct AttnLevelIds {
    w_skip: ParamId,
    w_gate: ParamId,
    eta: ParamId,
    bias_gate: ParamId,
    bias_eta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DecLevelIds {
    conv_a: ConvIds,
    norm_a: NormIds,
    conv_b: ConvIds,
}

#[derive(Debug, Clone)]
struct LayerIds {
    encoders: Vec<Vec<EncLevelIds>>,
    gates: Vec<GateLevelIds>,
    attention: Vec<AttnLevelIds>,
    decoder: Vec<DecLevelIds>,
    head_seg: ConvIds,
    head_prev: ConvIds,
    head_next: ConvIds,
}

/// The three sigmoid outputs for one input bundle.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub seg: Array2<f32>,
    pub roi_prev: Array2<f32>,
    pub roi_next: Array2<f32>,
}

/// Node handles for everything a caller might inspect after a forward pass.
pub struct ForwardTrace {
    pub seg: NodeId,
    pub roi_prev: NodeId,
    pub roi_next: NodeId,
    /// Pre-pool concatenated skip per level.
    pub skips: Vec<NodeId>,
    /// Gate-generator output per level.
    pub gates: Vec<NodeId>,
    /// Attention coefficient map per level (one channel).
    pub attn_coeffs: Vec<NodeId>,
    /// Gated skip per level.
    pub gated: Vec<NodeId>,
    pub bottleneck: NodeId,
}

/// Batched network inputs, each `[N, 1, S, S]`.
pub struct NetInputs<E> {
    pub slice_patch: Array4<E>,
    pub mip_backward: Array4<E>,
    pub mip_forward: Array4<E>,
    pub roi_mask: Array4<E>,
}

impl<E: Elem> NetInputs<E> {
    pub fn from_bundles(bundles: &[&PatchBundle]) -> Result<NetInputs<E>> {
        if bundles.is_empty() {
            return Err(CoreError::Validation("empty input batch".into()));
        }
        let side = bundles[0].side();
        let n = bundles.len();
        let make = |get: &dyn Fn(&PatchBundle) -> Array2<f32>| -> Result<Array4<E>> {
            let mut out = Array4::zeros((n, 1, side, side));
            for (i, b) in bundles.iter().enumerate() {
                if b.side() != side {
                    return Err(CoreError::ShapeMismatch(format!(
                        "bundle {i} side {} != {side}",
                        b.side()
                    )));
                }
                let plane = get(b);
                for y in 0..side {
                    for x in 0..side {
                        out[[i, 0, y, x]] = E::from_f64(plane[[y, x]] as f64);
                    }
                }
            }
            Ok(out)
        };
        Ok(NetInputs {
            slice_patch: make(&|b| b.slice_patch.clone())?,
            mip_backward: make(&|b| b.mip_backward.clone())?,
            mip_forward: make(&|b| b.mip_forward.clone())?,
            roi_mask: make(&|b| b.roi_mask.pixels().mapv(|v| v as f32))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model<E: Elem> {
    pub config: ArchConfig,
    pub params: Params<E>,
    ids: LayerIds,
}

impl<E: Elem> Model<E> {
    /// Deterministic initialization: fan-in-scaled normal kernels, zero
    /// biases, identity normalization affine, zero/unit running statistics.
    pub fn init(config: ArchConfig, seed: u64) -> Result<Model<E>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let ids = build_layout(
            &config,
            &mut params,
            &mut |shape: &[usize], rng: &mut ChaCha8Rng| {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| {
                    // Box-Muller keeps the draw count per tensor fixed across
                    // element types, so seeds reproduce bit-identically.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    E::from_f64(z * std)
                })
            },
            &mut rng,
        );
        Ok(Model { config, params, ids })
    }

    /// Total trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.count_trainable()
    }

    /// One encoder level: two [conv -> ReLU -> norm] rounds; returns the
    /// pre-pool features (the skip) and the pooled output.
    pub fn conv_block(
        &self,
        tape: &mut Tape<E>,
        x: NodeId,
        encoder: usize,
        level: usize,
    ) -> (NodeId, NodeId) {
        let ids = &self.ids.encoders[encoder][level - 1];
        let p = &self.params;
        let mut h = tape.conv(p, x, ids.conv_a.w, Some(ids.conv_a.b));
        h = tape.relu(h);
        h = tape.norm(
            p,
            h,
            ids.norm_a.gamma,
            ids.norm_a.beta,
            ids.norm_a.run_mean,
            ids.norm_a.run_var,
        );
        h = tape.conv(p, h, ids.conv_b.w, Some(ids.conv_b.b));
        h = tape.relu(h);
        let pre_pool = tape.norm(
            p,
            h,
            ids.norm_b.gamma,
            ids.norm_b.beta,
            ids.norm_b.run_mean,
            ids.norm_b.run_var,
        );
        let pooled = tape.maxpool(pre_pool);
        (pre_pool, pooled)
    }

    /// Gate generator through stage `level`: [conv -> norm -> ReLU] per
    /// stage, pooling between stages so stage `i` output sits at the skips'
    /// pre-pool resolution.
    pub fn ha_gen(&self, tape: &mut Tape<E>, roi: NodeId, level: usize) -> NodeId {
        let mut g = roi;
        for l in 1..=level {
            if l > 1 {
                g = tape.maxpool(g);
            }
            let ids = &self.ids.gates[l - 1];
            g = tape.conv(&self.params, g, ids.conv.w, Some(ids.conv.b));
            g = tape.norm(
                &self.params,
                g,
                ids.norm.gamma,
                ids.norm.beta,
                ids.norm.run_mean,
                ids.norm.run_var,
            );
            g = tape.relu(g);
        }
        g
    }

    /// Attention unit: projects skip and gate with 1x1 convolutions, combines
    /// them, squashes to one coefficient per pixel, and scales the skip.
    /// Returns `(gated skip, coefficient map)`.
    pub fn attention_gate(
        &self,
        tape: &mut Tape<E>,
        skip: NodeId,
        gate: NodeId,
        level: usize,
    ) -> (NodeId, NodeId) {
        let ids = &self.ids.attention[level - 1];
        let p = &self.params;
        let proj_skip = tape.conv(p, skip, ids.w_skip, None);
        let proj_gate = tape.conv(p, gate, ids.w_gate, None);
        let combined = match self.config.attention {
            AttentionCombine::Multiplicative => tape.mul(proj_skip, proj_gate),
            AttentionCombine::Additive => tape.add(proj_skip, proj_gate),
        };
        let biased = tape.add_scalar(p, combined, ids.bias_gate);
        let act = tape.relu(biased);
        let squashed = tape.conv(p, act, ids.eta, None);
        let presig = tape.add_scalar(p, squashed, ids.bias_eta);
        let coeff = tape.sigmoid(presig);
        let gated = tape.mul_broadcast(skip, coeff);
        (gated, coeff)
    }

    /// Records the whole network on `tape` and returns handles to the heads
    /// and intermediates.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<E>,
        inputs: &NetInputs<E>,
    ) -> Result<ForwardTrace> {
        let dim = inputs.slice_patch.dim();
        for (name, arr) in [
            ("backward MIP", &inputs.mip_backward),
            ("forward MIP", &inputs.mip_forward),
            ("ROI mask", &inputs.roi_mask),
        ] {
            if arr.dim() != dim {
                return Err(CoreError::ShapeMismatch(format!(
                    "{name} shape {:?} != slice patch {:?}",
                    arr.dim(),
                    dim
                )));
            }
        }
        let (_, c, h, w) = dim;
        if c != 1 || h != w || h % (1 << self.config.levels) != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "inputs must be [N,1,S,S] with S divisible by {}, got {:?}",
                1 << self.config.levels,
                dim
            )));
        }
        let levels = self.config.levels;

        let enc_inputs = [
            tape.input(inputs.slice_patch.clone()),
            tape.input(inputs.mip_backward.clone()),
            tape.input(inputs.mip_forward.clone()),
        ];
        let roi = tape.input(inputs.roi_mask.clone());

        // Encoders; skips_per_enc[level-1][encoder] holds pre-pool features.
        let mut skips_per_enc: Vec<Vec<NodeId>> = vec![Vec::new(); levels];
        let mut enc_out = Vec::with_capacity(3);
        for (e, inp) in enc_inputs.iter().enumerate() {
            let mut x = *inp;
            for level in 1..=levels {
                let (pre, pooled) = self.conv_block(tape, x, e, level);
                skips_per_enc[level - 1].push(pre);
                x = pooled;
            }
            enc_out.push(x);
        }
        let bottleneck = tape.concat(&enc_out);

        // Gate chain shared across levels (prefix reuse).
        let mut gates = Vec::with_capacity(levels);
        let mut g = roi;
        for l in 1..=levels {
            if l > 1 {
                g = tape.maxpool(g);
            }
            let ids = &self.ids.gates[l - 1];
            g = tape.conv(&self.params, g, ids.conv.w, Some(ids.conv.b));
            g = tape.norm(
                &self.params,
                g,
                ids.norm.gamma,
                ids.norm.beta,
                ids.norm.run_mean,
                ids.norm.run_var,
            );
            g = tape.relu(g);
            gates.push(g);
        }

        let mut skips = Vec::with_capacity(levels);
        let mut attn_coeffs = Vec::with_capacity(levels);
        let mut gated = Vec::with_capacity(levels);
        for level in 1..=levels {
            let skip = tape.concat(&skips_per_enc[level - 1]);
            let (gate_out, coeff) = self.attention_gate(tape, skip, gates[level - 1], level);
            skips.push(skip);
            attn_coeffs.push(coeff);
            gated.push(gate_out);
        }

        // Decoder from the bottom level up.
        let mut x = bottleneck;
        for level in (1..=levels).rev() {
            let ids = &self.ids.decoder[level - 1];
            x = tape.upsample(x);
            x = tape.concat(&[x, gated[level - 1]]);
            x = tape.conv(&self.params, x, ids.conv_a.w, Some(ids.conv_a.b));
            x = tape.relu(x);
            x = tape.norm(
                &self.params,
                x,
                ids.norm_a.gamma,
                ids.norm_a.beta,
                ids.norm_a.run_mean,
                ids.norm_a.run_var,
            );
            x = tape.conv(&self.params, x, ids.conv_b.w, Some(ids.conv_b.b));
            x = tape.relu(x);
        }

        let head = |tape: &mut Tape<E>, ids: &ConvIds| {
            let z = tape.conv(&self.params, x, ids.w, Some(ids.b));
            tape.sigmoid(z)
        };
        let seg = head(tape, &self.ids.head_seg);
        let roi_prev = head(tape, &self.ids.head_prev);
        let roi_next = head(tape, &self.ids.head_next);

        Ok(ForwardTrace {
            seg,
            roi_prev,
            roi_next,
            skips,
            gates,
            attn_coeffs,
            gated,
            bottleneck,
        })
    }

    /// Single-bundle inference (running statistics, batch of one).
    pub fn forward(&self, bundle: &PatchBundle) -> Result<NetOutput> {
        if bundle.side() != self.config.patch_side {
            return Err(CoreError::ShapeMismatch(format!(
                "bundle side {} != configured patch side {}",
                bundle.side(),
                self.config.patch_side
            )));
        }
        let inputs = NetInputs::from_bundles(&[bundle])?;
        let mut tape = Tape::new(NormMode::Inference);
        let trace = self.forward_on_tape(&mut tape, &inputs)?;
        let plane = |id: NodeId| -> Array2<f32> {
            let v = tape.value(id);
            let side = v.dim().2;
            Array2::from_shape_fn((side, side), |(y, x)| v[[0, 0, y, x]].to_f64() as f32)
        };
        Ok(NetOutput {
            seg: plane(trace.seg),
            roi_prev: plane(trace.roi_prev),
            roi_next: plane(trace.roi_next),
        })
    }

    /// Writes the versioned checkpoint: a text header (magic, architecture,
    /// tensor count), a blank line, then per tensor one descriptor line
    /// (`name trainable dims`) followed by the raw little-endian f32 payload.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let cfg = &self.config;
        write!(
            w,
            "{CHECKPOINT_MAGIC}\nbase_channels {}\nlevels {}\npatch {}\nattention {}\ntensors {}\n\n",
            cfg.base_channels,
            cfg.levels,
            cfg.patch_side,
            cfg.attention_tag(),
            self.params.len()
        )
        .map_err(|e| CoreError::io(path, e))?;
        for (_, t) in self.params.iter() {
            let dims: Vec<String> = t.data.shape().iter().map(|d| d.to_string()).collect();
            writeln!(
                w,
                "{} {} {}",
                t.name,
                if t.trainable { "t" } else { "b" },
                dims.join(",")
            )
            .map_err(|e| CoreError::io(path, e))?;
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in t.data.iter() {
                bytes.extend_from_slice(&((*v).to_f64() as f32).to_le_bytes());
            }
            w.write_all(&bytes).map_err(|e| CoreError::io(path, e))?;
        }
        w.flush().map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model<E>> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        let mut next_line = move |r: &mut BufReader<std::fs::File>| -> Result<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| CoreError::io(path, e))?;
            if n == 0 {
                return Err(CoreError::Format(format!(
                    "{}: truncated checkpoint header",
                    path.display()
                )));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = next_line(&mut r)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CoreError::Format(format!(
                "{}: bad checkpoint magic {magic:?}",
                path.display()
            )));
        }
        let mut fields = std::collections::BTreeMap::new();
        loop {
            let l = next_line(&mut r)?;
            if l.is_empty() {
                break;
            }
            let (k, v) = l.split_once(' ').ok_or_else(|| {
                CoreError::Format(format!("{}: bad header line {l:?}", path.display()))
            })?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            fields.get(k).ok_or_else(|| {
                CoreError::Format(format!("{}: missing header field {k}", path.display()))
            })
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| CoreError::Format(format!("{}: bad value for {k}", path.display())))
        };
        let attention = match get("attention")?.as_str() {
            "mul" => AttentionCombine::Multiplicative,
            "add" => AttentionCombine::Additive,
            other => {
                return Err(CoreError::Format(format!(
                    "{}: unknown attention mode {other:?}",
                    path.display()
                )))
            }
        };
        let config = ArchConfig {
            base_channels: parse_usize("base_channels")?,
            levels: parse_usize("levels")?,
            patch_side: parse_usize("patch")?,
            attention,
        };
        config.validate()?;
        let tensor_count = parse_usize("tensors")?;

        let mut params = Params::new();
        for _ in 0..tensor_count {
            let desc = next_line(&mut r)?;
            let parts: Vec<&str> = desc.split(' ').collect();
            if parts.len() != 3 {
                return Err(CoreError::Format(format!(
                    "{}: bad tensor descriptor {desc:?}",
                    path.display()
                )));
            }
            let name = parts[0].to_string();
            let trainable = match parts[1] {
                "t" => true,
                "b" => false,
                other => {
                    return Err(CoreError::Format(format!(
                        "{}: bad trainable flag {other:?}",
                        path.display()
                    )))
                }
            };
            let dims: Vec<usize> = parts[2]
                .split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| CoreError::Format(format!("{}: bad dim {d:?}", path.display())))
                })
                .collect::<Result<_>>()?;
            let len: usize = dims.iter().product();
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes).map_err(|e| CoreError::io(path, e))?;
            let data = ArrayD::from_shape_vec(
                IxDyn(&dims),
                bytes
                    .chunks_exact(4)
                    .map(|c| E::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                    .collect(),
            )
            .expect("shape matches payload");
            params.add(name, data, trainable);
        }

        // Rebuild the layout against a scratch store and verify the
        // checkpoint carries exactly the tensors this architecture expects.
        let mut expect = Params::<E>::new();
        let ids = build_layout(
            &config,
            &mut expect,
            &mut |shape, _| ArrayD::zeros(IxDyn(shape)),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        if expect.len() != params.len() {
            return Err(CoreError::Format(format!(
                "{}: checkpoint has {} tensors, architecture needs {}",
                path.display(),
                params.len(),
                expect.len()
            )));
        }
        for ((_, a), (_, b)) in expect.iter().zip(params.iter()) {
            if a.name != b.name || a.data.shape() != b.data.shape() {
                return Err(CoreError::Format(format!(
                    "{}: tensor mismatch: expected {} {:?}, found {} {:?}",
                    path.display(),
                    a.name,
                    a.data.shape(),
                    b.name,
                    b.data.shape()
                )));
            }
        }
        Ok(Model { config, params, ids })
    }

    pub fn cast<F: Elem>(&self) -> Model<F> {
        Model {
            config: self.config,
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }
}

type InitFn<'a, E> = dyn FnMut(&[usize], &mut ChaCha8Rng) -> ArrayD<E> + 'a;

fn build_layout<E: Elem>(
    cfg: &ArchConfig,
    params: &mut Params<E>,
    kernel_init: &mut InitFn<'_, E>,
    rng: &mut ChaCha8Rng,
) -> LayerIds {
    let conv = |params: &mut Params<E>,
                    init: &mut InitFn<'_, E>,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    oc: usize,
                    ic: usize,
                    k: usize|
     -> ConvIds {
        let w = params.add(format!("{name}.w"), init(&[oc, ic, k, k], rng), true);
        let b = params.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[oc])), true);
        ConvIds { w, b }
    };
    let norm = |params: &mut Params<E>, name: String, c: usize| -> NormIds {
        NormIds {
            gamma: params.add(
                format!("{name}.gamma"),
                ArrayD::from_elem(IxDyn(&[c]), E::one()),
                true,
            ),
            beta: params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), true),
            run_mean: params.add(format!("{name}.run_mean"), ArrayD::zeros(IxDyn(&[c])), false),
            run_var: params.add(
                format!("{name}.run_var"),
                ArrayD::from_elem(IxDyn(&[c]), E::one()),
                false,
            ),
        }
    };

    let mut encoders = Vec::with_capacity(3);
    for e in 0..3 {
        let mut levels = Vec::with_capacity(cfg.levels);
        for l in 1..=cfg.levels {
            let ic = cfg.enc_in_channels(l);
            let oc = cfg.enc_channels(l);
            levels.push(EncLevelIds {
                conv_a: conv(params, kernel_init, rng, format!("enc{e}.l{l}.conva"), oc, ic, 3),
                norm_a: norm(params, format!("enc{e}.l{l}.norma"), oc),
                conv_b: conv(params, kernel_init, rng, format!("enc{e}.l{l}.convb"), oc, oc, 3),
                norm_b: norm(params, format!("enc{e}.l{l}.normb"), oc),
            });
        }
        encoders.push(levels);
    }

    let mut gates = Vec::with_capacity(cfg.levels);
    for l in 1..=cfg.levels {
        let ic = if l == 1 { 1 } else { cfg.enc_channels(l - 1) };
        let oc = cfg.enc_channels(l);
        gates.push(GateLevelIds {
            conv: conv(params, kernel_init, rng, format!("gate.l{l}.conv"), oc, ic, 3),
            norm: norm(params, format!("gate.l{l}.norm"), oc),
        });
    }

    let mut attention = Vec::with_capacity(cfg.levels);
    for l in 1..=cfg.levels {
        let f_l = cfg.skip_channels(l);
        let f_g = cfg.enc_channels(l);
        let f_int = cfg.f_int(l);
        let w_skip = params.add(
            format!("attn.l{l}.w_skip"),
            kernel_init(&[f_int, f_l, 1, 1], rng),
            true,
        );
        let w_gate = params.add(
            format!("attn.l{l}.w_gate"),
            kernel_init(&[f_int, f_g, 1, 1], rng),
            true,
        );
        let eta = params.add(
            format!("attn.l{l}.eta"),
            kernel_init(&[1, f_int, 1, 1], rng),
            true,
        );
        let bias_gate = params.add(
            format!("attn.l{l}.bias_gate"),
            ArrayD::zeros(IxDyn(&[1])),
            true,
        );
        let bias_eta = params.add(
            format!("attn.l{l}.bias_eta"),
            ArrayD::zeros(IxDyn(&[1])),
            true,
        );
        attention.push(AttnLevelIds {
            w_skip,
            w_gate,
            eta,
            bias_gate,
            bias_eta,
        });
    }

    let mut decoder = Vec::with_capacity(cfg.levels);
    for l in 1..=cfg.levels {
        let upstream = if l == cfg.levels {
            cfg.bottleneck_channels()
        } else {
            cfg.dec_channels(l + 1)
        };
        let ic = upstream + cfg.skip_channels(l);
        let oc = cfg.dec_channels(l);
        decoder.push(DecLevelIds {
            conv_a: conv(params, kernel_init, rng, format!("dec.l{l}.conva"), oc, ic, 3),
            norm_a: norm(params, format!("dec.l{l}.norma"), oc),
            conv_b: conv(params, kernel_init, rng, format!("dec.l{l}.convb"), oc, oc, 3),
        });
    }

    let head_c = cfg.dec_channels(1);
    let head_seg = conv(params, kernel_init, rng, "head.seg".into(), 1, head_c, 1);
    let head_prev = conv(params, kernel_init, rng, "head.prev".into(), 1, head_c, 1);
    let head_next = conv(params, kernel_init, rng, "head.next".into(), 1, head_c, 1);

    LayerIds {
        encoders,
        gates,
        attention,
        decoder,
        head_seg,
        head_prev,
        head_next,
    }
}
