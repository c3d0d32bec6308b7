//! Siamese 3D U-net for change localisation.
//!
//! Each input is a two-channel stack (scan, |difference|). With `siamese` on,
//! both stacks run through one encoder stream (shared weights) and the two
//! feature maps are fused per level by a 1×1×1 convolution over their channel
//! concatenation. With it off, a single stream sees the four channels at once.
//! The decoder upsamples, optionally gates the fused skip features with an
//! additive attention gate, and emits a sigmoid head at full resolution plus
//! side heads on the coarser decoder levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Conv3d;
use crate::nn::{Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rng::{stream, Rng, Stream};
use crate::volume::{Volume, VolumeRole};

pub const CHECKPOINT_KIND: &str = "detector";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub use_inception: bool,
    pub use_attention_gates: bool,
    pub use_multiscale_inputs: bool,
    pub use_deep_supervision: bool,
    pub siamese: bool,
    /// Weight of `‖kernels‖²` in the training objective.
    pub l2_weight: f64,
    /// Instance normalisation after every block convolution.
    pub instance_norm: bool,
    /// Initial output probability of every head (sets the head biases).
    pub head_prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            use_inception: true,
            use_attention_gates: true,
            use_multiscale_inputs: true,
            use_deep_supervision: true,
            siamese: true,
            l2_weight: 0.0,
            instance_norm: true,
            head_prior: 0.02,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid("levels", "must be >= 2"));
        }
        if self.base_channels < 1 {
            return Err(Error::invalid("base_channels", "must be >= 1"));
        }
        if self.use_inception && self.base_channels < 3 {
            return Err(Error::invalid(
                "base_channels",
                "inception blocks need at least 3 channels",
            ));
        }
        if !(self.head_prior > 0.0 && self.head_prior < 1.0) {
            return Err(Error::invalid("head_prior", "must lie in (0, 1)"));
        }
        if !(self.l2_weight >= 0.0) {
            return Err(Error::invalid("l2_weight", "must be >= 0"));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = self.divisor();
        for (axis, &extent) in dims.iter().enumerate() {
            if extent % f != 0 || extent == 0 {
                return Err(Error::NotDivisible {
                    axis,
                    extent,
                    factor: f,
                });
            }
        }
        Ok(())
    }
}

/// The two input stacks `x1 = (a, |a − b|)` and `x2 = (b, |a − b|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorInput {
    pub x1: Tensor,
    pub x2: Tensor,
    pub spacing: [f64; 3],
}

impl DetectorInput {
    pub fn new(a: &Volume, b: &Volume, diff: &Volume) -> Result<Self> {
        a.ensure_same_geometry(b, "detector inputs")?;
        a.ensure_same_geometry(diff, "detector difference channel")?;
        Ok(Self {
            x1: Tensor::from_channels(a.dims(), &[a.data(), diff.data()])?,
            x2: Tensor::from_channels(a.dims(), &[b.data(), diff.data()])?,
            spacing: a.spacing(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.x1.spatial()
    }

    /// Exchanges the roles of the two scans.
    pub fn swapped(&self) -> Self {
        Self {
            x1: self.x2.clone(),
            x2: self.x1.clone(),
            spacing: self.spacing,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub final_map: Volume,
    /// One map per side head, coarse to fine.
    pub side_outputs: Vec<Volume>,
}

#[derive(Debug, Clone)]
struct Inception {
    /// (1×1 reduction, k×k×k convolution) for k = 1, 3, 5.
    branches: Vec<(Conv3d, Conv3d)>,
}

#[derive(Debug, Clone)]
enum Block {
    Plain(Conv3d, Conv3d),
    Inception(Inception),
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, inception: bool, rng: &mut Rng) -> Self {
        if !inception {
            return Block::Plain(
                Conv3d::same(store, &format!("{name}.conv1"), cin, cout, 3, rng),
                Conv3d::same(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            );
        }
        let third = cout / 3;
        let widths = [(1, cout - 2 * third), (3, third), (5, third)];
        let reduced = (cout / 2).max(1);
        let branches = widths
            .iter()
            .map(|&(k, w)| {
                (
                    Conv3d::same(store, &format!("{name}.b{k}.reduce"), cin, reduced, 1, rng),
                    Conv3d::same(store, &format!("{name}.b{k}.conv"), reduced, w, k, rng),
                )
            })
            .collect();
        Block::Inception(Inception { branches })
    }

    fn forward(&self, g: &mut Graph, x: Var, norm: bool) -> Result<Var> {
        let finish = |g: &mut Graph, h: Var| {
            let h = if norm { g.instance_norm(h) } else { h };
            g.relu(h)
        };
        match self {
            Block::Plain(a, b) => {
                let h = a.forward(g, x)?;
                let h = finish(g, h);
                let h = b.forward(g, h)?;
                Ok(finish(g, h))
            }
            Block::Inception(inc) => {
                let mut outs = Vec::with_capacity(inc.branches.len());
                for (reduce, conv) in &inc.branches {
                    let h = reduce.forward(g, x)?;
                    let h = g.relu(h);
                    let h = conv.forward(g, h)?;
                    outs.push(finish(g, h));
                }
                g.concat(&outs)
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Block::Plain(a, b) => a.param_count() + b.param_count(),
            Block::Inception(inc) => inc
                .branches
                .iter()
                .map(|(r, c)| r.param_count() + c.param_count())
                .sum(),
        }
    }
}

/// Additive attention on a skip connection, gated by the next coarser decoder level.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    w_skip: Conv3d,
    w_gate: Conv3d,
    psi: Conv3d,
}

impl AttentionGate {
    pub fn new(store: &mut ParamStore, name: &str, skip_channels: usize, gate_channels: usize, rng: &mut Rng) -> Self {
        let inter = (skip_channels / 2).max(1);
        Self {
            w_skip: Conv3d::new(
                store,
                &format!("{name}.w_skip"),
                skip_channels,
                inter,
                1,
                1,
                0,
                false,
                rng,
            ),
            w_gate: Conv3d::same(store, &format!("{name}.w_gate"), gate_channels, inter, 1, rng),
            psi: Conv3d::same(store, &format!("{name}.psi"), inter, 1, 1, rng),
        }
    }

    /// Returns the gated skip features and the attention coefficients.
    pub fn forward(&self, g: &mut Graph, skip: Var, gating: Var) -> Result<(Var, Var)> {
        if g.value(skip).channels() != self.w_skip.cin || g.value(gating).channels() != self.w_gate.cin {
            return Err(Error::ShapeMismatch {
                what: "attention gate channels",
                left: vec![g.value(skip).channels(), g.value(gating).channels()],
                right: vec![self.w_skip.cin, self.w_gate.cin],
            });
        }
        let s = self.w_skip.forward(g, skip)?;
        let q = self.w_gate.forward(g, gating)?;
        let q = g.upsample(q)?;
        let h = g.add(s, q)?;
        let h = g.relu(h);
        let a = self.psi.forward(g, h)?;
        let alpha = g.sigmoid(a);
        Ok((g.channel_gate(skip, alpha)?, alpha))
    }

    pub fn param_count(&self) -> usize {
        self.w_skip.param_count() + self.w_gate.param_count() + self.psi.param_count()
    }
}

#[derive(Debug, Clone)]
struct Architecture {
    encoder: Vec<Block>,
    fusion: Vec<Conv3d>,
    gates: Vec<Option<AttentionGate>>,
    /// Indexed by level; level `levels - 1` has no decoder block.
    decoder: Vec<Block>,
    final_head: Conv3d,
    /// Side heads for levels `levels - 1` down to 1.
    side_heads: Vec<Conv3d>,
}

/// Network weights plus the layer wiring that refers to them.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    pub store: ParamStore,
    arch: Architecture,
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    pub final_map: Var,
    pub side_outputs: Vec<Var>,
}

impl Detector {
    pub fn build(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, Stream::Init, 1);
        let mut store = ParamStore::new();
        let levels = cfg.levels;
        let stream_in = if cfg.siamese { 2 } else { 4 };

        let mut encoder = Vec::with_capacity(levels);
        let mut fusion = Vec::new();
        for l in 0..levels {
            let c = cfg.channels(l);
            let cin = if l == 0 {
                stream_in
            } else {
                cfg.channels(l - 1) + if cfg.use_multiscale_inputs { stream_in } else { 0 }
            };
            encoder.push(Block::new(
                &mut store,
                &format!("enc{l}"),
                cin,
                c,
                cfg.use_inception,
                &mut rng,
            ));
        }
        if cfg.siamese {
            for l in 0..levels {
                let c = cfg.channels(l);
                fusion.push(Conv3d::same(&mut store, &format!("fuse{l}"), 2 * c, c, 1, &mut rng));
            }
        }
        let mut gates = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..levels - 1 {
            let (c, c_up) = (cfg.channels(l), cfg.channels(l + 1));
            gates.push(
                cfg.use_attention_gates
                    .then(|| AttentionGate::new(&mut store, &format!("gate{l}"), c, c_up, &mut rng)),
            );
            decoder.push(Block::new(
                &mut store,
                &format!("dec{l}"),
                c + c_up,
                c,
                cfg.use_inception,
                &mut rng,
            ));
        }
        let final_head = Conv3d::same(&mut store, "head", cfg.channels(0), 1, 1, &mut rng);
        let side_heads = if cfg.use_deep_supervision {
            (1..levels)
                .rev()
                .map(|l| Conv3d::same(&mut store, &format!("side{l}"), cfg.channels(l), 1, 1, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let logit = (cfg.head_prior / (1.0 - cfg.head_prior)).ln();
        for head in std::iter::once(&final_head).chain(&side_heads) {
            if let Some(b) = head.bias {
                store.get_mut(b).fill(logit);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            arch: Architecture {
                encoder,
                fusion,
                gates,
                decoder,
                final_head,
                side_heads,
            },
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.arch.encoder.iter().map(Block::param_count).sum()
    }

    pub fn fusion_param_count(&self) -> usize {
        self.arch.fusion.iter().map(Conv3d::param_count).sum()
    }

    pub fn gate_param_count(&self) -> usize {
        self.arch.gates.iter().flatten().map(AttentionGate::param_count).sum()
    }

    fn encode_stream(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.cfg.levels);
        let mut pooled_input = x;
        let mut h = x;
        for (l, block) in self.arch.encoder.iter().enumerate() {
            if l > 0 {
                h = g.max_pool(h)?;
                if self.cfg.use_multiscale_inputs {
                    pooled_input = g.avg_pool(pooled_input)?;
                    h = g.concat(&[h, pooled_input])?;
                }
            }
            h = block.forward(g, h, self.cfg.instance_norm)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Records a forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, input: &DetectorInput) -> Result<ForwardVars> {
        let dims = input.dims();
        if input.x1.shape() != input.x2.shape() || input.x1.channels() != 2 {
            return Err(Error::ShapeMismatch {
                what: "detector input stacks",
                left: input.x1.shape().to_vec(),
                right: input.x2.shape().to_vec(),
            });
        }
        self.cfg.check_dims(dims)?;
        let levels = self.cfg.levels;
        let fused = if self.cfg.siamese {
            let x1 = g.input(input.x1.clone());
            let x2 = g.input(input.x2.clone());
            let f1 = self.encode_stream(g, x1)?;
            let f2 = self.encode_stream(g, x2)?;
            let mut fused = Vec::with_capacity(levels);
            for l in 0..levels {
                let cat = g.concat(&[f1[l], f2[l]])?;
                let h = self.arch.fusion[l].forward(g, cat)?;
                fused.push(g.relu(h));
            }
            fused
        } else {
            let x1 = g.input(input.x1.clone());
            let x2 = g.input(input.x2.clone());
            let x = g.concat(&[x1, x2])?;
            self.encode_stream(g, x)?
        };

        let mut side_outputs = Vec::new();
        let mut d = fused[levels - 1];
        let mut side = self.arch.side_heads.iter();
        for l in (0..levels - 1).rev() {
            if let Some(head) = side.next() {
                let s = head.forward(g, d)?;
                side_outputs.push(g.sigmoid(s));
            }
            let up = g.upsample(d)?;
            let skip = match &self.arch.gates[l] {
                Some(gate) => gate.forward(g, fused[l], d)?.0,
                None => fused[l],
            };
            let cat = g.concat(&[up, skip])?;
            d = self.arch.decoder[l].forward(g, cat, self.cfg.instance_norm)?;
        }
        let f = self.arch.final_head.forward(g, d)?;
        let final_map = g.sigmoid(f);
        Ok(ForwardVars {
            final_map,
            side_outputs,
        })
    }

    pub fn forward(&self, input: &DetectorInput) -> Result<DetectorOutput> {
        let mut g = Graph::new(&self.store);
        let vars = self.forward_graph(&mut g, input)?;
        let to_volume = |t: &Tensor| {
            let data = t.data().iter().map(|&v| v as f32).collect();
            let s = input.spacing;
            let f = (input.dims()[0] / t.spatial()[0]) as f64;
            Volume::new(
                t.spatial(),
                [s[0] * f, s[1] * f, s[2] * f],
                VolumeRole::Probability,
                data,
            )
        };
        Ok(DetectorOutput {
            final_map: to_volume(g.value(vars.final_map))?,
            side_outputs: vars
                .side_outputs
                .iter()
                .map(|&v| to_volume(g.value(v)))
                .collect::<Result<_>>()?,
        })
    }

    /// Final probability map only.
    pub fn predict(&self, input: &DetectorInput) -> Result<Volume> {
        Ok(self.forward(input)?.final_map)
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.cfg)?,
            extra,
            &self.store,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: DetectorConfig = serde_json::from_value(ck.config.clone())?;
        let mut det = Self::build(&cfg, 0)?;
        ck.restore_into(&mut det.store)?;
        Ok(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Grads;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn plain(levels: usize, base: usize) -> DetectorConfig {
        DetectorConfig {
            levels,
            base_channels: base,
            use_inception: false,
            use_attention_gates: false,
            use_multiscale_inputs: false,
            use_deep_supervision: false,
            siamese: false,
            l2_weight: 0.0,
            ..DetectorConfig::default()
        }
    }

    fn random_input(dims: [usize; 3], seed: u64) -> DetectorInput {
        let mut rng = seeded(seed);
        let n: usize = dims.iter().product();
        let mut vol = || {
            Volume::new(
                dims,
                [1.0; 3],
                VolumeRole::Intensity,
                (0..n).map(|_| rng.random::<f32>()).collect(),
            )
            .unwrap()
        };
        let (a, b) = (vol(), vol());
        let diff = crate::volume::abs_difference(&a, &b).unwrap();
        DetectorInput::new(&a, &b, &diff).unwrap()
    }

    fn conv(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k * k + cout
    }

    #[test]
    fn plain_parameter_count() {
        let det = Detector::build(&plain(3, 8), 1).unwrap();
        let expected = conv(4, 8, 3)
            + conv(8, 8, 3)
            + conv(8, 16, 3)
            + conv(16, 16, 3)
            + conv(16, 32, 3)
            + conv(32, 32, 3)
            + conv(48, 16, 3)
            + conv(16, 16, 3)
            + conv(24, 8, 3)
            + conv(8, 8, 3)
            + conv(8, 1, 1);
        assert_eq!(
            expected,
            872 + 1736 + 3472 + 6928 + 13856 + 27680 + 20752 + 6928 + 5192 + 1736 + 9
        );
        assert_eq!(det.param_count(), expected);
    }

    #[test]
    fn gate_budget() {
        let off = Detector::build(&plain(3, 8), 1).unwrap();
        let on = Detector::build(
            &DetectorConfig {
                use_attention_gates: true,
                ..plain(3, 8)
            },
            1,
        )
        .unwrap();
        // gate at level l: skip c, gating 2c, intermediate c/2.
        let gate = |c: usize| {
            let i = c / 2;
            c * i + (2 * c * i + i) + (i + 1)
        };
        assert_eq!(on.param_count() - off.param_count(), gate(8) + gate(16));
        assert_eq!(on.gate_param_count(), gate(8) + gate(16));
    }

    #[test]
    fn siamese_shares_one_encoder() {
        let cfg = DetectorConfig {
            siamese: true,
            ..plain(3, 8)
        };
        let det = Detector::build(&cfg, 1).unwrap();
        let single =
            conv(2, 8, 3) + conv(8, 8, 3) + conv(8, 16, 3) + conv(16, 16, 3) + conv(16, 32, 3) + conv(32, 32, 3);
        assert_eq!(det.encoder_param_count(), single);
        let fusion = conv(16, 8, 1) + conv(32, 16, 1) + conv(64, 32, 1);
        assert_eq!(det.fusion_param_count(), fusion);
        let decoder = conv(48, 16, 3) + conv(16, 16, 3) + conv(24, 8, 3) + conv(8, 8, 3) + conv(8, 1, 1);
        assert_eq!(det.param_count(), single + fusion + decoder);
        assert!(det.param_count() < 2 * single + fusion + decoder);

        // Both streams read the same tensors: perturbing one encoder weight moves
        // the output even when only the second stream's input differs from zero.
        let input = random_input([8, 8, 4], 3);
        let before = det.predict(&input).unwrap();
        let mut changed = det.clone();
        let id = changed.store.find("enc0.conv1.weight").unwrap();
        changed.store.get_mut(id).data_mut()[0] += 0.5;
        assert_ne!(before, changed.predict(&input).unwrap());
    }

    #[test]
    fn output_shapes_and_ranges() {
        let cfg = DetectorConfig {
            levels: 3,
            base_channels: 3,
            ..DetectorConfig::default()
        };
        let det = Detector::build(&cfg, 2).unwrap();
        let out = det.forward(&random_input([16, 16, 8], 5)).unwrap();
        assert_eq!(out.final_map.dims(), [16, 16, 8]);
        let dims: Vec<_> = out.side_outputs.iter().map(Volume::dims).collect();
        assert_eq!(dims, vec![[4, 4, 2], [8, 8, 4]]);
        for v in std::iter::once(&out.final_map).chain(&out.side_outputs) {
            assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert!(matches!(
            det.forward(&random_input([16, 10, 8], 5)),
            Err(Error::NotDivisible {
                axis: 1,
                extent: 10,
                factor: 4
            })
        ));
    }

    #[test]
    fn stream_order_matters() {
        let cfg = DetectorConfig {
            levels: 2,
            base_channels: 3,
            ..DetectorConfig::default()
        };
        let mut differing = 0;
        for seed in 0..10 {
            let det = Detector::build(&cfg, seed).unwrap();
            let input = random_input([4, 4, 4], 100 + seed);
            if det.predict(&input).unwrap() != det.predict(&input.swapped()).unwrap() {
                differing += 1;
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn attention_gate_limits() {
        let mut rng = seeded(9);
        let mut store = ParamStore::new();
        let gate = AttentionGate::new(&mut store, "g", 4, 8, &mut rng);
        let skip = Tensor::new(
            vec![4, 4, 4, 2],
            (0..128).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let gating = Tensor::new(vec![8, 2, 2, 1], (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        for (bias, expect_skip) in [(1e3, true), (-1e3, false)] {
            store.get_mut(gate.psi.bias.unwrap()).fill(bias);
            let mut g = Graph::new(&store);
            let (s, gt) = (g.input(skip.clone()), g.input(gating.clone()));
            let (out, _) = gate.forward(&mut g, s, gt).unwrap();
            let out = g.value(out).data();
            if expect_skip {
                assert_eq!(out, skip.data());
            } else {
                assert!(out.iter().all(|&v| v == 0.0));
            }
        }
        store.get_mut(gate.psi.bias.unwrap()).fill(0.0);
        let mut g = Graph::new(&store);
        let (s, gt) = (g.input(skip.clone()), g.input(gating.clone()));
        let (out, alpha) = gate.forward(&mut g, s, gt).unwrap();
        assert!(g.value(alpha).data().iter().all(|a| (0.0..=1.0).contains(a)));
        for (o, s) in g.value(out).data().iter().zip(skip.data()) {
            assert!(o.abs() <= s.abs());
        }
        let mut g = Graph::new(&store);
        let (s, gt) = (g.input(gating.clone()), g.input(gating));
        assert!(gate.forward(&mut g, s, gt).is_err());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = DetectorConfig {
            levels: 3,
            base_channels: 6,
            ..DetectorConfig::default()
        };
        let det = Detector::build(&cfg, 4).unwrap();
        let mut reached = vec![false; det.store.len()];
        for seed in 0..5 {
            let mut rng = seeded(seed);
            let mut signed = || {
                Tensor::new(
                    vec![2, 8, 8, 4],
                    (0..512).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let input = DetectorInput {
                x1: signed(),
                x2: signed(),
                spacing: [1.0; 3],
            };
            let mut g = Graph::new(&det.store);
            let vars = det.forward_graph(&mut g, &input).unwrap();
            let mut rng = seeded(50 + seed);
            let heads: Vec<Var> = std::iter::once(vars.final_map).chain(vars.side_outputs).collect();
            let grads: Vec<Tensor> = heads
                .iter()
                .map(|&h| {
                    let shape = g.value(h).shape().to_vec();
                    let n = g.value(h).len();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
                })
                .collect();
            let root = g.objective(0.0, &heads, grads).unwrap();
            let mut pg: Grads = det.store.zero_grads();
            g.backward(root, 1.0, &mut pg);
            for (id, t) in pg.iter() {
                if t.data().iter().any(|&v| v != 0.0) {
                    reached[id.index()] = true;
                }
            }
        }
        let missing: Vec<_> = det
            .store
            .iter()
            .filter(|(id, _)| !reached[id.index()])
            .map(|(_, p)| p.name.clone())
            .collect();
        assert!(missing.is_empty(), "no gradient for {missing:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = DetectorConfig {
            levels: 2,
            base_channels: 3,
            ..DetectorConfig::default()
        };
        let det = Detector::build(&cfg, 8).unwrap();
        let input = random_input([4, 4, 2], 1);
        let bytes = det.checkpoint(serde_json::Value::Null).unwrap().to_bytes().unwrap();
        let back = Detector::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(det.forward(&input).unwrap(), back.forward(&input).unwrap());
    }
}
