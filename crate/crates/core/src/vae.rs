//! Convolutional variational auto-encoder.
//!
//! The latent code is a spatial map (`latent_channels` × input / 2^levels), so
//! the decoder can rebuild crops of any divisible shape. Perturbed
//! reconstructions `g(z · Δ)` with `Δ ~ U(−δ, δ)` supply the synthetic tissue
//! that SuperMix pastes into a scan.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Conv3d;
use crate::nn::{Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rng::{stream, Rng, Stream};
use crate::volume::{Volume, VolumeRole};

pub const CHECKPOINT_KIND: &str = "vae";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsampling {
    MaxPool,
    StridedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub encoder_downsampling: Downsampling,
    /// Feature width of each resolution level, finest first.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    pub kl_weight: f64,
    /// Half-width of the latent scaling distribution.
    pub delta: f64,
    /// Draw one Δ per latent element instead of one per sample.
    pub elementwise_delta: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            encoder_downsampling: Downsampling::MaxPool,
            channels: vec![16, 32, 64],
            latent_channels: 8,
            kl_weight: 1e-3,
            delta: 5.0,
            elementwise_delta: false,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("channels", "need at least one level, all widths >= 1"));
        }
        if self.latent_channels < 1 {
            return Err(Error::invalid("latent_channels", "must be >= 1"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::invalid("kl_weight", "must be >= 0"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invalid("delta", "must be >= 0"));
        }
        Ok(())
    }

    /// Total downsampling factor per axis.
    pub fn divisor(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn latent_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
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
        Ok(dims.map(|d| d / f))
    }
}

/// Posterior parameters of the latent map, `[latent_channels, x, y, z]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Tensor,
    pub log_var: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VaeLoss {
    pub total: f64,
    pub recon_l1: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<Conv3d>,
    /// Present for strided downsampling only.
    down: Vec<Option<Conv3d>>,
    mu: Conv3d,
    log_var: Conv3d,
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Conv3d,
    convs: Vec<Conv3d>,
    refine: Conv3d,
    output: Conv3d,
}

#[derive(Debug, Clone)]
pub struct Vae {
    cfg: VaeConfig,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

/// Tape handles of one training pass.
pub struct VaeVars {
    pub recon: Var,
    pub mu: Var,
    pub log_var: Var,
}

impl Vae {
    pub fn build(cfg: &VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let ch = &cfg.channels;
        let deepest = *ch.last().expect("validated");

        let mut convs = Vec::new();
        let mut down = Vec::new();
        let mut cin = 1;
        for (i, &c) in ch.iter().enumerate() {
            convs.push(Conv3d::same(&mut store, &format!("enc{i}.conv"), cin, c, 3, &mut rng));
            down.push(match cfg.encoder_downsampling {
                Downsampling::MaxPool => None,
                Downsampling::StridedConv => Some(Conv3d::new(
                    &mut store,
                    &format!("enc{i}.down"),
                    c,
                    c,
                    2,
                    2,
                    0,
                    true,
                    &mut rng,
                )),
            });
            cin = c;
        }
        let encoder = Encoder {
            convs,
            down,
            mu: Conv3d::same(&mut store, "enc.mu", deepest, cfg.latent_channels, 1, &mut rng),
            log_var: Conv3d::same(&mut store, "enc.log_var", deepest, cfg.latent_channels, 1, &mut rng),
        };

        let input = Conv3d::same(&mut store, "dec.input", cfg.latent_channels, deepest, 1, &mut rng);
        let mut dconvs = Vec::new();
        for i in (0..ch.len()).rev() {
            let cout = ch[i.saturating_sub(1)];
            dconvs.push(Conv3d::same(
                &mut store,
                &format!("dec{i}.conv"),
                ch[i],
                cout,
                3,
                &mut rng,
            ));
        }
        let decoder = Decoder {
            input,
            convs: dconvs,
            refine: Conv3d::same(&mut store, "dec.refine", ch[0], ch[0], 3, &mut rng),
            output: Conv3d::same(&mut store, "dec.output", ch[0], 1, 1, &mut rng),
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for (conv, down) in self.encoder.convs.iter().zip(&self.encoder.down) {
            let c = conv.forward(g, h)?;
            h = g.relu(c);
            h = match down {
                None => g.max_pool(h)?,
                Some(d) => {
                    let c = d.forward(g, h)?;
                    g.relu(c)
                }
            };
        }
        Ok((self.encoder.mu.forward(g, h)?, self.encoder.log_var.forward(g, h)?))
    }

    fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let c = self.decoder.input.forward(g, z)?;
        let mut h = g.relu(c);
        for conv in &self.decoder.convs {
            h = g.upsample(h)?;
            let c = conv.forward(g, h)?;
            h = g.relu(c);
        }
        let c = self.decoder.refine.forward(g, h)?;
        h = g.relu(c);
        let out = self.decoder.output.forward(g, h)?;
        Ok(g.sigmoid(out))
    }

    fn input_tensor(&self, x: &Volume) -> Result<Tensor> {
        self.cfg.latent_dims(x.dims())?;
        Tensor::from_channels(x.dims(), &[x.data()])
    }

    pub fn encode(&self, x: &Volume) -> Result<LatentCode> {
        let t = self.input_tensor(x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(t);
        let (mu, lv) = self.encode_graph(&mut g, xv)?;
        Ok(LatentCode {
            mu: g.value(mu).clone(),
            log_var: g.value(lv).clone(),
        })
    }

    pub fn decode(&self, z: &Tensor, spacing: [f64; 3]) -> Result<Volume> {
        if !z.is_spatial() || z.channels() != self.cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                what: "latent code",
                left: z.shape().to_vec(),
                right: vec![self.cfg.latent_channels],
            });
        }
        let mut g = Graph::new(&self.store);
        let zv = g.input(z.clone());
        let out = self.decode_graph(&mut g, zv)?;
        let t = g.value(out);
        Volume::new(
            t.spatial(),
            spacing,
            VolumeRole::Intensity,
            t.data().iter().map(|&v| v as f32).collect(),
        )
    }

    /// Records the reparameterised pass `x → (mu, log_var) → z → recon` with
    /// noise `eps` of the latent shape.
    pub fn forward_graph(&self, g: &mut Graph, x: &Volume, eps: Tensor) -> Result<VaeVars> {
        let t = self.input_tensor(x)?;
        let xv = g.input(t);
        let (mu, log_var) = self.encode_graph(g, xv)?;
        let z = g.reparameterize(mu, log_var, eps)?;
        let recon = self.decode_graph(g, z)?;
        Ok(VaeVars { recon, mu, log_var })
    }

    /// `g(perturb(sample(f(x))))`: the changed-tissue source for SuperMix.
    pub fn perturbed_reconstruction(&self, x: &Volume, rng: &mut Rng) -> Result<Volume> {
        let code = self.encode(x)?;
        let z = sample_latent(&code, rng);
        let (z_tilde, _) = perturb_latent(&z, self.cfg.delta, self.cfg.elementwise_delta, rng)?;
        self.decode(&z_tilde, x.spacing())
    }

    /// Deterministic reconstruction from the posterior mean.
    pub fn reconstruct_mean(&self, x: &Volume) -> Result<Volume> {
        let code = self.encode(x)?;
        self.decode(&code.mu, x.spacing())
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
        let cfg: VaeConfig = serde_json::from_value(ck.config.clone())?;
        let mut vae = Self::build(&cfg, 0)?;
        ck.restore_into(&mut vae.store)?;
        Ok(vae)
    }
}

/// Standard normal noise of the given shape.
pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
    .expect("sized")
}

/// `z = mu + exp(log_var / 2) ⊙ ε`.
pub fn sample_latent(code: &LatentCode, rng: &mut Rng) -> Tensor {
    let eps = standard_normal(code.mu.shape(), rng);
    let data = code
        .mu
        .data()
        .iter()
        .zip(code.log_var.data())
        .zip(eps.data())
        .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
        .collect();
    Tensor::new(code.mu.shape().to_vec(), data).expect("same shape")
}

/// `z · Δ` with `Δ ~ U(−δ, δ)`: a single draw, or one per element. Returns the
/// scaled code and the scalar draw (NaN in elementwise mode).
pub fn perturb_latent(z: &Tensor, delta: f64, elementwise: bool, rng: &mut Rng) -> Result<(Tensor, f64)> {
    if !(delta >= 0.0) {
        return Err(Error::invalid("delta", "must be >= 0"));
    }
    let mut draw = || {
        if delta == 0.0 {
            0.0
        } else {
            rng.random_range(-delta..delta)
        }
    };
    if elementwise {
        let data = z.data().iter().map(|&v| v * draw()).collect();
        Ok((Tensor::new(z.shape().to_vec(), data)?, f64::NAN))
    } else {
        let d = draw();
        Ok((z.map(|v| v * d), d))
    }
}

/// `recon_l1 = mean|x − x̂|`, `kl = −½ mean(1 + log_var − mu² − e^log_var)`.
pub fn vae_loss(x: &[f64], recon: &[f64], mu: &[f64], log_var: &[f64], kl_weight: f64) -> VaeLoss {
    let recon_l1 = x.iter().zip(recon).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    let kl = -0.5
        * mu.iter()
            .zip(log_var)
            .map(|(&m, &l)| 1.0 + l - m * m - l.exp())
            .sum::<f64>()
        / mu.len() as f64;
    VaeLoss {
        total: recon_l1 + kl_weight * kl,
        recon_l1,
        kl,
    }
}

/// [`vae_loss`] with its gradients with respect to `recon`, `mu` and `log_var`.
pub fn vae_loss_grads(
    x: &[f64],
    recon: &[f64],
    mu: &[f64],
    log_var: &[f64],
    kl_weight: f64,
) -> (VaeLoss, [Vec<f64>; 3]) {
    let loss = vae_loss(x, recon, mu, log_var, kl_weight);
    let n = x.len() as f64;
    let m = mu.len() as f64;
    let g_recon = x
        .iter()
        .zip(recon)
        .map(|(&a, &b)| {
            let d = b - a;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let g_mu = mu.iter().map(|&v| kl_weight * v / m).collect();
    let g_lv = log_var.iter().map(|&l| kl_weight * 0.5 * (l.exp() - 1.0) / m).collect();
    (loss, [g_recon, g_mu, g_lv])
}

/// Records the full objective on the tape and returns its root.
pub fn loss_on_graph(g: &mut Graph, x: &Volume, vars: &VaeVars, kl_weight: f64) -> Result<(Var, VaeLoss)> {
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (loss, [gr, gm, gl]) = vae_loss_grads(
        &xs,
        g.value(vars.recon).data(),
        g.value(vars.mu).data(),
        g.value(vars.log_var).data(),
        kl_weight,
    );
    let shape = |v: Var, g: &Graph| g.value(v).shape().to_vec();
    let grads = vec![
        Tensor::new(shape(vars.recon, g), gr)?,
        Tensor::new(shape(vars.mu, g), gm)?,
        Tensor::new(shape(vars.log_var, g), gl)?,
    ];
    let root = g.objective(loss.total, &[vars.recon, vars.mu, vars.log_var], grads)?;
    Ok((root, loss))
}
