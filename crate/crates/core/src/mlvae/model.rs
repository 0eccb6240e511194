use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Activation, DenseLayer, LayerCache, LayerGrads, Matrix, Stack};

/// Added to the Softplus output of the σ head so `ln σ²` stays finite.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Layer widths. Latent widths are shared by `z_D` and `z_C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub n_rps: usize,
    pub trunk: Vec<usize>,
    pub latent_dim: usize,
    pub class_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    pub classifier_hidden: usize,
}

impl Architecture {
    /// Encoder 256→128, 16-d latents, class branch via 64 units, decoder
    /// 128→256, classifier with one 64-unit hidden layer.
    pub fn standard(input_dim: usize, n_rps: usize) -> Self {
        Self {
            input_dim,
            n_rps,
            trunk: vec![256, 128],
            latent_dim: 16,
            class_hidden: 64,
            decoder_hidden: vec![128, 256],
            classifier_hidden: 64,
        }
    }

    /// Same topology with narrow hidden layers, for exhaustive gradient checks.
    pub fn compact(input_dim: usize, n_rps: usize) -> Self {
        Self {
            input_dim,
            n_rps,
            trunk: vec![12, 10],
            latent_dim: 16,
            class_hidden: 8,
            decoder_hidden: vec![10, 12],
            classifier_hidden: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.n_rps,
            self.latent_dim,
            self.class_hidden,
            self.classifier_hidden,
        ];
        if dims.contains(&0)
            || self.trunk.is_empty()
            || self.trunk.contains(&0)
            || self.decoder_hidden.contains(&0)
        {
            return Err(Error::Input(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    Encoder,
    Decoder,
    Classifier,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Encoder, Block::Decoder, Block::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Block::Encoder => "encoder",
            Block::Decoder => "decoder",
            Block::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub trunk: Stack,
    pub mu_head: DenseLayer,
    pub sigma_head: DenseLayer,
    pub class_head: Stack,
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub mu_d: Matrix,
    pub sigma_d: Matrix,
    pub z_c: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlvaeModel {
    arch: Architecture,
    pub encoder: Encoder,
    pub decoder: Stack,
    pub classifier: Stack,
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    trunk: Vec<LayerCache>,
    mu: LayerCache,
    sigma: LayerCache,
    class: Vec<LayerCache>,
    decoder: Vec<LayerCache>,
    classifier: Vec<LayerCache>,
    pub eps: Matrix,
    pub mu_d: Matrix,
    pub sigma_d: Matrix,
    pub z_c: Matrix,
    pub z_d: Matrix,
    pub x_hat: Matrix,
    pub probs: Matrix,
}

/// Loss gradients entering the network at its outputs. Absent entries are zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub x_hat: Option<Matrix>,
    pub mu_d: Option<Matrix>,
    pub sigma_d: Option<Matrix>,
    pub z_c: Option<Matrix>,
    pub logits: Option<Matrix>,
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Vec<LayerGrads>,
    pub mu_head: LayerGrads,
    pub sigma_head: LayerGrads,
    pub class_head: Vec<LayerGrads>,
    pub decoder: Vec<LayerGrads>,
    pub classifier: Vec<LayerGrads>,
}

impl Gradients {
    pub fn blocks(&self, block: Block) -> Vec<&[f64]> {
        match block {
            Block::Encoder => self
                .trunk
                .iter()
                .chain([&self.mu_head, &self.sigma_head])
                .chain(&self.class_head)
                .flat_map(LayerGrads::blocks)
                .collect(),
            Block::Decoder => self.decoder.iter().flat_map(LayerGrads::blocks).collect(),
            Block::Classifier => self
                .classifier
                .iter()
                .flat_map(LayerGrads::blocks)
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        Block::ALL
            .iter()
            .flat_map(|&b| self.blocks(b))
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    pub fn squared_norm(&self, block: Block) -> f64 {
        self.blocks(block)
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum()
    }
}

impl MlvaeModel {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        use Activation::*;
        let mut trunk_dims = vec![arch.input_dim];
        trunk_dims.extend(&arch.trunk);
        let trunk = Stack::he_uniform(&trunk_dims, &vec![Relu; arch.trunk.len()], rng);
        let h = *arch.trunk.last().expect("validated non-empty");
        let mu_head = DenseLayer::he_uniform(h, arch.latent_dim, Identity, rng);
        let sigma_head = DenseLayer::he_uniform(h, arch.latent_dim, Softplus, rng);
        let class_head = Stack::he_uniform(
            &[h, arch.class_hidden, arch.latent_dim],
            &[Relu, Identity],
            rng,
        );
        let mut dec_dims = vec![2 * arch.latent_dim];
        dec_dims.extend(&arch.decoder_hidden);
        dec_dims.push(arch.input_dim);
        let mut dec_acts = vec![Relu; arch.decoder_hidden.len()];
        dec_acts.push(Sigmoid);
        let decoder = Stack::he_uniform(&dec_dims, &dec_acts, rng);
        let classifier = Stack::he_uniform(
            &[arch.latent_dim, arch.classifier_hidden, arch.n_rps],
            &[Relu, Identity],
            rng,
        );
        Ok(Self {
            arch,
            encoder: Encoder {
                trunk,
                mu_head,
                sigma_head,
                class_head,
            },
            decoder,
            classifier,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn n_rps(&self) -> usize {
        self.arch.n_rps
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn param_count(&self, block: Block) -> usize {
        self.blocks(block).iter().map(|s| s.len()).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::Shape {
                op: "encode",
                left: x.shape(),
                right: (x.rows(), self.arch.input_dim),
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &Matrix) -> Result<Encoded> {
        self.check_input(x)?;
        let h = self.encoder.trunk.forward(x)?;
        let mu_d = self.encoder.mu_head.forward(&h)?;
        let sigma_d = self
            .encoder
            .sigma_head
            .forward(&h)?
            .map(|s| s + SIGMA_FLOOR);
        let z_c = self.encoder.class_head.forward(&h)?;
        Ok(Encoded { mu_d, sigma_d, z_c })
    }

    /// Class latents only; skips the domain heads.
    pub fn encode_class(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let h = self.encoder.trunk.forward(x)?;
        self.encoder.class_head.forward(&h)
    }

    /// Reconstruction from `[z_D, z_C]` (domain half first).
    pub fn decode(&self, z_d: &Matrix, z_c: &Matrix) -> Result<Matrix> {
        let d = self.arch.latent_dim;
        if z_d.cols() != d || z_c.cols() != d {
            return Err(Error::Shape {
                op: "decode",
                left: z_d.shape(),
                right: z_c.shape(),
            });
        }
        self.decoder.forward(&z_d.hconcat(z_c)?)
    }

    pub fn logits(&self, z_c: &Matrix) -> Result<Matrix> {
        if z_c.cols() != self.arch.latent_dim {
            return Err(Error::Shape {
                op: "classify",
                left: z_c.shape(),
                right: (z_c.rows(), self.arch.latent_dim),
            });
        }
        self.classifier.forward(z_c)
    }

    pub fn classify(&self, z_c: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(z_c)?))
    }

    /// Full forward pass with caches; `eps` supplies one noise row per sample.
    pub fn forward_train(&self, x: &Matrix, eps: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        if eps.shape() != (x.rows(), self.arch.latent_dim) {
            return Err(Error::Shape {
                op: "forward_train",
                left: eps.shape(),
                right: (x.rows(), self.arch.latent_dim),
            });
        }
        let trunk = self.encoder.trunk.forward_cached(x)?;
        let h = &trunk.last().expect("non-empty trunk").output;
        let mu = self.encoder.mu_head.forward_cached(h)?;
        let sigma = self.encoder.sigma_head.forward_cached(h)?;
        let class = self.encoder.class_head.forward_cached(h)?;
        let mu_d = mu.output.clone();
        let sigma_d = sigma.output.map(|s| s + SIGMA_FLOOR);
        let z_c = class.last().expect("two layers").output.clone();
        let z_d = mu_d.add(&sigma_d.hadamard(eps)?)?;
        let decoder = self.decoder.forward_cached(&z_d.hconcat(&z_c)?)?;
        let x_hat = decoder.last().expect("decoder layers").output.clone();
        let classifier = self.classifier.forward_cached(&z_c)?;
        let probs = softmax_rows(&classifier.last().expect("classifier layers").output);
        Ok(Trace {
            trunk,
            mu,
            sigma,
            class,
            decoder,
            classifier,
            eps: eps.clone(),
            mu_d,
            sigma_d,
            z_c,
            z_d,
            x_hat,
            probs,
        })
    }

    /// Backpropagates the given output gradients to every parameter.
    pub fn backward(&self, trace: &Trace, seeds: &OutputGrads) -> Result<Gradients> {
        let rows = trace.z_c.rows();
        let d = self.arch.latent_dim;
        let zeros = |c: usize| Matrix::zeros(rows, c);

        let mut d_zc = seeds.z_c.clone().unwrap_or_else(|| zeros(d));
        let mut d_zd = zeros(d);

        let decoder = match &seeds.x_hat {
            Some(g) => {
                let (d_in, grads) = self.decoder.backward(&trace.decoder, g)?;
                let (a, b) = d_in.hsplit(d)?;
                d_zd = a;
                d_zc.add_assign(&b)?;
                grads
            }
            None => zero_grads(&self.decoder),
        };

        let classifier = match &seeds.logits {
            Some(g) => {
                let (d_in, grads) = self.classifier.backward(&trace.classifier, g)?;
                d_zc.add_assign(&d_in)?;
                grads
            }
            None => zero_grads(&self.classifier),
        };

        // z_D = μ + σ ⊙ ε
        let mut d_mu = d_zd.clone();
        let mut d_sigma = d_zd.hadamard(&trace.eps)?;
        if let Some(g) = &seeds.mu_d {
            d_mu.add_assign(g)?;
        }
        if let Some(g) = &seeds.sigma_d {
            d_sigma.add_assign(g)?;
        }

        let (mut d_h, mu_head) = self.encoder.mu_head.backward(&trace.mu, &d_mu)?;
        let (d_h2, sigma_head) = self.encoder.sigma_head.backward(&trace.sigma, &d_sigma)?;
        let (d_h3, class_head) = self.encoder.class_head.backward(&trace.class, &d_zc)?;
        d_h.add_assign(&d_h2)?;
        d_h.add_assign(&d_h3)?;
        let (_, trunk) = self.encoder.trunk.backward(&trace.trunk, &d_h)?;

        Ok(Gradients {
            trunk,
            mu_head,
            sigma_head,
            class_head,
            decoder,
            classifier,
        })
    }

    fn encoder_layers(&self) -> impl Iterator<Item = &DenseLayer> {
        let e = &self.encoder;
        e.trunk
            .layers()
            .iter()
            .chain([&e.mu_head, &e.sigma_head])
            .chain(e.class_head.layers())
    }

    pub fn blocks(&self, block: Block) -> Vec<&[f64]> {
        match block {
            Block::Encoder => self.encoder_layers().flat_map(DenseLayer::blocks).collect(),
            Block::Decoder => self.decoder.blocks(),
            Block::Classifier => self.classifier.blocks(),
        }
    }

    pub fn blocks_mut(&mut self, block: Block) -> Vec<&mut [f64]> {
        match block {
            Block::Encoder => {
                let e = &mut self.encoder;
                let mut out = e.trunk.blocks_mut();
                out.extend(e.mu_head.blocks_mut());
                out.extend(e.sigma_head.blocks_mut());
                out.extend(e.class_head.blocks_mut());
                out
            }
            Block::Decoder => self.decoder.blocks_mut(),
            Block::Classifier => self.classifier.blocks_mut(),
        }
    }

    /// `(label, len)` for each parameter array of a block, in storage order.
    pub fn block_layout(&self, block: Block) -> Vec<(String, usize)> {
        let names: Vec<String> = match block {
            Block::Encoder => {
                let n = self.encoder.trunk.layers().len();
                let mut v: Vec<String> = (0..n).map(|i| format!("encoder.trunk.{i}")).collect();
                v.push("encoder.mu_head".into());
                v.push("encoder.sigma_head".into());
                v.push("encoder.class_head.0".into());
                v.push("encoder.class_head.1".into());
                v
            }
            Block::Decoder => (0..self.decoder.layers().len())
                .map(|i| format!("decoder.{i}"))
                .collect(),
            Block::Classifier => (0..self.classifier.layers().len())
                .map(|i| format!("classifier.{i}"))
                .collect(),
        };
        names
            .iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .zip(self.blocks(block).iter().map(|s| s.len()))
            .collect()
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        Block::ALL
            .iter()
            .flat_map(|&b| self.block_layout(b))
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        Block::ALL
            .iter()
            .flat_map(|&b| self.blocks(b))
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = Block::ALL.iter().map(|&b| self.param_count(b)).sum();
        if flat.len() != total {
            return Err(Error::Shape {
                op: "set_flat_params",
                left: (flat.len(), 1),
                right: (total, 1),
            });
        }
        let mut off = 0;
        for b in Block::ALL {
            for s in self.blocks_mut(b) {
                let n = s.len();
                s.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of a block's parameters.
    pub fn checksum(&self, block: Block) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in self.blocks(block) {
            for v in s {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Largest absolute parameter difference within a block.
    pub fn max_abs_diff(&self, other: &Self, block: Block) -> f64 {
        self.blocks(block)
            .iter()
            .zip(other.blocks(block))
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn zero_grads(stack: &Stack) -> Vec<LayerGrads> {
    stack.layers().iter().map(LayerGrads::zeros_like).collect()
}
