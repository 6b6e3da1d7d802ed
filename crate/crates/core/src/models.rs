//! The four networks of the generative pipeline — encoder, conditional
//! generator, critic, and the feature-refinement (FR) network — plus
//! refined-feature assembly, the trainable class-center bank, and
//! checkpoint I/O.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, AdResult, Graph, NodeId};
use crate::data::container::{self, ContainerError};
use crate::nn::{FinalActivation, LinearLayer, Mlp, MlpNodes, MlpSpec, NnError};
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint: {0}")]
    Container(#[from] ContainerError),
    #[error("checkpoint is missing tensor '{0}'")]
    MissingTensor(String),
    #[error("checkpoint tensor '{name}' has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which refinement activation is concatenated as the latent embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HChoice {
    /// First hidden layer of FR (the shallowest, default).
    H1,
    /// Encoded mean of FR.
    Mu,
}

/// Dimensions and activation settings shared by all four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub attr_dim: usize,
    pub latent_dim: usize,
    pub eg_hidden: usize,
    pub fr_hidden: usize,
    pub slope: f64,
    pub n_classes: usize,
}

/// Feature-refinement network: two leaky-ReLU hidden layers, then a linear
/// encoding layer split into a mean and a log-variance row, from which the
/// attribute reconstruction is drawn by reparametrization.
#[derive(Clone, Debug)]
pub struct FrNet {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
    pub enc: LinearLayer,
    pub slope: f64,
}

/// Per-sample FR activations.
#[derive(Clone, Debug)]
pub struct FrOutput {
    pub h1: Tensor,
    pub mu: Tensor,
    pub log_var: Tensor,
    pub a_hat: Tensor,
}

/// Graph-node counterpart of [`FrOutput`].
#[derive(Clone, Copy, Debug)]
pub struct FrNodes {
    pub h1: NodeId,
    pub mu: NodeId,
    pub log_var: NodeId,
    pub a_hat: NodeId,
}

/// FR parameters inserted into a graph.
#[derive(Clone, Debug)]
pub struct FrParamNodes {
    pub l1: (NodeId, NodeId),
    pub l2: (NodeId, NodeId),
    pub enc: (NodeId, NodeId),
}

impl FrNet {
    pub fn init(
        feat_dim: usize,
        attr_dim: usize,
        fr_hidden: usize,
        slope: f64,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mk = |widths: Vec<usize>, s| -> Result<LinearLayer, NnError> {
            Ok(
                crate::nn::init_params(&MlpSpec::new(widths, slope, FinalActivation::None), s)?
                    .remove(0),
            )
        };
        Ok(FrNet {
            l1: mk(vec![feat_dim, fr_hidden], seed)?,
            l2: mk(vec![fr_hidden, 2 * attr_dim], seed.wrapping_add(1))?,
            enc: mk(vec![2 * attr_dim, 2 * attr_dim], seed.wrapping_add(2))?,
            slope,
        })
    }

    pub fn attr_dim(&self) -> usize {
        self.enc.out_dim() / 2
    }

    pub fn insert_leaves(&self, g: &mut Graph) -> FrParamNodes {
        FrParamNodes {
            l1: (g.leaf(self.l1.weight.clone()), g.leaf(self.l1.bias.clone())),
            l2: (g.leaf(self.l2.weight.clone()), g.leaf(self.l2.bias.clone())),
            enc: (
                g.leaf(self.enc.weight.clone()),
                g.leaf(self.enc.bias.clone()),
            ),
        }
    }

    pub fn insert_constants(&self, g: &mut Graph) -> FrParamNodes {
        FrParamNodes {
            l1: (
                g.constant(self.l1.weight.clone()),
                g.constant(self.l1.bias.clone()),
            ),
            l2: (
                g.constant(self.l2.weight.clone()),
                g.constant(self.l2.bias.clone()),
            ),
            enc: (
                g.constant(self.enc.weight.clone()),
                g.constant(self.enc.bias.clone()),
            ),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("l1.w".into(), &mut self.l1.weight),
            ("l1.b".into(), &mut self.l1.bias),
            ("l2.w".into(), &mut self.l2.weight),
            ("l2.b".into(), &mut self.l2.bias),
            ("enc.w".into(), &mut self.enc.weight),
            ("enc.b".into(), &mut self.enc.bias),
        ]
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("l1.w".into(), &self.l1.weight),
            ("l1.b".into(), &self.l1.bias),
            ("l2.w".into(), &self.l2.weight),
            ("l2.b".into(), &self.l2.bias),
            ("enc.w".into(), &self.enc.weight),
            ("enc.b".into(), &self.enc.bias),
        ]
    }

    /// Graph forward: `x [batch, feat] -> (h1, mu, log_var, a_hat)` with a
    /// fixed noise tensor for the reparametrized attribute reconstruction.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &FrParamNodes,
        x: NodeId,
        eps: &Tensor,
    ) -> AdResult<FrNodes> {
        let batch = g
            .value(x)
            .dims2()
            .map(|(b, _)| b)
            .ok_or_else(|| AdError::RankUnsupported {
                op: "fr-forward",
                node: x.0,
                shape: g.value(x).shape().to_vec(),
            })?;
        let attr = self.attr_dim();
        let affine = |g: &mut Graph, (w, b): (NodeId, NodeId), h| -> AdResult<NodeId> {
            let lin = g.matmul(h, w, false, true)?;
            let brow = g.broadcast_row(b, batch)?;
            g.add(lin, brow)
        };
        let h1_pre = affine(g, params.l1, x)?;
        let h1 = g.leaky_relu(h1_pre, self.slope)?;
        let h2_pre = affine(g, params.l2, h1)?;
        let h2 = g.leaky_relu(h2_pre, self.slope)?;
        let encoded = affine(g, params.enc, h2)?;
        let mu = g.slice_last_axis(encoded, 0, attr)?;
        let log_var = g.slice_last_axis(encoded, attr, attr)?;
        let half = g.scalar_mul(log_var, 0.5)?;
        let sigma = g.exp(half)?;
        let eps_node = g.constant(eps.clone());
        let noise = g.mul(sigma, eps_node)?;
        let a_hat = g.add(mu, noise)?;
        Ok(FrNodes {
            h1,
            mu,
            log_var,
            a_hat,
        })
    }

    /// Value-level forward on the shared kernels.
    pub fn forward_values(&self, x: &Tensor, eps: &Tensor) -> Result<FrOutput, ModelError> {
        let (batch, _) = x.dims2().ok_or(AdError::RankUnsupported {
            op: "fr-forward",
            node: 0,
            shape: x.shape().to_vec(),
        })?;
        let attr = self.attr_dim();
        let affine = |l: &LinearLayer, h: &Tensor| {
            let lin = kernels::matmul(h, &l.weight, false, true);
            let brow = kernels::broadcast_row(&l.bias, batch);
            lin.zip_map(&brow, |a, b| a + b)
        };
        let h1 = affine(&self.l1, x).map(|v| kernels::leaky_relu_scalar(v, self.slope));
        let h2 = affine(&self.l2, &h1).map(|v| kernels::leaky_relu_scalar(v, self.slope));
        let encoded = affine(&self.enc, &h2);
        let mu = kernels::slice_cols(&encoded, 0, attr);
        let log_var = kernels::slice_cols(&encoded, attr, attr);
        let sigma = log_var.map(|v| (0.5 * v).exp());
        let a_hat = mu.zip_map(&sigma.zip_map(eps, |s, e| s * e), |m, n| m + n);
        Ok(FrOutput {
            h1,
            mu,
            log_var,
            a_hat,
        })
    }
}

/// All trainable state of the pipeline.
#[derive(Clone, Debug)]
pub struct FreeModel {
    pub encoder: Mlp,
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub fr: FrNet,
    /// One trainable `[n_classes, attr_dim]` center row per class id.
    pub centers: Tensor,
    pub config: ModelConfig,
}

impl FreeModel {
    /// Initialize all networks; centers start at each class's attribute row.
    pub fn init(config: &ModelConfig, attributes: &Tensor, seed: u64) -> Result<Self, ModelError> {
        assert_eq!(
            attributes.dims2(),
            Some((config.n_classes, config.attr_dim)),
            "attribute matrix must be [n_classes, attr_dim]"
        );
        let c = config;
        let enc_spec = MlpSpec::new(
            vec![c.feat_dim + c.attr_dim, c.eg_hidden, 2 * c.latent_dim],
            c.slope,
            FinalActivation::None,
        );
        let gen_spec = MlpSpec::new(
            vec![c.latent_dim + c.attr_dim, c.eg_hidden, c.feat_dim],
            c.slope,
            FinalActivation::None,
        );
        let dis_spec = MlpSpec::new(
            vec![c.feat_dim + c.attr_dim, c.eg_hidden, 1],
            c.slope,
            FinalActivation::None,
        );
        Ok(FreeModel {
            encoder: Mlp::init(&enc_spec, seed)?,
            generator: Mlp::init(&gen_spec, seed.wrapping_add(101))?,
            discriminator: Mlp::init(&dis_spec, seed.wrapping_add(202))?,
            fr: FrNet::init(
                c.feat_dim,
                c.attr_dim,
                c.fr_hidden,
                c.slope,
                seed.wrapping_add(303),
            )?,
            centers: attributes.clone(),
            config: config.clone(),
        })
    }

    /// Reparametrized latent code: `z = mu + exp(log_var / 2) * eps`.
    /// Also returns `(mu, log_var)` for the divergence term.
    pub fn encode(
        &self,
        x: &Tensor,
        a: &Tensor,
        eps: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor), ModelError> {
        let input = kernels::concat_cols(x, a);
        let out = self.encoder.forward_values(&input)?;
        let latent = self.config.latent_dim;
        let mu = kernels::slice_cols(&out, 0, latent);
        let log_var = kernels::slice_cols(&out, latent, latent);
        let sigma = log_var.map(|v| (0.5 * v).exp());
        let z = mu.zip_map(&sigma.zip_map(eps, |s, e| s * e), |m, n| m + n);
        Ok((z, mu, log_var))
    }

    /// Deterministic conditional synthesis `x_hat = G(z, a)`.
    pub fn generate(&self, z: &Tensor, a: &Tensor) -> Result<Tensor, ModelError> {
        let input = kernels::concat_cols(z, a);
        Ok(self.generator.forward_values(&input)?)
    }

    /// Realness score per row, `[batch, 1]`.
    pub fn discriminate(&self, x: &Tensor, a: &Tensor) -> Result<Tensor, ModelError> {
        let input = kernels::concat_cols(x, a);
        Ok(self.discriminator.forward_values(&input)?)
    }

    /// FR activations for a feature batch.
    pub fn fr_forward(&self, x: &Tensor, eps: &Tensor) -> Result<FrOutput, ModelError> {
        self.fr.forward_values(x, eps)
    }

    /// Graph-side encoder forward returning `(z, mu, log_var)` nodes.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        params: &MlpNodes,
        x: NodeId,
        a: NodeId,
        eps: &Tensor,
    ) -> AdResult<(NodeId, NodeId, NodeId)> {
        let input = g.concat_last_axis(x, a)?;
        let out = self.encoder.forward_graph(g, params, input)?;
        let latent = self.config.latent_dim;
        let mu = g.slice_last_axis(out, 0, latent)?;
        let log_var = g.slice_last_axis(out, latent, latent)?;
        let half = g.scalar_mul(log_var, 0.5)?;
        let sigma = g.exp(half)?;
        let eps_node = g.constant(eps.clone());
        let noise = g.mul(sigma, eps_node)?;
        let z = g.add(mu, noise)?;
        Ok((z, mu, log_var))
    }
}

/// Fully refined feature: the original feature concatenated with the chosen
/// FR embedding and the attribute reconstruction. Slicing the result back
/// recovers `x` exactly.
pub fn refine(x: &Tensor, fr: &FrOutput, h_choice: HChoice) -> Result<Tensor, ModelError> {
    let (bx, _) = x.dims2().ok_or(AdError::RankUnsupported {
        op: "refine",
        node: 0,
        shape: x.shape().to_vec(),
    })?;
    let h = match h_choice {
        HChoice::H1 => &fr.h1,
        HChoice::Mu => &fr.mu,
    };
    let (bh, _) = h.dims2().expect("fr outputs are rank-2");
    if bx != bh {
        return Err(AdError::ShapeMismatch {
            op: "refine",
            nodes: vec![],
            shapes: vec![x.shape().to_vec(), h.shape().to_vec()],
        }
        .into());
    }
    let xh = kernels::concat_cols(x, h);
    Ok(kernels::concat_cols(&xh, &fr.a_hat))
}

// ---- checkpoint I/O -------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

/// Names and tensors of every model parameter plus shape metadata, in the
/// order they are written to a checkpoint.
fn named_tensors(model: &FreeModel) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let c = &model.config;
    let meta = Tensor::vector(vec![
        c.feat_dim as f64,
        c.attr_dim as f64,
        c.latent_dim as f64,
        c.eg_hidden as f64,
        c.fr_hidden as f64,
        c.slope,
        c.n_classes as f64,
    ]);
    out.push(("meta".to_string(), meta));
    for (name, t) in model.encoder.params() {
        out.push((format!("e.{name}"), t.clone()));
    }
    for (name, t) in model.generator.params() {
        out.push((format!("g.{name}"), t.clone()));
    }
    for (name, t) in model.discriminator.params() {
        out.push((format!("d.{name}"), t.clone()));
    }
    for (name, t) in model.fr.params() {
        out.push((format!("fr.{name}"), t.clone()));
    }
    out.push(("centers".to_string(), model.centers.clone()));
    out
}

/// Write the model as a `CKPT` container: magic, version, tensor count,
/// then per tensor `(name length, name bytes, rank, extents, f32 data)`,
/// all little-endian.
pub fn save_checkpoint(model: &FreeModel, path: &Path) -> Result<(), ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    container::put_u32(&mut buf, CKPT_VERSION);
    let tensors = named_tensors(model);
    container::put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in &tensors {
        container::put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        container::put_u32(&mut buf, t.shape().len() as u32);
        for &e in t.shape() {
            container::put_u32(&mut buf, e as u32);
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a `CKPT` container back into a model. Values round-trip at f32
/// resolution, matching the on-disk format.
pub fn load_checkpoint(path: &Path) -> Result<FreeModel, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = container::Reader::new(&bytes);
    r.expect_magic(CKPT_MAGIC)?;
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version).into());
    }
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| ContainerError::Corrupt("tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32_vec(n)?;
        let t = Tensor::new(shape, data).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
        tensors.push((name, t));
    }

    let take = |name: &str| -> Result<Tensor, ModelError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    };
    let meta = take("meta")?;
    if meta.len() != 7 {
        return Err(ModelError::TensorShape {
            name: "meta".into(),
            got: meta.shape().to_vec(),
            expected: vec![7],
        });
    }
    let md = meta.data();
    let config = ModelConfig {
        feat_dim: md[0] as usize,
        attr_dim: md[1] as usize,
        latent_dim: md[2] as usize,
        eg_hidden: md[3] as usize,
        fr_hidden: md[4] as usize,
        slope: md[5],
        n_classes: md[6] as usize,
    };

    let layer = |prefix: &str, idx: usize| -> Result<LinearLayer, ModelError> {
        Ok(LinearLayer {
            weight: take(&format!("{prefix}.l{idx}.w"))?,
            bias: take(&format!("{prefix}.l{idx}.b"))?,
        })
    };
    let mlp = |prefix: &str, final_activation| -> Result<Mlp, ModelError> {
        Ok(Mlp {
            layers: vec![layer(prefix, 0)?, layer(prefix, 1)?],
            slope: config.slope,
            final_activation,
        })
    };
    let fr = FrNet {
        l1: LinearLayer {
            weight: take("fr.l1.w")?,
            bias: take("fr.l1.b")?,
        },
        l2: LinearLayer {
            weight: take("fr.l2.w")?,
            bias: take("fr.l2.b")?,
        },
        enc: LinearLayer {
            weight: take("fr.enc.w")?,
            bias: take("fr.enc.b")?,
        },
        slope: config.slope,
    };
    let centers = take("centers")?;
    if centers.dims2() != Some((config.n_classes, config.attr_dim)) {
        return Err(ModelError::TensorShape {
            name: "centers".into(),
            got: centers.shape().to_vec(),
            expected: vec![config.n_classes, config.attr_dim],
        });
    }
    Ok(FreeModel {
        encoder: mlp("e", FinalActivation::None)?,
        generator: mlp("g", FinalActivation::None)?,
        discriminator: mlp("d", FinalActivation::None)?,
        fr,
        centers,
        config,
    })
}
