//! Loss terms of the joint objective: divergence and reconstruction for the
//! variational path, critic losses with a gradient-norm penalty, the
//! margin-based center loss on FR's encoded mean, and the attribute
//! cycle-consistency penalty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId};
use crate::nn::{Mlp, MlpNodes};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("sample {index} has identical anchor and contrast labels ({label})")]
    LabelConflict { index: usize, label: u32 },
    #[error("label {label} outside center bank with {n_classes} classes")]
    InvalidLabel { label: u32, n_classes: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// Weights controlling the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Gradient-penalty coefficient of the critic loss.
    pub lambda_gp: f64,
    /// Weight of the margin-based center loss.
    pub lambda_samc: f64,
    /// Weight of the attribute cycle-consistency loss.
    pub lambda_ra: f64,
    /// Balance between intra-class pull and inter-class push, in `[0, 1]`.
    pub gamma: f64,
    /// Margin between intra- and inter-class squared distances.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gp: 10.0,
            lambda_samc: 0.5,
            lambda_ra: 0.001,
            gamma: 0.8,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_gp < 0.0 || self.lambda_samc < 0.0 || self.lambda_ra < 0.0 {
            return Err(LossError::InvalidWeights(
                "loss weights must be non-negative".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LossError::InvalidWeights(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.delta < 0.0 {
            return Err(LossError::InvalidWeights(format!(
                "delta {} must be non-negative",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Batch mean of `-1/2 * sum_d (1 + log_var - mu^2 - exp(log_var))`, the
/// divergence of a diagonal Gaussian from the standard normal prior.
pub fn kl_gaussian(g: &mut Graph, mu: NodeId, log_var: NodeId) -> Result<NodeId, LossError> {
    let shape = g.eval(mu)?.shape().to_vec();
    if g.eval(log_var)?.shape() != shape.as_slice() {
        return Err(AdError::ShapeMismatch {
            op: "kl-gaussian",
            nodes: vec![mu.0, log_var.0],
            shapes: vec![shape, g.value(log_var).shape().to_vec()],
        }
        .into());
    }
    let (batch, dim) = g.value(mu).dims2().ok_or(AdError::RankUnsupported {
        op: "kl-gaussian",
        node: mu.0,
        shape: shape.clone(),
    })?;
    let ones = g.ones_const(&[batch, dim]);
    let mu_sq = g.square(mu)?;
    let var = g.exp(log_var)?;
    let t1 = g.add(ones, log_var)?;
    let t2 = g.sub(t1, mu_sq)?;
    let t3 = g.sub(t2, var)?;
    let ones_col = g.ones_const(&[dim, 1]);
    let row_sum = g.matmul(t3, ones_col, false, false)?;
    let mean = g.reduce_mean(row_sum)?;
    Ok(g.scalar_mul(mean, -0.5)?)
}

/// Mean squared error over batch and feature dimensions.
pub fn recon_loss(g: &mut Graph, x: NodeId, x_hat: NodeId) -> Result<NodeId, LossError> {
    let diff = g.sub(x, x_hat)?;
    let sq = g.square(diff)?;
    Ok(g.reduce_mean(sq)?)
}

/// Critic score node for a feature batch already in the graph.
fn critic_scores(
    g: &mut Graph,
    critic: &Mlp,
    params: &MlpNodes,
    x: NodeId,
    a: NodeId,
) -> Result<NodeId, LossError> {
    let input = g.concat_last_axis(x, a)?;
    Ok(critic.forward_graph(g, params, input)?)
}

/// Mean over the batch of `(||d D(x', a) / d x'|| - 1)^2` on per-sample
/// interpolates `x' = tau * x + (1 - tau) * x_hat`. Built through a nested
/// backward pass, so the result is differentiable w.r.t. the critic's
/// parameters.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &Mlp,
    params: &MlpNodes,
    x_real: &Tensor,
    x_fake: &Tensor,
    a: &Tensor,
    tau: &Tensor,
) -> Result<NodeId, LossError> {
    let (batch, feat) = x_real.dims2().ok_or(AdError::RankUnsupported {
        op: "gradient-penalty",
        node: 0,
        shape: x_real.shape().to_vec(),
    })?;
    assert_eq!(x_fake.shape(), x_real.shape(), "real/fake shape mismatch");
    assert_eq!(tau.dims2(), Some((batch, 1)), "tau must be [batch, 1]");
    let mut interp = Vec::with_capacity(batch * feat);
    for i in 0..batch {
        let t = tau.data()[i];
        for j in 0..feat {
            let xr = x_real.data()[i * feat + j];
            let xf = x_fake.data()[i * feat + j];
            interp.push(t * xr + (1.0 - t) * xf);
        }
    }
    let x_interp = g.leaf(Tensor::matrix(batch, feat, interp));
    let a_node = g.constant(a.clone());
    let scores = critic_scores(g, critic, params, x_interp, a_node)?;
    // row-wise input gradients via the gradient of the score sum
    let total = g.reduce_sum(scores)?;
    let grads = g.backward(total, &[x_interp])?;
    let gx = grads[&x_interp];
    Ok(g.grad_norm_penalty(gx)?)
}

/// Critic objective: `mean D(x_hat) - mean D(x) + lambda_gp * penalty`,
/// minimized by the critic. Fake features are detached.
#[allow(clippy::too_many_arguments)]
pub fn wgan_d_loss(
    g: &mut Graph,
    critic: &Mlp,
    params: &MlpNodes,
    x_real: &Tensor,
    x_fake: &Tensor,
    a: &Tensor,
    tau: &Tensor,
    weights: &LossWeights,
) -> Result<NodeId, LossError> {
    let x_real_node = g.constant(x_real.clone());
    let x_fake_node = g.constant(x_fake.clone());
    let a_node = g.constant(a.clone());
    let real_scores = critic_scores(g, critic, params, x_real_node, a_node)?;
    let fake_scores = critic_scores(g, critic, params, x_fake_node, a_node)?;
    let mean_real = g.reduce_mean(real_scores)?;
    let mean_fake = g.reduce_mean(fake_scores)?;
    let gap = g.sub(mean_fake, mean_real)?;
    let penalty = gradient_penalty(g, critic, params, x_real, x_fake, a, tau)?;
    let weighted = g.scalar_mul(penalty, weights.lambda_gp)?;
    Ok(g.add(gap, weighted)?)
}

/// Generator objective from the adversarial game: `-mean D(x_hat, a)` with
/// `x_hat` connected to the generator.
pub fn wgan_g_loss(
    g: &mut Graph,
    critic: &Mlp,
    params: &MlpNodes,
    x_hat: NodeId,
    a: NodeId,
) -> Result<NodeId, LossError> {
    let scores = critic_scores(g, critic, params, x_hat, a)?;
    let mean = g.reduce_mean(scores)?;
    Ok(g.scalar_mul(mean, -1.0)?)
}

fn one_hot(labels: &[u32], n_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * n_classes + l as usize] = 1.0;
    }
    Tensor::matrix(labels.len(), n_classes, data)
}

/// Squared Euclidean distance per row between `x` and the center rows
/// selected by `labels`: `[batch, 1]`.
fn row_distances_to_centers(
    g: &mut Graph,
    x: NodeId,
    centers: NodeId,
    labels: &[u32],
    n_classes: usize,
) -> Result<NodeId, LossError> {
    let select = g.constant(one_hot(labels, n_classes));
    let picked = g.matmul(select, centers, false, false)?;
    let diff = g.sub(x, picked)?;
    let sq = g.square(diff)?;
    let dim = g.value(sq).dims2().expect("rank-2").1;
    let ones_col = g.ones_const(&[dim, 1]);
    Ok(g.matmul(sq, ones_col, false, false)?)
}

/// Margin-based center loss on FR's encoded mean:
/// `mean max(0, delta + gamma * ||mu - c_y||^2 - (1 - gamma) * ||mu - c_y'||^2)`.
/// Differentiable w.r.t. both `mu` and the center bank; the hinge
/// subgradient at the kink is 0.
pub fn samc_loss(
    g: &mut Graph,
    mu: NodeId,
    y: &[u32],
    y_prime: &[u32],
    centers: NodeId,
    weights: &LossWeights,
) -> Result<NodeId, LossError> {
    let n_classes = g
        .eval(centers)?
        .dims2()
        .ok_or(AdError::RankUnsupported {
            op: "samc-loss",
            node: centers.0,
            shape: g.value(centers).shape().to_vec(),
        })?
        .0;
    let batch = g
        .value(mu)
        .dims2()
        .ok_or(AdError::RankUnsupported {
            op: "samc-loss",
            node: mu.0,
            shape: g.value(mu).shape().to_vec(),
        })?
        .0;
    if y.len() != batch || y_prime.len() != batch {
        return Err(AdError::ShapeMismatch {
            op: "samc-loss",
            nodes: vec![mu.0],
            shapes: vec![vec![batch], vec![y.len()], vec![y_prime.len()]],
        }
        .into());
    }
    for (i, (&a, &b)) in y.iter().zip(y_prime).enumerate() {
        if a == b {
            return Err(LossError::LabelConflict { index: i, label: a });
        }
        for &l in [a, b].iter() {
            if l as usize >= n_classes {
                return Err(LossError::InvalidLabel {
                    label: l,
                    n_classes,
                });
            }
        }
    }
    let intra = row_distances_to_centers(g, mu, centers, y, n_classes)?;
    let inter = row_distances_to_centers(g, mu, centers, y_prime, n_classes)?;
    let pull = g.scalar_mul(intra, weights.gamma)?;
    let push = g.scalar_mul(inter, 1.0 - weights.gamma)?;
    let margin = g.constant(Tensor::filled(&[batch, 1], weights.delta));
    let gap = g.sub(pull, push)?;
    let pre_hinge = g.add(margin, gap)?;
    let hinged = g.leaky_relu(pre_hinge, 0.0)?;
    Ok(g.reduce_mean(hinged)?)
}

/// Attribute cycle-consistency: batch mean of the L1 norm of
/// `a_hat_real - a` plus batch mean of the L1 norm of `a_hat_syn - a`.
pub fn cyc_loss(
    g: &mut Graph,
    a_hat_real: NodeId,
    a_hat_syn: NodeId,
    a: &Tensor,
) -> Result<NodeId, LossError> {
    let a_node = g.constant(a.clone());
    let mut halves = Vec::with_capacity(2);
    for a_hat in [a_hat_real, a_hat_syn] {
        let diff = g.sub(a_hat, a_node)?;
        let absd = g.abs(diff)?;
        let dim = g
            .value(absd)
            .dims2()
            .ok_or(AdError::RankUnsupported {
                op: "cyc-loss",
                node: a_hat.0,
                shape: g.value(absd).shape().to_vec(),
            })?
            .1;
        let ones_col = g.ones_const(&[dim, 1]);
        let row_l1 = g.matmul(absd, ones_col, false, false)?;
        halves.push(g.reduce_mean(row_l1)?);
    }
    Ok(g.add(halves[0], halves[1])?)
}

/// Weighted joint objective:
/// `l_v + l_w + lambda_samc * l_samc + lambda_ra * l_ra`.
pub fn total_loss(
    g: &mut Graph,
    l_v: NodeId,
    l_w: NodeId,
    l_samc: NodeId,
    l_ra: NodeId,
    weights: &LossWeights,
) -> Result<NodeId, LossError> {
    let samc = g.scalar_mul(l_samc, weights.lambda_samc)?;
    let ra = g.scalar_mul(l_ra, weights.lambda_ra)?;
    let base = g.add(l_v, l_w)?;
    let with_samc = g.add(base, samc)?;
    Ok(g.add(with_samc, ra)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients_close, BuildFn, DEFAULT_STEP};
    use crate::nn::{FinalActivation, MlpSpec};
    use crate::rng::{named_rng, randn_tensor, uniform_tensor};
    use crate::tensor::Precision;

    fn graph() -> Graph {
        Graph::new(Precision::F64)
    }

    #[test]
    fn kl_zero_at_prior() {
        let mut g = graph();
        let mu = g.leaf(Tensor::zeros(&[3, 4]));
        let lv = g.leaf(Tensor::zeros(&[3, 4]));
        let kl = kl_gaussian(&mut g, mu, lv).unwrap();
        assert_eq!(g.value(kl).scalar_value(), 0.0);
    }

    #[test]
    fn kl_unit_mean_is_half_per_dimension() {
        let mut g = graph();
        let mu = g.leaf(Tensor::ones(&[2, 1]));
        let lv = g.leaf(Tensor::zeros(&[2, 1]));
        let kl = kl_gaussian(&mut g, mu, lv).unwrap();
        assert!((g.value(kl).scalar_value() - 0.5).abs() < 1e-12);

        let mut g = graph();
        let mu = g.leaf(Tensor::ones(&[2, 3]));
        let lv = g.leaf(Tensor::zeros(&[2, 3]));
        let kl = kl_gaussian(&mut g, mu, lv).unwrap();
        assert!((g.value(kl).scalar_value() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_prior() {
        let mut rng = named_rng(1, "kl");
        for _ in 0..50 {
            let mu = randn_tensor(&mut rng, 2, 3);
            let lv = randn_tensor(&mut rng, 2, 3);
            let mut g = graph();
            let m = g.leaf(mu);
            let l = g.leaf(lv);
            let kl = kl_gaussian(&mut g, m, l).unwrap();
            assert!(g.value(kl).scalar_value() > 0.0);
        }
    }

    #[test]
    fn kl_gradient_passes_finite_differences() {
        let build: BuildFn = &|g, ids| {
            kl_gaussian(g, ids[0], ids[1]).map_err(|e| match e {
                LossError::Ad(a) => a,
                other => panic!("{other}"),
            })
        };
        let mut rng = named_rng(2, "klgrad");
        let leaves = [randn_tensor(&mut rng, 3, 4), randn_tensor(&mut rng, 3, 4)];
        assert_gradients_close(build, &leaves, DEFAULT_STEP, 1e-4);
    }

    #[test]
    fn recon_matches_naive_mse() {
        let mut g = graph();
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let y = g.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let l = recon_loss(&mut g, x, y).unwrap();
        assert_eq!(g.value(l).scalar_value(), 1.0);

        let mut rng = named_rng(3, "mse");
        let a = randn_tensor(&mut rng, 5, 7);
        let b = randn_tensor(&mut rng, 5, 7);
        let mut g = graph();
        let an = g.leaf(a.clone());
        let bn = g.leaf(b.clone());
        let l = recon_loss(&mut g, an, bn).unwrap();
        // two-loop oracle
        let mut total = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                let d = a.data()[i * 7 + j] - b.data()[i * 7 + j];
                total += d * d;
            }
        }
        assert!((g.value(l).scalar_value() - total / 35.0).abs() < 1e-12);

        let mut g = graph();
        let xn = g.leaf(a.clone());
        let same = g.leaf(a);
        let l = recon_loss(&mut g, xn, same).unwrap();
        assert_eq!(g.value(l).scalar_value(), 0.0);
    }

    fn linear_critic(w: Vec<f64>, in_dim: usize) -> (Mlp, Tensor) {
        // single linear layer critic over [x; a]
        let mut critic = Mlp::init(
            &MlpSpec::new(vec![in_dim, 1], 0.02, FinalActivation::None),
            1,
        )
        .unwrap();
        critic.layers[0].weight = Tensor::matrix(1, in_dim, w.clone());
        critic.layers[0].bias = Tensor::zeros(&[1, 1]);
        (critic, Tensor::matrix(1, in_dim, w))
    }

    #[test]
    fn penalty_zero_for_unit_gradient_critic() {
        // w_x has unit norm, attribute weights zero
        let (critic, _) = linear_critic(vec![0.6, 0.8, 0.0], 3);
        let x = Tensor::matrix(2, 2, vec![0.3, -0.4, 1.0, 0.2]);
        let x_hat = Tensor::matrix(2, 2, vec![0.1, 0.7, -0.3, 0.5]);
        let a = Tensor::matrix(2, 1, vec![0.5, -0.25]);
        let tau = Tensor::matrix(2, 1, vec![0.3, 0.9]);
        let mut g = graph();
        let params = critic.insert_leaves(&mut g);
        let pen = gradient_penalty(&mut g, &critic, &params, &x, &x_hat, &a, &tau).unwrap();
        assert!(g.value(pen).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn penalty_one_for_doubling_critic_any_tau() {
        // D(x) = 2x in one dimension
        let (critic, _) = linear_critic(vec![2.0, 0.0], 2);
        let x = Tensor::matrix(1, 1, vec![0.7]);
        let x_hat = Tensor::matrix(1, 1, vec![-0.2]);
        let a = Tensor::matrix(1, 1, vec![0.4]);
        for t in [0.0, 0.31, 0.77, 1.0] {
            let tau = Tensor::matrix(1, 1, vec![t]);
            let mut g = graph();
            let params = critic.insert_leaves(&mut g);
            let pen = gradient_penalty(&mut g, &critic, &params, &x, &x_hat, &a, &tau).unwrap();
            assert!((g.value(pen).scalar_value() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_invariant_to_tau_when_real_equals_fake() {
        let critic =
            Mlp::init(&MlpSpec::new(vec![4, 6, 1], 0.02, FinalActivation::None), 5).unwrap();
        let mut rng = named_rng(6, "gp");
        let x = randn_tensor(&mut rng, 3, 3);
        let a = randn_tensor(&mut rng, 3, 1);
        let mut values = Vec::new();
        for _ in 0..3 {
            let tau = uniform_tensor(&mut rng, 3, 1);
            let mut g = graph();
            let params = critic.insert_leaves(&mut g);
            let pen = gradient_penalty(&mut g, &critic, &params, &x, &x, &a, &tau).unwrap();
            values.push(g.value(pen).scalar_value());
        }
        assert_eq!(values[0], values[1]);
        assert_eq!(values[1], values[2]);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        // two-layer critic, compare d penalty / d params against central FD
        let critic =
            Mlp::init(&MlpSpec::new(vec![5, 4, 1], 0.02, FinalActivation::None), 8).unwrap();
        let mut rng = named_rng(9, "gpfd");
        let x = randn_tensor(&mut rng, 3, 3);
        let x_hat = randn_tensor(&mut rng, 3, 3);
        let a = randn_tensor(&mut rng, 3, 2);
        let tau = uniform_tensor(&mut rng, 3, 1);
        let critic2 = critic.clone();
        let build: BuildFn = &|g, ids| {
            let params: MlpNodes = vec![(ids[0], ids[1]), (ids[2], ids[3])];
            gradient_penalty(g, &critic2, &params, &x, &x_hat, &a, &tau).map_err(|e| match e {
                LossError::Ad(a) => a,
                other => panic!("{other}"),
            })
        };
        let leaves = [
            critic.layers[0].weight.clone(),
            critic.layers[0].bias.clone(),
            critic.layers[1].weight.clone(),
            critic.layers[1].bias.clone(),
        ];
        assert_gradients_close(build, &leaves, DEFAULT_STEP, 1e-3);
    }

    #[test]
    fn constant_critic_pays_full_penalty() {
        // zero weights leave only the bias: zero input gradient, penalty 1
        let mut critic =
            Mlp::init(&MlpSpec::new(vec![3, 1], 0.02, FinalActivation::None), 1).unwrap();
        critic.layers[0].weight = Tensor::zeros(&[1, 3]);
        critic.layers[0].bias = Tensor::matrix(1, 1, vec![4.2]);
        let x = Tensor::matrix(2, 2, vec![0.3, 0.5, -0.1, 0.9]);
        let x_hat = Tensor::matrix(2, 2, vec![1.3, -0.5, 0.6, 0.1]);
        let a = Tensor::matrix(2, 1, vec![0.2, 0.8]);
        let tau = Tensor::matrix(2, 1, vec![0.4, 0.6]);
        let w = LossWeights::default();
        let mut g = graph();
        let params = critic.insert_leaves(&mut g);
        let loss = wgan_d_loss(&mut g, &critic, &params, &x, &x_hat, &a, &tau, &w).unwrap();
        assert!((g.value(loss).scalar_value() - w.lambda_gp).abs() < 1e-12);
    }

    #[test]
    fn d_loss_reduces_to_penalty_when_real_equals_fake() {
        let critic =
            Mlp::init(&MlpSpec::new(vec![4, 5, 1], 0.02, FinalActivation::None), 3).unwrap();
        let mut rng = named_rng(12, "dl");
        let x = randn_tensor(&mut rng, 4, 3);
        let a = randn_tensor(&mut rng, 4, 1);
        let tau = uniform_tensor(&mut rng, 4, 1);
        let w = LossWeights {
            lambda_gp: 10.0,
            ..LossWeights::default()
        };
        let mut g = graph();
        let params = critic.insert_leaves(&mut g);
        let loss = wgan_d_loss(&mut g, &critic, &params, &x, &x, &a, &tau, &w).unwrap();
        let mut g2 = graph();
        let params2 = critic.insert_leaves(&mut g2);
        let pen = gradient_penalty(&mut g2, &critic, &params2, &x, &x, &a, &tau).unwrap();
        let expect = 10.0 * g2.value(pen).scalar_value();
        assert!((g.value(loss).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn g_loss_is_negative_mean_score() {
        for score in [0.0, 5.0] {
            let mut critic =
                Mlp::init(&MlpSpec::new(vec![3, 1], 0.02, FinalActivation::None), 1).unwrap();
            critic.layers[0].weight = Tensor::zeros(&[1, 3]);
            critic.layers[0].bias = Tensor::matrix(1, 1, vec![score]);
            let mut g = graph();
            let params = critic.insert_constants(&mut g);
            let x_hat = g.leaf(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]));
            let a = g.constant(Tensor::matrix(2, 1, vec![0.5, 0.6]));
            let l = wgan_g_loss(&mut g, &critic, &params, x_hat, a).unwrap();
            assert_eq!(g.value(l).scalar_value(), -score);
        }
    }

    #[test]
    fn g_loss_gradient_reaches_generator_parameters() {
        let critic = Mlp::init(
            &MlpSpec::new(vec![4, 5, 1], 0.02, FinalActivation::None),
            20,
        )
        .unwrap();
        let generator = Mlp::init(
            &MlpSpec::new(vec![3, 4, 3], 0.02, FinalActivation::None),
            21,
        )
        .unwrap();
        let mut rng = named_rng(22, "gg");
        let z = randn_tensor(&mut rng, 2, 3);
        let a = randn_tensor(&mut rng, 2, 1);
        let mut g = graph();
        let gen_params = generator.insert_leaves(&mut g);
        let critic_params = critic.insert_constants(&mut g);
        let zn = g.constant(z);
        let x_hat = generator.forward_graph(&mut g, &gen_params, zn).unwrap();
        let an = g.constant(a);
        let loss = wgan_g_loss(&mut g, &critic, &critic_params, x_hat, an).unwrap();
        let wrt: Vec<NodeId> = gen_params.iter().flat_map(|(w, b)| [*w, *b]).collect();
        let grads = g.backward(loss, &wrt).unwrap();
        let any_nonzero = wrt
            .iter()
            .any(|id| g.value(grads[id]).data().iter().any(|&v| v != 0.0));
        assert!(any_nonzero, "generator parameters receive no gradient");
    }

    fn centers_2d(g: &mut Graph, rows: Vec<f64>) -> NodeId {
        g.leaf(Tensor::matrix(rows.len(), 1, rows))
    }

    #[test]
    fn samc_worked_examples() {
        // gamma = 1, mu at its own center: hinge keeps the margin
        let w = LossWeights {
            gamma: 1.0,
            delta: 0.7,
            ..LossWeights::default()
        };
        let mut g = graph();
        let centers = centers_2d(&mut g, vec![2.0, 5.0]);
        let mu = g.leaf(Tensor::matrix(1, 1, vec![2.0]));
        let l = samc_loss(&mut g, mu, &[0], &[1], centers, &w).unwrap();
        assert!((g.value(l).scalar_value() - 0.7).abs() < 1e-12);

        // gamma = 0 and a far contrast center: hinge inactive
        let w = LossWeights {
            gamma: 0.0,
            delta: 1.0,
            ..LossWeights::default()
        };
        let mut g = graph();
        let centers = centers_2d(&mut g, vec![0.0, 10.0]);
        let mu = g.leaf(Tensor::matrix(1, 1, vec![0.0]));
        let l = samc_loss(&mut g, mu, &[0], &[1], centers, &w).unwrap();
        assert_eq!(g.value(l).scalar_value(), 0.0);

        // gamma = 0.5, delta = 1, intra 4, inter 2 -> max(0, 1 + 2 - 1) = 2
        let w = LossWeights {
            gamma: 0.5,
            delta: 1.0,
            ..LossWeights::default()
        };
        let mut g = graph();
        let centers = centers_2d(&mut g, vec![2.0, 2.0f64.sqrt()]);
        let mu = g.leaf(Tensor::matrix(1, 1, vec![0.0]));
        let l = samc_loss(&mut g, mu, &[0], &[1], centers, &w).unwrap();
        assert!((g.value(l).scalar_value() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn samc_rejects_equal_or_invalid_labels() {
        let w = LossWeights::default();
        let mut g = graph();
        let centers = centers_2d(&mut g, vec![0.0, 1.0]);
        let mu = g.leaf(Tensor::matrix(1, 1, vec![0.0]));
        assert!(matches!(
            samc_loss(&mut g, mu, &[1], &[1], centers, &w),
            Err(LossError::LabelConflict { index: 0, label: 1 })
        ));
        assert!(matches!(
            samc_loss(&mut g, mu, &[0], &[7], centers, &w),
            Err(LossError::InvalidLabel { label: 7, .. })
        ));
    }

    #[test]
    fn samc_margin_shift_is_affine_while_hinge_active() {
        let mut rng = named_rng(30, "samc");
        let mu_t = randn_tensor(&mut rng, 4, 3);
        let centers_t = randn_tensor(&mut rng, 5, 3);
        let y = [0u32, 1, 2, 3];
        let yp = [1u32, 2, 3, 4];
        let eval = |delta: f64| {
            let w = LossWeights {
                gamma: 0.5,
                delta,
                ..LossWeights::default()
            };
            let mut g = graph();
            let centers = g.leaf(centers_t.clone());
            let mu = g.leaf(mu_t.clone());
            let l = samc_loss(&mut g, mu, &y, &yp, centers, &w).unwrap();
            g.value(l).scalar_value()
        };
        // large margins keep every hinge active, so the loss is affine in delta
        let (d1, d2) = (50.0, 75.0);
        let (l1, l2) = (eval(d1), eval(d2));
        assert!((l2 - l1 - (d2 - d1)).abs() < 1e-9);
    }

    #[test]
    fn samc_monotonicity_where_hinge_active() {
        // moving mu toward its center lowers the loss; toward the contrast
        // center raises it
        let w = LossWeights {
            gamma: 0.5,
            delta: 10.0,
            ..LossWeights::default()
        };
        let eval = |mu_v: f64| {
            let mut g = graph();
            let centers = centers_2d(&mut g, vec![0.0, 4.0]);
            let mu = g.leaf(Tensor::matrix(1, 1, vec![mu_v]));
            let l = samc_loss(&mut g, mu, &[0], &[1], centers, &w).unwrap();
            g.value(l).scalar_value()
        };
        assert!(eval(1.0) < eval(2.0));
        assert!(eval(3.9) > eval(3.0));
    }

    #[test]
    fn samc_gradient_passes_finite_differences() {
        let mut rng = named_rng(31, "samcfd");
        let mu_t = randn_tensor(&mut rng, 3, 2);
        let centers_t = randn_tensor(&mut rng, 4, 2);
        let y = [0u32, 1, 2];
        let yp = [3u32, 0, 1];
        let w = LossWeights {
            gamma: 0.6,
            delta: 5.0,
            ..LossWeights::default()
        };
        let build: BuildFn = &|g, ids| {
            samc_loss(g, ids[0], &y, &yp, ids[1], &w).map_err(|e| match e {
                LossError::Ad(a) => a,
                other => panic!("{other}"),
            })
        };
        assert_gradients_close(build, &[mu_t, centers_t], DEFAULT_STEP, 1e-4);
    }

    #[test]
    fn cyc_worked_examples_and_oracle() {
        let mut g = graph();
        let a = Tensor::matrix(1, 1, vec![0.5]);
        let real = g.leaf(Tensor::matrix(1, 1, vec![1.5]));
        let syn = g.leaf(Tensor::matrix(1, 1, vec![-1.5]));
        let l = cyc_loss(&mut g, real, syn, &a).unwrap();
        assert!((g.value(l).scalar_value() - 3.0).abs() < 1e-12);

        let mut g = graph();
        let exact = g.leaf(a.clone());
        let exact2 = g.leaf(a.clone());
        let l = cyc_loss(&mut g, exact, exact2, &a).unwrap();
        assert_eq!(g.value(l).scalar_value(), 0.0);

        // naive oracle on a random batch
        let mut rng = named_rng(33, "cyc");
        let a = randn_tensor(&mut rng, 4, 3);
        let r = randn_tensor(&mut rng, 4, 3);
        let s = randn_tensor(&mut rng, 4, 3);
        let mut expect = 0.0;
        for part in [&r, &s] {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..3 {
                    acc += (part.data()[i * 3 + j] - a.data()[i * 3 + j]).abs();
                }
            }
            expect += acc / 4.0;
        }
        let mut g = graph();
        let rn = g.leaf(r);
        let sn = g.leaf(s);
        let l = cyc_loss(&mut g, rn, sn, &a).unwrap();
        assert!((g.value(l).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights {
            lambda_samc: 0.5,
            lambda_ra: 0.1,
            ..LossWeights::default()
        };
        let mut g = graph();
        let parts: Vec<NodeId> = [1.0, 1.0, 2.0, 4.0]
            .iter()
            .map(|&v| g.leaf(Tensor::scalar(v)))
            .collect();
        let total = total_loss(&mut g, parts[0], parts[1], parts[2], parts[3], &w).unwrap();
        assert!((g.value(total).scalar_value() - 3.4).abs() < 1e-12);

        let mut g = graph();
        let zeros: Vec<NodeId> = (0..4).map(|_| g.leaf(Tensor::scalar(0.0))).collect();
        let total = total_loss(&mut g, zeros[0], zeros[1], zeros[2], zeros[3], &w).unwrap();
        assert_eq!(g.value(total).scalar_value(), 0.0);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            gamma: 1.4,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda_gp: -1.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            delta: -0.1,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
    }
}
