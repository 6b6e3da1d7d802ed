//! Two-stage training and evaluation: alternating adversarial/variational
//! training of the generator, critic and refinement network on seen classes
//! only, followed by unseen-feature synthesis, classifier training in the
//! refined feature space, and per-class top-1 evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::autodiff::{AdError, Graph, NodeId};
use crate::data::{n_syn_default, DataError, DatasetBundle};
use crate::losses::{self, LossError, LossWeights};
use crate::models::{refine, FreeModel, HChoice, ModelConfig, ModelError};
use crate::nn::{Adam, AdamConfig, NnError};
use crate::rng::{indexed_rng, named_rng, randn_tensor, uniform_tensor};
use crate::tensor::{kernels, Precision, Tensor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("training batch contains unseen-class label {label}")]
    UnseenInTrainingBatch { label: u32 },
    #[error("batch provenance {got} where {expected} is required")]
    BadProvenance { expected: String, got: String },
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("class {0} has no test samples")]
    EmptyClass(u32),
    #[error("class {0} missing from the classifier training matrix")]
    MissingTrainClass(u32),
    #[error("accuracies must be non-negative, got {0}")]
    NegativeAccuracy(f64),
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("unknown ablation variant '{0}'")]
    UnknownVariant(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Which feature composition the classifier sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureVariant {
    /// Original (or synthesized) features only.
    X,
    /// Features concatenated with the FR latent embedding.
    Xh,
    /// Features, FR latent embedding and attribute reconstruction.
    Xha,
}

/// Everything that parameterizes a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub lr: f64,
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Synthesized features per unseen class.
    pub n_syn: usize,
    pub seed: u64,
    pub h_choice: HChoice,
    pub precision: Precision,
    pub eg_hidden: usize,
    pub fr_hidden: usize,
    /// Latent code width; defaults to the bundle's attribute dimension.
    pub latent_dim: Option<usize>,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    /// Apply the center loss to synthesized seen features as well as real ones.
    pub samc_on_synthetic: bool,
    /// Train the refinement network and center bank at all.
    pub fr_enabled: bool,
    pub feature_variant: FeatureVariant,
    pub slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 64,
            n_critic: 5,
            lr: 1e-4,
            lr_classifier: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            n_syn: 300,
            seed: 1,
            h_choice: HChoice::H1,
            precision: Precision::F32,
            eg_hidden: 4096,
            fr_hidden: 4096,
            latent_dim: None,
            classifier_epochs: 25,
            classifier_batch: 128,
            samc_on_synthetic: true,
            fr_enabled: true,
            feature_variant: FeatureVariant::Xha,
            slope: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, bundle: &DatasetBundle) -> Result<(), PipelineError> {
        if self.n_critic < 1 {
            return Err(PipelineError::Config("n_critic must be >= 1".into()));
        }
        if self.n_syn < 1 {
            return Err(PipelineError::Config("n_syn must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > bundle.train_idx().len() {
            return Err(PipelineError::Config(format!(
                "batch_size {} outside 1..={} (train set size)",
                self.batch_size,
                bundle.train_idx().len()
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(PipelineError::Config(format!(
                "slope {} outside (0, 1)",
                self.slope
            )));
        }
        if self.fr_enabled && bundle.seen_classes().len() < 2 {
            // contrast labels need a second seen class to draw from
            return Err(PipelineError::Config(
                "refinement training needs at least two seen classes".into(),
            ));
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn model_config(&self, bundle: &DatasetBundle) -> ModelConfig {
        ModelConfig {
            feat_dim: bundle.feat_dim(),
            attr_dim: bundle.attr_dim(),
            latent_dim: self.latent_dim.unwrap_or_else(|| bundle.attr_dim()),
            eg_hidden: self.eg_hidden,
            fr_hidden: self.fr_hidden,
            slope: self.slope,
            n_classes: bundle.n_classes(),
        }
    }

    fn adam(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        })
    }
}

/// Origin of a feature batch; training steps assert on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    SeenTrain,
    SeenTest,
    UnseenTest,
    Synthetic,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::SeenTrain => "seen-train",
            Provenance::SeenTest => "seen-test",
            Provenance::UnseenTest => "unseen-test",
            Provenance::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

/// A feature minibatch with labels, matching attribute rows, and origin tag.
#[derive(Clone, Debug)]
pub struct TaggedBatch {
    pub x: Tensor,
    pub y: Vec<u32>,
    pub a: Tensor,
    pub provenance: Provenance,
}

/// Per-iteration loss values for the training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_eg: f64,
    pub loss_fr: f64,
    pub samc: f64,
    pub cyc: f64,
    pub kl: f64,
    pub recon: f64,
}

/// CSV rendering of the loss curves, one row per iteration.
pub fn loss_rows_to_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("iteration,loss_D,loss_EG,loss_FR,samc,cyc,kl,recon\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration, r.loss_d, r.loss_eg, r.loss_fr, r.samc, r.cyc, r.kl, r.recon
        ));
    }
    out
}

fn sample_train_batch(
    bundle: &DatasetBundle,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TaggedBatch {
    let train = bundle.train_idx();
    let picked: Vec<u32> = (0..batch_size)
        .map(|_| train[rng.gen_range(0..train.len())])
        .collect();
    let (x, y) = bundle.train_rows(&picked);
    let a = bundle.attributes_for(&y);
    TaggedBatch {
        x,
        y,
        a,
        provenance: Provenance::SeenTrain,
    }
}

fn assert_seen_train(batch: &TaggedBatch, bundle: &DatasetBundle) -> Result<(), PipelineError> {
    if batch.provenance != Provenance::SeenTrain {
        return Err(PipelineError::BadProvenance {
            expected: Provenance::SeenTrain.to_string(),
            got: batch.provenance.to_string(),
        });
    }
    for &l in &batch.y {
        if !bundle.seen_classes().contains(&l) {
            return Err(PipelineError::UnseenInTrainingBatch { label: l });
        }
    }
    Ok(())
}

fn finite_scalar(g: &Graph, node: NodeId, iteration: usize) -> Result<f64, PipelineError> {
    let v = g.value(node).scalar_value();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PipelineError::NonFiniteLoss { iteration })
    }
}

/// One uniform contrast label per sample, drawn from the seen classes
/// excluding the sample's own label.
fn sample_contrast_labels(y: &[u32], seen: &[u32], rng: &mut rand_chacha::ChaCha8Rng) -> Vec<u32> {
    y.iter()
        .map(|&label| loop {
            let candidate = seen[rng.gen_range(0..seen.len())];
            if candidate != label {
                break candidate;
            }
        })
        .collect()
}

/// Alternating joint training on seen-class data. Per outer iteration on one
/// minibatch: `n_critic` critic updates against detached synthesized
/// features, one encoder+generator update through the variational and
/// adversarial paths, then one refinement+centers update on real and
/// synthesized batches with everything else frozen.
pub fn stage1_train(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<(FreeModel, Vec<LossRow>), PipelineError> {
    cfg.validate(bundle)?;
    let mcfg = cfg.model_config(bundle);
    let mut model = FreeModel::init(&mcfg, bundle.attributes(), cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok((model, rows));
    }

    let mut batch_rng = named_rng(cfg.seed, "batch");
    let mut noise_rng = named_rng(cfg.seed, "noise");
    let mut contrast_rng = named_rng(cfg.seed, "yprime");
    let mut adam_d = cfg.adam(cfg.lr);
    let mut adam_eg = cfg.adam(cfg.lr);
    let mut adam_fr = cfg.adam(cfg.lr);
    let latent = mcfg.latent_dim;
    let attr = mcfg.attr_dim;
    let w = &cfg.weights;

    for it in 0..cfg.iterations {
        let batch = sample_train_batch(bundle, cfg.batch_size, &mut batch_rng);
        assert_seen_train(&batch, bundle)?;
        let b = batch.y.len();

        // critic updates on detached fakes
        let mut loss_d = 0.0;
        for _ in 0..cfg.n_critic {
            let z = randn_tensor(&mut noise_rng, b, latent);
            let tau = uniform_tensor(&mut noise_rng, b, 1);
            let x_fake = model.generate(&z, &batch.a)?;
            let mut g = Graph::new(cfg.precision);
            let d_params = model.discriminator.insert_leaves(&mut g);
            let loss = losses::wgan_d_loss(
                &mut g,
                &model.discriminator,
                &d_params,
                &batch.x,
                &x_fake,
                &batch.a,
                &tau,
                w,
            )?;
            loss_d = finite_scalar(&g, loss, it)?;
            let wrt: Vec<NodeId> = d_params.iter().flat_map(|(w, b)| [*w, *b]).collect();
            let grads = g.backward(loss, &wrt)?;
            for ((name, param), id) in model.discriminator.params_mut().into_iter().zip(&wrt) {
                adam_d.step_param(&format!("d.{name}"), param, g.value(grads[id]))?;
            }
        }

        // encoder + generator update
        let eps_z = randn_tensor(&mut noise_rng, b, latent);
        let z_prior = randn_tensor(&mut noise_rng, b, latent);
        let eps_a_syn = randn_tensor(&mut noise_rng, b, attr);
        let (loss_eg, kl_v, recon_v, x_fake_values) = {
            let mut g = Graph::new(cfg.precision);
            let e_params = model.encoder.insert_leaves(&mut g);
            let g_params = model.generator.insert_leaves(&mut g);
            let d_params = model.discriminator.insert_constants(&mut g);
            let x_node = g.constant(batch.x.clone());
            let a_node = g.constant(batch.a.clone());

            // variational path: reconstruct x from its encoded latent
            let (z_enc, mu_z, log_var_z) =
                model.encode_graph(&mut g, &e_params, x_node, a_node, &eps_z)?;
            let gen_in_vae = g.concat_last_axis(z_enc, a_node)?;
            let x_vae = model
                .generator
                .forward_graph(&mut g, &g_params, gen_in_vae)?;
            let kl = losses::kl_gaussian(&mut g, mu_z, log_var_z)?;
            let recon = losses::recon_loss(&mut g, x_node, x_vae)?;

            // adversarial path: fool the critic on prior-sampled fakes
            let z_prior_node = g.constant(z_prior.clone());
            let gen_in_prior = g.concat_last_axis(z_prior_node, a_node)?;
            let x_prior = model
                .generator
                .forward_graph(&mut g, &g_params, gen_in_prior)?;
            let adv =
                losses::wgan_g_loss(&mut g, &model.discriminator, &d_params, x_prior, a_node)?;

            let mut loss = g.add(kl, recon)?;
            loss = g.add(loss, adv)?;
            if cfg.fr_enabled && w.lambda_ra > 0.0 {
                // attribute cycle through the frozen refinement network
                let fr_params = model.fr.insert_constants(&mut g);
                let fr_syn = model
                    .fr
                    .forward_graph(&mut g, &fr_params, x_prior, &eps_a_syn)?;
                let a_const = g.constant(batch.a.clone());
                let diff = g.sub(fr_syn.a_hat, a_const)?;
                let absd = g.abs(diff)?;
                let ones_col = g.ones_const(&[attr, 1]);
                let row_l1 = g.matmul(absd, ones_col, false, false)?;
                let cyc_syn = g.reduce_mean(row_l1)?;
                let weighted = g.scalar_mul(cyc_syn, w.lambda_ra)?;
                loss = g.add(loss, weighted)?;
            }

            let loss_v = finite_scalar(&g, loss, it)?;
            let kl_v = g.value(kl).scalar_value();
            let recon_v = g.value(recon).scalar_value();
            let x_fake_values = g.value(x_prior).clone();

            let wrt: Vec<NodeId> = e_params
                .iter()
                .chain(g_params.iter())
                .flat_map(|(w, b)| [*w, *b])
                .collect();
            let grads = g.backward(loss, &wrt)?;
            let mut named: Vec<(String, &mut Tensor)> = Vec::new();
            for (name, p) in model.encoder.params_mut() {
                named.push((format!("e.{name}"), p));
            }
            for (name, p) in model.generator.params_mut() {
                named.push((format!("g.{name}"), p));
            }
            for ((name, param), id) in named.into_iter().zip(&wrt) {
                adam_eg.step_param(&name, param, g.value(grads[id]))?;
            }
            (loss_v, kl_v, recon_v, x_fake_values)
        };

        // refinement + centers update
        let (loss_fr, samc_v, cyc_v) = if cfg.fr_enabled {
            let y_prime =
                sample_contrast_labels(&batch.y, bundle.seen_classes(), &mut contrast_rng);
            let eps_real = randn_tensor(&mut noise_rng, b, attr);
            let eps_syn = randn_tensor(&mut noise_rng, b, attr);
            let mut g = Graph::new(cfg.precision);
            let fr_params = model.fr.insert_leaves(&mut g);
            let centers = g.leaf(model.centers.clone());
            let x_real = g.constant(batch.x.clone());
            let x_syn = g.constant(x_fake_values);
            let fr_real = model
                .fr
                .forward_graph(&mut g, &fr_params, x_real, &eps_real)?;
            let fr_syn = model
                .fr
                .forward_graph(&mut g, &fr_params, x_syn, &eps_syn)?;

            let samc_real = losses::samc_loss(&mut g, fr_real.mu, &batch.y, &y_prime, centers, w)?;
            let samc = if cfg.samc_on_synthetic {
                let samc_syn =
                    losses::samc_loss(&mut g, fr_syn.mu, &batch.y, &y_prime, centers, w)?;
                g.add(samc_real, samc_syn)?
            } else {
                samc_real
            };
            let cyc = losses::cyc_loss(&mut g, fr_real.a_hat, fr_syn.a_hat, &batch.a)?;
            let samc_weighted = g.scalar_mul(samc, w.lambda_samc)?;
            let cyc_weighted = g.scalar_mul(cyc, w.lambda_ra)?;
            let loss = g.add(samc_weighted, cyc_weighted)?;
            let loss_v = finite_scalar(&g, loss, it)?;
            let samc_v = g.value(samc).scalar_value();
            let cyc_v = g.value(cyc).scalar_value();

            let wrt: Vec<NodeId> = vec![
                fr_params.l1.0,
                fr_params.l1.1,
                fr_params.l2.0,
                fr_params.l2.1,
                fr_params.enc.0,
                fr_params.enc.1,
                centers,
            ];
            let grads = g.backward(loss, &wrt)?;
            let mut named: Vec<(String, &mut Tensor)> = model
                .fr
                .params_mut()
                .into_iter()
                .map(|(n, p)| (format!("fr.{n}"), p))
                .collect();
            named.push(("centers".to_string(), &mut model.centers));
            for ((name, param), id) in named.into_iter().zip(&wrt) {
                adam_fr.step_param(&name, param, g.value(grads[id]))?;
            }
            (loss_v, samc_v, cyc_v)
        } else {
            (0.0, 0.0, 0.0)
        };

        rows.push(LossRow {
            iteration: it,
            loss_d,
            loss_eg,
            loss_fr,
            samc: samc_v,
            cyc: cyc_v,
            kl: kl_v,
            recon: recon_v,
        });
    }
    Ok((model, rows))
}

/// Synthesized features and their labels.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub features: Tensor,
    pub labels: Vec<u32>,
}

fn synth_class_block(
    model: &FreeModel,
    bundle: &DatasetBundle,
    class: u32,
    n_syn: usize,
    seed: u64,
) -> Result<Tensor, PipelineError> {
    if (class as usize) >= bundle.n_classes() {
        return Err(PipelineError::UnknownClass(class));
    }
    let mut rng = indexed_rng(seed, "synth", class as u64);
    let z = randn_tensor(&mut rng, n_syn, model.config.latent_dim);
    let a = kernels::broadcast_row(&bundle.attributes_for(&[class]), n_syn);
    Ok(model.generate(&z, &a)?)
}

/// `n_syn` conditional samples for every unseen class, deterministic per
/// seed. Per-class noise streams are derived from `(seed, class id)`, so the
/// result is independent of scheduling.
pub fn synthesize_unseen(
    model: &FreeModel,
    bundle: &DatasetBundle,
    n_syn: usize,
    seed: u64,
) -> Result<SynthSet, PipelineError> {
    let classes = bundle.unseen_classes().to_vec();
    #[cfg(feature = "parallel")]
    let blocks: Vec<Tensor> = classes
        .par_iter()
        .map(|&c| synth_class_block(model, bundle, c, n_syn, seed))
        .collect::<Result<_, _>>()?;
    #[cfg(not(feature = "parallel"))]
    let blocks: Vec<Tensor> = classes
        .iter()
        .map(|&c| synth_class_block(model, bundle, c, n_syn, seed))
        .collect::<Result<_, _>>()?;
    assemble_synth(&classes, blocks, n_syn)
}

/// Sequential fallback path of [`synthesize_unseen`]; used by the benchmark
/// suite and the schedule-independence test.
pub fn synthesize_unseen_sequential(
    model: &FreeModel,
    bundle: &DatasetBundle,
    n_syn: usize,
    seed: u64,
) -> Result<SynthSet, PipelineError> {
    let classes = bundle.unseen_classes().to_vec();
    let blocks: Vec<Tensor> = classes
        .iter()
        .map(|&c| synth_class_block(model, bundle, c, n_syn, seed))
        .collect::<Result<_, _>>()?;
    assemble_synth(&classes, blocks, n_syn)
}

fn assemble_synth(
    classes: &[u32],
    blocks: Vec<Tensor>,
    n_syn: usize,
) -> Result<SynthSet, PipelineError> {
    let refs: Vec<&Tensor> = blocks.iter().collect();
    let features = Tensor::vstack(&refs);
    let labels = classes
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, n_syn))
        .collect();
    Ok(SynthSet { features, labels })
}

/// Default `n_syn` for a bundle: the reference value when the bundle name
/// matches a known dataset, otherwise the configured value.
pub fn resolve_n_syn(bundle: &DatasetBundle, cfg: &TrainConfig) -> usize {
    n_syn_default(bundle.name(), cfg.n_syn)
}

// ---- classifier -------------------------------------------------------------

/// Linear softmax classifier over the joint seen+unseen label space.
#[derive(Clone, Debug)]
pub struct Classifier {
    /// `[n_classes, width]` weight matrix.
    pub weight: Tensor,
    /// `[1, n_classes]` bias row.
    pub bias: Tensor,
    /// Class id of each output column, sorted ascending.
    pub classes: Vec<u32>,
}

impl Classifier {
    pub fn logits(&self, features: &Tensor) -> Tensor {
        let lin = kernels::matmul(features, &self.weight, false, true);
        let (rows, _) = lin.dims2().expect("rank-2");
        let b = kernels::broadcast_row(&self.bias, rows);
        lin.zip_map(&b, |a, c| a + c)
    }

    /// Row-stochastic softmax probabilities.
    pub fn probabilities(&self, features: &Tensor) -> Tensor {
        let logits = self.logits(features);
        let (rows, cols) = logits.dims2().expect("rank-2");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        Tensor::matrix(rows, cols, data)
    }

    /// Top-1 class prediction per row, optionally restricted to a subset of
    /// classes (ties resolve to the lowest class id).
    pub fn predict(&self, features: &Tensor, among: Option<&[u32]>) -> Vec<u32> {
        let logits = self.logits(features);
        let (rows, _) = logits.dims2().expect("rank-2");
        let allowed: Vec<usize> = match among {
            Some(subset) => self
                .classes
                .iter()
                .enumerate()
                .filter(|(_, c)| subset.contains(c))
                .map(|(i, _)| i)
                .collect(),
            None => (0..self.classes.len()).collect(),
        };
        #[cfg(feature = "parallel")]
        let iter = (0..rows).into_par_iter();
        #[cfg(not(feature = "parallel"))]
        let iter = 0..rows;
        iter.map(|i| {
            let row = logits.row(i);
            let mut best = allowed[0];
            for &j in &allowed[1..] {
                if row[j] > row[best] {
                    best = j;
                }
            }
            self.classes[best]
        })
        .collect()
    }
}

/// Refined features per the configured variant (noise-free reconstruction).
pub fn assemble_features(
    model: &FreeModel,
    x: &Tensor,
    cfg: &TrainConfig,
) -> Result<Tensor, PipelineError> {
    match cfg.feature_variant {
        FeatureVariant::X => Ok(x.clone()),
        FeatureVariant::Xh | FeatureVariant::Xha => {
            let (rows, _) = x.dims2().expect("rank-2 features");
            let eps = Tensor::zeros(&[rows, model.config.attr_dim]);
            let fr = model.fr_forward(x, &eps)?;
            if cfg.feature_variant == FeatureVariant::Xh {
                let h = match cfg.h_choice {
                    HChoice::H1 => &fr.h1,
                    HChoice::Mu => &fr.mu,
                };
                Ok(kernels::concat_cols(x, h))
            } else {
                Ok(refine(x, &fr, cfg.h_choice)?)
            }
        }
    }
}

/// Train the final supervised classifier on refined real seen features and
/// refined synthesized unseen features with cross-entropy.
pub fn stage2_train_classifier(
    model: &FreeModel,
    bundle: &DatasetBundle,
    synth: &SynthSet,
    cfg: &TrainConfig,
) -> Result<Classifier, PipelineError> {
    let mut classes: Vec<u32> = bundle
        .seen_classes()
        .iter()
        .chain(bundle.unseen_classes())
        .copied()
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let (x_train, y_train) = bundle.train_rows(bundle.train_idx());
    for &c in bundle.seen_classes() {
        if !y_train.contains(&c) {
            return Err(PipelineError::MissingTrainClass(c));
        }
    }
    for &c in bundle.unseen_classes() {
        if !synth.labels.contains(&c) {
            return Err(PipelineError::MissingTrainClass(c));
        }
    }

    let refined_real = assemble_features(model, &x_train, cfg)?;
    let refined_syn = assemble_features(model, &synth.features, cfg)?;
    let features = Tensor::vstack(&[&refined_real, &refined_syn]);
    let mut labels = y_train;
    labels.extend_from_slice(&synth.labels);

    let width = features.dims2().expect("rank-2").1;
    let n_classes = classes.len();
    let class_index: BTreeMap<u32, usize> =
        classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let targets: Vec<usize> = labels.iter().map(|l| class_index[l]).collect();

    let mut clf = Classifier {
        weight: Tensor::zeros(&[n_classes, width]),
        bias: Tensor::zeros(&[1, n_classes]),
        classes,
    };
    let mut adam = cfg.adam(cfg.lr_classifier);
    let mut rng = named_rng(cfg.seed, "cls");
    let n = targets.len();

    for _epoch in 0..cfg.classifier_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.classifier_batch.max(1)) {
            let xb = features.gather_rows(chunk);
            let tb: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss_grad_w, loss_grad_b) = ce_gradients(&clf, &xb, &tb, cfg.precision)?;
            adam.step_param("cls.w", &mut clf.weight, &loss_grad_w)?;
            adam.step_param("cls.b", &mut clf.bias, &loss_grad_b)?;
        }
    }
    Ok(clf)
}

/// Cross-entropy gradients for one minibatch via the graph engine, with a
/// constant max-shift for numerical stability.
fn ce_gradients(
    clf: &Classifier,
    xb: &Tensor,
    targets: &[usize],
    precision: Precision,
) -> Result<(Tensor, Tensor), PipelineError> {
    let (rows, _) = xb.dims2().expect("rank-2");
    let n_classes = clf.classes.len();
    let mut g = Graph::new(precision);
    let w = g.leaf(clf.weight.clone());
    let bias = g.leaf(clf.bias.clone());
    let x = g.constant(xb.clone());
    let lin = g.matmul(x, w, false, true)?;
    let brow = g.broadcast_row(bias, rows)?;
    let logits = g.add(lin, brow)?;

    // constant per-row max; softmax is shift-invariant so gradients are exact
    let logit_values = g.value(logits).clone();
    let max_col: Vec<f64> = (0..rows)
        .map(|i| {
            logit_values
                .row(i)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let max_node = g.constant(Tensor::matrix(rows, 1, max_col));
    let ones_row = g.ones_const(&[1, n_classes]);
    let spread = g.matmul(max_node, ones_row, false, false)?;
    let shifted = g.sub(logits, spread)?;

    let exps = g.exp(shifted)?;
    let ones_col = g.ones_const(&[n_classes, 1]);
    let sums = g.matmul(exps, ones_col, false, false)?;
    let lse = g.log(sums)?;

    let mut one_hot = vec![0.0; rows * n_classes];
    for (i, &t) in targets.iter().enumerate() {
        one_hot[i * n_classes + t] = 1.0;
    }
    let one_hot = g.constant(Tensor::matrix(rows, n_classes, one_hot));
    let picked_terms = g.mul(shifted, one_hot)?;
    let picked = g.matmul(picked_terms, ones_col, false, false)?;

    let per_row = g.sub(lse, picked)?;
    let loss = g.reduce_mean(per_row)?;
    let grads = g.backward(loss, &[w, bias])?;
    Ok((g.value(grads[&w]).clone(), g.value(grads[&bias]).clone()))
}

// ---- evaluation protocol ------------------------------------------------------

/// Per-class top-1 accuracy for every class in `class_set`: correct / count
/// within each class. Errors if any class in the set has no test sample.
pub fn per_class_top1(
    predictions: &[u32],
    labels: &[u32],
    class_set: &[u32],
) -> Result<BTreeMap<u32, f64>, PipelineError> {
    if predictions.len() != labels.len() {
        return Err(PipelineError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in predictions.iter().zip(labels) {
        let entry = counts.entry(l).or_insert((0, 0));
        entry.1 += 1;
        if p == l {
            entry.0 += 1;
        }
    }
    let mut out = BTreeMap::new();
    for &c in class_set {
        match counts.get(&c) {
            Some(&(correct, total)) => {
                out.insert(c, correct as f64 / total as f64);
            }
            None => return Err(PipelineError::EmptyClass(c)),
        }
    }
    Ok(out)
}

/// Mean of per-class accuracies (class-averaged, not sample-averaged).
pub fn mean_accuracy(per_class: &BTreeMap<u32, f64>) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

/// `2 * s * u / (s + u)`, or 0 when both are 0. Inputs must be non-negative.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64, PipelineError> {
    if s < 0.0 {
        return Err(PipelineError::NegativeAccuracy(s));
    }
    if u < 0.0 {
        return Err(PipelineError::NegativeAccuracy(u));
    }
    if s + u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * s * u / (s + u))
}

/// Resolved configuration echoed into every report, sufficient together
/// with the seed to reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub dataset: String,
    pub variant: String,
    pub n_syn: usize,
    pub train: TrainConfig,
}

/// Final evaluation summary. `S`, `U`, `H` are per-class top-1 accuracies in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslReport {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub seed: u64,
    pub config: ConfigEcho,
}

impl GzslReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Refine the real test splits, classify over the joint label space, and
/// compute seen/unseen per-class accuracy and their harmonic mean.
/// `restrict_to` limits predictions to a class subset (used by the
/// degenerate seen-only baseline).
pub fn evaluate_gzsl(
    model: &FreeModel,
    classifier: &Classifier,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    variant: &str,
    restrict_to: Option<&[u32]>,
) -> Result<GzslReport, PipelineError> {
    let (x_seen, y_seen) = bundle.test_seen_rows();
    let (x_unseen, y_unseen) = bundle.test_unseen_rows();
    let refined_seen = assemble_features(model, &x_seen, cfg)?;
    let refined_unseen = assemble_features(model, &x_unseen, cfg)?;
    let pred_seen = classifier.predict(&refined_seen, restrict_to);
    let pred_unseen = classifier.predict(&refined_unseen, restrict_to);

    let seen_acc = per_class_top1(&pred_seen, &y_seen, bundle.seen_classes())?;
    let unseen_acc = per_class_top1(&pred_unseen, &y_unseen, bundle.unseen_classes())?;
    let s = mean_accuracy(&seen_acc);
    let u = mean_accuracy(&unseen_acc);
    let h = harmonic_mean(s, u)?;
    let mut per_class = seen_acc;
    per_class.extend(unseen_acc);
    Ok(GzslReport {
        s,
        u,
        h,
        per_class,
        seed: cfg.seed,
        config: ConfigEcho {
            dataset: bundle.name().to_string(),
            variant: variant.to_string(),
            n_syn: resolve_n_syn(bundle, cfg),
            train: cfg.clone(),
        },
    })
}

/// Outputs of one full train + synthesize + classify + evaluate run.
pub struct FullRun {
    pub model: FreeModel,
    pub classifier: Classifier,
    pub report: GzslReport,
    pub loss_rows: Vec<LossRow>,
}

/// End-to-end run under one configuration.
pub fn run_full(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    variant: &str,
) -> Result<FullRun, PipelineError> {
    let (model, loss_rows) = stage1_train(bundle, cfg)?;
    let n_syn = resolve_n_syn(bundle, cfg);
    let synth = synthesize_unseen(&model, bundle, n_syn, cfg.seed)?;
    let classifier = stage2_train_classifier(&model, bundle, &synth, cfg)?;
    let report = evaluate_gzsl(&model, &classifier, bundle, cfg, variant, None)?;
    Ok(FullRun {
        model,
        classifier,
        report,
        loss_rows,
    })
}

// ---- ablation ---------------------------------------------------------------

/// Loss-side ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Plain generative baseline: no refinement training at all.
    Baseline,
    /// Refinement trained with the attribute cycle loss only.
    CycOnly,
    /// Refinement trained with the center loss only.
    SamcOnly,
    /// Both refinement losses.
    Full,
}

/// One ablation cell: a loss variant paired with a feature composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub losses: LossVariant,
    pub features: FeatureVariant,
}

impl Variant {
    /// Parse `baseline | cyc | samc | full`, optionally suffixed with
    /// `:x | :xh | :xha` to override the feature composition.
    pub fn parse(name: &str) -> Result<Self, PipelineError> {
        let mut parts = name.splitn(2, ':');
        let head = parts.next().unwrap_or("").trim();
        let feat = parts.next().map(str::trim);
        let losses = match head {
            "baseline" => LossVariant::Baseline,
            "cyc" => LossVariant::CycOnly,
            "samc" => LossVariant::SamcOnly,
            "full" => LossVariant::Full,
            _ => return Err(PipelineError::UnknownVariant(name.to_string())),
        };
        let features = match feat {
            None => match losses {
                LossVariant::Baseline => FeatureVariant::X,
                _ => FeatureVariant::Xha,
            },
            Some("x") => FeatureVariant::X,
            Some("xh") => FeatureVariant::Xh,
            Some("xha") => FeatureVariant::Xha,
            Some(_) => return Err(PipelineError::UnknownVariant(name.to_string())),
        };
        Ok(Variant { losses, features })
    }

    pub fn name(&self) -> String {
        let head = match self.losses {
            LossVariant::Baseline => "baseline",
            LossVariant::CycOnly => "cyc",
            LossVariant::SamcOnly => "samc",
            LossVariant::Full => "full",
        };
        let default_feat = match self.losses {
            LossVariant::Baseline => FeatureVariant::X,
            _ => FeatureVariant::Xha,
        };
        if self.features == default_feat {
            head.to_string()
        } else {
            let f = match self.features {
                FeatureVariant::X => "x",
                FeatureVariant::Xh => "xh",
                FeatureVariant::Xha => "xha",
            };
            format!("{head}:{f}")
        }
    }

    /// Configuration for this variant, derived from a base configuration.
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.feature_variant = self.features;
        match self.losses {
            LossVariant::Baseline => {
                cfg.fr_enabled = false;
                cfg.weights.lambda_samc = 0.0;
                cfg.weights.lambda_ra = 0.0;
            }
            LossVariant::CycOnly => {
                cfg.weights.lambda_samc = 0.0;
            }
            LossVariant::SamcOnly => {
                cfg.weights.lambda_ra = 0.0;
            }
            LossVariant::Full => {}
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: GzslReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub mean_u: f64,
    pub mean_s: f64,
    pub mean_h: f64,
    /// Mean H minus the baseline variant's mean H, when baseline was run.
    pub delta_h: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,U,S,H\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant, r.seed, r.report.u, r.report.s, r.report.h
            ));
        }
        out.push_str("variant,mean_U,mean_S,mean_H,delta_H\n");
        for s in &self.summary {
            let dh = s.delta_h.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.variant, s.mean_u, s.mean_s, s.mean_h, dh
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Run every `(variant, seed)` cell and aggregate per-variant means plus the
/// H gain over the baseline variant.
pub fn ablate(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable, PipelineError> {
    let mut rows = Vec::new();
    for variant in variants {
        for &seed in seeds {
            let cfg = variant.apply(base, seed);
            let run = run_full(bundle, &cfg, &variant.name())?;
            rows.push(AblationRow {
                variant: variant.name(),
                seed,
                report: run.report,
            });
        }
    }
    let mut summary = Vec::new();
    let baseline_mean: Option<f64> = {
        let hs: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant.starts_with("baseline"))
            .map(|r| r.report.h)
            .collect();
        if hs.is_empty() {
            None
        } else {
            Some(hs.iter().sum::<f64>() / hs.len() as f64)
        }
    };
    for variant in variants {
        let name = variant.name();
        let of_variant: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
        let n = of_variant.len() as f64;
        let mean_u = of_variant.iter().map(|r| r.report.u).sum::<f64>() / n;
        let mean_s = of_variant.iter().map(|r| r.report.s).sum::<f64>() / n;
        let mean_h = of_variant.iter().map(|r| r.report.h).sum::<f64>() / n;
        summary.push(AblationSummary {
            variant: name,
            mean_u,
            mean_s,
            mean_h,
            delta_h: baseline_mean.map(|b| mean_h - b),
        });
    }
    Ok(AblationTable { rows, summary })
}

/// Dump refined features as CSV (`label,split,f0,f1,...`) for external
/// visualization.
pub fn refined_feature_csv(
    model: &FreeModel,
    bundle: &DatasetBundle,
    synth: &SynthSet,
    cfg: &TrainConfig,
) -> Result<String, PipelineError> {
    let mut out = String::from("label,split\n");
    let emit = |feats: &Tensor, labels: &[u32], split: &str, out: &mut String| {
        let (rows, _) = feats.dims2().expect("rank-2");
        for (i, label) in labels.iter().enumerate().take(rows) {
            let vals: Vec<String> = feats.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", label, split, vals.join(",")));
        }
    };
    let (x_seen, y_seen) = bundle.test_seen_rows();
    let refined = assemble_features(model, &x_seen, cfg)?;
    emit(&refined, &y_seen, "test_seen", &mut out);
    let (x_unseen, y_unseen) = bundle.test_unseen_rows();
    let refined = assemble_features(model, &x_unseen, cfg)?;
    emit(&refined, &y_unseen, "test_unseen", &mut out);
    let refined = assemble_features(model, &synth.features, cfg)?;
    emit(&refined, &synth.labels, "synthetic_unseen", &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_bundle, SyntheticSpec};

    fn tiny_bundle() -> DatasetBundle {
        generate_synthetic_bundle(
            &SyntheticSpec {
                n_seen: 4,
                n_unseen: 2,
                feat_dim: 8,
                attr_dim: 4,
                samples_per_class: 10,
                noise: 0.05,
                mix_seed: 0,
                name: "tiny".to_string(),
            },
            3,
        )
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 8,
            n_critic: 2,
            eg_hidden: 16,
            fr_hidden: 12,
            n_syn: 5,
            classifier_epochs: 3,
            classifier_batch: 16,
            precision: Precision::F64,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_initialized_model() {
        let bundle = tiny_bundle();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_config()
        };
        let (model, rows) = stage1_train(&bundle, &cfg).unwrap();
        assert!(rows.is_empty());
        let mcfg = cfg.model_config(&bundle);
        let fresh = FreeModel::init(&mcfg, bundle.attributes(), cfg.seed).unwrap();
        assert_eq!(
            model.generator.layers[0].weight,
            fresh.generator.layers[0].weight
        );
        assert_eq!(model.centers, fresh.centers);
    }

    #[test]
    fn short_training_is_finite_and_deterministic() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let (m1, r1) = stage1_train(&bundle, &cfg).unwrap();
        let (m2, r2) = stage1_train(&bundle, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.centers, m2.centers);
        assert_eq!(
            m1.discriminator.layers[0].weight,
            m2.discriminator.layers[0].weight
        );
        for r in &r1 {
            for v in [r.loss_d, r.loss_eg, r.loss_fr, r.samc, r.cyc, r.kl, r.recon] {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn loss_curves_stay_finite_over_two_hundred_iterations() {
        let bundle = generate_synthetic_bundle(&SyntheticSpec::default(), 6);
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 32,
            n_critic: 2,
            eg_hidden: 16,
            fr_hidden: 16,
            precision: Precision::F64,
            seed: 2,
            ..TrainConfig::default()
        };
        let (model, rows) = stage1_train(&bundle, &cfg).unwrap();
        assert_eq!(rows.len(), 200);
        for r in &rows {
            for v in [r.loss_d, r.loss_eg, r.loss_fr, r.samc, r.cyc, r.kl, r.recon] {
                assert!(v.is_finite(), "iteration {}: non-finite entry", r.iteration);
            }
        }
        // the center bank keeps one row per class throughout training
        assert_eq!(
            model.centers.dims2(),
            Some((bundle.n_classes(), bundle.attr_dim()))
        );
    }

    #[test]
    fn baseline_variant_leaves_fr_untouched() {
        let bundle = tiny_bundle();
        let base = tiny_config();
        let cfg = Variant::parse("baseline").unwrap().apply(&base, base.seed);
        let (model, rows) = stage1_train(&bundle, &cfg).unwrap();
        let mcfg = cfg.model_config(&bundle);
        let fresh = FreeModel::init(&mcfg, bundle.attributes(), cfg.seed).unwrap();
        assert_eq!(model.fr.l1.weight, fresh.fr.l1.weight);
        assert_eq!(model.centers, fresh.centers);
        assert!(rows
            .iter()
            .all(|r| r.loss_fr == 0.0 && r.samc == 0.0 && r.cyc == 0.0));
    }

    #[test]
    fn synthesis_counts_and_determinism() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let (model, _) = stage1_train(&bundle, &cfg).unwrap();
        let s1 = synthesize_unseen(&model, &bundle, 5, 11).unwrap();
        let s2 = synthesize_unseen(&model, &bundle, 5, 11).unwrap();
        assert_eq!(s1.features, s2.features);
        assert_eq!(s1.labels.len(), 10);
        for &c in bundle.unseen_classes() {
            assert_eq!(s1.labels.iter().filter(|&&l| l == c).count(), 5);
        }
        // scheduling cannot change the result
        let seq = synthesize_unseen_sequential(&model, &bundle, 5, 11).unwrap();
        assert_eq!(s1.features, seq.features);
        assert_eq!(s1.labels, seq.labels);
    }

    #[test]
    fn per_class_averaging_is_class_not_sample_weighted() {
        // class 0: 1 of 2 correct, class 1: 1 of 1 -> mean 0.75
        let preds = [0u32, 1, 1];
        let labels = [0u32, 0, 1];
        let acc = per_class_top1(&preds, &labels, &[0, 1]).unwrap();
        assert_eq!(acc[&0], 0.5);
        assert_eq!(acc[&1], 1.0);
        assert_eq!(mean_accuracy(&acc), 0.75);
    }

    #[test]
    fn per_class_all_correct_and_all_wrong() {
        let labels = [2u32, 2, 3];
        let acc = per_class_top1(&labels.clone(), &labels, &[2, 3]).unwrap();
        assert!(acc.values().all(|&v| v == 1.0));
        let preds = [9u32, 9, 9];
        let acc = per_class_top1(&preds, &labels, &[2, 3]).unwrap();
        assert!(acc.values().all(|&v| v == 0.0));
    }

    #[test]
    fn per_class_errors() {
        assert!(matches!(
            per_class_top1(&[0], &[0], &[0, 5]),
            Err(PipelineError::EmptyClass(5))
        ));
        assert!(matches!(
            per_class_top1(&[0, 1], &[0], &[0]),
            Err(PipelineError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn harmonic_mean_identities() {
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        for x in [0.1, 0.5, 0.9] {
            assert!((harmonic_mean(x, x).unwrap() - x).abs() < 1e-15);
        }
        assert!(matches!(
            harmonic_mean(-0.1, 0.5),
            Err(PipelineError::NegativeAccuracy(_))
        ));
        // bounded by min and max
        let h = harmonic_mean(0.3, 0.8).unwrap();
        assert!(h > 0.3 && h < 0.8);
        assert!(h <= (0.3 + 0.8) / 2.0);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(
            Variant::parse("baseline").unwrap(),
            Variant {
                losses: LossVariant::Baseline,
                features: FeatureVariant::X
            }
        );
        assert_eq!(
            Variant::parse("full").unwrap(),
            Variant {
                losses: LossVariant::Full,
                features: FeatureVariant::Xha
            }
        );
        assert_eq!(
            Variant::parse("samc:xh").unwrap().features,
            FeatureVariant::Xh
        );
        assert_eq!(Variant::parse("full:xh").unwrap().name(), "full:xh");
        assert_eq!(Variant::parse("cyc").unwrap().name(), "cyc");
        assert!(matches!(
            Variant::parse("bogus"),
            Err(PipelineError::UnknownVariant(_))
        ));
        assert!(matches!(
            Variant::parse("full:bogus"),
            Err(PipelineError::UnknownVariant(_))
        ));
    }

    #[test]
    fn end_to_end_smoke_run_with_consistent_report() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let run = run_full(&bundle, &cfg, "full").unwrap();
        let rep = &run.report;
        assert!((rep.h - harmonic_mean(rep.s, rep.u).unwrap()).abs() < 1e-9);
        assert_eq!(rep.per_class.len(), 6);
        assert_eq!(rep.config.dataset, "tiny");
        // classifier shape: (seen + unseen) x refined width
        let width = bundle.feat_dim() + cfg.fr_hidden + bundle.attr_dim();
        assert_eq!(run.classifier.weight.dims2().unwrap(), (6, width));
        // softmax rows sum to one
        let (x, _) = bundle.test_seen_rows();
        let refined = assemble_features(&run.model, &x, &cfg).unwrap();
        let probs = run.classifier.probabilities(&refined);
        for i in 0..refined.dims2().unwrap().0 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_seen_only_prediction_zeroes_unseen_accuracy() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let run = run_full(&bundle, &cfg, "full").unwrap();
        let report = evaluate_gzsl(
            &run.model,
            &run.classifier,
            &bundle,
            &cfg,
            "full",
            Some(bundle.seen_classes()),
        )
        .unwrap();
        assert_eq!(report.u, 0.0);
        assert_eq!(report.h, 0.0);
    }

    #[test]
    fn ablation_single_variant_matches_plain_run_bitwise() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let table = ablate(
            &bundle,
            &cfg,
            &[Variant::parse("full").unwrap()],
            &[cfg.seed],
        )
        .unwrap();
        let plain = run_full(&bundle, &cfg, "full").unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].report, plain.report);
        assert_eq!(
            serde_json::to_string(&table.rows[0].report).unwrap(),
            serde_json::to_string(&plain.report).unwrap()
        );
    }

    #[test]
    fn ablation_row_and_summary_counts() {
        let bundle = tiny_bundle();
        let cfg = TrainConfig {
            iterations: 1,
            classifier_epochs: 1,
            ..tiny_config()
        };
        let variants = [
            Variant::parse("baseline").unwrap(),
            Variant::parse("full").unwrap(),
        ];
        let table = ablate(&bundle, &cfg, &variants, &[1, 2, 3]).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert_eq!(table.summary.len(), 2);
        let full = table.summary.iter().find(|s| s.variant == "full").unwrap();
        let base = table
            .summary
            .iter()
            .find(|s| s.variant == "baseline")
            .unwrap();
        assert!((base.delta_h.unwrap()).abs() < 1e-15);
        assert!(full.delta_h.is_some());
        let csv = table.to_csv();
        assert!(csv.contains("delta_H"));
    }

    #[test]
    fn separable_refined_set_reaches_high_training_accuracy() {
        // features already linearly separable by construction
        let bundle = generate_synthetic_bundle(
            &SyntheticSpec {
                n_seen: 3,
                n_unseen: 2,
                feat_dim: 10,
                attr_dim: 4,
                samples_per_class: 20,
                noise: 0.02,
                mix_seed: 1,
                name: "sep".to_string(),
            },
            5,
        );
        let cfg = TrainConfig {
            iterations: 0,
            classifier_epochs: 150,
            classifier_batch: 32,
            lr_classifier: 0.02,
            feature_variant: FeatureVariant::X,
            ..tiny_config()
        };
        let mcfg = cfg.model_config(&bundle);
        let model = FreeModel::init(&mcfg, bundle.attributes(), 1).unwrap();
        // use real unseen-class rows as a stand-in synthetic set so every
        // class is separable
        let (unseen_x, unseen_y) = bundle.test_unseen_rows();
        let synth = SynthSet {
            features: unseen_x,
            labels: unseen_y,
        };
        let clf = stage2_train_classifier(&model, &bundle, &synth, &cfg).unwrap();
        let (x_train, y_train) = bundle.train_rows(bundle.train_idx());
        let preds = clf.predict(&x_train, None);
        let correct = preds.iter().zip(&y_train).filter(|(p, l)| p == l).count();
        let acc = correct as f64 / y_train.len() as f64;
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn stage2_rejects_missing_unseen_class() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let mcfg = cfg.model_config(&bundle);
        let model = FreeModel::init(&mcfg, bundle.attributes(), 1).unwrap();
        let synth = SynthSet {
            features: Tensor::zeros(&[2, bundle.feat_dim()]),
            labels: vec![bundle.unseen_classes()[0]; 2],
        };
        assert!(matches!(
            stage2_train_classifier(&model, &bundle, &synth, &cfg),
            Err(PipelineError::MissingTrainClass(_))
        ));
    }

    #[test]
    fn synthesize_rejects_unknown_class() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let mcfg = cfg.model_config(&bundle);
        let model = FreeModel::init(&mcfg, bundle.attributes(), 1).unwrap();
        let err = synth_class_block(&model, &bundle, 999, 2, 1).unwrap_err();
        assert!(matches!(err, PipelineError::UnknownClass(999)));
    }

    #[test]
    fn stage1_and_stage2_never_read_unseen_test_features() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        let (model, _) = stage1_train(&bundle, &cfg).unwrap();
        let synth = synthesize_unseen(&model, &bundle, cfg.n_syn, cfg.seed).unwrap();
        let _ = stage2_train_classifier(&model, &bundle, &synth, &cfg).unwrap();
        assert_eq!(bundle.unseen_test_reads(), 0);
    }

    #[test]
    fn config_validation_bounds() {
        let bundle = tiny_bundle();
        let mut cfg = tiny_config();
        cfg.n_critic = 0;
        assert!(cfg.validate(&bundle).is_err());
        let mut cfg = tiny_config();
        cfg.batch_size = bundle.train_idx().len() + 1;
        assert!(cfg.validate(&bundle).is_err());
        let mut cfg = tiny_config();
        cfg.weights.gamma = 2.0;
        assert!(cfg.validate(&bundle).is_err());
        assert!(tiny_config().validate(&bundle).is_ok());
    }

    #[test]
    fn n_syn_resolution_prefers_dataset_profile() {
        let bundle = tiny_bundle();
        let cfg = tiny_config();
        assert_eq!(resolve_n_syn(&bundle, &cfg), cfg.n_syn);
    }
}
