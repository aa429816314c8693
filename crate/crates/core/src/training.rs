//! Pretraining, episodic meta-training and inner-loop adaptation.
//!
//! Outer updates are first order: the inner loop adapts an episode-local
//! classifier on detached features and no gradient flows through it.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::domains::{domain_stats, make_pseudo_unseen, sample_episode, Episode, SampleTable};
use crate::error::{Error, Result};
use crate::losses::{
    alpha, cross_entropy, discriminator_loss, generator_loss, info_nce_class_aware, weighted_sum, LossValue,
    Schedule,
};
use crate::nets::{
    classify, classify_node, difficulty_score, domain_score_node, encode, encode_node, fuse, fuse_node, map_node,
    ArchConfig, BoundMlp, Classifier, Mlp, Networks,
};
use crate::optim::{sgd_step, Optimizer, OptimizerKind};
use crate::params::ParamSet;
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::Tensor;

/// Which terms drive pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Cross-entropy only.
    Supervised,
    /// Class-aware contrastive loss only; labels feed the exclusion mask.
    Ssl,
    /// Cross-entropy plus the scheduled contrastive term.
    #[default]
    Mixed,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Supervised, Regime::Ssl, Regime::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Supervised => "supervised",
            Regime::Ssl => "ssl",
            Regime::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Meta-training rate for the encoder, domain classifier and mapper.
    pub eta: f64,
    pub alpha_inner: f64,
    /// Rate of the meta-test calibration step.
    pub beta_outer: f64,
    pub inner_steps: usize,
    pub pretrain_lr: f64,
    pub optimizer: OptimizerKind,
    /// Pretraining epochs; also the schedule horizon `T`.
    pub epochs: usize,
    pub batch_size: usize,
    pub kappa: f64,
    pub tau: f64,
    /// Std of the Gaussian perturbation that produces each contrastive view.
    pub view_noise: f64,
    /// Held-out source rows per class placed in the novel-class negative bank.
    pub bank_per_class: usize,
    pub lambda_range: [f64; 2],
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    /// Let the generator loss also update the encoder.
    pub generator_updates_encoder: bool,
    /// Episodes between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            alpha_inner: 0.01,
            beta_outer: 1e-4,
            inner_steps: 5,
            pretrain_lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            epochs: 10,
            batch_size: 32,
            kappa: 0.1,
            tau: 0.5,
            view_noise: 0.1,
            bank_per_class: 4,
            lambda_range: [0.3, 0.7],
            way: 5,
            shot: 1,
            query: 15,
            episodes: 2000,
            generator_updates_encoder: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("eta", self.eta),
            ("alpha_inner", self.alpha_inner),
            ("beta_outer", self.beta_outer),
            ("pretrain_lr", self.pretrain_lr),
            ("kappa", self.kappa),
            ("view_noise", self.view_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        let [lo, hi] = self.lambda_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad(format!("lambda_range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 1"));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return bad("epochs must be >= 1 and batch_size >= 2".into());
        }
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return bad("way must be >= 2, shot and query >= 1".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.kappa, self.epochs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Initialized,
    Pretrained,
    MetaTrained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub nets: Networks,
    pub phase: Phase,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    phase: Phase,
    config_hash: String,
    seed: u64,
}

impl TrainedModel {
    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        let meta = CheckpointMeta {
            phase: self.phase,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        self.nets.to_param_set().save(stem, meta)
    }

    pub fn load(stem: &std::path::Path) -> Result<Self> {
        let (params, manifest) = ParamSet::load(stem)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        Ok(Self {
            nets: Networks::from_param_set(&params)?,
            phase: meta.phase,
            config_hash: meta.config_hash,
            seed: meta.seed,
        })
    }
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

// ---------------------------------------------------------------- pretraining

/// Inputs of one pretraining minibatch.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Two perturbed copies of `x`; required when the contrastive term is on.
    pub views: Option<(Tensor, Tensor)>,
    /// Encoded novel-class negatives, treated as constants.
    pub bank: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainLosses {
    pub total: LossValue,
    pub ce: Option<f64>,
    pub ssl: Option<f64>,
}

/// Regime objective on one batch. `ssl_weight` multiplies the contrastive
/// term in the mixed regime; a zero weight drops that term from the graph.
pub fn pretrain_objective(
    g: &mut Graph,
    encoder: &BoundMlp,
    classifier: &BoundMlp,
    batch: &PretrainBatch,
    regime: Regime,
    ssl_weight: f64,
    tau: f64,
) -> Result<PretrainLosses> {
    let want_ce = regime != Regime::Ssl;
    let want_ssl = match regime {
        Regime::Supervised => false,
        Regime::Ssl => true,
        Regime::Mixed => ssl_weight != 0.0,
    };
    let ce = if want_ce {
        let x = g.leaf(batch.x.clone());
        let z = encode_node(g, encoder, x)?;
        let logits = classify_node(g, classifier, z)?;
        Some(cross_entropy(g, logits, &batch.labels)?)
    } else {
        None
    };
    let ssl = if want_ssl {
        let (v1, v2) = batch
            .views
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("contrastive term needs two views".into()))?;
        let (v1, v2) = (g.leaf(v1.clone()), g.leaf(v2.clone()));
        let z1 = encode_node(g, encoder, v1)?;
        let z2 = encode_node(g, encoder, v2)?;
        let bank = batch.bank.as_ref().map(|b| g.leaf(b.clone()));
        Some(info_nce_class_aware(g, z1, z2, &batch.labels, bank, tau)?)
    } else {
        None
    };
    let total = match (ce, ssl) {
        (Some(c), Some(s)) => weighted_sum(g, c, s, ssl_weight)?,
        (Some(c), None) => c,
        (None, Some(s)) => s,
        (None, None) => unreachable!("every regime has a term"),
    };
    Ok(PretrainLosses {
        total,
        ce: ce.map(|l| l.value),
        ssl: ssl.map(|l| l.value),
    })
}

/// Two independently perturbed copies of `x`.
pub fn make_views(x: &Tensor, noise: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut view = || -> Result<Tensor> {
        let values = x.values().iter().map(|v| v + normal.sample(&mut rng)).collect();
        Tensor::new(x.shape().to_vec(), values)
    };
    let a = view()?;
    let b = view()?;
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub loss: f64,
    pub ce: f64,
    pub ssl: f64,
}

/// Rows per held-out class that make up the novel-class bank.
fn bank_rows(held_out: &SampleTable, per_class: usize) -> Vec<usize> {
    held_out
        .by_class()
        .values()
        .flat_map(|rows| rows.iter().take(per_class).copied())
        .collect()
}

/// Mixed-supervision pretraining on the base classes.
///
/// Epoch `e` (0-based) uses schedule time `t = e + 1`, so the last epoch
/// weighs the contrastive term by `kappa`.
pub fn pretrain(
    arch: &ArchConfig,
    cfg: &TrainConfig,
    regime: Regime,
    base: &SampleTable,
    held_out: &SampleTable,
    seed: u64,
) -> Result<(TrainedModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if base.len() < 2 {
        return Err(Error::Insufficient("pretraining needs at least two rows".into()));
    }
    if base.dim() != arch.in_dim {
        return Err(Error::shape("pretrain", &[&[base.dim()], &[arch.in_dim]]));
    }
    let (labels, classes) = base.dense_labels();
    let sched = cfg.schedule()?;
    let mut nets = Networks::init(arch, classes, seed)?;
    let mut enc_opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr);
    let mut cls_opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr);
    let bank_idx = if cfg.bank_per_class > 0 && !held_out.is_empty() {
        bank_rows(held_out, cfg.bank_per_class)
    } else {
        Vec::new()
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t = (epoch + 1) as f64;
        let weight = match regime {
            Regime::Supervised => 0.0,
            Regime::Ssl => 1.0,
            Regime::Mixed => alpha(t, &sched)?,
        };
        let uses_ssl = regime == Regime::Ssl || (regime == Regime::Mixed && weight != 0.0);
        let bank = if uses_ssl && !bank_idx.is_empty() {
            Some(encode(&nets.encoder, &held_out.x.select_rows(&bank_idx))?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut derive_rng(seed, "pretrain/shuffle", epoch as u64));
        let (mut sum, mut sum_ce, mut sum_ssl, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            if rows.len() < 2 {
                continue;
            }
            let x = base.x.select_rows(rows);
            let views = if uses_ssl {
                let s = derive_seed(seed, "pretrain/views", (epoch * 1_000_003 + b) as u64);
                Some(make_views(&x, cfg.view_noise, s)?)
            } else {
                None
            };
            let batch = PretrainBatch {
                x,
                labels: rows.iter().map(|&r| labels[r]).collect(),
                views,
                bank: bank.clone(),
            };
            let mut g = Graph::new();
            let enc = nets.encoder.bind(&mut g);
            let cls = nets.classifier.bind(&mut g);
            let losses = pretrain_objective(&mut g, &enc, &cls, &batch, regime, weight, cfg.tau)
                .map_err(|e| epoch_error(e, epoch))?;
            let grads = g.backward(losses.total.node)?;
            enc_opt.step(&mut nets.encoder, &enc.gradients(&g, &grads))?;
            if cls.touched_by(&grads) {
                cls_opt.step(&mut nets.classifier, &cls.gradients(&g, &grads))?;
            }
            sum += losses.total.value;
            sum_ce += losses.ce.unwrap_or(0.0);
            sum_ssl += losses.ssl.unwrap_or(0.0);
            batches += 1;
        }
        let n = batches.max(1) as f64;
        trace.push(EpochRecord {
            epoch,
            alpha: weight,
            loss: sum / n,
            ce: sum_ce / n,
            ssl: sum_ssl / n,
        });
    }
    Ok((
        TrainedModel {
            nets,
            phase: Phase::Pretrained,
            config_hash: String::new(),
            seed,
        },
        trace,
    ))
}

fn epoch_error(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} diverged in epoch {epoch}")),
        other => other,
    }
}

// ------------------------------------------------------------ inner adaptation

/// `steps` plain gradient steps on the support cross-entropy. Returns a new
/// classifier and leaves `classifier` untouched.
pub fn inner_adapt(
    classifier: &Classifier,
    features: &Tensor,
    labels: &[usize],
    lr: f64,
    steps: usize,
) -> Result<Classifier> {
    if features.rows() != labels.len() || features.cols() != classifier.in_dim() {
        return Err(Error::shape("inner_adapt", &[features.shape(), &[labels.len(), classifier.in_dim()]]));
    }
    let mut adapted = classifier.clone();
    if lr == 0.0 {
        return Ok(adapted);
    }
    for _ in 0..steps {
        let mut g = Graph::new();
        let k = adapted.bind(&mut g);
        let x = g.leaf(features.clone());
        let logits = classify_node(&mut g, &k, x)?;
        let loss = cross_entropy(&mut g, logits, labels)?;
        let grads = g.backward(loss.node)?;
        sgd_step(&mut adapted, &k.gradients(&g, &grads), lr)?;
    }
    Ok(adapted)
}

/// Fused features `z + rho * M(z)` of `x`, with `rho` forced to zero when
/// `rho_off` is set.
pub fn fused_features(nets: &Networks, x: &Tensor, rho_off: bool) -> Result<(Tensor, Tensor)> {
    let z = encode(&nets.encoder, x)?;
    let rho = if rho_off {
        Tensor::zeros(&[z.rows(), 1])
    } else {
        difficulty_score(&nets.domain_classifier, &nets.mapper, &z)?
    };
    let c = if rho_off { z } else { fuse(&z, &rho, &nets.mapper)? };
    Ok((c, rho))
}

/// Prototype-initialized episode classifier adapted on the support set.
pub fn episode_classifier(
    support_features: &Tensor,
    labels: &[usize],
    way: usize,
    lr: f64,
    steps: usize,
) -> Result<Classifier> {
    let init = Classifier::from_prototypes(support_features, labels, way)?;
    inner_adapt(&init, support_features, labels, lr, steps)
}

// ------------------------------------------------------------- meta-training

/// Quantities held constant in the outer gradients of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeContext {
    pub classifier: Classifier,
    /// Difficulty scores of the visible query rows, used in fusion.
    pub rho_query: Tensor,
}

pub fn episode_context(nets: &Networks, visible: &Episode, cfg: &TrainConfig) -> Result<EpisodeContext> {
    let (support, _) = fused_features(nets, &visible.support_x, false)?;
    let classifier = episode_classifier(&support, &visible.support_y, visible.way, cfg.alpha_inner, cfg.inner_steps)?;
    let z = encode(&nets.encoder, &visible.query_x)?;
    let rho_query = difficulty_score(&nets.domain_classifier, &nets.mapper, &z)?;
    Ok(EpisodeContext { classifier, rho_query })
}

/// The networks placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundNetworks {
    pub encoder: BoundMlp,
    pub domain: BoundMlp,
    pub mapper: BoundMlp,
}

impl BoundNetworks {
    pub fn bind(g: &mut Graph, nets: &Networks) -> Self {
        Self {
            encoder: nets.encoder.bind(g),
            domain: nets.domain_classifier.bind(g),
            mapper: nets.mapper.bind(g),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetaLosses {
    pub cls: LossValue,
    pub d: LossValue,
    pub g: LossValue,
    pub logits: NodeId,
    pub rho_v: NodeId,
    pub rho_u: NodeId,
}

/// Query-split losses of one meta-training episode.
///
/// Fusion uses `ctx.rho_query` as a constant, so the classification loss
/// reaches the encoder (and the mapper output) but never the domain
/// classifier.
pub fn meta_losses(
    g: &mut Graph,
    nets: &BoundNetworks,
    visible: &Episode,
    unseen: &Episode,
    ctx: &EpisodeContext,
    d_u: f64,
) -> Result<MetaLosses> {
    let xv = g.leaf(visible.query_x.clone());
    let xu = g.leaf(unseen.query_x.clone());
    let zv = encode_node(g, &nets.encoder, xv)?;
    let zu = encode_node(g, &nets.encoder, xu)?;
    let mv = map_node(g, &nets.mapper, zv)?;
    let mu = map_node(g, &nets.mapper, zu)?;
    let rho_v = domain_score_node(g, &nets.domain, mv)?;
    let rho_u = domain_score_node(g, &nets.domain, mu)?;

    let rho_const = g.leaf(ctx.rho_query.clone());
    let c = fuse_node(g, zv, rho_const, mv)?;
    let k = ctx.classifier.bind(g);
    let logits = classify_node(g, &k, c)?;
    let cls = cross_entropy(g, logits, &visible.query_y)?;
    let d = discriminator_loss(g, rho_v, rho_u, d_u)?;
    let gen = generator_loss(g, rho_u, d_u)?;
    Ok(MetaLosses {
        cls,
        d,
        g: gen,
        logits,
        rho_v,
        rho_u,
    })
}

/// Per-network gradients after loss routing.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradients {
    pub encoder: Mlp,
    pub domain: Mlp,
    pub mapper: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub lambda: f64,
    pub loss_cls: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub query_acc: f64,
    pub mean_rho_v: f64,
    pub mean_rho_u: f64,
}

fn check_pair(visible: &Episode, unseen: &Episode) -> Result<()> {
    if visible.support_y != unseen.support_y || visible.query_y != unseen.query_y {
        return Err(Error::InvalidArgument(
            "visible and pseudo-unseen tasks disagree on labels".into(),
        ));
    }
    if visible.support_x.shape() != unseen.support_x.shape() || visible.query_x.shape() != unseen.query_x.shape() {
        return Err(Error::shape("task pair", &[visible.query_x.shape(), unseen.query_x.shape()]));
    }
    Ok(())
}

/// Routed gradients of one episode: encoder from the classification loss
/// (plus the generator loss when configured), domain classifier from the
/// discriminator loss, mapper from the generator loss.
pub fn meta_gradients(
    nets: &Networks,
    visible: &Episode,
    unseen: &Episode,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(MetaGradients, StepMetrics)> {
    check_pair(visible, unseen)?;
    let [lo, hi] = cfg.lambda_range;
    if !(lo..=hi).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixing ratio {lambda} outside [{lo}, {hi}]")));
    }
    let ctx = episode_context(nets, visible, cfg)?;
    let mut g = Graph::new();
    let bound = BoundNetworks::bind(&mut g, nets);
    let losses = meta_losses(&mut g, &bound, visible, unseen, &ctx, 1.0 - lambda)?;

    let from_cls = g.backward(losses.cls.node)?;
    let from_d = g.backward(losses.d.node)?;
    let from_g = g.backward(losses.g.node)?;
    let mut encoder = bound.encoder.gradients(&g, &from_cls);
    if cfg.generator_updates_encoder {
        let extra = bound.encoder.gradients(&g, &from_g);
        for (a, b) in encoder.tensors_mut().zip(extra.tensors()) {
            a.add_assign_scaled(b, 1.0);
        }
    }
    let grads = MetaGradients {
        encoder,
        domain: bound.domain.gradients(&g, &from_d),
        mapper: bound.mapper.gradients(&g, &from_g),
    };
    let metrics = StepMetrics {
        lambda,
        loss_cls: losses.cls.value,
        loss_d: losses.d.value,
        loss_g: losses.g.value,
        query_acc: accuracy(g.value(losses.logits), &visible.query_y),
        mean_rho_v: g.value(losses.rho_v).mean(),
        mean_rho_u: g.value(losses.rho_u).mean(),
    };
    Ok((grads, metrics))
}

/// Outer optimizer state, one per updated network.
#[derive(Clone, Debug)]
pub struct MetaOptimizers {
    pub encoder: Optimizer,
    pub domain: Optimizer,
    pub mapper: Optimizer,
}

impl MetaOptimizers {
    pub fn new(cfg: &TrainConfig) -> Self {
        let make = || Optimizer::new(cfg.optimizer, cfg.eta);
        Self {
            encoder: make(),
            domain: make(),
            mapper: make(),
        }
    }
}

/// One episodic update. Returns the new networks; `nets` is not modified.
pub fn meta_train_step(
    nets: &Networks,
    opt: &mut MetaOptimizers,
    visible: &Episode,
    unseen: &Episode,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(Networks, StepMetrics)> {
    let (grads, metrics) = meta_gradients(nets, visible, unseen, lambda, cfg)?;
    let mut next = nets.clone();
    opt.encoder.step(&mut next.encoder, &grads.encoder)?;
    opt.domain.step(&mut next.domain_classifier, &grads.domain)?;
    opt.mapper.step(&mut next.mapper, &grads.mapper)?;
    Ok((next, metrics))
}

/// Mapper gradient of the generator loss, and of the discriminator loss
/// routed through a gradient-reversal node placed between the mapper and
/// the domain classifier on the pseudo-unseen path.
pub fn reversal_probe(
    nets: &Networks,
    visible: &Episode,
    unseen: &Episode,
    lambda: f64,
) -> Result<(Mlp, Mlp)> {
    check_pair(visible, unseen)?;
    let d_u = 1.0 - lambda;

    let mut g = Graph::new();
    let b = BoundNetworks::bind(&mut g, nets);
    let xu = g.leaf(unseen.query_x.clone());
    let zu = encode_node(&mut g, &b.encoder, xu)?;
    let mu = map_node(&mut g, &b.mapper, zu)?;
    let rho_u = domain_score_node(&mut g, &b.domain, mu)?;
    let direct = generator_loss(&mut g, rho_u, d_u)?;
    let direct = b.mapper.gradients(&g, &g.backward(direct.node)?);

    let mut g = Graph::new();
    let b = BoundNetworks::bind(&mut g, nets);
    let xv = g.leaf(visible.query_x.clone());
    let zv = encode_node(&mut g, &b.encoder, xv)?;
    let mv = map_node(&mut g, &b.mapper, zv)?;
    let mv = g.detach(mv);
    let rho_v = domain_score_node(&mut g, &b.domain, mv)?;
    let xu = g.leaf(unseen.query_x.clone());
    let zu = encode_node(&mut g, &b.encoder, xu)?;
    let mu = map_node(&mut g, &b.mapper, zu)?;
    let rev = g.grad_reverse(mu, 1.0)?;
    let rho_u = domain_score_node(&mut g, &b.domain, rev)?;
    let disc = discriminator_loss(&mut g, rho_v, rho_u, d_u)?;
    let reversed = b.mapper.gradients(&g, &g.backward(disc.node)?);
    Ok((direct, reversed))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: StepMetrics,
}

/// Visible task and its pseudo-unseen counterpart for meta-training episode `i`.
pub fn meta_task_pair(
    base: &SampleTable,
    stats: &crate::domains::DomainStats,
    cfg: &TrainConfig,
    seed: u64,
    i: usize,
) -> Result<(Episode, Episode, f64, u64)> {
    let i = i as u64;
    let task_seed = derive_seed(seed, "meta/episode", i);
    let visible = sample_episode(base, cfg.way, cfg.shot, cfg.query, task_seed)?;
    let [lo, hi] = cfg.lambda_range;
    let lambda = if hi > lo {
        derive_rng(seed, "meta/lambda", i).random_range(lo..=hi)
    } else {
        lo
    };
    let su = make_pseudo_unseen(&visible.support_x, lambda, stats, derive_seed(seed, "meta/noise", 2 * i))?;
    let qu = make_pseudo_unseen(&visible.query_x, lambda, stats, derive_seed(seed, "meta/noise", 2 * i + 1))?;
    let unseen = visible.with_inputs(su, qu)?;
    Ok((visible, unseen, lambda, task_seed))
}

/// Meta-training loop over `cfg.episodes` sampled task pairs. `checkpoint`
/// is called with the episode count every `cfg.checkpoint_every` episodes.
pub fn run_meta_training(
    model: &TrainedModel,
    base: &SampleTable,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint: &mut dyn FnMut(usize, &Networks) -> Result<()>,
) -> Result<(TrainedModel, Vec<EpisodeRecord>)> {
    cfg.validate()?;
    let mut nets = model.nets.clone();
    let mut trace = Vec::with_capacity(cfg.episodes);
    if cfg.episodes > 0 {
        let stats = domain_stats(&base.x)?;
        let mut opt = MetaOptimizers::new(cfg);
        for i in 0..cfg.episodes {
            let (visible, unseen, lambda, task_seed) = meta_task_pair(base, &stats, cfg, seed, i)?;
            let (next, metrics) = meta_train_step(&nets, &mut opt, &visible, &unseen, lambda, cfg)
                .map_err(|e| match e {
                    Error::NonFinite(w) => Error::NonFinite(format!("{w} in episode {i}")),
                    other => other,
                })?;
            nets = next;
            trace.push(EpisodeRecord {
                episode: i,
                seed: task_seed,
                metrics,
            });
            if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
                checkpoint(i + 1, &nets)?;
            }
        }
    }
    Ok((
        TrainedModel {
            nets,
            phase: if cfg.episodes > 0 { Phase::MetaTrained } else { model.phase },
            config_hash: model.config_hash.clone(),
            seed: model.seed,
        },
        trace,
    ))
}

/// Accuracy of `classifier` on fused features of `x`.
pub fn fused_accuracy(nets: &Networks, classifier: &Classifier, x: &Tensor, labels: &[usize], rho_off: bool) -> Result<f64> {
    let (c, _) = fused_features(nets, x, rho_off)?;
    Ok(accuracy(&classify(classifier, &c)?, labels))
}
