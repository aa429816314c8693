//! The four networks of the method and the fusion rule.
//!
//! * [`Encoder`]: MLP `in -> hidden.. -> d`, relu between layers, rows
//!   L2-normalized at the output.
//! * [`Mapper`]: two fully connected layers `d -> h -> d` with a relu between.
//! * [`Classifier`]: one linear layer `d -> classes`, producing raw logits.
//! * [`DomainClassifier`]: `d -> h -> 1` with a relu between and a sigmoid
//!   head, so the transfer difficulty score lies in `(0, 1)`.
//!
//! Weights are stored `[fan_in, fan_out]` and applied as `x W + b`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{derive_rng, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let a = glorot_bound(fan_in, fan_out);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..=a))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A stack of linear layers. Activations are chosen by the wrapping role.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// An [`Mlp`] whose tensors have been placed on a [`Graph`] as leaves.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect(),
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
                .collect(),
        }
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            p.push(format!("{i}.weight"), l.weight.clone()).expect("unique");
            p.push(format!("{i}.bias"), l.bias.clone()).expect("unique");
        }
        p
    }

    pub fn from_param_set(p: &ParamSet) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(weight) = p.get(&format!("{}.weight", layers.len())) {
            let bias = p.require(&format!("{}.bias", layers.len()))?;
            if !weight.is_matrix() || bias.shape() != [weight.cols()] {
                return Err(Error::Format(format!(
                    "layer {}: weight {:?} and bias {:?} disagree",
                    layers.len(),
                    weight.shape(),
                    bias.shape()
                )));
            }
            layers.push(Linear {
                weight: weight.clone(),
                bias: bias.clone(),
            });
        }
        if layers.is_empty() {
            return Err(Error::Format("no layers".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Format(format!("layers {i} and {} do not chain", i + 1)));
            }
        }
        Ok(Self { layers })
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer dimensions must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

impl BoundMlp {
    /// Wraps `(weight, bias)` node pairs already on a graph.
    pub fn from_nodes(layers: Vec<(NodeId, NodeId)>) -> Self {
        Self { layers }
    }

    /// Applies every layer, relu between layers, and optionally after the last.
    pub fn forward(&self, g: &mut Graph, x: NodeId, relu_last: bool) -> Result<NodeId> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let width = g.value(w).rows();
            if g.value(h).cols() != width || !g.value(h).is_matrix() {
                return Err(Error::shape("linear", &[g.value(h).shape(), g.value(w).shape()]));
            }
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if relu_last || i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Gradient tensors shaped like the bound network; zeros where the loss
    /// does not reach a parameter.
    pub fn gradients(&self, g: &Graph, grads: &GradientMap) -> Mlp {
        let grab = |id: NodeId| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        };
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| Linear {
                    weight: grab(w),
                    bias: grab(b),
                })
                .collect(),
        }
    }

    /// True when `grads` holds an entry for any parameter of this network.
    pub fn touched_by(&self, grads: &GradientMap) -> bool {
        self.nodes().any(|id| grads.contains(id))
    }
}

macro_rules! role {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub Mlp);

        impl std::ops::Deref for $name {
            type Target = Mlp;
            fn deref(&self) -> &Mlp {
                &self.0
            }
        }

        impl std::ops::DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Mlp {
                &mut self.0
            }
        }
    };
}

role!(
    /// Feature encoder.
    Encoder
);
role!(
    /// Domain knowledge mapping layer.
    Mapper
);
role!(
    /// Linear classifier head producing logits.
    Classifier
);
role!(
    /// Domain classifier; its sigmoid output is the transfer difficulty score.
    DomainClassifier
);

impl Encoder {
    pub fn new(mlp: Mlp) -> Self {
        Self(mlp)
    }

    pub fn feature_dim(&self) -> usize {
        self.out_dim()
    }
}

impl Mapper {
    pub fn new(mlp: Mlp) -> Result<Self> {
        if mlp.layers.len() != 2 || mlp.in_dim() != mlp.out_dim() {
            return Err(Error::InvalidArgument(
                "mapper must be exactly two layers, square end to end".into(),
            ));
        }
        Ok(Self(mlp))
    }
}

impl Classifier {
    pub fn new(mlp: Mlp) -> Result<Self> {
        if mlp.layers.len() != 1 {
            return Err(Error::InvalidArgument("classifier is a single linear layer".into()));
        }
        Ok(Self(mlp))
    }

    pub fn classes(&self) -> usize {
        self.out_dim()
    }

    /// Nearest-prototype initialization: row `k` of the weight is `2 p_k`
    /// and bias `k` is `-|p_k|^2`, where `p_k` is the mean feature of class
    /// `k`, so `argmax` logits equals the nearest prototype in Euclidean
    /// distance.
    pub fn from_prototypes(features: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "prototypes",
                &[features.shape(), &[labels.len()]],
            ));
        }
        let d = features.cols();
        let mut sums = vec![0.0; classes * d];
        let mut counts = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            counts[y] += 1;
            for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Insufficient(format!("class {k} has no support rows")));
        }
        let mut weight = Tensor::zeros(&[d, classes]);
        let mut bias = vec![0.0; classes];
        for k in 0..classes {
            let proto: Vec<f64> = sums[k * d..(k + 1) * d]
                .iter()
                .map(|s| s / counts[k] as f64)
                .collect();
            for (j, p) in proto.iter().enumerate() {
                weight.values_mut()[j * classes + k] = 2.0 * p;
            }
            bias[k] = -proto.iter().map(|p| p * p).sum::<f64>();
        }
        Ok(Self(Mlp {
            layers: vec![Linear {
                weight,
                bias: Tensor::vector(bias),
            }],
        }))
    }
}

impl DomainClassifier {
    pub fn new(mlp: Mlp) -> Result<Self> {
        if mlp.out_dim() != 1 || mlp.layers.len() < 2 {
            return Err(Error::InvalidArgument(
                "domain classifier needs a hidden layer and a scalar head".into(),
            ));
        }
        Ok(Self(mlp))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub in_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub mapper_hidden: usize,
    pub domain_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_dim: 16,
            encoder_hidden: vec![64, 64],
            feature_dim: 32,
            mapper_hidden: 32,
            domain_hidden: 32,
        }
    }
}

impl ArchConfig {
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(self.feature_dim);
        dims
    }
}

/// The four parameter sets of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub domain_classifier: DomainClassifier,
    pub mapper: Mapper,
}

impl Networks {
    /// Fresh parameters; every network draws from its own derived stream.
    pub fn init(arch: &ArchConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("classifier needs at least one class".into()));
        }
        let d = arch.feature_dim;
        Ok(Self {
            encoder: Encoder(Mlp::init(&arch.encoder_dims(), &mut derive_rng(seed, "init/encoder", 0))?),
            classifier: Classifier(Mlp::init(&[d, classes], &mut derive_rng(seed, "init/classifier", 0))?),
            domain_classifier: DomainClassifier(Mlp::init(
                &[d, arch.domain_hidden, 1],
                &mut derive_rng(seed, "init/domain", 0),
            )?),
            mapper: Mapper(Mlp::init(
                &[d, arch.mapper_hidden, d],
                &mut derive_rng(seed, "init/mapper", 0),
            )?),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut p = self.encoder.to_param_set().prefixed("encoder");
        p.extend(self.classifier.to_param_set().prefixed("classifier")).expect("unique");
        p.extend(self.domain_classifier.to_param_set().prefixed("domain_classifier"))
            .expect("unique");
        p.extend(self.mapper.to_param_set().prefixed("mapper")).expect("unique");
        p
    }

    pub fn from_param_set(p: &ParamSet) -> Result<Self> {
        let nets = Self {
            encoder: Encoder(Mlp::from_param_set(&p.with_prefix("encoder"))?),
            classifier: Classifier::new(Mlp::from_param_set(&p.with_prefix("classifier"))?)?,
            domain_classifier: DomainClassifier::new(Mlp::from_param_set(
                &p.with_prefix("domain_classifier"),
            )?)?,
            mapper: Mapper::new(Mlp::from_param_set(&p.with_prefix("mapper"))?)?,
        };
        let d = nets.feature_dim();
        if nets.classifier.in_dim() != d || nets.domain_classifier.in_dim() != d || nets.mapper.in_dim() != d {
            return Err(Error::Format(format!(
                "networks disagree on the feature dimension {d}"
            )));
        }
        Ok(nets)
    }
}

// Graph-level building blocks used by the losses and training loops.

/// `z = normalize(phi(x))`.
pub fn encode_node(g: &mut Graph, encoder: &BoundMlp, x: NodeId) -> Result<NodeId> {
    let h = encoder.forward(g, x, false)?;
    g.l2_normalize(h)
}

/// `M(z)`.
pub fn map_node(g: &mut Graph, mapper: &BoundMlp, z: NodeId) -> Result<NodeId> {
    mapper.forward(g, z, false)
}

/// `sigmoid(f_d(h))`, one score per row.
pub fn domain_score_node(g: &mut Graph, domain: &BoundMlp, h: NodeId) -> Result<NodeId> {
    let logit = domain.forward(g, h, false)?;
    g.sigmoid(logit)
}

/// `c = z + rho * m`, with the `[n, 1]` score repeated across columns.
pub fn fuse_node(g: &mut Graph, z: NodeId, rho: NodeId, mapped: NodeId) -> Result<NodeId> {
    let (zs, rs, ms) = (g.value(z).shape(), g.value(rho).shape(), g.value(mapped).shape());
    if zs != ms || zs.len() != 2 || rs != [zs[0], 1] {
        return Err(Error::shape("fuse", &[zs, rs, ms]));
    }
    let ones = g.leaf(Tensor::full(&[1, zs[1]], 1.0));
    let spread = g.matmul(rho, ones)?;
    let scaled = g.mul(spread, mapped)?;
    g.add(z, scaled)
}

pub fn classify_node(g: &mut Graph, classifier: &BoundMlp, c: NodeId) -> Result<NodeId> {
    classifier.forward(g, c, false)
}

fn check_width(op: &'static str, x: &Tensor, width: usize) -> Result<()> {
    if !x.is_matrix() || x.cols() != width {
        return Err(Error::shape(op, &[x.shape(), &[width]]));
    }
    Ok(())
}

// Value-level wrappers.

pub fn encode(encoder: &Encoder, batch: &Tensor) -> Result<Tensor> {
    check_width("encode", batch, encoder.in_dim())?;
    let mut g = Graph::new();
    let enc = encoder.bind(&mut g);
    let x = g.leaf(batch.clone());
    let z = encode_node(&mut g, &enc, x)?;
    Ok(g.value(z).clone())
}

pub fn map_features(mapper: &Mapper, z: &Tensor) -> Result<Tensor> {
    check_width("map", z, mapper.in_dim())?;
    let mut g = Graph::new();
    let m = mapper.bind(&mut g);
    let z = g.leaf(z.clone());
    let out = map_node(&mut g, &m, z)?;
    Ok(g.value(out).clone())
}

/// Transfer difficulty score `rho = f_d(M(z))`, shape `[n, 1]`.
pub fn difficulty_score(domain: &DomainClassifier, mapper: &Mapper, z: &Tensor) -> Result<Tensor> {
    check_width("difficulty_score", z, mapper.in_dim())?;
    let mut g = Graph::new();
    let (d, m) = (domain.bind(&mut g), mapper.bind(&mut g));
    let z = g.leaf(z.clone());
    let mapped = map_node(&mut g, &m, z)?;
    let rho = domain_score_node(&mut g, &d, mapped)?;
    Ok(g.value(rho).clone())
}

/// Domain classifier applied directly to (fused) features, `p = f_d(c)`.
pub fn domain_probability(domain: &DomainClassifier, c: &Tensor) -> Result<Tensor> {
    check_width("domain_probability", c, domain.in_dim())?;
    let mut g = Graph::new();
    let d = domain.bind(&mut g);
    let c = g.leaf(c.clone());
    let p = domain_score_node(&mut g, &d, c)?;
    Ok(g.value(p).clone())
}

pub fn fuse(z: &Tensor, rho: &Tensor, mapper: &Mapper) -> Result<Tensor> {
    check_width("fuse", z, mapper.in_dim())?;
    let mut g = Graph::new();
    let m = mapper.bind(&mut g);
    let zn = g.leaf(z.clone());
    let rn = g.leaf(rho.clone());
    let mapped = map_node(&mut g, &m, zn)?;
    let c = fuse_node(&mut g, zn, rn, mapped)?;
    Ok(g.value(c).clone())
}

pub fn classify(classifier: &Classifier, c: &Tensor) -> Result<Tensor> {
    check_width("classify", c, classifier.in_dim())?;
    let mut g = Graph::new();
    let k = classifier.bind(&mut g);
    let c = g.leaf(c.clone());
    let logits = classify_node(&mut g, &k, c)?;
    Ok(g.value(logits).clone())
}
