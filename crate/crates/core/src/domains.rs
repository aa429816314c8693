//! Synthetic domains, pseudo-unseen mixing and episode sampling.
//!
//! A domain draws samples `T(p_c + sigma * g)` where `p_c` is a class
//! prototype, `g` is standard normal noise and `T(v) = scale * (R v) + shift`
//! is an orthogonal (or permutation) map followed by a diagonal scale and a
//! shift. Targets differ from the source through `T` and through their class
//! prototypes, which are disjoint from the source classes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    /// `[D, D]`, orthogonal or a permutation.
    pub matrix: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Tensor::identity(dim),
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    /// Givens rotations by `angle` radians in the planes `(i, i + D/2)`.
    ///
    /// Pairing each leading coordinate with a trailing one means the rotation
    /// moves signal between the two halves of the input.
    pub fn paired_rotation(dim: usize, angle: f64) -> Tensor {
        let mut r = Tensor::identity(dim);
        let half = dim / 2;
        let (c, s) = (angle.cos(), angle.sin());
        let v = r.values_mut();
        for i in 0..half {
            let j = i + half;
            v[i * dim + i] = c;
            v[i * dim + j] = -s;
            v[j * dim + i] = s;
            v[j * dim + j] = c;
        }
        r
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.matrix.shape() != [d, d] || self.shift.len() != d {
            return Err(Error::InvalidArgument(format!(
                "transform parts disagree: matrix {:?}, scale {d}, shift {}",
                self.matrix.shape(),
                self.shift.len()
            )));
        }
        let gram = self.matrix.transpose().matmul(&self.matrix)?;
        if gram.max_abs_diff(&Tensor::identity(d)) > 1e-9 {
            return Err(Error::InvalidArgument(
                "transform matrix is neither orthogonal nor a permutation".into(),
            ));
        }
        if self.scale.iter().any(|s| !s.is_finite()) || self.shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("transform has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| {
                let rv: f64 = self.matrix.row(j).iter().zip(v).map(|(a, b)| a * b).sum();
                self.scale[j] * rv + self.shift[j]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub prototypes: Vec<Vec<f64>>,
    pub sigma_class: f64,
    pub transform: DomainTransform,
    /// Global label of prototype 0; prototype `c` has label `label_offset + c`.
    pub label_offset: usize,
}

impl DomainSpec {
    pub fn dim(&self) -> usize {
        self.transform.dim()
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        if self.prototypes.is_empty() || self.prototypes.iter().any(|p| p.len() != self.dim()) {
            return Err(Error::InvalidArgument("prototype dimensions disagree".into()));
        }
        if !(self.sigma_class >= 0.0) || !self.sigma_class.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma_class must be non-negative, got {}",
                self.sigma_class
            )));
        }
        Ok(())
    }
}

/// Labeled rows. Labels are global class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    pub labels: Vec<usize>,
    pub x: Tensor,
}

impl SampleTable {
    pub fn new(labels: Vec<usize>, x: Tensor) -> Result<Self> {
        if !x.is_matrix() || x.rows() != labels.len() {
            return Err(Error::shape("sample_table", &[x.shape(), &[labels.len()]]));
        }
        Ok(Self { labels, x })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Row indices per class, classes in ascending order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        map
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.by_class().into_keys().collect()
    }

    pub fn subset(&self, rows: &[usize]) -> SampleTable {
        SampleTable {
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            x: self.x.select_rows(rows),
        }
    }

    /// Labels remapped to `0..classes` in ascending class order.
    pub fn dense_labels(&self) -> (Vec<usize>, usize) {
        let ids = self.class_ids();
        let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        (self.labels.iter().map(|y| index[y]).collect(), ids.len())
    }

    /// Columnar CSV: header `class,x0,..,x{D-1}`, one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for j in 0..self.dim() {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.x.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let dim = cols.len().saturating_sub(1);
        let header_ok = cols.first() == Some(&"class")
            && dim > 0
            && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("x{j}"));
        if !header_ok {
            return Err(Error::Format(format!("bad csv header {header:?}")));
        }
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Format(format!("row {}: expected {} fields", n + 1, dim + 1)));
            }
            labels.push(
                fields[0]
                    .parse()
                    .map_err(|e| Error::Format(format!("row {}: class: {e}", n + 1)))?,
            );
            for f in &fields[1..] {
                values.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::Format(format!("row {}: {e}", n + 1)))?,
                );
            }
        }
        if labels.is_empty() {
            return Err(Error::Format("csv has no rows".into()));
        }
        SampleTable::new(labels.clone(), Tensor::matrix(labels.len(), dim, values))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Draws `per_class` samples for every class of `spec`, grouped by class.
pub fn synth_dataset(spec: &DomainSpec, per_class: usize, seed: u64) -> Result<SampleTable> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let d = spec.dim();
    let mut labels = Vec::with_capacity(spec.classes() * per_class);
    let mut values = Vec::with_capacity(spec.classes() * per_class * d);
    for (c, proto) in spec.prototypes.iter().enumerate() {
        for _ in 0..per_class {
            let raw: Vec<f64> = proto
                .iter()
                .map(|p| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    p + spec.sigma_class * g
                })
                .collect();
            values.extend(spec.transform.apply(&raw));
            labels.push(spec.label_offset + c);
        }
    }
    let n = labels.len();
    SampleTable::new(labels, Tensor::matrix(n, d, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    /// Population standard deviation per dimension.
    pub std: Vec<f64>,
}

impl DomainStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn domain_stats(x: &Tensor) -> Result<DomainStats> {
    if !x.is_matrix() || x.rows() < 2 {
        return Err(Error::Insufficient("domain statistics need at least two samples".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(DomainStats { mean, std })
}

fn check_mix(x_v: &Tensor, lambda: f64, dim: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixing ratio {lambda} outside [0, 1]")));
    }
    if x_v.cols() != dim {
        return Err(Error::shape("make_pseudo_unseen", &[x_v.shape(), &[dim]]));
    }
    Ok(())
}

/// `lambda * x_v + (1 - lambda) * eps` with caller-supplied noise `eps`.
pub fn mix_with_noise(x_v: &Tensor, lambda: f64, eps: &Tensor) -> Result<Tensor> {
    check_mix(x_v, lambda, eps.cols())?;
    if eps.shape() != x_v.shape() {
        return Err(Error::shape("make_pseudo_unseen", &[x_v.shape(), eps.shape()]));
    }
    if lambda == 1.0 {
        return Ok(x_v.clone());
    }
    Ok(x_v.zip_map(eps, |x, e| lambda * x + (1.0 - lambda) * e))
}

/// Pseudo-unseen samples: each element is mixed with noise drawn from
/// `N(mean_j, std_j^2)` of its dimension `j`.
pub fn make_pseudo_unseen(x_v: &Tensor, lambda: f64, stats: &DomainStats, seed: u64) -> Result<Tensor> {
    check_mix(x_v, lambda, stats.dim())?;
    if lambda == 1.0 {
        return Ok(x_v.clone());
    }
    let mut rng = rng_from_seed(seed);
    let d = stats.dim();
    let eps: Vec<f64> = (0..x_v.len())
        .map(|k| {
            let g: f64 = StandardNormal.sample(&mut rng);
            stats.mean[k % d] + stats.std[k % d] * g
        })
        .collect();
    let eps = Tensor::new(x_v.shape().to_vec(), eps)?;
    mix_with_noise(x_v, lambda, &eps)
}

/// One N-way K-shot task with episode-local labels `0..way`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Global class behind each episode label.
    pub classes: Vec<usize>,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

impl Episode {
    /// Same task with different inputs, e.g. its pseudo-unseen counterpart.
    pub fn with_inputs(&self, support_x: Tensor, query_x: Tensor) -> Result<Episode> {
        if support_x.shape() != self.support_x.shape() || query_x.shape() != self.query_x.shape() {
            return Err(Error::shape(
                "episode inputs",
                &[support_x.shape(), self.support_x.shape()],
            ));
        }
        Ok(Episode {
            support_x,
            query_x,
            ..self.clone()
        })
    }
}

pub fn sample_episode(table: &SampleTable, way: usize, shot: usize, query: usize, seed: u64) -> Result<Episode> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(Error::InvalidArgument("way, shot and query must be positive".into()));
    }
    let groups = table.by_class();
    let eligible: Vec<(&usize, &Vec<usize>)> =
        groups.iter().filter(|(_, rows)| rows.len() >= shot + query).collect();
    if groups.len() < way {
        return Err(Error::Insufficient(format!(
            "{way}-way episode from {} classes",
            groups.len()
        )));
    }
    if eligible.len() < way {
        return Err(Error::Insufficient(format!(
            "only {} classes have {} samples",
            eligible.len(),
            shot + query
        )));
    }
    let mut rng = rng_from_seed(seed);
    let picked = sample_indices(&mut rng, eligible.len(), way).into_vec();
    let mut classes = Vec::with_capacity(way);
    let (mut support_rows, mut query_rows) = (Vec::new(), Vec::new());
    let (mut support_y, mut query_y) = (Vec::new(), Vec::new());
    for (label, &k) in picked.iter().enumerate() {
        let (&class, rows) = eligible[k];
        classes.push(class);
        let chosen = sample_indices(&mut rng, rows.len(), shot + query).into_vec();
        for (j, &r) in chosen.iter().enumerate() {
            if j < shot {
                support_rows.push(rows[r]);
                support_y.push(label);
            } else {
                query_rows.push(rows[r]);
                query_y.push(label);
            }
        }
    }
    Ok(Episode {
        support_x: table.x.select_rows(&support_rows),
        support_y,
        query_x: table.x.select_rows(&query_rows),
        query_y,
        way,
        shot,
        query,
        classes,
        support_rows,
        query_rows,
    })
}

/// Shift applied to one synthetic target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetShift {
    pub name: String,
    pub classes: usize,
    pub rotation_deg: f64,
    /// Per-dimension scales are drawn from `1 + scale_jitter * U(-1, 1)`.
    pub scale_jitter: f64,
    /// Length of the shift vector; its direction is drawn at random.
    pub shift_norm: f64,
}

impl Default for TargetShift {
    fn default() -> Self {
        Self {
            name: "target".into(),
            classes: 20,
            rotation_deg: 45.0,
            scale_jitter: 0.25,
            shift_norm: 0.5,
        }
    }
}

/// Generative description of the source split and its shifted targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub in_dim: usize,
    pub base_classes: usize,
    pub held_out_classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Prototype std on the leading half of the input dimensions.
    pub prototype_scale: f64,
    /// Prototype std on the trailing half.
    pub prototype_tail_scale: f64,
    pub sigma_class: f64,
    pub targets: Vec<TargetShift>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            in_dim: 16,
            base_classes: 64,
            held_out_classes: 16,
            source_per_class: 40,
            target_per_class: 40,
            prototype_scale: 1.0,
            prototype_tail_scale: 0.25,
            sigma_class: 0.6,
            targets: vec![
                TargetShift {
                    name: "mild".into(),
                    rotation_deg: 20.0,
                    scale_jitter: 0.1,
                    shift_norm: 0.25,
                    ..TargetShift::default()
                },
                TargetShift {
                    name: "moderate".into(),
                    rotation_deg: 45.0,
                    scale_jitter: 0.25,
                    shift_norm: 0.5,
                    ..TargetShift::default()
                },
                TargetShift {
                    name: "heavy".into(),
                    rotation_deg: 70.0,
                    scale_jitter: 0.4,
                    shift_norm: 1.0,
                    ..TargetShift::default()
                },
            ],
        }
    }
}

/// Source tables and target domains materialized from a [`BenchmarkConfig`].
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source_spec: DomainSpec,
    pub held_out_spec: DomainSpec,
    /// Base classes used for pretraining and meta-training.
    pub base: SampleTable,
    /// Held-out source classes; feeds the novel-class negative bank.
    pub held_out: SampleTable,
    pub targets: Vec<TargetDomain>,
}

#[derive(Clone, Debug)]
pub struct TargetDomain {
    pub name: String,
    pub spec: DomainSpec,
    pub table: SampleTable,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.in_dim < 2 {
            return bad("in_dim must be at least 2");
        }
        if self.base_classes == 0 || self.source_per_class < 2 || self.target_per_class < 2 {
            return bad("class and sample counts must be positive");
        }
        if !(self.sigma_class >= 0.0) || !(self.prototype_scale > 0.0) || !(self.prototype_tail_scale >= 0.0) {
            return bad("scales must be non-negative");
        }
        for t in &self.targets {
            if t.classes == 0 || !(t.scale_jitter >= 0.0 && t.scale_jitter < 1.0) || !(t.shift_norm >= 0.0) {
                return bad(&format!("target {}: invalid shift", t.name));
            }
        }
        Ok(())
    }

    fn prototypes(&self, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let half = self.in_dim / 2;
        (0..count)
            .map(|_| {
                (0..self.in_dim)
                    .map(|j| {
                        let g: f64 = StandardNormal.sample(rng);
                        let s = if j < half { self.prototype_scale } else { self.prototype_tail_scale };
                        s * g
                    })
                    .collect()
            })
            .collect()
    }

    pub fn target_spec(&self, shift: &TargetShift, label_offset: usize, seed: u64, index: u64) -> DomainSpec {
        let mut rng = derive_rng(seed, "benchmark/target", index);
        let prototypes = self.prototypes(shift.classes, &mut rng);
        let scale = (0..self.in_dim)
            .map(|_| 1.0 + shift.scale_jitter * rng.random_range(-1.0..=1.0))
            .collect();
        let dir: Vec<f64> = (0..self.in_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        DomainSpec {
            prototypes,
            sigma_class: self.sigma_class,
            transform: DomainTransform {
                matrix: DomainTransform::paired_rotation(self.in_dim, shift.rotation_deg.to_radians()),
                scale,
                shift: dir.iter().map(|v| shift.shift_norm * v / norm).collect(),
            },
            label_offset,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Benchmark> {
        self.validate()?;
        let mut rng = derive_rng(seed, "benchmark/source", 0);
        let source_spec = DomainSpec {
            prototypes: self.prototypes(self.base_classes, &mut rng),
            sigma_class: self.sigma_class,
            transform: DomainTransform::identity(self.in_dim),
            label_offset: 0,
        };
        let held_out_spec = DomainSpec {
            prototypes: self.prototypes(self.held_out_classes.max(1), &mut rng),
            label_offset: self.base_classes,
            ..source_spec.clone()
        };
        let base = synth_dataset(&source_spec, self.source_per_class, derive_seed(seed, "benchmark/base-table", 0))?;
        let held_out = if self.held_out_classes > 0 {
            synth_dataset(&held_out_spec, self.source_per_class, derive_seed(seed, "benchmark/held-out-table", 0))?
        } else {
            base.subset(&[])
        };
        let mut offset = self.base_classes + self.held_out_classes;
        let mut targets = Vec::new();
        for (i, t) in self.targets.iter().enumerate() {
            let spec = self.target_spec(t, offset, seed, i as u64);
            let table = synth_dataset(&spec, self.target_per_class, derive_seed(seed, "benchmark/target-table", i as u64))?;
            offset += t.classes;
            targets.push(TargetDomain {
                name: t.name.clone(),
                spec,
                table,
            });
        }
        Ok(Benchmark {
            source_spec,
            held_out_spec,
            base,
            held_out,
            targets,
        })
    }
}
