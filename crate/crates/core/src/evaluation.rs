//! Meta-test protocol: calibration, per-task accuracy, aggregate reports,
//! pretraining ablations and the contrastive-weight sweep.

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::domains::{domain_stats, make_pseudo_unseen, sample_episode, Benchmark, SampleTable};
use crate::emd::emd;
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_loss};
use crate::nets::{
    classify, domain_probability, domain_score_node, encode, map_node, ArchConfig, Classifier, Networks,
};
use crate::optim::Optimizer;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::training::{episode_classifier, fused_features, pretrain, run_meta_training, Regime, TrainConfig, TrainedModel};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub tasks: usize,
    /// Gradient steps of the meta-test calibration.
    pub calibration_steps: usize,
    /// Largest point set handed to the exact EMD solver.
    pub emd_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query: 15,
            tasks: 1000,
            calibration_steps: 1,
            emd_cap: crate::emd::DEFAULT_CAP,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return Err(Error::InvalidArgument("way must be >= 2, shot and query >= 1".into()));
        }
        if self.tasks == 0 {
            return Err(Error::InvalidArgument("task count must be at least 1".into()));
        }
        if self.emd_cap == 0 {
            return Err(Error::InvalidArgument("emd_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Networks after calibration together with the adapted episode classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedModel {
    pub nets: Networks,
    pub classifier: Classifier,
    pub rho_off: bool,
}

/// Updates the domain classifier (discriminator loss) and the mapper
/// (generator loss) on the target support set with `d_u = 1`, then fits a
/// prototype-initialized classifier on the fused support features.
///
/// The support rows play the visible role; the unseen role is pure noise
/// with the support statistics, i.e. mixing ratio 0 and hence `d_u = 1`.
pub fn calibrate(
    nets: &Networks,
    support_x: &Tensor,
    support_y: &[usize],
    way: usize,
    train: &TrainConfig,
    steps: usize,
    seed: u64,
    rho_off: bool,
) -> Result<CalibratedModel> {
    if support_x.rows() == 0 || support_y.is_empty() {
        return Err(Error::Insufficient("calibration needs a non-empty support set".into()));
    }
    let mut out = nets.clone();
    let stats = domain_stats(support_x)?;
    let z_v = encode(&nets.encoder, support_x)?;
    let mut dom_opt = Optimizer::new(train.optimizer, train.beta_outer);
    let mut map_opt = Optimizer::new(train.optimizer, train.beta_outer);
    for k in 0..steps {
        let x_u = make_pseudo_unseen(support_x, 0.0, &stats, derive_seed(seed, "calibrate/noise", k as u64))?;
        let z_u = encode(&nets.encoder, &x_u)?;
        let mut g = Graph::new();
        let dom = out.domain_classifier.bind(&mut g);
        let map = out.mapper.bind(&mut g);
        let zv = g.leaf(z_v.clone());
        let zu = g.leaf(z_u);
        let mv = map_node(&mut g, &map, zv)?;
        let mu = map_node(&mut g, &map, zu)?;
        let rho_v = domain_score_node(&mut g, &dom, mv)?;
        let rho_u = domain_score_node(&mut g, &dom, mu)?;
        let l_d = discriminator_loss(&mut g, rho_v, rho_u, 1.0)?;
        let l_g = generator_loss(&mut g, rho_u, 1.0)?;
        let grad_d = dom.gradients(&g, &g.backward(l_d.node)?);
        let grad_g = map.gradients(&g, &g.backward(l_g.node)?);
        dom_opt.step(&mut out.domain_classifier, &grad_d)?;
        map_opt.step(&mut out.mapper, &grad_g)?;
    }
    let (c, _) = fused_features(&out, support_x, rho_off)?;
    let classifier = episode_classifier(&c, support_y, way, train.alpha_inner, train.inner_steps)?;
    Ok(CalibratedModel {
        nets: out,
        classifier,
        rho_off,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub accuracy: f64,
    /// Mean difficulty score of the query rows.
    pub mean_rho: f64,
    /// Mean domain probability of the fused query features.
    pub mean_rho_fused: f64,
}

/// Fraction of query rows whose argmax logit is the true label.
pub fn evaluate_episode(model: &CalibratedModel, query_x: &Tensor, query_y: &[usize]) -> Result<EpisodeOutcome> {
    if query_y.is_empty() || query_x.rows() != query_y.len() {
        return Err(Error::shape("evaluate_episode", &[query_x.shape(), &[query_y.len()]]));
    }
    let (c, rho) = fused_features(&model.nets, query_x, model.rho_off)?;
    let logits = classify(&model.classifier, &c)?;
    let hits = logits.argmax_rows().iter().zip(query_y).filter(|(p, y)| p == y).count();
    Ok(EpisodeOutcome {
        accuracy: hits as f64 / query_y.len() as f64,
        mean_rho: rho.mean(),
        mean_rho_fused: domain_probability(&model.nets.domain_classifier, &c)?.mean(),
    })
}

/// One meta-test task: calibrate exactly once, then evaluate.
#[derive(Debug)]
pub struct MetaTestTask<'a> {
    nets: &'a Networks,
    calibrated: Option<CalibratedModel>,
}

impl<'a> MetaTestTask<'a> {
    pub fn new(nets: &'a Networks) -> Self {
        Self { nets, calibrated: None }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn calibrate(
        &mut self,
        support_x: &Tensor,
        support_y: &[usize],
        way: usize,
        train: &TrainConfig,
        steps: usize,
        seed: u64,
        rho_off: bool,
    ) -> Result<&CalibratedModel> {
        if self.calibrated.is_some() {
            return Err(Error::Protocol("a task is calibrated only once".into()));
        }
        let model = calibrate(self.nets, support_x, support_y, way, train, steps, seed, rho_off)?;
        Ok(self.calibrated.insert(model))
    }

    pub fn evaluate(&self, query_x: &Tensor, query_y: &[usize]) -> Result<EpisodeOutcome> {
        let model = self
            .calibrated
            .as_ref()
            .ok_or_else(|| Error::Protocol("evaluate called before calibration".into()))?;
        evaluate_episode(model, query_x, query_y)
    }
}

/// One per-task row of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_rho: f64,
    pub emd: f64,
    #[serde(skip)]
    pub mean_rho_fused: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: String,
    pub task_count: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub mean: f64,
    pub ci95: f64,
    pub mean_rho: f64,
    pub mean_rho_fused: f64,
    pub emd: f64,
    pub rho_off: bool,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip)]
    pub tasks: Vec<TaskRecord>,
}

/// Mean and normal-approximation 95% half-width of `values`.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * var.sqrt() / n.sqrt())
}

impl EvalReport {
    pub fn from_tasks(
        target: &str,
        cfg: &EvalConfig,
        tasks: Vec<TaskRecord>,
        rho_off: bool,
        config_hash: &str,
        seed: u64,
    ) -> Self {
        let col = |f: fn(&TaskRecord) -> f64| tasks.iter().map(f).collect::<Vec<_>>();
        let (mean, ci95) = mean_ci(&col(|t| t.accuracy));
        Self {
            target: target.to_string(),
            task_count: tasks.len(),
            way: cfg.way,
            shot: cfg.shot,
            query: cfg.query,
            mean,
            ci95,
            mean_rho: mean_ci(&col(|t| t.mean_rho)).0,
            mean_rho_fused: mean_ci(&col(|t| t.mean_rho_fused)).0,
            emd: mean_ci(&col(|t| t.emd)).0,
            rho_off,
            config_hash: config_hash.to_string(),
            seed,
            tasks,
        }
    }

    pub fn tasks_csv(&self) -> String {
        let mut out = String::from("task_id,seed,accuracy,mean_rho,emd\n");
        for t in &self.tasks {
            out.push_str(&format!("{},{},{},{},{}\n", t.task_id, t.seed, t.accuracy, t.mean_rho, t.emd));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Options shared by every meta-test run.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub rho_off: bool,
    /// Worker threads; 0 uses the rayon default, 1 runs sequentially.
    pub parallel: usize,
}

fn run_task(
    nets: &Networks,
    target: &SampleTable,
    source: &Tensor,
    train: &TrainConfig,
    cfg: &EvalConfig,
    seed: u64,
    i: usize,
    rho_off: bool,
) -> Result<TaskRecord> {
    let task_seed = derive_seed(seed, "eval/task", i as u64);
    let ep = sample_episode(target, cfg.way, cfg.shot, cfg.query, task_seed)?;
    let mut task = MetaTestTask::new(nets);
    task.calibrate(
        &ep.support_x,
        &ep.support_y,
        ep.way,
        train,
        cfg.calibration_steps,
        derive_seed(task_seed, "eval/calibrate", 0),
        rho_off,
    )?;
    let outcome = task.evaluate(&ep.query_x, &ep.query_y)?;

    let n = ep.query_x.rows().min(cfg.emd_cap).min(source.rows());
    let q = ep.query_x.select_rows(&(0..n).collect::<Vec<_>>());
    let mut rng = rng_from_seed(derive_seed(task_seed, "eval/emd", 0));
    let s = source.select_rows(&sample_indices(&mut rng, source.rows(), n).into_vec());
    Ok(TaskRecord {
        task_id: i,
        seed: task_seed,
        accuracy: outcome.accuracy,
        mean_rho: outcome.mean_rho,
        emd: emd(&q, &s, cfg.emd_cap)?,
        mean_rho_fused: outcome.mean_rho_fused,
    })
}

fn in_pool<T: Send>(parallel: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Samples `cfg.tasks` episodes from `target`, calibrates and evaluates each.
/// Rows are merged in task order, so the report does not depend on the
/// number of workers.
#[allow(clippy::too_many_arguments)]
pub fn run_meta_test(
    model: &TrainedModel,
    target_name: &str,
    target: &SampleTable,
    source: &Tensor,
    train: &TrainConfig,
    cfg: &EvalConfig,
    seed: u64,
    opts: RunOptions,
) -> Result<EvalReport> {
    cfg.validate()?;
    let nets = &model.nets;
    let one = |i| run_task(nets, target, source, train, cfg, seed, i, opts.rho_off);
    let rows: Result<Vec<TaskRecord>> = if opts.parallel == 1 {
        (0..cfg.tasks).map(one).collect()
    } else {
        in_pool(opts.parallel, || (0..cfg.tasks).into_par_iter().map(one).collect())?
    };
    Ok(EvalReport::from_tasks(
        target_name,
        cfg,
        rows?,
        opts.rho_off,
        &model.config_hash,
        seed,
    ))
}

/// Everything needed to run the full pipeline on a benchmark.
#[derive(Clone, Debug)]
pub struct Pipeline<'a> {
    pub arch: &'a ArchConfig,
    pub train: &'a TrainConfig,
    pub eval: &'a EvalConfig,
    pub bench: &'a Benchmark,
    pub seed: u64,
    pub config_hash: &'a str,
}

/// Models and reports produced by one pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub pretrained: TrainedModel,
    pub meta_trained: TrainedModel,
    pub reports: Vec<EvalReport>,
}

impl Pipeline<'_> {
    pub fn pretrain_seed(&self) -> u64 {
        derive_seed(self.seed, "pipeline/pretrain", 0)
    }

    pub fn meta_seed(&self) -> u64 {
        derive_seed(self.seed, "pipeline/meta", 0)
    }

    pub fn eval_seed(&self, target: usize) -> u64 {
        derive_seed(self.seed, "pipeline/eval", target as u64)
    }

    pub fn pretrain(&self, regime: Regime, train: &TrainConfig) -> Result<TrainedModel> {
        let (mut m, _) = pretrain(self.arch, train, regime, &self.bench.base, &self.bench.held_out, self.pretrain_seed())?;
        m.config_hash = self.config_hash.to_string();
        Ok(m)
    }

    pub fn meta_train(&self, model: &TrainedModel) -> Result<TrainedModel> {
        let (m, _) = run_meta_training(model, &self.bench.base, self.train, self.meta_seed(), &mut |_, _| Ok(()))?;
        Ok(m)
    }

    /// Meta-tests `model` on every target of the benchmark.
    pub fn evaluate(&self, model: &TrainedModel, opts: RunOptions) -> Result<Vec<EvalReport>> {
        self.bench
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                run_meta_test(model, &t.name, &t.table, &self.bench.base.x, self.train, self.eval, self.eval_seed(i), opts)
            })
            .collect()
    }

    pub fn run(&self, regime: Regime, train: &TrainConfig, opts: RunOptions) -> Result<PipelineRun> {
        let pretrained = self.pretrain(regime, train)?;
        let meta_trained = self.meta_train(&pretrained)?;
        let reports = self.evaluate(&meta_trained, opts)?;
        Ok(PipelineRun {
            pretrained,
            meta_trained,
            reports,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    /// One entry per pretraining regime, each holding a report per target.
    pub regimes: Vec<(Regime, Vec<EvalReport>)>,
}

impl AblationReport {
    pub fn mean(&self, regime: Regime, target: &str) -> Option<f64> {
        self.regimes
            .iter()
            .find(|(r, _)| *r == regime)
            .and_then(|(_, reps)| reps.iter().find(|r| r.target == target))
            .map(|r| r.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,target,tasks,mean,ci95,mean_rho,emd\n");
        for (regime, reports) in &self.regimes {
            for r in reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    regime.name(),
                    r.target,
                    r.task_count,
                    r.mean,
                    r.ci95,
                    r.mean_rho,
                    r.emd
                ));
            }
        }
        out
    }
}

/// The three pretraining regimes under shared seeds, each followed by the
/// same meta-training and meta-test.
pub fn run_ablation(p: &Pipeline, opts: RunOptions) -> Result<AblationReport> {
    let regimes = Regime::ALL
        .iter()
        .map(|&r| Ok((r, p.run(r, p.train, opts)?.reports)))
        .collect::<Result<_>>()?;
    Ok(AblationReport { regimes })
}

/// `0, 0.2, ..., 10`.
pub fn default_kappa_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 5.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kappa: f64,
    /// Mean accuracy per target, in benchmark order.
    pub means: Vec<f64>,
}

pub fn sweep_to_csv(targets: &[String], rows: &[SweepRow]) -> String {
    let mut out = String::from("kappa");
    for t in targets {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.kappa.to_string());
        for m in &r.means {
            out.push_str(&format!(",{m}"));
        }
        out.push('\n');
    }
    out
}

/// Full mixed-regime pipeline for every `kappa` in `grid`, shared seeds.
pub fn sweep_kappa(p: &Pipeline, grid: &[f64], opts: RunOptions) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&kappa| {
            let train = TrainConfig { kappa, ..p.train.clone() };
            let run = p.run(Regime::Mixed, &train, opts)?;
            Ok(SweepRow {
                kappa,
                means: run.reports.iter().map(|r| r.mean).collect(),
            })
        })
        .collect()
}
