use std::path::PathBuf;

use dkm_core::domains::Benchmark;
use dkm_core::evaluation::{run_ablation, sweep_kappa, sweep_to_csv, Pipeline, RunOptions};
use dkm_core::training::{pretrain, run_meta_training, EpisodeRecord, EpochRecord, TrainedModel};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::rundir::RunDir;

pub const PRETRAINED: &str = "pretrained";
pub const META_TRAINED: &str = "meta_trained";

/// Everything a command needs besides its name.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: RunConfig,
    /// Raw bytes of the config file, hashed into `inputs.sha256`.
    pub config_bytes: Vec<u8>,
    pub out: PathBuf,
    pub force: bool,
    pub rho_off: bool,
    pub parallel: usize,
    pub checkpoint: Option<PathBuf>,
}

struct Context {
    dir: RunDir,
    bench: Benchmark,
    hash: String,
}

impl Invocation {
    fn start(&self) -> Result<Context> {
        self.config.validate()?;
        let hash = self.config.config_hash()?;
        let mut dir = RunDir::create(&self.out, self.force)?;
        dir.write_config(&self.config, &self.config_bytes)?;
        let bench = dir.timed("benchmark", || self.config.build_benchmark())?;
        Ok(Context { dir, bench, hash })
    }

    fn pipeline<'a>(&'a self, bench: &'a Benchmark, hash: &'a str) -> Pipeline<'a> {
        Pipeline {
            arch: &self.config.arch,
            train: &self.config.train,
            eval: &self.config.protocol,
            bench,
            seed: self.config.seed,
            config_hash: hash,
        }
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            rho_off: self.rho_off,
            parallel: self.parallel,
        }
    }

    fn load_checkpoint(&self, dir: &mut RunDir, missing: &str) -> Result<TrainedModel> {
        let stem = self.checkpoint.as_deref().ok_or_else(|| HarnessError::Usage(missing.into()))?;
        let stem = stem.with_extension("");
        for ext in ["json", "bin"] {
            let p = stem.with_extension(ext);
            if !p.is_file() {
                return Err(HarnessError::Usage(format!("{missing}: {} not found", p.display())));
            }
            dir.record_input_file(&format!("checkpoint.{ext}"), &p)?;
        }
        Ok(TrainedModel::load(&stem)?)
    }
}

fn pretrain_csv(trace: &[EpochRecord], seed: u64) -> String {
    let mut out = String::from("phase,epoch,seed,alpha,loss,ce,ssl\n");
    for r in trace {
        out.push_str(&format!("pretrain,{},{seed},{},{},{},{}\n", r.epoch, r.alpha, r.loss, r.ce, r.ssl));
    }
    out
}

fn metatrain_csv(trace: &[EpisodeRecord]) -> String {
    let mut out =
        String::from("phase,episode,seed,lambda,loss_cls,loss_d,loss_g,query_acc,mean_rho_v,mean_rho_u\n");
    for r in trace {
        let m = &r.metrics;
        out.push_str(&format!(
            "metatrain,{},{},{},{},{},{},{},{},{}\n",
            r.episode, r.seed, m.lambda, m.loss_cls, m.loss_d, m.loss_g, m.query_acc, m.mean_rho_v, m.mean_rho_u
        ));
    }
    out
}

fn save_model(dir: &RunDir, name: &str, model: &TrainedModel) -> Result<()> {
    Ok(model.save(&dir.path(name))?)
}

pub fn cmd_pretrain(inv: &Invocation) -> Result<PathBuf> {
    let mut ctx = inv.start()?;
    let cfg = &inv.config;
    let seed = inv.pipeline(&ctx.bench, &ctx.hash).pretrain_seed();
    let (mut model, trace) = ctx.dir.timed("pretrain", || {
        Ok(pretrain(&cfg.arch, &cfg.train, cfg.regime, &ctx.bench.base, &ctx.bench.held_out, seed)?)
    })?;
    model.config_hash = ctx.hash.clone();
    save_model(&ctx.dir, PRETRAINED, &model)?;
    ctx.dir.write("pretrain_trace.csv", pretrain_csv(&trace, seed))?;
    let path = ctx.dir.path(PRETRAINED);
    ctx.dir.finish()?;
    Ok(path)
}

pub fn cmd_metatrain(inv: &Invocation) -> Result<PathBuf> {
    let mut ctx = inv.start()?;
    let model = inv.load_checkpoint(&mut ctx.dir, "pretrain checkpoint required")?;
    let seed = inv.pipeline(&ctx.bench, &ctx.hash).meta_seed();
    let root = ctx.dir.root().to_path_buf();
    let bench = &ctx.bench;
    let (mut trained, trace) = ctx.dir.timed("metatrain", || {
        let mut save = |episode: usize, nets: &dkm_core::nets::Networks| -> dkm_core::Result<()> {
            let snap = TrainedModel {
                nets: nets.clone(),
                ..model.clone()
            };
            let dir = root.join("checkpoints");
            std::fs::create_dir_all(&dir)?;
            snap.save(&dir.join(format!("episode_{episode:06}")))
        };
        Ok(run_meta_training(&model, &bench.base, &inv.config.train, seed, &mut save)?)
    })?;
    trained.config_hash = ctx.hash.clone();
    save_model(&ctx.dir, META_TRAINED, &trained)?;
    ctx.dir.write("metatrain_trace.csv", metatrain_csv(&trace))?;
    let path = ctx.dir.path(META_TRAINED);
    ctx.dir.finish()?;
    Ok(path)
}

pub fn cmd_evaluate(inv: &Invocation) -> Result<()> {
    let mut ctx = inv.start()?;
    let model = inv.load_checkpoint(&mut ctx.dir, "checkpoint required")?;
    let (bench, hash) = (&ctx.bench, &ctx.hash);
    let reports = ctx
        .dir
        .timed("evaluate", || Ok(inv.pipeline(bench, hash).evaluate(&model, inv.options())?))?;
    let mut summary = String::from("target,tasks,mean,ci95,mean_rho,mean_rho_fused,emd,rho_off\n");
    for r in &reports {
        ctx.dir.write(&format!("eval_{}_tasks.csv", r.target), r.tasks_csv())?;
        ctx.dir.write(&format!("eval_{}_summary.json", r.target), r.summary_json()?)?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.target, r.task_count, r.mean, r.ci95, r.mean_rho, r.mean_rho_fused, r.emd, r.rho_off
        ));
    }
    ctx.dir.write("eval_summary.csv", summary)?;
    ctx.dir.finish()
}

pub fn cmd_ablate(inv: &Invocation) -> Result<()> {
    let mut ctx = inv.start()?;
    let (bench, hash) = (&ctx.bench, &ctx.hash);
    let report = ctx
        .dir
        .timed("ablate", || Ok(run_ablation(&inv.pipeline(bench, hash), inv.options())?))?;
    ctx.dir.write("ablation.csv", report.to_csv())?;
    ctx.dir.finish()
}

pub fn cmd_sweep(inv: &Invocation) -> Result<()> {
    let mut ctx = inv.start()?;
    let (bench, hash) = (&ctx.bench, &ctx.hash);
    let rows = ctx.dir.timed("sweep", || {
        Ok(sweep_kappa(&inv.pipeline(bench, hash), &inv.config.sweep.kappa, inv.options())?)
    })?;
    let names: Vec<String> = ctx.bench.targets.iter().map(|t| t.name.clone()).collect();
    ctx.dir.write("sweep.csv", sweep_to_csv(&names, &rows))?;
    ctx.dir.finish()
}
