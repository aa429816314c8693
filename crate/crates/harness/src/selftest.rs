//! Quick invariant suite behind `dkmap selftest`.

use dkm_core::autodiff::Graph;
use dkm_core::domains::{make_pseudo_unseen, sample_episode, synth_dataset, DomainSpec, DomainStats, DomainTransform};
use dkm_core::emd::{cost_matrix, emd, min_cost_assignment};
use dkm_core::gradcheck::{fd_check, BoundParams};
use dkm_core::losses::{
    alpha, cross_entropy, discriminator_loss, generator_loss, info_nce, info_nce_class_aware, pretrain_loss, Schedule,
};
use dkm_core::nets::{encode, ArchConfig, Networks};
use dkm_core::params::ParamSet;
use dkm_core::rng::{derive_rng, rng_from_seed, Rng};
use dkm_core::training::{fused_features, meta_train_step, MetaOptimizers, TrainConfig};
use dkm_core::Tensor;
use rand::Rng as _;

type LossFn<'a> = Box<dyn Fn(&mut Graph, &BoundParams) -> dkm_core::Result<dkm_core::autodiff::NodeId> + 'a>;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
}

fn loss_gradients(seeds: u64) -> Check {
    let labels = [0usize, 1, 2, 0, 1, 2];
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = derive_rng(seed, "selftest/grad", 0);
        let mut p = ParamSet::new();
        for name in ["a", "b", "bank"] {
            p.push(name, random(&mut rng, 6, 4)).expect("unique names");
        }
        p.push("rv", random(&mut rng, 6, 1)).expect("unique names");
        p.push("ru", random(&mut rng, 6, 1)).expect("unique names");
        let sched = Schedule::new(0.1, 10).expect("valid schedule");
        let losses: Vec<LossFn<'_>> = vec![
            Box::new(|g, b| Ok(cross_entropy(g, b.get("a")?, &labels)?.node)),
            Box::new(|g, b| {
                let (z1, z2) = (g.l2_normalize(b.get("a")?)?, g.l2_normalize(b.get("b")?)?);
                Ok(info_nce(g, z1, z2, 0.5)?.node)
            }),
            Box::new(|g, b| {
                let (z1, z2) = (g.l2_normalize(b.get("a")?)?, g.l2_normalize(b.get("b")?)?);
                let bank = g.l2_normalize(b.get("bank")?)?;
                Ok(info_nce_class_aware(g, z1, z2, &labels, Some(bank), 0.5)?.node)
            }),
            Box::new(|g, b| {
                let ce = cross_entropy(g, b.get("a")?, &labels)?;
                let (z1, z2) = (g.l2_normalize(b.get("a")?)?, g.l2_normalize(b.get("b")?)?);
                let ssl = info_nce_class_aware(g, z1, z2, &labels, None, 0.5)?;
                Ok(pretrain_loss(g, ce, ssl, 4.0, &sched)?.node)
            }),
            Box::new(|g, b| {
                let (rv, ru) = (g.sigmoid(b.get("rv")?)?, g.sigmoid(b.get("ru")?)?);
                let ru = g.scalar_mul(ru, 0.5)?;
                Ok(discriminator_loss(g, rv, ru, 0.6)?.node)
            }),
            Box::new(|g, b| {
                let ru = g.sigmoid(b.get("ru")?)?;
                let ru = g.scalar_mul(ru, 0.5)?;
                Ok(generator_loss(g, ru, 0.6)?.node)
            }),
        ];
        for f in &losses {
            match fd_check(&p, 1e-5, f) {
                Ok(r) => worst = worst.max(r.max_rel_error),
                Err(e) => return check("loss gradients", false, e.to_string()),
            }
        }
    }
    check("loss gradients", worst < 1e-4, format!("max relative error {worst:.2e} over {seeds} seeds"))
}

fn schedule() -> Check {
    let s = Schedule::new(0.1, 10).expect("valid schedule");
    let vals = [alpha(0.0, &s), alpha(5.0, &s), alpha(10.0, &s)];
    let ok = match vals {
        [Ok(a), Ok(b), Ok(c)] => a == 0.0 && (b - 0.05).abs() <= 1e-15 && (c - 0.1).abs() <= 1e-15,
        _ => false,
    };
    check("schedule endpoints", ok, format!("{vals:?}"))
}

fn mixing(draws: usize) -> Check {
    let stats = DomainStats {
        mean: vec![0.5, -1.0],
        std: vec![2.0, 0.5],
    };
    let lambda = 0.4;
    let x = Tensor::matrix(1, 2, vec![1.0, 3.0]);
    let rows = Tensor::matrix(draws, 2, (0..draws).flat_map(|_| x.values().to_vec()).collect());
    let u = match make_pseudo_unseen(&rows, lambda, &stats, 11) {
        Ok(u) => u,
        Err(e) => return check("pseudo-unseen mixing", false, e.to_string()),
    };
    let n = draws as f64;
    let mut ok = true;
    for d in 0..2 {
        let col: Vec<f64> = (0..draws).map(|i| u.row(i)[d]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sigma = (1.0 - lambda) * stats.std[d];
        let want = lambda * x.values()[d] + (1.0 - lambda) * stats.mean[d];
        ok &= (mean - want).abs() <= 4.0 * sigma / n.sqrt();
        ok &= (var.sqrt() - sigma).abs() <= 0.05 * sigma;
    }
    let same = make_pseudo_unseen(&rows, 1.0, &stats, 11).map(|t| t == rows).unwrap_or(false);
    check("pseudo-unseen mixing", ok && same, format!("{draws} draws"))
}

fn permutation_min(cost: &[f64], n: usize) -> f64 {
    fn go(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

fn emd_oracle(instances: usize) -> Check {
    let mut rng = rng_from_seed(77);
    let mut worst = 0.0f64;
    for k in 0..instances {
        let n = 1 + k % 6;
        let a = random(&mut rng, n, 2);
        let b = random(&mut rng, n, 2);
        let brute = permutation_min(&cost_matrix(&a, &b), n);
        let (_, total) = min_cost_assignment(&cost_matrix(&a, &b), n);
        worst = worst.max((total - brute).abs());
        let sym = emd(&a, &b, 64).and_then(|ab| emd(&b, &a, 64).map(|ba| (ab - ba).abs()));
        if sym.map(|d| d > 1e-12).unwrap_or(true) || emd(&a, &a, 64).ok() != Some(0.0) {
            return check("exact EMD", false, format!("instance {k}"));
        }
    }
    check("exact EMD", worst <= 1e-9, format!("max deviation {worst:.2e} over {instances} instances"))
}

fn tiny_setup() -> dkm_core::Result<(Networks, dkm_core::domains::Episode, dkm_core::domains::Episode)> {
    let arch = ArchConfig {
        in_dim: 3,
        encoder_hidden: vec![6],
        feature_dim: 4,
        mapper_hidden: 3,
        domain_hidden: 3,
    };
    let spec = DomainSpec {
        prototypes: (0..4).map(|c| vec![c as f64, 1.0 - c as f64, 0.5]).collect(),
        sigma_class: 0.3,
        transform: DomainTransform::identity(3),
        label_offset: 0,
    };
    let table = synth_dataset(&spec, 6, 5)?;
    let visible = sample_episode(&table, 3, 2, 3, 5)?;
    let stats = DomainStats {
        mean: vec![0.0; 3],
        std: vec![1.0; 3],
    };
    let su = make_pseudo_unseen(&visible.support_x, 0.5, &stats, 6)?;
    let qu = make_pseudo_unseen(&visible.query_x, 0.5, &stats, 7)?;
    let unseen = visible.with_inputs(su, qu)?;
    Ok((Networks::init(&arch, 4, 5)?, visible, unseen))
}

fn zero_rate_step() -> Check {
    let run = || -> dkm_core::Result<bool> {
        let (nets, v, u) = tiny_setup()?;
        let cfg = TrainConfig {
            eta: 0.0,
            way: 3,
            shot: 2,
            query: 3,
            ..TrainConfig::default()
        };
        let mut opt = MetaOptimizers::new(&cfg);
        let (next, _) = meta_train_step(&nets, &mut opt, &v, &u, 0.5, &cfg)?;
        Ok(next == nets)
    };
    match run() {
        Ok(same) => check("zero-rate meta step", same, "parameters bit-identical".into()),
        Err(e) => check("zero-rate meta step", false, e.to_string()),
    }
}

fn rho_off_path() -> Check {
    let run = || -> dkm_core::Result<bool> {
        let (nets, v, _) = tiny_setup()?;
        let (c, _) = fused_features(&nets, &v.query_x, true)?;
        Ok(c == encode(&nets.encoder, &v.query_x)?)
    };
    match run() {
        Ok(same) => check("mapping switch", same, "rho = 0 reproduces encoder features".into()),
        Err(e) => check("mapping switch", false, e.to_string()),
    }
}

/// Runs every check; none of them panics.
pub fn run_all() -> Vec<Check> {
    vec![
        loss_gradients(5),
        schedule(),
        mixing(10_000),
        emd_oracle(100),
        zero_rate_step(),
        rho_off_path(),
    ]
}
