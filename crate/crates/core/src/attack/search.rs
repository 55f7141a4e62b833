//! The shared NES search loop and the four public attacks.

use rand::RngCore;

use super::maps::{CandidateMap, FlowMap, HighResMap, TanhMap};
use super::{cw_losses, nes_gradient, AttackConfig, AttackResult, Variant};
use crate::blackbox::Oracle;
use crate::diffcore::Tensor;
use crate::domain::{linf_distance, project_linf};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::rng::{indexed, stream};

/// Seed for the attack on input `index` of a run seeded with `seed`.
pub fn input_seed(seed: u64, index: u64) -> u64 {
    indexed(seed, "attack-input", index).next_u64()
}

/// Outcome of a single oracle call inside the loop.
enum Queried {
    Losses(Vec<f64>),
    OutOfBudget,
}

struct Loop<'a> {
    oracle: &'a Oracle<'a>,
    x: &'a Tensor,
    x_flat: Tensor,
    y: usize,
    cfg: &'a AttackConfig,
    result: AttackResult,
}

impl Loop<'_> {
    fn candidates(&self, map: &dyn CandidateMap, z: &Tensor) -> Result<Tensor> {
        let raw = map.map(z)?;
        let anchor = Tensor::concat_rows(&vec![self.x_flat.clone(); raw.rows()])?;
        project_linf(&raw, &anchor, self.cfg.epsilon, self.cfg.bounds)
    }

    fn query(&self, cands: &Tensor) -> Result<Queried> {
        match self.oracle.query(cands) {
            Ok(p) => Ok(Queried::Losses(cw_losses(&p, self.y)?)),
            Err(Error::Budget { .. }) => Ok(Queried::OutOfBudget),
            Err(e) => Err(e),
        }
    }

    fn succeed(mut self, flat_example: &[f64]) -> Result<AttackResult> {
        let example = Tensor::new(self.x.shape().to_vec(), flat_example.to_vec())?;
        self.result.linf = Some(linf_distance(&example, self.x));
        self.result.example = Some(example);
        self.result.success = true;
        Ok(self.result)
    }
}

fn with_mu(anchor: &[f64], mu: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![1, mu.len()], anchor.iter().zip(mu).map(|(a, m)| a + m).collect())
}

/// Runs the NES search over `map`'s space against `oracle`.
///
/// Each iteration draws `population` noise vectors, queries the projected
/// candidates once each and moves the mean. Unless the variant is greedy,
/// the mean's own candidate is checked every `check_interval` candidate
/// queries (including before the first iteration and after the last) at one
/// extra query per check. Running out of oracle budget ends the search as a
/// failure.
pub fn search(
    map: &dyn CandidateMap,
    oracle: &Oracle<'_>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    if y >= oracle.model().num_classes() {
        return Err(Error::contract(format!(
            "label {y} out of range for {} classes",
            oracle.model().num_classes()
        )));
    }
    let anchor = map.anchor().to_vec();
    let d = anchor.len();
    let n_p = cfg.population;
    let greedy = cfg.variant == Variant::Greedy;
    let mut rng = stream(cfg.seed, "attack");
    let mut mu = Tensor::randn(&[d], cfg.mu_init_std, &mut rng).into_data();
    let mut state = Loop {
        oracle,
        x,
        x_flat: x.clone().flatten_rows(),
        y,
        cfg,
        result: AttackResult {
            variant: cfg.variant,
            success: false,
            queries: 0,
            checks: 0,
            iterations: 0,
            example: None,
            loss_trace: Vec::new(),
            flat_iterations: Vec::new(),
            linf: None,
        },
    };
    let iterations = cfg.iterations();
    for it in 0..=iterations {
        let spent = it * n_p as u64;
        let due = spent.is_multiple_of(cfg.check_interval) || it == iterations;
        if !greedy && due {
            let cand = state.candidates(map, &with_mu(&anchor, &mu)?)?;
            match state.query(&cand)? {
                Queried::OutOfBudget => break,
                Queried::Losses(l) => {
                    state.result.checks += 1;
                    if l[0] == 0.0 {
                        return state.succeed(cand.row(0));
                    }
                }
            }
        }
        if it == iterations {
            break;
        }
        let eps = Tensor::randn(&[n_p, d], 1.0, &mut rng);
        let mut z = eps.map(|e| cfg.sigma * e);
        for r in 0..n_p {
            for ((zi, a), m) in z.row_mut(r).iter_mut().zip(&anchor).zip(&mu) {
                *zi += a + m;
            }
        }
        let cands = state.candidates(map, &z)?;
        let losses = match state.query(&cands)? {
            Queried::OutOfBudget => break,
            Queried::Losses(l) => l,
        };
        state.result.queries += n_p as u64;
        state.result.iterations += 1;
        state.result.loss_trace.push(losses.iter().sum::<f64>() / n_p as f64);
        if greedy {
            if let Some(k) = losses.iter().position(|&l| l == 0.0) {
                return state.succeed(cands.row(k));
            }
            let mut order: Vec<usize> = (0..n_p).collect();
            order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
            let mut next = vec![0.0; d];
            for &k in &order[..cfg.top_k] {
                for ((ni, m), e) in next.iter_mut().zip(&mu).zip(eps.row(k)) {
                    *ni += (m + cfg.sigma * e) / cfg.top_k as f64;
                }
            }
            mu = next;
        } else {
            let step = nes_gradient(&losses, &eps)?;
            if step.flat {
                state.result.flat_iterations.push(it);
            }
            for (m, g) in mu.iter_mut().zip(&step.gradient) {
                *m -= cfg.lr * g;
            }
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::numeric(format!(
                "search mean became non-finite at iteration {it}"
            )));
        }
    }
    Ok(state.result)
}

fn with_variant(cfg: &AttackConfig, variant: Variant) -> AttackConfig {
    AttackConfig { variant, ..cfg.clone() }
}

/// Latent-space NES attack through `flow`.
pub fn advflow_attack(
    flow: &FlowModel,
    oracle: &Oracle<'_>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    search(
        &FlowMap::new(flow, x)?,
        oracle,
        x,
        y,
        &with_variant(cfg, Variant::AdvFlow),
    )
}

/// Greedy variant: stops at the first zero-loss candidate and sets the
/// mean to the average of the `top_k` best latent offsets.
pub fn greedy_advflow(
    flow: &FlowModel,
    oracle: &Oracle<'_>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    search(
        &FlowMap::new(flow, x)?,
        oracle,
        x,
        y,
        &with_variant(cfg, Variant::Greedy),
    )
}

/// Attacks a `(1, c, H, W)` image through a flow trained at a lower
/// resolution, upsampling the flow's perturbation bilinearly.
pub fn advflow_highres(
    flow: &FlowModel,
    oracle: &Oracle<'_>,
    x_high: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    search(
        &HighResMap::new(flow, x_high)?,
        oracle,
        x_high,
        y,
        &with_variant(cfg, Variant::HighRes),
    )
}

/// NES attack over the elementwise `tanh` box map.
pub fn nattack(oracle: &Oracle<'_>, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    search(
        &TanhMap::new(x, cfg.bounds)?,
        oracle,
        x,
        y,
        &with_variant(cfg, Variant::NAttack),
    )
}

/// Dispatches on `cfg.variant`.
pub fn run_attack(
    flow: Option<&FlowModel>,
    oracle: &Oracle<'_>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let need = || flow.ok_or_else(|| Error::contract(format!("variant {} needs a flow", cfg.variant)));
    match cfg.variant {
        Variant::AdvFlow => advflow_attack(need()?, oracle, x, y, cfg),
        Variant::Greedy => greedy_advflow(need()?, oracle, x, y, cfg),
        Variant::HighRes => advflow_highres(need()?, oracle, x, y, cfg),
        Variant::NAttack => nattack(oracle, x, y, cfg),
    }
}
