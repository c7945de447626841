//! Forward computation of the model on a tape.
//!
//! Latent tensors are laid out `[B, N, K, d]`: batch of windows, regions,
//! concepts, latent width. Per-concept slices are `[B, N, d]`.

use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::concepts::{ConceptSet, Modality};
use super::params::{
    ConceptTransform, GaussianHead, GeneratorHead, GruCell, Linear, ModelParams, ParamId, Side,
};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphops::{graph_conv, RegionGraph};
use crate::objective::reparameterize;

/// Log-variance is clamped to this range before any exponentiation.
pub const LOGVAR_BOUND: f64 = 10.0;

/// Diagonal Gaussian over latents.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub logvar: Var,
}

/// Seeded source of standard-normal noise tensors, consumed in a fixed order.
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        NoiseStream { rng }
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("noise shape")
    }
}

/// Training draws reparameterized samples; evaluation uses means.
pub enum Mode<'a> {
    Train(&'a mut NoiseStream),
    Eval,
}

impl Mode<'_> {
    fn noise(&mut self, shape: &[usize]) -> Option<Tensor> {
        match self {
            Mode::Train(stream) => Some(stream.normal(shape)),
            Mode::Eval => None,
        }
    }
}

/// Distributions and samples produced by one posterior or prior step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub eps: GaussianParams,
    pub z: GaussianParams,
    pub z_sample: Var,
}

/// Inputs of one time step, each shaped `[B, N, channels]`.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub cond: Tensor,
    /// One tensor per [`Modality::ALL`] entry.
    pub obs: Vec<Tensor>,
}

/// A batch of windows: `history` steps with observations plus the
/// conditions of the step to forecast.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub history: Vec<StepInputs>,
    pub next_cond: Tensor,
    /// Forecast target, when known.
    pub next_obs: Option<Vec<Tensor>>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.next_cond.shape()[0]
    }

    pub fn num_regions(&self) -> usize {
        self.next_cond.shape()[1]
    }
}

/// Everything a rollout produced, still on the tape.
#[derive(Clone, Debug)]
pub struct RolloutOutput {
    /// Per history step, one reconstruction per modality.
    pub recon: Vec<Vec<Var>>,
    /// Per history step, one prediction per modality.
    pub pred: Vec<Vec<Var>>,
    /// One-step-ahead forecast per modality.
    pub forecast: Vec<Var>,
    pub posterior: Vec<StepOutput>,
    /// Prior distributions aligned with `posterior`; empty without a prior network.
    pub prior: Vec<StepOutput>,
    pub adjacency: Option<Var>,
}

/// Parameters bound to a tape together with the graph operator.
pub struct Session<'a> {
    pub tape: &'a Tape,
    pub params: &'a ModelParams,
    vars: Vec<Var>,
    operator: Option<Var>,
    concepts: ConceptSet,
}

impl Index<ParamId> for Session<'_> {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

impl<'a> Session<'a> {
    /// Binds every parameter as a trainable leaf (`trainable`) or constant.
    pub fn new(tape: &'a Tape, params: &'a ModelParams, graph: &RegionGraph, trainable: bool) -> Result<Self> {
        let vars = params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<_>>()?;
        Self::with_vars(tape, params, graph, vars)
    }

    /// Binds caller-created tape variables, one per parameter in order.
    pub fn with_vars(tape: &'a Tape, params: &'a ModelParams, graph: &RegionGraph, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.tensors().len() {
            return Err(Error::Validation(format!(
                "expected {} parameter variables, got {}",
                params.tensors().len(),
                vars.len()
            )));
        }
        if graph.num_regions() == 0 {
            return Err(Error::Validation("region graph is empty".into()));
        }
        let operator = if params.config().arch.graph_convolution {
            Some(tape.constant(graph.operator().clone())?)
        } else {
            None
        };
        Ok(Session {
            tape,
            params,
            vars,
            operator,
            concepts: params.config().concepts(),
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn concepts(&self) -> &ConceptSet {
        &self.concepts
    }

    fn linear(&self, l: &Linear, x: Var) -> Result<Var> {
        let y = self.tape.matmul(x, self[l.w])?;
        self.tape.add(y, self[l.b])
    }

    fn gconv(&self, l: &Linear, x: Var) -> Result<Var> {
        graph_conv(self.tape, self.operator, x, self[l.w], self[l.b])
    }

    fn branch(&self, side: Side) -> Result<&'a super::params::Branch> {
        let layout = self.params.layout();
        match side {
            Side::Posterior => Ok(&layout.posterior),
            Side::Prior => layout
                .prior
                .as_ref()
                .ok_or_else(|| Error::Validation("model has no prior network".into())),
        }
    }

    /// One recurrent update for a single concept, returning `ε` `[B, N, d]`.
    ///
    /// `obs` is required on the posterior side and ignored on the prior side.
    pub fn graphgru_step(
        &self,
        concept: usize,
        side: Side,
        cond: Option<Var>,
        obs: Option<Var>,
        z_prev: Var,
    ) -> Result<Var> {
        let t = self.tape;
        let cell: &GruCell = &self.branch(side)?.cells[concept];
        let arch = &self.params.config().arch;
        let mut parts = Vec::with_capacity(2);
        if arch.use_conditions {
            parts.push(cond.ok_or_else(|| Error::Validation("missing conditions".into()))?);
        }
        if side == Side::Posterior {
            let o = obs.ok_or_else(|| {
                Error::Validation(format!(
                    "posterior step for concept {} needs observations",
                    self.concepts.labels()[concept]
                ))
            })?;
            parts.push(o);
        }
        let s = match (cell.input.w, parts.len()) {
            (Some(w), n) if n > 0 => {
                let x = if n == 1 { parts[0] } else { t.concat(&parts, 2)? };
                let y = t.matmul(x, self[w])?;
                t.add(y, self[cell.input.b])?
            }
            (None, 0) => {
                let zeros = t.constant(Tensor::zeros(&t.shape(z_prev)))?;
                t.add(zeros, self[cell.input.b])?
            }
            _ => return Err(Error::Validation("input projection does not match inputs".into())),
        };
        match &cell.gates {
            Some((reset, update)) => {
                let sz = t.concat(&[s, z_prev], 2)?;
                let r = t.sigmoid(self.gconv(reset, sz)?)?;
                let u = t.sigmoid(self.gconv(update, sz)?)?;
                let rz = t.mul(r, z_prev)?;
                let srz = t.concat(&[s, rz], 2)?;
                let cand = t.tanh(self.gconv(&cell.candidate, srz)?)?;
                let keep = t.mul(u, z_prev)?;
                let fresh = t.mul(t.one_minus(u)?, cand)?;
                t.add(keep, fresh)
            }
            None => t.tanh(self.gconv(&cell.candidate, s)?),
        }
    }

    /// Mean and clamped log-variance from two affine maps of `h`.
    pub fn gaussian_head(&self, head: &GaussianHead, h: Var) -> Result<GaussianParams> {
        let mean = self.linear(&head.mean, h)?;
        let raw = self.linear(&head.logvar, h)?;
        let logvar = self.tape.clamp(raw, -LOGVAR_BOUND, LOGVAR_BOUND)?;
        Ok(GaussianParams { mean, logvar })
    }

    /// `Ã = ReLU(tanh(alpha · W_A))` with a zeroed diagonal.
    pub fn causal_adjacency(&self) -> Result<Option<Var>> {
        let Some(id) = self.params.layout().causal else {
            return Ok(None);
        };
        let t = self.tape;
        let k = self.concepts.len();
        let scaled = t.scale(self[id], self.params.config().alpha)?;
        let a = t.relu(t.tanh(scaled)?)?;
        let mask = t.constant(off_diagonal_mask(k))?;
        Ok(Some(t.mul(a, mask)?))
    }

    /// Solves `(I - Ãᵀ) h = ε` for every region and latent dimension.
    pub fn causal_propagate(&self, adjacency: Option<Var>, eps: Var) -> Result<Var> {
        let Some(a) = adjacency else {
            return Ok(eps);
        };
        let t = self.tape;
        let k = self.concepts.len();
        let eye = t.constant(Tensor::eye(k))?;
        let system = t.sub(eye, t.transpose(a)?)?;
        t.solve_small(system, eps).map_err(|e| match e {
            Error::SingularMatrix { pivot, .. } => Error::SingularMatrix {
                pivot,
                context: Some("causal graph near-cyclic with unit gain".into()),
            },
            other => other,
        })
    }

    /// Per-concept `f_i` applied to `h` `[B, N, K, d]`, returning one
    /// `[B, N, d]` tensor per concept.
    pub fn concept_transform(&self, h: Var) -> Result<Vec<Var>> {
        let t = self.tape;
        self.params
            .layout()
            .transforms
            .iter()
            .enumerate()
            .map(|(i, f): (usize, &ConceptTransform)| {
                let hi = t.select(h, 2, i)?;
                match &f.inner {
                    Some(inner) => {
                        let a = t.tanh(self.linear(inner, hi)?)?;
                        self.linear(&f.outer, a)
                    }
                    None => self.linear(&f.outer, hi),
                }
            })
            .collect()
    }

    fn sample(&self, dist: GaussianParams, mode: &mut Mode<'_>) -> Result<Var> {
        match mode.noise(&self.tape.shape(dist.mean)) {
            Some(noise) => {
                let n = self.tape.constant(noise)?;
                reparameterize(self.tape, dist.mean, dist.logvar, n)
            }
            None => Ok(dist.mean),
        }
    }

    fn stack_dists(&self, dists: &[GaussianParams]) -> Result<GaussianParams> {
        let means: Vec<Var> = dists.iter().map(|d| d.mean).collect();
        let logvars: Vec<Var> = dists.iter().map(|d| d.logvar).collect();
        Ok(GaussianParams {
            mean: self.tape.stack(&means, 2)?,
            logvar: self.tape.stack(&logvars, 2)?,
        })
    }

    fn split_concepts(&self, z: Var) -> Result<Vec<Var>> {
        (0..self.concepts.len())
            .map(|i| self.tape.select(z, 2, i))
            .collect()
    }

    fn infer(
        &self,
        side: Side,
        cond: Option<Var>,
        obs: Option<&[Var]>,
        z_prev: Var,
        adjacency: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<StepOutput> {
        let t = self.tape;
        let branch = self.branch(side)?;
        let prev = self.split_concepts(z_prev)?;
        let mut eps_dists = Vec::with_capacity(prev.len());
        for (i, &zp) in prev.iter().enumerate() {
            let concept_obs = match obs {
                Some(all) => {
                    let picked: Vec<Var> = self
                        .concepts
                        .posterior_inputs(i)
                        .iter()
                        .map(|m| all[m.index()])
                        .collect();
                    Some(if picked.len() == 1 { picked[0] } else { t.concat(&picked, 2)? })
                }
                None => None,
            };
            let e = self.graphgru_step(i, side, cond, concept_obs, zp)?;
            eps_dists.push(self.gaussian_head(&branch.eps_heads[i], e)?);
        }
        let eps = self.stack_dists(&eps_dists)?;
        // The exogenous path stays on its mean; only z is sampled.
        let h = self.causal_propagate(adjacency, eps.mean)?;
        let pre = self.concept_transform(h)?;
        let z_dists = pre
            .iter()
            .zip(&branch.z_heads)
            .map(|(&p, head)| self.gaussian_head(head, p))
            .collect::<Result<Vec<_>>>()?;
        let z = self.stack_dists(&z_dists)?;
        let z_sample = self.sample(z, mode)?;
        Ok(StepOutput {
            eps,
            z,
            z_sample,
        })
    }

    /// `q(ε_t | z_{t-1}, x_t, C_t) · q(z_t | ε_t)`; `obs` holds one tensor per modality.
    pub fn posterior_step(
        &self,
        cond: Option<Var>,
        obs: &[Var],
        z_prev: Var,
        adjacency: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<StepOutput> {
        if obs.len() != Modality::ALL.len() {
            return Err(Error::Validation(format!(
                "posterior step needs {} modalities, got {}",
                Modality::ALL.len(),
                obs.len()
            )));
        }
        self.infer(Side::Posterior, cond, Some(obs), z_prev, adjacency, mode)
    }

    /// `p(ε_t | z_{t-1}, C_t) · p(z_t | ε_t)`.
    pub fn prior_step(
        &self,
        cond: Option<Var>,
        z_prev: Var,
        adjacency: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<StepOutput> {
        self.infer(Side::Prior, cond, None, z_prev, adjacency, mode)
    }

    /// `softmax(z_post_prev · W_att · z_priorᵀ) · z_prior` per region.
    pub fn attention_fuse(&self, z_post_prev: Var, z_prior: Var) -> Result<Var> {
        let t = self.tape;
        let w = self
            .params
            .layout()
            .attention
            .ok_or_else(|| Error::Validation("model has no attention weights".into()))?;
        let q = t.matmul(z_post_prev, self[w])?;
        let scores = t.matmul(q, t.transpose(z_prior)?)?;
        let weights = t.softmax(scores)?;
        t.matmul(weights, z_prior)
    }

    /// Shared generator: each modality head reads only its own concept slot.
    pub fn generate(&self, z: Var) -> Result<Vec<Var>> {
        let t = self.tape;
        Modality::ALL
            .iter()
            .zip(&self.params.layout().generator)
            .map(|(&m, head): (&Modality, &GeneratorHead)| {
                let slot = t.select(z, 2, self.concepts.generator_slot(m))?;
                let hidden = t.tanh(self.linear(&head.hidden, slot)?)?;
                self.linear(&head.out, hidden)
            })
            .collect()
    }

    fn predict_from_posterior(&self, z_post: Var) -> Result<Vec<Var>> {
        let t = self.tape;
        let heads = self
            .params
            .layout()
            .pred_heads
            .as_ref()
            .ok_or_else(|| Error::Validation("model has no prediction heads".into()))?;
        Modality::ALL
            .iter()
            .zip(heads)
            .map(|(&m, head)| {
                let slot = t.select(z_post, 2, self.concepts.generator_slot(m))?;
                self.linear(head, slot)
            })
            .collect()
    }

    /// Runs the window: posterior and prior per history step, then a final
    /// prior + attention + generator pass on the next step's conditions.
    pub fn rollout(&self, batch: &WindowBatch, mode: &mut Mode<'_>) -> Result<RolloutOutput> {
        let t = self.tape;
        if batch.history.is_empty() {
            return Err(Error::Validation("window needs at least one history step".into()));
        }
        let (b, n) = (batch.batch_size(), batch.num_regions());
        let k = self.concepts.len();
        let d = self.params.config().latent_dim;
        let use_cond = self.params.config().arch.use_conditions;
        let has_prior = self.params.layout().prior.is_some();
        let adjacency = self.causal_adjacency()?;

        let mut z_prev = t.constant(Tensor::zeros(&[b, n, k, d]))?;
        let mut out = RolloutOutput {
            recon: Vec::new(),
            pred: Vec::new(),
            forecast: Vec::new(),
            posterior: Vec::new(),
            prior: Vec::new(),
            adjacency,
        };
        let cond_var = |c: &Tensor| -> Result<Option<Var>> {
            if use_cond {
                Ok(Some(t.constant(c.clone())?))
            } else {
                Ok(None)
            }
        };

        for step in &batch.history {
            let cond = cond_var(&step.cond)?;
            let obs: Vec<Var> = step
                .obs
                .iter()
                .map(|o| t.constant(o.clone()))
                .collect::<Result<_>>()?;
            let post = self.posterior_step(cond, &obs, z_prev, adjacency, mode)?;
            let pred = if has_prior {
                let prior = self.prior_step(cond, z_prev, adjacency, mode)?;
                let fused = self.attention_fuse(z_prev, prior.z_sample)?;
                out.prior.push(prior);
                self.generate(fused)?
            } else {
                self.predict_from_posterior(z_prev)?
            };
            out.recon.push(self.generate(post.z_sample)?);
            out.pred.push(pred);
            out.posterior.push(post);
            // The recurrence carries the posterior mean, not the sample.
            z_prev = post.z.mean;
        }

        out.forecast = if has_prior {
            let cond = cond_var(&batch.next_cond)?;
            let prior = self.prior_step(cond, z_prev, adjacency, mode)?;
            let fused = self.attention_fuse(z_prev, prior.z_sample)?;
            self.generate(fused)?
        } else {
            self.predict_from_posterior(z_prev)?
        };
        Ok(out)
    }
}

/// `K×K` matrix of ones with a zero diagonal.
pub fn off_diagonal_mask(k: usize) -> Tensor {
    let mut m = Tensor::full(&[k, k], 1.0);
    for i in 0..k {
        m.set(&[i, i], 0.0);
    }
    m
}

/// Evaluates `ReLU(tanh(alpha · W_A))` with a zero diagonal outside a tape.
pub fn adjacency_from_weights(w_a: &Tensor, alpha: f64) -> Tensor {
    let k = w_a.shape()[0];
    let mut a = w_a.map(|w| (alpha * w).tanh().max(0.0));
    for i in 0..k {
        a.set(&[i, i], 0.0);
    }
    a
}
