//! Finite-difference check of the full training objective, one parameter
//! group at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::diffcore::{check_gradients, Tape, Tensor, Var};
use crate::error::Result;
use crate::graphops::RegionGraph;
use crate::model::{Architecture, Modality, Mode, ModelConfig, ModelParams, NoiseStream, Session, StepInputs, WindowBatch};
use crate::objective::total_loss;

/// Pass threshold on the normwise relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const NOISE_SEED: u64 = 99;

/// A small model, graph and window batch for derivative checks.
#[derive(Clone, Debug)]
pub struct TinyInstance {
    pub params: ModelParams,
    pub graph: RegionGraph,
    pub batch: WindowBatch,
}

/// `N` regions on a path graph, `d`-wide latents, `history` steps, one window.
pub fn tiny_instance(arch: Architecture, n: usize, d: usize, history: usize, seed: u64) -> Result<TinyInstance> {
    let cond_dim = 3;
    let mut config = ModelConfig::new(cond_dim, d, 3.0);
    config.arch = arch;
    let params = ModelParams::init(config, seed)?;
    let mut g = Tensor::zeros(&[n, n]);
    for i in 1..n {
        g.set(&[i - 1, i], 1.0);
        g.set(&[i, i - 1], 1.0);
    }
    let graph = RegionGraph::new(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut rand = |shape: &[usize]| {
        let len = shape.iter().product();
        let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        Tensor::new(shape, data).expect("random tensor")
    };
    let obs = |rand: &mut dyn FnMut(&[usize]) -> Tensor| -> Vec<Tensor> {
        Modality::ALL.iter().map(|m| rand(&[1, n, m.channels()])).collect()
    };
    let history = (0..history)
        .map(|_| StepInputs {
            cond: rand(&[1, n, cond_dim]),
            obs: obs(&mut rand),
        })
        .collect();
    let next_cond = rand(&[1, n, cond_dim]);
    let next_obs = Some(obs(&mut rand));
    Ok(TinyInstance {
        params,
        graph,
        batch: WindowBatch {
            history,
            next_cond,
            next_obs,
        },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub worst_group: String,
    pub worst_param: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// Total loss of the tiny instance with `vars` bound to the parameters.
/// The training-mode noise is replayed from a fixed seed on every call.
fn objective(inst: &TinyInstance, tape: &Tape, vars: Vec<Var>, inject_fault: bool) -> Result<Var> {
    let session = Session::with_vars(tape, &inst.params, &inst.graph, vars)?;
    let mut noise = NoiseStream::new(NOISE_SEED);
    let out = session.rollout(&inst.batch, &mut Mode::Train(&mut noise))?;
    let (total, _) = total_loss(tape, &out, &inst.batch, 1.0)?;
    if !inject_fault {
        return Ok(total);
    }
    // Negative control: an identity whose backward scales by 1.5.
    let value = tape.value(total);
    tape.custom("faulty_identity", &[total], value, |g, _| vec![g.map(|v| 1.5 * v)])
}

/// Checks every parameter group of `inst` against central differences.
pub fn check_model(inst: &TinyInstance, inject_fault: bool) -> Result<ModelGradCheck> {
    let params = &inst.params;
    let mut groups = Vec::new();
    for (group, ids) in params.groups() {
        let leaves: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
        let report = check_gradients(
            |tape, leaf_vars| {
                let mut vars = Vec::with_capacity(params.tensors().len());
                for (i, t) in params.tensors().iter().enumerate() {
                    match ids.iter().position(|id| id.index() == i) {
                        Some(pos) => vars.push(leaf_vars[pos]),
                        None => vars.push(tape.constant(t.clone())?),
                    }
                }
                objective(inst, tape, vars, inject_fault)
            },
            &leaves,
            FD_STEP,
        )?;
        groups.push(GroupCheck {
            group,
            max_rel_err: report.max_rel_err,
            worst_param: params.names()[ids[report.worst_leaf].index()].clone(),
        });
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .cloned()
        .expect("model has parameters");
    Ok(ModelGradCheck {
        max_rel_err: worst.max_rel_err,
        worst_group: worst.group,
        worst_param: worst.worst_param,
        tolerance: GRADCHECK_TOLERANCE,
        passed: worst.max_rel_err < GRADCHECK_TOLERANCE,
        groups,
    })
}
