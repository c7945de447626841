use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::concepts::{ConceptLayout, ConceptSet, Modality};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Structural switches; the default is the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub concepts: ConceptLayout,
    /// Causal propagation through the learned graph (identity when false).
    pub causal_propagation: bool,
    /// Two-layer nonlinear concept transform (single affine map when false).
    pub nonlinear_transform: bool,
    /// Separate prior network; when false a posterior-only model predicts
    /// through extra affine heads and is regularized toward N(0, I).
    pub prior_network: bool,
    pub use_conditions: bool,
    pub graph_convolution: bool,
    /// Gated recurrence (a single graph convolution of current inputs when false).
    pub recurrence: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            concepts: ConceptLayout::Disentangled,
            causal_propagation: true,
            nonlinear_transform: true,
            prior_network: true,
            use_conditions: true,
            graph_convolution: true,
            recurrence: true,
        }
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cond_dim: usize,
    pub latent_dim: usize,
    /// Saturation rate inside `ReLU(tanh(alpha · W_A))`.
    pub alpha: f64,
    pub arch: Architecture,
}

impl ModelConfig {
    pub fn new(cond_dim: usize, latent_dim: usize, alpha: f64) -> Self {
        ModelConfig {
            cond_dim,
            latent_dim,
            alpha,
            arch: Architecture::default(),
        }
    }

    pub fn concepts(&self) -> ConceptSet {
        ConceptSet::new(self.arch.concepts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `y = x·w + b` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// First projection of a recurrent cell. `w` is absent when the cell has no
/// inputs at all (prior network without conditions).
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub w: Option<ParamId>,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: InputProjection,
    /// Reset and update gates; absent when recurrence is disabled.
    pub gates: Option<(Linear, Linear)>,
    pub candidate: Linear,
}

#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Linear,
    pub logvar: Linear,
}

/// Per-concept recurrent cells and distribution heads of one inference side.
#[derive(Clone, Debug)]
pub struct Branch {
    pub cells: Vec<GruCell>,
    pub eps_heads: Vec<GaussianHead>,
    pub z_heads: Vec<GaussianHead>,
}

/// `f_i`: `outer(tanh(inner(h)))`, or `outer(h)` when `inner` is absent.
#[derive(Clone, Debug)]
pub struct ConceptTransform {
    pub inner: Option<Linear>,
    pub outer: Linear,
}

#[derive(Clone, Debug)]
pub struct GeneratorHead {
    pub hidden: Linear,
    pub out: Linear,
}

/// Typed index of every parameter in a [`ModelParams`] store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub posterior: Branch,
    pub prior: Option<Branch>,
    pub causal: Option<ParamId>,
    pub transforms: Vec<ConceptTransform>,
    pub attention: Option<ParamId>,
    pub generator: Vec<GeneratorHead>,
    pub pred_heads: Option<Vec<Linear>>,
}

/// Side of the inference model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Posterior,
    Prior,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Posterior => "posterior",
            Side::Prior => "prior",
        }
    }
}

/// Named parameter tensors plus the typed layout over them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.push(name, Tensor::new(&[fan_in, fan_out], data).expect("glorot shape"))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.glorot(format!("{name}.w"), fan_in, fan_out);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn branch(&mut self, config: &ModelConfig, concepts: &ConceptSet, side: Side) -> Branch {
        let d = config.latent_dim;
        let arch = &config.arch;
        let cond = if arch.use_conditions { config.cond_dim } else { 0 };
        let mut cells = Vec::new();
        let mut eps_heads = Vec::new();
        let mut z_heads = Vec::new();
        for (i, label) in concepts.labels().iter().enumerate() {
            let base = format!("{}.{label}", side.prefix());
            let obs = match side {
                Side::Posterior => concepts.posterior_input_width(i),
                Side::Prior => 0,
            };
            let width = cond + obs;
            let input = if width > 0 {
                let l = self.linear(&format!("{base}.input"), width, d);
                InputProjection { w: Some(l.w), b: l.b }
            } else {
                let b = self.push(format!("{base}.input.b"), Tensor::zeros(&[d]));
                InputProjection { w: None, b }
            };
            let (gates, candidate) = if arch.recurrence {
                let r = self.linear(&format!("{base}.reset"), 2 * d, d);
                let u = self.linear(&format!("{base}.update"), 2 * d, d);
                let c = self.linear(&format!("{base}.candidate"), 2 * d, d);
                (Some((r, u)), c)
            } else {
                (None, self.linear(&format!("{base}.candidate"), d, d))
            };
            cells.push(GruCell {
                input,
                gates,
                candidate,
            });
            eps_heads.push(GaussianHead {
                mean: self.linear(&format!("{base}.eps_mean"), d, d),
                logvar: self.linear(&format!("{base}.eps_logvar"), d, d),
            });
            z_heads.push(GaussianHead {
                mean: self.linear(&format!("{base}.z_mean"), d, d),
                logvar: self.linear(&format!("{base}.z_logvar"), d, d),
            });
        }
        Branch {
            cells,
            eps_heads,
            z_heads,
        }
    }
}

impl ModelParams {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let concepts = config.concepts();
        let k = concepts.len();
        let d = config.latent_dim;
        let arch = config.arch.clone();
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };

        let posterior = b.branch(&config, &concepts, Side::Posterior);
        let prior = arch
            .prior_network
            .then(|| b.branch(&config, &concepts, Side::Prior));

        let causal = (arch.causal_propagation && k > 1).then(|| {
            // Upper triangle ~ N(0, 1); diagonal and lower triangle start at -1
            // so the derived adjacency is zero there.
            let mut w = Tensor::full(&[k, k], -1.0);
            for i in 0..k {
                for j in i + 1..k {
                    let v: f64 = b.rng.sample(StandardNormal);
                    w.set(&[i, j], v);
                }
            }
            b.push("causal.w_a".into(), w)
        });

        let transforms = concepts
            .labels()
            .iter()
            .map(|label| {
                let base = format!("transform.{label}");
                if arch.nonlinear_transform {
                    ConceptTransform {
                        inner: Some(b.linear(&format!("{base}.inner"), d, d)),
                        outer: b.linear(&format!("{base}.outer"), d, d),
                    }
                } else {
                    ConceptTransform {
                        inner: None,
                        outer: b.linear(&format!("{base}.affine"), d, d),
                    }
                }
            })
            .collect();

        let attention = arch
            .prior_network
            .then(|| b.glorot("attention.w_att".into(), d, d));

        let generator = Modality::ALL
            .iter()
            .map(|m| {
                let base = format!("generator.{}", m.name());
                GeneratorHead {
                    hidden: b.linear(&format!("{base}.hidden"), d, d),
                    out: b.linear(&format!("{base}.out"), d, m.channels()),
                }
            })
            .collect();

        let pred_heads = (!arch.prior_network).then(|| {
            Modality::ALL
                .iter()
                .map(|m| b.linear(&format!("pred_head.{}", m.name()), d, m.channels()))
                .collect()
        });

        let Builder { names, tensors, .. } = b;
        Ok(ModelParams {
            config,
            names,
            tensors,
            layout: Layout {
                posterior,
                prior,
                causal,
                transforms,
                attention,
                generator,
                pred_heads,
            },
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every name
    /// of the layout must be present with the expected shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        if named.len() != params.names.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, found {}",
                params.names.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let idx = params
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Validation(format!("unexpected parameter {name}")))?;
            if params.tensors[idx].shape() != tensor.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    params.tensors[idx].shape(),
                    tensor.shape()
                )));
            }
            params.tensors[idx] = tensor;
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Parameter names grouped by their leading component (e.g.
    /// `posterior.bike`, `causal`, `generator.speed`).
    pub fn groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = match parts[0] {
                "causal" | "attention" => parts[0].to_string(),
                _ => format!("{}.{}", parts[0], parts[1]),
            };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, ids)) => ids.push(ParamId(i)),
                None => groups.push((key, vec![ParamId(i)])),
            }
        }
        groups
    }
}
