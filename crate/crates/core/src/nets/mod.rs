//! Actor and critic networks with consistent-dropout sites.

mod distribution;
mod gpt;
mod mlp;

pub use distribution::{Action, ActionDistribution, ActionSpace, DistVars};
pub use gpt::{Gpt, GptConfig};
pub use mlp::Mlp;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dropout::{MaskBundle, MaskMode, MaskRouter};
use crate::error::{Error, Result};

/// How the dropout sites of a pass obtain their masks. Bundles are always
/// per batch element.
pub enum MaskSource<'a> {
    Eval,
    Fresh(&'a mut dyn RngCore),
    Replay(&'a [MaskBundle]),
}

impl MaskSource<'_> {
    pub fn is_eval(&self) -> bool {
        matches!(self, MaskSource::Eval)
    }
}

/// Resolves a source into per-element bundles, sampling element by element
/// so that an element's masks do not depend on its batch neighbours.
fn element_bundles(
    source: MaskSource<'_>,
    batch: usize,
    mut sites: impl FnMut(usize) -> Result<Vec<(usize, f64)>>,
) -> Result<Option<Vec<MaskBundle>>> {
    match source {
        MaskSource::Eval => Ok(None),
        MaskSource::Fresh(rng) => (0..batch)
            .map(|b| MaskBundle::sample(rng, &sites(b)?))
            .collect::<Result<Vec<_>>>()
            .map(Some),
        MaskSource::Replay(bs) => {
            if bs.len() != batch {
                return Err(Error::Routing(format!("{} bundles for a batch of {batch}", bs.len())));
            }
            Ok(Some(bs.to_vec()))
        }
    }
}

/// Runs an MLP over the last observation of each context.
fn mlp_pass(
    mlp: &Mlp,
    tape: &mut Tape,
    store: &ParamStore,
    obs_dim: usize,
    contexts: &[&[f64]],
    source: MaskSource<'_>,
) -> Result<(Var, Vec<MaskBundle>)> {
    let batch = contexts.len();
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut flat = Vec::with_capacity(batch * obs_dim);
    for c in contexts {
        if c.len() < obs_dim || c.len() % obs_dim != 0 {
            return Err(Error::shape("observation", &[c.len()], &[obs_dim]));
        }
        flat.extend_from_slice(&c[c.len() - obs_dim..]);
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation".into()));
    }
    let x = tape.constant(Tensor::matrix(batch, obs_dim, flat)?);
    let sites = mlp.sites();
    let bundles = element_bundles(source, batch, |_| Ok(sites.clone()))?;
    match bundles {
        None => {
            let mut router = MaskRouter::eval();
            let y = mlp.forward(tape, store, x, &mut router)?;
            router.finish()?;
            Ok((y, Vec::new()))
        }
        Some(bs) => {
            let mut router = MaskRouter::new(MaskMode::Replay(MaskBundle::stack(&bs)?));
            let y = mlp.forward(tape, store, x, &mut router)?;
            router.finish()?;
            Ok((y, bs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    Mlp { hidden: Vec<usize> },
    Gpt(GptConfig),
}

/// Architecture descriptor of an actor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub obs_dim: usize,
    pub space: ActionSpace,
    pub arch: Arch,
    pub p: f64,
}

#[derive(Clone, Debug)]
enum Body {
    Mlp(Mlp),
    Gpt(Gpt),
}

/// Output of one actor pass: distribution parameters on the tape and the
/// mask bundle each element used (empty in eval mode).
pub struct ActorPass {
    pub dist: DistVars,
    pub masks: Vec<MaskBundle>,
}

#[derive(Clone, Debug)]
pub struct Actor {
    spec: ActorSpec,
    store: ParamStore,
    body: Body,
    log_std: Option<ParamId>,
}

pub const HEAD_GAIN: f64 = 0.01;

impl Actor {
    pub fn new(spec: ActorSpec, rng: &mut dyn RngCore) -> Result<Self> {
        if spec.obs_dim == 0 || spec.space.head_dim() == 0 {
            return Err(Error::config("actor", "zero observation or action width"));
        }
        let mut store = ParamStore::new();
        let out = spec.space.head_dim();
        let body = match &spec.arch {
            Arch::Mlp { hidden } => {
                let mut sizes = vec![spec.obs_dim];
                sizes.extend(hidden);
                sizes.push(out);
                Body::Mlp(Mlp::new(&mut store, "pi.", &sizes, spec.p, HEAD_GAIN, rng)?)
            }
            Arch::Gpt(cfg) => Body::Gpt(Gpt::new(&mut store, "pi.", spec.obs_dim, out, *cfg, spec.p, rng)?),
        };
        let log_std = match spec.space {
            ActionSpace::Continuous { dim } => Some(store.add("pi.log_std", Tensor::zeros(&[dim]))),
            ActionSpace::Discrete { .. } => None,
        };
        Ok(Actor {
            spec,
            store,
            body,
            log_std,
        })
    }

    pub fn spec(&self) -> &ActorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn site_count(&self) -> usize {
        match &self.body {
            Body::Mlp(m) => m.site_count(),
            Body::Gpt(g) => g.site_count(),
        }
    }

    /// Observations per context window the actor consumes (1 for MLPs).
    pub fn context_window(&self) -> usize {
        match &self.body {
            Body::Mlp(_) => 1,
            Body::Gpt(g) => g.config().block,
        }
    }

    /// Forward pass over a batch of flattened context windows. MLP actors
    /// read only the last observation of each window.
    pub fn forward(&self, tape: &mut Tape, contexts: &[&[f64]], source: MaskSource<'_>) -> Result<ActorPass> {
        let (head, masks) = match &self.body {
            Body::Mlp(mlp) => mlp_pass(mlp, tape, &self.store, self.spec.obs_dim, contexts, source)?,
            Body::Gpt(gpt) => {
                if contexts.is_empty() {
                    return Err(Error::Contract("empty batch".into()));
                }
                let bundles =
                    element_bundles(source, contexts.len(), |b| Ok(gpt.sites(gpt.context_len(contexts[b])?)))?;
                let mut rows = Vec::with_capacity(contexts.len());
                for (b, ctx) in contexts.iter().enumerate() {
                    if ctx.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("observation".into()));
                    }
                    let mut router = match &bundles {
                        None => MaskRouter::eval(),
                        Some(bs) => MaskRouter::new(MaskMode::Replay(bs[b].clone())),
                    };
                    rows.push(gpt.forward_one(tape, &self.store, ctx, &mut router)?);
                    router.finish()?;
                }
                (tape.concat_rows(&rows)?, bundles.unwrap_or_default())
            }
        };
        let dist = match self.log_std {
            Some(id) => DistVars::Gaussian {
                mean: head,
                log_std: tape.param(&self.store, id),
            },
            None => DistVars::Categorical { logits: head },
        };
        Ok(ActorPass { dist, masks })
    }

    /// Concrete distribution for a single context.
    pub fn distribution(&self, context: &[f64], source: MaskSource<'_>) -> Result<(ActionDistribution, MaskBundle)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, &[context], source)?;
        let dist = pass.dist.element(&tape, 0);
        Ok((dist, pass.masks.into_iter().next().unwrap_or_default()))
    }

    pub fn descriptor(&self) -> String {
        serde_json::json!({ "actor": self.spec, "sites": self.site_count() }).to_string()
    }

    pub fn write_params(&self, ck: &mut Checkpoint) {
        for (name, t) in self.store.iter() {
            ck.push(name, t);
        }
    }

    /// Restores parameter values from a checkpoint with matching names.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        load_store(&mut self.store, ck)
    }
}

fn load_store(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let src = ck
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        let id = store.find(name).expect("name from store");
        debug_assert_eq!(id.index(), i);
        let dst = store.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::shape("checkpoint", dst.shape(), src.shape()));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSpec {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub p: f64,
}

/// State-value network with its own dropout sites and masks.
#[derive(Clone, Debug)]
pub struct Critic {
    spec: CriticSpec,
    store: ParamStore,
    mlp: Mlp,
}

impl Critic {
    pub fn new(spec: CriticSpec, rng: &mut dyn RngCore) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut sizes = vec![spec.obs_dim];
        sizes.extend(&spec.hidden);
        sizes.push(1);
        let mlp = Mlp::new(&mut store, "v.", &sizes, spec.p, 1.0, rng)?;
        Ok(Critic { spec, store, mlp })
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn site_count(&self) -> usize {
        self.mlp.site_count()
    }

    /// Values `[B]` for the last observation of each context.
    pub fn forward(
        &self,
        tape: &mut Tape,
        contexts: &[&[f64]],
        source: MaskSource<'_>,
    ) -> Result<(Var, Vec<MaskBundle>)> {
        let (y, masks) = mlp_pass(&self.mlp, tape, &self.store, self.spec.obs_dim, contexts, source)?;
        let v = tape.reshape(y, &[contexts.len()])?;
        Ok((v, masks))
    }

    pub fn value(&self, context: &[f64], source: MaskSource<'_>) -> Result<(f64, MaskBundle)> {
        let mut tape = Tape::new();
        let (v, masks) = self.forward(&mut tape, &[context], source)?;
        Ok((tape.data(v)[0], masks.into_iter().next().unwrap_or_default()))
    }

    pub fn write_params(&self, ck: &mut Checkpoint) {
        for (name, t) in self.store.iter() {
            ck.push(name, t);
        }
    }

    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        load_store(&mut self.store, ck)
    }
}
