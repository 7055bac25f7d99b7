//! The joint model: a ViT whose flattened patch embeddings are organized by
//! a SOM. Backbone weights and prototypes live in one [`ParamStore`] so a
//! single optimizer updates them together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::objective::{combine, task_loss, Targets};
use crate::params::{Bound, ParamId, ParamStore};
use crate::som::{som_loss, Lattice, Metric, SomGrid};
use crate::vit::{Task, Vit, VitConfig};

/// Name of the prototype matrix inside the parameter store.
pub const PROTOTYPES: &str = "som.prototypes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub map_height: usize,
    pub map_width: usize,
    pub metric: Metric,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        Lattice::new(self.map_height, self.map_width)?;
        Ok(())
    }

    pub fn lattice(&self) -> Lattice {
        Lattice {
            height: self.map_height,
            width: self.map_width,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Task loss: pixel MSE or cross-entropy.
    pub l_nn: Var,
    pub l_som: Var,
    pub l_total: Var,
    /// Reconstruction `[B, C, H, W]` or logits `[B, classes]`.
    pub output: Var,
    /// `flatten(z_patches)`, `[B, latent_dim]`.
    pub z: Var,
    pub bmus: Vec<usize>,
}

/// Gradient-free outputs for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub z: Tensor,
    pub logits: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct VitSom {
    config: ModelConfig,
    vit: Vit,
    store: ParamStore,
    prototypes: ParamId,
}

impl VitSom {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let vit = Vit::new(config.vit.clone(), &mut store, seed)?;
        let grid = SomGrid::new(
            config.map_height,
            config.map_width,
            config.vit.latent_dim(),
            config.metric,
            seed.wrapping_add(1),
        )?;
        let prototypes = store.add(PROTOTYPES, grid.prototypes().clone(), false);
        Ok(VitSom {
            config,
            vit,
            store,
            prototypes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.vit.task
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn prototypes_id(&self) -> ParamId {
        self.prototypes
    }

    /// Every learnable scalar, backbone and prototypes.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.store.count() - self.store.tensor(self.prototypes).numel()
    }

    /// Snapshot of the current prototypes as a standalone map.
    pub fn grid(&self) -> Result<SomGrid> {
        SomGrid::from_prototypes(
            self.config.map_height,
            self.config.map_width,
            self.config.metric,
            self.store.tensor(self.prototypes).clone(),
        )
    }

    /// Records the full objective `L_nn + gamma · L_som` for one batch at
    /// neighborhood temperature `t`. Classification needs `labels`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        images: &Tensor,
        labels: Option<&[usize]>,
        t: f64,
        gamma: f64,
    ) -> Result<Forward> {
        let enc = self.vit.encode(tape, p, images)?;
        let b = images.shape()[0];
        let z = tape.reshape(enc.z_patches, &[b, self.config.vit.latent_dim()])?;
        let (output, targets) = match self.task() {
            Task::Clustering => (self.vit.decode(tape, p, enc.z_patches)?, Targets::Images(images)),
            Task::Classification => {
                let labels = labels.ok_or_else(|| Error::Contract("classification needs labels".into()))?;
                (self.vit.classify(tape, p, enc.z_cls)?, Targets::Labels(labels))
            }
        };
        let l_nn = task_loss(tape, output, targets, self.task())?;
        let som = som_loss(
            tape,
            &self.config.lattice(),
            self.config.metric,
            z,
            p[self.prototypes],
            t,
        )?;
        let l_total = combine(tape, l_nn, som.loss, gamma)?;
        Ok(Forward {
            l_nn,
            l_som: som.loss,
            l_total,
            output,
            z,
            bmus: som.bmus,
        })
    }

    /// Latent vectors (and logits for classification) without gradients.
    pub fn embed(&self, images: &Tensor) -> Result<Embedding> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let enc = self.vit.encode(&mut tape, &p, images)?;
        let b = images.shape()[0];
        let z = tape.reshape(enc.z_patches, &[b, self.config.vit.latent_dim()])?;
        let logits = match self.task() {
            Task::Classification => Some(self.vit.classify(&mut tape, &p, enc.z_cls)?),
            Task::Clustering => None,
        };
        Ok(Embedding {
            z: tape.value(z).clone(),
            logits: logits.map(|l| tape.value(l).clone()),
        })
    }

    /// Pushes latent vectors `[B, latent_dim]` through the decoder.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let cfg = &self.config.vit;
        if z.rank() != 2 || z.shape()[1] != cfg.latent_dim() {
            return Err(Error::dim(format!(
                "latents must be [B, {}], got {:?}",
                cfg.latent_dim(),
                z.shape()
            )));
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone().reshape(&[z.shape()[0], cfg.num_patches(), cfg.embed_dim])?);
        let out = self.vit.decode(&mut tape, &p, zv)?;
        Ok(tape.value(out).clone())
    }
}
