//! The full detector: frozen teacher, memory bank, neck and the two
//! decoders, with the training objective and the inference maps.

use std::path::Path;

use crate::cmm::{classification_loss, MemoryBank, MemoryConfig};
use crate::error::{Error, Result};
use crate::losses::{alignment_loss, cosine_maps, discrepancy_loss, LossTerms};
use crate::model::{Decoder, Encoder, FeaturePyramid, Init, Linear, ModelConfig};
use crate::params::{load_weights, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::scoring::{accumulate, fuse, stage_maps, AnomalyMap, FusionConfig};
use crate::tensor::Tensor;
use crate::Var;

/// One training batch: normal images, their synthesized anomalous
/// counterparts (both `[bs, 3, H, W]`, already normalized), masks
/// `[bs, H, W]` and category labels.
pub struct TrainBatch<'a, T> {
    pub normal: &'a Tensor<T>,
    pub anomalous: &'a Tensor<T>,
    pub masks: &'a Tensor<T>,
    pub labels: &'a [usize],
}

/// Losses of one step plus the per-stage RID maps of the anomaly flow.
pub struct StepOutput<'t, T: Scalar> {
    pub terms: LossTerms<'t, T>,
    pub rid: Vec<Var<'t, T>>,
}

/// Inference results for a batch.
pub struct Scored<T> {
    pub maps: Vec<AnomalyMap<T>>,
    /// shrunk retrieval weights `[bs, tokens, N]`
    pub retrieval: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub params: ParamStore<T>,
    pub teacher: Encoder,
    pub neck: Linear,
    pub bank: MemoryBank,
    pub restoration: Decoder,
    pub identity: Decoder,
}

impl<T: Scalar> Network<T> {
    pub fn new(model: &ModelConfig, memory: &MemoryConfig) -> Result<Self> {
        model.validate()?;
        memory.validate()?;
        let seed = model.seed;
        let mut params = ParamStore::new();
        let teacher = Encoder::new(&mut params, &mut Init::new(seed), model);
        let c = model.embed_dim;
        let neck = Linear::new(&mut params, &mut Init::new(seed.wrapping_add(1)), "neck", (c, c), true);
        let bank = MemoryBank::new(
            &mut params,
            &mut Init::new(seed.wrapping_add(2)),
            memory,
            c,
            model.num_classes,
        );
        let restoration_seed = seed.wrapping_add(3);
        let identity_seed = if model.tied_decoder_init {
            restoration_seed
        } else {
            seed.wrapping_add(4)
        };
        let restoration = Decoder::new(&mut params, &mut Init::new(restoration_seed), "restoration", model);
        let identity = Decoder::new(&mut params, &mut Init::new(identity_seed), "identity", model);
        Ok(Self {
            model: model.clone(),
            memory: memory.clone(),
            params,
            teacher,
            neck,
            bank,
            restoration,
            identity,
        })
    }

    /// Overrides teacher parameters from a weight file. Names may be given
    /// with or without the `teacher.` prefix.
    pub fn load_teacher(&mut self, stem: &Path) -> Result<usize> {
        let (_, tensors) = load_weights::<T>(stem)?;
        let mut n = self.params.load_named(&tensors, "")?;
        if n == 0 {
            n = self.params.load_named(&tensors, "teacher.")?;
        }
        if n == 0 {
            return Err(Error::format(stem, "no tensor matches a teacher parameter"));
        }
        log::info!("loaded {n} teacher tensors from {}", stem.display());
        Ok(n)
    }

    fn identity_input<'t>(&self, p: &Bound<'t, T>, tokens: &Var<'t, T>) -> Result<Var<'t, T>> {
        if self.model.identity_uses_neck {
            self.neck.forward(p, tokens)
        } else {
            Ok(*tokens)
        }
    }

    /// Builds the five losses of one training step on the tape behind `p`.
    pub fn training_losses<'t>(
        &self,
        p: &Bound<'t, T>,
        batch: &TrainBatch<'_, T>,
        mining_fraction: f64,
    ) -> Result<StepOutput<'t, T>> {
        let teacher_n = self.teacher.forward(p, batch.normal)?;
        let teacher_a = self.teacher.forward(p, batch.anomalous)?;

        // normal flow trains the prototypes and their class logits
        let retrieved_n = self.bank.retrieve(p, &teacher_n.tokens)?;
        let restored_n = self
            .restoration
            .forward(p, &self.neck.forward(p, &retrieved_n.features)?)?;
        let rec = alignment_loss(&restored_n, &teacher_n.spatial, mining_fraction)?;
        let cls = classification_loss(&self.bank.class_predict(p, &retrieved_n.weights)?, batch.labels)?;

        // anomaly flow: prototypes replace the anomalous tokens but receive no gradient
        let retrieved_a = self.bank.retrieve(p, &teacher_a.tokens)?;
        let restored_a = self
            .restoration
            .forward(p, &self.neck.forward(p, &retrieved_a.features.stop_gradient())?)?;
        let restoration = alignment_loss(&restored_a, &teacher_n.spatial, mining_fraction)?;
        let identity_out = self
            .identity
            .forward(p, &self.identity_input(p, &teacher_a.tokens)?)?;
        let identity = alignment_loss(&identity_out, &teacher_a.spatial, mining_fraction)?;

        let rid = cosine_maps(&restored_a, &identity_out)?;
        let dist = discrepancy_loss(&rid, batch.masks)?;
        Ok(StepOutput {
            terms: LossTerms {
                restoration,
                identity,
                dist,
                rec,
                cls,
            },
            rid,
        })
    }

    /// Teacher, restoration and identity pyramids for normalized images.
    pub fn pyramids<'t>(
        &self,
        p: &Bound<'t, T>,
        images: &Tensor<T>,
    ) -> Result<(FeaturePyramid<'t, T>, Vec<Var<'t, T>>, Vec<Var<'t, T>>, Var<'t, T>)> {
        let teacher = self.teacher.forward(p, images)?;
        let retrieved = self.bank.retrieve(p, &teacher.tokens)?;
        let restored = self
            .restoration
            .forward(p, &self.neck.forward(p, &retrieved.features)?)?;
        let identity = self.identity.forward(p, &self.identity_input(p, &teacher.tokens)?)?;
        Ok((teacher, restored, identity, retrieved.weights))
    }

    /// Anomaly maps at input resolution for normalized `[bs, 3, H, W]` images.
    pub fn score(&self, images: &Tensor<T>, fusion: &FusionConfig) -> Result<Scored<T>> {
        let tape = crate::Tape::new();
        let p = self.params.bind(&tape);
        let (teacher, restored, identity, weights) = self.pyramids(&p, images)?;
        let values = |v: &[Var<'_, T>]| v.iter().map(|x| (*x.value()).clone()).collect::<Vec<_>>();
        let maps = stage_maps(&values(&teacher.spatial), &values(&restored), &values(&identity))?;
        let size = (images.shape()[2], images.shape()[3]);
        let s_ri = accumulate(&maps.ri, size)?;
        let s_tr = accumulate(&maps.tr, size)?;
        let bs = images.shape()[0];
        let plane = size.0 * size.1;
        let mut out = Vec::with_capacity(bs);
        for b in 0..bs {
            let take = |t: &Tensor<T>| Tensor::new(vec![size.0, size.1], t.data()[b * plane..(b + 1) * plane].to_vec());
            out.push(fuse(take(&s_ri)?, take(&s_tr)?, fusion)?);
        }
        Ok(Scored {
            maps: out,
            retrieval: (*weights.value()).clone(),
        })
    }
}
