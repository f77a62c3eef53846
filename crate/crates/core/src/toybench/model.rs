//! Model variants sharing the toy backbone: the full decoder, a
//! shared-backbone linear-head baseline, and per-task single-task
//! baselines.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{MloreDecoder, ModuleGateLog};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamSink};
use crate::tape::{Tape, Value};
use crate::toybench::backbone::{self, Backbone};
use crate::toybench::tasks::{self, TASKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    /// Backbone + the full multi-task decoder.
    Mlore,
    /// Backbone + one linear head per task (no decoder).
    SharedLinear,
    /// Backbone + a linear head for a single task.
    SingleTask(usize),
}

impl ModelVariant {
    pub fn label(self) -> String {
        match self {
            ModelVariant::Mlore => "mlore".to_string(),
            ModelVariant::SharedLinear => "shared-linear".to_string(),
            ModelVariant::SingleTask(t) => format!("single-{}", TASKS[t].name),
        }
    }

    pub fn parse(s: &str) -> Option<ModelVariant> {
        match s {
            "mlore" => Some(ModelVariant::Mlore),
            "shared-linear" => Some(ModelVariant::SharedLinear),
            _ => {
                let name = s.strip_prefix("single-")?;
                tasks::by_name(name).map(|(idx, _)| ModelVariant::SingleTask(idx))
            }
        }
    }

    /// Task indices this variant predicts.
    pub fn task_indices(self) -> Vec<usize> {
        match self {
            ModelVariant::SingleTask(t) => vec![t],
            _ => (0..TASKS.len()).collect(),
        }
    }
}

pub struct ToyOutput {
    /// `(task index, prediction at label resolution)`.
    pub predictions: Vec<(usize, Value)>,
    /// Routing balance penalty (decoder variant only), before weighting.
    pub balance: Option<Value>,
    pub gate_log: Vec<ModuleGateLog>,
}

pub struct ToyModel {
    pub cfg: ModelConfig,
    pub variant: ModelVariant,
    pub backbone: Backbone,
    pub decoder: Option<MloreDecoder>,
    /// `(task index, head)` for the linear variants.
    heads: Vec<(usize, Conv2d)>,
    image_dims: (usize, usize),
}

impl ToyModel {
    /// Builds a variant for `image_dims` inputs. Linear variants keep only
    /// the finest backbone scale; the decoder variant uses `cfg.scales`.
    pub fn new(
        cfg: &ModelConfig,
        variant: ModelVariant,
        backbone_channels: usize,
        image_dims: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<ToyModel> {
        let scales = match variant {
            ModelVariant::Mlore => cfg.scales,
            _ => 1,
        };
        let dims = Backbone::feature_dims(image_dims.0, image_dims.1, scales)?;
        let backbone = Backbone::new(backbone_channels, scales, rng);
        let (decoder, heads) = match variant {
            ModelVariant::Mlore => {
                if cfg.tasks != TASKS.len() {
                    return Err(Error::Config(format!(
                        "decoder variant predicts all {} tasks, config declares {}",
                        TASKS.len(),
                        cfg.tasks
                    )));
                }
                let decoder = MloreDecoder::new(
                    cfg,
                    backbone_channels,
                    &dims,
                    &tasks::head_channels(),
                    rng,
                )?;
                (Some(decoder), Vec::new())
            }
            ModelVariant::SharedLinear => {
                let heads = TASKS
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i, Conv2d::new(1, backbone_channels, t.channels, rng)))
                    .collect();
                (None, heads)
            }
            ModelVariant::SingleTask(t) => {
                if t >= TASKS.len() {
                    return Err(Error::Config(format!("no task index {t}")));
                }
                let heads = vec![(t, Conv2d::new(1, backbone_channels, TASKS[t].channels, rng))];
                (None, heads)
            }
        };
        Ok(ToyModel {
            cfg: cfg.clone(),
            variant,
            backbone,
            decoder,
            heads,
            image_dims,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Value,
        training: bool,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ToyOutput> {
        let shape = tape.shape(images);
        if (shape.h, shape.w) != self.image_dims || shape.c != 3 {
            return Err(Error::shape(
                "toy_forward",
                format!("expected (n, 3, {}, {})", self.image_dims.0, self.image_dims.1),
            ));
        }
        let up = backbone::STRIDE;
        let taps = self.backbone.forward(tape, images)?;
        match &self.decoder {
            Some(decoder) => {
                let out = decoder.forward(tape, &taps, training, noise)?;
                let mut predictions = Vec::with_capacity(out.predictions.len());
                for (t, pred) in out.predictions.into_iter().enumerate() {
                    predictions.push((t, tape.upsample_nearest(pred, up)?));
                }
                Ok(ToyOutput {
                    predictions,
                    balance: Some(out.balance),
                    gate_log: out.gate_log,
                })
            }
            None => {
                let mut predictions = Vec::with_capacity(self.heads.len());
                for (t, head) in &self.heads {
                    let logits = head.forward(tape, taps[0])?;
                    predictions.push((*t, tape.upsample_nearest(logits, up)?));
                }
                Ok(ToyOutput { predictions, balance: None, gate_log: Vec::new() })
            }
        }
    }

    pub fn collect(&self, sink: &mut ParamSink) {
        self.backbone.collect(sink);
        if let Some(decoder) = &self.decoder {
            decoder.collect(sink);
        }
        for (t, head) in &self.heads {
            head.collect(&format!("head.{}", TASKS[*t].name), sink);
        }
    }

    /// Metadata pinned into checkpoints so evaluation can rebuild the
    /// model from the file alone.
    pub fn checkpoint_meta(&self) -> Vec<(String, String)> {
        vec![
            ("model".to_string(), self.variant.label()),
            ("backbone_channels".to_string(), self.backbone.channels.to_string()),
            ("image_h".to_string(), self.image_dims.0.to_string()),
            ("image_w".to_string(), self.image_dims.1.to_string()),
        ]
    }

    /// Rebuilds a model from checkpoint metadata and restores its weights.
    pub fn from_checkpoint(ckpt: &crate::checkpoint::Checkpoint) -> Result<ToyModel> {
        let need = |key: &str| {
            ckpt.meta_value(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks meta key {key}")))
        };
        let variant = ModelVariant::parse(need("model")?)
            .ok_or_else(|| Error::Format("unrecognized model variant".to_string()))?;
        let channels: usize = need("backbone_channels")?
            .parse()
            .map_err(|_| Error::Format("bad backbone_channels".to_string()))?;
        let h: usize =
            need("image_h")?.parse().map_err(|_| Error::Format("bad image_h".to_string()))?;
        let w: usize =
            need("image_w")?.parse().map_err(|_| Error::Format("bad image_w".to_string()))?;
        let mut init = crate::rng::substream(ckpt.config.seed, "model-init");
        let model = ToyModel::new(&ckpt.config, variant, channels, (h, w), &mut init)?;
        let mut sink = ParamSink::default();
        model.collect(&mut sink);
        ckpt.restore(&sink)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::toybench::data::Dataset;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.channels = 8;
        cfg.num_experts = 3;
        cfg.top_k = 2;
        cfg.rank_min = 2;
        cfg.rank_max = 4;
        cfg.rank_step = 1;
        cfg.specific_rank = 2;
        cfg.scales = 2;
        cfg.stack_per_scale = 1;
        cfg
    }

    #[test]
    fn variant_labels_roundtrip() {
        for v in [
            ModelVariant::Mlore,
            ModelVariant::SharedLinear,
            ModelVariant::SingleTask(0),
            ModelVariant::SingleTask(3),
        ] {
            assert_eq!(ModelVariant::parse(&v.label()), Some(v));
        }
        assert_eq!(ModelVariant::parse("single-depth"), None);
    }

    #[test]
    fn all_variants_predict_at_label_resolution() {
        let cfg = tiny_cfg();
        let ds = Dataset::generate(2, 32, 32, 4);
        for variant in [
            ModelVariant::Mlore,
            ModelVariant::SharedLinear,
            ModelVariant::SingleTask(2),
        ] {
            let mut init = rng::substream(1, "model-test");
            let model = ToyModel::new(&cfg, variant, 8, (32, 32), &mut init).unwrap();
            let mut tape = Tape::new();
            let images = tape.constant(ds.images(&[0, 1]));
            let mut noise = rng::substream(1, "noise-test");
            let out = model.forward(&mut tape, images, true, Some(&mut noise)).unwrap();
            assert_eq!(out.predictions.len(), variant.task_indices().len());
            for (t, pred) in &out.predictions {
                let s = tape.shape(*pred);
                assert_eq!((s.n, s.c, s.h, s.w), (2, TASKS[*t].channels, 32, 32));
            }
            assert_eq!(out.balance.is_some(), variant == ModelVariant::Mlore);
        }
    }

    #[test]
    fn checkpoint_meta_rebuilds_the_same_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        let cfg = tiny_cfg();
        let mut init = rng::substream(cfg.seed, "model-init");
        let model = ToyModel::new(&cfg, ModelVariant::Mlore, 8, (32, 32), &mut init).unwrap();
        let mut sink = ParamSink::default();
        model.collect(&mut sink);
        // Perturb one weight away from its seeded value, then round-trip.
        sink.params[0].1.borrow_mut().value.data[0] = 0.625;
        crate::checkpoint::save(&path, &cfg, &model.checkpoint_meta(), &sink).unwrap();

        let ckpt = crate::checkpoint::load(&path).unwrap();
        let rebuilt = ToyModel::from_checkpoint(&ckpt).unwrap();
        let mut rebuilt_sink = ParamSink::default();
        rebuilt.collect(&mut rebuilt_sink);
        assert_eq!(rebuilt_sink.params[0].1.borrow().value.data[0], 0.625);
        assert_eq!(rebuilt.variant, ModelVariant::Mlore);

        let ds = Dataset::generate(1, 32, 32, 9);
        let mut t1 = Tape::new();
        let x1 = t1.constant(ds.images(&[0]));
        let p1 = {
            let sinked = sink.params[1].1.borrow().value.data[0];
            assert!(sinked.is_finite());
            let out = model.forward(&mut t1, x1, false, None).unwrap();
            t1.value(out.predictions[0].1).data.clone()
        };
        let mut t2 = Tape::new();
        let x2 = t2.constant(ds.images(&[0]));
        let out2 = rebuilt.forward(&mut t2, x2, false, None).unwrap();
        let p2 = t2.value(out2.predictions[0].1).data.clone();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-6, "f32 round-trip drift only: {a} vs {b}");
        }
    }
}
