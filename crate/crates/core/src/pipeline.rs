//! Materializes a [`RunConfig`] into data, backbones and an evaluator.

use std::fs;

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::dataio::{
    generate_synthetic, read_jsonl, ClassCatalog, DatasetRecord, InputProvider, PlantedOptima, RecordInputs,
    SyntheticTruth,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::Modality;
use crate::schedule::NoiseSchedule;
use crate::search::{EvalContext, Evaluator, SearchSpace};

pub struct Workspace {
    pub config: RunConfig,
    pub schedule: NoiseSchedule,
    pub image_backbone: Backbone,
    pub text_backbone: Backbone,
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub catalog: ClassCatalog,
    /// Known only for the synthetic benchmark.
    pub planted: Option<PlantedOptima>,
    pub image_space: SearchSpace,
    pub text_space: SearchSpace,
    inputs: Box<dyn InputProvider>,
}

impl Workspace {
    pub fn prepare(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.build_schedule()?;
        let image_backbone = Backbone::new(config.backbone_config(Modality::Image))?;
        let text_backbone = Backbone::new(config.backbone_config(Modality::Text))?;
        let (image_space, text_space) = config.spaces()?;

        let (train, val, catalog, planted, inputs): (_, _, _, _, Box<dyn InputProvider>) = if config.uses_synthetic() {
            let spec = config.synthetic_spec()?;
            let data = generate_synthetic(&spec)?;
            let truth = SyntheticTruth::new(spec)?;
            (data.train, data.val, data.catalog, Some(data.planted), Box::new(truth))
        } else {
            let train_path = config.data.train.as_ref().expect("validated");
            let val_path = config.data.val.as_ref().expect("validated");
            let catalog_path = config.data.catalog.as_ref().expect("validated");
            let text = fs::read_to_string(catalog_path).map_err(|e| Error::io(catalog_path, e))?;
            let catalog: ClassCatalog = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: catalog_path.clone(),
                reason: e.to_string(),
            })?;
            catalog.validate()?;
            let inputs = RecordInputs {
                text_seq_len: config.model.text_seq_len,
                eos_id: config.model.eos_id,
            };
            (read_jsonl(train_path)?, read_jsonl(val_path)?, catalog, None, Box::new(inputs))
        };
        for r in train.iter().chain(&val) {
            r.validate(catalog.classes(), Some(config.model.vocab_size))?;
        }
        Ok(Self {
            config,
            schedule,
            image_backbone,
            text_backbone,
            train,
            val,
            catalog,
            planted,
            image_space,
            text_space,
            inputs,
        })
    }

    pub fn inputs(&self) -> &dyn InputProvider {
        self.inputs.as_ref()
    }

    pub fn backbone(&self, modality: Modality) -> Result<&Backbone> {
        match modality {
            Modality::Image => Ok(&self.image_backbone),
            Modality::Text => Ok(&self.text_backbone),
            Modality::Fused => Err(Error::invalid("fused is not a backbone modality")),
        }
    }

    pub fn context(&self, exec: Execution) -> EvalContext<'_> {
        let c = &self.config;
        EvalContext {
            train: &self.train,
            val: &self.val,
            classes: self.catalog.classes(),
            kind: c.loss,
            image_backbone: &self.image_backbone,
            text_backbone: &self.text_backbone,
            schedule: &self.schedule,
            mode: c.noise.mode,
            noise_seed: c.noise.seed,
            inputs: self.inputs.as_ref(),
            train_cfg: c.train_config(),
            fusion_dims: c.fusion_dims(),
            threshold: c.threshold,
            exec,
        }
    }

    /// Evaluator that keeps token features when the configured strategy
    /// needs them.
    pub fn evaluator(&self, exec: Execution) -> Result<Evaluator<'_>> {
        Evaluator::new(self.context(exec), self.config.fusion.strategy.needs_tokens())
    }
}
