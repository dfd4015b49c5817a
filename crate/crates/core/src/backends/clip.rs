//! CLIP ViT-B/32 backend on candle, loaded from a local directory holding a
//! Hugging Face layout `model.safetensors` and `tokenizer.json`.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::{ClipConfig, ClipModel};
use tokenizers::Tokenizer;

use crate::concept::EncoderBackend;
use crate::error::{Error, Result};

const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];
const CONTEXT: usize = 77;

pub struct ClipBackend {
    name: String,
    model: ClipModel,
    tokenizer: Tokenizer,
    config: ClipConfig,
    pad_id: u32,
    device: Device,
    // candle modules are immutable; the lock serializes calls per instance.
    lock: Mutex<()>,
}

impl ClipBackend {
    pub const NAME: &'static str = "clip-vit-b-32";

    pub fn load(dir: &Path) -> Result<Self> {
        let weights = dir.join("model.safetensors");
        let tok_path = dir.join("tokenizer.json");
        for p in [&weights, &tok_path] {
            if !p.exists() {
                return Err(Error::backend(
                    Self::NAME,
                    format!("missing {}", p.display()),
                ));
            }
        }
        let device = Device::Cpu;
        let config = ClipConfig::vit_base_patch32();
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], DType::F32, &device)? };
        let model = ClipModel::new(vb, &config).map_err(|e| Error::backend(Self::NAME, e))?;
        let tokenizer = Tokenizer::from_file(&tok_path).map_err(|e| Error::backend(Self::NAME, e))?;
        let pad_id = *tokenizer
            .get_vocab(true)
            .get("<|endoftext|>")
            .ok_or_else(|| Error::backend(Self::NAME, "tokenizer lacks <|endoftext|>"))?;
        Ok(Self {
            name: Self::NAME.to_string(),
            model,
            tokenizer,
            config,
            pad_id,
            device,
            lock: Mutex::new(()),
        })
    }

    /// `<cache>/<name>`, where `<cache>` is the backend cache directory.
    pub fn default_dir(cache: &Path) -> PathBuf {
        cache.join(Self::NAME)
    }
}

impl EncoderBackend for ClipBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_dim(&self) -> usize {
        self.config.vision_config.projection_dim
    }

    fn image_resolution(&self) -> usize {
        self.config.image_size
    }

    fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        let _guard = self.lock.lock().expect("clip lock poisoned");
        let (_, c, h, w) = images.dims4()?;
        let r = self.config.image_size;
        if (c, h, w) != (3, r, r) {
            return Err(Error::Resolution {
                expected: vec![3, r, r],
                actual: vec![c, h, w],
            });
        }
        let dt = images.dtype();
        let mean = Tensor::new(&MEAN, &self.device)?.reshape((1, 3, 1, 1))?.to_dtype(dt)?;
        let std = Tensor::new(&STD, &self.device)?.reshape((1, 3, 1, 1))?.to_dtype(dt)?;
        let x = images.broadcast_sub(&mean)?.broadcast_div(&std)?.to_dtype(DType::F32)?;
        Ok(self.model.get_image_features(&x)?.to_dtype(dt)?)
    }

    fn encode_text(&self, texts: &[String]) -> Result<Tensor> {
        let _guard = self.lock.lock().expect("clip lock poisoned");
        let mut ids = Vec::with_capacity(texts.len() * CONTEXT);
        for t in texts {
            let enc = self
                .tokenizer
                .encode(t.as_str(), true)
                .map_err(|e| Error::backend(Self::NAME, e))?;
            let mut row: Vec<u32> = enc.get_ids().iter().copied().take(CONTEXT).collect();
            row.resize(CONTEXT, self.pad_id);
            ids.extend(row);
        }
        let input = Tensor::from_vec(ids, (texts.len(), CONTEXT), &self.device)?;
        Ok(self.model.get_text_features(&input)?)
    }
}
