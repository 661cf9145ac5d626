//! Full multi-task network: encoder -> global context -> (decoder, heads),
//! plus checkpoint serialisation and the composite finite-difference check.

use super::context::{CgnlConfig, GlobalContext, SeConfig};
use super::decoder::{DecoderConfig, FapnDecoder};
use super::encoder::{EncoderConfig, FeaturePyramid, MitEncoder};
use super::heads::{
    total_loss, ClassificationBranch, LossTargets, TaskOutputs, LE_CLASSES, POS_CLASSES,
};
use super::{Init, ParamStore};
use crate::gradcheck::{rand_tensor, CheckReport};
use crate::rng;
use crate::tensor::{utd, Graph, Result, Tensor, Value};
use rand::Rng;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Encoder preset name, recorded in checkpoints.
    pub preset: String,
    pub encoder: EncoderConfig,
    pub cgnl: CgnlConfig,
    pub se: SeConfig,
    pub decoder: DecoderConfig,
    pub use_cgnl: bool,
    pub use_se: bool,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self::from_preset("tiny").expect("tiny preset exists")
    }

    pub fn from_preset(preset: &str) -> Option<Self> {
        Some(Self {
            preset: preset.to_string(),
            encoder: EncoderConfig::preset(preset)?,
            cgnl: CgnlConfig::default(),
            se: SeConfig::default(),
            decoder: DecoderConfig::default(),
            use_cgnl: true,
            use_se: true,
        })
    }

    /// Ablation label matching the four-variant grid.
    pub fn variant_name(&self) -> &'static str {
        match (self.use_cgnl, self.use_se) {
            (false, false) => "base",
            (true, false) => "+cgnl",
            (false, true) => "+se",
            (true, true) => "full",
        }
    }
}

pub struct UgcaNet {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    pub encoder: MitEncoder,
    pub context: GlobalContext,
    pub decoder: FapnDecoder,
    pub branch: ClassificationBranch,
}

impl UgcaNet {
    /// Build with deterministic init from the `init` substream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let encoder = MitEncoder::new(&mut init, cfg.encoder.clone())?;
        let context = GlobalContext::new(
            &mut init,
            cfg.encoder.channels,
            cfg.use_cgnl.then_some(cfg.cgnl),
            cfg.use_se.then_some(cfg.se),
        )?;
        let decoder = FapnDecoder::new(&mut init, cfg.encoder.channels, cfg.decoder);
        let branch = ClassificationBranch::new(&mut init, cfg.encoder.channels[3]);
        Ok(Self {
            store,
            cfg,
            encoder,
            context,
            decoder,
            branch,
        })
    }

    /// Context-enhanced pyramid for an image batch.
    pub fn forward_pyramid(&self, g: &mut Graph, x: Value) -> Result<FeaturePyramid> {
        let pyramid = self.encoder.forward(g, &self.store, x)?;
        self.context.forward(g, &self.store, &pyramid)
    }

    /// Full forward pass: segmentation logits at input resolution plus the
    /// three classification logit sets.
    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<TaskOutputs> {
        let pyramid = self.forward_pyramid(g, x)?;
        let seg_logits = self.decoder.forward(g, &self.store, &pyramid)?;
        let (pos_logits, le_logits, hp_logit) = self.branch.forward(g, &self.store, &pyramid)?;
        Ok(TaskOutputs {
            seg_logits,
            pos_logits,
            le_logits,
            hp_logit,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_params()
    }

    /// Scalar parameter counts per component prefix.
    pub fn component_param_counts(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("encoder", self.store.params_with_prefix("encoder.")),
            ("context", self.store.params_with_prefix("context.")),
            ("decoder", self.store.params_with_prefix("decoder.")),
            ("heads", self.store.params_with_prefix("heads.")),
        ]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("tensor blob error on {path}: {source}")]
    Blob {
        path: String,
        source: utd::UtdError,
    },
    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),
    #[error("bad config line {0:?}")]
    Config(String),
    #[error("model construction failed: {0}")]
    Model(#[from] crate::tensor::TensorError),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `config.txt`, `manifest.txt` (ordered parameter names) and one UTD1
/// blob per parameter under `dir/params/`.
pub fn save_checkpoint(model: &UgcaNet, dir: &Path) -> std::result::Result<(), CheckpointError> {
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| io_err(&params_dir, e))?;

    let cfg_path = dir.join("config.txt");
    let mut cfg = std::fs::File::create(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
    writeln!(cfg, "preset={}", model.cfg.preset).map_err(|e| io_err(&cfg_path, e))?;
    writeln!(cfg, "use_cgnl={}", model.cfg.use_cgnl).map_err(|e| io_err(&cfg_path, e))?;
    writeln!(cfg, "use_se={}", model.cfg.use_se).map_err(|e| io_err(&cfg_path, e))?;

    let manifest_path = dir.join("manifest.txt");
    let mut manifest =
        std::fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    for (name, tensor) in model.store.iter() {
        writeln!(manifest, "{name}").map_err(|e| io_err(&manifest_path, e))?;
        let blob = params_dir.join(format!("{name}.utd"));
        utd::save(&blob, tensor).map_err(|e| CheckpointError::Blob {
            path: blob.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

/// Rebuild the model named by `config.txt` and fill every parameter from its
/// blob; the manifest must list exactly the constructed parameter names.
pub fn load_checkpoint(dir: &Path) -> std::result::Result<UgcaNet, CheckpointError> {
    let cfg_path = dir.join("config.txt");
    let file = std::fs::File::open(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
    let mut preset = String::from("tiny");
    let mut use_cgnl = true;
    let mut use_se = true;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(&cfg_path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Config(line.to_string()))?;
        match key {
            "preset" => preset = value.to_string(),
            "use_cgnl" => use_cgnl = value == "true",
            "use_se" => use_se = value == "true",
            _ => return Err(CheckpointError::Config(line.to_string())),
        }
    }
    let mut cfg = ModelConfig::from_preset(&preset)
        .ok_or_else(|| CheckpointError::Config(format!("unknown preset {preset}")))?;
    cfg.use_cgnl = use_cgnl;
    cfg.use_se = use_se;
    let mut model = UgcaNet::new(cfg, 0)?;

    let manifest_path = dir.join("manifest.txt");
    let file = std::fs::File::open(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let names: Vec<String> = std::io::BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| io_err(&manifest_path, e))?;
    let expected: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    if names != expected {
        return Err(CheckpointError::Manifest(format!(
            "{} names on disk, {} in model",
            names.len(),
            expected.len()
        )));
    }
    for name in &names {
        let blob = dir.join("params").join(format!("{name}.utd"));
        let tensor = utd::load(&blob).map_err(|e| CheckpointError::Blob {
            path: blob.display().to_string(),
            source: e,
        })?;
        let id = model.store.id_by_name(name).expect("manifest checked");
        if tensor.shape() != model.store.get(id).shape() {
            return Err(CheckpointError::Manifest(format!(
                "{name}: shape {:?} on disk, {:?} in model",
                tensor.shape(),
                model.store.get(id).shape()
            )));
        }
        *model.store.get_mut(id) = tensor.with_requires_grad();
    }
    Ok(model)
}

/// Deterministic all-tasks fixture for the composite gradient check.
pub fn gradcheck_fixture(seed: u64, size: usize) -> (Tensor, LossTargets) {
    let mut r = rng::stream(seed, "model-gradcheck");
    let image = rand_tensor(&mut r, &[1, 3, size, size], 0.0, 1.0);
    let mask_data: Vec<f32> = (0..size * size)
        .map(|_| if r.random::<f32>() < 0.3 { 1.0 } else { 0.0 })
        .collect();
    let targets = LossTargets {
        pos_onehot: Tensor::new(
            [1, POS_CLASSES],
            super::heads::one_hot(r.random_range(0..POS_CLASSES), POS_CLASSES),
        )
        .unwrap(),
        mu_pos: vec![1.0],
        le_onehot: Tensor::new(
            [1, LE_CLASSES],
            super::heads::one_hot(r.random_range(0..LE_CLASSES), LE_CLASSES),
        )
        .unwrap(),
        mu_le: vec![1.0],
        hp: vec![1.0],
        mu_hp: vec![1.0],
        masks: vec![Some(Tensor::new([1usize, size, size], mask_data).unwrap())],
    };
    (image, targets)
}

/// Central-difference check of the full forward + total loss against every
/// parameter, on `coords` randomly sampled parameter coordinates.
/// h = 1e-2 with tolerance max(1e-4 abs, 1e-2 rel).
pub fn model_gradcheck(model: &mut UgcaNet, seed: u64, coords: usize) -> Result<CheckReport> {
    let (image, targets) = gradcheck_fixture(seed, 32);
    let lambda = [1.0; 4];

    let loss_of = |model: &UgcaNet| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let outputs = model.forward(&mut g, x)?;
        let loss = total_loss(&mut g, &outputs, &targets, lambda, false)?;
        Ok(g.data(loss)[0] as f64)
    };

    // Analytic gradients keyed by parameter index.
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; model.store.len()];
    {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let outputs = model.forward(&mut g, x)?;
        let loss = total_loss(&mut g, &outputs, &targets, lambda, false)?;
        g.backward(loss)?;
        for (tag, grad) in g.param_grads() {
            grads[tag] = grad.map(|s| s.to_vec());
        }
    }

    let mut coord_rng = rng::stream(seed, "model-gradcheck-coords");
    let total: usize = model.store.total_params();
    let h = 1e-2f64;
    let mut pairs = Vec::with_capacity(coords);
    for _ in 0..coords {
        let mut flat = coord_rng.random_range(0..total);
        let mut pi = 0usize;
        while flat >= model.store.by_index_mut(pi).numel() {
            flat -= model.store.by_index_mut(pi).numel();
            pi += 1;
        }
        let base = model.store.by_index_mut(pi).data()[flat] as f64;
        model.store.by_index_mut(pi).data_mut()[flat] = (base + h) as f32;
        let fp = loss_of(model)?;
        model.store.by_index_mut(pi).data_mut()[flat] = (base - h) as f32;
        let fm = loss_of(model)?;
        model.store.by_index_mut(pi).data_mut()[flat] = base as f32;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads[pi].as_ref().map_or(0.0, |g| g[flat] as f64);
        pairs.push((analytic, numeric));
    }
    Ok(CheckReport::from_errors("model-total-loss", &pairs, 1e-4, 1e-2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shapes_at_64() {
        let model = UgcaNet::new(ModelConfig::tiny(), 7).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([2, 3, 64, 64], 0.4));
        let out = model.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.seg_logits), &[2, 1, 64, 64]);
        assert_eq!(g.shape(out.pos_logits), &[2, POS_CLASSES]);
        assert_eq!(g.shape(out.le_logits), &[2, LE_CLASSES]);
        assert_eq!(g.shape(out.hp_logit), &[2, 1]);
    }

    #[test]
    fn zeroed_branch_gives_uniform_softmax() {
        let mut model = UgcaNet::new(ModelConfig::tiny(), 7).unwrap();
        for name in ["heads.pos.weight", "heads.pos.bias"] {
            let id = model.store.id_by_name(name).unwrap();
            model.store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 3, 32, 32], 0.3));
        let out = model.forward(&mut g, x).unwrap();
        assert!(g.data(out.pos_logits).iter().all(|&v| v == 0.0));
        let sm = g.softmax_last(out.pos_logits).unwrap();
        for &p in g.data(sm) {
            assert!((p - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("ugcanet-ckpt-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let model = UgcaNet::new(ModelConfig::tiny(), 13).unwrap();
        save_checkpoint(&model, &dir).unwrap();
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(model.store.len(), loaded.store.len());
        for ((n1, t1), (n2, t2)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "parameter {n1} changed");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn ablated_variants_have_fewer_params() {
        let full = UgcaNet::new(ModelConfig::tiny(), 1).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.use_cgnl = false;
        cfg.use_se = false;
        let base = UgcaNet::new(cfg, 1).unwrap();
        assert!(base.param_count() < full.param_count());
        assert_eq!(base.store.params_with_prefix("context."), 0);
        assert_eq!(base.cfg.variant_name(), "base");
        assert_eq!(full.cfg.variant_name(), "full");
    }
}
