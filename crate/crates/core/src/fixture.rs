//! Seeded toy checkpoint: a 3-layer model with 6 dense modules, a full
//! finetune, LoRA and OFT adapters, 32-example activation dumps and score
//! tables for correlation.
//!
//! Layout under the output directory:
//!
//! ```text
//! base/manifest.json        dense base weights
//! finetuned/manifest.json   dense full finetune
//! lora/manifest.json        rank-2 LoRA adapter
//! oft/manifest.json         block-4 OFT adapter, later layers stronger
//! acts/inputs/              module inputs from the base model (for csd)
//! acts/base/                module outputs of the base model
//! acts/finetuned/           module outputs of the full finetune
//! scores/internal.csv       per-checkpoint geometry metrics
//! scores/external.csv       per-checkpoint benchmark scores
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{GeoError, Result};
use crate::report::csv_float;
use crate::synth::{random_matrix, random_skew};
use crate::tensorio::{
    npy, save_matrix, write_manifest, ActivationKey, CheckpointManifest, DenseMatrix,
    Distribution, LoraAdapter, ModuleEntry, ModuleWeights, OftAdapter, Role,
};

pub const TOY_SEED: u64 = 20_240_601;
pub const TOY_LAYERS: usize = 3;
pub const TOY_EXAMPLES: usize = 32;

/// `(suffix, out_dim, in_dim)` for the two modules in every layer.
const MODULES: [(&str, usize, usize); 2] = [("self_attn.q_proj", 8, 8), ("mlp.down_proj", 8, 16)];

fn entry(name: String, layer: usize, shape: (usize, usize), weights: ModuleWeights) -> ModuleEntry {
    ModuleEntry {
        name,
        layer_index: layer,
        shape,
        tensor_paths: Default::default(),
        weights,
    }
}

fn save_acts(dir: &Path, key: ActivationKey, data: &DMatrix<f64>) -> Result<()> {
    let m = DenseMatrix::from_dmatrix(key.module.clone(), data)?;
    save_matrix(&m, &dir.join(key.file_name()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    npy::write_atomic(path, text.as_bytes())
}

/// Write the toy fixture into `dir` (created if missing).
pub fn write_toy_fixture(dir: &Path) -> Result<()> {
    write_fixture(dir, TOY_SEED)
}

/// Same layout as the toy fixture with a different seed.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Vec::new();
    let mut full = Vec::new();
    let mut lora = Vec::new();
    let mut oft = Vec::new();
    for layer in 0..TOY_LAYERS {
        for (suffix, out_dim, in_dim) in MODULES {
            let name = format!("layers.{layer}.{suffix}");
            let w0 = random_matrix(&mut rng, out_dim, in_dim) * (1.0 / (in_dim as f64).sqrt());
            let noise = random_matrix(&mut rng, out_dim, in_dim) * (0.02 * (layer + 1) as f64);
            let wft = &w0 + noise;
            let rank = 2;
            let l = LoraAdapter {
                a: random_matrix(&mut rng, rank, in_dim) * 0.1,
                b: random_matrix(&mut rng, out_dim, rank) * 0.1,
                scale: 2.0,
            };
            let block = 4;
            let blocks = (0..in_dim / block)
                .map(|_| random_skew(&mut rng, block, 0.05 * (1 << layer) as f64))
                .collect();
            let shape = (out_dim, in_dim);
            base.push(entry(name.clone(), layer, shape, ModuleWeights::Dense(w0)));
            full.push(entry(name.clone(), layer, shape, ModuleWeights::Dense(wft)));
            lora.push(entry(name.clone(), layer, shape, ModuleWeights::Lora(l)));
            oft.push(entry(
                name,
                layer,
                shape,
                ModuleWeights::Oft(OftAdapter {
                    block_size: block,
                    blocks,
                }),
            ));
        }
    }
    let manifests = [
        ("base", "toy-base", Role::Base, base),
        ("finetuned", "toy-fullft", Role::Finetuned, full),
        ("lora", "toy-lora-r2", Role::Adapter, lora),
        ("oft", "toy-oft-b4", Role::Adapter, oft),
    ];
    for (sub, id, role, modules) in &manifests {
        let m = CheckpointManifest {
            model_id: (*id).to_owned(),
            role: *role,
            modules: modules.clone(),
        };
        write_manifest(&m, &dir.join(sub))?;
    }

    let inputs = dir.join("acts/inputs");
    let outs_base = dir.join("acts/base");
    let outs_ft = dir.join("acts/finetuned");
    for d in [&inputs, &outs_base, &outs_ft] {
        fs::create_dir_all(d).map_err(|e| GeoError::io(d, e))?;
    }
    let (base_modules, full_modules) = (&manifests[0].3, &manifests[1].3);
    for (b, f) in base_modules.iter().zip(full_modules) {
        let (w0, wft) = (b.dense().unwrap(), f.dense().unwrap());
        for dist in [Distribution::General, Distribution::Target] {
            // target inputs lean on the first half of the input features
            let h = DMatrix::from_fn(TOY_EXAMPLES, w0.ncols(), |_, j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                match dist {
                    Distribution::Target if j >= w0.ncols() / 2 => 0.3 * z,
                    _ => z,
                }
            });
            let key = |role: &str| ActivationKey {
                module: b.name.clone(),
                distribution: dist,
                role: role.to_owned(),
            };
            save_acts(&inputs, key("base"), &h)?;
            save_acts(&outs_base, key("base"), &(&h * w0.transpose()))?;
            save_acts(&outs_ft, key("finetuned"), &(&h * wft.transpose()))?;
        }
    }

    let scores = dir.join("scores");
    fs::create_dir_all(&scores).map_err(|e| GeoError::io(&scores, e))?;
    let mut internal = String::from("checkpoint,proc,gram,cka,retention_fluctuation\n");
    let mut external = String::from("checkpoint,general,target\n");
    for i in 0..20 {
        let damage: f64 = rng.random_range(0.0..1.0);
        let jitter = |rng: &mut ChaCha8Rng, s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        };
        let proc = 0.05 + 0.4 * damage + jitter(&mut rng, 0.03);
        let gram = 0.02 + 0.3 * damage * damage + jitter(&mut rng, 0.02);
        let cka = 1.0 - 0.3 * damage + jitter(&mut rng, 0.03);
        let fluc = 0.01 + 0.05 * damage + jitter(&mut rng, 0.01);
        let general = 60.0 - 25.0 * damage + jitter(&mut rng, 3.0);
        let target = 30.0 + 20.0 * rng.random_range(0.0..1.0);
        internal.push_str(&format!(
            "ckpt{i:02},{},{},{},{}\n",
            csv_float(proc),
            csv_float(gram),
            csv_float(cka),
            csv_float(fluc)
        ));
        external.push_str(&format!("ckpt{i:02},{},{}\n", csv_float(general), csv_float(target)));
    }
    write_text(&scores.join("internal.csv"), &internal)?;
    write_text(&scores.join("external.csv"), &external)?;
    Ok(())
}
