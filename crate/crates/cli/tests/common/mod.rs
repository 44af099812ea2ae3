#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geoscope_core::tensorio::{
    load_matrix, save_matrix, write_manifest, ActivationKey, CheckpointManifest, DenseMatrix,
    Distribution, LoraAdapter, ModuleEntry, ModuleWeights, OftAdapter, Role,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

pub fn fixture(rel: &str) -> String {
    fixture_dir().join(rel).to_string_lossy().into_owned()
}

/// Run the binary with a clean thread environment.
pub fn geoscope(args: &[&str]) -> Output {
    geoscope_env(args, &[])
}

pub fn geoscope_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_geoscope"));
    cmd.args(args).env_remove("GEOSCOPE_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn geoscope")
}

#[track_caller]
pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

pub fn entry(name: &str, layer: usize, shape: (usize, usize), weights: ModuleWeights) -> ModuleEntry {
    ModuleEntry {
        name: name.to_owned(),
        layer_index: layer,
        shape,
        tensor_paths: Default::default(),
        weights,
    }
}

pub fn dense_entry(name: &str, layer: usize, w: DMatrix<f64>) -> ModuleEntry {
    entry(name, layer, w.shape(), ModuleWeights::Dense(w))
}

pub fn lora_entry(name: &str, layer: usize, lora: LoraAdapter) -> ModuleEntry {
    let shape = (lora.b.nrows(), lora.a.ncols());
    entry(name, layer, shape, ModuleWeights::Lora(lora))
}

pub fn oft_entry(name: &str, layer: usize, out_dim: usize, blocks: Vec<DMatrix<f64>>) -> ModuleEntry {
    let b = blocks[0].nrows();
    let shape = (out_dim, b * blocks.len());
    entry(
        name,
        layer,
        shape,
        ModuleWeights::Oft(OftAdapter {
            block_size: b,
            blocks,
        }),
    )
}

pub fn write(dir: &Path, id: &str, role: Role, modules: Vec<ModuleEntry>) -> String {
    let m = CheckpointManifest {
        model_id: id.to_owned(),
        role,
        modules,
    };
    write_manifest(&m, dir).unwrap().to_string_lossy().into_owned()
}

pub fn save_acts(dir: &Path, module: &str, dist: Distribution, role: &str, x: &DMatrix<f64>) {
    std::fs::create_dir_all(dir).unwrap();
    let key = ActivationKey {
        module: module.to_owned(),
        distribution: dist,
        role: role.to_owned(),
    };
    let m = DenseMatrix::from_dmatrix(module, x).unwrap();
    save_matrix(&m, &dir.join(key.file_name())).unwrap();
}

pub fn load(path: &Path) -> DMatrix<f64> {
    load_matrix(path).unwrap().to_dmatrix()
}

/// `(x, y)` with Spearman correlation close to `rho`: Gaussian pairs whose
/// Pearson correlation is `2 sin(pi rho / 6)`, then a monotone map on `y`.
pub fn planted_pairs<R: Rng>(rng: &mut R, n: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
    let r = 2.0 * (std::f64::consts::PI * rho / 6.0).sin();
    let noise = (1.0 / (r * r) - 1.0).sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        xs.push(x);
        ys.push((x + noise * e).exp());
    }
    (xs, ys)
}

/// Internal and external CSVs keyed by `id` with one metric column each.
pub fn write_planted_tables(dir: &Path, x: &[f64], y: &[f64]) -> (String, String) {
    let mut internal = String::from("id,metric\n");
    let mut external = String::from("id,score\n");
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        internal.push_str(&format!("r{i:03},{a:e}\n"));
        external.push_str(&format!("r{i:03},{b:e}\n"));
    }
    let pi = dir.join("internal.csv");
    let pe = dir.join("external.csv");
    std::fs::write(&pi, internal).unwrap();
    std::fs::write(&pe, external).unwrap();
    (
        pi.to_string_lossy().into_owned(),
        pe.to_string_lossy().into_owned(),
    )
}

pub fn read_correlations(path: &Path) -> Vec<(String, String, f64, f64, f64, usize)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (
                rec[0].to_owned(),
                rec[1].to_owned(),
                rec[2].parse().unwrap(),
                rec[3].parse().unwrap(),
                rec[4].parse().unwrap(),
                rec[5].parse().unwrap(),
            )
        })
        .collect()
}
