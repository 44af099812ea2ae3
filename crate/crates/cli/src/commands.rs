use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::Args;
use nalgebra::DMatrix;
use rayon::prelude::*;

use geoscope_core::actgeom::{self, ActGeomReport};
use geoscope_core::drift::{self, DriftReport};
use geoscope_core::fixture;
use geoscope_core::pathwise::{self, PathKind, PathSpec, RewindPolicy};
use geoscope_core::report::{csv_float, Json};
use geoscope_core::spectral::{self, SpectralProfile};
use geoscope_core::stats;
use geoscope_core::tensorio::{
    load_activations, load_manifest, scan_activation_dir, ActivationKey, CheckpointManifest,
    Distribution, ModuleEntry, Role,
};
use geoscope_core::{GeoError, Result};

use crate::output::{require_dir, require_file, require_out_dir, Progress, Sink};

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Base checkpoint manifest.
    #[arg(long)]
    pub base: PathBuf,
    /// Finetuned checkpoint or adapter manifest.
    #[arg(long)]
    pub finetuned: PathBuf,
    /// Require `--finetuned` to be an adapter and merge it into the base.
    #[arg(long)]
    pub adapter: bool,
    /// Moving-average window for fluctuation scores (odd).
    #[arg(long, default_value_t = spectral::DEFAULT_WINDOW)]
    pub window: usize,
    /// Also report singular-vector alignment.
    #[arg(long)]
    pub sva: bool,
    #[arg(long, default_value = "-")]
    pub out: Sink,
}

#[derive(Debug, Args)]
pub struct ActGeomArgs {
    /// Directory of base-model activation dumps.
    #[arg(long)]
    pub base_acts: PathBuf,
    /// Directory of finetuned-model activation dumps.
    #[arg(long)]
    pub ft_acts: PathBuf,
    #[arg(long, default_value_t = actgeom::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value = "-")]
    pub out: Sink,
    /// Optional per-row CSV table.
    #[arg(long)]
    pub csv: Option<Sink>,
}

#[derive(Debug, Args)]
pub struct CsdArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Finetuned checkpoint or adapter manifest.
    #[arg(long)]
    pub finetuned: PathBuf,
    /// Directory of pretrained-model input activations.
    #[arg(long)]
    pub acts: PathBuf,
    #[arg(long, default_value_t = drift::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value = "-")]
    pub out: Sink,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Adapter manifest, or a dense finetuned manifest for the delta path.
    #[arg(long)]
    pub adapter: PathBuf,
    /// delta, lora or cayley.
    #[arg(long)]
    pub path: PathKind,
    /// Comma-separated interpolation coefficients in [0, 1].
    #[arg(long, default_value = "0.1,0.3,0.5,0.7,0.9")]
    pub alphas: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RewindArgs {
    #[arg(long)]
    pub adapter: PathBuf,
    /// uniform:<a>, safescale[:<k>] or minscale.
    #[arg(long)]
    pub policy: RewindPolicy,
    /// Reference layer count for safescale.
    #[arg(long)]
    pub ref_layers: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Rewind report; defaults to rewind.json inside the output directory.
    #[arg(long)]
    pub report: Option<Sink>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// CSV of internal metrics.
    #[arg(long)]
    pub internal: PathBuf,
    /// CSV of external scores.
    #[arg(long)]
    pub external: PathBuf,
    /// Join column present in both tables.
    #[arg(long)]
    pub key: String,
    #[arg(long, default_value = "-")]
    pub out: Sink,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = fixture::TOY_SEED)]
    pub seed: u64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(GeoError::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(())
}

fn manifest_error(reason: impl Into<String>) -> GeoError {
    GeoError::Manifest {
        module: None,
        reason: reason.into(),
    }
}

/// Bring the finetuned side to dense weights, merging an adapter into the base.
fn effective_finetuned(
    base: &CheckpointManifest,
    finetuned: &CheckpointManifest,
    require_adapter: bool,
) -> Result<CheckpointManifest> {
    if base.role == Role::Adapter {
        return Err(manifest_error("--base points at an adapter manifest"));
    }
    if finetuned.role == Role::Adapter {
        return pathwise::interpolate_checkpoint(base, finetuned, PathKind::Delta, 1.0);
    }
    if require_adapter {
        return Err(manifest_error(format!(
            "--adapter given but {} has role {}",
            finetuned.model_id, finetuned.role
        )));
    }
    let names = |m: &CheckpointManifest| -> BTreeSet<String> {
        m.modules.iter().map(|e| e.name.clone()).collect()
    };
    let (a, b) = (names(base), names(finetuned));
    let only_base: Vec<&String> = a.difference(&b).collect();
    let only_ft: Vec<&String> = b.difference(&a).collect();
    if !only_base.is_empty() || !only_ft.is_empty() {
        let list = |v: &[&String]| {
            if v.is_empty() {
                "none".to_owned()
            } else {
                v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            }
        };
        return Err(manifest_error(format!(
            "module sets differ; only in base: {}; only in finetuned: {}",
            list(&only_base),
            list(&only_ft)
        )));
    }
    Ok(finetuned.clone())
}

fn dense_pairs<'a>(
    base: &'a CheckpointManifest,
    finetuned: &'a CheckpointManifest,
) -> Vec<(&'a ModuleEntry, &'a ModuleEntry)> {
    let mut pairs: Vec<_> = base
        .modules
        .iter()
        .filter_map(|b| finetuned.module(&b.name).map(|f| (b, f)))
        .collect();
    pairs.sort_by(|x, y| x.0.name.cmp(&y.0.name));
    pairs
}

fn dense(entry: &ModuleEntry) -> Result<&DMatrix<f64>> {
    entry.dense().ok_or_else(|| GeoError::Manifest {
        module: Some(entry.name.clone()),
        reason: "expected a dense weight".into(),
    })
}

fn profile_json(entry: &ModuleEntry, p: &SpectralProfile) -> Json {
    let mut fields = vec![
        ("module", Json::from(p.module.as_str())),
        ("layer_index", Json::from(entry.layer_index)),
        ("shape", Json::Arr(vec![entry.shape.0.into(), entry.shape.1.into()])),
        ("retention", Json::floats(&p.retention)),
        ("adaptation", Json::floats(&p.adaptation)),
        ("retention_fluctuation", p.retention_fluctuation.into()),
        ("adaptation_fluctuation", p.adaptation_fluctuation.into()),
        ("effective_rank_delta", p.effective_rank_delta.into()),
    ];
    if let Some(sva) = &p.sva {
        fields.push(("sva", Json::floats(sva)));
    }
    Json::obj(fields)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn profile(args: &ProfileArgs, progress: Progress) -> Result<()> {
    require_file(&args.base, "--base")?;
    require_file(&args.finetuned, "--finetuned")?;
    args.out.validate()?;
    if args.window == 0 || args.window % 2 == 0 {
        return Err(GeoError::InvalidConfig(format!(
            "--window must be odd and positive, got {}",
            args.window
        )));
    }
    let base = load_manifest(&args.base)?;
    let raw = load_manifest(&args.finetuned)?;
    let finetuned = effective_finetuned(&base, &raw, args.adapter)?;
    let pairs = dense_pairs(&base, &finetuned);
    progress.note(format!("profiling {} modules of {}", pairs.len(), raw.model_id));

    let profiles = pairs
        .par_iter()
        .map(|(b, f)| spectral::spectral_profile(&b.name, dense(b)?, dense(f)?, args.window, args.sva))
        .collect::<Result<Vec<_>>>()?;

    let modules: Vec<Json> = pairs
        .iter()
        .zip(&profiles)
        .map(|((b, _), p)| profile_json(b, p))
        .collect();
    let summary = Json::obj([
        ("method", Json::from(raw.model_id.as_str())),
        ("modules", Json::from(profiles.len())),
        (
            "mean_retention_fluctuation",
            mean(profiles.iter().map(|p| p.retention_fluctuation)).into(),
        ),
        (
            "mean_adaptation_fluctuation",
            mean(profiles.iter().map(|p| p.adaptation_fluctuation)).into(),
        ),
        (
            "mean_effective_rank_delta",
            mean(profiles.iter().map(|p| p.effective_rank_delta)).into(),
        ),
    ]);
    let doc = Json::obj([
        ("base", Json::from(base.model_id.as_str())),
        ("finetuned", Json::from(raw.model_id.as_str())),
        ("window", Json::from(args.window)),
        ("modules", Json::Arr(modules)),
        ("summary", summary),
    ]);
    args.out.write(&doc.to_pretty())?;
    progress.note(format!("wrote profiles to {}", args.out.describe()));
    Ok(())
}

type DumpIndex = BTreeMap<(String, Distribution), (ActivationKey, PathBuf)>;

fn index_dumps(dir: &Path) -> Result<DumpIndex> {
    let mut index = DumpIndex::new();
    for (key, path) in scan_activation_dir(dir)? {
        let slot = (key.module.clone(), key.distribution);
        if let Some((other, _)) = index.get(&slot) {
            return Err(GeoError::InvalidPairing(format!(
                "{} holds both {} and {}",
                dir.display(),
                other.file_name(),
                key.file_name()
            )));
        }
        index.insert(slot, (key, path));
    }
    if index.is_empty() {
        return Err(GeoError::InsufficientData(format!(
            "no <module>__<distribution>__<role>.npy dumps in {}",
            dir.display()
        )));
    }
    Ok(index)
}

/// `(layer, rest)` split at the first all-digit path segment.
fn split_layer(module: &str) -> (Option<usize>, &str) {
    let mut offset = 0;
    for seg in module.split('.') {
        if !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()) {
            let rest_start = (offset + seg.len() + 1).min(module.len());
            if let Ok(layer) = seg.parse() {
                return (Some(layer), &module[rest_start..]);
            }
        }
        offset += seg.len() + 1;
    }
    (None, module)
}

fn actgeom_csv(rows: &[ActGeomReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| GeoError::InvalidConfig(format!("csv encoding: {e}"));
    w.write_record(["layer", "module", "distribution", "proc", "gram", "cka", "n"])
        .map_err(csv_err)?;
    for r in rows {
        let (layer, rest) = split_layer(&r.module);
        w.write_record([
            layer.map(|l| l.to_string()).unwrap_or_default(),
            rest.to_owned(),
            r.distribution.to_string(),
            csv_float(r.procrustes_residual),
            csv_float(r.gram_distortion),
            csv_float(r.cka),
            r.n_examples.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| GeoError::InvalidConfig(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn actgeom(args: &ActGeomArgs, progress: Progress) -> Result<()> {
    require_dir(&args.base_acts, "--base-acts")?;
    require_dir(&args.ft_acts, "--ft-acts")?;
    check_epsilon(args.epsilon)?;
    args.out.validate()?;
    if let Some(csv) = &args.csv {
        csv.validate()?;
    }
    let base = index_dumps(&args.base_acts)?;
    let ft = index_dumps(&args.ft_acts)?;
    let mut orphans: Vec<String> = Vec::new();
    for (slot, (key, _)) in &base {
        if !ft.contains_key(slot) {
            orphans.push(format!("{} (base)", key.file_name()));
        }
    }
    for (slot, (key, _)) in &ft {
        if !base.contains_key(slot) {
            orphans.push(format!("{} (finetuned)", key.file_name()));
        }
    }
    if !orphans.is_empty() {
        return Err(GeoError::Pairing { orphans });
    }
    let pairs: Vec<_> = base.iter().map(|(slot, b)| (slot, b, &ft[slot])).collect();
    progress.note(format!("comparing {} activation pairs", pairs.len()));

    let rows = pairs
        .par_iter()
        .map(|((module, dist), (bk, bp), (fk, fp))| {
            let x0 = load_activations(bp, bk)?;
            let x1 = load_activations(fp, fk)?;
            actgeom::compare(module, *dist, &x0.data, &x1.data, args.epsilon)
        })
        .collect::<Result<Vec<_>>>()?;

    let json_rows = rows
        .iter()
        .map(|r| {
            Json::obj([
                ("module", Json::from(r.module.as_str())),
                ("distribution", Json::from(r.distribution.as_str())),
                ("proc", r.procrustes_residual.into()),
                ("gram", r.gram_distortion.into()),
                ("cka", r.cka.into()),
                ("raw_residual", r.raw_residual.into()),
                ("n", Json::from(r.n_examples)),
                ("dropped_rows", Json::from(r.dropped_rows)),
            ])
        })
        .collect();
    let doc = Json::obj([("epsilon", Json::from(args.epsilon)), ("rows", Json::Arr(json_rows))]);
    let csv_text = match &args.csv {
        Some(_) => Some(actgeom_csv(&rows)?),
        None => None,
    };
    args.out.write(&doc.to_pretty())?;
    if let (Some(sink), Some(text)) = (&args.csv, csv_text) {
        sink.write(&text)?;
    }
    let dropped: usize = rows.iter().map(|r| r.dropped_rows).sum();
    if dropped > 0 {
        progress.note(format!("{dropped} zero-norm rows dropped from gram comparisons"));
    }
    progress.note(format!("wrote activation geometry to {}", args.out.describe()));
    Ok(())
}

fn drift_json(r: &DriftReport) -> Json {
    Json::obj([
        ("csd_abs", Json::from(r.csd_abs)),
        ("csd_rel", r.csd_rel.into()),
        ("csd_un", r.csd_un.into()),
        ("csd_rel_pointwise", r.csd_rel_pointwise.into()),
        ("n", Json::from(r.n_examples)),
    ])
}

pub fn csd(args: &CsdArgs, progress: Progress) -> Result<()> {
    require_file(&args.base, "--base")?;
    require_file(&args.finetuned, "--finetuned")?;
    require_dir(&args.acts, "--acts")?;
    check_epsilon(args.epsilon)?;
    args.out.validate()?;
    let base = load_manifest(&args.base)?;
    let raw = load_manifest(&args.finetuned)?;
    let finetuned = effective_finetuned(&base, &raw, false)?;
    let dumps = index_dumps(&args.acts)?;
    let foreign: Vec<String> = dumps
        .values()
        .filter(|(k, _)| k.role != "base")
        .map(|(k, _)| k.file_name())
        .collect();
    if !foreign.is_empty() {
        return Err(GeoError::InvalidPairing(format!(
            "csd needs inputs collected from the base model (role tag 'base'), got {}",
            foreign.join(", ")
        )));
    }

    let mut modules: BTreeMap<&str, [Option<&(ActivationKey, PathBuf)>; 2]> = BTreeMap::new();
    for ((module, dist), dump) in &dumps {
        let slot = modules.entry(module.as_str()).or_default();
        slot[usize::from(*dist == Distribution::Target)] = Some(dump);
    }
    let unknown: Vec<&str> = modules
        .keys()
        .copied()
        .filter(|m| base.module(m).is_none() || finetuned.module(m).is_none())
        .collect();
    if !unknown.is_empty() {
        return Err(manifest_error(format!(
            "activations for modules missing from the checkpoints: {}",
            unknown.join(", ")
        )));
    }
    let mut orphans = Vec::new();
    let mut jobs = Vec::new();
    for (module, [general, target]) in &modules {
        match (general, target) {
            (Some(g), Some(t)) => jobs.push((*module, *g, *t)),
            (Some((k, _)), None) | (None, Some((k, _))) => orphans.push(k.file_name()),
            (None, None) => {}
        }
    }
    if !orphans.is_empty() {
        return Err(GeoError::Pairing { orphans });
    }
    progress.note(format!("computing drift for {} modules", jobs.len()));

    let results = jobs
        .par_iter()
        .map(|(module, (gk, gp), (tk, tp))| {
            let b = base.module(module).expect("checked above");
            let f = finetuned.module(module).expect("checked above");
            let (w0, wstar) = (dense(b)?, dense(f)?);
            let general = drift::csd(w0, wstar, &load_activations(gp, gk)?, args.epsilon)?;
            let target = drift::csd(w0, wstar, &load_activations(tp, tk)?, args.epsilon)?;
            let ratio = drift::drift_ratio(&general, &target, args.epsilon)?;
            Ok(Json::obj([
                ("module", Json::from(*module)),
                ("layer_index", Json::from(b.layer_index)),
                ("general", drift_json(&general)),
                ("target", drift_json(&target)),
                ("ratio_rel", ratio.ratio_rel.into()),
                ("ratio_un", ratio.ratio_un.into()),
                ("epsilon", Json::from(args.epsilon)),
                ("n_general", Json::from(general.n_examples)),
                ("n_target", Json::from(target.n_examples)),
            ]))
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = Json::obj([
        ("base", Json::from(base.model_id.as_str())),
        ("finetuned", Json::from(raw.model_id.as_str())),
        ("epsilon", Json::from(args.epsilon)),
        ("modules", Json::Arr(results)),
    ]);
    args.out.write(&doc.to_pretty())?;
    progress.note(format!("wrote drift report to {}", args.out.describe()));
    Ok(())
}

fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| GeoError::InvalidConfig(format!("invalid alpha '{s}'")))
        })
        .collect()
}

pub fn interpolate(args: &InterpolateArgs, progress: Progress) -> Result<()> {
    require_file(&args.base, "--base")?;
    require_file(&args.adapter, "--adapter")?;
    require_out_dir(&args.out_dir)?;
    let spec = PathSpec::new(args.path, parse_alphas(&args.alphas)?)?;
    let base = load_manifest(&args.base)?;
    let target = load_manifest(&args.adapter)?;
    progress.note(format!(
        "interpolating {} along {} at {} points",
        target.model_id,
        args.path.as_str(),
        spec.alphas().len()
    ));
    let index = pathwise::sweep(&base, &target, &spec, &args.out_dir)?;
    progress.note(format!(
        "wrote {} checkpoints and sweep_index.json to {}",
        index.outputs.len(),
        args.out_dir.display()
    ));
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn rewind(args: &RewindArgs, progress: Progress) -> Result<()> {
    require_file(&args.adapter, "--adapter")?;
    require_out_dir(&args.out_dir)?;
    let adapter_dir = args.adapter.parent().unwrap_or(Path::new("."));
    let adapter_dir = if adapter_dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        adapter_dir
    };
    if same_dir(adapter_dir, &args.out_dir) {
        return Err(GeoError::InvalidConfig(
            "--out-dir must differ from the adapter's directory".into(),
        ));
    }
    let policy = match (args.policy, args.ref_layers) {
        (p, None) => p,
        (RewindPolicy::SafeScale { .. }, Some(0)) => {
            return Err(GeoError::InvalidConfig("--ref-layers must be >= 1".into()))
        }
        (RewindPolicy::SafeScale { .. }, Some(k)) => RewindPolicy::SafeScale { reference_layers: k },
        (p, Some(_)) => {
            return Err(GeoError::InvalidConfig(format!(
                "--ref-layers only applies to safescale, not {p}"
            )))
        }
    };
    let report_sink = args
        .report
        .clone()
        .unwrap_or_else(|| Sink::File(args.out_dir.join("rewind.json")));
    if let Sink::File(p) = &report_sink {
        if p.parent() != Some(args.out_dir.as_path()) {
            report_sink.validate()?;
        }
    }
    let adapter = load_manifest(&args.adapter)?;
    let (rewound, report) = pathwise::rewind(&adapter, policy)?;
    for layer in &report.per_layer {
        progress.note(format!(
            "layer {}: strength {:.6e} -> {:.6e} (alpha {:.6})",
            layer.layer_index, layer.strength_before, layer.strength_after, layer.alpha
        ));
    }
    geoscope_core::tensorio::write_manifest(&rewound, &args.out_dir)?;
    report_sink.write(&report.to_json().to_pretty())?;
    progress.note(format!(
        "wrote rewound adapter to {} and report to {}",
        args.out_dir.display(),
        report_sink.describe()
    ));
    Ok(())
}

pub fn correlate(args: &CorrelateArgs, progress: Progress) -> Result<()> {
    require_file(&args.internal, "--internal")?;
    require_file(&args.external, "--external")?;
    args.out.validate()?;
    let internal = stats::read_metric_csv(&args.internal, &args.key)?;
    let external = stats::read_metric_csv(&args.external, &args.key)?;
    let results = stats::correlate_tables(&internal, &external)?;
    for r in &results {
        if r.dropped > 0 {
            progress.note(format!(
                "{} vs {}: dropped {} rows with missing values",
                r.metric_a, r.metric_b, r.dropped
            ));
        }
    }
    args.out.write(&stats::correlations_to_csv(&results))?;
    progress.note(format!(
        "wrote {} correlations to {}",
        results.len(),
        args.out.describe()
    ));
    Ok(())
}

pub fn fixture(args: &FixtureArgs, progress: Progress) -> Result<()> {
    require_out_dir(&args.out_dir)?;
    fixture::write_fixture(&args.out_dir, args.seed)?;
    progress.note(format!("wrote toy fixture to {}", args.out_dir.display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_split() {
        assert_eq!(split_layer("layers.18.mlp.down_proj"), (Some(18), "mlp.down_proj"));
        assert_eq!(
            split_layer("model.layers.9.self_attn.q_proj"),
            (Some(9), "self_attn.q_proj")
        );
        assert_eq!(split_layer("lm_head"), (None, "lm_head"));
        assert_eq!(split_layer("blocks.3"), (Some(3), ""));
    }

    #[test]
    fn alpha_lists() {
        assert_eq!(parse_alphas("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_alphas("0.1,x").is_err());
    }
}
