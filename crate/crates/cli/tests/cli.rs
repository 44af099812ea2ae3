mod common;

use std::path::Path;

use common::*;
use geoscope_core::linalg::svd;
use geoscope_core::pathwise::merge_oft;
use geoscope_core::synth::{random_matrix, random_orthogonal, random_skew};
use geoscope_core::tensorio::{load_manifest, Distribution, LoraAdapter, ModuleWeights, Role};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn base_modules(rng: &mut ChaCha8Rng) -> Vec<(String, usize, DMatrix<f64>)> {
    (0..2)
        .flat_map(|layer| {
            [("self_attn.q_proj", 6, 4), ("mlp.down_proj", 5, 8)]
                .into_iter()
                .map(move |(s, o, i)| (format!("layers.{layer}.{s}"), layer, o, i))
        })
        .map(|(name, layer, o, i)| (name, layer, random_matrix(rng, o, i)))
        .collect()
}

fn write_base(dir: &Path, modules: &[(String, usize, DMatrix<f64>)]) -> String {
    let entries = modules
        .iter()
        .map(|(n, l, w)| dense_entry(n, *l, w.clone()))
        .collect();
    write(dir, "base", Role::Base, entries)
}

#[test]
fn profile_of_base_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = write_base(&tmp.path().join("base"), &base_modules(&mut rng));
    let out = tmp.path().join("p.json");
    ok(&geoscope(&["profile", "--base", &base, "--finetuned", &base, "--out", out.to_str().unwrap()]));
    let doc = read_json(&out);
    let modules = doc["modules"].as_array().unwrap();
    assert_eq!(modules.len(), 4);
    for m in modules {
        assert!(floats(&m["retention"]).iter().all(|v| *v == 0.0));
        assert!(floats(&m["adaptation"]).iter().all(|v| *v == 0.0));
        assert_eq!(m["retention_fluctuation"].as_f64(), Some(0.0));
        assert_eq!(m["adaptation_fluctuation"].as_f64(), Some(0.0));
    }
    let names: Vec<&str> = modules.iter().map(|m| m["module"].as_str().unwrap()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert_eq!(doc["summary"]["mean_retention_fluctuation"].as_f64(), Some(0.0));
}

#[test]
fn zero_adapters_are_merge_neutral() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let modules = base_modules(&mut rng);
    let base = write_base(&tmp.path().join("base"), &modules);
    let lora = write(
        &tmp.path().join("lora"),
        "zero-lora",
        Role::Adapter,
        modules
            .iter()
            .map(|(n, l, w)| {
                lora_entry(
                    n,
                    *l,
                    LoraAdapter {
                        a: random_matrix(&mut rng, 2, w.ncols()),
                        b: DMatrix::zeros(w.nrows(), 2),
                        scale: 1.5,
                    },
                )
            })
            .collect(),
    );
    let oft = write(
        &tmp.path().join("oft"),
        "zero-oft",
        Role::Adapter,
        modules
            .iter()
            .map(|(n, l, w)| oft_entry(n, *l, w.nrows(), vec![DMatrix::zeros(2, 2); w.ncols() / 2]))
            .collect(),
    );
    let run = |ft: &str, extra: &[&str], name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec!["profile", "--base", &base, "--finetuned", ft, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&geoscope(&args));
        read_json(&out)
    };
    let reference = run(&base, &[], "self.json");
    let from_lora = run(&lora, &["--adapter"], "lora.json");
    let from_oft = run(&oft, &[], "oft.json");
    assert_eq!(reference["modules"], from_lora["modules"]);
    assert_eq!(reference["modules"], from_oft["modules"]);
}

#[test]
fn profile_recovers_rank_one_spike() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0 = random_matrix(&mut rng, 7, 5);
    let basis = svd(&w0, "m").unwrap();
    let c = 0.25;
    let wstar = &w0 + basis.u.column(1) * basis.v.column(1).transpose() * c;
    let base = write(&tmp.path().join("b"), "b", Role::Base, vec![dense_entry("layers.0.o_proj", 0, w0)]);
    let ft = write(&tmp.path().join("f"), "f", Role::Finetuned, vec![dense_entry("layers.0.o_proj", 0, wstar)]);
    let out = tmp.path().join("p.json");
    ok(&geoscope(&["profile", "--base", &base, "--finetuned", &ft, "--out", out.to_str().unwrap()]));
    let retention = floats(&read_json(&out)["modules"][0]["retention"]);
    for (i, v) in retention.iter().enumerate() {
        let want = if i == 1 { c } else { 0.0 };
        assert!((v - want).abs() <= 1e-10, "index {i}: {v}");
    }
}

#[test]
fn profile_reports_module_set_difference() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let modules = base_modules(&mut rng);
    let base = write_base(&tmp.path().join("base"), &modules);
    let mut ft_entries: Vec<_> = modules[1..]
        .iter()
        .map(|(n, l, w)| dense_entry(n, *l, w.clone()))
        .collect();
    ft_entries.push(dense_entry("layers.9.extra", 9, random_matrix(&mut rng, 2, 2)));
    let ft = write(&tmp.path().join("ft"), "ft", Role::Finetuned, ft_entries);
    let out = tmp.path().join("p.json");
    let res = geoscope(&["profile", "--base", &base, "--finetuned", &ft, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr(&res);
    assert!(err.contains(&modules[0].0), "{err}");
    assert!(err.contains("layers.9.extra"), "{err}");
    assert!(!out.exists());
}

#[test]
fn actgeom_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a.json");
    let csv = tmp.path().join("a.csv");
    let acts = fixture("acts/base");
    ok(&geoscope(&[
        "actgeom", "--base-acts", &acts, "--ft-acts", &acts,
        "--out", out.to_str().unwrap(), "--csv", csv.to_str().unwrap(),
    ]));
    let rows = read_json(&out)["rows"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 12);
    for r in rows {
        assert!(r["proc"].as_f64().unwrap() <= 1e-12);
        assert!(r["gram"].as_f64().unwrap() <= 1e-12);
        assert!((r["cka"].as_f64().unwrap() - 1.0).abs() <= 1e-9);
    }
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("layer,module,distribution,proc,gram,cka,n\n"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn actgeom_rotation_and_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, rot, noisy) = (tmp.path().join("b"), tmp.path().join("r"), tmp.path().join("n"));
    let noise_levels = [0.02, 0.1, 0.3, 0.8];
    for (i, level) in noise_levels.iter().enumerate() {
        let module = format!("layers.{i}.mlp.down_proj");
        let x = random_matrix(&mut rng, 40, 6);
        let g = random_orthogonal(&mut rng, 6);
        let e = random_matrix(&mut rng, 40, 6);
        save_acts(&b, &module, Distribution::General, "base", &x);
        save_acts(&rot, &module, Distribution::General, "finetuned", &(&x * g));
        save_acts(&noisy, &module, Distribution::General, "finetuned", &(&x + e * *level));
    }
    let run = |ft: &Path, name: &str| {
        let out = tmp.path().join(name);
        ok(&geoscope(&[
            "actgeom", "--base-acts", b.to_str().unwrap(), "--ft-acts", ft.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]));
        read_json(&out)["rows"].as_array().unwrap().clone()
    };
    for r in run(&rot, "rot.json") {
        assert!(r["proc"].as_f64().unwrap() <= 1e-8);
        assert!(r["gram"].as_f64().unwrap() <= 1e-8);
        assert!(r["cka"].as_f64().unwrap() >= 1.0 - 1e-8);
    }
    let rows = run(&noisy, "noise.json");
    let col = |k: &str| rows.iter().map(|r| r[k].as_f64().unwrap()).collect::<Vec<_>>();
    let (proc, gram, cka) = (col("proc"), col("gram"), col("cka"));
    for i in 1..noise_levels.len() {
        assert!(proc[i] > proc[i - 1] && gram[i] > gram[i - 1] && cka[i] < cka[i - 1]);
    }
}

#[test]
fn actgeom_lists_orphans() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, f) = (tmp.path().join("b"), tmp.path().join("f"));
    let x = random_matrix(&mut rng, 5, 3);
    save_acts(&b, "m1", Distribution::General, "base", &x);
    save_acts(&b, "m2", Distribution::Target, "base", &x);
    save_acts(&f, "m1", Distribution::General, "finetuned", &x);
    save_acts(&f, "m3", Distribution::General, "finetuned", &x);
    let out = tmp.path().join("a.json");
    let res = geoscope(&[
        "actgeom", "--base-acts", b.to_str().unwrap(), "--ft-acts", f.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr(&res);
    assert!(err.contains("m2__target__base.npy") && err.contains("m3__general__finetuned.npy"), "{err}");
    assert!(!out.exists());
}

#[test]
fn csd_on_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c.json");
    ok(&geoscope(&[
        "csd", "--base", &fixture("base/manifest.json"), "--finetuned", &fixture("lora/manifest.json"),
        "--acts", &fixture("acts/inputs"), "--out", out.to_str().unwrap(),
    ]));
    let doc = read_json(&out);
    let modules = doc["modules"].as_array().unwrap();
    assert_eq!(modules.len(), 6);
    for m in modules {
        for dist in ["general", "target"] {
            assert!(m[dist]["csd_abs"].as_f64().unwrap() > 0.0);
            assert_eq!(m[dist]["n"].as_u64(), Some(32));
        }
        let want = m["general"]["csd_rel"].as_f64().unwrap()
            / (m["target"]["csd_rel"].as_f64().unwrap() + 1e-8);
        assert!((m["ratio_rel"].as_f64().unwrap() - want).abs() <= 1e-12 * want);
        assert_eq!(m["n_general"].as_u64(), Some(32));
        assert_eq!(m["epsilon"].as_f64(), Some(1e-8));
    }
}

#[test]
fn csd_rejects_finetuned_model_activations() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c.json");
    let res = geoscope(&[
        "csd", "--base", &fixture("base/manifest.json"), "--finetuned", &fixture("lora/manifest.json"),
        "--acts", &fixture("acts/finetuned"), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("role tag 'base'"));
    assert!(!out.exists());
}

#[test]
fn cayley_interpolation_endpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    ok(&geoscope(&[
        "interpolate", "--base", &fixture("base/manifest.json"), "--adapter", &fixture("oft/manifest.json"),
        "--path", "cayley", "--alphas", "0,1", "--out-dir", out_dir.to_str().unwrap(),
    ]));
    let index = read_json(&out_dir.join("sweep_index.json"));
    assert_eq!(index["outputs"].as_array().unwrap().len(), 2);
    let base = load_manifest(&fixture_dir().join("base/manifest.json")).unwrap();
    let oft = load_manifest(&fixture_dir().join("oft/manifest.json")).unwrap();
    let at0 = load_manifest(&out_dir.join("alpha_00/manifest.json")).unwrap();
    let at1 = load_manifest(&out_dir.join("alpha_01/manifest.json")).unwrap();
    for m in &base.modules {
        let w0 = m.dense().unwrap();
        assert_eq!(at0.module(&m.name).unwrap().dense().unwrap(), w0);
        let ModuleWeights::Oft(o) = &oft.module(&m.name).unwrap().weights else {
            panic!("oft fixture")
        };
        let merged = merge_oft(w0, o).unwrap();
        let got = at1.module(&m.name).unwrap().dense().unwrap();
        assert!((got - &merged).norm() <= 1e-12 * merged.norm());
    }
}

#[test]
fn safescale_rewinds_strong_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reference = 0.09;
    let modules = (0..6)
        .map(|layer| {
            let strength: f64 = if layer == 5 { 4.0 * reference } else { reference };
            let blocks = vec![random_skew(&mut rng, 4, strength.sqrt())];
            oft_entry(&format!("layers.{layer}.v_proj"), layer, 3, blocks)
        })
        .collect();
    let adapter = write(&tmp.path().join("a"), "a", Role::Adapter, modules);
    let out_dir = tmp.path().join("rewound");
    ok(&geoscope(&[
        "rewind", "--adapter", &adapter, "--policy", "safescale", "--ref-layers", "5",
        "--out-dir", out_dir.to_str().unwrap(),
    ]));
    let report = read_json(&out_dir.join("rewind.json"));
    assert!((report["reference_strength"].as_f64().unwrap() - reference).abs() <= 1e-12);
    let layers = report["per_layer"].as_array().unwrap();
    for (i, l) in layers.iter().enumerate() {
        let alpha = l["alpha"].as_f64().unwrap();
        let want = if i == 5 { 0.25 } else { 1.0 };
        assert!((alpha - want).abs() <= 1e-12, "layer {i}: {alpha}");
        assert!((l["strength_after"].as_f64().unwrap() - reference).abs() <= 1e-10);
    }
    let rewound = load_manifest(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(rewound.role, Role::Adapter);
    assert_eq!(rewound.modules.len(), 6);
}

#[test]
fn ref_layers_needs_safescale() {
    let tmp = tempfile::tempdir().unwrap();
    let res = geoscope(&[
        "rewind", "--adapter", &fixture("oft/manifest.json"), "--policy", "minscale",
        "--ref-layers", "2", "--out-dir", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn correlate_recovers_planted_rank_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y) = planted_pairs(&mut rng, 160, 0.7);
    let (internal, external) = write_planted_tables(tmp.path(), &x, &y);
    let out = tmp.path().join("corr.csv");
    ok(&geoscope(&[
        "correlate", "--internal", &internal, "--external", &external, "--key", "id",
        "--out", out.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("metric,external_metric,pearson,spearman,spearman_p,n\n"));
    let rows = read_correlations(&out);
    assert_eq!(rows.len(), 1);
    let (metric, external_metric, _, rho, p, n) = rows[0].clone();
    assert_eq!((metric.as_str(), external_metric.as_str(), n), ("metric", "score", 160));
    assert!((rho - 0.7).abs() <= 0.1, "rho {rho}");
    assert!(p < 0.01);
}

#[test]
fn stdout_carries_only_the_report() {
    let res = geoscope(&[
        "correlate", "--internal", &fixture("scores/internal.csv"),
        "--external", &fixture("scores/external.csv"), "--key", "checkpoint", "--out", "-",
    ]);
    ok(&res);
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.starts_with("metric,external_metric"));
    assert_eq!(text.lines().count(), 9);
    assert!(stderr_has_progress(&res.stderr));

    let res = geoscope(&[
        "profile", "--base", &fixture("base/manifest.json"),
        "--finetuned", &fixture("finetuned/manifest.json"), "--quiet",
    ]);
    ok(&res);
    let doc: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(doc["modules"].as_array().unwrap().len(), 6);
    assert!(res.stderr.is_empty());
}

fn stderr_has_progress(bytes: &[u8]) -> bool {
    String::from_utf8_lossy(bytes).contains("geoscope: ")
}

#[test]
fn thread_flag_and_environment() {
    let args = |threads: Option<&str>| {
        let mut a = vec![
            "actgeom".to_owned(),
            "--base-acts".into(),
            fixture("acts/base"),
            "--ft-acts".into(),
            fixture("acts/finetuned"),
        ];
        if let Some(t) = threads {
            a.push("--threads".into());
            a.push(t.into());
        }
        a
    };
    let run = |threads: Option<&str>, env: &[(&str, &str)]| {
        let a = args(threads);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        geoscope_env(&refs, env)
    };
    let one = run(None, &[]);
    ok(&one);
    let four = run(Some("4"), &[]);
    ok(&four);
    assert_eq!(one.stdout, four.stdout);
    let from_env = run(None, &[("GEOSCOPE_THREADS", "3")]);
    ok(&from_env);
    assert_eq!(one.stdout, from_env.stdout);
    // flag beats an invalid environment value
    ok(&run(Some("2"), &[("GEOSCOPE_THREADS", "0")]));
    assert_eq!(run(None, &[("GEOSCOPE_THREADS", "0")]).status.code(), Some(2));
    assert_eq!(run(Some("0"), &[]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let res = geoscope(&["profile", "--base", missing.to_str().unwrap(), "--finetuned", missing.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    let out = tmp.path().join("no_such_dir/p.json");
    let res = geoscope(&[
        "profile", "--base", &fixture("base/manifest.json"), "--finetuned", &fixture("base/manifest.json"),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"model_id\": 3}").unwrap();
    let res = geoscope(&["profile", "--base", bad.to_str().unwrap(), "--finetuned", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("manifest"));

    let res = geoscope(&["interpolate", "--base", &fixture("base/manifest.json"),
        "--adapter", &fixture("lora/manifest.json"), "--path", "cayley", "--alphas", "0.5",
        "--out-dir", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!tmp.path().join("s").exists());
}

#[cfg(target_os = "linux")]
#[test]
fn unwritable_output_is_io_error() {
    let res = geoscope(&[
        "correlate", "--internal", &fixture("scores/internal.csv"),
        "--external", &fixture("scores/external.csv"), "--key", "checkpoint",
        "--out", "/proc/geoscope-test.csv",
    ]);
    assert_eq!(res.status.code(), Some(4), "{}", stderr(&res));
}

#[test]
fn committed_fixture_regenerates_identically() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&geoscope(&["fixture", "--out-dir", tmp.path().to_str().unwrap()]));
    let mut expected = Vec::new();
    collect_files(&fixture_dir(), &fixture_dir(), &mut expected);
    let mut produced = Vec::new();
    collect_files(tmp.path(), tmp.path(), &mut produced);
    assert_eq!(expected, produced);
    for rel in &expected {
        let a = std::fs::read(fixture_dir().join(rel)).unwrap();
        let b = std::fs::read(tmp.path().join(rel)).unwrap();
        assert!(a == b, "{rel} differs from the committed fixture");
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
}
