use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cmas_core::associator::{generate_along, AssociationPath};
use cmas_core::autodiff::inject_backward_fault;
use cmas_core::data::{IdxPart, LabelMap};
use cmas_core::eval::{
    evaluate_scenario, reconstruction_accuracy, summarize, train_recognizer as fit_recognizer, write_metrics_file, Direction,
};
use cmas_core::training::{train_cross as fit_cross, train_intra as fit_intra, PairingSampler};
use cmas_core::{
    checkpoint, rng, Associator, MetricsRow, ModalityAutoEncoder, ModelRegistry, OpKind, PathMode,
    PhaseReport, ScenarioSpec, Tensor, TrainConfig,
};

use crate::manifest::{self, RunManifest};
use crate::{modality, pgm, DataFlags, Outcome, TrainFlags};

/// Tiles per class in generation previews.
const PREVIEW_PER_CLASS: usize = 8;

fn prepare_out(out: &Path) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?;
        if entries.next().is_some() {
            bail!("output directory {} is not empty", out.display());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn config(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_registry(dirs: &[PathBuf]) -> Result<ModelRegistry> {
    let mut reg = ModelRegistry::new();
    for dir in dirs {
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading models directory {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let n = p.file_name().unwrap_or_default().to_string_lossy();
                n.ends_with(".cmas") && (n.starts_with("ae-") || n.starts_with("assoc-") || n.starts_with("recog-"))
            })
            .collect();
        names.sort();
        for p in names {
            reg.merge(ModelRegistry::load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?);
        }
    }
    Ok(reg)
}

fn manifests_in(dirs: &[PathBuf]) -> Vec<Vec<(String, String)>> {
    dirs.iter()
        .filter_map(|d| manifest::read(&d.join(manifest::FILE_NAME)).ok())
        .collect()
}

fn write_file(out: &Path, name: &str, bytes: &[u8], m: &mut RunManifest) -> Result<()> {
    let p = out.join(name);
    fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
    m.output(name);
    Ok(())
}

fn curves_csv(report: &PhaseReport, paired_fraction: Option<f64>) -> String {
    match paired_fraction {
        None => report.curves_csv(),
        Some(f) => {
            let mut s = String::from("epoch,paired_fraction,total,recon,kl\n");
            for (i, e) in report.curves.iter().enumerate() {
                let _ = writeln!(s, "{},{f:?},{:?},{:?},{:?}", i + 1, e.total, e.recon, e.kl);
            }
            s
        }
    }
}

fn component_bytes(reg: ModelRegistry) -> Vec<u8> {
    reg.to_bytes()
}

pub fn gradcheck(inject: Option<&str>) -> Result<Outcome> {
    if let Some(name) = inject {
        let kind = OpKind::DIFFERENTIABLE
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| anyhow!("unknown operation `{name}`"))?;
        inject_backward_fault(Some(kind));
    }
    let results = cmas_core::selfcheck::run_suite()?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<24} {:>10.3e}  < {:.0e}  {status}", r.name, r.max_rel_error, r.tolerance);
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e}");
    Ok(if ok { Outcome::Ok } else { Outcome::VerificationFailed })
}

pub fn train_intra(
    id: &str,
    latent_dim: usize,
    hidden: usize,
    data: &DataFlags,
    flags: &TrainFlags,
    out: &Path,
) -> Result<Outcome> {
    let cfg = config(flags)?;
    let (ds, inputs) = modality::load(id, &data.data, IdxPart::Train, data.limit)?;
    prepare_out(out)?;
    let mut ae = ModalityAutoEncoder::new(id, ds.dim(), latent_dim, &[hidden], cfg.seed)?;
    let report = fit_intra(&mut ae, &ds, &cfg)?;

    let mut m = RunManifest::new("train-intra");
    m.set("modality", id);
    m.set("latent_dim", latent_dim);
    m.set("hidden", hidden);
    m.set("train_items", ds.len());
    m.set("seed", cfg.seed);
    m.config(&cfg);
    m.set("checksum", &report.checksum);
    inputs.iter().for_each(|p| m.input(p));
    let mut reg = ModelRegistry::new();
    reg.insert_autoencoder(ae);
    write_file(out, &format!("ae-{id}.cmas"), &component_bytes(reg), &mut m)?;
    write_file(out, &format!("curves-intra-{id}.csv"), curves_csv(&report, None).as_bytes(), &mut m)?;
    m.write(out)?;
    if let Some(last) = report.curves.last() {
        println!("{id}: final loss {:.4} (recon {:.4}, kl {:.4})", last.total, last.recon, last.kl);
    }
    println!("trained in {:.1?}; checksum {}", report.wall_time, report.checksum);
    Ok(Outcome::Ok)
}

fn require_autoencoders(reg: &ModelRegistry, ids: &[&str]) -> Result<()> {
    for id in ids {
        if reg.autoencoder(id).is_err() {
            bail!("no auto-encoder for `{id}` in the models directories; run intra phase first");
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_cross(
    src: &str,
    tgt: &str,
    paired_fraction: Option<f64>,
    models: &[PathBuf],
    data: &DataFlags,
    flags: &TrainFlags,
    out: &Path,
) -> Result<Outcome> {
    let mut cfg = config(flags)?;
    if let Some(f) = paired_fraction {
        cfg.paired_fraction = f;
    }
    cfg.validate()?;
    let mut reg = load_registry(models)?;
    require_autoencoders(&reg, &[src, tgt])?;
    reg.set_autoencoders_frozen(true);
    let (ds_s, in_s) = modality::load(src, &data.data, IdxPart::Train, data.limit)?;
    let (ds_t, in_t) = modality::load(tgt, &data.data, IdxPart::Train, data.limit)?;
    prepare_out(out)?;

    let (ae_s, ae_t) = (reg.autoencoder(src)?, reg.autoencoder(tgt)?);
    let mut assoc = Associator::between(ae_s, ae_t, cfg.seed)?;
    let map = LabelMap::identity(ds_s.class_count().min(ds_t.class_count()));
    let sampler = PairingSampler::new(&ds_s, &ds_t, map, cfg.paired_fraction, cfg.seed)?;
    let report = fit_cross(&mut assoc, ae_s, ae_t, &sampler, &cfg)?;

    let mut m = RunManifest::new("train-cross");
    m.set("src", src);
    m.set("tgt", tgt);
    m.set("paired_fraction", format!("{:?}", cfg.paired_fraction));
    m.set("pairs", sampler.len());
    m.set("seed", cfg.seed);
    m.config(&cfg);
    m.set("checksum", &report.checksum);
    in_s.iter().chain(&in_t).for_each(|p| m.input(p));
    let mut one = ModelRegistry::new();
    one.insert_associator(assoc);
    write_file(out, &format!("assoc-{src}-to-{tgt}.cmas"), &component_bytes(one), &mut m)?;
    write_file(
        out,
        &format!("curves-cross-{src}-to-{tgt}.csv"),
        curves_csv(&report, Some(cfg.paired_fraction)).as_bytes(),
        &mut m,
    )?;
    m.write(out)?;
    if let Some(last) = report.curves.last() {
        println!("{src}->{tgt}: final loss {:.4} (recon {:.4}, kl {:.4})", last.total, last.recon, last.kl);
    }
    println!("{} pairs; trained in {:.1?}; checksum {}", sampler.len(), report.wall_time, report.checksum);
    Ok(Outcome::Ok)
}

pub fn train_recognizer(id: &str, data: &DataFlags, flags: &TrainFlags, out: &Path) -> Result<Outcome> {
    let cfg = config(flags)?;
    let (train, in_tr) = modality::load(id, &data.data, IdxPart::Train, data.limit)?;
    let (test, in_te) = modality::load(id, &data.data, IdxPart::Test, data.test_limit)?;
    prepare_out(out)?;
    let (net, acc) = fit_recognizer(&train, &test, &cfg)?;
    let mut m = RunManifest::new("train-recognizer");
    m.set("modality", id);
    m.set("train_items", train.len());
    m.set("test_items", test.len());
    m.set("test_accuracy", format!("{:?}", acc.value()));
    m.set("seed", cfg.seed);
    m.config(&cfg);
    in_tr.iter().chain(&in_te).for_each(|p| m.input(p));
    let mut reg = ModelRegistry::new();
    reg.insert_recognizer(net);
    write_file(out, &format!("recog-{id}.cmas"), &component_bytes(reg), &mut m)?;
    m.write(out)?;
    println!("{id}: held-out accuracy {:.4} ({}/{})", acc.value(), acc.correct, acc.n);
    Ok(Outcome::Ok)
}

fn path_mode(s: &str) -> Result<PathMode> {
    Ok(s.parse::<PathMode>()?)
}

pub fn generate(
    chain: &[String],
    input: &str,
    mode: &str,
    seed: u64,
    models: &[PathBuf],
    data: &DataFlags,
    out: &Path,
) -> Result<Outcome> {
    let mode = path_mode(mode)?;
    let reg = load_registry(models)?;
    let ids: Vec<&str> = chain.iter().map(String::as_str).collect();
    let path = AssociationPath::through(&reg, &ids)?;
    let (part, limit) = match input {
        "train" => (IdxPart::Train, data.limit),
        _ => (IdxPart::Test, data.test_limit),
    };
    let (ds, inputs) = modality::load(path.source_id(), &data.data, part, limit)?;
    let side = (ds.dim() as f64).sqrt() as usize;
    let tgt = reg.autoencoder(path.target_id())?;
    if side * side != tgt.input_dim() {
        bail!("`{}` items are not square images", path.target_id());
    }
    prepare_out(out)?;
    let mut r = rng::stream(seed, &format!("generate/{}", path.label()));
    let gen = generate_along(&path, reg.autoencoder(path.source_id())?, tgt, &ds.items, &mut r, mode)?;

    let labels = Tensor::vector(ds.labels.iter().map(|&l| l as f64).collect());
    let mut m = RunManifest::new("generate");
    m.set("path", path.label());
    m.set("input", input);
    m.set("items", ds.len());
    m.set("mode", mode);
    m.set("seed", seed);
    inputs.iter().for_each(|p| m.input(p));
    write_file(out, "generated.cmas", &checkpoint::encode([("generated", &gen), ("labels", &labels)]), &mut m)?;

    let by_class = ds.indices_by_class();
    let rows: Vec<Vec<Option<usize>>> = by_class
        .iter()
        .map(|idx| (0..PREVIEW_PER_CLASS).map(|k| idx.get(k).copied()).collect())
        .collect();
    write_file(out, "preview.pgm", &pgm::grid(&gen, &rows, side), &mut m)?;
    m.write(out)?;
    println!("{}: {} samples, preview {} rows", path.label(), ds.len(), rows.len());
    Ok(Outcome::Ok)
}

fn scenario(name: &str) -> Result<ScenarioSpec> {
    let mut spec = match name {
        "perm" => ScenarioSpec::pair("perm", "mnist", "mnist-perm"),
        "rotinv" => ScenarioSpec::pair("rotinv", "mnist", "mnist-rotinv"),
        "cascade" => {
            let mut s = ScenarioSpec::pair("cascade", "mnist", "mnist-perm");
            s.directions.truncate(3);
            s.directions.push("mnist->mnist-rotinv->mnist-perm".parse()?);
            s
        }
        other => match other.split(',').collect::<Vec<_>>()[..] {
            [a, b] => ScenarioSpec::pair(&format!("{a}+{b}"), a, b),
            _ => bail!("unknown scenario `{other}`; use perm, rotinv, cascade or `a,b`"),
        },
    };
    spec.paired_fraction = 1.0;
    Ok(spec)
}

fn recorded_fraction(models: &[PathBuf]) -> Option<f64> {
    let mut found: Vec<f64> = manifests_in(models)
        .into_iter()
        .filter(|m| m.iter().any(|(k, v)| k == "command" && v == "train-cross"))
        .filter_map(|m| m.into_iter().find(|(k, _)| k == "paired_fraction")?.1.parse().ok())
        .collect();
    found.dedup();
    match found[..] {
        [f] => Some(f),
        _ => None,
    }
}

fn print_summary(rows: &[MetricsRow]) {
    println!("{:<36} {:>9}", "direction", "accuracy");
    for (dir, acc) in summarize(rows) {
        println!("{dir:<36} {acc:>9.4}");
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    name: &str,
    seeds: &[u64],
    mode: &str,
    paired_fraction: Option<f64>,
    models: &[PathBuf],
    data: &DataFlags,
    out: &Path,
) -> Result<Outcome> {
    let mut spec = scenario(name)?;
    spec.path_mode = path_mode(mode)?;
    spec.paired_fraction = match paired_fraction.or_else(|| recorded_fraction(models)) {
        Some(f) => f,
        None => bail!("paired fraction is not recorded uniquely in the models directories; pass --paired-fraction"),
    };
    let reg = load_registry(models)?;
    let mut m = RunManifest::new("eval");
    let mut sets = BTreeMap::new();
    for dir in &spec.directions {
        if let Entry::Vacant(slot) = sets.entry(dir.source().to_string()) {
            let (ds, inputs) = modality::load(slot.key(), &data.data, IdxPart::Test, data.test_limit)?;
            inputs.iter().for_each(|p| m.input(p));
            slot.insert(ds);
        }
    }
    for dir in &spec.directions {
        if reg.recognizer(dir.target()).is_err() {
            bail!("no recognizer for `{}`; run train-recognizer first", dir.target());
        }
    }
    prepare_out(out)?;
    let rows = evaluate_scenario(&reg, &spec, &sets, seeds)?;
    write_metrics_file(&out.join("metrics.csv"), &rows)?;
    m.output("metrics.csv");
    m.set("scenario", &spec.id);
    m.set("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    m.set("mode", spec.path_mode);
    m.set("paired_fraction", format!("{:?}", spec.paired_fraction));
    m.set("rows", rows.len());
    m.write(out)?;
    print_summary(&rows);
    Ok(Outcome::Ok)
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    src: &str,
    tgt: &str,
    fractions: &[f64],
    seeds: &[u64],
    models: &[PathBuf],
    data: &DataFlags,
    flags: &TrainFlags,
    out: &Path,
) -> Result<Outcome> {
    let base = config(flags)?;
    let mut reg = load_registry(models)?;
    require_autoencoders(&reg, &[src, tgt])?;
    reg.set_autoencoders_frozen(true);
    let recog = reg
        .recognizer(tgt)
        .map_err(|_| anyhow!("no recognizer for `{tgt}`; run train-recognizer first"))?;
    let (ds_s, in_s) = modality::load(src, &data.data, IdxPart::Train, data.limit)?;
    let (ds_t, in_t) = modality::load(tgt, &data.data, IdxPart::Train, data.limit)?;
    let (test, in_te) = modality::load(src, &data.data, IdxPart::Test, data.test_limit)?;
    prepare_out(out)?;
    let (ae_s, ae_t) = (reg.autoencoder(src)?, reg.autoencoder(tgt)?);
    let map = LabelMap::identity(ds_s.class_count().min(ds_t.class_count()));

    let mut rows = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                paired_fraction: fraction,
                ..base.clone()
            };
            cfg.validate()?;
            let mut assoc = Associator::between(ae_s, ae_t, seed)?;
            let sampler = PairingSampler::new(&ds_s, &ds_t, map.clone(), fraction, seed)?;
            fit_cross(&mut assoc, ae_s, ae_t, &sampler, &cfg)?;
            let path = AssociationPath::new(vec![&assoc])?;
            let mut r = rng::stream(seed, "sweep/eval");
            let gen = generate_along(&path, ae_s, ae_t, &test.items, &mut r, PathMode::Mean)?;
            let acc = reconstruction_accuracy(&gen, &test.labels, recog)?;
            println!("fraction {fraction:<5} seed {seed}: {:.4}", acc.value());
            rows.push(MetricsRow {
                scenario: "sweep".into(),
                direction: Direction::cross(src, tgt).to_string(),
                seed,
                paired_fraction: fraction,
                n: acc.n,
                accuracy: acc.value(),
            });
        }
    }
    write_metrics_file(&out.join("sweep.csv"), &rows)?;
    let mut m = RunManifest::new("sweep");
    m.set("src", src);
    m.set("tgt", tgt);
    m.set("fractions", fractions.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(","));
    m.set("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    m.config(&base);
    in_s.iter().chain(&in_t).chain(&in_te).for_each(|p| m.input(p));
    m.output("sweep.csv");
    m.write(out)?;
    Ok(Outcome::Ok)
}
