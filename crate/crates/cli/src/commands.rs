//! Command implementations. Every command validates its whole configuration
//! and checks its inputs before writing anything, and writes only under the
//! output directory.
//!
//! Output layout:
//!
//! ```text
//! <out>/data/{train,test}/scene_<id>/...   generated dataset (unless dataset.path is set)
//! <out>/models/<model>.ckpt                pretrained, maml, reptile
//! <out>/logs/<command>.log                 per-epoch / per-iteration losses
//! <out>/reports/<method>/k<K>.json         per-scene adaptation reports + average
//! <out>/reports/<method>/k<K>/scene_<id>.csv   trial,step,mae
//! <out>/tables/k<K>.{txt,json}             every evaluated method side by side
//! <out>/curves/k<K>/scene_<id>.csv         step,<method>... mean MAE per step
//! ```
//!
//! Runs with `--roi` use `k<K>-roi` in place of `k<K>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use metacount::eval::{compare_methods, run_adaptation_protocol, AdaptationReport, Summary};
use metacount::metatrain::prepare;
use metacount::nn::{load_checkpoint, save_checkpoint, ModelParams};
use metacount::scenes::{generate_benchmark, load_dataset, write_dataset, Benchmark};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::{self, protocol_config, Method, ModelKind};
use crate::CliError;

pub struct Layout {
    root: PathBuf,
    data: PathBuf,
    roi: bool,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let root = cfg.output.dir.clone();
        let data = cfg.dataset.path.clone().unwrap_or_else(|| root.join("data"));
        Layout { root, data, roi: cfg.eval.roi }
    }

    fn tag(&self, k: usize) -> String {
        if self.roi {
            format!("k{k}-roi")
        } else {
            format!("k{k}")
        }
    }

    pub fn data(&self) -> &Path {
        &self.data
    }

    pub fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{}.ckpt", kind.name()))
    }

    pub fn log(&self, command: &str) -> PathBuf {
        self.root.join("logs").join(format!("{command}.log"))
    }

    pub fn report(&self, method: Method, k: usize) -> PathBuf {
        self.root.join("reports").join(method.name()).join(format!("{}.json", self.tag(k)))
    }

    pub fn report_curve(&self, method: Method, k: usize, scene: u32) -> PathBuf {
        self.root.join("reports").join(method.name()).join(self.tag(k)).join(format!("scene_{scene}.csv"))
    }

    pub fn table(&self, k: usize, ext: &str) -> PathBuf {
        self.root.join("tables").join(format!("{}.{ext}", self.tag(k)))
    }

    pub fn curve(&self, k: usize, scene: u32) -> PathBuf {
        self.root.join("curves").join(self.tag(k)).join(format!("scene_{scene}.csv"))
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_benchmark(cfg: &ExperimentConfig, layout: &Layout) -> Result<Benchmark, CliError> {
    let dir = layout.data();
    if !dir.join("train").is_dir() || !dir.join("test").is_dir() {
        return Err(CliError::Missing(format!(
            "no dataset at {} (expected train/ and test/); run `metacount generate` first or set dataset.path",
            dir.display()
        )));
    }
    let (sigma, s) = (cfg.dataset.synthetic.gt_sigma, cfg.model.downsample());
    Ok(Benchmark {
        train: load_dataset(&dir.join("train"), sigma, s)?,
        test: load_dataset(&dir.join("test"), sigma, s)?,
    })
}

fn require_checkpoint(layout: &Layout, kind: ModelKind) -> Result<PathBuf, CliError> {
    let path = layout.checkpoint(kind);
    if !path.is_file() {
        return Err(CliError::Missing(format!(
            "missing {} checkpoint {}; run `metacount {}` first",
            kind.name(),
            path.display(),
            kind.command()
        )));
    }
    Ok(path)
}

pub fn generate(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    if cfg.dataset.path.is_some() {
        return Err(CliError::Usage("dataset.path is set; generate only writes synthetic data under the output directory".into()));
    }
    let layout = Layout::new(cfg);
    let bench = generate_benchmark(&cfg.dataset.synthetic, cfg.seed, cfg.model.downsample())?;
    let dir = layout.data();
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_dataset(&dir.join("train"), &bench.train)?;
    write_dataset(&dir.join("test"), &bench.test)?;
    Ok(format!(
        "wrote {} training and {} test scenes to {}",
        bench.train.len(),
        bench.test.len(),
        dir.display()
    ))
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let bench = load_benchmark(cfg, &layout)?;
    let (model, losses) = pipeline::pretrain(cfg, &bench.train)?;
    let n_images: usize = bench.train.iter().map(|s| s.images.len()).sum();
    let mut log = format!(
        "# pretrain images={n_images} epochs={} batch={} lr={} seed={}\nepoch,loss\n",
        cfg.train.pretrain_epochs, cfg.train.pretrain_batch, cfg.train.pretrain_lr, cfg.seed
    );
    for (i, l) in losses.iter().enumerate() {
        writeln!(log, "{},{l}", i + 1).unwrap();
    }
    save(&layout, ModelKind::Pretrained, &model, "pretrain", &log)
}

fn save(layout: &Layout, kind: ModelKind, model: &ModelParams, command: &str, log: &str) -> Result<String, CliError> {
    let path = layout.checkpoint(kind);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_checkpoint(&path, model)?;
    write(&layout.log(command), log)?;
    Ok(format!("wrote {} and {}", path.display(), layout.log(command).display()))
}

/// `metatrain` (MAML) or `reptile`, both starting from the pretrained checkpoint.
pub fn meta_learn(cfg: &ExperimentConfig, kind: ModelKind) -> Result<String, CliError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let init = load_checkpoint(&require_checkpoint(&layout, ModelKind::Pretrained)?)?;
    let bench = load_benchmark(cfg, &layout)?;
    let (model, history) = pipeline::meta_learn(cfg, kind, &init, &bench.train)?;
    let t = &cfg.train;
    let mut log = match kind {
        ModelKind::Maml => format!(
            "# metatrain alpha={} beta={} inner_steps={} meta_batch={} k={} second_order={} seed={}\n",
            t.alpha, t.beta, t.inner_steps, t.meta_batch, t.k, t.second_order, cfg.seed
        ),
        _ => format!(
            "# reptile alpha={} rate={} inner_steps={} k={} seed={}\n",
            t.alpha, t.reptile_rate, t.reptile_inner_steps, t.k, cfg.seed
        ),
    };
    log.push_str("iteration,loss\n");
    for (it, l) in &history {
        writeln!(log, "{it},{l}").unwrap();
    }
    save(&layout, kind, &model, kind.command(), &log)
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneReport {
    scene: u32,
    report: AdaptationReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct MethodReport {
    method: String,
    k: usize,
    scenes: Vec<SceneReport>,
    /// Means over scenes of the per-scene means and standard deviations.
    average: BTreeMap<String, Summary>,
}

fn selected_methods(method: Option<Method>, adapting_only: bool) -> Vec<Method> {
    match method {
        Some(m) => vec![m],
        None => Method::ALL.into_iter().filter(|m| !adapting_only || m.adapts()).collect(),
    }
}

fn load_models(layout: &Layout, methods: &[Method]) -> Result<BTreeMap<ModelKind, ModelParams>, CliError> {
    let mut paths = BTreeMap::new();
    for m in methods {
        paths.insert(m.model(), require_checkpoint(layout, m.model())?);
    }
    paths.into_iter().map(|(k, p)| Ok((k, load_checkpoint(&p)?))).collect()
}

fn check_k(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<(), CliError> {
    let max_k = cfg.eval.k.iter().copied().max().unwrap_or(0);
    if let Some(s) = bench.test.iter().find(|s| s.images.len() <= max_k) {
        return Err(CliError::Usage(format!(
            "test scene {} has {} images; K = {max_k} leaves nothing to evaluate on",
            s.id,
            s.images.len()
        )));
    }
    if cfg.eval.roi {
        if let Some(s) = bench.test.iter().find(|s| s.roi.is_none()) {
            return Err(CliError::Usage(format!("eval.roi is set but test scene {} has no ROI", s.id)));
        }
    }
    Ok(())
}

pub fn evaluate(cfg: &ExperimentConfig, method: Option<Method>) -> Result<String, CliError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let methods = selected_methods(method, false);
    let models = load_models(&layout, &methods)?;
    let bench = load_benchmark(cfg, &layout)?;
    check_k(cfg, &bench)?;

    let mut summary = String::new();
    for &k in &cfg.eval.k {
        for &m in &methods {
            let reports = pipeline::evaluate_method(cfg, &models[&m.model()], &bench.test, m, k)?;
            for (scene, r) in &reports {
                write(&layout.report_curve(m, k, *scene), &r.curve_csv())?;
            }
            let table = compare_methods(&BTreeMap::from([(m.name().to_string(), reports.clone())]))?;
            let avg = table.average(m.name()).expect("table has an average row");
            writeln!(summary, "K={k} {:<16} MAE {:.4} RMSE {:.4} MDE {:.4}", m.name(), avg.mae.mean, avg.rmse.mean, avg.mde.mean)
                .unwrap();
            let file = MethodReport {
                method: m.name().to_string(),
                k,
                scenes: reports.into_iter().map(|(scene, report)| SceneReport { scene, report }).collect(),
                average: BTreeMap::from([("mae".into(), avg.mae), ("rmse".into(), avg.rmse), ("mde".into(), avg.mde)]),
            };
            write(&layout.report(m, k), &(serde_json::to_string_pretty(&file).expect("report serializes") + "\n"))?;
        }
        rebuild_table(&layout, k)?;
    }
    Ok(summary)
}

/// Regenerates `tables/k<K>` from every method report present for K.
fn rebuild_table(layout: &Layout, k: usize) -> Result<(), CliError> {
    let mut all = BTreeMap::new();
    for m in Method::ALL {
        let path = layout.report(m, k);
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let file: MethodReport = serde_json::from_str(&text).map_err(|e| {
            CliError::Runtime(metacount::Error::InvalidInput(format!("{}: {e}", path.display())))
        })?;
        all.insert(m.name().to_string(), file.scenes.into_iter().map(|s| (s.scene, s.report)).collect());
    }
    let table = compare_methods(&all)?;
    write(&layout.table(k, "txt"), &table.to_text())?;
    write(&layout.table(k, "json"), &(table.to_json() + "\n"))
}

pub fn curves(cfg: &ExperimentConfig, method: Option<Method>) -> Result<String, CliError> {
    cfg.validate()?;
    if method.is_some_and(|m| !m.adapts()) {
        return Err(CliError::Usage(format!("{} does not adapt, so it has no learning curve", method.unwrap())));
    }
    let layout = Layout::new(cfg);
    let methods = selected_methods(method, true);
    let models = load_models(&layout, &methods)?;
    let bench = load_benchmark(cfg, &layout)?;
    check_k(cfg, &bench)?;
    let scenes: Vec<_> = if cfg.eval.curve_scenes.is_empty() {
        bench.test.iter().collect()
    } else {
        cfg.eval
            .curve_scenes
            .iter()
            .map(|id| {
                bench.test.iter().find(|s| s.id == *id).ok_or_else(|| {
                    CliError::Usage(format!("eval.curve_scenes: no test scene with id {id}"))
                })
            })
            .collect::<Result<_, _>>()?
    };
    // features depend only on the (shared, frozen) extractor
    let prepared = prepare(&models[&methods[0].model()], &scenes.iter().map(|s| (*s).clone()).collect::<Vec<_>>())?;

    let mut written = 0;
    for &k in &cfg.eval.k {
        for (scene, p) in scenes.iter().zip(&prepared) {
            let mut columns = Vec::with_capacity(methods.len());
            for &m in &methods {
                let r = run_adaptation_protocol(&models[&m.model()], p, &protocol_config(cfg, m, scene.id, k))?;
                columns.push(r.mean_curve());
            }
            let mut csv = String::from("step");
            for m in &methods {
                write!(csv, ",{}", m.name()).unwrap();
            }
            csv.push('\n');
            for step in 0..=cfg.eval.steps {
                write!(csv, "{step}").unwrap();
                for c in &columns {
                    write!(csv, ",{}", c[step]).unwrap();
                }
                csv.push('\n');
            }
            write(&layout.curve(k, scene.id), &csv)?;
            written += 1;
        }
    }
    Ok(format!("wrote {written} curve tables under {}", layout.root.join("curves").display()))
}
