//! Count metrics (MAE, RMSE, MDE), the K-shot adaptation protocol with
//! repeated random trials, and method comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use crate::par::*;
use serde::{Deserialize, Serialize};

use crate::density::{count, DensityMap, RoiMask};
use crate::error::{Error, Result};
use crate::metatrain::{finetune_prepared, PreparedScene};
use crate::nn::ModelParams;
use crate::scenes::split_scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mae: f64,
    pub rmse: f64,
    /// Mean of `|error| / gt` over images with a positive ground-truth count.
    pub mde: f64,
    pub n_images: usize,
    /// Images left out of the MDE average because their ground-truth count is zero.
    pub n_skipped_mde: usize,
}

/// Metrics from predicted and ground-truth counts. MDE is 0 when no image has
/// a positive ground-truth count.
pub fn metrics_from_counts(pred: &[f64], gt: &[f64]) -> Result<MetricTriple> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "metrics need equal-length nonempty lists ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut dev_sum = 0.0;
    let mut skipped = 0;
    for (&p, &y) in pred.iter().zip(gt) {
        let e = (p - y).abs();
        abs_sum += e;
        sq_sum += e * e;
        if y > 0.0 {
            dev_sum += e / y;
        } else {
            skipped += 1;
        }
    }
    let eligible = pred.len() - skipped;
    Ok(MetricTriple {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        mde: if eligible > 0 { dev_sum / eligible as f64 } else { 0.0 },
        n_images: pred.len(),
        n_skipped_mde: skipped,
    })
}

/// Counts each map (restricted to `roi` when given) and compares them.
pub fn metrics(preds: &[DensityMap], gts: &[DensityMap], roi: Option<&RoiMask>) -> Result<MetricTriple> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut pc = Vec::with_capacity(preds.len());
    let mut gc = Vec::with_capacity(gts.len());
    for (p, y) in preds.iter().zip(gts) {
        if (p.height(), p.width()) != (y.height(), y.width()) {
            return Err(Error::shape(
                "metrics",
                format!("prediction {}x{} vs ground truth {}x{}", p.height(), p.width(), y.height(), y.width()),
            ));
        }
        pc.push(count(p, roi)?);
        gc.push(count(y, roi)?);
    }
    metrics_from_counts(&pc, &gc)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub k: usize,
    pub steps: usize,
    pub trials: usize,
    pub alpha: f64,
    pub roi: bool,
    pub seed: u64,
    pub std_kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    /// Image indices used as shots.
    pub shots: Vec<usize>,
    pub metrics: MetricTriple,
    /// MAE on the held-out remainder after each step; entry 0 is before adaptation.
    pub mae_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub protocol: Protocol,
    pub trials: Vec<TrialResult>,
    pub mae: Summary,
    pub rmse: Summary,
    pub mde: Summary,
}

impl AdaptationReport {
    /// `trial,step,mae` rows with a header line.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("trial,step,mae\n");
        for (t, trial) in self.trials.iter().enumerate() {
            for (s, mae) in trial.mae_curve.iter().enumerate() {
                writeln!(out, "{t},{s},{mae}").unwrap();
            }
        }
        out
    }

    /// Mean MAE curve across trials.
    pub fn mean_curve(&self) -> Vec<f64> {
        let n = self.trials.len() as f64;
        let len = self.trials[0].mae_curve.len();
        (0..len)
            .map(|s| self.trials.iter().map(|t| t.mae_curve[s]).sum::<f64>() / n)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub k: usize,
    pub steps: usize,
    pub trials: usize,
    pub alpha: f64,
    pub roi: bool,
    pub seed: u64,
}

/// Evaluates `model` on the (prepared) scene's images not in `exclude`.
fn evaluate_on(
    model: &ModelParams,
    scene: &PreparedScene,
    eval_idx: &[usize],
    roi: Option<&RoiMask>,
) -> Result<MetricTriple> {
    let mut preds = Vec::with_capacity(eval_idx.len());
    let mut gts = Vec::with_capacity(eval_idx.len());
    for &i in eval_idx {
        let img = &scene.images[i];
        let p = model.predict_from_features(&img.features)?;
        let s = p.shape();
        preds.push(DensityMap::from_prediction(s[0], s[1], p.data())?);
        let t = img.target.shape();
        gts.push(DensityMap::from_vec(t[0], t[1], img.target.data().to_vec())?);
    }
    metrics(&preds, &gts, roi)
}

/// K-shot protocol: for each trial, draw K shots with the trial seed, fine-tune
/// the estimator for `steps` SGD steps, and measure on the rest of the scene
/// after every step.
pub fn run_adaptation_protocol(
    model: &ModelParams,
    scene: &PreparedScene,
    cfg: &ProtocolConfig,
) -> Result<AdaptationReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    if cfg.k == 0 || cfg.k >= scene.images.len() {
        return Err(Error::InvalidInput(format!(
            "scene has {} images, cannot adapt with K = {}",
            scene.images.len(),
            cfg.k
        )));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.trials).map(|_| seeder.random()).collect();
    let (roi_mask, roi_w) = if cfg.roi {
        (scene.roi_mask.as_ref(), scene.roi.as_ref())
    } else {
        (None, None)
    };

    let trials = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (shots, rest) = split_scene(scene.images.len(), cfg.k, &mut rng)?;
            let mut eval_idx = rest;
            eval_idx.sort_unstable();
            let mut curve = Vec::with_capacity(cfg.steps + 1);
            let mut last = None;
            finetune_prepared(model, &scene.select(&shots), cfg.steps, cfg.alpha, roi_w, |_, m| {
                let mt = evaluate_on(m, scene, &eval_idx, roi_mask)?;
                curve.push(mt.mae);
                last = Some(mt);
                Ok(())
            })?;
            Ok(TrialResult {
                seed,
                shots,
                metrics: last.expect("step 0 is always evaluated"),
                mae_curve: curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pick = |f: fn(&MetricTriple) -> f64| Summary::of(&trials.iter().map(|t| f(&t.metrics)).collect::<Vec<_>>());
    Ok(AdaptationReport {
        protocol: Protocol {
            k: cfg.k,
            steps: cfg.steps,
            trials: cfg.trials,
            alpha: cfg.alpha,
            roi: cfg.roi,
            seed: cfg.seed,
            std_kind: "population".into(),
        },
        mae: pick(|m| m.mae),
        rmse: pick(|m| m.rmse),
        mde: pick(|m| m.mde),
        trials,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    /// Scene id, or `None` for the across-scene average.
    pub scene: Option<u32>,
    /// Fine-tuning steps the method was evaluated with.
    pub steps: usize,
    pub mae: Summary,
    pub rmse: Summary,
    pub mde: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub k: usize,
    pub roi: bool,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn average(&self, method: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method && r.scene.is_none())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "K={} roi={} (mean ± population std over trials)",
            self.k, self.roi
        )
        .unwrap();
        writeln!(
            out,
            "{:<18} {:>8} {:>6} {:>20} {:>20} {:>20}",
            "method", "scene", "steps", "MAE", "RMSE", "MDE"
        )
        .unwrap();
        for r in &self.rows {
            let scene = r.scene.map_or_else(|| "avg".to_string(), |s| s.to_string());
            let cell = |s: &Summary| format!("{:.4} ± {:.4}", s.mean, s.std);
            writeln!(
                out,
                "{:<18} {:>8} {:>6} {:>20} {:>20} {:>20}",
                r.method,
                scene,
                r.steps,
                cell(&r.mae),
                cell(&r.rmse),
                cell(&r.mde)
            )
            .unwrap();
        }
        out
    }
}

/// Builds a table from `method -> [(scene id, report)]`. Each method gets one
/// row per scene followed by an average row (means of the per-scene means and stds).
pub fn compare_methods(reports: &BTreeMap<String, Vec<(u32, AdaptationReport)>>) -> Result<ComparisonTable> {
    let first = reports
        .values()
        .flat_map(|v| v.first())
        .next()
        .ok_or_else(|| Error::InvalidInput("no reports to compare".into()))?;
    let (k, roi) = (first.1.protocol.k, first.1.protocol.roi);
    let mut rows = Vec::new();
    for (method, per_scene) in reports {
        if per_scene.is_empty() {
            return Err(Error::InvalidInput(format!("method {method} has no reports")));
        }
        let steps = per_scene[0].1.protocol.steps;
        for (_, r) in per_scene {
            if r.protocol.k != k || r.protocol.roi != roi || r.protocol.steps != steps {
                return Err(Error::InvalidInput(format!("method {method}: reports do not share a protocol")));
            }
        }
        for (scene, r) in per_scene {
            rows.push(TableRow {
                method: method.clone(),
                scene: Some(*scene),
                steps,
                mae: r.mae,
                rmse: r.rmse,
                mde: r.mde,
            });
        }
        let avg = |f: fn(&AdaptationReport) -> Summary| {
            let n = per_scene.len() as f64;
            Summary {
                mean: per_scene.iter().map(|(_, r)| f(r).mean).sum::<f64>() / n,
                std: per_scene.iter().map(|(_, r)| f(r).std).sum::<f64>() / n,
            }
        };
        rows.push(TableRow {
            method: method.clone(),
            scene: None,
            steps,
            mae: avg(|r| r.mae),
            rmse: avg(|r| r.rmse),
            mde: avg(|r| r.mde),
        });
    }
    Ok(ComparisonTable { k, roi, rows })
}
