//! Block-timestep selection: unimodal grids, index neighborhoods, the local
//! fusion search and the exhaustive pair oracle.
//!
//! All work goes through an [`Evaluator`], which owns the feature cache and
//! the training counters. Grid cells and candidate pairs are evaluated
//! through [`Execution`]; results are merged by position, so the outcome
//! does not depend on scheduling.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Sample};
use crate::dataio::{label_matrix, DatasetRecord, InputProvider};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::Modality;
use crate::fusion::{self, FusionDims, FusionInputs, FusionStrategy};
use crate::metrics::{self, EvalResult};
use crate::optim::TrainConfig;
use crate::probe::{self, LossKind};
use crate::schedule::{NoiseMode, NoiseSchedule};

/// Ordered candidate timesteps and blocks for one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub timesteps: Vec<usize>,
    pub blocks: Vec<usize>,
}

impl SearchSpace {
    pub fn new(timesteps: Vec<usize>, blocks: Vec<usize>) -> Result<Self> {
        let space = Self { timesteps, blocks };
        space.check_lists()?;
        Ok(space)
    }

    fn check_lists(&self) -> Result<()> {
        for (name, list) in [("timesteps", &self.timesteps), ("blocks", &self.blocks)] {
            if list.is_empty() {
                return Err(Error::invalid(format!("search space has no {name}")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("search-space {name} must be strictly increasing: {list:?}")));
            }
        }
        Ok(())
    }

    /// Checks the lists against a backbone depth and a schedule length.
    pub fn validate(&self, depth: usize, steps: usize) -> Result<()> {
        self.check_lists()?;
        if self.blocks[0] == 0 || *self.blocks.last().unwrap() > depth {
            return Err(Error::OutOfRange {
                what: "search-space block",
                value: format!("{:?}", self.blocks),
                allowed: format!("[1, {depth}]"),
            });
        }
        if *self.timesteps.last().unwrap() > steps {
            return Err(Error::OutOfRange {
                what: "search-space timestep",
                value: format!("{:?}", self.timesteps),
                allowed: format!("[0, {steps}]"),
            });
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.timesteps.len() * self.blocks.len()
    }

    pub fn index_of(&self, t: usize, b: usize) -> Option<(usize, usize)> {
        let i = self.timesteps.iter().position(|&x| x == t)?;
        let j = self.blocks.iter().position(|&x| x == b)?;
        Some((i, j))
    }

    /// Every `(t, b)`, timestep-major.
    pub fn points(&self, modality: Modality) -> Vec<ConfigPoint> {
        self.timesteps
            .iter()
            .flat_map(|&t| self.blocks.iter().map(move |&b| ConfigPoint { modality, t, b }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub modality: Modality,
    pub t: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub t: usize,
    pub b: usize,
    pub result: EvalResult,
}

/// Full `A(t, b)` table of one modality, timestep-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub modality: Modality,
    pub space: SearchSpace,
    pub cells: Vec<GridCell>,
}

impl GridTable {
    /// Highest mAP; ties go to the smaller timestep, then the smaller block.
    pub fn argmax(&self) -> ConfigPoint {
        let best = self
            .cells
            .iter()
            .fold(None::<&GridCell>, |best, c| match best {
                Some(b) if b.result.map >= c.result.map => Some(b),
                _ => Some(c),
            })
            .expect("grid tables are never empty");
        ConfigPoint {
            modality: self.modality,
            t: best.t,
            b: best.b,
        }
    }

    pub fn get(&self, t: usize, b: usize) -> Option<&EvalResult> {
        self.cells.iter().find(|c| c.t == t && c.b == b).map(|c| &c.result)
    }

    /// mAP as a `|T| x |B|` matrix.
    pub fn map_matrix(&self) -> Array2<f64> {
        let (nt, nb) = (self.space.timesteps.len(), self.space.blocks.len());
        Array2::from_shape_fn((nt, nb), |(i, j)| self.cells[i * nb + j].result.map)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub image_evals: usize,
    pub text_evals: usize,
    pub fusion_evals: usize,
}

impl EvalCounts {
    pub fn total(&self) -> usize {
        self.image_evals + self.text_evals + self.fusion_evals
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub image: ConfigPoint,
    pub text: ConfigPoint,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedWinner {
    pub image: ConfigPoint,
    pub text: ConfigPoint,
    pub result: EvalResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnimodalOptima {
    pub image: ConfigPoint,
    pub text: ConfigPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhoods {
    pub radius: usize,
    pub image: Vec<ConfigPoint>,
    pub text: Vec<ConfigPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub strategy: FusionStrategy,
    pub exhaustive: bool,
    /// Image grid then text grid; empty for the exhaustive oracle.
    pub grids: Vec<GridTable>,
    pub optima: Option<UnimodalOptima>,
    pub neighborhoods: Option<Neighborhoods>,
    /// Every evaluated pair in enumeration order.
    pub candidates: Vec<PairScore>,
    pub winner: FusedWinner,
    pub eval_counts: EvalCounts,
}

impl SearchReport {
    pub fn grid(&self, modality: Modality) -> Option<&GridTable> {
        self.grids.iter().find(|g| g.modality == modality)
    }
}

/// Cached extraction of one `(modality, t, b)` cell for both splits.
#[derive(Debug, Clone)]
pub struct CellFeatures {
    pub train: Array2<f64>,
    pub val: Array2<f64>,
    pub train_tokens: Option<Array3<f64>>,
    pub val_tokens: Option<Array3<f64>>,
}

/// Everything needed to turn a grid coordinate into a validation score.
pub struct EvalContext<'a> {
    pub train: &'a [DatasetRecord],
    pub val: &'a [DatasetRecord],
    pub classes: usize,
    pub kind: LossKind,
    pub image_backbone: &'a Backbone,
    pub text_backbone: &'a Backbone,
    pub schedule: &'a NoiseSchedule,
    pub mode: NoiseMode,
    pub noise_seed: u64,
    pub inputs: &'a dyn InputProvider,
    pub train_cfg: TrainConfig,
    pub fusion_dims: FusionDims,
    pub threshold: f64,
    pub exec: Execution,
}

type CacheKey = (Modality, usize, usize, u64);

pub struct Evaluator<'a> {
    ctx: EvalContext<'a>,
    y_train: Array2<u8>,
    y_val: Array2<u8>,
    keep_tokens: bool,
    features: Mutex<HashMap<CacheKey, Arc<CellFeatures>>>,
    probes: Mutex<HashMap<CacheKey, EvalResult>>,
    image_evals: AtomicUsize,
    text_evals: AtomicUsize,
    fusion_evals: AtomicUsize,
    extractions: AtomicUsize,
}

impl<'a> Evaluator<'a> {
    /// `keep_tokens` retains unpooled features for cross attention.
    pub fn new(ctx: EvalContext<'a>, keep_tokens: bool) -> Result<Self> {
        if ctx.train.is_empty() || ctx.val.is_empty() {
            return Err(Error::invalid("search needs non-empty train and validation splits"));
        }
        let y_train = label_matrix(ctx.train, ctx.classes)?;
        let y_val = label_matrix(ctx.val, ctx.classes)?;
        probe::validate_labels(y_train.view(), ctx.kind)?;
        Ok(Self {
            ctx,
            y_train,
            y_val,
            keep_tokens,
            features: Mutex::new(HashMap::new()),
            probes: Mutex::new(HashMap::new()),
            image_evals: AtomicUsize::new(0),
            text_evals: AtomicUsize::new(0),
            fusion_evals: AtomicUsize::new(0),
            extractions: AtomicUsize::new(0),
        })
    }

    pub fn context(&self) -> &EvalContext<'a> {
        &self.ctx
    }

    pub fn train_labels(&self) -> ArrayView2<'_, u8> {
        self.y_train.view()
    }

    pub fn val_labels(&self) -> ArrayView2<'_, u8> {
        self.y_val.view()
    }

    pub fn counts(&self) -> EvalCounts {
        EvalCounts {
            image_evals: self.image_evals.load(Ordering::SeqCst),
            text_evals: self.text_evals.load(Ordering::SeqCst),
            fusion_evals: self.fusion_evals.load(Ordering::SeqCst),
        }
    }

    /// Number of distinct cells extracted so far.
    pub fn extractions(&self) -> usize {
        self.extractions.load(Ordering::SeqCst)
    }

    fn backbone(&self, modality: Modality) -> Result<&Backbone> {
        match modality {
            Modality::Image => Ok(self.ctx.image_backbone),
            Modality::Text => Ok(self.ctx.text_backbone),
            Modality::Fused => Err(Error::invalid("fused is not a backbone modality")),
        }
    }

    fn key(&self, p: ConfigPoint) -> CacheKey {
        (p.modality, p.t, p.b, self.ctx.noise_seed)
    }

    fn extract_split(&self, p: ConfigPoint, records: &[DatasetRecord]) -> Result<(Array2<f64>, Option<Array3<f64>>)> {
        let backbone = self.backbone(p.modality)?;
        let samples: Vec<Sample> = records
            .iter()
            .map(|r| self.ctx.inputs.sample(r, p.modality, p.t, p.b))
            .collect::<Result<_>>()?;
        let c = &self.ctx;
        let tokens = backbone.extract_tokens(&samples, p.t, p.b, c.schedule, c.mode, c.noise_seed, c.exec)?;
        let pooled = tokens.pooled()?.to_f64();
        Ok((pooled, self.keep_tokens.then(|| tokens.data.mapv(f64::from))))
    }

    /// Features of one cell for both splits, extracted once per key.
    pub fn features(&self, p: ConfigPoint) -> Result<Arc<CellFeatures>> {
        let key = self.key(p);
        if let Some(f) = self.features.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(f));
        }
        let (train, train_tokens) = self.extract_split(p, self.ctx.train)?;
        let (val, val_tokens) = self.extract_split(p, self.ctx.val)?;
        let cell = Arc::new(CellFeatures {
            train,
            val,
            train_tokens,
            val_tokens,
        });
        let mut cache = self.features.lock().expect("cache lock");
        let entry = cache.entry(key).or_insert_with(|| {
            self.extractions.fetch_add(1, Ordering::SeqCst);
            cell
        });
        Ok(Arc::clone(entry))
    }

    fn score(&self, scores: ArrayView2<f64>) -> Result<EvalResult> {
        let mut result = metrics::evaluate(scores, self.y_val.view(), self.ctx.threshold)?;
        if self.ctx.kind == LossKind::CeSinglelabel {
            let truth: Vec<usize> = self
                .y_val
                .rows()
                .into_iter()
                .map(|r| r.iter().position(|&v| v == 1).unwrap_or(0))
                .collect();
            result.top1 = Some(metrics::topk_accuracy(scores, &truth, 1)?);
            if self.ctx.classes >= 5 {
                result.top5 = Some(metrics::topk_accuracy(scores, &truth, 5)?);
            }
            result.error_rate = Some(metrics::error_rate(scores, &truth)?);
        }
        Ok(result)
    }

    /// Probe trained on the training split at `p`, scored on validation.
    pub fn eval_config(&self, p: ConfigPoint) -> Result<EvalResult> {
        let key = self.key(p);
        if let Some(r) = self.probes.lock().expect("probe lock").get(&key) {
            return Ok(r.clone());
        }
        let cell = self.features(p)?;
        let (model, _) = probe::train_probe_array(cell.train.view(), self.y_train.view(), self.ctx.kind, &self.ctx.train_cfg)?;
        let result = self.score(model.predict_array(cell.val.view())?.view())?;
        match p.modality {
            Modality::Image => self.image_evals.fetch_add(1, Ordering::SeqCst),
            _ => self.text_evals.fetch_add(1, Ordering::SeqCst),
        };
        self.probes.lock().expect("probe lock").insert(key, result.clone());
        Ok(result)
    }

    /// Jointly trained fusion of an image cell and a text cell, scored on
    /// validation.
    pub fn eval_pair(&self, image: ConfigPoint, text: ConfigPoint, strategy: FusionStrategy) -> Result<EvalResult> {
        if strategy.needs_tokens() && !self.keep_tokens {
            return Err(Error::invalid("cross attention needs an evaluator that keeps token features"));
        }
        let img = self.features(image)?;
        let txt = self.features(text)?;
        let train = split_inputs(&img, &txt, true);
        let (fusion_model, head, _) = fusion::train_fused(
            &train,
            self.y_train.view(),
            strategy,
            self.ctx.fusion_dims,
            self.ctx.kind,
            &self.ctx.train_cfg,
        )?;
        self.fusion_evals.fetch_add(1, Ordering::SeqCst);
        let val = split_inputs(&img, &txt, false);
        let fused = fusion_model.fuse(&val)?;
        self.score(head.predict_array(fused.view())?.view())
    }
}

fn split_inputs<'x>(img: &'x CellFeatures, txt: &'x CellFeatures, train: bool) -> FusionInputs<'x> {
    let pick = |c: &'x CellFeatures| if train { (&c.train, &c.train_tokens) } else { (&c.val, &c.val_tokens) };
    let (ip, it) = pick(img);
    let (tp, tt) = pick(txt);
    FusionInputs {
        img: ip.view(),
        txt: tp.view(),
        img_tokens: it.as_ref().map(|t| t.view()),
        txt_tokens: tt.as_ref().map(|t| t.view()),
    }
}

/// Evaluates every cell of `space` for one modality.
pub fn unimodal_grid(ev: &Evaluator, modality: Modality, space: &SearchSpace) -> Result<GridTable> {
    if modality == Modality::Fused {
        return Err(Error::invalid("unimodal grids are image or text"));
    }
    let points = space.points(modality);
    let results = ev.ctx.exec.try_map(&points, |&p| ev.eval_config(p))?;
    let cells = points
        .iter()
        .zip(results)
        .map(|(p, result)| GridCell { t: p.t, b: p.b, result })
        .collect();
    Ok(GridTable {
        modality,
        space: space.clone(),
        cells,
    })
}

/// Points whose timestep and block indices are each within `radius` of
/// `opt`'s, clipped to the grid; timestep-major order.
pub fn neighborhood(opt: ConfigPoint, space: &SearchSpace, radius: usize) -> Result<Vec<ConfigPoint>> {
    let (i, j) = space.index_of(opt.t, opt.b).ok_or_else(|| Error::OutOfRange {
        what: "configuration point",
        value: format!("({}, {})", opt.t, opt.b),
        allowed: format!("timesteps {:?} x blocks {:?}", space.timesteps, space.blocks),
    })?;
    let ti = i.saturating_sub(radius)..=(i + radius).min(space.timesteps.len() - 1);
    let bj = j.saturating_sub(radius)..=(j + radius).min(space.blocks.len() - 1);
    Ok(ti
        .flat_map(|a| {
            bj.clone().map(move |c| ConfigPoint {
                modality: opt.modality,
                t: space.timesteps[a],
                b: space.blocks[c],
            })
        })
        .collect())
}

fn pairs(images: &[ConfigPoint], texts: &[ConfigPoint]) -> Vec<(ConfigPoint, ConfigPoint)> {
    images.iter().flat_map(|&i| texts.iter().map(move |&t| (i, t))).collect()
}

/// Highest mAP; ties keep the earliest pair in enumeration order, which is
/// lexicographic in (image t, image b, text t, text b).
fn best_pair(evaluated: &[(ConfigPoint, ConfigPoint, EvalResult)]) -> FusedWinner {
    let mut best = &evaluated[0];
    for e in &evaluated[1..] {
        if e.2.map > best.2.map {
            best = e;
        }
    }
    FusedWinner {
        image: best.0,
        text: best.1,
        result: best.2.clone(),
    }
}

fn eval_pairs(
    ev: &Evaluator,
    candidates: Vec<(ConfigPoint, ConfigPoint)>,
    strategy: FusionStrategy,
) -> Result<(Vec<PairScore>, FusedWinner)> {
    let results = ev.ctx.exec.try_map(&candidates, |&(i, t)| ev.eval_pair(i, t, strategy))?;
    let evaluated: Vec<_> = candidates.into_iter().zip(results).map(|((i, t), r)| (i, t, r)).collect();
    let scores = evaluated
        .iter()
        .map(|(i, t, r)| PairScore {
            image: *i,
            text: *t,
            map: r.map,
        })
        .collect();
    Ok((scores, best_pair(&evaluated)))
}

/// Unimodal grids, then fused evaluation over the product of the two
/// optima's neighborhoods.
pub fn heuristic_search(
    ev: &Evaluator,
    image_space: &SearchSpace,
    text_space: &SearchSpace,
    strategy: FusionStrategy,
    radius: usize,
) -> Result<SearchReport> {
    let image_grid = unimodal_grid(ev, Modality::Image, image_space)?;
    let text_grid = unimodal_grid(ev, Modality::Text, text_space)?;
    let optima = UnimodalOptima {
        image: image_grid.argmax(),
        text: text_grid.argmax(),
    };
    let hood = Neighborhoods {
        radius,
        image: neighborhood(optima.image, image_space, radius)?,
        text: neighborhood(optima.text, text_space, radius)?,
    };
    let (candidates, winner) = eval_pairs(ev, pairs(&hood.image, &hood.text), strategy)?;
    Ok(SearchReport {
        strategy,
        exhaustive: false,
        grids: vec![image_grid, text_grid],
        optima: Some(optima),
        neighborhoods: Some(hood),
        candidates,
        winner,
        eval_counts: ev.counts(),
    })
}

/// Fused evaluation of every image cell against every text cell.
pub fn exhaustive_search(
    ev: &Evaluator,
    image_space: &SearchSpace,
    text_space: &SearchSpace,
    strategy: FusionStrategy,
    budget: usize,
) -> Result<SearchReport> {
    let needed = image_space.cells() * text_space.cells();
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let all = pairs(&image_space.points(Modality::Image), &text_space.points(Modality::Text));
    let (candidates, winner) = eval_pairs(ev, all, strategy)?;
    Ok(SearchReport {
        strategy,
        exhaustive: true,
        grids: Vec::new(),
        optima: None,
        neighborhoods: None,
        candidates,
        winner,
        eval_counts: ev.counts(),
    })
}

pub const HEATMAP_HEADER: &str = "modality,timestep,block,metric,value";

/// Long-format heatmap rows for every metric of every cell.
pub fn heatmap_csv(grids: &[GridTable]) -> String {
    let mut out = format!("{HEATMAP_HEADER}\n");
    for g in grids {
        for c in &g.cells {
            for (name, v) in c.result.named() {
                out.push_str(&format!("{},{},{},{},{}\n", g.modality, c.t, c.b, name, v));
            }
        }
    }
    out
}

/// One row per `(t, b)` with the headline metrics in percent.
pub fn grid_table_csv(grid: &GridTable) -> String {
    let mut out = format!("timestep,block,{}\n", metrics::TABLE_HEADER);
    for c in &grid.cells {
        out.push_str(&format!("{},{},{}\n", c.t, c.b, c.result.table_row()));
    }
    out
}
