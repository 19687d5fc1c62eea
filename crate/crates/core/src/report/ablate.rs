//! Multi-seed experiment driver for the component and matrix ablations.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::stats::{mean_sd, sign_test_greater};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::MatrixMode;
use crate::model::{AttentionKind, ResidualKind, Topology};
use crate::train::{evaluate, train, Distill, TrainConfig, TrainOutcome};

/// One axis changed relative to the base configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Delta {
    Topology(Topology),
    Matrix(MatrixMode),
    Attention(AttentionKind),
    Residual(ResidualKind),
    Distill(Distill),
}

impl Delta {
    pub fn axis(&self) -> &'static str {
        match self {
            Delta::Topology(_) => "topology",
            Delta::Matrix(_) => "matrix",
            Delta::Attention(_) => "attention",
            Delta::Residual(_) => "residual",
            Delta::Distill(_) => "distill",
        }
    }

    pub fn value(&self) -> String {
        match self {
            Delta::Topology(t) => t.name().into(),
            Delta::Matrix(m) => format!("{m:?}").to_lowercase(),
            Delta::Attention(a) => format!("{a:?}").to_lowercase(),
            Delta::Residual(r) => format!("{r:?}").to_lowercase(),
            Delta::Distill(d) => match d {
                Distill::None => "none".into(),
                Distill::Kl => "kl".into(),
                Distill::L2 => "l2".into(),
            },
        }
    }

    fn apply(&self, c: &mut TrainConfig) {
        match *self {
            Delta::Topology(t) => c.model.topology = t,
            Delta::Matrix(m) => c.model.matrix_mode = m,
            Delta::Attention(a) => c.model.attention = a,
            Delta::Residual(r) => c.model.residual = r,
            Delta::Distill(d) => c.loss = c.loss.with_distill(d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub id: String,
    pub deltas: Vec<Delta>,
}

impl ExperimentRow {
    fn new(id: &str, deltas: Vec<Delta>) -> Self {
        Self { id: id.into(), deltas }
    }

    /// The base configuration with this row's axes applied.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        for d in &self.deltas {
            d.apply(&mut c);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentMatrix {
    pub name: String,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentMatrix {
    /// Component ablation on the two-branch graph: attention kind, residual join and distillation.
    pub fn components() -> Self {
        let dcs = |att, res, dist| vec![Delta::Topology(Topology::Dcs), Delta::Matrix(MatrixMode::S), Delta::Attention(att), Delta::Residual(res), Delta::Distill(dist)];
        Self {
            name: "components".into(),
            rows: vec![
                ExperimentRow::new("1-baseline", vec![Delta::Topology(Topology::Baseline), Delta::Distill(Distill::None)]),
                ExperimentRow::new("2-csa", dcs(AttentionKind::Csa, ResidualKind::None, Distill::None)),
                ExperimentRow::new("3-sdpa-gap", dcs(AttentionKind::Sdpa, ResidualKind::Gap, Distill::None)),
                ExperimentRow::new("4-csa-gap", dcs(AttentionKind::Csa, ResidualKind::Gap, Distill::None)),
                ExperimentRow::new("5-csa-bp", dcs(AttentionKind::Csa, ResidualKind::Bp, Distill::None)),
                ExperimentRow::new("6-csa-vit", dcs(AttentionKind::Csa, ResidualKind::Vit, Distill::None)),
                ExperimentRow::new("7-csa-bp-kl", dcs(AttentionKind::Csa, ResidualKind::Bp, Distill::Kl)),
            ],
        }
    }

    /// Matrix ablation on the four-branch graph.
    pub fn matrices() -> Self {
        let qcs = |m| vec![Delta::Topology(Topology::Qcs), Delta::Matrix(m), Delta::Attention(AttentionKind::Csa), Delta::Residual(ResidualKind::Vit), Delta::Distill(Distill::None)];
        Self {
            name: "matrices".into(),
            rows: vec![
                ExperimentRow::new("s", qcs(MatrixMode::S)),
                ExperimentRow::new("d", qcs(MatrixMode::D)),
                ExperimentRow::new("sd", qcs(MatrixMode::SD)),
            ],
        }
    }

    /// Every variant the confound experiment compares, including the triplet control.
    pub fn confound() -> Self {
        let mut rows = vec![
            ExperimentRow::new("baseline", vec![Delta::Topology(Topology::Baseline), Delta::Distill(Distill::None)]),
        ];
        let c = Self::components();
        rows.push(ExperimentRow { id: "dcs-csa".into(), ..c.rows[3].clone() });
        rows.push(ExperimentRow { id: "dcs-sdpa".into(), ..c.rows[2].clone() });
        for r in Self::matrices().rows {
            rows.push(ExperimentRow { id: format!("qcs-{}", r.id), ..r });
        }
        rows.push(ExperimentRow::new(
            "triplet",
            vec![
                Delta::Topology(Topology::TripletControl),
                Delta::Matrix(MatrixMode::SD),
                Delta::Attention(AttentionKind::Csa),
                Delta::Residual(ResidualKind::Vit),
                Delta::Distill(Distill::None),
            ],
        ));
        Self { name: "confound".into(), rows }
    }

    pub fn baseline_only() -> Self {
        Self {
            name: "baseline".into(),
            rows: vec![ExperimentRow::new("baseline", vec![Delta::Topology(Topology::Baseline)])],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "components" => Ok(Self::components()),
            "matrices" => Ok(Self::matrices()),
            "confound" => Ok(Self::confound()),
            "baseline" => Ok(Self::baseline_only()),
            other => Err(Error::Config(format!(
                "unknown experiment matrix {other:?} (expected components, matrices, confound or baseline)"
            ))),
        }
    }
}

/// One seed of one row.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub seconds: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub outcome: Option<TrainOutcome>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RowResult {
    pub id: String,
    pub axes: Vec<(String, String)>,
    pub runs: Vec<RunResult>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl RowResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.test_acc).collect()
    }

    pub fn val_accuracies(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.val_acc).collect()
    }

    /// Test accuracy by seed, `None` where the run failed.
    pub fn by_seed(&self, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.seed == seed)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResults {
    pub matrix: String,
    pub seeds: Vec<u64>,
    pub dataset_digest: String,
    pub base_config: TrainConfig,
    pub rows: Vec<RowResult>,
}

/// Parallel workers for experiment sweeps: `CSIM_THREADS` when set, else rayon's default.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("CSIM_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("CSIM_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run_one(config: &TrainConfig, data: &Dataset) -> RunResult {
    let start = Instant::now();
    let outcome = train(config, &data.train).and_then(|o| evaluate(&o.model, &data.test).map(|m| (o, m)));
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((o, m)) => RunResult {
            seed: config.seed,
            test_acc: Some(m.accuracy),
            val_acc: o.best_val_acc,
            best_epoch: Some(o.best_epoch),
            epochs_run: Some(o.epochs_run),
            seconds,
            error: None,
            outcome: Some(o),
        },
        Err(e) => RunResult {
            seed: config.seed,
            test_acc: None,
            val_acc: None,
            best_epoch: None,
            epochs_run: None,
            seconds,
            error: Some(e.to_string()),
            outcome: None,
        },
    }
}

/// Train and evaluate every row for every seed. Failed runs are recorded, not propagated.
pub fn run_ablation(matrix: &ExperimentMatrix, base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<AblationResults> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let jobs: Vec<(usize, TrainConfig)> = matrix
        .rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            seeds.iter().map(move |&s| {
                let mut c = row.config(base);
                c.seed = s;
                (i, c)
            })
        })
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<(usize, RunResult)> =
        pool.install(|| jobs.par_iter().map(|(i, c)| (*i, run_one(c, data))).collect());

    let rows = matrix
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let runs: Vec<RunResult> = runs.iter().filter(|(j, _)| *j == i).map(|(_, r)| r.clone()).collect();
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.test_acc).collect();
            let (mean, sd) = mean_sd(&accs).unzip();
            RowResult {
                id: row.id.clone(),
                axes: row.deltas.iter().map(|d| (d.axis().to_string(), d.value())).collect(),
                runs,
                mean,
                sd,
            }
        })
        .collect();
    Ok(AblationResults {
        matrix: matrix.name.clone(),
        seeds: seeds.to_vec(),
        dataset_digest: super::dataset_digest(data),
        base_config: base.clone(),
        rows,
    })
}

pub const SUMMARY_HEADER: &str = "id,topology,matrix,attention,residual,distill,runs,failed,mean,sd";
pub const RUNS_HEADER: &str = "id,seed,test_acc,val_acc,best_epoch,epochs_run,seconds,error";

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, ToString::to_string)
}

impl AblationResults {
    pub fn row(&self, id: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// One line per row; empty cells mark axes the row leaves at the base value or runs that failed.
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            let axis = |name: &str| r.axes.iter().find(|(a, _)| a == name).map_or_else(String::new, |(_, v)| v.clone());
            let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.id,
                axis("topology"),
                axis("matrix"),
                axis("attention"),
                axis("residual"),
                axis("distill"),
                r.runs.len(),
                failed,
                opt(&r.mean),
                opt(&r.sd)
            ));
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = format!("{RUNS_HEADER}\n");
        for r in &self.rows {
            for x in &r.runs {
                let err = x.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
                s.push_str(&format!(
                    "{},{},{},{},{},{},{:.3},{}\n",
                    r.id,
                    x.seed,
                    opt(&x.test_acc),
                    opt(&x.val_acc),
                    opt(&x.best_epoch),
                    opt(&x.epochs_run),
                    x.seconds,
                    err
                ));
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    /// Writes `results.json`, `summary.csv` and `runs.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("results.json", self.to_json()),
            ("summary.csv", self.summary_csv()),
            ("runs.csv", self.runs_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Seed-paired one-sided sign test that row `a` beats row `b` on test accuracy.
    pub fn paired_sign_test(&self, a: &str, b: &str) -> Option<super::stats::SignTest> {
        let (ra, rb) = (self.row(a)?, self.row(b)?);
        let diffs: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|s| Some(ra.by_seed(*s)?.test_acc? - rb.by_seed(*s)?.test_acc?))
            .collect();
        Some(sign_test_greater(&diffs))
    }
}
