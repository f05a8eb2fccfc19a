// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations. Each one resolves the run configuration,
//! writes `config.resolved`, then calls into the library.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use somnus::diary::{descriptive_stats, parse_dataset, save_dataset, UserHistory, WINDOW_STEPS};
use somnus::evalx::{
    self, calibration_report, compare_recommenders, effectiveness_curve, first_order_saliency,
    flip_test, score_users, second_order_interactions, shuffle_test, EffectivenessCurve, Scoring,
};
use somnus::linear::LinearQualityModel;
use somnus::qnet::{self, cross_validate, holdout_split, QualityNet, Variant};
use somnus::recommend::{
    recommend_best_day, recommend_best_neighbourhood, recommend_gradient_linear,
    recommend_gradient_nn, write_recommendations, AdvisableSet, RecommendError, Recommendation,
    RecommenderKind,
};
use somnus::stats;
use somnus::synthgen::{generate_population, OracleModel};

use crate::plot::{self, Series};
use crate::{AdviceArgs, Cli, Command, ModelArgs, RunConfig, ScoringChoice, Subset, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Resolves configuration and runs the selected subcommand.
pub fn execute(cli: Cli) -> Result<()> {
    let cfg = configure(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("building thread pool")?;
    pool.install(|| {
        let ctx = Ctx { cfg };
        match cli.command {
            Command::Synth { .. } => ctx.synth(),
            Command::Stats => ctx.stats(),
            Command::Train { .. } => ctx.train(),
            Command::Cv { .. } => ctx.cv(),
            Command::Ablate { arms, .. } => ctx.ablate(&arms),
            Command::TrainLinear => ctx.train_linear(),
            Command::Recommend {
                model, recommender, ..
            } => ctx.recommend(&model, &recommender.0),
            Command::Evaluate {
                model, recommender, ..
            } => ctx.evaluate(&model, &recommender.0),
            Command::ShuffleTest {
                model, recommender, ..
            } => ctx.shuffle(&model, &recommender.0),
            Command::FlipTest { model, .. } => ctx.flip(&model),
            Command::Calibrate { model } => ctx.calibrate(&model),
            Command::Explain { model } => ctx.explain(&model),
            Command::Explain2 { model, .. } => ctx.explain2(&model),
        }
    })
}

fn apply_advice(cfg: &mut RunConfig, advice: &AdviceArgs) {
    if let Some(v) = advice.variant {
        cfg.recommend.variant = v;
    }
    if let Some(s) = advice.scoring {
        cfg.evaluation.scoring = s;
    }
}

fn configure(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out.clone_from(o);
    }
    if let Some(d) = &cli.data {
        cfg.data = Some(d.clone());
    }
    cfg.plot |= cli.plot;
    let model_args = match &cli.command {
        Command::Synth { users } => {
            if let Some(n) = users {
                cfg.generator.n_users = *n;
            }
            None
        }
        Command::Stats | Command::TrainLinear => None,
        Command::Train {
            epochs,
            arch,
            holdout,
        } => {
            if let Some(e) = epochs {
                cfg.network.epochs = *e;
            }
            if let Some(a) = arch {
                cfg.network.variant = *a;
            }
            if let Some(h) = holdout {
                cfg.evaluation.holdout = *h;
            }
            None
        }
        Command::Cv {
            folds,
            epochs,
            arch,
        } => {
            if let Some(f) = folds {
                cfg.evaluation.folds = *f;
            }
            if let Some(e) = epochs {
                cfg.network.epochs = *e;
            }
            if let Some(a) = arch {
                cfg.network.variant = *a;
            }
            None
        }
        Command::Ablate { folds, epochs, .. } => {
            if let Some(f) = folds {
                cfg.evaluation.folds = *f;
            }
            if let Some(e) = epochs {
                cfg.network.epochs = *e;
            }
            None
        }
        Command::Recommend { model, variant, .. } => {
            if let Some(v) = variant {
                cfg.recommend.variant = *v;
            }
            Some(model)
        }
        Command::Evaluate { model, advice, .. } | Command::ShuffleTest { model, advice, .. } => {
            apply_advice(&mut cfg, advice);
            Some(model)
        }
        Command::FlipTest {
            model,
            advice,
            replicates,
        } => {
            apply_advice(&mut cfg, advice);
            if let Some(r) = replicates {
                cfg.evaluation.replicates = *r;
            }
            Some(model)
        }
        Command::Calibrate { model } | Command::Explain { model } => Some(model),
        Command::Explain2 {
            model,
            max_users,
            probe_step,
        } => {
            if let Some(m) = max_users {
                cfg.evaluation.max_users = *m;
            }
            if let Some(h) = probe_step {
                cfg.evaluation.probe_step = *h;
            }
            Some(model)
        }
    };
    if let Some(m) = model_args.and_then(|m| m.model.as_ref()) {
        cfg.model = Some(m.clone());
    }
    if cfg.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    if !(0.0..1.0).contains(&cfg.evaluation.holdout) {
        return Err(usage(format!(
            "holdout {} must lie in [0, 1)",
            cfg.evaluation.holdout
        )));
    }
    if !(cfg.evaluation.probe_step > 0.0) {
        return Err(usage("probe step must be positive"));
    }
    let cfg = cfg.resolve();
    cfg.write_resolved()?;
    Ok(cfg)
}

/// A trained network and the user ids it must not be evaluated on, if known.
struct Model {
    net: QualityNet,
    test_ids: Option<BTreeSet<String>>,
}

struct Population {
    histories: Vec<UserHistory>,
    oracle: Option<OracleModel>,
}

struct Ctx {
    cfg: RunConfig,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn scoring_modes(choice: ScoringChoice, has_oracle: bool, seed: u64) -> Result<Vec<Scoring>> {
    let need_oracle = |s: Scoring| -> Result<Vec<Scoring>> {
        if has_oracle {
            Ok(vec![s])
        } else {
            Err(usage(format!(
                "scoring '{}' needs an oracle.json next to the data",
                s.name()
            )))
        }
    };
    match choice {
        ScoringChoice::All if has_oracle => Ok(vec![
            Scoring::Reported,
            Scoring::OracleActual,
            Scoring::Counterfactual,
            Scoring::SimulatedReport { seed },
        ]),
        ScoringChoice::All | ScoringChoice::Reported => Ok(vec![Scoring::Reported]),
        ScoringChoice::OracleActual => need_oracle(Scoring::OracleActual),
        ScoringChoice::Counterfactual => need_oracle(Scoring::Counterfactual),
        ScoringChoice::SimulatedReport => need_oracle(Scoring::SimulatedReport { seed }),
    }
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn write_csv<S: AsRef<str>>(&self, name: &str, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
        let mut w =
            csv::Writer::from_path(self.path(name)).with_context(|| format!("writing {name}"))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(AsRef::as_ref))?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("writing {name}"))
    }

    fn write_with<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(fs::File) -> Result<()>,
    {
        let file = fs::File::create(self.path(name)).with_context(|| format!("creating {name}"))?;
        f(file)
    }

    fn svg(&self, name: &str, content: impl FnOnce() -> String) -> Result<()> {
        if self.cfg.plot {
            fs::write(self.path(name), content()).with_context(|| format!("writing {name}"))?;
        }
        Ok(())
    }

    fn population(&self) -> Result<Population> {
        match &self.cfg.data {
            Some(path) => {
                let (csv, dir) = if path.is_dir() {
                    (path.join("diary.csv"), path.clone())
                } else {
                    (
                        path.clone(),
                        path.parent().map(Path::to_path_buf).unwrap_or_default(),
                    )
                };
                let histories =
                    parse_dataset(&csv).with_context(|| format!("reading {}", csv.display()))?;
                let oracle_path = dir.join("oracle.json");
                let oracle = if oracle_path.is_file() {
                    Some(
                        OracleModel::load(&oracle_path)
                            .with_context(|| format!("reading {}", oracle_path.display()))?,
                    )
                } else {
                    None
                };
                Ok(Population { histories, oracle })
            }
            None => {
                let (histories, oracle) = generate_population(&self.cfg.generator)?;
                Ok(Population {
                    histories,
                    oracle: Some(oracle),
                })
            }
        }
    }

    fn split(&self, histories: &[UserHistory]) -> Result<BTreeSet<String>> {
        let mask = holdout_split(histories.len(), self.cfg.evaluation.holdout, self.cfg.seed)?;
        Ok(histories
            .iter()
            .zip(mask)
            .filter(|(_, t)| *t)
            .map(|(h, _)| h.user_id.clone())
            .collect())
    }

    fn model(&self, pop: &Population) -> Result<Model> {
        if let Some(dir) = &self.cfg.model {
            let net = QualityNet::load(dir)
                .with_context(|| format!("loading model from {}", dir.display()))?;
            let split_path = dir.join("split.csv");
            let test_ids = if split_path.is_file() {
                let mut r = csv::Reader::from_path(&split_path)?;
                let mut ids = BTreeSet::new();
                for rec in r.records() {
                    let rec = rec?;
                    if rec.get(1) == Some("test") {
                        ids.insert(rec.get(0).unwrap_or_default().to_string());
                    }
                }
                Some(ids)
            } else {
                None
            };
            return Ok(Model { net, test_ids });
        }
        let test = self.split(&pop.histories)?;
        let train: Vec<UserHistory> = pop
            .histories
            .iter()
            .filter(|h| !test.contains(&h.user_id))
            .cloned()
            .collect();
        let (net, _) = QualityNet::train(&self.cfg.network, &train)?;
        Ok(Model {
            net,
            test_ids: Some(test),
        })
    }

    fn subset<'a>(
        &self,
        pop: &'a Population,
        model: &Model,
        which: Option<Subset>,
    ) -> Result<Vec<&'a UserHistory>> {
        let which = which.unwrap_or(if model.test_ids.is_some() {
            Subset::Test
        } else {
            Subset::All
        });
        let out: Vec<&UserHistory> = match (which, &model.test_ids) {
            (Subset::All, _) => pop.histories.iter().collect(),
            (Subset::Test, Some(ids)) => pop
                .histories
                .iter()
                .filter(|h| ids.contains(&h.user_id))
                .collect(),
            (Subset::Train, Some(ids)) => pop
                .histories
                .iter()
                .filter(|h| !ids.contains(&h.user_id))
                .collect(),
            (_, None) => return Err(usage("the model has no split.csv; use --subset all")),
        };
        if out.is_empty() {
            bail!("the selected subset has no users");
        }
        Ok(out)
    }

    fn training_pool(pop: &Population, model: &Model) -> Vec<UserHistory> {
        match &model.test_ids {
            Some(ids) => pop
                .histories
                .iter()
                .filter(|h| !ids.contains(&h.user_id))
                .cloned()
                .collect(),
            None => pop.histories.clone(),
        }
    }

    fn linear_model(&self, args: &ModelArgs, pool: &[UserHistory]) -> Result<LinearQualityModel> {
        match &args.linear {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok(serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?)
            }
            None => Ok(LinearQualityModel::fit(pool, &Default::default())?),
        }
    }

    /// Recommendations of `kind` for `users`, with the users they cover
    /// (best-day skips users who never reported quality). `Ok(None)` when a
    /// population recommender lacks enough users and `strict` is off.
    #[allow(clippy::too_many_arguments)]
    fn recommendations<'a>(
        &self,
        kind: RecommenderKind,
        model: &Model,
        args: &ModelArgs,
        pop: &Population,
        users: &[&'a UserHistory],
        advisable: &AdvisableSet,
        strict: bool,
    ) -> Result<Option<(Vec<Recommendation>, Vec<&'a UserHistory>)>> {
        let pool = Self::training_pool(pop, model);
        Ok(Some(match kind {
            RecommenderKind::GradientNn => (
                recommend_gradient_nn(&model.net, users, advisable, &self.cfg.recommend.ascent)?,
                users.to_vec(),
            ),
            RecommenderKind::GradientLinear => {
                let lm = self.linear_model(args, &pool)?;
                let recs = users
                    .iter()
                    .map(|h| {
                        recommend_gradient_linear(
                            &lm,
                            h,
                            advisable,
                            self.cfg.recommend.ascent.clamp,
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (recs, users.to_vec())
            }
            RecommenderKind::BestNeighbourhood => {
                match recommend_best_neighbourhood(&pool, advisable, self.cfg.seed) {
                    Ok(best) => (
                        users
                            .iter()
                            .map(|h| best.recommendation_for(&h.user_id))
                            .collect(),
                        users.to_vec(),
                    ),
                    Err(e @ RecommendError::PopulationTooSmall { .. }) if !strict => {
                        eprintln!("note: skipping best-neighbourhood: {e}");
                        return Ok(None);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            RecommenderKind::BestDay => {
                let covered: Vec<&UserHistory> = users
                    .iter()
                    .copied()
                    .filter(|h| h.records.iter().any(|r| r.quality.is_some()))
                    .collect();
                let recs = covered
                    .iter()
                    .map(|h| recommend_best_day(h, advisable))
                    .collect::<Result<Vec<_>, _>>()?;
                (recs, covered)
            }
        }))
    }

    fn write_recs(
        &self,
        kind: RecommenderKind,
        recs: &[Recommendation],
        users: &[&UserHistory],
        adv: &AdvisableSet,
    ) -> Result<()> {
        let owned: Vec<UserHistory> = users.iter().map(|h| (*h).clone()).collect();
        self.write_with(&format!("recommendations_{}.csv", kind.name()), |f| {
            Ok(write_recommendations(f, recs, &owned, adv)?)
        })
    }

    fn write_curve_file(&self, name: &str, curve: &EffectivenessCurve) -> Result<()> {
        self.write_with(name, |f| Ok(evalx::write_curve(f, curve)?))
    }

    // ---- data ------------------------------------------------------------

    fn synth(&self) -> Result<()> {
        fs::create_dir_all(&self.cfg.out)?;
        let (histories, oracle) = generate_population(&self.cfg.generator)?;
        save_dataset(&self.path("diary.csv"), &histories)?;
        oracle.save(&self.path("oracle.json"))?;
        Ok(())
    }

    fn stats(&self) -> Result<()> {
        let pop = self.population()?;
        let s = descriptive_stats(&pop.histories);
        let rows: Vec<Vec<String>> = s
            .variables
            .iter()
            .map(|v| {
                vec![
                    v.name.clone(),
                    v.unit.clone(),
                    v.present.to_string(),
                    fmt_opt(v.mean),
                    fmt_opt(v.p10),
                    fmt_opt(v.p90),
                    v.positives.map(|p| p.to_string()).unwrap_or_default(),
                    fmt_opt(v.proportion),
                ]
            })
            .collect();
        self.write_csv(
            "stats.csv",
            &[
                "variable",
                "unit",
                "present",
                "mean",
                "p10",
                "p90",
                "positives",
                "proportion",
            ],
            &rows,
        )?;
        self.write_json("stats.json", &s)
    }

    // ---- network ---------------------------------------------------------

    fn train(&self) -> Result<()> {
        let pop = self.population()?;
        let test = self.split(&pop.histories)?;
        let (train, held): (Vec<UserHistory>, Vec<UserHistory>) = pop
            .histories
            .iter()
            .cloned()
            .partition(|h| !test.contains(&h.user_id));
        let (net, history) = QualityNet::train(&self.cfg.network, &train)?;
        let dir = self.path("model");
        fs::create_dir_all(&dir)?;
        net.save(&dir)?;
        let split_rows: Vec<Vec<&str>> = pop
            .histories
            .iter()
            .map(|h| {
                vec![
                    h.user_id.as_str(),
                    if test.contains(&h.user_id) {
                        "test"
                    } else {
                        "train"
                    },
                ]
            })
            .collect();
        self.write_csv("model/split.csv", &["user_id", "subset"], &split_rows)?;

        let rows: Vec<Vec<String>> = history
            .epochs
            .iter()
            .map(|e| {
                let v = e.validation;
                vec![
                    e.epoch.to_string(),
                    e.train.quality_mse.to_string(),
                    e.train.interval_loss.to_string(),
                    e.train.total.to_string(),
                    fmt_opt(v.map(|v| v.quality_mse)),
                    fmt_opt(v.map(|v| v.interval_loss)),
                    fmt_opt(v.map(|v| v.total)),
                ]
            })
            .collect();
        self.write_csv(
            "history.csv",
            &[
                "epoch",
                "train_mse",
                "train_interval_loss",
                "train_total",
                "validation_mse",
                "validation_interval_loss",
                "validation_total",
            ],
            &rows,
        )?;
        self.svg("history.svg", || {
            let series = |name: &str, f: &dyn Fn(&qnet::EpochRecord) -> Option<f64>| Series {
                name: name.into(),
                points: history
                    .epochs
                    .iter()
                    .filter_map(|e| f(e).map(|y| (e.epoch as f64, y, None)))
                    .collect(),
            };
            plot::line_chart(
                "Training loss",
                "epoch",
                "quality MSE",
                &[
                    series("train", &|e| Some(e.train.quality_mse)),
                    series("validation", &|e| e.validation.map(|v| v.quality_mse)),
                ],
            )
        })?;

        #[derive(Serialize)]
        struct Metrics {
            n_train: usize,
            n_test: usize,
            best_epoch: usize,
            stopped_early: bool,
            heldout_mse: Option<f64>,
            untrained_heldout_mse: Option<f64>,
            mse_ratio: Option<f64>,
            coverage: Vec<f64>,
            calibration_r: Option<f64>,
        }
        let mut m = Metrics {
            n_train: train.len(),
            n_test: held.len(),
            best_epoch: history.best_epoch,
            stopped_early: history.stopped_early,
            heldout_mse: None,
            untrained_heldout_mse: None,
            mse_ratio: None,
            coverage: Vec::new(),
            calibration_r: None,
        };
        if held.iter().any(|h| h.anchor_quality().is_some()) {
            let (mse, cov, r, n) = qnet::held_out_metrics(&net, &held)?;
            let untrained = QualityNet::new(self.cfg.network.clone(), net.stats.clone())?;
            let (mse0, ..) = qnet::held_out_metrics(&untrained, &held)?;
            m.n_test = n;
            m.heldout_mse = Some(mse);
            m.untrained_heldout_mse = Some(mse0);
            m.mse_ratio = Some(mse / mse0);
            m.coverage = cov;
            m.calibration_r = r;
        }
        self.write_json("metrics.json", &m)
    }

    fn cv(&self) -> Result<()> {
        let pop = self.population()?;
        let report = cross_validate(&pop.histories, &self.cfg.network, self.cfg.evaluation.folds)?;
        let rows: Vec<Vec<String>> = report
            .folds
            .iter()
            .map(|f| {
                vec![
                    f.fold.to_string(),
                    f.n_train.to_string(),
                    f.n_test.to_string(),
                    f.quality_mse.to_string(),
                    fmt_opt(f.calibration_r),
                    f.epochs_run.to_string(),
                ]
            })
            .collect();
        self.write_csv(
            "cv.csv",
            &[
                "fold",
                "n_train",
                "n_test",
                "quality_mse",
                "calibration_r",
                "epochs_run",
            ],
            &rows,
        )?;
        self.write_json("cv.json", &report)
    }

    fn ablate(&self, arms: &[Variant]) -> Result<()> {
        let pop = self.population()?;
        let arms: Vec<Variant> = if arms.is_empty() {
            Variant::ABLATIONS.to_vec()
        } else {
            arms.to_vec()
        };
        let folds = self.cfg.evaluation.folds;
        let base_cfg = qnet::NetworkConfig {
            variant: Variant::Baseline,
            ..self.cfg.network.clone()
        };
        let baseline = cross_validate(&pop.histories, &base_cfg, folds)?;
        let mean_r = |r: &qnet::CvReport| {
            stats::mean(
                &r.folds
                    .iter()
                    .filter_map(|f| f.calibration_r)
                    .collect::<Vec<_>>(),
            )
        };
        let base_mse: Vec<f64> = baseline.folds.iter().map(|f| f.quality_mse).collect();
        let mut rows = Vec::new();
        let mut fold_rows = Vec::new();
        let mut reports = vec![baseline.clone()];
        for f in &baseline.folds {
            fold_rows.push(vec![
                "baseline".to_string(),
                f.fold.to_string(),
                f.quality_mse.to_string(),
                fmt_opt(f.calibration_r),
            ]);
        }
        for &arm in &arms {
            let cfg = qnet::NetworkConfig {
                variant: arm,
                ..self.cfg.network.clone()
            };
            let report = cross_validate(&pop.histories, &cfg, folds)?;
            let mse: Vec<f64> = report.folds.iter().map(|f| f.quality_mse).collect();
            let test = stats::paired_t_test(&mse, &base_mse).ok();
            rows.push(vec![
                arm.name().to_string(),
                baseline.mean_mse.to_string(),
                report.mean_mse.to_string(),
                fmt_opt(test.map(|t| t.mean_difference)),
                fmt_opt(test.map(|t| t.t)),
                fmt_opt(test.map(|t| t.p)),
                fmt_opt(mean_r(&baseline)),
                fmt_opt(mean_r(&report)),
            ]);
            for f in &report.folds {
                fold_rows.push(vec![
                    arm.name().to_string(),
                    f.fold.to_string(),
                    f.quality_mse.to_string(),
                    fmt_opt(f.calibration_r),
                ]);
            }
            reports.push(report);
        }
        self.write_csv(
            "ablation.csv",
            &[
                "arm",
                "baseline_mse",
                "arm_mse",
                "mean_difference",
                "t",
                "p_value",
                "baseline_calibration_r",
                "arm_calibration_r",
            ],
            &rows,
        )?;
        self.write_csv(
            "ablation_folds.csv",
            &["arm", "fold", "quality_mse", "calibration_r"],
            &fold_rows,
        )?;
        self.write_json("ablation.json", &reports)?;
        self.svg("ablation.svg", || {
            let names: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
            let values: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![r[3].parse().unwrap_or(0.0)])
                .collect();
            plot::heatmap(
                "Ablation: MSE change versus baseline",
                &names,
                &["mse difference".into()],
                &values,
            )
        })
    }

    // ---- linear ----------------------------------------------------------

    fn train_linear(&self) -> Result<()> {
        let pop = self.population()?;
        let lm = LinearQualityModel::fit(&pop.histories, &Default::default())?;
        let trace: Vec<Vec<String>> = lm
            .trace
            .iter()
            .enumerate()
            .map(|(i, s)| {
                vec![
                    i.to_string(),
                    s.dropped_name.clone().unwrap_or_default(),
                    s.aic.to_string(),
                    s.n_columns.to_string(),
                ]
            })
            .collect();
        self.write_csv(
            "linear_trace.csv",
            &["step", "dropped", "aic", "n_columns"],
            &trace,
        )?;
        let m = &lm.model;
        let coefs: Vec<Vec<String>> = (0..m.columns.len())
            .map(|i| {
                vec![
                    m.names[i].clone(),
                    m.b[i].to_string(),
                    m.beta[i].to_string(),
                    m.p_values[i].to_string(),
                ]
            })
            .collect();
        self.write_csv(
            "linear_coefficients.csv",
            &["column", "b", "beta", "p_value"],
            &coefs,
        )?;
        #[derive(Serialize)]
        struct Summary {
            n: usize,
            columns: usize,
            intercept: f64,
            rss: f64,
            aic: f64,
            r2: f64,
        }
        self.write_json(
            "linear_summary.json",
            &Summary {
                n: m.n,
                columns: m.columns.len(),
                intercept: m.intercept,
                rss: m.rss,
                aic: m.aic,
                r2: m.r2,
            },
        )?;
        self.write_json("linear_model.json", &lm)?;
        self.svg("linear_trace.svg", || {
            plot::line_chart(
                "Backward elimination",
                "step",
                "AIC",
                &[Series {
                    name: "AIC".into(),
                    points: lm
                        .trace
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| s.aic.is_finite())
                        .map(|(i, s)| (i as f64, s.aic, None))
                        .collect(),
                }],
            )
        })?;
        self.svg("linear_coefficients.svg", || {
            let values: Vec<Vec<f64>> = m.beta.iter().map(|b| vec![*b]).collect();
            plot::heatmap(
                "Standardized coefficients",
                &m.names,
                &["beta".into()],
                &values,
            )
        })
    }

    // ---- recommendation and evaluation -----------------------------------

    fn advisable(&self) -> AdvisableSet {
        AdvisableSet::for_variant(self.cfg.recommend.variant)
    }

    fn recommend(&self, args: &ModelArgs, kinds: &[RecommenderKind]) -> Result<()> {
        let pop = self.population()?;
        let model = self.model(&pop)?;
        let users = self.subset(&pop, &model, args.subset)?;
        let adv = self.advisable();
        let strict = kinds.len() == 1;
        for &kind in kinds {
            if let Some((recs, covered)) =
                self.recommendations(kind, &model, args, &pop, &users, &adv, strict)?
            {
                self.write_recs(kind, &recs, &covered, &adv)?;
            }
        }
        Ok(())
    }

    fn evaluate(&self, args: &ModelArgs, kinds: &[RecommenderKind]) -> Result<()> {
        let pop = self.population()?;
        let model = self.model(&pop)?;
        let users = self.subset(&pop, &model, args.subset)?;
        let adv = self.advisable();
        let modes = scoring_modes(
            self.cfg.evaluation.scoring,
            pop.oracle.is_some(),
            self.cfg.seed,
        )?;
        let strict = kinds.len() == 1;
        let mut curves: BTreeMap<&str, Vec<(RecommenderKind, EffectivenessCurve)>> =
            BTreeMap::new();
        let mut summary = Vec::new();
        for &kind in kinds {
            let Some((recs, covered)) =
                self.recommendations(kind, &model, args, &pop, &users, &adv, strict)?
            else {
                continue;
            };
            self.write_recs(kind, &recs, &covered, &adv)?;
            for &mode in &modes {
                let curve = effectiveness_curve(score_users(
                    &recs,
                    &covered,
                    pop.oracle.as_ref(),
                    &adv,
                    mode,
                )?)?;
                self.write_curve_file(
                    &format!("effectiveness_{}_{}.csv", kind.name(), mode.name()),
                    &curve,
                )?;
                let q = curve.qualities();
                let trend = curve.trend();
                let b0 = curve.bucket(0);
                summary.push(vec![
                    kind.name().to_string(),
                    mode.name().to_string(),
                    q.len().to_string(),
                    curve.mean().to_string(),
                    fmt_opt(stats::standard_error(&q)),
                    b0.map_or(0, |b| b.n).to_string(),
                    fmt_opt(b0.map(|b| b.mean)),
                    fmt_opt(trend.map(|c| c.r)),
                    fmt_opt(trend.map(|c| c.p)),
                ]);
                curves.entry(mode.name()).or_default().push((kind, curve));
            }
        }
        self.write_csv(
            "summary.csv",
            &[
                "recommender",
                "scoring",
                "users",
                "mean",
                "se",
                "bucket0_n",
                "bucket0_mean",
                "spearman_rho",
                "spearman_p",
            ],
            &summary,
        )?;
        let mut comparisons = Vec::new();
        for (mode, list) in &curves {
            let Some((ref_kind, ref_curve)) = list.first() else {
                continue;
            };
            for (kind, curve) in &list[1..] {
                if let Ok(t) = compare_recommenders(&ref_curve.qualities(), &curve.qualities()) {
                    comparisons.push(vec![
                        mode.to_string(),
                        ref_kind.name().to_string(),
                        kind.name().to_string(),
                        t.mean_difference.to_string(),
                        t.t.to_string(),
                        t.df.to_string(),
                        t.p.to_string(),
                    ]);
                }
            }
        }
        self.write_csv(
            "comparisons.csv",
            &["scoring", "a", "b", "mean_difference", "t", "df", "p"],
            &comparisons,
        )?;
        for (mode, list) in &curves {
            self.svg(&format!("effectiveness_{mode}.svg"), || {
                let series: Vec<Series> = list
                    .iter()
                    .map(|(k, c)| Series {
                        name: k.name().into(),
                        points: c
                            .buckets
                            .iter()
                            .map(|b| (b.ignored as f64, b.mean, b.se))
                            .collect(),
                    })
                    .collect();
                plot::line_chart(
                    &format!(
                        "Effectiveness ({mode}, {})",
                        self.cfg.recommend.variant.name()
                    ),
                    "ignored recommendations",
                    "quality",
                    &series,
                )
            })?;
        }
        Ok(())
    }

    fn shuffle(&self, args: &ModelArgs, kinds: &[RecommenderKind]) -> Result<()> {
        let pop = self.population()?;
        let model = self.model(&pop)?;
        let users = self.subset(&pop, &model, args.subset)?;
        let adv = self.advisable();
        let modes = scoring_modes(
            self.cfg.evaluation.scoring,
            pop.oracle.is_some(),
            self.cfg.seed,
        )?;
        let strict = kinds.len() == 1;
        let mut summary = Vec::new();
        for &kind in kinds {
            let Some((recs, covered)) =
                self.recommendations(kind, &model, args, &pop, &users, &adv, strict)?
            else {
                continue;
            };
            for &mode in &modes {
                let rep = shuffle_test(
                    &recs,
                    &covered,
                    pop.oracle.as_ref(),
                    &adv,
                    mode,
                    self.cfg.seed,
                )?;
                let mut rows = Vec::new();
                for (phase, curve) in [("before", &rep.before), ("after", &rep.after)] {
                    for b in &curve.buckets {
                        rows.push(vec![
                            phase.to_string(),
                            b.ignored.to_string(),
                            b.n.to_string(),
                            b.mean.to_string(),
                            fmt_opt(b.se),
                        ]);
                    }
                }
                self.write_csv(
                    &format!("shuffle_{}_{}.csv", kind.name(), mode.name()),
                    &["phase", "ignored", "n", "mean", "se"],
                    &rows,
                )?;
                summary.push(vec![
                    kind.name().to_string(),
                    mode.name().to_string(),
                    rep.before.mean().to_string(),
                    rep.after.mean().to_string(),
                    rep.overall.t.to_string(),
                    rep.overall.p.to_string(),
                    fmt_opt(rep.bucket0.map(|t| t.mean_difference)),
                    fmt_opt(rep.bucket0.map(|t| t.p)),
                    (rep.before.buckets == rep.after.buckets).to_string(),
                ]);
                self.svg(
                    &format!("shuffle_{}_{}.svg", kind.name(), mode.name()),
                    || {
                        let s = |name: &str, c: &EffectivenessCurve| Series {
                            name: name.into(),
                            points: c
                                .buckets
                                .iter()
                                .map(|b| (b.ignored as f64, b.mean, b.se))
                                .collect(),
                        };
                        plot::line_chart(
                            &format!("Shuffle test: {} ({})", kind.name(), mode.name()),
                            "ignored recommendations",
                            "quality",
                            &[s("original", &rep.before), s("shuffled", &rep.after)],
                        )
                    },
                )?;
            }
        }
        self.write_csv(
            "shuffle_summary.csv",
            &[
                "recommender",
                "scoring",
                "before_mean",
                "after_mean",
                "t",
                "p",
                "bucket0_difference",
                "bucket0_p",
                "curves_identical",
            ],
            &summary,
        )
    }

    fn flip(&self, args: &ModelArgs) -> Result<()> {
        let pop = self.population()?;
        let model = self.model(&pop)?;
        let users = self.subset(&pop, &model, args.subset)?;
        let adv = self.advisable();
        let modes: Vec<Scoring> = scoring_modes(
            self.cfg.evaluation.scoring,
            pop.oracle.is_some(),
            self.cfg.seed,
        )?
        .into_iter()
        .filter(|m| *m != Scoring::Reported)
        .collect();
        if modes.is_empty() {
            return Err(usage("flip-test changes advice, which reported qualities cannot reflect; it needs an oracle"));
        }
        let recs = recommend_gradient_nn(&model.net, &users, &adv, &self.cfg.recommend.ascent)?;
        self.write_recs(RecommenderKind::GradientNn, &recs, &users, &adv)?;
        let arm_rows = |rep: &evalx::FlipReport| -> Vec<Vec<String>> {
            rep.arms
                .iter()
                .map(|a| {
                    vec![
                        a.variable.map_or("control", |v| v.name()).to_string(),
                        a.n.to_string(),
                        a.mean.to_string(),
                        fmt_opt(a.se),
                        fmt_opt(a.test.map(|t| t.mean_difference)),
                        fmt_opt(a.test.map(|t| t.t)),
                        fmt_opt(a.test.map(|t| t.p)),
                    ]
                })
                .collect()
        };
        let header = ["arm", "n", "mean", "se", "mean_difference", "t", "p"];
        for &mode in &modes {
            let rep = flip_test(&recs, &users, pop.oracle.as_ref(), &adv, mode)?;
            self.write_csv(
                &format!("flip_{}.csv", mode.name()),
                &header,
                &arm_rows(&rep),
            )?;
            self.svg(&format!("flip_{}.svg", mode.name()), || {
                let names: Vec<String> = rep
                    .arms
                    .iter()
                    .map(|a| a.variable.map_or("control", |v| v.name()).to_string())
                    .collect();
                let values: Vec<Vec<f64>> = rep.arms.iter().map(|a| vec![a.mean]).collect();
                plot::heatmap(
                    &format!("Flip test ({})", mode.name()),
                    &names,
                    &["mean quality".into()],
                    &values,
                )
            })?;
            if let Scoring::SimulatedReport { seed } = mode {
                let mut rows = Vec::new();
                let mut tally: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
                for r in 0..self.cfg.evaluation.replicates {
                    let rep = flip_test(
                        &recs,
                        &users,
                        pop.oracle.as_ref(),
                        &adv,
                        Scoring::SimulatedReport {
                            seed: seed.wrapping_add(r as u64 + 1),
                        },
                    )?;
                    for a in rep.arms.iter().filter(|a| a.variable.is_some()) {
                        let name = a.variable.map_or("", |v| v.name()).to_string();
                        let p = a.test.map(|t| t.p);
                        let e = tally.entry(name.clone()).or_default();
                        e.0 += 1;
                        // An undefined test (no variation at all) counts as "no effect".
                        e.1 += usize::from(p.is_none_or(|p| p > 0.05));
                        e.2 += usize::from(p.is_some_and(|p| p < 0.01));
                        rows.push(vec![
                            r.to_string(),
                            name,
                            fmt_opt(a.test.map(|t| t.mean_difference)),
                            fmt_opt(p),
                        ]);
                    }
                }
                self.write_csv(
                    "flip_replicates.csv",
                    &["replicate", "arm", "mean_difference", "p"],
                    &rows,
                )?;
                let rows: Vec<Vec<String>> = tally
                    .iter()
                    .map(|(k, (n, above, below))| {
                        vec![
                            k.clone(),
                            n.to_string(),
                            (*above as f64 / *n as f64).to_string(),
                            (*below as f64 / *n as f64).to_string(),
                        ]
                    })
                    .collect();
                self.write_csv(
                    "flip_replicate_summary.csv",
                    &[
                        "arm",
                        "replicates",
                        "share_p_above_0.05",
                        "share_p_below_0.01",
                    ],
                    &rows,
                )?;
            }
        }
        Ok(())
    }

    // ---- explanation -----------------------------------------------------

    fn calibrate(&self, args: &ModelArgs) -> Result<()> {
        let pop = self.population()?;
        let model = self.model(&pop)?;
        let users = self.subset(&pop, &model, args.subset)?;
        let rep = calibration_report(&model.net, &users)?;
        let rows: Vec<Vec<String>> = rep
            .nominal
            .iter()
            .zip(&rep.coverage)
            .map(|(p, c)| vec![p.to_string(), c.to_string()])
            .collect();
        self.write_csv("calibration.csv", &["nominal", "coverage"], &rows)?;
        self.write_json("calibration.json", &rep)?;
        self.svg("calibration.svg", || {
            let pts = |ys: &[f64]| {
                rep.nominal
                    .iter()
                    .zip(ys)
                    .map(|(x, y)| (*x, *y, None))
                    .collect()
            };
            plot::line_chart(
                "Interval calibration",
                "nominal probability",
                "empirical coverage",
                &[
                    Series {
                        name: "coverage".into(),
                        points: pts(&rep.coverage),
                    },
                    Series {
                        name: "ideal".into(),
                        points: pts(&rep.nominal),
                    },
                ],
            )
        })
    }

    fn step_names() -> Vec<String> {
        (0..WINDOW_STEPS)
            .map(|t| format!("t-{}", WINDOW_STEPS - 1 - t))
            .collect()
    }

    fn explain(&self, args: &ModelArgs) -> Result<()> {
        let pop = self.population()?;
        let model = self.model(&pop)?;
        let users = self.subset(&pop, &model, args.subset)?;
        let map = first_order_saliency(&model.net, &users)?;
        let rows = Self::step_names();
        let cols: Vec<String> = map.variables.iter().map(|v| v.name().to_string()).collect();
        self.write_with("saliency.csv", |f| {
            Ok(evalx::write_matrix(f, &rows, &cols, &map.mean)?)
        })?;
        let se: Vec<Vec<f64>> = map
            .se
            .iter()
            .map(|r| r.iter().map(|s| s.unwrap_or(f64::NAN)).collect())
            .collect();
        self.write_with("saliency_se.csv", |f| {
            Ok(evalx::write_matrix(f, &rows, &cols, &se)?)
        })?;
        self.svg("saliency.svg", || {
            plot::heatmap("Mean dq/dx", &rows, &cols, &map.mean)
        })
    }

    fn explain2(&self, args: &ModelArgs) -> Result<()> {
        let pop = self.population()?;
        let model = self.model(&pop)?;
        let users = self.subset(&pop, &model, args.subset)?;
        let take = self.cfg.evaluation.max_users.min(users.len());
        let map =
            second_order_interactions(&model.net, &users[..take], self.cfg.evaluation.probe_step)?;
        let vars: Vec<String> = map.variables.iter().map(|v| v.name().to_string()).collect();
        let steps = Self::step_names();
        self.write_with("interactions_same_day.csv", |f| {
            Ok(evalx::write_matrix(f, &vars, &vars, &map.same_day)?)
        })?;
        self.write_with("interactions_time.csv", |f| {
            Ok(evalx::write_matrix(f, &steps, &steps, &map.time_pairs)?)
        })?;
        let (same, cross) = map.same_vs_cross();
        #[derive(Serialize)]
        struct Summary {
            users: usize,
            same_day_mean_abs: f64,
            cross_day_mean_abs: f64,
            max_asymmetry: f64,
        }
        self.write_json(
            "interactions.json",
            &Summary {
                users: map.n,
                same_day_mean_abs: same,
                cross_day_mean_abs: cross,
                max_asymmetry: map.max_asymmetry,
            },
        )?;
        self.svg("interactions_same_day.svg", || {
            plot::heatmap("Same-day second derivatives", &vars, &vars, &map.same_day)
        })?;
        self.svg("interactions_time.svg", || {
            plot::heatmap(
                "Mean |second derivative| by step pair",
                &steps,
                &steps,
                &map.time_pairs,
            )
        })
    }
}
