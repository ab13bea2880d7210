use std::io::Write;
use std::path::Path;

use conformal_core::outlier::{bh_procedure, outlier_pvalues, OutlierBatch};
use conformal_core::pac::{pac_confidence, select_r_pac, PacTarget, RSelection};
use conformal_core::pvalue::p_from_scores;
use conformal_core::sim::{run_experiment, ExperimentConfig, FAST_REPLICATES};
use conformal_core::split::{
    cqr_interval_from, cqr_scores, cumulative_calibration_scores, cumulative_label_set, cumulative_scores,
    normalize_probabilities, residual_scores, threshold_label_set, threshold_scores,
};
use conformal_core::{CalibrationSet, ExtendedReal, LabeledSample, Outcome, PValueResult, ScoreBag, ScoreFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::model::ModelArtifact;
use crate::snapshot::{self, CalibMethod, Snapshot};
use crate::table::{fmt_num, write_csv, Table};
use crate::Format;

const PRECOMPUTED: &str = "precomputed-scores";

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    path: &Path,
    method: CalibMethod,
    model_arg: &str,
    alpha: f64,
    randomize: bool,
    k_flag: Option<usize>,
    seed: u64,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let table = Table::read(path)?;
    if table.is_empty() {
        return Err(input("empty calibration set"));
    }
    if randomize && method != CalibMethod::ClassCumulative {
        return Err(input("--randomize applies only to class_cumulative"));
    }
    let model = if model_arg == PRECOMPUTED {
        None
    } else {
        Some(ModelArtifact::load(Path::new(model_arg))?)
    };

    let (scores, k) = match &model {
        None => {
            let scores = if method == CalibMethod::OneSided && !table.has("score") {
                table.require("y")?
            } else {
                table.require("score")?
            };
            let k = if method.is_classification() {
                match (k_flag, table.has("label")) {
                    (Some(k), _) => Some(k),
                    (None, true) => table.labels()?.into_iter().max(),
                    (None, false) => None,
                }
            } else {
                None
            };
            (scores, k)
        }
        Some(m) => {
            if method == CalibMethod::OneSided {
                return Err(input("one_sided takes no model; omit --model"));
            }
            let features = table.features()?;
            m.check_dimension(features[0].len())?;
            let k = if method.is_classification() {
                let k = m
                    .classes()
                    .ok_or_else(|| input("classification methods need a softmax model"))?;
                if k_flag.is_some_and(|f| f != k) {
                    return Err(input(format!("--k disagrees with the model's {k} classes")));
                }
                Some(k)
            } else {
                None
            };
            let outcomes: Vec<Outcome> = match k {
                Some(k) => table
                    .labels()?
                    .into_iter()
                    .map(|l| Outcome::category(l, k))
                    .collect::<Result<_, _>>()?,
                None => table
                    .require("y")?
                    .into_iter()
                    .map(Outcome::real)
                    .collect::<Result<_, _>>()?,
            };
            let us = table.column("u");
            let samples = features
                .into_iter()
                .zip(outcomes)
                .enumerate()
                .map(|(i, (x, y))| {
                    let z = LabeledSample::new(x, y);
                    match &us {
                        Some(us) => z.with_u(us[i]),
                        None => Ok(z),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let calib = CalibrationSet::new(samples)?;
            let bag = match method {
                CalibMethod::MeanResidual => residual_scores(&m.regression()?, &calib)?,
                CalibMethod::Cqr => cqr_scores(&m.regression()?, &calib)?,
                CalibMethod::ClassThreshold => threshold_scores(&m.classifier()?, &calib)?,
                CalibMethod::ClassCumulative => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    cumulative_calibration_scores(&m.classifier()?, &calib, randomize, &mut rng)?
                }
                CalibMethod::OneSided => unreachable!(),
            };
            (bag.values().to_vec(), k)
        }
    };

    let bag = ScoreBag::new(scores)?;
    let snap = Snapshot {
        method,
        alpha,
        n: bag.len(),
        scores: bag.sorted().to_vec(),
        threshold: snapshot::threshold(method, &bag, alpha)?,
        k,
        randomize,
        model,
    };
    serde_json::to_writer_pretty(&mut *out, &snap)?;
    writeln!(out)?;
    Ok(())
}

enum Prediction {
    Interval {
        lower: ExtendedReal,
        upper: ExtendedReal,
        pvalue: Option<PValueResult>,
    },
    Labels {
        labels: Vec<usize>,
        pvalues: Vec<PValueResult>,
    },
}

fn finite(v: f64, what: &str) -> Result<f64, CliError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(input(format!("{what} returned {v}")))
    }
}

fn regression_rows(
    snap: &Snapshot,
    table: &Table,
    features: &[Vec<f64>],
    emit: bool,
) -> Result<Vec<Prediction>, CliError> {
    let m = table.len();
    let ys = if emit { Some(table.require("y")?) } else { None };
    let reg = snap.model.as_ref().map(ModelArtifact::regression).transpose()?;
    let column = |name: &str| -> Result<Vec<f64>, CliError> {
        match &reg {
            Some(models) => {
                let f = match name {
                    "pred" => models.mean.as_ref(),
                    "q_lo" => models.q_lo.as_ref(),
                    _ => models.q_hi.as_ref(),
                }
                .ok_or_else(|| input(format!("snapshot model has no {name} component")))?;
                features.iter().map(|x| finite(f(x), name)).collect()
            }
            None => table.require(name)?.into_iter().map(|v| finite(v, name)).collect(),
        }
    };
    let p_of = |s: f64| p_from_scores(s, &snap.scores);
    let mut rows = Vec::with_capacity(m);
    match snap.method {
        CalibMethod::OneSided => {
            for i in 0..m {
                rows.push(Prediction::Interval {
                    lower: ExtendedReal::NegInf,
                    upper: snap.threshold,
                    pvalue: ys.as_ref().map(|y| p_of(y[i])),
                });
            }
        }
        CalibMethod::MeanResidual => {
            let pred = column("pred")?;
            for (i, &c) in pred.iter().enumerate() {
                let (lower, upper) = match snap.threshold {
                    ExtendedReal::Finite(h) => (ExtendedReal::Finite(c - h), ExtendedReal::Finite(c + h)),
                    _ => (ExtendedReal::NegInf, ExtendedReal::PosInf),
                };
                rows.push(Prediction::Interval {
                    lower,
                    upper,
                    pvalue: ys.as_ref().map(|y| p_of((y[i] - c).abs())),
                });
            }
        }
        CalibMethod::Cqr => {
            let lo = column("q_lo")?;
            let hi = column("q_hi")?;
            for i in 0..m {
                let set = cqr_interval_from(lo[i], hi[i], snap.threshold, snap.alpha);
                let (lower, upper) = set.bounds().expect("interval");
                rows.push(Prediction::Interval {
                    lower,
                    upper,
                    pvalue: ys.as_ref().map(|y| p_of((lo[i] - y[i]).max(y[i] - hi[i]))),
                });
            }
        }
        _ => unreachable!(),
    }
    Ok(rows)
}

fn classification_rows(
    snap: &Snapshot,
    table: &Table,
    features: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<Prediction>, CliError> {
    let probs: Vec<Vec<f64>> = match &snap.model {
        Some(m) => {
            let clf = m.classifier()?;
            features
                .iter()
                .map(|x| clf.probabilities(x))
                .collect::<Result<_, _>>()?
        }
        None => table
            .probabilities()?
            .ok_or_else(|| input("precomputed classification needs columns p1..pK"))?
            .into_iter()
            .map(normalize_probabilities)
            .collect::<Result<_, _>>()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let us = table.column("u");
    let mut rows = Vec::with_capacity(probs.len());
    for (i, p) in probs.iter().enumerate() {
        if snap.k.is_some_and(|k| k != p.len()) {
            return Err(input(format!(
                "row {i} has {} class probabilities but the snapshot has {} classes",
                p.len(),
                snap.k.unwrap()
            )));
        }
        let (labels, scores) = match snap.method {
            CalibMethod::ClassThreshold => (
                threshold_label_set(p, snap.threshold),
                p.iter().map(|v| -v).collect::<Vec<_>>(),
            ),
            CalibMethod::ClassCumulative => {
                let u = if snap.randomize {
                    let u = us.as_ref().map_or_else(|| rng.random::<f64>(), |us| us[i]);
                    if !(0.0..=1.0).contains(&u) {
                        return Err(input(format!("u = {u} outside [0, 1]")));
                    }
                    Some(u)
                } else {
                    None
                };
                (cumulative_label_set(p, u, snap.threshold), cumulative_scores(p, u))
            }
            _ => unreachable!(),
        };
        rows.push(Prediction::Labels {
            labels,
            pvalues: scores.iter().map(|&s| p_from_scores(s, &snap.scores)).collect(),
        });
    }
    Ok(rows)
}

pub fn predict(
    snapshot_path: &Path,
    test_path: &Path,
    alpha: Option<f64>,
    emit: bool,
    seed: u64,
    format: Format,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut snap = Snapshot::load(snapshot_path)?;
    if let Some(a) = alpha {
        snap = snap.at_level(a)?;
    }
    let table = Table::read(test_path)?;
    let features = table.features()?;
    if let (Some(m), Some(x)) = (&snap.model, features.first()) {
        m.check_dimension(x.len())?;
    }
    let rows = if snap.method.is_classification() {
        classification_rows(&snap, &table, &features, seed)?
    } else {
        regression_rows(&snap, &table, &features, emit)?
    };

    match format {
        Format::Json => {
            let values: Vec<Value> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| match r {
                    Prediction::Interval { lower, upper, pvalue } => {
                        let mut v = json!({"index": i, "lower": lower, "upper": upper});
                        if let Some(p) = pvalue {
                            v["pvalue"] = json!(p.value());
                        }
                        v
                    }
                    Prediction::Labels { labels, pvalues } => {
                        let mut v = json!({"index": i, "labels": labels});
                        if emit {
                            v["pvalues"] = json!(pvalues.iter().map(PValueResult::value).collect::<Vec<_>>());
                        }
                        v
                    }
                })
                .collect();
            serde_json::to_writer_pretty(&mut *out, &values)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let classification = snap.method.is_classification();
            let mut headers: Vec<String> = if classification {
                vec!["index".into(), "labels".into()]
            } else {
                vec!["index".into(), "lower".into(), "upper".into()]
            };
            if emit {
                if classification {
                    let k = match rows.first() {
                        Some(Prediction::Labels { pvalues, .. }) => pvalues.len(),
                        _ => snap.k.unwrap_or(0),
                    };
                    headers.extend((1..=k).map(|y| format!("pvalue_{y}")));
                } else {
                    headers.push("pvalue".into());
                }
            }
            let records: Vec<Vec<String>> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut rec = vec![i.to_string()];
                    match r {
                        Prediction::Interval { lower, upper, pvalue } => {
                            rec.push(fmt_num(lower.to_f64()));
                            rec.push(fmt_num(upper.to_f64()));
                            if let Some(p) = pvalue {
                                rec.push(fmt_num(p.value()));
                            }
                        }
                        Prediction::Labels { labels, pvalues } => {
                            rec.push(labels.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
                            if emit {
                                rec.extend(pvalues.iter().map(|p| fmt_num(p.value())));
                            }
                        }
                    }
                    rec
                })
                .collect();
            write_csv(out, &headers, &records)?;
        }
    }
    Ok(())
}

pub fn simulate(
    config_path: &Path,
    fast: bool,
    seed: Option<u64>,
    format: Format,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path).map_err(|e| input(format!("{}: {e}", config_path.display())))?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", config_path.display())))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if fast {
        config.replicates = FAST_REPLICATES;
    }
    let rows = run_experiment(&config)?;
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, &rows)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let headers: Vec<String> = ["method", "n", "coverage", "coverage_se", "excess", "excess_se"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let records: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.method.to_string(),
                        r.n.to_string(),
                        fmt_num(r.coverage),
                        fmt_num(r.coverage_se),
                        fmt_num(r.excess),
                        fmt_num(r.excess_se),
                    ]
                })
                .collect();
            write_csv(out, &headers, &records)?;
        }
    }
    Ok(())
}

/// Scores from the `score` column when both files have one, else from `y`.
fn outlier_samples(table: &Table, column: &str) -> Result<Vec<LabeledSample>, CliError> {
    table
        .require(column)?
        .into_iter()
        .map(|s| Ok(LabeledSample::new(vec![], Outcome::real(s)?)))
        .collect()
}

pub fn outliers(
    reference_path: &Path,
    tests_path: &Path,
    q: f64,
    format: Format,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let reference = Table::read(reference_path)?;
    let tests = Table::read(tests_path)?;
    if reference.is_empty() {
        return Err(input("empty reference set"));
    }
    if tests.is_empty() {
        return Err(input("no test cases"));
    }
    let column = if reference.has("score") && tests.has("score") {
        "score"
    } else {
        "y"
    };
    let batch = OutlierBatch::new(
        CalibrationSet::new(outlier_samples(&reference, column)?)?,
        outlier_samples(&tests, column)?,
    )?;
    let score = ScoreFunction::split(|z: &LabeledSample| z.outcome.as_real().unwrap_or(f64::NAN));
    let p = outlier_pvalues(&batch, &score)?;
    let bh = bh_procedure(&p.iter().map(PValueResult::value).collect::<Vec<_>>(), q)?;
    match format {
        Format::Json => {
            let values: Vec<Value> = p
                .iter()
                .enumerate()
                .map(|(i, pi)| json!({"index": i, "p": pi.value(), "rejected": bh.is_rejected(i)}))
                .collect();
            serde_json::to_writer_pretty(&mut *out, &values)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let records: Vec<Vec<String>> = p
                .iter()
                .enumerate()
                .map(|(i, pi)| vec![i.to_string(), fmt_num(pi.value()), bh.is_rejected(i).to_string()])
                .collect();
            write_csv(out, &["index".into(), "p".into(), "rejected".into()], &records)?;
        }
    }
    Ok(())
}

pub fn pac_r(n: usize, alpha: f64, delta: f64, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    if n == 0 {
        return Err(input("n must be at least 1"));
    }
    let selection = select_r_pac(n, PacTarget::new(alpha, delta)?)?;
    // For an infeasible target, report the confidence of the best candidate, r = 0.
    let confidence = pac_confidence(n, selection.r().unwrap_or(0), alpha)?;
    let r = match selection {
        RSelection::Rank(r) => r.to_string(),
        RSelection::Infeasible => "infeasible".into(),
    };
    match format {
        Format::Json => {
            let r_value = selection.r().map_or(json!("infeasible"), |r| json!(r));
            let v = json!({"n": n, "alpha": alpha, "delta": delta, "r": r_value, "confidence": confidence});
            serde_json::to_writer_pretty(&mut *out, &v)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let headers: Vec<String> = ["n", "alpha", "delta", "r", "confidence"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let rec = vec![n.to_string(), fmt_num(alpha), fmt_num(delta), r, fmt_num(confidence)];
            write_csv(out, &headers, &[rec])?;
        }
    }
    if selection.is_infeasible() {
        return Err(CliError::Infeasible(format!(
            "no r reaches confidence {} at n = {n}, alpha = {alpha}",
            1.0 - delta
        )));
    }
    Ok(())
}
