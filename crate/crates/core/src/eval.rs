//! Confusion matrices, one-vs-all metrics and study-level k-fold
//! cross-validation.
//!
//! Metrics are kept as integer ratios until the final division so they can be
//! compared exactly. A metric whose denominator is zero is undefined; it is
//! reported as such and left out of the macro average.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, SvmConfig, SvmModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{self, TrainConfig, TrainingLog};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major; rows are true classes, columns predictions.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Contract(format!(
                "{} counts for a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.num_classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Binary one-vs-all counts for class `c`.
    pub fn one_vs_all(&self, c: usize) -> BinaryCounts {
        let k = self.num_classes;
        let tp = self.get(c, c);
        let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..k).map(|t| self.get(t, c)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        BinaryCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    /// CSV grid with a header of predicted class names.
    pub fn write_csv<W: Write>(&self, classes: &[String], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(classes.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.num_classes {
            let mut row = vec![classes[t].clone()];
            row.extend((0..self.num_classes).map(|p| self.get(t, p).to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<confusion csv>", e))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// An exact fraction; undefined when `den == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Ratio { num, den }
    }

    pub fn value(&self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub counts: BinaryCounts,
    pub sensitivity: Ratio,
    pub specificity: Ratio,
    pub precision: Ratio,
    pub f1: Ratio,
}

impl ClassMetrics {
    pub fn from_counts(c: BinaryCounts) -> Self {
        ClassMetrics {
            counts: c,
            sensitivity: Ratio::new(c.tp, c.tp + c.fn_),
            specificity: Ratio::new(c.tn, c.tn + c.fp),
            precision: Ratio::new(c.tp, c.tp + c.fp),
            f1: Ratio::new(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Sensitivity,
    Specificity,
    Precision,
    F1,
}

const METRICS: [Metric; 4] = [Metric::Sensitivity, Metric::Specificity, Metric::Precision, Metric::F1];

impl Metric {
    fn of(self, m: &ClassMetrics) -> Ratio {
        match self {
            Metric::Sensitivity => m.sensitivity,
            Metric::Specificity => m.specificity,
            Metric::Precision => m.precision,
            Metric::F1 => m.f1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::F1 => "f1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

impl Averages {
    fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Precision => self.precision,
            Metric::F1 => self.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: u64,
    pub accuracy: Ratio,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes with a defined value.
    pub macro_avg: Averages,
    /// From counts pooled over the one-vs-all problems.
    pub micro_avg: Averages,
    /// `(metric, class)` pairs left out of the macro average.
    pub undefined: Vec<(Metric, usize)>,
}

pub fn compute_metrics(confusion: &ConfusionMatrix) -> Result<EvalReport> {
    let total = confusion.total();
    if total == 0 {
        return Err(Error::Contract("cannot compute metrics of an empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..confusion.num_classes())
        .map(|c| ClassMetrics::from_counts(confusion.one_vs_all(c)))
        .collect();
    let mut undefined = Vec::new();
    let mut macro_vals = [None; 4];
    for (slot, metric) in macro_vals.iter_mut().zip(METRICS) {
        let mut sum = 0.0;
        let mut n = 0;
        for (c, m) in per_class.iter().enumerate() {
            match metric.of(m).value() {
                Some(v) => {
                    sum += v;
                    n += 1;
                }
                None => undefined.push((metric, c)),
            }
        }
        *slot = (n > 0).then(|| sum / n as f64);
    }
    let pooled = per_class.iter().fold(BinaryCounts { tp: 0, fp: 0, fn_: 0, tn: 0 }, |a, m| BinaryCounts {
        tp: a.tp + m.counts.tp,
        fp: a.fp + m.counts.fp,
        fn_: a.fn_ + m.counts.fn_,
        tn: a.tn + m.counts.tn,
    });
    let micro = ClassMetrics::from_counts(pooled);
    Ok(EvalReport {
        total,
        accuracy: Ratio::new(confusion.trace(), total),
        per_class,
        macro_avg: Averages {
            sensitivity: macro_vals[0],
            specificity: macro_vals[1],
            precision: macro_vals[2],
            f1: macro_vals[3],
        },
        micro_avg: Averages {
            sensitivity: micro.sensitivity.value(),
            specificity: micro.specificity.value(),
            precision: micro.precision.value(),
            f1: micro.f1.value(),
        },
        undefined,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    pub fn accuracy_value(&self) -> f64 {
        self.accuracy.value().expect("non-empty report")
    }

    /// One row per class plus `macro` and `micro` rows.
    pub fn write_csv<W: Write>(&self, classes: &[String], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "class",
            "tp",
            "fp",
            "fn",
            "tn",
            "sensitivity",
            "specificity",
            "precision",
            "f1",
            "accuracy",
        ])?;
        let acc = fmt_opt(self.accuracy.value());
        for (c, m) in self.per_class.iter().enumerate() {
            let mut row = vec![
                classes[c].clone(),
                m.counts.tp.to_string(),
                m.counts.fp.to_string(),
                m.counts.fn_.to_string(),
                m.counts.tn.to_string(),
            ];
            row.extend(METRICS.iter().map(|k| fmt_opt(k.of(m).value())));
            row.push(String::new());
            w.write_record(&row)?;
        }
        for (name, avg) in [("macro", &self.macro_avg), ("micro", &self.micro_avg)] {
            let mut row = vec![name.to_string(), String::new(), String::new(), String::new(), String::new()];
            row.extend(METRICS.iter().map(|&k| fmt_opt(avg.get(k))));
            row.push(acc.clone());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<report csv>", e))?;
        Ok(())
    }

    /// Aligned plain-text table.
    pub fn to_table(&self, classes: &[String]) -> String {
        let width = classes.iter().map(String::len).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>11}  {:>11}  {:>11}  {:>11}",
            "class", "sensitivity", "specificity", "precision", "f1"
        );
        let mut line = |name: &str, vals: [Option<f64>; 4]| {
            let _ = writeln!(
                s,
                "{:<width$}  {:>11}  {:>11}  {:>11}  {:>11}",
                name,
                fmt_opt(vals[0]),
                fmt_opt(vals[1]),
                fmt_opt(vals[2]),
                fmt_opt(vals[3])
            );
        };
        for (c, m) in self.per_class.iter().enumerate() {
            line(&classes[c], METRICS.map(|k| k.of(m).value()));
        }
        line("macro", METRICS.map(|k| self.macro_avg.get(k)));
        line("micro", METRICS.map(|k| self.micro_avg.get(k)));
        let _ = writeln!(
            s,
            "accuracy {} ({}/{})",
            fmt_opt(self.accuracy.value()),
            self.accuracy.num,
            self.accuracy.den
        );
        if !self.undefined.is_empty() {
            let list: Vec<String> = self
                .undefined
                .iter()
                .map(|(m, c)| format!("{}[{}]", m.name(), classes[*c]))
                .collect();
            let _ = writeln!(s, "undefined, excluded from macro: {}", list.join(", "));
        }
        s
    }
}

/// Assignment of studies to test folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    /// Study indices of each test fold, ascending.
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Studies of every other fold, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        t.sort_unstable();
        t
    }
}

/// Stratified k-fold split of studies with classes `study_classes`.
///
/// Each class's studies are shuffled and dealt round-robin after those of
/// the previous classes, so fold sizes differ by at most one overall and per
/// class.
pub fn make_folds(study_classes: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = study_classes.len();
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the {n} studies")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = study_classes.iter().max().map_or(0, |&c| c + 1);
    let mut order = Vec::with_capacity(n);
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| study_classes[i] == c).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut labels: Vec<usize> = (0..k).collect();
    labels.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (pos, &study) in order.iter().enumerate() {
        folds[labels[pos % k]].push(study);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { seed, folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyPrediction {
    pub study: usize,
    pub truth: usize,
    pub predicted: usize,
    /// Mean probabilities in `SvmModel::classes` order.
    pub probabilities: Vec<f64>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub report: EvalReport,
    pub predictions: Vec<StudyPrediction>,
    pub log: TrainingLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub confusion: ConfusionMatrix,
    pub pooled: EvalReport,
}

/// Classifies every study in `test` from its slice features.
pub fn predict_studies(
    dataset: &Dataset,
    model: &SvmModel,
    test: &[usize],
    features: &[Vec<f64>],
) -> Result<Vec<StudyPrediction>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(test.len());
    for &s in test {
        let n = dataset.studies[s].slices.len();
        let (predicted, probabilities) = classifier::classify_study(model, &features[offset..offset + n])?;
        offset += n;
        out.push(StudyPrediction {
            study: s,
            truth: dataset.studies[s].class,
            predicted,
            probabilities,
            classes: model.classes.clone(),
        });
    }
    Ok(out)
}

fn confusion_of(num_classes: usize, predictions: &[StudyPrediction]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(num_classes);
    for p in predictions {
        m.add(p.truth, p.predicted);
    }
    m
}

fn run_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    train_config: &TrainConfig,
    svm: &SvmConfig,
) -> Result<FoldResult> {
    let k = dataset.num_classes();
    let train_idx = plan.train(fold);
    let test_idx = plan.test(fold);
    let train = dataset.samples(&train_idx);
    let test = dataset.samples(test_idx);
    let (params, log) = trainer::train::<f32>(&train, k, train_config)?;
    let train_features = classifier::embed_samples(&params, &train)?;
    let labels: Vec<usize> = train.iter().map(|s| s.class).collect();
    let model = classifier::svm_train(&train_features, &labels, svm)?;
    let test_features = classifier::embed_samples(&params, &test)?;
    let predictions = predict_studies(dataset, &model, test_idx, &test_features)?;
    let confusion = confusion_of(k, &predictions);
    Ok(FoldResult {
        fold,
        report: compute_metrics(&confusion)?,
        confusion,
        predictions,
        log,
    })
}

fn run_folds<F>(k: usize, jobs: usize, work: F) -> Vec<Result<FoldResult>>
where
    F: Fn(usize) -> Result<FoldResult> + Sync,
{
    let jobs = jobs.clamp(1, k);
    if jobs == 1 {
        return (0..k).map(&work).collect();
    }
    let mut results: Vec<Option<Result<FoldResult>>> = (0..k).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let work = &work;
                scope.spawn(move || (j..k).step_by(jobs).map(|f| (f, work(f))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (f, r) in h.join().expect("fold worker panicked") {
                results[f] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every fold ran")).collect()
}

fn assemble(dataset: &Dataset, plan: FoldPlan, results: Vec<Result<FoldResult>>) -> Result<CvResult> {
    let mut folds = Vec::with_capacity(results.len());
    for (f, r) in results.into_iter().enumerate() {
        folds.push(r.map_err(|e| Error::Fold {
            fold: f,
            source: Box::new(e),
        })?);
    }
    let mut confusion = ConfusionMatrix::new(dataset.num_classes());
    for f in &folds {
        confusion.merge(&f.confusion);
    }
    Ok(CvResult {
        pooled: compute_metrics(&confusion)?,
        plan,
        folds,
        confusion,
    })
}

/// Trains and evaluates the full pipeline on each fold of `plan`. Folds run on
/// up to `jobs` threads; results do not depend on `jobs`.
pub fn cross_validate(
    dataset: &Dataset,
    plan: &FoldPlan,
    train_config: &TrainConfig,
    svm: &SvmConfig,
    jobs: usize,
) -> Result<CvResult> {
    train_config.validate()?;
    svm.validate()?;
    let results = run_folds(plan.k(), jobs, |f| run_fold(dataset, plan, f, train_config, svm));
    assemble(dataset, plan.clone(), results)
}

/// The floor baseline: the same SVM on raw flattened pixels, same folds.
pub fn raw_pixel_baseline(dataset: &Dataset, plan: &FoldPlan, svm: &SvmConfig) -> Result<CvResult> {
    svm.validate()?;
    let k = dataset.num_classes();
    let pixels = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        dataset
            .samples(idx)
            .iter()
            .map(|s| (s.image.data().iter().map(|&v| v as f64).collect(), s.class))
            .unzip()
    };
    let results = run_folds(plan.k(), 1, |fold| {
        let (x, y) = pixels(&plan.train(fold));
        let model = classifier::svm_train(&x, &y, svm)?;
        let (tx, _) = pixels(plan.test(fold));
        let predictions = predict_studies(dataset, &model, plan.test(fold), &tx)?;
        let confusion = confusion_of(k, &predictions);
        Ok(FoldResult {
            fold,
            report: compute_metrics(&confusion)?,
            confusion,
            predictions,
            log: TrainingLog::default(),
        })
    });
    assemble(dataset, plan.clone(), results)
}
