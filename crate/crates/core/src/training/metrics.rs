use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Per-class precision/recall/F1 with flags for undefined ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Nothing was predicted as this class; precision reported as 0.
    pub precision_undefined: bool,
    /// Precision and recall are both 0; F1 reported as 0.
    pub f1_undefined: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], actual: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::contract(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= num_classes || a >= num_classes {
                return Err(Error::contract(format!("class index out of range ({a}, {p})")));
            }
            confusion[a][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    /// Macro averages run over classes with nonzero support.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let c = confusion.len();
        if confusion.iter().any(|r| r.len() != c) {
            return Err(Error::contract("confusion matrix must be square"));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::contract("cannot evaluate on an empty dataset"));
        }
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = confusion[k][k];
            let support: usize = confusion[k].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[k]).sum();
            let (precision, precision_undefined) = ratio(tp, predicted);
            let (recall, _) = ratio(tp, support);
            let denom = precision + recall;
            let (f1, f1_undefined) = if denom > 0.0 {
                (2.0 * precision * recall / denom, false)
            } else {
                (0.0, true)
            };
            per_class.push(ClassMetrics {
                class: k,
                support,
                predicted,
                precision,
                recall,
                f1,
                precision_undefined,
                f1_undefined,
            });
        }
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        let n = present.len() as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / n;
        Ok(Metrics {
            accuracy: correct as f64 / total as f64,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            confusion,
            per_class,
        })
    }

    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut out = String::from("true\\pred");
        for k in 0..c {
            let _ = write!(out, ",{k}");
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_confusion_csv(text: &str) -> Result<Vec<Vec<usize>>> {
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .skip(1)
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Error::contract(format!("bad confusion entry `{v}`")))
                    })
                    .collect()
            })
            .collect()
    }

    /// `metric,value` rows for the summary numbers.
    pub fn summary_csv(&self) -> String {
        format!(
            "metric,value\naccuracy,{:?}\nmacro_precision,{:?}\nmacro_recall,{:?}\nmacro_f1,{:?}\n",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        )
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,support,predicted,precision,recall,f1,precision_undefined,f1_undefined\n");
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?},{},{}",
                m.class, m.support, m.predicted, m.precision, m.recall, m.f1, m.precision_undefined, m.f1_undefined
            );
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = format!(
            "accuracy        {:.4}\nmacro precision {:.4}\nmacro recall    {:.4}\nmacro F1        {:.4}\n\n",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        );
        out.push_str("class  support  precision  recall     f1\n");
        for m in &self.per_class {
            let flag = match (m.support == 0, m.precision_undefined) {
                (true, _) => "  (absent, excluded)",
                (false, true) => "  (never predicted, precision=0)",
                _ => "",
            };
            let _ = writeln!(
                out,
                "{:>5}  {:>7}  {:>9.4}  {:>6.4}  {:>6.4}{flag}",
                m.class, m.support, m.precision, m.recall, m.f1
            );
        }
        out
    }
}
