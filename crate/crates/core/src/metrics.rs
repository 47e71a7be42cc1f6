//! Leakage metrics computed from an evaluator's posteriors.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{argmax, posteriors, Sample};

/// Evaluator posterior for one reconstruction and the class it was attacked for.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub true_class: usize,
    pub posterior: Vec<f64>,
}

/// Runs the evaluator over reconstructions.
pub fn score(evaluator: &Model, samples: &[Sample], seed: u64) -> Result<Vec<Scored>> {
    Ok(posteriors(evaluator, samples, seed)?
        .into_iter()
        .zip(samples)
        .map(|(posterior, s)| Scored {
            true_class: s.label(),
            posterior,
        })
        .collect())
}

fn non_empty(s: &[Scored]) -> Result<()> {
    if s.is_empty() {
        Err(Error::Usage("no samples to score".into()))
    } else {
        Ok(())
    }
}

/// Position of `y` when classes are ordered by posterior, lower index first on ties.
fn rank(p: &[f64], y: usize) -> usize {
    p.iter()
        .enumerate()
        .filter(|&(j, &v)| v > p[y] || (v == p[y] && j < y))
        .count()
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

pub fn attack_accuracy(s: &[Scored]) -> Result<f64> {
    non_empty(s)?;
    Ok(percent(s.iter().filter(|x| argmax(&x.posterior) == x.true_class).count(), s.len()))
}

pub fn topk_accuracy(s: &[Scored], k: usize) -> Result<f64> {
    non_empty(s)?;
    if let Some(x) = s.iter().find(|x| k > x.posterior.len()) {
        return Err(Error::Config(format!("k = {k} exceeds {} classes", x.posterior.len())));
    }
    Ok(percent(s.iter().filter(|x| rank(&x.posterior, x.true_class) < k).count(), s.len()))
}

pub fn avg_confidence(s: &[Scored]) -> Result<f64> {
    non_empty(s)?;
    Ok(100.0 * s.iter().map(|x| x.posterior[x.true_class]).sum::<f64>() / s.len() as f64)
}

/// Index into `s` of the member of class `c`'s group with the highest
/// posterior for `c`; the earliest sample wins ties.
fn witness(s: &[Scored], c: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in s.iter().enumerate().filter(|(_, x)| x.true_class == c) {
        if best.map_or(true, |b| x.posterior[c] > s[b].posterior[c]) {
            best = Some(i);
        }
    }
    best
}

/// Per attacked class, whether its most confident reconstruction is
/// classified as that class; as a percentage over `classes`.
pub fn daa(s: &[Scored], classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Usage("no attacked classes".into()));
    }
    let mut hits = 0;
    for &c in classes {
        let i = witness(s, c).ok_or_else(|| Error::Usage(format!("no samples for class {c}")))?;
        hits += usize::from(argmax(&s[i].posterior) == c);
    }
    Ok(percent(hits, classes.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub daa_hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub attack_accuracy: f64,
    pub top3_accuracy: f64,
    pub avg_confidence: f64,
    pub daa: f64,
    /// Standard deviation over samples of the true-class confidence (percent).
    pub confidence_std: f64,
    /// Standard deviation over classes of per-class accuracy (percent).
    pub accuracy_std: f64,
    pub per_class: Vec<ClassRow>,
    /// Free-form provenance: seeds, checkpoint identifiers, method.
    pub meta: Vec<(String, String)>,
}

pub const REPORT_VERSION: u32 = 1;

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

impl MetricsReport {
    /// Scores reconstructions grouped by the classes listed in `classes`.
    pub fn build(s: &[Scored], classes: &[usize], meta: Vec<(String, String)>) -> Result<Self> {
        non_empty(s)?;
        let k = 3.min(s[0].posterior.len());
        let mut per_class = Vec::with_capacity(classes.len());
        for &c in classes {
            let group: Vec<Scored> = s.iter().filter(|x| x.true_class == c).cloned().collect();
            if group.is_empty() {
                return Err(Error::Usage(format!("no samples for class {c}")));
            }
            let w = witness(&group, c).expect("group is non-empty");
            per_class.push(ClassRow {
                class: c,
                samples: group.len(),
                accuracy: attack_accuracy(&group)?,
                mean_confidence: avg_confidence(&group)?,
                daa_hit: argmax(&group[w].posterior) == c,
            });
        }
        let confs: Vec<f64> = s.iter().map(|x| 100.0 * x.posterior[x.true_class]).collect();
        let accs: Vec<f64> = per_class.iter().map(|r| r.accuracy).collect();
        Ok(Self {
            attack_accuracy: attack_accuracy(s)?,
            top3_accuracy: topk_accuracy(s, k)?,
            avg_confidence: avg_confidence(s)?,
            daa: daa(s, classes)?,
            confidence_std: std_dev(&confs),
            accuracy_std: std_dev(&accs),
            per_class,
            meta,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,samples,accuracy,mean_confidence,daa_hit\n");
        for r in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{}",
                r.class,
                r.samples,
                r.accuracy,
                r.mean_confidence,
                u8::from(r.daa_hit)
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k}: {v}");
        }
        let _ = writeln!(out, "attack accuracy   {:6.2} %  (std over classes {:.2})", self.attack_accuracy, self.accuracy_std);
        let _ = writeln!(out, "top-3 accuracy    {:6.2} %", self.top3_accuracy);
        let _ = writeln!(out, "avg confidence    {:6.2} %  (std over samples {:.2})", self.avg_confidence, self.confidence_std);
        let _ = writeln!(out, "DAA               {:6.2} %", self.daa);
        let _ = writeln!(out, "\nclass  n    acc%     conf%   daa");
        for r in &self.per_class {
            let _ = writeln!(
                out,
                "{:>5}  {:<3}  {:6.2}  {:6.2}   {}",
                r.class,
                r.samples,
                r.accuracy,
                r.mean_confidence,
                if r.daa_hit { "hit" } else { "miss" }
            );
        }
        out
    }

    /// Versioned `key = value` rendering; floats use round-trip formatting.
    pub fn to_kv(&self) -> String {
        let mut out = format!("report_version = {REPORT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta.{k} = {v}");
        }
        for (k, v) in [
            ("attack_accuracy", self.attack_accuracy),
            ("top3_accuracy", self.top3_accuracy),
            ("avg_confidence", self.avg_confidence),
            ("daa", self.daa),
            ("confidence_std", self.confidence_std),
            ("accuracy_std", self.accuracy_std),
        ] {
            let _ = writeln!(out, "{k} = {v:?}");
        }
        for r in &self.per_class {
            let c = r.class;
            let _ = writeln!(out, "class.{c}.samples = {}", r.samples);
            let _ = writeln!(out, "class.{c}.accuracy = {:?}", r.accuracy);
            let _ = writeln!(out, "class.{c}.mean_confidence = {:?}", r.mean_confidence);
            let _ = writeln!(out, "class.{c}.daa_hit = {}", r.daa_hit);
        }
        out
    }

    /// Reads the headline numbers back from [`to_kv`](Self::to_kv) output.
    pub fn headline_from_kv(text: &str) -> Result<[f64; 4]> {
        let get = |key: &str| -> Result<f64> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .ok_or_else(|| Error::Format(format!("report is missing `{key}`")))?
                .1
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad `{key}` in report")))
        };
        if get("report_version")? as u32 != REPORT_VERSION {
            return Err(Error::Format("unsupported report version".into()));
        }
        Ok([get("attack_accuracy")?, get("top3_accuracy")?, get("avg_confidence")?, get("daa")?])
    }
}
