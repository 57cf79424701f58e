//! Training objective (classification cross-entropy plus weighted super-resolution MSE) and the
//! presentation-attack-detection evaluation protocol: confusion counts, APCER / NPCER / ACER,
//! ROC sweep and TPR at fixed FPR budgets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default weight of the super-resolution term.
pub const DEFAULT_ALPHA: f64 = 0.001;

/// FPR budgets at which TPR is reported.
pub const FPR_BUDGETS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Ground-truth class. `Live` is the positive class and has label value 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spoof,
    Live,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Spoof => 0,
            Label::Live => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Spoof),
            1 => Ok(Label::Live),
            other => Err(Error::invalid(format!("label {other} is not 0 or 1"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Spoof => "spoof",
            Label::Live => "live",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" | "1" => Ok(Label::Live),
            "spoof" | "0" => Ok(Label::Spoof),
            other => Err(Error::invalid(format!("unknown label `{other}`"))),
        }
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`. `logits` is row-major `n × k`.
pub fn cross_entropy(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes || labels.is_empty() {
        return Err(Error::shape(format!(
            "{} logits for {} labels and {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in logits.chunks(num_classes).zip(labels) {
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} outside 0..{num_classes}")));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Softmax probability of the live class for each row of `n × 2` logits.
pub fn live_scores(logits: &[f64]) -> Vec<f64> {
    logits
        .chunks(2)
        .map(|r| {
            let mx = r[0].max(r[1]);
            let (a, b) = ((r[0] - mx).exp(), (r[1] - mx).exp());
            b / (a + b)
        })
        .collect()
}

/// Super-resolution loss: per-modality mean squared error, averaged over modalities.
pub fn sr_loss(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no modalities to compare"));
    }
    let mut total = 0.0;
    for (m, (pred, gt)) in pairs.iter().enumerate() {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::shape(format!(
                "modality {m}: prediction has {} values, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let se: f64 = pred.iter().zip(*gt).map(|(p, g)| (p - g) * (p - g)).sum();
        total += se / pred.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Components of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub sr: f64,
    pub total: f64,
    pub alpha: f64,
}

pub fn total_loss(lc: f64, ls: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        classification: lc,
        sr: ls,
        total: lc + alpha * ls,
        alpha,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn check_scored(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to evaluate"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not a number")));
    }
    Ok(())
}

/// Counts with `score >= threshold` predicted live.
pub fn confusion(scores: &[f64], labels: &[Label], threshold: f64) -> Result<ConfusionCounts> {
    check_scored(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, Label::Live) => c.tp += 1,
            (true, Label::Spoof) => c.fp += 1,
            (false, Label::Live) => c.fn_ += 1,
            (false, Label::Spoof) => c.tn += 1,
        }
    }
    Ok(c)
}

/// APCER, NPCER and ACER in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PadRates {
    pub apcer: f64,
    pub npcer: f64,
    pub acer: f64,
}

pub fn pad_rates(c: &ConfusionCounts) -> Result<PadRates> {
    if c.tn + c.fp == 0 {
        return Err(Error::UndefinedRate("no spoof samples (TN + FP = 0)".into()));
    }
    if c.fn_ + c.tp == 0 {
        return Err(Error::UndefinedRate("no live samples (FN + TP = 0)".into()));
    }
    let apcer = 100.0 * c.fp as f64 / (c.tn + c.fp) as f64;
    let npcer = 100.0 * c.fn_ as f64 / (c.fn_ + c.tp) as f64;
    Ok(PadRates {
        apcer,
        npcer,
        acer: acer(apcer, npcer),
    })
}

#[inline]
pub fn acer(apcer: f64, npcer: f64) -> f64 {
    (apcer + npcer) / 2.0
}

/// Rounds half away from zero at `places` decimals, treating `x` as the decimal it prints as:
/// binary noise below 1e-6 of the last kept place is discarded first, so 2.235 rounds to 2.24
/// even though its nearest double is slightly smaller.
pub fn round_decimal(x: f64, places: u32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    const GUARD: u32 = 6;
    let scaled = (x.abs() * 10f64.powi((places + GUARD) as i32)).round() as u128;
    let unit = 10u128.pow(GUARD);
    let (q, r) = (scaled / unit, scaled % unit);
    let q = if r >= unit / 2 { q + 1 } else { q };
    (q as f64 / 10f64.powi(places as i32)).copysign(x)
}

/// One ROC operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve plus the best TPR inside each FPR budget.
#[derive(Clone, Debug, PartialEq)]
pub struct RocSummary {
    /// Ordered by decreasing threshold; starts at `+inf` with `(0, 0)`.
    pub points: Vec<RocPoint>,
    /// `(budget, tpr)` for each of [`FPR_BUDGETS`].
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

impl RocSummary {
    /// Largest TPR among operating points with `FPR <= budget`.
    pub fn tpr_at(&self, budget: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= budget)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }
}

/// Sweeps every distinct score (plus `+inf`) as a `>=` threshold.
pub fn roc_and_tpr(scores: &[f64], labels: &[Label]) -> Result<RocSummary> {
    check_scored(scores, labels)?;
    let n_live = labels.iter().filter(|&&l| l == Label::Live).count();
    let n_spoof = labels.len() - n_live;
    if n_live == 0 || n_spoof == 0 {
        return Err(Error::UndefinedRate("ROC needs both live and spoof samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            match labels[order[i]] {
                Label::Live => tp += 1,
                Label::Spoof => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n_spoof as f64,
            tpr: tp as f64 / n_live as f64,
        });
    }
    let mut summary = RocSummary {
        points,
        tpr_at_fpr: Vec::new(),
    };
    summary.tpr_at_fpr = FPR_BUDGETS.iter().map(|&b| (b, summary.tpr_at(b))).collect();
    Ok(summary)
}

/// Full evaluation at one decision threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub apcer: f64,
    pub npcer: f64,
    pub acer: f64,
    pub roc: Vec<RocPoint>,
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

/// Machine-readable form of an [`EvalReport`] with fixed field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub threshold: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub apcer: f64,
    pub npcer: f64,
    pub acer: f64,
    pub tpr_at_fpr_1e2: f64,
    pub tpr_at_fpr_1e3: f64,
    pub tpr_at_fpr_1e4: f64,
}

pub fn evaluate(scores: &[f64], labels: &[Label], threshold: f64) -> Result<EvalReport> {
    let counts = confusion(scores, labels, threshold)?;
    let rates = pad_rates(&counts)?;
    let roc = roc_and_tpr(scores, labels)?;
    Ok(EvalReport {
        threshold,
        counts,
        apcer: rates.apcer,
        npcer: rates.npcer,
        acer: rates.acer,
        roc: roc.points,
        tpr_at_fpr: roc.tpr_at_fpr,
    })
}

impl EvalReport {
    pub fn record(&self) -> EvalRecord {
        let tpr = |i: usize| self.tpr_at_fpr[i].1;
        EvalRecord {
            threshold: self.threshold,
            tp: self.counts.tp,
            tn: self.counts.tn,
            fp: self.counts.fp,
            fn_: self.counts.fn_,
            apcer: self.apcer,
            npcer: self.npcer,
            acer: self.acer,
            tpr_at_fpr_1e2: tpr(0),
            tpr_at_fpr_1e3: tpr(1),
            tpr_at_fpr_1e4: tpr(2),
        }
    }

    /// Flat `key=value` report, one field per line.
    pub fn to_text(&self) -> String {
        let r = self.record();
        let mut s = String::new();
        let _ = writeln!(s, "threshold={}", r.threshold);
        let _ = writeln!(s, "tp={}\ntn={}\nfp={}\nfn={}", r.tp, r.tn, r.fp, r.fn_);
        let _ = writeln!(s, "apcer={:.4}\nnpcer={:.4}\nacer={:.4}", r.apcer, r.npcer, r.acer);
        let _ = writeln!(s, "tpr_at_fpr_1e2={:.4}", r.tpr_at_fpr_1e2);
        let _ = writeln!(s, "tpr_at_fpr_1e3={:.4}", r.tpr_at_fpr_1e3);
        let _ = writeln!(s, "tpr_at_fpr_1e4={:.4}", r.tpr_at_fpr_1e4);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.record()).expect("report serializes")
    }
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLine {
    pub sample_id: String,
    pub label: Label,
    pub score: f64,
}

/// `sample_id<TAB>label{0,1}<TAB>score` per line.
pub fn write_scores(path: impl AsRef<Path>, lines: &[ScoreLine]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for l in lines {
        let _ = writeln!(out, "{}\t{}\t{}", l.sample_id, l.label.index(), l.score);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |msg: String| Error::invalid(format!("{}:{}: {msg}", path.display(), i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", f.len())));
            }
            let label = match f[1] {
                "0" => Label::Spoof,
                "1" => Label::Live,
                other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
            };
            let score = f[2].parse::<f64>().map_err(|e| bad(format!("score `{}`: {e}", f[2])))?;
            Ok(ScoreLine {
                sample_id: f[0].to_string(),
                label,
                score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decimal_rounding() {
        assert_eq!(round_decimal((2.69 + 1.78) / 2.0, 2), 2.24);
        assert_eq!(round_decimal(2.2349, 2), 2.23);
        assert_eq!(round_decimal(-0.125, 2), -0.13);
        assert_eq!(round_decimal(1.33, 2), 1.33);
        assert_eq!(round_decimal(0.0, 4), 0.0);
    }

    #[test]
    fn ce_uniform_and_stable() {
        assert!((cross_entropy(&[0.0, 0.0], 2, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(&[0.0, 0.0], 2, &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let v = cross_entropy(&[1000.0, -1000.0], 2, &[0]).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);
        assert!(cross_entropy(&[0.0, 0.0], 2, &[2]).is_err());
    }

    #[test]
    fn ce_matches_naive_on_moderate_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..2)).collect();
        let naive: f64 = logits
            .chunks(2)
            .zip(&labels)
            .map(|(r, &y)| -(r[y].exp() / (r[0].exp() + r[1].exp())).ln())
            .sum::<f64>()
            / 20.0;
        assert!((cross_entropy(&logits, 2, &labels).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn sr_loss_basics() {
        let a = [0.1, 0.5, 0.9];
        let b = [1.1, 1.5, 1.9];
        assert_eq!(sr_loss(&[(&a, &a)]).unwrap(), 0.0);
        assert!((sr_loss(&[(&b, &a), (&b[..1], &a[..1])]).unwrap() - 1.0).abs() < 1e-12);
        assert!(sr_loss(&[(&a, &b[..2])]).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        assert_eq!(total_loss(1.0, 0.0, DEFAULT_ALPHA).total, 1.0);
        assert!((total_loss(0.5, 100.0, 0.001).total - 0.6).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 123.0, 0.0).total, 0.7);
    }

    fn labels_from(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_index(b as usize).unwrap()).collect()
    }

    #[test]
    fn confusion_cases() {
        let labels = labels_from(&[1, 1, 0, 0]);
        let c = confusion(&[0.9, 0.8, 0.2, 0.1], &labels, 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 2, 0, 0));
        let spoof = labels_from(&[0, 0, 0]);
        let c = confusion(&[0.9, 0.9, 0.9], &spoof, 0.5).unwrap();
        assert_eq!((c.fp, c.tn), (3, 0));
        assert!(confusion(&[], &[], 0.5).is_err());
        // ties at the threshold count as live
        let c = confusion(&[0.5], &labels_from(&[1]), 0.5).unwrap();
        assert_eq!(c.tp, 1);
    }

    #[test]
    fn pad_rates_cases() {
        let zero = ConfusionCounts {
            tp: 5,
            tn: 5,
            fp: 0,
            fn_: 0,
        };
        let r = pad_rates(&zero).unwrap();
        assert_eq!((r.apcer, r.npcer, r.acer), (0.0, 0.0, 0.0));
        let c = ConfusionCounts {
            tp: 9826,
            tn: 9908,
            fp: 92,
            fn_: 174,
        };
        let r = pad_rates(&c).unwrap();
        assert!((r.apcer - 0.92).abs() < 1e-12 && (r.npcer - 1.74).abs() < 1e-12);
        assert_eq!(format!("{:.2}", r.acer), "1.33");
        assert!(matches!(
            pad_rates(&ConfusionCounts {
                tp: 3,
                tn: 0,
                fp: 0,
                fn_: 1
            }),
            Err(Error::UndefinedRate(_))
        ));
    }

    #[test]
    fn roc_perfect_and_degenerate() {
        let labels = labels_from(&[1, 1, 0, 0]);
        let r = roc_and_tpr(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
        assert!(r.tpr_at_fpr.iter().all(|&(_, t)| t == 1.0));

        let mut bits = vec![0u8; 150];
        bits.extend(vec![1u8; 50]);
        let r = roc_and_tpr(&vec![0.5; 200], &labels_from(&bits)).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!(r.tpr_at(1e-2), 0.0);
        assert!(roc_and_tpr(&[0.1, 0.2], &labels_from(&[1, 1])).is_err());
    }

    #[test]
    fn report_formats() {
        let labels = labels_from(&[1, 1, 0, 0, 1, 0]);
        let rep = evaluate(&[0.9, 0.6, 0.4, 0.7, 0.3, 0.1], &labels, 0.5).unwrap();
        assert_eq!(rep.acer, (rep.apcer + rep.npcer) / 2.0);
        let text = rep.to_text();
        assert!(text.contains("acer=") && text.contains("tpr_at_fpr_1e4="));
        let back: EvalRecord = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep.record());
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        let lines = vec![
            ScoreLine {
                sample_id: "a".into(),
                label: Label::Live,
                score: 0.123456789012345,
            },
            ScoreLine {
                sample_id: "b".into(),
                label: Label::Spoof,
                score: 1e-300,
            },
        ];
        write_scores(&p, &lines).unwrap();
        assert_eq!(read_scores(&p).unwrap(), lines);
        fs::write(&p, "a\t2\t0.5\n").unwrap();
        assert!(read_scores(&p).is_err());
    }
}
