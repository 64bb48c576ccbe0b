//! Displacement errors, collision rate, episode-level warning classification,
//! lead times and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::drta::WarningEvent;
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::scenario::Label;

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

pub fn compensated_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut s = KahanSum::default();
    let mut n = 0usize;
    for v in values {
        s.add(v);
        n += 1;
    }
    (n > 0).then(|| s.value() / n as f64)
}

fn check_trajectories(pred: &Tensor2D, truth: &Tensor2D) -> Result<usize> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "displacement error",
            left: pred.shape(),
            right: truth.shape(),
        });
    }
    if pred.cols() % 2 != 0 || pred.cols() == 0 || pred.rows() == 0 {
        return Err(Error::range("trajectory", format!("shape {:?} is not N × 2T′", pred.shape())));
    }
    Ok(pred.cols() / 2)
}

fn step_error(pred: &Tensor2D, truth: &Tensor2D, i: usize, k: usize) -> f64 {
    (pred.get(i, 2 * k) - truth.get(i, 2 * k)).hypot(pred.get(i, 2 * k + 1) - truth.get(i, 2 * k + 1))
}

/// Mean Euclidean error over vehicles and horizon steps.
pub fn ade(pred: &Tensor2D, truth: &Tensor2D) -> Result<f64> {
    let steps = check_trajectories(pred, truth)?;
    let s: KahanSum = (0..pred.rows())
        .flat_map(|i| (0..steps).map(move |k| (i, k)))
        .map(|(i, k)| step_error(pred, truth, i, k))
        .collect();
    Ok(s.value() / (pred.rows() * steps) as f64)
}

/// Mean Euclidean error at the final horizon step.
pub fn fde(pred: &Tensor2D, truth: &Tensor2D) -> Result<f64> {
    let steps = check_trajectories(pred, truth)?;
    let s: KahanSum = (0..pred.rows()).map(|i| step_error(pred, truth, i, steps - 1)).collect();
    Ok(s.value() / pred.rows() as f64)
}

/// Largest single pointwise error.
pub fn max_step_error(pred: &Tensor2D, truth: &Tensor2D) -> Result<f64> {
    let steps = check_trajectories(pred, truth)?;
    Ok((0..pred.rows())
        .flat_map(|i| (0..steps).map(move |k| (i, k)))
        .map(|(i, k)| step_error(pred, truth, i, k))
        .fold(0.0, f64::max))
}

/// Whether any pair of predicted trajectories comes closer than `threshold`
/// at a common step.
pub fn predicts_collision(pred: &Tensor2D, threshold: f64) -> bool {
    let steps = pred.cols() / 2;
    (0..steps).any(|k| {
        (0..pred.rows()).any(|i| {
            (i + 1..pred.rows()).any(|j| {
                (pred.get(i, 2 * k) - pred.get(j, 2 * k)).hypot(pred.get(i, 2 * k + 1) - pred.get(j, 2 * k + 1)) < threshold
            })
        })
    })
}

/// Fraction of windows whose predictions contain a collision.
pub fn collision_rate(preds: &[&Tensor2D], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::range("collision threshold", format!("{threshold} must be positive")));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().filter(|p| predicts_collision(p, threshold)).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

/// Earliest triggered warning time per episode.
pub fn first_warnings(events: &[WarningEvent]) -> BTreeMap<u64, f64> {
    let mut out: BTreeMap<u64, f64> = BTreeMap::new();
    for e in events.iter().filter(|e| e.triggered) {
        out.entry(e.episode_id).and_modify(|t| *t = t.min(e.time)).or_insert(e.time);
    }
    out
}

/// Classification of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    TrueNegative,
    FalseNegative,
}

/// Episode outcome and, for true positives, the warning lead time.
pub fn classify_episode(label: &Label, first_warning: Option<f64>) -> (Outcome, Option<f64>) {
    match (label.danger, first_warning) {
        (true, Some(w)) => {
            let contact = label.contact_time.unwrap_or(f64::INFINITY);
            if w < contact {
                (Outcome::TruePositive, Some(contact - w))
            } else {
                (Outcome::FalseNegative, None)
            }
        }
        (true, None) => (Outcome::FalseNegative, None),
        (false, Some(_)) => (Outcome::FalsePositive, None),
        (false, None) => (Outcome::TrueNegative, None),
    }
}

/// Confusion counts and true-positive lead times over every labelled episode.
pub fn classification(events: &[WarningEvent], labels: &BTreeMap<u64, Label>) -> Result<(ConfusionCounts, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let first = first_warnings(events);
    let mut c = ConfusionCounts::default();
    let mut leads = Vec::new();
    for (id, label) in labels {
        let (o, lead) = classify_episode(label, first.get(id).copied());
        match o {
            Outcome::TruePositive => c.tp += 1,
            Outcome::FalsePositive => c.fp += 1,
            Outcome::TrueNegative => c.tn += 1,
            Outcome::FalseNegative => c.fn_ += 1,
        }
        leads.extend(lead);
    }
    Ok((c, leads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeStats {
    pub mean: f64,
    /// Sample standard deviation; zero for a single lead.
    pub std: f64,
    /// Nearest-rank 5th percentile.
    pub p5: f64,
    pub count: usize,
}

/// Summary of warning lead times; `None` without true positives.
pub fn awlt(leads: &[f64]) -> Option<LeadTimeStats> {
    let n = leads.len();
    let mean = compensated_mean(leads.iter().copied())?;
    let std = if n > 1 {
        let ss: KahanSum = leads.iter().map(|l| (l - mean).powi(2)).collect();
        (ss.value() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = leads.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(LeadTimeStats {
        mean,
        std,
        p5: sorted[percentile_rank(n, 0.05)],
        count: n,
    })
}

/// Zero-based nearest-rank index of quantile `q` among `n` sorted values.
pub fn percentile_rank(n: usize, q: f64) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n.max(1)) - 1
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], q: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Some(s[percentile_rank(s.len(), q)])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        Some(Self {
            p50_ms: percentile(ms, 0.50)?,
            p95_ms: percentile(ms, 0.95)?,
            p99_ms: percentile(ms, 0.99)?,
        })
    }
}

/// Full evaluation summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub windows: usize,
    pub ade: f64,
    pub fde: f64,
    pub collision_rate: f64,
    pub counts: ConfusionCounts,
    pub awlt: Option<LeadTimeStats>,
    pub coverage: Option<f64>,
    pub mean_width: Option<f64>,
    pub latency: Option<LatencySummary>,
}

const REPORT_HEADER: &str = "# evaluation report";
const TABLE_MARKER: &str = "# table";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |v| v.to_string())
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.counts.precision()
    }

    pub fn recall(&self) -> f64 {
        self.counts.recall()
    }

    pub fn f1(&self) -> f64 {
        self.counts.f1()
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let c = &self.counts;
        vec![
            ("name", self.name.clone()),
            ("windows", self.windows.to_string()),
            ("ade_m", self.ade.to_string()),
            ("fde_m", self.fde.to_string()),
            ("collision_rate", self.collision_rate.to_string()),
            ("tp", c.tp.to_string()),
            ("fp", c.fp.to_string()),
            ("tn", c.tn.to_string()),
            ("fn", c.fn_.to_string()),
            ("precision", c.precision().to_string()),
            ("recall", c.recall().to_string()),
            ("f1", c.f1().to_string()),
            ("fpr", c.fpr().to_string()),
            ("fnr", c.fnr().to_string()),
            ("awlt_mean_s", opt(self.awlt.map(|a| a.mean))),
            ("awlt_std_s", opt(self.awlt.map(|a| a.std))),
            ("awlt_p5_s", opt(self.awlt.map(|a| a.p5))),
            ("awlt_count", self.awlt.map_or(0, |a| a.count).to_string()),
            ("coverage", opt(self.coverage)),
            ("mean_width_m", opt(self.mean_width)),
            ("latency_p50_ms", opt(self.latency.map(|l| l.p50_ms))),
            ("latency_p95_ms", opt(self.latency.map(|l| l.p95_ms))),
            ("latency_p99_ms", opt(self.latency.map(|l| l.p99_ms))),
        ]
    }

    /// Key-value block followed by a human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "{TABLE_MARKER}");
        s.push_str(&comparison_table(std::slice::from_ref(self)));
        s
    }

    /// Parses the key-value block written by [`EvalReport::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == REPORT_HEADER => {}
            _ => return Err(report_error(1, "missing report header")),
        }
        for (i, line) in lines {
            if line.trim() == TABLE_MARKER {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| report_error(i + 1, "expected key=value"))?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| report_error(0, &format!("missing key `{k}`")));
        let num = |k: &str| -> Result<Option<f64>> {
            let (line, v) = get(k)?;
            if v == "na" {
                return Ok(None);
            }
            v.parse::<f64>().map(Some).map_err(|e| report_error(*line, &format!("{k}: {e}")))
        };
        let req = |k: &str| -> Result<f64> { num(k)?.ok_or_else(|| report_error(0, &format!("`{k}` cannot be na"))) };
        let count = |k: &str| -> Result<usize> {
            let (line, v) = get(k)?;
            v.parse::<usize>().map_err(|e| report_error(*line, &format!("{k}: {e}")))
        };
        let awlt = match (num("awlt_mean_s")?, num("awlt_std_s")?, num("awlt_p5_s")?) {
            (Some(mean), Some(std), Some(p5)) => Some(LeadTimeStats {
                mean,
                std,
                p5,
                count: count("awlt_count")?,
            }),
            _ => None,
        };
        let latency = match (num("latency_p50_ms")?, num("latency_p95_ms")?, num("latency_p99_ms")?) {
            (Some(p50_ms), Some(p95_ms), Some(p99_ms)) => Some(LatencySummary { p50_ms, p95_ms, p99_ms }),
            _ => None,
        };
        Ok(Self {
            name: get("name")?.1.clone(),
            windows: count("windows")?,
            ade: req("ade_m")?,
            fde: req("fde_m")?,
            collision_rate: req("collision_rate")?,
            counts: ConfusionCounts {
                tp: count("tp")?,
                fp: count("fp")?,
                tn: count("tn")?,
                fn_: count("fn")?,
            },
            awlt,
            coverage: num("coverage")?,
            mean_width: num("mean_width_m")?,
            latency,
        })
    }
}

fn report_error(line: usize, detail: &str) -> Error {
    Error::Format {
        kind: "evaluation report",
        location: format!("line {line}"),
        detail: detail.to_string(),
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// Side-by-side table; with more than one report, the extra columns show the
/// ADE and F1 deltas against the first.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<20} {:>8} {:>8} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7}",
        "run", "ADE", "FDE", "CollR", "P", "R", "F1", "FPR", "FNR", "AWLT", "Cover", "Width", "p50ms"
    );
    let base = reports.first();
    if reports.len() > 1 {
        let _ = write!(s, " {:>8} {:>7}", "dADE", "dF1");
    }
    s.push('\n');
    for r in reports {
        let _ = write!(
            s,
            "{:<20} {:>8.4} {:>8.4} {:>7.4} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>7} {:>7} {:>7} {:>7}",
            r.name,
            r.ade,
            r.fde,
            r.collision_rate,
            r.precision(),
            r.recall(),
            r.f1(),
            r.counts.fpr(),
            r.counts.fnr(),
            cell(r.awlt.map(|a| a.mean), 2),
            cell(r.coverage, 3),
            cell(r.mean_width, 3),
            cell(r.latency.map(|l| l.p50_ms), 2),
        );
        if let (Some(b), true) = (base, reports.len() > 1) {
            let _ = write!(s, " {:>+8.4} {:>+7.3}", r.ade - b.ade, r.f1() - b.f1());
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(rows: &[&[f64]]) -> Tensor2D {
        Tensor2D::from_rows(rows)
    }

    fn translate(t: &Tensor2D, dx: f64, dy: f64) -> Tensor2D {
        let mut out = t.clone();
        for i in 0..t.rows() {
            for c in 0..t.cols() {
                out.set(i, c, t.get(i, c) + if c % 2 == 0 { dx } else { dy });
            }
        }
        out
    }

    #[test]
    fn displacement_examples() {
        let t = traj(&[&[0.0, 0.0, 1.0, 1.0], &[5.0, 5.0, 6.0, 6.0]]);
        assert_eq!(ade(&t, &t).unwrap(), 0.0);
        assert_eq!(fde(&t, &t).unwrap(), 0.0);
        let shifted = translate(&t, 3.0, 4.0);
        assert_eq!(ade(&shifted, &t).unwrap(), 5.0);
        assert_eq!(fde(&shifted, &t).unwrap(), 5.0);
        let one = traj(&[&[1.0, 2.0]]);
        let other = traj(&[&[4.0, 6.0]]);
        assert_eq!(ade(&one, &other).unwrap(), fde(&one, &other).unwrap());
        let diverging = traj(&[&[0.0, 1.0, 0.0, 2.0, 0.0, 3.0]]);
        let zero = Tensor2D::zeros(1, 6);
        assert!(fde(&diverging, &zero).unwrap() > ade(&diverging, &zero).unwrap());
        assert!(ade(&one, &t).is_err());
    }

    #[test]
    fn collision_rate_examples() {
        let single = traj(&[&[0.0, 0.0, 1.0, 0.0]]);
        assert_eq!(collision_rate(&[&single], 2.0).unwrap(), 0.0);
        let overlap = traj(&[&[0.0, 0.0, 1.0, 0.0], &[0.5, 0.0, 1.5, 0.0]]);
        assert_eq!(collision_rate(&[&overlap], 2.0).unwrap(), 1.0);
        let apart = traj(&[&[0.0, 0.0, 1.0, 0.0], &[10.0, 0.0, 11.0, 0.0]]);
        assert_eq!(collision_rate(&[&overlap, &apart, &single, &overlap], 2.0).unwrap(), 0.5);
        // Same positions at different steps are not a collision.
        let crossing = traj(&[&[0.0, 0.0, 10.0, 0.0], &[10.0, 0.0, 0.0, 0.0]]);
        assert!(!predicts_collision(&crossing, 2.0));
        assert!(collision_rate(&[&single], 0.0).is_err());
    }

    fn label(danger: bool, contact: Option<f64>) -> Label {
        Label {
            danger,
            contact_time: contact,
        }
    }

    fn warning(episode_id: u64, time: f64) -> WarningEvent {
        WarningEvent {
            episode_id,
            tick: 0,
            time,
            track_id: 0,
            r: 1.0,
            r_pred: 0.0,
            r_kin: 0.0,
            r_geo: 1.0,
            mu: None,
            sigma: None,
            threshold: Some(0.0),
            triggered: true,
        }
    }

    #[test]
    fn confusion_examples() {
        let labels: BTreeMap<u64, Label> = [
            (0, label(true, Some(3.0))),
            (1, label(false, None)),
            (2, label(true, Some(2.0))),
            (3, label(false, None)),
        ]
        .into();
        let events = vec![warning(0, 1.0), warning(1, 0.5), warning(2, 2.5)];
        let (c, leads) = classification(&events, &labels).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        for v in [c.precision(), c.recall(), c.f1(), c.fpr(), c.fnr()] {
            assert_eq!(v, 0.5);
        }
        assert_eq!(leads, vec![2.0]);
        let perfect = ConfusionCounts { tp: 3, fp: 0, tn: 5, fn_: 0 };
        assert_eq!(perfect.f1(), 1.0);
        assert!(classification(&events, &BTreeMap::new()).is_err());
        assert_eq!(ConfusionCounts::default().f1(), 0.0);
    }

    #[test]
    fn warning_at_contact_is_a_miss() {
        let l = label(true, Some(2.0));
        assert_eq!(classify_episode(&l, Some(2.0)).0, Outcome::FalseNegative);
        assert_eq!(classify_episode(&l, Some(1.999)).0, Outcome::TruePositive);
    }

    #[test]
    fn awlt_examples() {
        let (o, lead) = classify_episode(&label(true, Some(3.8)), Some(1.0));
        assert_eq!(o, Outcome::TruePositive);
        assert!((lead.unwrap() - 2.8).abs() < 1e-12);
        let s = awlt(&[2.0, 4.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.p5, 2.0);
        assert_eq!(awlt(&[1.5]).unwrap().std, 0.0);
        assert!(awlt(&[]).is_none());
        let many: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        assert_eq!(awlt(&many).unwrap().p5, 2.0);
    }

    #[test]
    fn compensated_sum_is_accurate() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        let s: KahanSum = vals.into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn report_round_trips() {
        let r = EvalReport {
            name: "full".into(),
            windows: 12,
            ade: 0.123456789,
            fde: 0.5,
            collision_rate: 0.25,
            counts: ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 },
            awlt: Some(LeadTimeStats { mean: 2.1, std: 0.3, p5: 1.7, count: 3 }),
            coverage: Some(0.91),
            mean_width: None,
            latency: Some(LatencySummary { p50_ms: 1.0, p95_ms: 2.0, p99_ms: 3.5 }),
        };
        let text = r.to_text();
        assert!(text.contains("f1=") && text.contains("AWLT"));
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
        assert!(EvalReport::parse("ade=1").is_err());
        let table = comparison_table(&[r.clone(), EvalReport { name: "no_sam".into(), ade: 0.2, ..r }]);
        assert!(table.contains("dADE") && table.contains("no_sam"));
    }

    proptest! {
        #[test]
        fn displacement_invariants(
            vals in prop::collection::vec(-50.0f64..50.0, 24),
            noise in prop::collection::vec(-3.0f64..3.0, 24),
            shift in (-1e3f64..1e3, -1e3f64..1e3),
        ) {
            let truth = Tensor2D::from_vec(2, 12, vals.clone()).unwrap();
            let pred = Tensor2D::from_vec(2, 12, vals.iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap();
            let a = ade(&pred, &truth).unwrap();
            let f = fde(&pred, &truth).unwrap();
            let m = max_step_error(&pred, &truth).unwrap();
            prop_assert!(a <= m + 1e-12 && f <= m + 1e-12);
            let mv = |t: &Tensor2D| translate(t, shift.0, shift.1);
            prop_assert!((ade(&mv(&pred), &mv(&truth)).unwrap() - a).abs() < 1e-9);
            prop_assert!((fde(&mv(&pred), &mv(&truth)).unwrap() - f).abs() < 1e-9);
            let p1 = Tensor2D::from_vec(2, 2, vec![pred.get(0, 0), pred.get(0, 1), pred.get(1, 0), pred.get(1, 1)]).unwrap();
            let t1 = Tensor2D::from_vec(2, 2, vec![truth.get(0, 0), truth.get(0, 1), truth.get(1, 0), truth.get(1, 1)]).unwrap();
            prop_assert_eq!(ade(&p1, &t1).unwrap(), fde(&p1, &t1).unwrap());
        }

        #[test]
        fn rates_match_recount(
            eps in prop::collection::vec((any::<bool>(), 0.5f64..5.0, prop::option::of(0.0f64..6.0)), 1..40),
        ) {
            let labels: BTreeMap<u64, Label> = eps
                .iter()
                .enumerate()
                .map(|(i, &(d, c, _))| (i as u64, label(d, d.then_some(c))))
                .collect();
            let events: Vec<WarningEvent> = eps
                .iter()
                .enumerate()
                .filter_map(|(i, &(_, _, w))| w.map(|w| warning(i as u64, w)))
                .collect();
            let (c, leads) = classification(&events, &labels).unwrap();
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for &(d, contact, w) in &eps {
                match (d, w) {
                    (true, Some(w)) if w < contact => tp += 1,
                    (true, _) => fn_ += 1,
                    (false, Some(_)) => fp += 1,
                    _ => {}
                }
            }
            prop_assert_eq!((c.tp, c.fp, c.fn_, c.total()), (tp, fp, fn_, eps.len()));
            prop_assert_eq!(leads.len(), tp);
            let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
            prop_assert!((c.f1() - f1).abs() < 1e-12);
        }
    }
}
