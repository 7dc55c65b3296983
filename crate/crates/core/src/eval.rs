//! The testing regime: benign accuracy, a robustness sweep over shadow
//! strengths, query accounting, saliency maps and report serialization.

use std::fmt::Write as _;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::augment::preprocess;
use crate::color::{mean_l_channel, RgbImage};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Network, Objective};
use crate::profiles::{ProfileKind, ProfileSettings};
use crate::shadow::{argmax, check_strength, pso_attack, Classifier, PsoConfig, QueryingClassifier};

/// Samples whose mean L (0-255 scale) is at most this are excluded.
pub const DARK_THRESHOLD: f64 = 120.0;

pub const DEFAULT_K_VALUES: [f64; 12] = [0.20, 0.25, 0.30, 0.35, 0.40, 0.43, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KSweep {
    pub values: Vec<f64>,
}

impl Default for KSweep {
    fn default() -> Self {
        Self {
            values: DEFAULT_K_VALUES.to_vec(),
        }
    }
}

impl KSweep {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sweep = Self { values };
        sweep.validate()?;
        Ok(sweep)
    }

    pub fn validate(&self) -> Result<()> {
        self.values.iter().try_for_each(|&k| check_strength(k))
    }
}

/// Whether a mean L value (0-255 scale) falls under the exclusion rule.
pub fn is_dark(mean_l: f64) -> bool {
    mean_l <= DARK_THRESHOLD
}

/// Splits off samples that are too dark to attack meaningfully.
pub fn filter_dark(samples: &[Sample]) -> (Vec<Sample>, usize) {
    let kept: Vec<Sample> = samples
        .iter()
        .filter(|s| !is_dark(mean_l_channel(&s.image)))
        .cloned()
        .collect();
    let excluded = samples.len() - kept.len();
    (kept, excluded)
}

/// A network plus the preprocessing that turns an RGB image into its input.
#[derive(Debug, Clone)]
pub struct PipelineClassifier {
    net: Network<f32>,
    profile: Option<ProfileKind>,
    settings: ProfileSettings,
}

impl PipelineClassifier {
    /// `profile = None` expects a 3-channel network; otherwise 4 channels.
    pub fn new(net: Network<f32>, profile: Option<ProfileKind>, settings: ProfileSettings) -> Result<Self> {
        let expected = if profile.is_some() { 4 } else { 3 };
        if net.spec().input_channels != expected {
            return Err(Error::ChannelMismatch {
                expected,
                found: net.spec().input_channels,
            });
        }
        Ok(Self { net, profile, settings })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn profile(&self) -> Option<ProfileKind> {
        self.profile
    }

    pub fn label(&self) -> &'static str {
        self.profile.map_or("Undefended", ProfileKind::label)
    }

    fn input(&self, img: &RgbImage) -> Result<Array4<f32>> {
        let s = self.net.spec().input_size;
        if img.dims() != (s, s) {
            return Err(Error::DimensionMismatch {
                expected: (s, s),
                found: img.dims(),
            });
        }
        let c = self.net.spec().input_channels;
        let data = preprocess(img, self.profile, &self.settings)?;
        Ok(Array4::from_shape_vec((1, c, s, s), data).expect("preprocess emits one full tensor"))
    }

    pub fn try_predict_proba(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let p = self.net.predict_proba(self.input(img)?.view())?;
        Ok(p.iter().map(|&v| f64::from(v)).collect())
    }
}

impl Classifier for PipelineClassifier {
    fn num_classes(&self) -> usize {
        self.net.spec().classes
    }

    /// Panics if the image does not match the network's input size; the
    /// regime checks sizes before attacking.
    fn predict_proba(&self, img: &RgbImage) -> Vec<f64> {
        self.try_predict_proba(img).expect("image matches network input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub k: f64,
    pub trial: usize,
    pub seed: u64,
    pub attacked: usize,
    pub successes: usize,
    pub robustness: f64,
    pub mean_queries: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub defense: String,
    pub k_values: Vec<f64>,
    /// Mean over trials of `1 - success rate`, one entry per k.
    pub robustness: Vec<f64>,
    /// Mean queries per attacked sample over all trials, one entry per k.
    pub mean_queries: Vec<f64>,
    pub benign_accuracy: f64,
    pub trials: usize,
    pub evaluated: usize,
    pub excluded: usize,
    pub per_trial: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn robustness_at(&self, k: f64) -> Option<f64> {
        self.index_of(k).map(|i| self.robustness[i])
    }

    pub fn queries_at(&self, k: f64) -> Option<f64> {
        self.index_of(k).map(|i| self.mean_queries[i])
    }

    fn index_of(&self, k: f64) -> Option<usize> {
        self.k_values.iter().position(|&v| (v - k).abs() < 1e-9)
    }
}

/// Seed for one sample's attack in one trial.
pub fn attack_seed(base: u64, trial: usize, sample: usize) -> u64 {
    base.wrapping_add(trial as u64)
        .wrapping_mul(0x0000_0100_0000_01b3)
        .wrapping_add(sample as u64)
}

/// Runs the benign pass and the per-k PSO sweep.
///
/// Dark samples are dropped first. Attacks run only on samples the model
/// classifies correctly; robustness is `1 - successes / attacked`, or 0 when
/// nothing could be attacked. Trial `t` uses base seed `pso.seed + t`.
pub fn run_regime(
    model: &dyn Classifier,
    defense: &str,
    test: &[Sample],
    ksweep: &KSweep,
    trials: usize,
    pso: &PsoConfig,
) -> Result<EvalReport> {
    ksweep.validate()?;
    pso.validate()?;
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    let (kept, excluded) = filter_dark(test);
    if kept.is_empty() {
        return Err(Error::invalid("test set", "no samples left after the darkness filter"));
    }
    if let Some(s) = kept.iter().find(|s| s.label >= model.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes: model.num_classes(),
        });
    }
    let correct: Vec<(usize, &Sample)> = kept
        .iter()
        .enumerate()
        .filter(|(_, s)| model.predict(&s.image) == s.label)
        .collect();
    let benign_accuracy = correct.len() as f64 / kept.len() as f64;
    if correct.is_empty() {
        log::warn!("{defense}: no benignly correct samples; robustness reported as 0");
    }

    let mut per_trial = Vec::new();
    let mut robustness = Vec::with_capacity(ksweep.values.len());
    let mut mean_queries = Vec::with_capacity(ksweep.values.len());
    for &k in &ksweep.values {
        let mut rob_sum = 0.0;
        let mut query_sum = 0u64;
        for trial in 0..trials {
            let mut successes = 0;
            let mut trial_queries = 0u64;
            for &(idx, s) in &correct {
                let counter = QueryingClassifier::new(model);
                let cfg = PsoConfig {
                    seed: attack_seed(pso.seed, trial, idx),
                    ..pso.clone()
                };
                let result = pso_attack(&s.image, s.label, &counter, k, &s.mask, &cfg)?;
                debug_assert_eq!(result.queries, counter.query_count());
                if result.success {
                    successes += 1;
                }
                trial_queries += result.queries;
            }
            let attacked = correct.len();
            let rob = if attacked == 0 {
                0.0
            } else {
                1.0 - successes as f64 / attacked as f64
            };
            let mq = if attacked == 0 {
                0.0
            } else {
                trial_queries as f64 / attacked as f64
            };
            log::info!("{defense}: k={k:.2} trial {trial}: robustness {rob:.4}, mean queries {mq:.1}");
            per_trial.push(TrialRecord {
                k,
                trial,
                seed: pso.seed.wrapping_add(trial as u64),
                attacked,
                successes,
                robustness: rob,
                mean_queries: mq,
            });
            rob_sum += rob;
            query_sum += trial_queries;
        }
        robustness.push(rob_sum / trials as f64);
        let total_attacked = correct.len() * trials;
        mean_queries.push(if total_attacked == 0 {
            0.0
        } else {
            query_sum as f64 / total_attacked as f64
        });
    }
    Ok(EvalReport {
        defense: defense.to_string(),
        k_values: ksweep.values.clone(),
        robustness,
        mean_queries,
        benign_accuracy,
        trials,
        evaluated: kept.len(),
        excluded,
        per_trial,
    })
}

/// Benign top-1 accuracy over samples, without any filtering.
pub fn benign_accuracy(model: &dyn Classifier, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples.iter().filter(|s| model.predict(&s.image) == s.label).count();
    correct as f64 / samples.len() as f64
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// Robustness table: one row per defense, one column per k.
    Csv,
    /// Mean-query table in the same layout.
    QueriesCsv,
    /// Full report including per-trial records.
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "queries-csv" | "queries_csv" => Ok(ReportFormat::QueriesCsv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

fn format_k(k: f64) -> String {
    format!("{k:.2}")
}

fn table(reports: &[EvalReport], column: impl Fn(&EvalReport) -> &[f64]) -> Result<Vec<u8>> {
    let ks = reports.first().map(|r| r.k_values.clone()).unwrap_or_default();
    if reports.iter().any(|r| r.k_values != ks) {
        return Err(Error::invalid("reports", "reports cover different k values"));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["defense".to_string()];
    header.extend(ks.iter().map(|&k| format_k(k)));
    writer.write_record(&header)?;
    if !ks.is_empty() {
        for r in reports {
            let mut row = vec![r.defense.clone()];
            row.extend(column(r).iter().map(|v| format!("{v:.4}")));
            writer.write_record(&row)?;
        }
    }
    writer
        .into_inner()
        .map_err(|e| Error::invalid("csv", e.to_string()))
}

/// Serializes one or more reports sharing a k sweep.
pub fn emit_reports(reports: &[EvalReport], format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => table(reports, |r| &r.robustness),
        ReportFormat::QueriesCsv => table(reports, |r| &r.mean_queries),
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(reports)?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<Vec<u8>> {
    emit_reports(std::slice::from_ref(report), format)
}

pub fn parse_reports(json: &[u8]) -> Result<Vec<EvalReport>> {
    Ok(serde_json::from_slice(json)?)
}

/// Static line chart of robustness against k, one line per report.
pub fn robustness_svg(reports: &[EvalReport]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let ks: Vec<f64> = reports.iter().flat_map(|r| r.k_values.iter().copied()).collect();
    let kmin = ks.iter().copied().fold(f64::INFINITY, f64::min);
    let kmax = ks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if kmax > kmin { kmax - kmin } else { 1.0 };
    let kmin = if kmin.is_finite() { kmin } else { 0.0 };
    let px = |k: f64| PAD + (k - kmin) / span * (W - 2.0 * PAD);
    let py = |r: f64| H - PAD - r * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{tick:.2}</text>"#,
            PAD - 4.0,
            py(tick) + 3.0
        );
    }
    let mut seen_k: Vec<f64> = ks.clone();
    seen_k.sort_by(f64::total_cmp);
    seen_k.dedup();
    for &k in &seen_k {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            px(k),
            H - PAD + 14.0,
            format_k(k)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">shadow strength k</text>"#,
        W / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">robustness</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, r) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = r
            .k_values
            .iter()
            .zip(&r.robustness)
            .map(|(&k, &v)| format!("{:.1},{:.1}", px(k), py(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - PAD + 4.0,
            PAD + 14.0 * i as f64,
            xml_escape(&r.defense)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// Saliency

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, max-normalized to [0, 1].
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn to_gray(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

/// Per-pixel maximum over channels of `|d score(label) / d input|`, scaled
/// so the largest value is 1. An all-zero gradient gives an all-zero map.
pub fn saliency(net: &Network<f32>, input: &[f32], label: usize) -> Result<SaliencyMap> {
    let spec = net.spec();
    let (c, s) = (spec.input_channels, spec.input_size);
    if input.len() != c * s * s {
        return Err(Error::DataLength {
            expected: c * s * s,
            found: input.len(),
        });
    }
    let x = Array4::from_shape_vec((1, c, s, s), input.to_vec()).expect("length checked");
    let g = net.input_gradient(x.view(), &[label], Objective::Logit)?;
    let mut values = vec![0.0f64; s * s];
    for ch in 0..c {
        for (i, v) in values.iter_mut().enumerate() {
            *v = v.max(f64::from(g[[0, ch, i / s, i % s]].abs()));
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(SaliencyMap {
        width: s,
        height: s,
        values,
    })
}

/// Saliency of a classifier pipeline on an RGB image.
pub fn pipeline_saliency(model: &PipelineClassifier, img: &RgbImage, label: usize) -> Result<SaliencyMap> {
    let input = model.input(img)?;
    saliency(&model.net, input.as_slice().expect("standard layout"), label)
}

/// The most probable class under a pipeline, for reporting.
pub fn pipeline_predict(model: &PipelineClassifier, img: &RgbImage) -> Result<usize> {
    Ok(argmax(&model.try_predict_proba(img)?))
}
