//! Synthetic paired cohorts with known ground truth.
//!
//! A latent `z ~ N(0, I)` drives everything: attribute categories are
//! equal-probability bins of projections of `z`, image features are a noisy
//! linear map of `z` (one jittered copy per phase), reports emit one token per
//! attribute plus noise tokens, and survival times follow an exponential
//! proportional-hazards model in `z`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::encoders::ATTRIBUTE_CLASSES;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::train::{Phase, PhaseSet};
use crate::zeroshot::DEFAULT_TEMPLATES;

/// Attribute that encodes malignancy (`z₀ > 0`) exactly.
pub const MALIGNANCY_ATTRIBUTE: usize = 3;
/// Further attributes driven mostly by `z₀`.
pub const MALIGNANCY_LINKED: [usize; 2] = [10, 11];
/// Attribute driven by `z₁`, the aggressiveness/prognosis factor.
pub const AGGRESSIVENESS_ATTRIBUTE: usize = 13;
/// Noise tokens appended after the attribute block.
pub const NOISE_VOCAB: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Std of the additive noise on `x = Wz + ε`.
    pub noise_sigma: f64,
    /// Std of the per-phase jitter around `x`.
    pub phase_sigma: f64,
    /// Fixed phase count per patient; `None` draws 1–4.
    pub phases: Option<usize>,
    /// Noise tokens per report.
    pub noise_tokens: usize,
    /// Shuffled report versions stored next to the original.
    pub shuffles: usize,
    /// Log-hazard coefficient on `z₁`.
    pub beta: f64,
    /// Baseline hazard per month.
    pub lambda0: f64,
    /// Censoring hazard per month; 0 disables censoring.
    pub lambda_c: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            feature_dim: 32,
            noise_sigma: 0.1,
            phase_sigma: 0.05,
            phases: None,
            noise_tokens: 1,
            shuffles: 4,
            beta: 1.0,
            lambda0: 0.05,
            lambda_c: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 || self.feature_dim == 0 {
            return Err(Error::invalid("latent dim must be >= 2 and feature dim >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.phase_sigma >= 0.0 && self.lambda_c >= 0.0 && self.lambda0 > 0.0) {
            return Err(Error::invalid("noise scales and censoring rate must be >= 0, baseline hazard > 0"));
        }
        if self.phases.is_some_and(|k| !(1..=4).contains(&k)) {
            return Err(Error::invalid("phase count must lie in 1..=4"));
        }
        if !self.beta.is_finite() {
            return Err(Error::invalid("beta must be finite"));
        }
        Ok(())
    }
}

/// Token id of class `c` of attribute `k`.
pub fn attribute_token(k: usize, c: usize) -> usize {
    ATTRIBUTE_CLASSES[..k].iter().sum::<usize>() + c
}

/// 61 attribute tokens (`q{k}_{c}`) followed by the noise tokens.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = ATTRIBUTE_CLASSES.iter().enumerate().flat_map(|(k, &n)| (0..n).map(move |c| format!("q{k}_{c}"))).collect();
    v.extend((0..NOISE_VOCAB).map(|i| format!("noise{i}")));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    pub z: Vec<f64>,
    /// `Wz + ε` before phase jitter.
    pub features: Vec<f64>,
    pub phases: PhaseSet,
    pub attributes: Vec<usize>,
    pub malignant: bool,
    pub aggressive: bool,
    /// Original report tokens, then the shuffled versions.
    pub tokens: Vec<Vec<usize>>,
    pub time: f64,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub seed: u64,
    pub mixing: Array2<f64>,
    /// Unit projection direction of each attribute.
    pub directions: Array2<f64>,
    /// Bin edges per attribute on the standard-normal projection.
    pub cuts: Vec<Vec<f64>>,
    /// True log-hazard coefficients on `z`.
    pub beta: Vec<f64>,
    pub patients: Vec<Patient>,
    pub fingerprint: String,
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn bin(value: f64, cuts: &[f64]) -> usize {
    cuts.partition_point(|&c| c < value)
}

/// Content digest of the generated patients.
fn fingerprint(patients: &[Patient], seed: u64) -> Result<String> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(patients)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Generates `n` patients; identical `(n, seed, config)` give identical cohorts.
pub fn gen_cohort(n: usize, seed: u64, cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("cohort size must be >= 1"));
    }
    let d = cfg.latent_dim;
    let mut g = rng::derive(seed, 0);
    let mixing: Array2<f64> = Array2::from_shape_fn((cfg.feature_dim, d), |_| g.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());

    let mut directions = Array2::zeros((ATTRIBUTE_CLASSES.len(), d));
    for k in 0..ATTRIBUTE_CLASSES.len() {
        let dir = match k {
            MALIGNANCY_ATTRIBUTE => Array1::from_shape_fn(d, |i| f64::from(u8::from(i == 0))),
            AGGRESSIVENESS_ATTRIBUTE => Array1::from_shape_fn(d, |i| f64::from(u8::from(i == 1))),
            k if MALIGNANCY_LINKED.contains(&k) => {
                let mut r = unit_vector(&mut g, d);
                r[0] = 0.0;
                let r = &r / r.dot(&r).sqrt().max(1e-12);
                let mut v = r * 0.3;
                v[0] = (1.0f64 - 0.09).sqrt();
                v
            }
            _ => unit_vector(&mut g, d),
        };
        directions.row_mut(k).assign(&dir);
    }
    let normal = Normal::standard();
    let cuts: Vec<Vec<f64>> =
        ATTRIBUTE_CLASSES.iter().map(|&c| (1..c).map(|j| normal.inverse_cdf(j as f64 / c as f64)).collect()).collect();
    let mut beta = vec![0.0; d];
    beta[1] = cfg.beta;

    let base_tokens = ATTRIBUTE_CLASSES.iter().sum::<usize>();
    let mut patients = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = rng::derive(seed, 1 + i as u64);
        let z: Array1<f64> = (0..d).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
        let mut x = mixing.dot(&z);
        x.mapv_inplace(|v| v + cfg.noise_sigma * g.sample::<f64, _>(StandardNormal));
        let attributes: Vec<usize> = (0..ATTRIBUTE_CLASSES.len()).map(|k| bin(directions.row(k).dot(&z), &cuts[k])).collect();

        let k = cfg.phases.unwrap_or_else(|| g.random_range(1..=4));
        let mut tags = Phase::ALL.to_vec();
        tags.shuffle(&mut g);
        tags.truncate(k);
        if tags == [Phase::N] {
            tags[0] = Phase::V;
        }
        let mut inputs = BTreeMap::new();
        for p in tags {
            let jittered: Vec<f64> = x.iter().map(|v| v + cfg.phase_sigma * g.sample::<f64, _>(StandardNormal)).collect();
            inputs.insert(p, jittered);
        }

        let mut original: Vec<usize> = attributes.iter().enumerate().map(|(k, &c)| attribute_token(k, c)).collect();
        original.extend((0..cfg.noise_tokens).map(|_| base_tokens + g.random_range(0..NOISE_VOCAB)));
        let mut tokens = vec![original.clone()];
        for _ in 0..cfg.shuffles {
            let mut s = original.clone();
            s.shuffle(&mut g);
            tokens.push(s);
        }

        let hazard = cfg.lambda0 * (cfg.beta * z[1]).exp();
        let t_event = Exp::new(hazard).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut g);
        let t_censor =
            if cfg.lambda_c > 0.0 { Exp::new(cfg.lambda_c).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut g) } else { f64::INFINITY };
        let event = t_event <= t_censor;
        patients.push(Patient {
            id: format!("P{i:05}"),
            z: z.to_vec(),
            features: x.to_vec(),
            phases: PhaseSet::new(inputs)?,
            attributes,
            malignant: z[0] > 0.0,
            aggressive: z[1] > 0.0,
            tokens,
            time: t_event.min(t_censor).max(f64::MIN_POSITIVE),
            event,
        });
    }
    let fingerprint = fingerprint(&patients, seed)?;
    Ok(SynthCohort { config: cfg.clone(), seed, mixing, directions, cuts, beta, patients, fingerprint })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    /// `βᵀz`, the true log-hazard.
    pub linear_predictor: Vec<f64>,
    /// `z₀`: ranks malignancy perfectly.
    pub malignancy_score: Vec<f64>,
    /// `P(malignant | z)`, an indicator since the label is a function of `z`.
    pub malignancy_posterior: Vec<f64>,
    pub aggressiveness_posterior: Vec<f64>,
}

/// Ground-truth scores; rejects cohorts not produced (unaltered) by
/// [`gen_cohort`].
pub fn oracle_scores(cohort: &SynthCohort) -> Result<OracleScores> {
    if fingerprint(&cohort.patients, cohort.seed)? != cohort.fingerprint {
        return Err(Error::invalid("cohort fingerprint mismatch: not generated by this module or altered"));
    }
    let lp = cohort.patients.iter().map(|p| p.z.iter().zip(&cohort.beta).map(|(a, b)| a * b).sum()).collect();
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(OracleScores {
        linear_predictor: lp,
        malignancy_score: cohort.patients.iter().map(|p| p.z[0]).collect(),
        malignancy_posterior: cohort.patients.iter().map(|p| ind(p.malignant)).collect(),
        aggressiveness_posterior: cohort.patients.iter().map(|p| ind(p.aggressive)).collect(),
    })
}

/// Benign/malignant descriptors built from the malignancy-linked tokens.
pub fn malignancy_prompt_classes() -> Vec<(String, Vec<String>)> {
    let vocab = vocabulary();
    let tok = |k: usize, c: usize| vocab[attribute_token(k, c)].clone();
    let [a, b] = MALIGNANCY_LINKED;
    let m = MALIGNANCY_ATTRIBUTE;
    let (la, lb) = (ATTRIBUTE_CLASSES[a] - 1, ATTRIBUTE_CLASSES[b] - 1);
    let benign = vec![
        tok(m, 0),
        format!("{} {}", tok(m, 0), tok(a, 0)),
        format!("{} {}", tok(m, 0), tok(b, 0)),
        format!("{} {} {}", tok(m, 0), tok(a, 0), tok(b, 0)),
        format!("{} {}", tok(a, 0), tok(b, 0)),
    ];
    let malignant = vec![
        tok(m, 1),
        format!("{} {}", tok(m, 1), tok(a, la)),
        format!("{} {}", tok(m, 1), tok(b, lb)),
        format!("{} {} {}", tok(m, 1), tok(a, la), tok(b, lb)),
        format!("{} {}", tok(a, la), tok(b, lb)),
    ];
    vec![("benign".into(), benign), ("malignant".into(), malignant)]
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn dim_header(prefix: &str, n: usize) -> String {
    (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

#[derive(Serialize)]
struct TokenLine<'a> {
    id: &'a str,
    versions: &'a [Vec<usize>],
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    seed: u64,
    n: usize,
    config: &'a SynthConfig,
    beta: &'a [f64],
    attribute_classes: &'a [usize],
    malignancy_attribute: usize,
    aggressiveness_attribute: usize,
    cuts: &'a [Vec<f64>],
    directions: &'a Array2<f64>,
    mixing: &'a Array2<f64>,
    fingerprint: &'a str,
}

/// File names written by [`write_cohort`].
pub const COHORT_FILES: [&str; 9] = [
    "features.csv",
    "phases.csv",
    "attributes.csv",
    "labels.csv",
    "survival.csv",
    "tokens.jsonl",
    "vocab.json",
    "prompts.json",
    "ground_truth.json",
];

/// Writes the cohort as tabular files into `dir`; returns the written paths.
pub fn write_cohort(cohort: &SynthCohort, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let ps = &cohort.patients;
    let f = cohort.config.feature_dim;
    let d = cohort.config.latent_dim;
    let p = |name: &str| dir.join(name);
    write_lines(
        &p("features.csv"),
        &format!("id,{}", dim_header("d", f)),
        ps.iter().map(|q| format!("{},{}", q.id, fmt_row(q.features.iter().copied()))),
    )?;
    write_lines(
        &p("phases.csv"),
        &format!("id,phase,{}", dim_header("d", f)),
        ps.iter().flat_map(|q| {
            q.phases.first(4).into_iter().map(move |(ph, v)| format!("{},{},{}", q.id, ph.tag(), fmt_row(v.iter().copied())))
        }),
    )?;
    write_lines(
        &p("attributes.csv"),
        &format!("id,{}", dim_header("a", ATTRIBUTE_CLASSES.len())),
        ps.iter().map(|q| format!("{},{}", q.id, q.attributes.iter().map(usize::to_string).collect::<Vec<_>>().join(","))),
    )?;
    write_lines(
        &p("labels.csv"),
        "id,malignant,aggressive",
        ps.iter().map(|q| format!("{},{},{}", q.id, u8::from(q.malignant), u8::from(q.aggressive))),
    )?;
    let oracle = oracle_scores(cohort)?;
    write_lines(
        &p("survival.csv"),
        &format!("id,time,event,score,{}", dim_header("z", d)),
        ps.iter().zip(&oracle.linear_predictor).map(|(q, lp)| {
            format!("{},{:?},{},{:?},{}", q.id, q.time, u8::from(q.event), lp, fmt_row(q.z.iter().copied()))
        }),
    )?;
    let mut tok = std::io::BufWriter::new(std::fs::File::create(p("tokens.jsonl"))?);
    for q in ps {
        serde_json::to_writer(&mut tok, &TokenLine { id: &q.id, versions: &q.tokens })?;
        tok.write_all(b"\n")?;
    }
    tok.flush()?;
    std::fs::write(p("vocab.json"), serde_json::to_vec_pretty(&vocabulary())?)?;
    let classes: serde_json::Map<String, serde_json::Value> =
        malignancy_prompt_classes().into_iter().map(|(k, v)| (k, serde_json::json!(v))).collect();
    let prompts = serde_json::json!({ "templates": DEFAULT_TEMPLATES, "classes": classes });
    std::fs::write(p("prompts.json"), serde_json::to_vec_pretty(&prompts)?)?;
    let gt = GroundTruth {
        seed: cohort.seed,
        n: ps.len(),
        config: &cohort.config,
        beta: &cohort.beta,
        attribute_classes: &ATTRIBUTE_CLASSES,
        malignancy_attribute: MALIGNANCY_ATTRIBUTE,
        aggressiveness_attribute: AGGRESSIVENESS_ATTRIBUTE,
        cuts: &cohort.cuts,
        directions: &cohort.directions,
        mixing: &cohort.mixing,
        fingerprint: &cohort.fingerprint,
    };
    std::fs::write(p("ground_truth.json"), serde_json::to_vec_pretty(&gt)?)?;
    Ok(COHORT_FILES.iter().map(|f| p(f)).collect())
}

/// Analytic event fraction `E[λ_h/(λ_h+λ_c)]` with `λ_h = λ0·exp(β z₁)`,
/// by Gauss–Hermite-free trapezoidal integration over `z₁ ~ N(0,1)`.
pub fn expected_event_fraction(cfg: &SynthConfig) -> f64 {
    if cfg.lambda_c == 0.0 {
        return 1.0;
    }
    let (lo, hi, steps) = (-10.0f64, 10.0f64, 20_000);
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| {
        let lh = cfg.lambda0 * (cfg.beta * z).exp();
        lh / (lh + cfg.lambda_c) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    (0..=steps).map(|i| {
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        w * f(lo + i as f64 * h)
    }).sum::<f64>() * h
}

impl SynthCohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// `n × F` matrix of pre-jitter image features.
    pub fn feature_matrix(&self) -> Array2<f64> {
        let f = self.config.feature_dim;
        let mut m = Array2::zeros((self.len(), f));
        for (mut row, p) in m.rows_mut().into_iter().zip(&self.patients) {
            row.assign(&ArrayView1::from(&p.features));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clfmetrics::roc_auc;

    #[test]
    fn deterministic_and_fingerprinted() {
        let cfg = SynthConfig::default();
        let a = gen_cohort(50, 3, &cfg).unwrap();
        assert_eq!(a, gen_cohort(50, 3, &cfg).unwrap());
        assert_ne!(a.fingerprint, gen_cohort(50, 4, &cfg).unwrap().fingerprint);
        let mut b = a.clone();
        b.patients[0].time += 1.0;
        assert!(oracle_scores(&b).is_err());
        assert!(gen_cohort(0, 0, &cfg).is_err());
    }

    #[test]
    fn oracle_auc_and_flip() {
        let c = gen_cohort(300, 1, &SynthConfig { noise_sigma: 0.0, ..SynthConfig::default() }).unwrap();
        let o = oracle_scores(&c).unwrap();
        let y: Vec<bool> = c.patients.iter().map(|p| p.malignant).collect();
        assert_eq!(roc_auc(&o.malignancy_score, &y).unwrap(), 1.0);
        let flipped: Vec<bool> = y.iter().map(|b| !b).collect();
        assert_eq!(roc_auc(&o.malignancy_score, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn no_censoring_means_all_events() {
        let c = gen_cohort(200, 2, &SynthConfig { lambda_c: 0.0, ..SynthConfig::default() }).unwrap();
        assert!(c.patients.iter().all(|p| p.event));
    }

    #[test]
    fn tokens_and_phases() {
        let c = gen_cohort(100, 5, &SynthConfig::default()).unwrap();
        let v = vocabulary();
        assert_eq!(v.len(), 64);
        for p in &c.patients {
            assert_eq!(p.tokens.len(), 5);
            assert_eq!(p.tokens[0].len(), 15);
            assert_eq!(p.tokens[0][MALIGNANCY_ATTRIBUTE], attribute_token(MALIGNANCY_ATTRIBUTE, usize::from(p.malignant)));
            let mut a = p.tokens[0].clone();
            let mut b = p.tokens[3].clone();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
            assert!((1..=4).contains(&p.phases.len()));
            assert!(p.phases.available().iter().any(|ph| ph.is_contrast()));
        }
    }

    #[test]
    fn prompt_descriptors_are_in_vocab() {
        let v = vocabulary();
        for (_, descs) in malignancy_prompt_classes() {
            assert_eq!(descs.len(), 5);
            for d in descs {
                assert!(d.split(' ').all(|w| v.contains(&w.to_string())));
            }
        }
    }
}
