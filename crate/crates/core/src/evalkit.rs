//! Metrics and reports: equal error rate, per-user accuracy and band
//! attenuation between cohorts.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::dsp::{band_powers, band_rows, stft, to_db, write_band_csv, BandProfile, BandRow, DspError, StftParams};
use crate::keydp::{KeyError, KeySet};
use crate::signet::{sign_audio, SignatureNet, SignetError};
use crate::threatlab::{clone_proxy, stream_rng, AttackParams, Corpus, ThreatError};
use crate::trainer::Role;
use crate::vernet::{verify_audio, VerifierNet, VernetError, DEFAULT_THRESHOLD};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("user {user} has {positives} positives and {negatives} negatives")]
    Unbalanced {
        user: String,
        positives: usize,
        negatives: usize,
    },
    #[error("user {user} has {clips} evaluation clips; need an even number of at least 2")]
    ClipCount { user: String, clips: usize },
    #[error(transparent)]
    Signet(#[from] SignetError),
    #[error(transparent)]
    Vernet(#[from] VernetError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("cannot write {path}: {detail}")]
    Io { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

fn check_scores(name: &'static str, scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(EvalError::Empty(name));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(bad));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Equal error rate with acceptance at `score >= t`.
///
/// Candidate thresholds are the lowest score, the midpoints between adjacent
/// distinct scores, and a reject-all point above the highest score. The
/// first candidate where FAR no longer exceeds FRR decides: an exact tie is
/// returned as is, otherwise the error rates are interpolated linearly from
/// the candidate before it. A threshold interpolated towards the reject-all
/// point is reported as the highest score.
pub fn compute_eer(pos: &[f64], neg: &[f64]) -> Result<Eer> {
    let pos = check_scores("positive score set", pos)?;
    let neg = check_scores("negative score set", neg)?;
    let mut distinct: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![distinct[0]];
    candidates.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let rates = |t: f64| {
        let frr = pos.partition_point(|&s| s < t) as f64 / pos.len() as f64;
        let far = (neg.len() - neg.partition_point(|&s| s < t)) as f64 / neg.len() as f64;
        (far, frr)
    };
    let top = *distinct.last().expect("nonempty");
    let mut prev: Option<(f64, f64, f64)> = None;
    for t in candidates.into_iter().map(Some).chain([None]) {
        let (far, frr) = t.map_or((0.0, 1.0), rates);
        let d = far - frr;
        if d <= 0.0 {
            if d == 0.0 {
                return Ok(Eer {
                    eer: far,
                    threshold: t.unwrap_or(top),
                });
            }
            let (t0, far0, frr0) = prev.expect("the lowest score accepts every sample");
            let d0 = far0 - frr0;
            let w = d0 / (d0 - d);
            let t1 = t.unwrap_or(top);
            return Ok(Eer {
                eer: far0 + w * (far - far0),
                threshold: t0 + w * (t1 - t0),
            });
        }
        prev = Some((t.expect("reject-all point is last"), far, frr));
    }
    unreachable!("the reject-all point has FAR 0 and FRR 1")
}

/// One scored evaluation clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub user_id: String,
    pub role: Role,
    /// 1 when the clip should verify as signed.
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAccuracy {
    pub user_id: String,
    pub accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Accuracy per user at `threshold`, in order of first appearance. Every
/// user needs as many positives as negatives.
pub fn per_user_accuracy(samples: &[EvalSample], threshold: f64) -> Result<Vec<UserAccuracy>> {
    if samples.is_empty() {
        return Err(EvalError::Empty("sample set"));
    }
    let mut order = Vec::new();
    let mut tally: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for s in samples {
        let entry = tally.entry(&s.user_id).or_insert_with(|| {
            order.push(s.user_id.as_str());
            (0, 0, 0)
        });
        if s.label == 1 {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
        entry.2 += usize::from((s.score >= threshold) == (s.label == 1));
    }
    order
        .into_iter()
        .map(|user| {
            let (positives, negatives, correct) = tally[user];
            if positives != negatives {
                return Err(EvalError::Unbalanced {
                    user: user.to_string(),
                    positives,
                    negatives,
                });
            }
            Ok(UserAccuracy {
                user_id: user.to_string(),
                accuracy: correct as f64 / (positives + negatives) as f64,
                positives,
                negatives,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quartiles with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    let v = check_scores("value set", values)?;
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Ok(Quartiles {
        min: v[0],
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
        max: v[v.len() - 1],
    })
}

/// Mean band profiles of two cohorts and the per-band difference `a - b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub cohort_a: BandProfile,
    pub cohort_b: BandProfile,
    pub delta_db: Vec<f64>,
}

impl BandReport {
    /// Rows in the band CSV layout, labelled per cohort.
    pub fn rows(&self, label_a: &str, label_b: &str) -> Vec<BandRow> {
        let mut rows = band_rows(&self.cohort_a, label_a);
        rows.extend(band_rows(&self.cohort_b, label_b));
        rows.extend(band_rows(
            &BandProfile {
                band_width_hz: self.cohort_a.band_width_hz,
                energies_db: self.delta_db.clone(),
            },
            &format!("{label_a}-{label_b}"),
        ));
        rows
    }
}

fn cohort_profile(clips: &[AudioClip], params: StftParams, band_width_hz: f64) -> Result<BandProfile> {
    if clips.is_empty() {
        return Err(EvalError::Empty("cohort"));
    }
    let powers = clips
        .par_iter()
        .map(|c| Ok(band_powers(&stft(c, params)?, band_width_hz)?))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; powers.iter().map(Vec::len).min().unwrap_or(0)];
    for p in &powers {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / powers.len() as f64;
        }
    }
    Ok(BandProfile {
        band_width_hz,
        energies_db: mean.into_iter().map(to_db).collect(),
    })
}

/// Compares the average spectra of two cohorts in bands of `band_width_hz`.
pub fn band_attenuation_report(cohort_a: &[AudioClip], cohort_b: &[AudioClip], band_width_hz: f64) -> Result<BandReport> {
    let params = StftParams::default();
    let a = cohort_profile(cohort_a, params, band_width_hz)?;
    let b = cohort_profile(cohort_b, params, band_width_hz)?;
    let delta_db = a.energies_db.iter().zip(&b.energies_db).map(|(x, y)| x - y).collect();
    Ok(BandReport {
        cohort_a: a,
        cohort_b: b,
        delta_db,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub seed: u64,
    pub band_width_hz: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            band_width_hz: 600.0,
        }
    }
}

/// Everything the evaluation protocol produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub eer: Eer,
    pub users: Vec<UserAccuracy>,
    pub accuracy_quartiles: Quartiles,
    /// Fraction of signed clips verifying as signed.
    pub signed_acceptance: f64,
    /// Fraction of clones of signed clips verifying as unsigned.
    pub clone_rejection: f64,
    pub original_rejection: f64,
    /// Originals against clone-proxy outputs of the same clips.
    pub bands_clone: BandReport,
    /// Originals against their signed versions.
    pub bands_signed: BandReport,
    pub samples: Vec<EvalSample>,
}

struct UserEval {
    samples: Vec<EvalSample>,
    originals: Vec<AudioClip>,
    signed: Vec<AudioClip>,
    clones: Vec<AudioClip>,
}

fn evaluate_user(
    user_index: usize,
    user_id: &str,
    clips: &[AudioClip],
    keys: &KeySet,
    signet: &SignatureNet<f32>,
    vernet: &VerifierNet<f32>,
    cfg: &EvalConfig,
) -> Result<UserEval> {
    if clips.len() < 2 || clips.len() % 2 != 0 {
        return Err(EvalError::ClipCount {
            user: user_id.to_string(),
            clips: clips.len(),
        });
    }
    let key = keys.get(user_id)?;
    let half = clips.len() / 2;
    let mut out = UserEval {
        samples: Vec::with_capacity(clips.len()),
        originals: clips.to_vec(),
        signed: Vec::with_capacity(clips.len()),
        clones: Vec::with_capacity(clips.len()),
    };
    for (c, clip) in clips.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, ((user_index as u64) << 32) | c as u64);
        let signed = sign_audio(clip, key, signet)?;
        let clone_original = clone_proxy(clip, &AttackParams::sample(&mut rng), &mut rng)?;
        let (role, probe) = if c < half {
            (Role::Signed, signed.clone())
        } else if (c - half) % 2 == 0 {
            (Role::Original, clip.clone())
        } else {
            (Role::CloneOfSigned, clone_proxy(&signed, &AttackParams::sample(&mut rng), &mut rng)?)
        };
        let verdict = verify_audio(&probe, vernet, cfg.threshold)?;
        out.samples.push(EvalSample {
            user_id: user_id.to_string(),
            role,
            label: role.label(),
            score: verdict.score,
        });
        out.signed.push(signed);
        out.clones.push(clone_original);
    }
    Ok(out)
}

fn rate(samples: &[EvalSample], role: Role, threshold: f64) -> f64 {
    let picked: Vec<&EvalSample> = samples.iter().filter(|s| s.role == role).collect();
    if picked.is_empty() {
        return f64::NAN;
    }
    let correct = picked.iter().filter(|s| (s.score >= threshold) == (s.label == 1)).count();
    correct as f64 / picked.len() as f64
}

/// Runs the protocol on every user of `corpus`: the first half of each
/// user's clips is signed with the user's key, the second half alternates
/// untouched originals and clones of signed clips.
pub fn evaluate(
    corpus: &Corpus,
    keys: &KeySet,
    signet: &SignatureNet<f32>,
    vernet: &VerifierNet<f32>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if corpus.users.is_empty() {
        return Err(EvalError::Empty("corpus"));
    }
    let per_user = corpus
        .users
        .par_iter()
        .enumerate()
        .map(|(i, u)| evaluate_user(i, &u.user_id, &u.clips, keys, signet, vernet, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    let (mut originals, mut signed, mut clones) = (Vec::new(), Vec::new(), Vec::new());
    for u in per_user {
        samples.extend(u.samples);
        originals.extend(u.originals);
        signed.extend(u.signed);
        clones.extend(u.clones);
    }
    let pos: Vec<f64> = samples.iter().filter(|s| s.label == 1).map(|s| s.score).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| s.label == 0).map(|s| s.score).collect();
    let users = per_user_accuracy(&samples, cfg.threshold)?;
    let accs: Vec<f64> = users.iter().map(|u| u.accuracy).collect();
    Ok(EvalReport {
        config: *cfg,
        eer: compute_eer(&pos, &neg)?,
        accuracy_quartiles: quartiles(&accs)?,
        users,
        signed_acceptance: rate(&samples, Role::Signed, cfg.threshold),
        clone_rejection: rate(&samples, Role::CloneOfSigned, cfg.threshold),
        original_rejection: rate(&samples, Role::Original, cfg.threshold),
        bands_clone: band_attenuation_report(&originals, &clones, cfg.band_width_hz)?,
        bands_signed: band_attenuation_report(&originals, &signed, cfg.band_width_hz)?,
        samples,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_band_report(path: &Path, rows: &[BandRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_band_csv(std::io::BufWriter::new(file), rows)?;
    Ok(())
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.json`, `per_user.csv`, `quartiles.csv`, `scores.csv`
    /// and `bands.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| io_err(&json, e))?;
        write_csv(&dir.join("per_user.csv"), &self.users)?;
        write_csv(&dir.join("quartiles.csv"), &[self.accuracy_quartiles])?;
        write_csv(&dir.join("scores.csv"), &self.samples)?;
        let mut rows = self.bands_clone.rows("original", "clone_proxy");
        rows.extend(
            self.bands_signed
                .rows("original", "signed")
                .into_iter()
                .filter(|r| r.cohort_label != "original"),
        );
        write_band_report(&dir.join("bands.csv"), &rows)
    }
}
