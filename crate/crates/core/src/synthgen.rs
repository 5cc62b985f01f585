//! Seeded synthetic consultation platform: entities with attributes, an
//! offline care network, online consultations with dialogues, and failure
//! labels drawn from a calibrated logistic model.
//!
//! The failure logit of a consultation is
//!
//! ```text
//! b + s_match·mismatch + s_doctor·(−quality_d) + s_latency·z(latency_d)
//!   + s_recency·trend_d + s_patient·shopper_p
//! ```
//!
//! where `b` is bisected so the expected failure rate hits the target.
//! `s_text` controls how often late dialogue turns carry outcome-revealing
//! words.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};

use crate::dataset::Dataset;
use crate::dialogue::{ConsultationRecord, Label, Sentence, Speaker};
use crate::error::{Error, Result};
use crate::graph::{AttributeTable, EntityKind, EntityRef, KnowledgeNetwork, Relation, Triple, View};
use crate::linalg::sigmoid;

const DAY: i64 = 86_400;
const HOUR: i64 = 3_600;
const CATEGORIES: usize = 5;
const REGIONS: usize = 6;

const FAILURE_WORDS: [&str; 5] = ["unsure", "cannot", "unclear", "elsewhere", "sorry"];
const ADVICE_WORDS: [&str; 5] = ["prescribe", "recommend", "dosage", "followup", "improve"];
const PATIENT_DOUBT: [&str; 3] = ["confused", "still", "worse"];
const FILLER: [&str; 16] = [
    "the", "and", "please", "today", "pain", "since", "week", "take", "check", "report", "feel",
    "night", "morning", "doctor", "thanks", "hello",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub patients: usize,
    pub doctors: usize,
    pub hospitals: usize,
    pub diseases: usize,
    pub consultations: usize,
    pub offline_visits: usize,
    /// Target marginal failure probability.
    pub failure_rate: f64,
    /// Effect of consulting a doctor outside their specialty.
    pub s_match: f64,
    /// Effect of the doctor's (standardized log) reply latency.
    pub s_latency: f64,
    /// Strength of outcome-revealing words in late dialogue turns.
    pub s_text: f64,
    /// Effect of the doctor's activity trend: doctors whose caseload grows
    /// over the span fail more often. Only the timing of their consultations
    /// reveals the trend.
    pub s_recency: f64,
    /// Effect of latent doctor quality (tied to title and hospital level).
    pub s_doctor: f64,
    /// Effect of a patient being a frequent, unfocused consulter.
    pub s_patient: f64,
    /// Mean sentences per dialogue (≥ 2).
    pub dialogue_length: f64,
    pub span_days: i64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            patients: 2000,
            doctors: 200,
            hospitals: 30,
            diseases: 20,
            consultations: 5000,
            offline_visits: 4000,
            failure_rate: 0.0518,
            s_match: 5.0,
            s_latency: 0.8,
            s_text: 1.0,
            s_recency: 2.0,
            s_doctor: 4.0,
            s_patient: 4.0,
            dialogue_length: 8.0,
            span_days: 180,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.doctors == 0 || self.hospitals == 0 || self.diseases == 0 {
            return Err(Error::Config("entity counts must be positive".into()));
        }
        if !(self.dialogue_length >= 2.0) || !self.dialogue_length.is_finite() {
            return Err(Error::Config("dialogue_length must be at least 2".into()));
        }
        if self.span_days <= 0 {
            return Err(Error::Config("span_days must be positive".into()));
        }
        let strengths = [self.s_match, self.s_latency, self.s_text, self.s_recency, self.s_doctor, self.s_patient];
        if strengths.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("signal strengths must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Intercept `b` with `mean σ(b + xᵢ) = target`, by bisection.
pub fn calibrate_intercept(logits: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Calibration(format!("failure rate {target} must lie strictly inside (0, 1)")));
    }
    if logits.is_empty() {
        return Err(Error::Calibration("no consultations to calibrate on".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Calibration("non-finite failure logit".into()));
    }
    let rate = |b: f64| logits.iter().map(|x| sigmoid(b + x)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate(lo) > target || rate(hi) < target {
        return Err(Error::Calibration(format!("failure rate {target} is unreachable")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

struct Doctor {
    entity: EntityRef,
    hospital: usize,
    title: usize,
    specialties: Vec<usize>,
    quality: f64,
    latency_hours: f64,
    trend: f64,
}

struct Patient {
    entity: EntityRef,
    diseases: Vec<usize>,
    shopper: bool,
    region: usize,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn id(prefix: &str, i: usize, n: usize) -> String {
    let width = n.max(1).to_string().len();
    format!("{prefix}{i:0width$}")
}

fn sentence<R: Rng + ?Sized>(rng: &mut R, extra: &[&str]) -> String {
    let n = rng.random_range(3..7);
    let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).unwrap()).collect();
    for w in extra {
        let at = rng.random_range(0..=words.len());
        words.insert(at, w);
    }
    words.join(" ")
}

/// Generates a dataset. Fails when the target failure rate cannot be
/// calibrated.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let span = cfg.span_days * DAY;
    let mut attributes = AttributeTable::default();
    let mut triples = Vec::new();

    // Entities.
    let diseases: Vec<EntityRef> = (0..cfg.diseases)
        .map(|i| EntityRef::disease(&id("dis", i, cfg.diseases)))
        .collect();
    let category = |d: usize| d % CATEGORIES;
    for (i, d) in diseases.iter().enumerate() {
        attributes.insert(d.clone(), vec![("category".into(), format!("c{}", category(i)))])?;
    }

    let mut rng = rng_for(cfg.seed, 1);
    let hospitals: Vec<(EntityRef, usize, usize)> = (0..cfg.hospitals)
        .map(|i| {
            let level = rng.random_range(1..=3usize);
            let region = rng.random_range(0..REGIONS);
            (EntityRef::hospital(&id("hos", i, cfg.hospitals)), level, region)
        })
        .collect();
    for (h, level, region) in &hospitals {
        attributes.insert(
            h.clone(),
            vec![("level".into(), level.to_string()), ("region".into(), format!("r{region}"))],
        )?;
    }

    let by_category: Vec<Vec<usize>> = (0..CATEGORIES)
        .map(|c| (0..cfg.diseases).filter(|&d| category(d) == c).collect())
        .collect();
    let mut rng = rng_for(cfg.seed, 2);
    let noise = Normal::new(0.0, 0.25).unwrap();
    let latency = LogNormal::new((0.7f64).ln(), 0.8).unwrap();
    let doctors: Vec<Doctor> = (0..cfg.doctors)
        .map(|i| {
            let hospital = rng.random_range(0..cfg.hospitals);
            let title = rng.random_range(0..4usize);
            let mut cat = rng.random_range(0..CATEGORIES);
            while by_category[cat].is_empty() {
                cat = (cat + 1) % CATEGORIES;
            }
            let pool = &by_category[cat];
            let k = rng.random_range(1..=pool.len().min(3));
            let mut specialties: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
            specialties.sort_unstable();
            let level = hospitals[hospital].1;
            Doctor {
                entity: EntityRef::doctor(&id("doc", i, cfg.doctors)),
                hospital,
                title,
                specialties,
                quality: 0.6 * title as f64 + 0.4 * level as f64 - 1.7 + noise.sample(&mut rng),
                latency_hours: latency.sample(&mut rng),
                trend: rng.sample(rand_distr::StandardNormal),
            }
        })
        .collect();
    const TITLES: [&str; 4] = ["resident", "attending", "associate", "chief"];
    for d in &doctors {
        attributes.insert(
            d.entity.clone(),
            vec![
                ("title".into(), TITLES[d.title].into()),
                ("specialty".into(), format!("c{}", category(d.specialties[0]))),
            ],
        )?;
    }
    let log_lat: Vec<f64> = doctors.iter().map(|d| d.latency_hours.ln()).collect();
    let (lat_mean, lat_sd) = mean_sd(&log_lat);

    let mut rng = rng_for(cfg.seed, 3);
    let patients: Vec<Patient> = (0..cfg.patients)
        .map(|i| {
            let k = rng.random_range(1..=2usize.min(cfg.diseases));
            let diseases = rand::seq::index::sample(&mut rng, cfg.diseases, k).into_vec();
            Patient {
                entity: EntityRef::patient(&id("pat", i, cfg.patients)),
                diseases,
                shopper: rng.random_bool(0.15),
                region: rng.random_range(0..REGIONS),
            }
        })
        .collect();
    for p in &patients {
        let age = ["0-17", "18-34", "35-49", "50-64", "65+"][rng.random_range(0..5)];
        let sex = ["f", "m"][rng.random_range(0..2)];
        attributes.insert(
            p.entity.clone(),
            vec![
                ("age".into(), age.into()),
                ("sex".into(), sex.into()),
                ("region".into(), format!("r{}", p.region)),
            ],
        )?;
    }

    // Offline view: affiliations, specialties, in-person visits.
    let mut rng = rng_for(cfg.seed, 4);
    let early = |rng: &mut ChaCha8Rng| rng.random_range(0..(30 * DAY).min(span));
    for d in &doctors {
        let t = early(&mut rng);
        triples.push(Triple::new(View::Offline, t, d.entity.clone(), Relation::DocHosp, hospitals[d.hospital].0.clone())?);
        for &s in &d.specialties {
            let t = early(&mut rng);
            triples.push(Triple::new(View::Offline, t, d.entity.clone(), Relation::DocDis, diseases[s].clone())?);
        }
    }
    let mut staff: Vec<Vec<usize>> = vec![Vec::new(); cfg.hospitals];
    for (i, d) in doctors.iter().enumerate() {
        staff[d.hospital].push(i);
    }
    let regional: Vec<Vec<usize>> = (0..REGIONS)
        .map(|r| (0..cfg.hospitals).filter(|&h| hospitals[h].2 == r && !staff[h].is_empty()).collect())
        .collect();
    let staffed: Vec<usize> = (0..cfg.hospitals).filter(|&h| !staff[h].is_empty()).collect();
    for _ in 0..cfg.offline_visits {
        let p = &patients[rng.random_range(0..cfg.patients)];
        let dis = *p.diseases.choose(&mut rng).unwrap();
        let h = *regional[p.region].choose(&mut rng).unwrap_or_else(|| staffed.choose(&mut rng).unwrap());
        let fitting: Vec<usize> = staff[h].iter().copied().filter(|&d| doctors[d].specialties.contains(&dis)).collect();
        let d = *fitting.choose(&mut rng).unwrap_or_else(|| staff[h].choose(&mut rng).unwrap());
        let t = rng.random_range(0..span);
        triples.push(Triple::new(View::Offline, t, p.entity.clone(), Relation::PatHosp, hospitals[h].0.clone())?);
        triples.push(Triple::new(View::Offline, t, p.entity.clone(), Relation::PatDoc, doctors[d].entity.clone())?);
        triples.push(Triple::new(View::Offline, t, p.entity.clone(), Relation::PatDis, diseases[dis].clone())?);
    }

    // Online consultations.
    let mut rng = rng_for(cfg.seed, 5);
    let patient_weights: Vec<f64> = patients.iter().map(|p| if p.shopper { 4.0 } else { 1.0 }).collect();
    let patient_pick = rand::distr::weighted::WeightedIndex::new(&patient_weights)
        .map_err(|e| Error::Config(e.to_string()))?;
    struct Draft {
        patient: usize,
        doctor: usize,
        disease: usize,
        t: i64,
        logit: f64,
    }
    let mut drafts = Vec::with_capacity(cfg.consultations);
    for _ in 0..cfg.consultations {
        let t = rng.random_range(0..span);
        let phase = 2.0 * t as f64 / span as f64 - 1.0;
        let pi = patient_pick.sample(&mut rng);
        let p = &patients[pi];
        let dis = *p.diseases.choose(&mut rng).unwrap();
        let activity: Vec<f64> = doctors.iter().map(|d| (d.trend * phase).exp()).collect();
        let focused = rng.random_bool(if p.shopper { 0.4 } else { 0.8 });
        let candidates: Vec<usize> = if focused {
            (0..cfg.doctors).filter(|&d| doctors[d].specialties.contains(&dis)).collect()
        } else {
            Vec::new()
        };
        let candidates = if candidates.is_empty() { (0..cfg.doctors).collect() } else { candidates };
        let w: Vec<f64> = candidates.iter().map(|&d| activity[d]).collect();
        let di = candidates[rand::distr::weighted::WeightedIndex::new(&w)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng)];
        let d = &doctors[di];
        let mismatch = f64::from(u8::from(!d.specialties.contains(&dis)));
        let z_lat = if lat_sd > 0.0 { (d.latency_hours.ln() - lat_mean) / lat_sd } else { 0.0 };
        let logit = cfg.s_match * mismatch - cfg.s_doctor * d.quality
            + cfg.s_latency * z_lat
            + cfg.s_recency * d.trend
            + cfg.s_patient * f64::from(u8::from(p.shopper));
        drafts.push(Draft {
            patient: pi,
            doctor: di,
            disease: dis,
            t,
            logit,
        });
    }
    let intercept = if drafts.is_empty() {
        0.0
    } else {
        calibrate_intercept(&drafts.iter().map(|d| d.logit).collect::<Vec<_>>(), cfg.failure_rate)?
    };

    let mut rng = rng_for(cfg.seed, 6);
    let p_signal = 1.0 - (-cfg.s_text).exp();
    let gap = Exp::new(1.0 / HOUR as f64).unwrap();
    let first_reply = Exp::new(1.0).unwrap();
    let rest = Poisson::new(cfg.dialogue_length - 2.0).ok();
    let mut consultations = Vec::with_capacity(drafts.len());
    for (i, dr) in drafts.iter().enumerate() {
        let label: Label = u8::from(rng.random_bool(sigmoid(intercept + dr.logit)));
        let (p, d) = (&patients[dr.patient], &doctors[dr.doctor]);
        triples.push(Triple::new(View::Online, dr.t, p.entity.clone(), Relation::PatDoc, d.entity.clone())?);
        triples.push(Triple::new(View::Online, dr.t, p.entity.clone(), Relation::PatDis, diseases[dr.disease].clone())?);
        triples.push(Triple::new(View::Online, dr.t, d.entity.clone(), Relation::DocDis, diseases[dr.disease].clone())?);

        let n = 2 + rest.map_or(0, |r| r.sample(&mut rng) as usize);
        let limit = dr.t + 24 * HOUR - 1;
        let mut ts = dr.t;
        let mut sentences = Vec::with_capacity(n);
        let dis_word = format!("dis{}", dr.disease);
        for k in 0..n {
            let speaker = if k % 2 == 0 { Speaker::Patient } else { Speaker::Doctor };
            if k == 1 {
                ts += (d.latency_hours * first_reply.sample(&mut rng) * HOUR as f64) as i64;
            } else if k > 1 {
                ts += gap.sample(&mut rng) as i64;
            }
            ts = ts.min(limit);
            let late = 2 * k >= n;
            let mut extra: Vec<&str> = Vec::new();
            if k == 0 {
                extra.push(&dis_word);
            }
            if late && rng.random_bool(p_signal) {
                // Outcome words mostly match the outcome; 10% are misleading.
                let honest = rng.random_bool(0.9);
                let fail_side = (label == 1) == honest;
                match speaker {
                    Speaker::Doctor => extra.push(if fail_side { FAILURE_WORDS.choose(&mut rng).unwrap() } else { ADVICE_WORDS.choose(&mut rng).unwrap() }),
                    Speaker::Patient if fail_side => extra.push(PATIENT_DOUBT.choose(&mut rng).unwrap()),
                    Speaker::Patient => {}
                }
            }
            sentences.push(Sentence {
                speaker,
                timestamp: ts,
                text: sentence(&mut rng, &extra),
            });
        }
        consultations.push(ConsultationRecord {
            id: id("c", i, cfg.consultations),
            patient: p.entity.clone(),
            doctor: d.entity.clone(),
            disease: diseases[dr.disease].clone(),
            hospital: hospitals[d.hospital].0.clone(),
            sentences,
            label: Some(label),
        });
    }
    consultations.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset {
        network: KnowledgeNetwork::from_triples(triples),
        attributes,
        consultations,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Odds ratio of failure for consultations whose disease is outside the
/// doctor's offline specialties, versus inside (Haldane-corrected).
pub fn mismatch_odds_ratio(ds: &Dataset) -> f64 {
    let mut spec: BTreeMap<&EntityRef, BTreeSet<&EntityRef>> = BTreeMap::new();
    for t in ds.network.triples() {
        if t.view == View::Offline && t.relation == Relation::DocDis {
            spec.entry(&t.head).or_default().insert(&t.tail);
        }
    }
    let mut n = [[0.5f64; 2]; 2];
    for c in &ds.consultations {
        let Some(l) = c.label else { continue };
        let mis = !spec.get(&c.doctor).is_some_and(|s| s.contains(&c.disease));
        n[usize::from(mis)][usize::from(l)] += 1.0;
    }
    (n[1][1] / n[1][0]) / (n[0][1] / n[0][0])
}

/// Fraction of distinct patient–doctor pairs present in exactly one view.
pub fn single_view_pair_fraction(ds: &Dataset) -> f64 {
    let mut pairs: BTreeMap<(&EntityRef, &EntityRef), [bool; 2]> = BTreeMap::new();
    for t in ds.network.triples() {
        if t.relation == Relation::PatDoc {
            pairs.entry((&t.head, &t.tail)).or_default()[usize::from(t.view == View::Offline)] = true;
        }
    }
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.values().filter(|v| v[0] != v[1]).count() as f64 / pairs.len() as f64
}

/// Summary statistics as `(name, value)` rows: entity counts by kind,
/// consultations, triples per view, dialogue shape, and the failure rate.
pub fn describe(ds: &Dataset) -> Vec<(String, f64)> {
    let ents = ds.entities();
    let count = |k: EntityKind| ents.iter().filter(|e| e.kind == k).count() as f64;
    let view = |v: View| ds.network.triples().iter().filter(|t| t.view == v).count() as f64;
    let n = ds.consultations.len();
    let per = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    let sentences: usize = ds.consultations.iter().map(|c| c.sentences.len()).sum();
    let rounds: usize = ds.consultations.iter().map(|c| c.rounds()).sum();
    let labeled: Vec<Label> = ds.consultations.iter().filter_map(|c| c.label).collect();
    let failures = labeled.iter().filter(|&&l| l == 1).count();
    let rate = if labeled.is_empty() { 0.0 } else { failures as f64 / labeled.len() as f64 };
    vec![
        ("patients".into(), count(EntityKind::Patient)),
        ("doctors".into(), count(EntityKind::Doctor)),
        ("hospitals".into(), count(EntityKind::Hospital)),
        ("diseases".into(), count(EntityKind::Disease)),
        ("consultations".into(), n as f64),
        ("online_triples".into(), view(View::Online)),
        ("offline_triples".into(), view(View::Offline)),
        ("sentences_per_consultation".into(), per(sentences)),
        ("rounds_per_consultation".into(), per(rounds)),
        ("failures".into(), failures as f64),
        ("failure_rate".into(), rate),
    ]
}
