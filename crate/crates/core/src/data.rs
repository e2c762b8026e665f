//! Samples, datasets, and the synthetic multi-domain generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};
use crate::linalg::Matrix;

/// One embedding with its identity, domain and camera labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub identity: u32,
    pub domain: u32,
    pub camera: u32,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Probe,
    Gallery,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Probe => "probe",
            Role::Gallery => "gallery",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Role::Train => 0,
            Role::Probe => 1,
            Role::Gallery => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Role> {
        match code {
            0 => Some(Role::Train),
            1 => Some(Role::Probe),
            2 => Some(Role::Gallery),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = GmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "probe" => Ok(Role::Probe),
            "gallery" => Ok(Role::Gallery),
            other => Err(GmnError::config("role", format!("unknown role `{other}`"))),
        }
    }
}

/// An ordered collection of records sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    d_in: usize,
    num_identities: usize,
    num_domains: usize,
    role: Role,
}

impl Dataset {
    /// Validates dimensions and sample-id uniqueness.
    pub fn new(records: Vec<SampleRecord>, d_in: usize, role: Role) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (row, r) in records.iter().enumerate() {
            if r.embedding.len() != d_in {
                return Err(GmnError::Ingest {
                    row,
                    reason: format!(
                        "embedding has dimension {} but the dataset uses {}",
                        r.embedding.len(),
                        d_in
                    ),
                });
            }
            if !seen.insert(r.sample_id) {
                return Err(GmnError::Ingest {
                    row,
                    reason: format!("duplicate sample_id {}", r.sample_id),
                });
            }
        }
        let num_identities = records.iter().map(|r| r.identity).collect::<BTreeSet<_>>().len();
        let num_domains = records.iter().map(|r| r.domain).collect::<BTreeSet<_>>().len();
        Ok(Dataset {
            records,
            d_in,
            num_identities,
            num_domains,
            role,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn domains(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.domain)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Record indices grouped by identity, in record order.
    pub fn indices_by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(r.identity).or_default().push(i);
        }
        groups
    }

    /// Records whose domain is in `domains`, keeping order.
    pub fn select_domains(&self, domains: &[u32], role: Role) -> Result<Dataset> {
        let records = self
            .records
            .iter()
            .filter(|r| domains.contains(&r.domain))
            .cloned()
            .collect();
        Dataset::new(records, self.d_in, role)
    }

    pub fn embedding_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.records.len() * self.d_in);
        for r in &self.records {
            data.extend_from_slice(&r.embedding);
        }
        Matrix {
            rows: self.records.len(),
            cols: self.d_in,
            data,
        }
    }
}

/// Parameters of the synthetic multi-domain generator.
///
/// A record of identity `i` in domain `k` is `A_k (c_i + noise) + b_k`: a fixed
/// identity center, isotropic noise, and a per-domain affine style transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub identities_per_domain: usize,
    pub records_per_identity: usize,
    pub d_in: usize,
    pub domain_shift_scale: f64,
    pub identity_scale: f64,
    pub noise_scale: f64,
    pub cameras_per_domain: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_domains: 4,
            identities_per_domain: 32,
            records_per_identity: 10,
            d_in: 32,
            domain_shift_scale: 2.4,
            identity_scale: 1.0,
            noise_scale: 0.8,
            cameras_per_domain: 3,
            seed: 0,
        }
    }
}

/// Mixing strength of the style transform per unit of `domain_shift_scale`.
const STYLE_MIX_PER_SHIFT: f64 = 0.15;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_domains", self.num_domains),
            ("identities_per_domain", self.identities_per_domain),
            ("records_per_identity", self.records_per_identity),
            ("cameras_per_domain", self.cameras_per_domain),
        ];
        for (field, value) in counts {
            if value < 1 {
                return Err(GmnError::config(field, "must be at least 1"));
            }
        }
        if self.d_in < 2 {
            return Err(GmnError::config("d_in", "must be at least 2"));
        }
        let scales = [
            ("domain_shift_scale", self.domain_shift_scale),
            ("identity_scale", self.identity_scale),
            ("noise_scale", self.noise_scale),
        ];
        for (field, value) in scales {
            if !value.is_finite() || value < 0.0 {
                return Err(GmnError::config(field, "must be a finite non-negative number"));
            }
        }
        if self.identity_scale <= self.noise_scale {
            log::warn!(
                "identity_scale ({}) <= noise_scale ({}): identities will be hard to separate",
                self.identity_scale,
                self.noise_scale
            );
        }
        Ok(())
    }

    pub fn total_records(&self) -> usize {
        self.num_domains * self.identities_per_domain * self.records_per_identity
    }
}

struct StyleTransform {
    mix: Vec<f64>,
    offset: Vec<f64>,
}

impl StyleTransform {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|j| {
                let row = &self.mix[j * d..(j + 1) * d];
                let mut acc = self.offset[j];
                for (a, v) in row.iter().zip(x) {
                    acc += a * v;
                }
                acc
            })
            .collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.d_in;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mix_scale = STYLE_MIX_PER_SHIFT * spec.domain_shift_scale / (d as f64).sqrt();
    let transforms: Vec<StyleTransform> = (0..spec.num_domains)
        .map(|_| {
            let mut mix = vec![0.0; d * d];
            for j in 0..d {
                for k in 0..d {
                    let base = if j == k { 1.0 } else { 0.0 };
                    mix[j * d + k] = base + mix_scale * normal();
                }
            }
            let offset = (0..d).map(|_| spec.domain_shift_scale * normal()).collect();
            StyleTransform { mix, offset }
        })
        .collect();

    let total_ids = spec.num_domains * spec.identities_per_domain;
    let centers: Vec<Vec<f64>> = (0..total_ids)
        .map(|_| (0..d).map(|_| spec.identity_scale * normal()).collect())
        .collect();

    let mut records = Vec::with_capacity(spec.total_records());
    for (k, transform) in transforms.iter().enumerate() {
        let mut within_domain = 0usize;
        for i in 0..spec.identities_per_domain {
            let identity = k * spec.identities_per_domain + i;
            for _ in 0..spec.records_per_identity {
                let raw: Vec<f64> = centers[identity]
                    .iter()
                    .map(|c| c + spec.noise_scale * normal())
                    .collect();
                records.push(SampleRecord {
                    sample_id: records.len() as u64,
                    identity: identity as u32,
                    domain: k as u32,
                    camera: (within_domain % spec.cameras_per_domain) as u32,
                    embedding: transform.apply(&raw),
                });
                within_domain += 1;
            }
        }
    }
    Dataset::new(records, d, Role::Train)
}

/// Splits each identity's records into probe and gallery sides.
///
/// Every identity contributes `max(1, floor(fraction * n))` probes (capped at
/// `n - 1`) and keeps the rest in the gallery. Both outputs keep input order.
pub fn split_probe_gallery(
    dataset: &Dataset,
    probe_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(probe_fraction > 0.0 && probe_fraction < 1.0) {
        return Err(GmnError::config("probe_fraction", "must lie strictly between 0 and 1"));
    }
    let groups = dataset.indices_by_identity();
    let singletons: Vec<u32> = groups
        .iter()
        .filter(|(_, idx)| idx.len() < 2)
        .map(|(id, _)| *id)
        .collect();
    if !singletons.is_empty() {
        return Err(GmnError::Split {
            identities: singletons,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_probe = vec![false; dataset.len()];
    for idx in groups.values() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let take = ((probe_fraction * n as f64).floor() as usize).clamp(1, n - 1);
        for &i in &shuffled[..take] {
            is_probe[i] = true;
        }
    }
    let (mut probe, mut gallery) = (Vec::new(), Vec::new());
    for (r, flag) in dataset.records().iter().zip(is_probe) {
        if flag {
            probe.push(r.clone());
        } else {
            gallery.push(r.clone());
        }
    }
    Ok((
        Dataset::new(probe, dataset.d_in(), Role::Probe)?,
        Dataset::new(gallery, dataset.d_in(), Role::Gallery)?,
    ))
}
