//! Synthetic multi-domain image datasets and client partitions.
//!
//! A class fixes a content template built from Gaussian blobs and a
//! sinusoidal texture. A domain fixes a style: channel mixing, per-channel
//! gain and offset, and a cyclic spatial shift. Each sample adds an amplitude
//! jitter and pixel noise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, find};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{tags, RngKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_domain_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Strength of the domain styles (0 disables them).
    pub style_strength: f64,
    pub template_seed: u64,
    pub style_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_domains: 6,
            num_classes: 10,
            samples_per_domain_class: 40,
            channels: 3,
            height: 16,
            width: 16,
            noise: 0.5,
            style_strength: 0.6,
            template_seed: 1,
            style_seed: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 || self.num_classes == 0 || self.samples_per_domain_class == 0 {
            return Err(Error::Config(
                "data: domains, classes and samples per cell must be positive".into(),
            ));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("data: image extents must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("data.noise must be non-negative".into()));
        }
        if !(self.style_strength >= 0.0 && self.style_strength.is_finite()) {
            return Err(Error::Config("data.style_strength must be non-negative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_domains * self.num_classes * self.samples_per_domain_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Content template of class `c`, normalized to zero mean and unit variance.
    pub fn template(&self, class: usize) -> Vec<f64> {
        let mut rng = RngKey::new(self.template_seed).path(&[tags::DATA, 0, class as u64]).rng();
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut img = vec![0.0; self.pixels()];
        for _ in 0..3 {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let r = rng.gen_range(1.5..(h.min(w) as f64 / 3.0).max(2.0));
            let amp: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            for (ch, a) in amp.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[(ch * h + y) * w + x] += a * (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
        }
        let fy = rng.gen_range(0.5..2.5);
        let fx = rng.gen_range(0.5..2.5);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for ch in 0..c {
            let amp: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            for y in 0..h {
                for x in 0..w {
                    let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                    img[(ch * h + y) * w + x] += amp * (t + phase).sin();
                }
            }
        }
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let sd = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        img.iter().map(|v| (v - mean) / sd).collect()
    }

    /// Style of domain `d`.
    pub fn style(&self, domain: usize) -> DomainStyle {
        let mut rng = RngKey::new(self.style_seed).path(&[tags::DATA, 1, domain as u64]).rng();
        let c = self.channels;
        let s = self.style_strength;
        let mut mix = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let base = if i == j { 1.0 } else { 0.0 };
                mix[i * c + j] = base + 0.5 * s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let gain = (0..c).map(|_| 1.0 + s * rng.gen_range(-0.4..0.4)).collect();
        let offset = (0..c).map(|_| s * rng.gen_range(-0.5..0.5)).collect();
        let reach = (s * 2.0).round() as i64;
        let shift = if reach > 0 {
            (rng.gen_range(-reach..=reach), rng.gen_range(-reach..=reach))
        } else {
            (0, 0)
        };
        DomainStyle {
            mix,
            gain,
            offset,
            shift,
        }
    }

    /// Image for `(class, domain, index)`; bit-identical for a given spec.
    pub fn image(&self, class: usize, domain: usize, index: usize) -> Tensor {
        self.render(&self.template(class), &self.style(domain), class, domain, index)
    }

    fn render(&self, template: &[f64], style: &DomainStyle, class: usize, domain: usize, index: usize) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut rng = RngKey::new(self.template_seed ^ self.style_seed.rotate_left(32))
            .path(&[tags::DATA, 2, class as u64, domain as u64, index as u64])
            .rng();
        let jitter = if self.noise > 0.0 {
            1.0 + 0.2 * rng.gen_range(-1.0..1.0)
        } else {
            1.0
        };
        let mut out = vec![0.0; self.pixels()];
        for y in 0..h {
            for x in 0..w {
                let sy = (y as i64 - style.shift.0).rem_euclid(h as i64) as usize;
                let sx = (x as i64 - style.shift.1).rem_euclid(w as i64) as usize;
                for i in 0..c {
                    let mut v = 0.0;
                    for j in 0..c {
                        v += style.mix[i * c + j] * template[(j * h + sy) * w + sx];
                    }
                    out[(i * h + y) * w + x] = style.gain[i] * jitter * v + style.offset[i];
                }
            }
        }
        if self.noise > 0.0 {
            for v in &mut out {
                *v += self.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Tensor::new(vec![c, h, w], out).expect("finite pixels")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    /// Row-major `[channels × channels]` channel mixing.
    pub mix: Vec<f64>,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    /// Cyclic (row, column) shift in pixels.
    pub shift: (i64, i64),
}

/// Labeled images, ordered by domain, then class, then index within the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub num_classes: usize,
    pub num_domains: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let templates: Vec<Vec<f64>> = (0..spec.num_classes).map(|c| spec.template(c)).collect();
    let mut ds = Dataset {
        images: Vec::with_capacity(spec.len()),
        labels: Vec::with_capacity(spec.len()),
        domains: Vec::with_capacity(spec.len()),
        num_classes: spec.num_classes,
        num_domains: spec.num_domains,
    };
    for d in 0..spec.num_domains {
        let style = spec.style(d);
        for (c, t) in templates.iter().enumerate() {
            for i in 0..spec.samples_per_domain_class {
                ds.images.push(spec.render(t, &style, c, d, i));
                ds.labels.push(c);
                ds.domains.push(d);
            }
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClientShard {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientShard {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().chain(&self.test).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<ClientShard>,
}

pub const TEST_FRACTION: f64 = 0.2;

/// Splits `items` as evenly as possible into `parts` consecutive chunks.
fn even_chunks(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// 80/20 split of one client's samples, stratified by class.
fn split_train_test(ds: &Dataset, mut indices: Vec<usize>, key: RngKey) -> ClientShard {
    indices.sort_unstable();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in indices {
        by_class.entry(ds.labels[i]).or_default().push(i);
    }
    let mut shard = ClientShard::default();
    for (c, mut idx) in by_class {
        idx.shuffle(&mut key.child(c as u64).rng());
        let n_test = if idx.len() >= 2 {
            ((idx.len() as f64 * TEST_FRACTION).round() as usize).max(1)
        } else {
            0
        };
        shard.test.extend_from_slice(&idx[..n_test]);
        shard.train.extend_from_slice(&idx[n_test..]);
    }
    shard.train.sort_unstable();
    shard.test.sort_unstable();
    shard
}

/// Distributes each group's samples evenly over the clients holding it.
fn deal(
    ds: &Dataset,
    clients: usize,
    holders: &BTreeMap<usize, Vec<usize>>,
    group_of: impl Fn(usize) -> usize,
    key: RngKey,
) -> Partition {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..ds.len() {
        members.entry(group_of(i)).or_default().push(i);
    }
    let mut per_client = vec![Vec::new(); clients];
    for (group, hs) in holders {
        let Some(items) = members.get(group) else { continue };
        // stratify by class inside the group so every holder sees every class it can
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in items {
            by_class.entry(ds.labels[i]).or_default().push(i);
        }
        for (c, mut idx) in by_class {
            idx.shuffle(&mut key.path(&[*group as u64, c as u64]).rng());
            // rotate which holder gets the remainder so shards stay balanced
            let offset = c % hs.len();
            for (p, chunk) in even_chunks(&idx, hs.len()).into_iter().enumerate() {
                per_client[hs[(p + offset) % hs.len()]].extend_from_slice(chunk);
            }
        }
    }
    let split_key = key.child(u64::MAX);
    Partition {
        clients: per_client
            .into_iter()
            .enumerate()
            .map(|(k, idx)| split_train_test(ds, idx, split_key.child(k as u64)))
            .collect(),
    }
}

/// Client `k` holds domains `k, k+1, …, k+m-1` (mod the domain count), with
/// every class; a domain's samples are split evenly among its holders.
pub fn feature_shift_partition(ds: &Dataset, clients: usize, m: usize, seed: u64) -> Result<Partition> {
    let d = ds.num_domains;
    if m == 0 || m > d {
        return Err(Error::Config(format!("m must lie in 1..={d}, got {m}")));
    }
    if clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    let mut holders: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..clients {
        for j in 0..m {
            holders.entry((k + j) % d).or_default().push(k);
        }
    }
    let key = RngKey::new(seed).path(&[tags::PARTITION, 0]);
    Ok(deal(ds, clients, &holders, |i| ds.domains[i], key))
}

/// Classes are dealt in shards: after a seeded class permutation, client `k`
/// receives classes `perm[(k·s + j) mod C]` for `j < s`.
pub fn label_shift_partition(ds: &Dataset, clients: usize, s: usize, seed: u64) -> Result<Partition> {
    let c = ds.num_classes;
    if s == 0 || s > c {
        return Err(Error::Config(format!("s must lie in 1..={c}, got {s}")));
    }
    if clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    let key = RngKey::new(seed).path(&[tags::PARTITION, 1]);
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut key.child(0).rng());
    let mut holders: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..clients {
        for j in 0..s {
            holders.entry(perm[(k * s + j) % c]).or_default().push(k);
        }
    }
    Ok(deal(ds, clients, &holders, |i| ds.labels[i], key.child(1)))
}

impl Partition {
    pub fn distinct(&self, client: usize, of: &[usize]) -> BTreeSet<usize> {
        self.clients[client].all().map(|i| of[i]).collect()
    }

    /// Checks pairwise disjointness and that every index is in range.
    pub fn check_disjoint(&self, len: usize) -> Result<()> {
        let mut seen = vec![false; len];
        for (k, shard) in self.clients.iter().enumerate() {
            for i in shard.all() {
                if i >= len {
                    return Err(Error::Index(format!("client {k} holds sample {i} of {len}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Contract(format!("sample {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Restricts the partition to a subset of clients, renumbered in order.
    pub fn select(&self, clients: &[usize]) -> Partition {
        Partition {
            clients: clients.iter().map(|&k| self.clients[k].clone()).collect(),
        }
    }
}

/// Row of the side manifest written next to an exported dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub class: usize,
    pub domain: usize,
    /// Empty for unassigned samples.
    pub client: Option<usize>,
    pub split: String,
}

pub fn manifest(ds: &Dataset, partition: &Partition) -> Vec<ManifestRow> {
    let mut owner: Vec<Option<(usize, &'static str)>> = vec![None; ds.len()];
    for (k, shard) in partition.clients.iter().enumerate() {
        for &i in &shard.train {
            owner[i] = Some((k, "train"));
        }
        for &i in &shard.test {
            owner[i] = Some((k, "test"));
        }
    }
    (0..ds.len())
        .map(|i| ManifestRow {
            sample_id: i,
            class: ds.labels[i],
            domain: ds.domains[i],
            client: owner[i].map(|o| o.0),
            split: owner[i].map_or("unassigned", |o| o.1).to_string(),
        })
        .collect()
}

/// Writes `dataset.pfnt` and `manifest.csv` into `dir`.
pub fn export(ds: &Dataset, partition: &Partition, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let img_shape = ds.images.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    let mut shape = vec![ds.len()];
    shape.extend(&img_shape);
    let data: Vec<f64> = ds.images.iter().flat_map(|t| t.data().iter().copied()).collect();
    let to_f = |v: &[usize]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect());
    let entries = vec![
        ("images".to_string(), Tensor::new(shape, data)?),
        ("labels".to_string(), to_f(&ds.labels)?),
        ("domains".to_string(), to_f(&ds.domains)?),
        (
            "counts".to_string(),
            Tensor::new(vec![2], vec![ds.num_classes as f64, ds.num_domains as f64])?,
        ),
    ];
    checkpoint::save(&dir.join("dataset.pfnt"), &entries)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for row in manifest(ds, partition) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back what [`export`] wrote.
pub fn import(dir: &Path) -> Result<(Dataset, Partition)> {
    let entries = checkpoint::load(&dir.join("dataset.pfnt"))?;
    let images = find(&entries, "images")?;
    let n = images.shape()[0];
    let img_shape = images.shape()[1..].to_vec();
    let per: usize = img_shape.iter().product();
    let as_usize = |t: &Tensor| t.data().iter().map(|&x| x as usize).collect::<Vec<_>>();
    let counts = as_usize(find(&entries, "counts")?);
    let ds = Dataset {
        images: (0..n)
            .map(|i| Tensor::new(img_shape.clone(), images.data()[i * per..(i + 1) * per].to_vec()))
            .collect::<Result<_>>()?,
        labels: as_usize(find(&entries, "labels")?),
        domains: as_usize(find(&entries, "domains")?),
        num_classes: counts[0],
        num_domains: counts[1],
    };
    let mut clients: Vec<ClientShard> = Vec::new();
    let mut r = csv::Reader::from_path(dir.join("manifest.csv"))?;
    for row in r.deserialize::<ManifestRow>() {
        let row = row?;
        let Some(k) = row.client else { continue };
        if clients.len() <= k {
            clients.resize(k + 1, ClientShard::default());
        }
        match row.split.as_str() {
            "train" => clients[k].train.push(row.sample_id),
            "test" => clients[k].test.push(row.sample_id),
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
    Ok((ds, Partition { clients }))
}
