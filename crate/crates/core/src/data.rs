//! Synthetic multi-domain classification data.
//!
//! Class centroids live on the unit circle of a 2-D latent space. A sample's
//! label is the nearest centroid of its latent point, decided before any domain
//! transform, so every domain shares one labeling function. Domain `m` rotates
//! the latent plane by `m * shift_strength` radians, rescales both axes, and a
//! fixed random linear map embeds the result into the ambient feature space.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng;

const MAX_REJECTIONS: usize = 10_000;
const FILE_TAG: &str = "# scmd-dataset ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub domains: usize,
    pub n_per_domain: usize,
    pub feature_dim: usize,
    pub shift_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 4,
            domains: 4,
            n_per_domain: 200,
            feature_dim: 16,
            shift_strength: 0.3,
            noise: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub num_classes: usize,
    pub num_domains: usize,
    pub feature_dim: usize,
    pub generator: GeneratorConfig,
    pub samples: Vec<LabeledSample>,
}

/// Held-out domain plus train/validation fraction for one leave-one-domain-out run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub held_out_domain: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            held_out_domain: 0,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// Everything needed to map latent points into a domain's ambient features.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    pub config: GeneratorConfig,
    /// `feature_dim x 2`, row-major.
    pub embedding: Vec<f64>,
    /// Per-domain axis scales applied after rotation.
    pub scales: Vec<[f64; 2]>,
}

impl SyntheticGenerator {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        validate_generator(config)?;
        let mut r = rng::seeded(rng::derive(config.seed, 0xE3B));
        let embedding = (0..config.feature_dim * 2)
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        let scales = (0..config.domains)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut r);
                let b: f64 = StandardNormal.sample(&mut r);
                [
                    (config.shift_strength * a).exp(),
                    (config.shift_strength * b).exp(),
                ]
            })
            .collect();
        Ok(SyntheticGenerator {
            config: config.clone(),
            embedding,
            scales,
        })
    }

    pub fn centroid(&self, class: usize) -> [f64; 2] {
        centroid(class, self.config.classes)
    }

    /// Domain transform followed by the ambient embedding.
    pub fn embed(&self, latent: [f64; 2], domain: usize) -> Vec<f64> {
        let z = self.transform(latent, domain);
        self.embedding
            .chunks(2)
            .map(|row| row[0] * z[0] + row[1] * z[1])
            .collect()
    }

    pub fn transform(&self, latent: [f64; 2], domain: usize) -> [f64; 2] {
        let angle = domain as f64 * self.config.shift_strength;
        let (s, c) = angle.sin_cos();
        let rotated = [c * latent[0] - s * latent[1], s * latent[0] + c * latent[1]];
        let k = self.scales[domain];
        [rotated[0] * k[0], rotated[1] * k[1]]
    }

    /// Inverts [`SyntheticGenerator::embed`] by least squares.
    pub fn latent_of(&self, x: &[f64], domain: usize) -> [f64; 2] {
        let (mut a, mut b, mut d, mut u, mut v) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (row, &xi) in self.embedding.chunks(2).zip(x) {
            a += row[0] * row[0];
            b += row[0] * row[1];
            d += row[1] * row[1];
            u += row[0] * xi;
            v += row[1] * xi;
        }
        let det = a * d - b * b;
        let z = [(d * u - b * v) / det, (a * v - b * u) / det];
        let k = self.scales[domain];
        let r = [z[0] / k[0], z[1] / k[1]];
        let angle = -(domain as f64) * self.config.shift_strength;
        let (s, c) = angle.sin_cos();
        [c * r[0] - s * r[1], s * r[0] + c * r[1]]
    }

    pub fn generate(&self) -> Result<DomainDataset> {
        let cfg = &self.config;
        let mut r = rng::seeded(rng::derive(cfg.seed, 0x5A3));
        let mut samples = Vec::with_capacity(cfg.domains * cfg.n_per_domain);
        for domain in 0..cfg.domains {
            for i in 0..cfg.n_per_domain {
                let class = i % cfg.classes;
                let center = self.centroid(class);
                let mut tries = 0;
                let latent = loop {
                    let e0: f64 = StandardNormal.sample(&mut r);
                    let e1: f64 = StandardNormal.sample(&mut r);
                    let p = [center[0] + cfg.noise * e0, center[1] + cfg.noise * e1];
                    if gold_label(p, cfg.classes) == class {
                        break p;
                    }
                    tries += 1;
                    if tries >= MAX_REJECTIONS {
                        return Err(Error::Parameter(format!(
                            "noise {} too large: could not draw a class-{class} point",
                            cfg.noise
                        )));
                    }
                };
                samples.push(LabeledSample {
                    id: samples.len() as u64,
                    x: self.embed(latent, domain),
                    y: class,
                    domain,
                });
            }
        }
        Ok(DomainDataset {
            num_classes: cfg.classes,
            num_domains: cfg.domains,
            feature_dim: cfg.feature_dim,
            generator: cfg.clone(),
            samples,
        })
    }
}

fn validate_generator(cfg: &GeneratorConfig) -> Result<()> {
    if cfg.classes < 2 || cfg.domains < 2 || cfg.feature_dim < 2 {
        return Err(Error::Parameter(format!(
            "need classes >= 2, domains >= 2, feature_dim >= 2; got {}, {}, {}",
            cfg.classes, cfg.domains, cfg.feature_dim
        )));
    }
    if cfg.n_per_domain < cfg.classes {
        return Err(Error::Parameter(format!(
            "n_per_domain {} must cover all {} classes",
            cfg.n_per_domain, cfg.classes
        )));
    }
    if !(cfg.noise >= 0.0) || !cfg.shift_strength.is_finite() {
        return Err(Error::Parameter(
            "noise must be >= 0 and shift finite".into(),
        ));
    }
    Ok(())
}

pub fn centroid(class: usize, classes: usize) -> [f64; 2] {
    let angle = 2.0 * PI * class as f64 / classes as f64;
    [angle.cos(), angle.sin()]
}

/// The shared labeling function: index of the nearest class centroid.
pub fn gold_label(latent: [f64; 2], classes: usize) -> usize {
    (0..classes)
        .map(|c| {
            let m = centroid(c, classes);
            (c, (latent[0] - m[0]).powi(2) + (latent[1] - m[1]).powi(2))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
        .unwrap()
}

pub fn gen_synthetic(cfg: &GeneratorConfig) -> Result<DomainDataset> {
    SyntheticGenerator::new(cfg)?.generate()
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn domains_present(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.samples.iter().map(|s| s.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    fn with_samples(&self, samples: Vec<LabeledSample>) -> DomainDataset {
        DomainDataset {
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            feature_dim: self.feature_dim,
            generator: self.generator.clone(),
            samples,
        }
    }

    pub fn filter(&self, keep: impl Fn(&LabeledSample) -> bool) -> DomainDataset {
        self.with_samples(self.samples.iter().filter(|s| keep(s)).cloned().collect())
    }

    /// Feature rows for the given positions as a `len x D` matrix.
    pub fn features(&self, positions: &[usize]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(positions.len() * self.feature_dim);
        for &p in positions {
            values.extend_from_slice(&self.samples[p].x);
        }
        Tensor::matrix(positions.len(), self.feature_dim, values)
    }

    pub fn labels(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.samples[p].y).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetHeader {
            format_version: 1,
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            feature_dim: self.feature_dim,
            seed: self.generator.seed,
            config: self.generator.clone(),
        };
        let mut buf = Vec::new();
        writeln!(buf, "{FILE_TAG}{}", serde_json::to_string(&header)?).unwrap();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut cols = vec!["id".to_string(), "domain".into(), "label".into()];
            cols.extend((0..self.feature_dim).map(|j| format!("x{j}")));
            w.write_record(&cols)?;
            for s in &self.samples {
                let mut rec = vec![s.id.to_string(), s.domain.to_string(), s.y.to_string()];
                rec.extend(s.x.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<DomainDataset> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut first = String::new();
        reader
            .read_line(&mut first)
            .map_err(|e| Error::io(path, e))?;
        let json = first
            .strip_prefix(FILE_TAG)
            .ok_or_else(|| Error::Header(format!("{} is not a dataset file", path.display())))?;
        let header: DatasetHeader = serde_json::from_str(json.trim_end())?;
        if header.format_version != 1 {
            return Err(Error::Header(format!(
                "unsupported dataset format_version {}",
                header.format_version
            )));
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 + header.feature_dim {
                return Err(Error::Validation(format!(
                    "row has {} fields, expected {}",
                    rec.len(),
                    3 + header.feature_dim
                )));
            }
            let parse_err = |what: &str| Error::Validation(format!("unparsable {what} in {rec:?}"));
            let id = rec[0].parse().map_err(|_| parse_err("id"))?;
            let domain: usize = rec[1].parse().map_err(|_| parse_err("domain"))?;
            let y: usize = rec[2].parse().map_err(|_| parse_err("label"))?;
            let x = rec
                .iter()
                .skip(3)
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err("feature"))?;
            if domain >= header.num_domains || y >= header.num_classes {
                return Err(Error::Validation(format!("sample {id} out of range")));
            }
            samples.push(LabeledSample { id, x, y, domain });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = samples.iter().find(|s| !seen.insert(s.id)) {
            return Err(Error::Validation(format!("duplicate sample id {}", dup.id)));
        }
        Ok(DomainDataset {
            num_classes: header.num_classes,
            num_domains: header.num_domains,
            feature_dim: header.feature_dim,
            generator: header.config,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    num_classes: usize,
    num_domains: usize,
    feature_dim: usize,
    seed: u64,
    config: GeneratorConfig,
}

/// Partitions by domain tag: `(everything else, held_out)`.
pub fn split_lodo(ds: &DomainDataset, held_out: usize) -> Result<(DomainDataset, DomainDataset)> {
    if held_out >= ds.num_domains {
        return Err(Error::Parameter(format!(
            "held-out domain {held_out} not in 0..{}",
            ds.num_domains
        )));
    }
    Ok((
        ds.filter(|s| s.domain != held_out),
        ds.filter(|s| s.domain == held_out),
    ))
}

/// Per-domain shuffled split; each domain contributes `round(fraction * n_d)` samples to train.
pub fn split_train_val(
    ds: &DomainDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::Parameter("cannot split an empty dataset".into()));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for domain in ds.domains_present() {
        let mut members: Vec<&LabeledSample> =
            ds.samples.iter().filter(|s| s.domain == domain).collect();
        let mut r = rng::seeded(rng::derive(seed, domain as u64));
        members.shuffle(&mut r);
        let cut = (train_fraction * members.len() as f64).round() as usize;
        let (a, b) = members.split_at(cut);
        train.extend(a.iter().map(|s| (*s).clone()));
        val.extend(b.iter().map(|s| (*s).clone()));
    }
    train.sort_by_key(|s| s.id);
    val.sort_by_key(|s| s.id);
    Ok((ds.with_samples(train), ds.with_samples(val)))
}

/// Shuffled positions into `ds.samples`, chunked; the last batch may be short.
pub fn make_batch_positions(len: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    let mut r = rng::seeded(epoch_seed);
    order.shuffle(&mut r);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One epoch of sample-id batches.
pub fn make_batches(ds: &DomainDataset, batch_size: usize, epoch_seed: u64) -> Vec<Vec<u64>> {
    make_batch_positions(ds.len(), batch_size, epoch_seed)
        .into_iter()
        .map(|b| b.into_iter().map(|p| ds.samples[p].id).collect())
        .collect()
}

/// Uniform draw on `[lo, hi)`, shared by callers that sample configs.
pub(crate) fn uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig {
            classes: 3,
            domains: 3,
            n_per_domain: 31,
            feature_dim: 5,
            shift_strength: 0.4,
            noise: 0.2,
            seed: 11,
        }
    }

    #[test]
    fn rejects_bad_counts() {
        for bad in [
            GeneratorConfig {
                classes: 1,
                ..cfg()
            },
            GeneratorConfig {
                domains: 1,
                ..cfg()
            },
            GeneratorConfig {
                feature_dim: 1,
                ..cfg()
            },
        ] {
            assert!(matches!(gen_synthetic(&bad), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_synthetic(&cfg()).unwrap();
        let b = gen_synthetic(&cfg()).unwrap();
        assert_eq!(a, b);
        for d in 0..3 {
            let mut counts = [0usize; 3];
            for s in a.samples.iter().filter(|s| s.domain == d) {
                counts[s.y] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        let ids: HashSet<u64> = a.ids().into_iter().collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn labels_follow_pre_transform_nearest_centroid() {
        let g = SyntheticGenerator::new(&cfg()).unwrap();
        let ds = g.generate().unwrap();
        for s in &ds.samples {
            let latent = g.latent_of(&s.x, s.domain);
            assert_eq!(gold_label(latent, 3), s.y);
        }
    }

    #[test]
    fn zero_shift_zero_noise_makes_domains_identical() {
        let c = GeneratorConfig {
            shift_strength: 0.0,
            noise: 0.0,
            ..cfg()
        };
        let ds = gen_synthetic(&c).unwrap();
        let per = c.n_per_domain;
        for d in 1..c.domains {
            for i in 0..per {
                assert_eq!(ds.samples[i].x, ds.samples[d * per + i].x);
            }
        }
    }

    #[test]
    fn lodo_partition() {
        let ds = gen_synthetic(&GeneratorConfig {
            domains: 2,
            ..cfg()
        })
        .unwrap();
        let (train, test) = split_lodo(&ds, 1).unwrap();
        assert!(train.samples.iter().all(|s| s.domain == 0));
        assert_eq!(train.len() + test.len(), ds.len());
        let a: HashSet<u64> = train.ids().into_iter().collect();
        assert!(test.ids().iter().all(|id| !a.contains(id)));
        assert!(split_lodo(&ds, 2).is_err());
    }

    #[test]
    fn train_val_split_counts() {
        let ds = gen_synthetic(&GeneratorConfig {
            n_per_domain: 100,
            ..cfg()
        })
        .unwrap();
        let (train, val) = split_train_val(&ds, 0.8, 4).unwrap();
        for d in 0..3 {
            assert_eq!(train.samples.iter().filter(|s| s.domain == d).count(), 80);
            assert_eq!(val.samples.iter().filter(|s| s.domain == d).count(), 20);
        }
        let again = split_train_val(&ds, 0.8, 4).unwrap();
        assert_eq!(again.0, train);
        let mut all: Vec<u64> = train.ids().into_iter().chain(val.ids()).collect();
        all.sort_unstable();
        assert_eq!(all, ds.ids());
        assert!(split_train_val(&ds, 1.0, 0).is_err());
        let empty = ds.filter(|_| false);
        assert!(split_train_val(&empty, 0.5, 0).is_err());
    }

    #[test]
    fn batches_cover_each_id_once() {
        let ds = gen_synthetic(&cfg()).unwrap();
        let batches = make_batches(&ds, 8, 3);
        let mut seen: Vec<u64> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, ds.ids());
        assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == 8));
        assert_eq!(make_batches(&ds, 1000, 3).len(), 1);
        assert_ne!(make_batches(&ds, 8, 4), batches);
    }
}
