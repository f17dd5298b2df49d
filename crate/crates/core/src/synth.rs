//! Seeded synthetic ad logs with planted user/ad affinity and ad clusters.
//!
//! Users and ads live in a shared latent space. Ads are drawn around cluster
//! centroids, so ads of one cluster attract the same users and end up close
//! together in click sequences. Clicks follow
//! `sigmoid(affinity_scale * <z_u, z_a> + logit(base_ctr))`. Every user is
//! seen throughout; a share of ads launches after the training window, so
//! validation and test contain ads known only through their cluster.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::features::{FieldSchema, FieldSpec, Group, Valence};
use crate::tensor::sigmoid;

/// Standard deviation (per unit latent norm) of an ad around its centroid.
pub const AD_SPREAD: f64 = 0.3;

/// Share of ads first shown after the training window.
pub const COLD_AD_FRACTION: f64 = 0.2;

/// Timestamps are spread over this many milliseconds (three days).
pub const TIME_SPAN_MS: i64 = 3 * 24 * 3_600_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_ads: usize,
    pub n_ad_clusters: usize,
    pub latent_dim: usize,
    pub affinity_scale: f64,
    pub base_ctr: f64,
    pub impressions_per_user: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_ads: 500,
            n_ad_clusters: 25,
            latent_dim: 8,
            affinity_scale: 4.0,
            base_ctr: 0.1,
            impressions_per_user: 60,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_users == 0 || self.n_ads == 0 || self.latent_dim == 0 {
            return bad("n_users, n_ads and latent_dim must be >= 1".into());
        }
        if self.n_ad_clusters == 0 || self.n_ad_clusters > self.n_ads {
            return bad(format!(
                "n_ad_clusters must be in 1..={}, got {}",
                self.n_ads, self.n_ad_clusters
            ));
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return bad(format!("base_ctr must be in (0, 1), got {}", self.base_ctr));
        }
        if !self.affinity_scale.is_finite() {
            return bad("affinity_scale must be finite".into());
        }
        Ok(())
    }
}

/// Latent vectors of every user and ad.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub users: Vec<Vec<f64>>,
    pub ads: Vec<Vec<f64>>,
    pub ad_cluster: Vec<usize>,
}

impl World {
    pub fn affinity(&self, user: usize, ad: usize) -> f64 {
        self.users[user].iter().zip(&self.ads[ad]).map(|(a, b)| a * b).sum()
    }
}

/// Users ~ N(0, I); centroids ~ N(0, I/d); ad `i` belongs to cluster
/// `i mod n_ad_clusters` and sits at its centroid plus N(0, AD_SPREAD²·I/d).
pub fn generate_world(cfg: &WorldConfig) -> Result<World, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.latent_dim;
    let unit = 1.0 / (d as f64).sqrt();
    let normal = |rng: &mut ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let users = (0..cfg.n_users).map(|_| normal(&mut rng, d, 1.0)).collect();
    let centroids: Vec<Vec<f64>> = (0..cfg.n_ad_clusters).map(|_| normal(&mut rng, d, unit)).collect();
    let ad_cluster: Vec<usize> = (0..cfg.n_ads).map(|i| i % cfg.n_ad_clusters).collect();
    let ads = ad_cluster
        .iter()
        .map(|&c| {
            let noise = normal(&mut rng, d, AD_SPREAD * unit);
            centroids[c].iter().zip(noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    Ok(World {
        users,
        ads,
        ad_cluster,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Impression {
    pub user: usize,
    pub ad: usize,
    pub timestamp: i64,
    pub label: u8,
    /// `<z_u, z_a>`, the planted signal.
    pub affinity: f64,
}

/// Time-ordered impressions split 80/10/10.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLog {
    pub train: Vec<Impression>,
    pub val: Vec<Impression>,
    pub test: Vec<Impression>,
}

impl SyntheticLog {
    pub fn all(&self) -> impl Iterator<Item = &Impression> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn generate_impressions(world: &World, cfg: &WorldConfig) -> Result<SyntheticLog, SynthError> {
    cfg.validate()?;
    // separate stream from the world draws
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let bias = (cfg.base_ctr / (1.0 - cfg.base_ctr)).ln();
    let mut slots: Vec<(i64, usize)> = Vec::with_capacity(cfg.n_users * cfg.impressions_per_user);
    for user in 0..world.users.len() {
        for _ in 0..cfg.impressions_per_user {
            slots.push((rng.random_range(0..TIME_SPAN_MS), user));
        }
    }
    slots.sort_unstable();
    let n = slots.len();
    let train_end = n * 8 / 10;
    let val_end = n * 9 / 10;
    let warm = warm_ads(world.ads.len());
    let mut all: Vec<Impression> = slots
        .into_iter()
        .enumerate()
        .map(|(k, (timestamp, user))| {
            let pool = if k < train_end { warm } else { world.ads.len() };
            let ad = rng.random_range(0..pool);
            let affinity = world.affinity(user, ad);
            let p = sigmoid(cfg.affinity_scale * affinity + bias);
            let label = u8::from(rng.random::<f64>() < p);
            Impression {
                user,
                ad,
                timestamp,
                label,
                affinity,
            }
        })
        .collect();
    let test = all.split_off(val_end);
    let val = all.split_off(train_end);
    Ok(SyntheticLog {
        train: all,
        val,
        test,
    })
}

/// Ads `0..warm_ads(n)` appear from the start; the rest launch after the
/// training window and only show up in validation and test.
pub fn warm_ads(n_ads: usize) -> usize {
    let cold = (n_ads as f64 * COLD_AD_FRACTION).floor() as usize;
    (n_ads - cold).max(1)
}

/// `user_id` (user), `ad_id` and `ad_cluster` (ad), `hour_of_day` (other).
pub fn schema() -> FieldSchema {
    let field = |name: &str, group| FieldSpec {
        name: name.into(),
        group,
        valence: Valence::Univalent,
    };
    FieldSchema::new(vec![
        field("user_id", Group::User),
        field("ad_id", Group::Ad),
        field("ad_cluster", Group::Ad),
        field("hour_of_day", Group::Other),
    ])
    .expect("static schema is valid")
}

pub fn format_line(world: &World, imp: &Impression) -> String {
    let hour = (imp.timestamp / 3_600_000) % 24;
    format!(
        "{label}\tu{user}\t{ts}\tu{user}\ta{ad}\tc{cluster}\t{hour}",
        label = imp.label,
        user = imp.user,
        ts = imp.timestamp,
        ad = imp.ad,
        cluster = world.ad_cluster[imp.ad],
    )
}

pub fn write_log<W: Write>(world: &World, impressions: &[Impression], mut out: W) -> std::io::Result<()> {
    writeln!(out, "# label\tuser\ttimestamp_ms\tuser_id\tad_id\tad_cluster\thour_of_day")?;
    for imp in impressions {
        writeln!(out, "{}", format_line(world, imp))?;
    }
    out.flush()
}

/// Paths written by [`generate_log`].
#[derive(Debug, Clone)]
pub struct GeneratedFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub schema: PathBuf,
}

/// Writes `train.tsv`, `val.tsv`, `test.tsv` and `schema.csv` into `dir`.
pub fn generate_log(world: &World, cfg: &WorldConfig, dir: &Path) -> Result<GeneratedFiles, SynthError> {
    let log = generate_impressions(world, cfg)?;
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| SynthError::Io { path: p, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let files = GeneratedFiles {
        train: dir.join("train.tsv"),
        val: dir.join("val.tsv"),
        test: dir.join("test.tsv"),
        schema: dir.join("schema.csv"),
    };
    for (path, part) in [(&files.train, &log.train), (&files.val, &log.val), (&files.test, &log.test)] {
        let f = File::create(path).map_err(io(path))?;
        write_log(world, part, BufWriter::new(f)).map_err(io(path))?;
    }
    std::fs::write(&files.schema, schema().to_string()).map_err(io(&files.schema))?;
    Ok(files)
}
