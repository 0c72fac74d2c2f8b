//! On-disk paired datasets.
//!
//! Layout: `<root>/meta.json` plus `<root>/{train,val,test}/sample_NNNNNN.npz`
//! with a `sample_NNNNNN.json` sidecar. Each container holds `shots` (M×H×W),
//! `conf` (M×H×W) and `target` (H×W) as little-endian f32 `.npy` members.
//! Archives are stored uncompressed with a fixed timestamp so that equal
//! inputs give byte-identical files.

use std::fs::{self, File};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::phantom::{
    average_shots, generate_phantom, make_confidence_map, simulate_shot, ConfidenceMap, PairedSample, ShotGeometry, ShotImage,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

/// Sample count and first phantom seed of one split. Phantom seeds are
/// `phantom_seed_start .. phantom_seed_start + count`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub count: usize,
    pub phantom_seed_start: u64,
}

impl SplitSpec {
    fn seeds(&self) -> std::ops::Range<u64> {
        self.phantom_seed_start..self.phantom_seed_start + self.count as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    /// Input shots per sample.
    pub m_shots: usize,
    /// Shots averaged into the target.
    pub k_hq: usize,
    pub noise_level: f64,
    pub vessels_min: usize,
    pub vessels_max: usize,
    pub train: SplitSpec,
    pub val: SplitSpec,
    pub test: SplitSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            m_shots: 3,
            k_hq: 20,
            noise_level: 0.15,
            vessels_min: 2,
            vessels_max: 4,
            train: SplitSpec { count: 4000, phantom_seed_start: 0 },
            val: SplitSpec { count: 16, phantom_seed_start: 1_000_000 },
            test: SplitSpec { count: 64, phantom_seed_start: 2_000_000 },
        }
    }
}

impl DatasetConfig {
    pub fn split(&self, split: Split) -> SplitSpec {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.m_shots >= 1, "m_shots must be at least 1");
        ensure!(self.k_hq >= 1, "k_hq must be at least 1");
        ensure!(self.noise_level >= 0.0 && self.noise_level.is_finite(), "noise_level must be >= 0");
        ensure!(
            self.vessels_min >= 1 && self.vessels_min <= self.vessels_max,
            "need 1 <= vessels_min <= vessels_max, got {}..{}",
            self.vessels_min,
            self.vessels_max
        );
        ensure!(self.image_size >= crate::phantom::MIN_PHANTOM_SIZE, "image_size must be at least 16");
        for s in Split::ALL {
            let spec = self.split(s);
            ensure!(spec.count >= 1, "{s} split needs at least one sample");
            ensure!(spec.phantom_seed_start.checked_add(spec.count as u64).is_some(), "{s} seed range overflows");
        }
        for (i, a) in Split::ALL.iter().enumerate() {
            for b in &Split::ALL[i + 1..] {
                let (ra, rb) = (self.split(*a).seeds(), self.split(*b).seeds());
                ensure!(ra.end <= rb.start || rb.end <= ra.start, "phantom seed ranges of {a} {ra:?} and {b} {rb:?} overlap");
            }
        }
        Ok(())
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
}

impl DatasetMeta {
    pub fn m_shots(&self) -> usize {
        self.config.m_shots
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub center: (f64, f64),
    pub sigma: f64,
    pub noise_seed: u64,
}

/// Contents of a sample's JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub location_id: u64,
    pub phantom_seed: u64,
    pub n_vessels: usize,
    pub shots: Vec<ShotRecord>,
    pub target_shots: Vec<ShotRecord>,
}

/// Simulates one location: M fresh input shots and a K_hq-shot average.
pub fn simulate_sample(cfg: &DatasetConfig, seed: u64, index: usize, phantom_seed: u64) -> Result<(PairedSample, SampleRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phantom_seed);
    let n_vessels = rng.gen_range(cfg.vessels_min..=cfg.vessels_max);
    let phantom = generate_phantom(phantom_seed, cfg.image_size, n_vessels)?;
    let mut draw = |n: usize| -> Result<(Vec<ShotImage>, Vec<ShotRecord>)> {
        let mut shots = Vec::with_capacity(n);
        let mut recs = Vec::with_capacity(n);
        for _ in 0..n {
            let g = ShotGeometry::random(&mut rng, cfg.image_size);
            let noise_seed = rng.gen();
            shots.push(simulate_shot(&phantom, &g, cfg.noise_level, noise_seed)?);
            recs.push(ShotRecord { center: g.center, sigma: g.sigma, noise_seed });
        }
        Ok((shots, recs))
    };
    let (shots, shot_recs) = draw(cfg.m_shots)?;
    let (hq, hq_recs) = draw(cfg.k_hq)?;
    let target = average_shots(&hq)?;
    let sample = PairedSample { shots, target, location_id: phantom_seed };
    let record = SampleRecord { index, location_id: phantom_seed, phantom_seed, n_vessels, shots: shot_recs, target_shots: hq_recs };
    Ok((sample, record))
}

fn sample_stem(index: usize) -> String {
    format!("sample_{index:06}")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn npy_bytes<A: WriteNpyExt>(a: &A, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    a.write_npy(&mut buf).map_err(|e| Error::format(path, e))?;
    Ok(buf)
}

/// Writes named `.npy` members into an uncompressed zip with fixed metadata.
fn write_npz(path: &Path, members: &[(&str, Vec<u8>)]) -> Result<()> {
    use zip::write::SimpleFileOptions;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut zw = zip::ZipWriter::new(std::io::BufWriter::new(file));
    let opts = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (name, bytes) in members {
        zw.start_file(format!("{name}.npy"), opts).map_err(|e| Error::format(path, e))?;
        zw.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    let mut inner = zw.finish().map_err(|e| Error::format(path, e))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

fn stack(images: impl Iterator<Item = Array2<f32>>, m: usize, size: usize) -> Array3<f32> {
    let mut out = Array3::zeros((m, size, size));
    for (mut dst, img) in out.axis_iter_mut(Axis(0)).zip(images) {
        dst.assign(&img);
    }
    out
}

pub fn write_sample(dir: &Path, index: usize, sample: &PairedSample, record: &SampleRecord) -> Result<()> {
    sample.validate()?;
    let (m, size) = (sample.m(), sample.size());
    let npz = dir.join(format!("{}.npz", sample_stem(index)));
    let shots = stack(sample.shots.iter().map(|s| s.image.clone()), m, size);
    let conf = stack(sample.shots.iter().map(|s| s.confidence.values.clone()), m, size);
    let members = [("shots", npy_bytes(&shots, &npz)?), ("conf", npy_bytes(&conf, &npz)?), ("target", npy_bytes(&sample.target, &npz)?)];
    write_npz(&npz, &members)?;
    let json = serde_json::to_vec_pretty(record)?;
    write_bytes(&dir.join(format!("{}.json", sample_stem(index))), &json)
}

/// Generates every split under `root` and writes `meta.json`.
pub fn build_dataset(root: &Path, cfg: &DatasetConfig, seed: u64) -> Result<DatasetMeta> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let spec = cfg.split(split);
        for (index, phantom_seed) in spec.seeds().enumerate() {
            let (sample, record) = simulate_sample(cfg, seed, index, phantom_seed)?;
            write_sample(&dir, index, &sample, &record)?;
        }
        log::info!("{split}: {} samples", spec.count);
    }
    let meta = DatasetMeta { format_version: FORMAT_VERSION, seed, config: cfg.clone() };
    write_bytes(&root.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e))?;
    ensure!(
        meta.format_version == FORMAT_VERSION,
        "{} has format version {}, expected {FORMAT_VERSION}",
        path.display(),
        meta.format_version
    );
    Ok(meta)
}

fn read_member<A: ReadNpyExt>(archive: &mut zip::ZipArchive<BufReader<File>>, name: &str, path: &Path) -> Result<A> {
    let mut member = archive.by_name(&format!("{name}.npy")).map_err(|e| Error::format(path, format!("member {name}.npy: {e}")))?;
    let mut buf = Vec::with_capacity(member.size() as usize);
    member.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    A::read_npy(&buf[..]).map_err(|e| Error::format(path, format!("member {name}.npy: {e}")))
}

/// Reads one sample container and its sidecar.
pub fn read_sample(dir: &Path, index: usize) -> Result<(PairedSample, SampleRecord)> {
    let stem = sample_stem(index);
    let json_path = dir.join(format!("{stem}.json"));
    let bytes = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let record: SampleRecord = serde_json::from_slice(&bytes).map_err(|e| Error::format(&json_path, e))?;

    let path = dir.join(format!("{stem}.npz"));
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut archive = zip::ZipArchive::new(BufReader::new(file)).map_err(|e| Error::format(&path, e))?;
    let shots: Array3<f32> = read_member(&mut archive, "shots", &path)?;
    let conf: Array3<f32> = read_member(&mut archive, "conf", &path)?;
    let target: Array2<f32> = read_member(&mut archive, "target", &path)?;

    let (m, h, w) = shots.dim();
    if conf.dim() != (m, h, w) || target.dim() != (h, w) || h != w || record.shots.len() != m {
        return Err(Error::format(&path, "inconsistent array shapes"));
    }
    let shots = shots
        .axis_iter(Axis(0))
        .zip(conf.axis_iter(Axis(0)))
        .zip(&record.shots)
        .map(|((img, c), r)| {
            Ok(ShotImage {
                image: img.to_owned(),
                geometry: ShotGeometry { center: r.center, sigma: r.sigma },
                confidence: ConfidenceMap::from_values(c.to_owned()).map_err(|e| Error::format(&path, e))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((PairedSample { shots, target, location_id: record.location_id }, record))
}

/// A fully loaded split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub split: Split,
    pub samples: Vec<PairedSample>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads the first `limit` samples (all when `None`) of a split.
pub fn load_split(root: &Path, split: Split, limit: Option<usize>) -> Result<(DatasetMeta, SplitData)> {
    let meta = read_meta(root)?;
    let dir: PathBuf = root.join(split.name());
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.display().to_string()));
    }
    let count = meta.config.split(split).count;
    let n = limit.map_or(count, |l| l.min(count));
    let samples = (0..n).map(|i| read_sample(&dir, i).map(|(s, _)| s)).collect::<Result<Vec<_>>>()?;
    for s in &samples {
        if s.m() != meta.m_shots() || s.size() != meta.image_size() {
            return Err(Error::format(&dir, format!("sample {} disagrees with meta.json", s.location_id)));
        }
    }
    Ok((meta, SplitData { split, samples }))
}

/// Recomputes a stored confidence map from its geometry.
pub fn confidence_from_record(r: &ShotRecord, size: usize) -> Result<ConfidenceMap> {
    make_confidence_map(&ShotGeometry { center: r.center, sigma: r.sigma }, size)
}
