//! Two-alternative forced choice (2AFC) agreement, rating normalization,
//! correlation, and a synthetic distortion benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Traditional,
    Cnn,
    Superres,
    Deblur,
    Interp,
    Synthetic,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Traditional,
        Category::Cnn,
        Category::Superres,
        Category::Deblur,
        Category::Interp,
        Category::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Traditional => "traditional",
            Category::Cnn => "cnn",
            Category::Superres => "superres",
            Category::Deblur => "deblur",
            Category::Interp => "interp",
            Category::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category {s:?}")))
    }
}

/// One judgment: which of `x0`, `x1` is closer to `ref`. `p` is the fraction
/// of observers who chose `x1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoAfcTrial {
    #[serde(rename = "ref")]
    pub reference: String,
    pub x0: String,
    pub x1: String,
    pub p: f64,
    pub category: Category,
}

/// `p` when the metric prefers `x1`, `1 − p` when it prefers `x0`, `0.5` on a tie.
pub fn afc_score(d0: f64, d1: f64, p: f64) -> Result<f64> {
    if !(d0 >= 0.0 && d1 >= 0.0) {
        return Err(Error::invalid(format!("distances must be non-negative, got {d0}, {d1}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("p must lie in [0,1], got {p}")));
    }
    Ok(if d1 < d0 {
        p
    } else if d0 < d1 {
        1.0 - p
    } else {
        0.5
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub index: usize,
    pub category: Category,
    pub d0: f64,
    pub d1: f64,
    pub p: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialError {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub per_category: BTreeMap<Category, f64>,
    pub overall: f64,
    pub n_trials: usize,
    pub errors: Vec<TrialError>,
    pub trials: Vec<TrialScore>,
}

impl AgreementReport {
    /// Aggregates per-trial scores. Order of `trials` does not matter.
    pub fn from_scores(mut trials: Vec<TrialScore>, mut errors: Vec<TrialError>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::Degenerate(format!("no scorable trials ({} errors)", errors.len())));
        }
        trials.sort_by_key(|t| t.index);
        errors.sort_by_key(|e| e.index);
        let mut sums: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
        for t in &trials {
            let e = sums.entry(t.category).or_default();
            e.0 += t.score;
            e.1 += 1;
        }
        let overall = trials.iter().map(|t| t.score).sum::<f64>() / trials.len() as f64;
        Ok(Self {
            per_category: sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
            overall,
            n_trials: trials.len(),
            errors,
            trials,
        })
    }

    /// Recomputes the summary from the stored per-trial scores.
    pub fn recompute(&self) -> Result<Self> {
        Self::from_scores(self.trials.clone(), self.errors.clone())
    }

    /// `category,mean_score,n_trials` rows plus an `overall` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "mean_score", "n_trials"])?;
        for (c, mean) in &self.per_category {
            let n = self.trials.iter().filter(|t| t.category == *c).count();
            w.write_record([c.as_str().to_string(), format!("{mean:.6}"), n.to_string()])?;
        }
        w.write_record(["overall".to_string(), format!("{:.6}", self.overall), self.n_trials.to_string()])?;
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Reads a trial manifest (one JSON object per line; blank lines skipped).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TwoAfcTrial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, trials: &[TwoAfcTrial]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for t in trials {
        serde_json::to_writer(&mut out, t)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads images by trial reference, relative to a base directory, caching
/// each path once.
pub struct ImageCache {
    base: PathBuf,
    cache: Mutex<HashMap<String, std::result::Result<Image, String>>>,
}

impl ImageCache {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self { base: base.into(), cache: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, reference: &str) -> Result<Image> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(reference) {
            return hit.clone().map_err(Error::invalid);
        }
        let path = self.base.join(reference);
        let loaded = Image::load(&path).map_err(|e| e.to_string());
        self.cache.lock().expect("cache lock").insert(reference.to_string(), loaded.clone());
        loaded.map_err(Error::invalid)
    }
}

/// Scores `metric` against every trial. Trials whose images cannot be
/// loaded or measured are recorded in `errors` and left out of the means.
/// Trials are evaluated on worker threads; the report does not depend on
/// scheduling.
pub fn evaluate_metric<M>(metric: M, trials: &[TwoAfcTrial], load: &(dyn Fn(&str) -> Result<Image> + Sync)) -> Result<AgreementReport>
where
    M: Fn(&Image, &Image) -> Result<f64> + Sync,
{
    if trials.is_empty() {
        return Err(Error::invalid("no trials to evaluate"));
    }
    let score_one = |index: usize, t: &TwoAfcTrial| -> std::result::Result<TrialScore, TrialError> {
        let run = || -> Result<TrialScore> {
            let r = load(&t.reference)?;
            let x0 = load(&t.x0)?;
            let x1 = load(&t.x1)?;
            let d0 = metric(&r, &x0)?;
            let d1 = metric(&r, &x1)?;
            Ok(TrialScore { index, category: t.category, d0, d1, p: t.p, score: afc_score(d0, d1, t.p)? })
        };
        run().map_err(|e| TrialError { index, message: e.to_string() })
    };
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(trials.len());
    let chunk = trials.len().div_ceil(workers);
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = trials
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                let score_one = &score_one;
                s.spawn(move || part.iter().enumerate().map(|(i, t)| score_one(ci * chunk + i, t)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let (mut scores, mut errors) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => errors.push(e),
        }
    }
    AgreementReport::from_scores(scores, errors)
}

/// Divides every distance by the largest one.
pub fn normalize_distances(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::invalid("empty distance set"));
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::invalid("distances must be finite and non-negative"));
    }
    let max = distances.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::Degenerate("all distances are zero".into()));
    }
    Ok(distances.iter().map(|d| d / max).collect())
}

/// `|real_i − synth_i|` divided by its maximum.
pub fn normalize_ratings(real: &[u8], synth: &[u8]) -> Result<Vec<f64>> {
    if real.len() != synth.len() {
        return Err(Error::shape(format!("{} real vs {} synthetic ratings", real.len(), synth.len())));
    }
    if let Some(s) = real.iter().chain(synth).find(|s| !(1..=6).contains(*s)) {
        return Err(Error::invalid(format!("star rating {s} outside 1..6")));
    }
    let diffs: Vec<f64> = real.iter().zip(synth).map(|(&a, &b)| (a as f64 - b as f64).abs()).collect();
    let max = diffs.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::Degenerate("real and synthetic ratings coincide".into()));
    }
    Ok(diffs.iter().map(|d| d / max).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub n: usize,
    /// Two-sided, from `t = r·√((n−2)/(1−r²))` with `n − 2` degrees of freedom.
    pub p_value: f64,
}

/// Pearson product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 samples, got {n}")));
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let r = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, n, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingKind {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub image_id: String,
    pub kind: RatingKind,
    pub stars: u8,
    pub set_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distortion {
    Noise,
    Blur,
    Shift,
}

impl Distortion {
    /// Additive Gaussian noise of std `m`, Gaussian blur of sigma `m`, or a
    /// diagonal translation by `m` pixels.
    pub fn apply(self, image: &Image, magnitude: f64, rng: &mut Rng) -> Image {
        if magnitude == 0.0 {
            return image.clone();
        }
        match self {
            Distortion::Noise => {
                let mut out = image.clone();
                out.data.iter_mut().for_each(|v| *v += magnitude * rng.normal());
                out.clamp01()
            }
            Distortion::Blur => image.gaussian_blur(magnitude),
            Distortion::Shift => {
                let s = magnitude.round() as isize;
                image.shift(s, s)
            }
        }
    }

    /// Low/high magnitude pair with `high ≥ 2·low` (strictly positive high).
    fn magnitudes(self, rng: &mut Rng, zero_low: bool) -> (f64, f64) {
        let (low, ratio) = match self {
            Distortion::Noise => (rng.uniform_range(0.01, 0.05), rng.uniform_range(3.0, 6.0)),
            Distortion::Blur => (rng.uniform_range(0.4, 0.9), rng.uniform_range(2.5, 4.0)),
            Distortion::Shift => (1.0, [3.0, 4.0][rng.below(2)]),
        };
        (if zero_low { 0.0 } else { low }, low * ratio)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTrial {
    pub reference: Image,
    pub x0: Image,
    pub x1: Image,
    pub p: f64,
    pub family: Distortion,
    /// Magnitudes applied to `x0` and `x1`.
    pub magnitudes: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSpec {
    pub trials: usize,
    /// Probability that the milder side is the undistorted reference.
    pub zero_side_p: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self { trials: 500, zero_side_p: 0.1 }
    }
}

/// Each trial distorts one corpus image with one family at two magnitudes;
/// the milder side is the ground-truth choice (`p` is 1 when it is `x1`).
pub fn generate_synthetic_benchmark(corpus: &[Image], spec: &BenchmarkSpec, rng: &Rng) -> Result<Vec<SyntheticTrial>> {
    if corpus.is_empty() {
        return Err(Error::invalid("benchmark corpus is empty"));
    }
    let families = [Distortion::Noise, Distortion::Blur, Distortion::Shift];
    Ok((0..spec.trials)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let reference = corpus[r.below(corpus.len())].clone();
            let family = families[i % families.len()];
            let zero_low = r.bernoulli(spec.zero_side_p);
            let (low, high) = family.magnitudes(&mut r, zero_low);
            let low_img = family.apply(&reference, low, &mut r);
            let high_img = family.apply(&reference, high, &mut r);
            let (x0, x1, p, magnitudes) = if r.bernoulli(0.5) {
                (high_img, low_img, 1.0, (high, low))
            } else {
                (low_img, high_img, 0.0, (low, high))
            };
            SyntheticTrial { reference, x0, x1, p, family, magnitudes }
        })
        .collect())
}

/// Writes trial images as 8-bit PNGs under `ref/`, `p0/`, `p1/` next to
/// `manifest`, a `judge.csv` sidecar, and the manifest itself (paths relative
/// to its directory). Returns the manifest entries.
pub fn write_benchmark(manifest: impl AsRef<Path>, trials: &[SyntheticTrial]) -> Result<Vec<TwoAfcTrial>> {
    let manifest_path = manifest.as_ref();
    let dir = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    for sub in ["ref", "p0", "p1"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(trials.len());
    let mut judge = csv::Writer::from_writer(Vec::new());
    judge.write_record(["name", "p"])?;
    for (i, t) in trials.iter().enumerate() {
        let name = format!("{i:05}.png");
        t.reference.save(dir.join("ref").join(&name))?;
        t.x0.save(dir.join("p0").join(&name))?;
        t.x1.save(dir.join("p1").join(&name))?;
        judge.write_record([name.clone(), t.p.to_string()])?;
        entries.push(TwoAfcTrial {
            reference: format!("ref/{name}"),
            x0: format!("p0/{name}"),
            x1: format!("p1/{name}"),
            p: t.p,
            category: Category::Synthetic,
        });
    }
    write_manifest(manifest_path, &entries)?;
    let judge_path = dir.join("judge.csv");
    let mut f = std::fs::File::create(&judge_path).map_err(|e| Error::io(&judge_path, e))?;
    f.write_all(&judge.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
        .map_err(|e| Error::io(&judge_path, e))?;
    Ok(entries)
}

/// Reads a directory laid out as `ref/`, `p0/`, `p1/` with matching file
/// names and a `judge.csv` (`name,p`) sidecar.
pub fn load_bapps_dir(dir: impl AsRef<Path>, category: Category) -> Result<Vec<TwoAfcTrial>> {
    let dir = dir.as_ref();
    let judge_path = dir.join("judge.csv");
    let mut reader = csv::Reader::from_path(&judge_path)?;
    let mut trials = Vec::new();
    for row in reader.records() {
        let row = row?;
        let (Some(name), Some(p)) = (row.get(0), row.get(1)) else {
            return Err(Error::invalid(format!("{}: rows need name,p", judge_path.display())));
        };
        let p: f64 = p.trim().parse().map_err(|_| Error::invalid(format!("bad judge value {p:?} for {name}")))?;
        for sub in ["ref", "p0", "p1"] {
            if !dir.join(sub).join(name).is_file() {
                return Err(Error::invalid(format!("missing {sub}/{name}")));
            }
        }
        trials.push(TwoAfcTrial {
            reference: format!("ref/{name}"),
            x0: format!("p0/{name}"),
            x1: format!("p1/{name}"),
            p,
            category,
        });
    }
    Ok(trials)
}
