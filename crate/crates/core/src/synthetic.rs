//! Synthetic run-to-failure data in the C-MAPSS file layout.
//!
//! Each engine degrades along `(c / T)^p` with an engine-specific exponent;
//! informative sensors drift with it, a fixed subset stays constant, and all
//! readings carry Gaussian noise. Test engines are cut at a random cycle and
//! the remaining life goes to the RUL file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{rul_path, split_path, Split, SubsetId, NUM_SENSORS};

/// Sensors with no drift and no noise, as in the single-condition subsets.
const CONSTANT_SENSORS: [usize; 6] = [0, 4, 9, 15, 17, 18];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub train_engines: usize,
    pub test_engines: usize,
    pub min_life: usize,
    pub max_life: usize,
    /// Force the training rows to sum to this value.
    pub train_rows: Option<usize>,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Engine count and row total of the FD001 training split.
    pub fn fd001_like(seed: u64) -> Self {
        Self {
            train_engines: 100,
            test_engines: 100,
            min_life: 128,
            max_life: 362,
            train_rows: Some(20631),
            noise: 0.3,
            seed,
        }
    }

    pub fn small(engines: usize, seed: u64) -> Self {
        Self {
            train_engines: engines,
            test_engines: engines,
            min_life: 90,
            max_life: 160,
            train_rows: None,
            noise: 0.3,
            seed,
        }
    }
}

fn lifetimes(spec: &SyntheticSpec, n: usize, total: Option<usize>, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut lens: Vec<usize> = (0..n).map(|_| rng.random_range(spec.min_life..=spec.max_life)).collect();
    if let Some(total) = total {
        if total < n * spec.min_life || total > n * spec.max_life {
            return Err(Error::invalid(format!(
                "{total} rows cannot be split over {n} engines with lives in [{}, {}]",
                spec.min_life, spec.max_life
            )));
        }
        let mut sum: usize = lens.iter().sum();
        let mut i = 0;
        while sum != total {
            let l = &mut lens[i % n];
            if sum < total && *l < spec.max_life {
                *l += 1;
                sum += 1;
            } else if sum > total && *l > spec.min_life {
                *l -= 1;
                sum -= 1;
            }
            i += 1;
        }
    }
    Ok(lens)
}

struct EngineModel {
    exponent: f64,
    offsets: [f64; NUM_SENSORS],
}

fn sensor_base(s: usize) -> (f64, f64) {
    // (nominal level, drift at end of life)
    let level = 100.0 + 37.0 * s as f64;
    let drift = if s % 2 == 0 { 4.0 + s as f64 * 0.2 } else { -(3.0 + s as f64 * 0.15) };
    (level, drift)
}

fn engine_rows(id: u32, life: usize, cut: usize, m: &EngineModel, noise: &Normal<f64>, rng: &mut impl Rng) -> String {
    let mut s = String::new();
    for c in 1..=cut {
        let deg = (c as f64 / life as f64).powf(m.exponent);
        let _ = write!(
            s,
            "{id} {c} {:.4} {:.4} 100.0",
            rng.random_range(-0.0087..0.0087),
            rng.random_range(-0.0006..0.0006)
        );
        for k in 0..NUM_SENSORS {
            let (level, drift) = sensor_base(k);
            let v = if CONSTANT_SENSORS.contains(&k) {
                level
            } else {
                level + m.offsets[k] + drift * deg + noise.sample(rng)
            };
            let _ = write!(s, " {v:.4}");
        }
        s.push('\n');
    }
    s
}

/// Writes `train_`, `test_` and `RUL_` files for `subset` under `dir`.
pub fn write_synthetic_subset(dir: &Path, subset: SubsetId, spec: &SyntheticSpec) -> Result<()> {
    if spec.min_life < 2 || spec.min_life > spec.max_life {
        return Err(Error::invalid("synthetic lifetimes must satisfy 2 <= min <= max"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let new_engine = |rng: &mut ChaCha8Rng| EngineModel {
        exponent: rng.random_range(1.5..3.5),
        offsets: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
    };

    let train_lives = lifetimes(spec, spec.train_engines, spec.train_rows, &mut rng)?;
    let mut train = String::new();
    for (i, &life) in train_lives.iter().enumerate() {
        let m = new_engine(&mut rng);
        train.push_str(&engine_rows(i as u32 + 1, life, life, &m, &noise, &mut rng));
    }
    let path = split_path(dir, subset, Split::Train);
    fs::write(&path, train).map_err(|e| Error::io(&path, e))?;

    let test_lives = lifetimes(spec, spec.test_engines, None, &mut rng)?;
    let mut test = String::new();
    let mut rul = String::new();
    for (i, &life) in test_lives.iter().enumerate() {
        let m = new_engine(&mut rng);
        let cut = rng.random_range((life / 5).max(1)..=life - 1);
        test.push_str(&engine_rows(i as u32 + 1, life, cut, &m, &noise, &mut rng));
        let _ = writeln!(rul, "{}", life - cut);
    }
    let path = split_path(dir, subset, Split::Test);
    fs::write(&path, test).map_err(|e| Error::io(&path, e))?;
    let path = rul_path(dir, subset);
    fs::write(&path, rul).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
