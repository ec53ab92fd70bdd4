//! Randomized load/PV scenarios solved on the ground-truth feeder.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cio::{self, Pair};
use crate::error::{Error, Result};
use crate::loadflow::{self, Injection, SolverOptions, VoltageProfile};
use crate::network::{derive_operators, DerivedOperator, FeederModel};
use crate::CVector;

/// Draws allowed per sample before generation gives up.
const MAX_DRAWS_PER_SAMPLE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvLocation {
    /// 1-indexed PQ bus.
    pub bus: usize,
    /// 0, 1, 2 for phases a, b, c.
    pub phase: usize,
}

/// How load multipliers are shared across the feeder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadVariation {
    /// An independent multiplier for every bus and phase.
    #[default]
    PerPhase,
    /// One multiplier per bus, shared by its three phases.
    PerBus,
    /// One multiplier for the whole feeder.
    Feeder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Uniform multiplier range applied to `nominal_load`.
    pub load_range: [f64; 2],
    pub load_variation: LoadVariation,
    pub pv_buses: Vec<PvLocation>,
    /// Uniform real-power range of each PV unit, p.u.
    pub pv_range: [f64; 2],
    /// Per-phase load, drawn as a negative injection.
    pub nominal_load: Complex64,
    /// Share of each load placed on the delta branch of the same index.
    pub delta_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_train: 40,
            n_test: 1000,
            load_range: [0.5, 1.5],
            load_variation: LoadVariation::PerPhase,
            pv_buses: Vec::new(),
            pv_range: [0.0, 0.05],
            nominal_load: Complex64::new(0.01, 0.005),
            delta_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, n_buses: usize) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        if !ordered(self.load_range) {
            return Err(Error::Config(format!(
                "load_range {:?} is not ordered",
                self.load_range
            )));
        }
        if !ordered(self.pv_range) || self.pv_range[0] < 0.0 {
            return Err(Error::Config(format!(
                "pv_range {:?} must be an ordered nonnegative range",
                self.pv_range
            )));
        }
        if !(0.0..=1.0).contains(&self.delta_fraction) {
            return Err(Error::Config(format!(
                "delta_fraction {} outside [0, 1]",
                self.delta_fraction
            )));
        }
        if !self.nominal_load.is_finite() {
            return Err(Error::Config("nominal_load must be finite".into()));
        }
        if let Some(pv) = self
            .pv_buses
            .iter()
            .find(|pv| pv.bus == 0 || pv.bus > n_buses || pv.phase > 2)
        {
            return Err(Error::Config(format!(
                "PV location bus {} phase {} outside a {n_buses}-bus feeder",
                pv.bus, pv.phase
            )));
        }
        Ok(())
    }
}

/// `count` distinct random (bus, phase) PV sites.
pub fn random_pv_locations(n_buses: usize, count: usize, seed: u64) -> Vec<PvLocation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = count.min(3 * n_buses);
    let mut sites: Vec<PvLocation> = index::sample(&mut rng, 3 * n_buses, count)
        .into_iter()
        .map(|k| PvLocation {
            bus: k / 3 + 1,
            phase: k % 3,
        })
        .collect();
    sites.sort_by_key(|p| (p.bus, p.phase));
    sites
}

pub fn sample_injection(config: &ScenarioConfig, n_buses: usize, rng: &mut impl Rng) -> Injection {
    let n = 3 * n_buses;
    let mut s_wye = CVector::zeros(n);
    let mut s_delta = CVector::zeros(n);
    let [lo, hi] = config.load_range;
    let split = config.delta_fraction;
    let mut m = 0.0;
    for i in 0..n {
        let fresh = match config.load_variation {
            LoadVariation::PerPhase => true,
            LoadVariation::PerBus => i % 3 == 0,
            LoadVariation::Feeder => i == 0,
        };
        if fresh {
            m = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        }
        let load = -config.nominal_load * m;
        s_wye[i] = load * (1.0 - split);
        s_delta[i] = load * split;
    }
    let [pv_lo, pv_hi] = config.pv_range;
    for pv in &config.pv_buses {
        let p = if pv_lo < pv_hi {
            rng.gen_range(pv_lo..=pv_hi)
        } else {
            pv_lo
        };
        s_wye[3 * (pv.bus - 1) + pv.phase] += Complex64::new(p, 0.0);
    }
    Injection { s_wye, s_delta }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub injection: Injection,
    pub voltage: VoltageProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feeder_name: String,
    pub split: Split,
    pub generation: ScenarioConfig,
    pub v_slack: [Complex64; 3],
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn n_buses(&self) -> usize {
        self.samples.first().map_or(0, |s| s.voltage.n_buses())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Worst fixed-point residual of the stored samples against `op`.
    pub fn max_residual(&self, op: &DerivedOperator) -> Result<f64> {
        self.samples.iter().try_fold(0.0f64, |acc, s| {
            Ok(acc.max(loadflow::fixed_point_residual(
                &op.x,
                &op.w,
                &s.voltage.v,
                &s.injection,
            )?))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerationStats {
    pub rejected: usize,
}

/// Solves `n_train + n_test` random scenarios; non-converged draws are
/// redrawn from the same per-sample stream.
pub fn generate_dataset(
    feeder: &FeederModel,
    config: &ScenarioConfig,
) -> Result<(Dataset, Dataset)> {
    generate_dataset_with_stats(feeder, config).map(|(train, test, _)| (train, test))
}

pub fn generate_dataset_with_stats(
    feeder: &FeederModel,
    config: &ScenarioConfig,
) -> Result<(Dataset, Dataset, GenerationStats)> {
    let n_buses = feeder.n_buses();
    config.validate(n_buses)?;
    let op = derive_operators(feeder)?;
    let options = SolverOptions::default();
    let total = config.n_train + config.n_test;

    let solved: Vec<Option<(Sample, usize)>> = (0..total)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(index as u64);
            for draw in 0..MAX_DRAWS_PER_SAMPLE {
                let injection = sample_injection(config, n_buses, &mut rng);
                match loadflow::solve_flat_start(&op, &injection, &options) {
                    Ok(report) if report.converged => {
                        return Some((
                            Sample {
                                injection,
                                voltage: report.profile,
                            },
                            draw,
                        ))
                    }
                    _ => continue,
                }
            }
            None
        })
        .collect();

    let mut samples = Vec::with_capacity(total);
    let mut rejected = 0;
    for item in solved {
        match item {
            Some((sample, redraws)) => {
                rejected += redraws;
                samples.push(sample);
            }
            None => {
                return Err(Error::GenerationFailed {
                    attempts: MAX_DRAWS_PER_SAMPLE,
                    reason: "a scenario never converged".into(),
                })
            }
        }
    }
    if 2 * rejected > rejected + total {
        return Err(Error::GenerationFailed {
            attempts: rejected + total,
            reason: format!(
                "{rejected} of {} draws failed to converge",
                rejected + total
            ),
        });
    }

    let test_samples = samples.split_off(config.n_train);
    let make = |split, samples| Dataset {
        feeder_name: feeder.name().to_string(),
        split,
        generation: config.clone(),
        v_slack: feeder.v_slack(),
        samples,
    };
    Ok((
        make(Split::Train, samples),
        make(Split::Test, test_samples),
        GenerationStats { rejected },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    feeder_name: String,
    split: Split,
    n_buses: usize,
    n_samples: usize,
    seed: u64,
    v_slack: Vec<Pair>,
    config: ScenarioConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    s_wye: Vec<Pair>,
    s_delta: Vec<Pair>,
    v: Vec<Pair>,
}

pub fn write_dataset(dataset: &Dataset, out: impl Write) -> Result<()> {
    let mut out = BufWriter::new(out);
    let header = DatasetHeader {
        feeder_name: dataset.feeder_name.clone(),
        split: dataset.split,
        n_buses: dataset.n_buses(),
        n_samples: dataset.len(),
        seed: dataset.generation.seed,
        v_slack: dataset.v_slack.iter().copied().map(cio::to_pair).collect(),
        config: dataset.generation.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for sample in &dataset.samples {
        let record = SampleRecord {
            s_wye: cio::vector_to_pairs(&sample.injection.s_wye),
            s_delta: cio::vector_to_pairs(&sample.injection.s_delta),
            v: cio::vector_to_pairs(&sample.voltage.v),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let mut lines = input.lines();
    let header: DatasetHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Parse("empty dataset file".into())),
    };
    let n = 3 * header.n_buses;
    let v0 = cio::vector_from_pairs("v_slack", &header.v_slack, 3)?;
    let mut samples = Vec::with_capacity(header.n_samples);
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("record {k}: {e}")))?;
        samples.push(Sample {
            injection: Injection::new(
                cio::vector_from_pairs("s_wye", &record.s_wye, n)?,
                cio::vector_from_pairs("s_delta", &record.s_delta, n)?,
            )?,
            voltage: VoltageProfile::new(cio::vector_from_pairs("v", &record.v, n)?),
        });
    }
    if samples.len() != header.n_samples {
        return Err(Error::validation(
            "n_samples",
            format!(
                "header declares {}, file holds {}",
                header.n_samples,
                samples.len()
            ),
        ));
    }
    Ok(Dataset {
        feeder_name: header.feeder_name,
        split: header.split,
        generation: header.config,
        v_slack: [v0[0], v0[1], v0[2]],
        samples,
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, File::create(path)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::generate_synthetic_feeder;
    use std::collections::HashSet;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn degenerate_ranges_give_nominal_wye() {
        let config = ScenarioConfig {
            load_range: [1.0, 1.0],
            pv_range: [0.0, 0.0],
            delta_fraction: 0.0,
            pv_buses: vec![PvLocation { bus: 1, phase: 0 }],
            ..Default::default()
        };
        let s = sample_injection(&config, 3, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(s.s_wye.iter().all(|z| *z == -config.nominal_load));
        assert!(s.s_delta.iter().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn full_delta_leaves_only_pv_on_wye() {
        let config = ScenarioConfig {
            delta_fraction: 1.0,
            pv_buses: vec![PvLocation { bus: 2, phase: 1 }],
            ..Default::default()
        };
        let s = sample_injection(&config, 2, &mut ChaCha8Rng::seed_from_u64(2));
        for i in 0..6 {
            if i == 4 {
                assert!(s.s_wye[i].re >= 0.0 && s.s_wye[i].im == 0.0);
            } else {
                assert_eq!(s.s_wye[i], c(0.0, 0.0));
            }
        }
    }

    #[test]
    fn sampled_values_stay_in_bounds() {
        let config = ScenarioConfig {
            pv_buses: random_pv_locations(4, 3, 0),
            ..Default::default()
        };
        let pv: HashSet<usize> = config
            .pv_buses
            .iter()
            .map(|p| 3 * (p.bus - 1) + p.phase)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = sample_injection(&config, 4, &mut rng);
            for i in 0..12 {
                // Delta share is 20% of a load in [-0.015, -0.005] real.
                let d = s.s_delta[i].re;
                assert!((-0.003 - 1e-15..=-0.001 + 1e-15).contains(&d));
                let pv_part = s.s_wye[i].re - 4.0 * d;
                if pv.contains(&i) {
                    assert!((-1e-15..=0.05 + 1e-15).contains(&pv_part));
                } else {
                    assert!(pv_part.abs() < 1e-15);
                    assert!((-0.015..=0.0).contains(&s.s_wye[i].re));
                }
            }
        }
    }

    #[test]
    fn pv_locations_are_distinct_and_valid() {
        let sites = random_pv_locations(13, 10, 4);
        assert_eq!(sites.len(), 10);
        let unique: HashSet<_> = sites.iter().map(|p| (p.bus, p.phase)).collect();
        assert_eq!(unique.len(), 10);
        assert!(sites
            .iter()
            .all(|p| (1..=13).contains(&p.bus) && p.phase < 3));
        let config = ScenarioConfig {
            pv_buses: sites,
            ..Default::default()
        };
        assert!(config.validate(13).is_ok());
        assert!(config.validate(2).is_err());
    }

    #[test]
    fn sizes_replay_and_determinism() {
        let feeder = generate_synthetic_feeder(13, 1).unwrap();
        let config = ScenarioConfig {
            n_train: 40,
            n_test: 1000,
            pv_buses: random_pv_locations(13, 2, 1),
            seed: 5,
            ..Default::default()
        };
        let (train, test) = generate_dataset(&feeder, &config).unwrap();
        assert_eq!((train.len(), test.len()), (40, 1000));
        let op = derive_operators(&feeder).unwrap();
        assert!(train.max_residual(&op).unwrap() < 1e-8);
        assert!(test.max_residual(&op).unwrap() < 1e-8);

        let (train2, test2) = generate_dataset(&feeder, &config).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);

        let mut seen = HashSet::new();
        for s in train.samples.iter().chain(&test.samples) {
            let key: Vec<u64> = s
                .injection
                .s_wye
                .iter()
                .flat_map(|z| [z.re.to_bits(), z.im.to_bits()])
                .collect();
            assert!(seen.insert(key), "duplicate sample");
        }
    }

    #[test]
    fn zero_load_gives_no_load_voltage() {
        let feeder = generate_synthetic_feeder(3, 2).unwrap();
        let op = derive_operators(&feeder).unwrap();
        let config = ScenarioConfig {
            n_train: 3,
            n_test: 5,
            nominal_load: c(0.0, 0.0),
            pv_range: [0.0, 0.0],
            pv_buses: vec![PvLocation { bus: 1, phase: 2 }],
            ..Default::default()
        };
        let (train, test) = generate_dataset(&feeder, &config).unwrap();
        for s in train.samples.iter().chain(&test.samples) {
            assert_eq!(s.voltage.v, op.w);
        }
    }

    #[test]
    fn impossible_scenario_fails() {
        let feeder = generate_synthetic_feeder(3, 2).unwrap();
        let config = ScenarioConfig {
            n_train: 2,
            n_test: 2,
            nominal_load: c(1e4, 1e4),
            ..Default::default()
        };
        assert!(matches!(
            generate_dataset(&feeder, &config),
            Err(Error::GenerationFailed { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let feeder = generate_synthetic_feeder(2, 9).unwrap();
        let config = ScenarioConfig {
            n_train: 4,
            n_test: 3,
            ..Default::default()
        };
        let (train, _) = generate_dataset(&feeder, &config).unwrap();
        let mut buf = Vec::new();
        write_dataset(&train, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(read_dataset(&buf[..]).unwrap(), train);
    }

    #[test]
    fn truncated_jsonl_is_rejected() {
        let feeder = generate_synthetic_feeder(2, 9).unwrap();
        let config = ScenarioConfig {
            n_train: 4,
            n_test: 3,
            ..Default::default()
        };
        let (train, _) = generate_dataset(&feeder, &config).unwrap();
        let mut buf = Vec::new();
        write_dataset(&train, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            read_dataset(cut.as_bytes()),
            Err(Error::Validation { .. })
        ));
    }
}
