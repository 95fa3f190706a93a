//! Run configuration, manifests and the JSON/CSV writers.
//!
//! JSON floats are written in scientific notation with 17 significant digits
//! so that identical runs give identical bytes.

use std::io::{self, Write};
use std::path::Path;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::adapt::AdaptConfig;
use crate::diagnostics::{CorrCdf, DiagnosticsConfig, Histogram};
use crate::error::{Error, Result};
use crate::synthbench::{BenchOptions, BenchRow, DomainSpec, ShapeFamily, Shift, SweepReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SEED_ENV: &str = "SPECMASK_SEED";

/// Effective configuration of a run. Every field has a default.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the domain generator, the encoder and masker initialisation.
    pub seed: u64,
    pub episodes: usize,
    pub shots: usize,
    pub jobs: usize,
    pub shift: Shift,
    pub shape_family: ShapeFamily,
    /// Band split for the sweep filters.
    pub cutoff: f64,
    pub adapt: AdaptConfig,
    pub diagnostics: DiagnosticsConfig,
    /// Also write the per-bin gate response tensors.
    pub dump_gates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 30,
            shots: 1,
            jobs: 1,
            shift: Shift::HighBandAmpNoise { sigma: 0.5 },
            shape_family: ShapeFamily::Blob,
            cutoff: crate::spectral::DEFAULT_RADIUS_FRAC,
            adapt: AdaptConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            dump_gates: true,
        }
    }
}

impl RunConfig {
    pub fn source(&self) -> DomainSpec {
        let mut d = DomainSpec::source(self.seed);
        d.shape_family = self.shape_family;
        d
    }

    pub fn target(&self) -> DomainSpec {
        self.source().with_shift(self.shift)
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            seed: self.seed,
            ..self.adapt
        }
    }

    pub fn bench_options(&self) -> BenchOptions {
        BenchOptions {
            episodes: self.episodes,
            shots: self.shots,
            jobs: self.jobs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.shots == 0 || self.jobs == 0 {
            return Err(Error::Precondition(
                "episodes, shots and jobs must be at least 1".into(),
            ));
        }
        self.target().validate()?;
        self.adapt_config().validate()
    }

    /// Parses a config file. A previous run's manifest is accepted too, in
    /// which case its `config` snapshot is used.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes)?;
        let inner = match value.get("config") {
            Some(cfg) if value.get("command").is_some() => cfg.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(inner)?)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Pretty JSON, but with fixed-precision floats.
struct FixedFloat(PrettyFormatter<'static>);

impl Formatter for FixedFloat {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            w.write_all(fmt_f64(value).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, FixedFloat(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_bytes(value)?).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_rows_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    write_lines(
        path,
        "episode,baseline_miou,adapted_miou,delta_miou,mi_pre,mi_post,area_pre,area_post,cka_pre,cka_post,first_loss,final_loss,loss_monotone",
        rows.iter().map(|r| {
            let nums = [
                r.baseline_miou,
                r.adapted_miou,
                r.delta_miou,
                r.mi_pre,
                r.mi_post,
                r.area_pre,
                r.area_post,
                r.cka_pre,
                r.cka_post,
                r.first_loss,
                r.final_loss,
            ];
            let body: Vec<String> = nums.iter().map(|&v| fmt_f64(v)).collect();
            format!("{},{},{}", r.episode, body.join(","), r.loss_monotone)
        }),
    )
}

pub fn write_sweep_csv(path: &Path, sweep: &SweepReport) -> Result<()> {
    write_lines(
        path,
        "amp_band,phase_band,mean_miou",
        sweep.rows.iter().map(|r| {
            format!(
                "{},{},{}",
                r.amp_band.name(),
                r.phase_band.name(),
                fmt_f64(r.mean_miou)
            )
        }),
    )
}

pub fn write_hist_csv(path: &Path, h: &Histogram) -> Result<()> {
    write_lines(
        path,
        "bin_left,bin_right,mass",
        (0..h.mass.len()).map(|b| {
            let (l, r) = h.bin_edges(b);
            format!("{},{},{}", fmt_f64(l), fmt_f64(r), fmt_f64(h.mass[b]))
        }),
    )
}

/// CDF increments between consecutive grid points, with the running total.
pub fn write_cdf_csv(path: &Path, cdf: &CorrCdf) -> Result<()> {
    write_lines(
        path,
        "bin_left,bin_right,mass,cdf",
        (0..cdf.grid.len()).map(|i| {
            let (left, below) = if i == 0 {
                (0.0, 0.0)
            } else {
                (cdf.grid[i - 1], cdf.cdf[i - 1])
            };
            format!(
                "{},{},{},{}",
                fmt_f64(left),
                fmt_f64(cdf.grid[i]),
                fmt_f64(cdf.cdf[i] - below),
                fmt_f64(cdf.cdf[i])
            )
        }),
    )
}
