//! Stage orchestration: multishot solve, denoise, phase cycling, JVC.
//!
//! Stages run one after another over all frames (frames in parallel inside a
//! stage), so a failure leaves every earlier stage complete. With an output
//! directory each stage is persisted as soon as it finishes and can be
//! reloaded to resume from any later stage.
//!
//! ```text
//! <out>/config.toml        resolved configuration
//! <out>/mussels.ncf        complex-shots  [frames, shots, 1, n1_ext, n2]
//! <out>/mussels_log.json   per-frame iteration records
//! <out>/denoised.ncf       complex-shots  (absent with skip_denoise)
//! <out>/phases.ncf         phase          [frames, shots, 1, n1_ext, n2]
//! <out>/final.ncf          magnitude      [frames, 1, 1, n1_ext, n2]
//! <out>/metrics.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::container::{Container, Dtype, Layout, Provenance};
use crate::dataset::{Dataset, Protocol};
use crate::denoiser::{combine_magnitude, denoise_shots};
use crate::error::{Error, Result};
use crate::jvc::solve_jvc;
use crate::mussels::{shot_magnitude, solve_mussels, IterationRecord};
use crate::phase_cycling::{estimate_phases, PhaseCycleConfig};
use crate::quantify::{phase_error_median, rmse_percent, rmse_percent_complex, rmse_percent_series};
use crate::simulate::shot_images;
use crate::tensor::{phase, C64};

pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Mussels,
    Denoise,
    PhaseCycling,
    Jvc,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mussels" => Ok(Stage::Mussels),
            "denoise" => Ok(Stage::Denoise),
            "phase-cycling" => Ok(Stage::PhaseCycling),
            "jvc" => Ok(Stage::Jvc),
            other => Err(Error::InvalidParameter(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusselsLog {
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

/// Everything the stages produced, frame-indexed.
#[derive(Debug, Clone, Default)]
pub struct StageOutputs {
    pub mussels: Vec<Array3<C64>>,
    pub mussels_logs: Vec<MusselsLog>,
    pub denoised: Option<Vec<Array3<C64>>>,
    /// magnitude handed to phase cycling and JVC
    pub m_init: Vec<Array2<f64>>,
    pub phases: Option<Vec<Array3<f64>>>,
    /// signed real JVC solution
    pub jvc: Option<Vec<Array2<f64>>>,
    pub jvc_converged: Vec<bool>,
}

impl StageOutputs {
    /// The displayed result of each frame: `|m_jvc|`, or the multishot
    /// magnitude when the run stopped early.
    pub fn final_images(&self) -> Vec<Array2<f64>> {
        match &self.jvc {
            Some(j) => j.iter().map(|m| m.mapv(f64::abs)).collect(),
            None => self.mussels.iter().map(shot_magnitude).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRmse {
    /// mean shot magnitude of the multishot images
    pub mussels: f64,
    /// mean shot magnitude after the denoiser
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoised: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(rename = "final")]
    pub final_: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub mussels_iterations: usize,
    pub mussels_converged: bool,
    /// complex shot images against `m e^{i phi*}`
    pub mussels_shot_rmse_percent: f64,
    pub rmse_percent: StageRmse,
    /// per shot, after removing a global constant
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub phase_error_median_rad: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jvc_converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub protocol: Protocol,
    pub n_frames: usize,
    pub stages: Vec<Stage>,
    /// pooled over frames; absent without ground truth
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_percent: Option<StageRmse>,
    pub frames: Vec<FrameMetrics>,
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub outputs: StageOutputs,
    pub metrics: Metrics,
}

pub fn mussels_stage(ds: &Dataset, cfg: &PipelineConfig) -> Result<(Vec<Array3<C64>>, Vec<MusselsLog>)> {
    let out: Vec<_> = ds
        .frames
        .par_iter()
        .map(|d| solve_mussels(d, &ds.coils, &cfg.mussels, None))
        .collect::<Result<_>>()?;
    Ok(out
        .into_iter()
        .map(|o| {
            (
                o.images,
                MusselsLog {
                    converged: o.converged,
                    log: o.log,
                },
            )
        })
        .unzip())
}

pub fn denoise_stage(x: &[Array3<C64>], cfg: &PipelineConfig) -> Result<Vec<Array3<C64>>> {
    x.par_iter().map(|xf| denoise_shots(xf, &cfg.denoiser)).collect()
}

/// Magnitude and per-shot phase starts for phase cycling: from the denoised
/// shots when present, else from the multishot images.
pub fn initial_estimates(x: &[Array3<C64>], u: Option<&[Array3<C64>]>) -> Result<(Vec<Array2<f64>>, Vec<Vec<Array2<f64>>>)> {
    let src = u.unwrap_or(x);
    let mut m = Vec::with_capacity(src.len());
    let mut phi = Vec::with_capacity(src.len());
    for (f, s) in src.iter().enumerate() {
        m.push(match u {
            Some(_) => combine_magnitude(s)?,
            None => shot_magnitude(&x[f]),
        });
        phi.push(s.outer_iter().map(|shot| phase(&shot.to_owned())).collect());
    }
    Ok((m, phi))
}

pub fn phase_stage(
    ds: &Dataset,
    m_init: &[Array2<f64>],
    phi0: &[Vec<Array2<f64>>],
    cfg: &PipelineConfig,
) -> Result<Vec<Array3<f64>>> {
    (0..ds.frames.len())
        .into_par_iter()
        .map(|f| {
            let pc = PhaseCycleConfig {
                seed: cfg.seed.wrapping_add(1000 * f as u64),
                ..cfg.phase_cycling.clone()
            };
            let est = estimate_phases(&m_init[f], &ds.frames[f], &ds.coils, &pc, &phi0[f])?;
            let views: Vec<_> = est.iter().map(|e| e.phase.view()).collect();
            Ok(ndarray::stack(Axis(0), &views).expect("equal grids"))
        })
        .collect()
}

pub fn jvc_stage(
    ds: &Dataset,
    m_init: &[Array2<f64>],
    phases: &[Array3<f64>],
    cfg: &PipelineConfig,
) -> Result<(Vec<Array2<f64>>, Vec<bool>)> {
    let out: Vec<_> = (0..ds.frames.len())
        .into_par_iter()
        .map(|f| {
            let phi: Vec<Array2<f64>> = phases[f].outer_iter().map(|p| p.to_owned()).collect();
            solve_jvc(&m_init[f], &phi, &ds.frames[f], &ds.coils, &cfg.jvc)
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().map(|o| (o.image, o.converged)).unzip())
}

/// Stages after the multishot solve, on given multishot images.
pub fn finish_from_mussels(
    ds: &Dataset,
    cfg: &PipelineConfig,
    mussels: Vec<Array3<C64>>,
    mussels_logs: Vec<MusselsLog>,
) -> Result<StageOutputs> {
    let mut out = StageOutputs {
        mussels,
        mussels_logs,
        ..Default::default()
    };
    if cfg.stages.stop_after_mussels {
        out.m_init = out.mussels.iter().map(shot_magnitude).collect();
        return Ok(out);
    }
    if !cfg.stages.skip_denoise {
        out.denoised = Some(denoise_stage(&out.mussels, cfg)?);
    }
    let (m_init, phi0) = initial_estimates(&out.mussels, out.denoised.as_deref())?;
    let phases = phase_stage(ds, &m_init, &phi0, cfg)?;
    let (jvc, conv) = jvc_stage(ds, &m_init, &phases, cfg)?;
    out.m_init = m_init;
    out.phases = Some(phases);
    out.jvc = Some(jvc);
    out.jvc_converged = conv;
    Ok(out)
}

/// In-memory run over a dataset.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    ds.validate()?;
    let (x, logs) = mussels_stage(ds, cfg)?;
    let outputs = finish_from_mussels(ds, cfg, x, logs)?;
    let metrics = compute_metrics(ds, cfg, &outputs)?;
    Ok(PipelineRun { outputs, metrics })
}

fn stages_run(cfg: &PipelineConfig) -> Vec<Stage> {
    let mut s = vec![Stage::Mussels];
    if cfg.stages.stop_after_mussels {
        return s;
    }
    if !cfg.stages.skip_denoise {
        s.push(Stage::Denoise);
    }
    s.push(Stage::PhaseCycling);
    s.push(Stage::Jvc);
    s
}

pub fn compute_metrics(ds: &Dataset, cfg: &PipelineConfig, out: &StageOutputs) -> Result<Metrics> {
    let finals = out.final_images();
    let mut frames = Vec::with_capacity(ds.frames.len());
    let mut pooled = None;
    if let Some(truth) = &ds.truth {
        let sup = &truth.support;
        let m_mussels: Vec<Array2<f64>> = out.mussels.iter().map(shot_magnitude).collect();
        let m_den: Option<Vec<Array2<f64>>> = out
            .denoised
            .as_ref()
            .map(|u| u.iter().map(combine_magnitude).collect::<Result<_>>())
            .transpose()?;
        for f in 0..ds.frames.len() {
            let phi_true: Vec<Array2<f64>> = truth.phases[f].outer_iter().map(|p| p.to_owned()).collect();
            let x_true = shot_images(&truth.magnitude[f], &phi_true);
            let phase_err = match &out.phases {
                Some(p) => p[f]
                    .outer_iter()
                    .zip(&phi_true)
                    .map(|(e, t)| phase_error_median(&e.to_owned(), t, sup))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            frames.push(FrameMetrics {
                index: f,
                mussels_iterations: out.mussels_logs[f].log.len(),
                mussels_converged: out.mussels_logs[f].converged,
                mussels_shot_rmse_percent: rmse_percent_complex(&out.mussels[f], &x_true, sup)?,
                rmse_percent: StageRmse {
                    mussels: rmse_percent(&m_mussels[f], &truth.magnitude[f], sup)?,
                    denoised: m_den.as_ref().map(|m| rmse_percent(&m[f], &truth.magnitude[f], sup)).transpose()?,
                    final_: out.jvc.as_ref().map(|_| rmse_percent(&finals[f], &truth.magnitude[f], sup)).transpose()?,
                },
                phase_error_median_rad: phase_err,
                jvc_converged: out.jvc.as_ref().map(|_| out.jvc_converged[f]),
            });
        }
        pooled = Some(StageRmse {
            mussels: rmse_percent_series(&m_mussels, &truth.magnitude, sup)?,
            denoised: m_den.as_ref().map(|m| rmse_percent_series(m, &truth.magnitude, sup)).transpose()?,
            final_: out.jvc.as_ref().map(|_| rmse_percent_series(&finals, &truth.magnitude, sup)).transpose()?,
        });
    } else {
        for f in 0..ds.frames.len() {
            frames.push(FrameMetrics {
                index: f,
                mussels_iterations: out.mussels_logs[f].log.len(),
                mussels_converged: out.mussels_logs[f].converged,
                mussels_shot_rmse_percent: f64::NAN,
                rmse_percent: StageRmse {
                    mussels: f64::NAN,
                    denoised: None,
                    final_: None,
                },
                phase_error_median_rad: Vec::new(),
                jvc_converged: out.jvc.as_ref().map(|_| out.jvc_converged[f]),
            });
        }
    }
    Ok(Metrics {
        schema_version: METRICS_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        protocol: ds.manifest.protocol,
        n_frames: ds.frames.len(),
        stages: stages_run(cfg),
        rmse_percent: pooled,
        frames,
    })
}

/// On-disk run with every stage persisted. Stages before `from` are loaded
/// from `out_dir` instead of recomputed.
pub struct DirRun {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub from: Stage,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl DirRun {
    fn prov(&self, cfg: &PipelineConfig) -> Provenance {
        Provenance {
            seed: Some(cfg.seed),
            config_hash: Some(cfg.hash()),
        }
    }

    fn save_shots(&self, name: &str, x: &[Array3<C64>], cfg: &PipelineConfig) -> Result<()> {
        Container::from_shot_frames(Layout::ComplexShots, Dtype::C128, x)?
            .with_provenance(self.prov(cfg))
            .write(self.out_dir.join(name))
    }

    fn load_shots(&self, name: &str, n_frames: usize) -> Result<Vec<Array3<C64>>> {
        let c = Container::read(self.out_dir.join(name))?;
        c.expect_layout(Layout::ComplexShots)?;
        if c.dims()[0] != n_frames {
            return Err(Error::shape(name, &[n_frames], &[c.dims()[0]]));
        }
        (0..n_frames).map(|f| c.shot_stack(f)).collect()
    }

    pub fn run(&self, cfg: &PipelineConfig) -> Result<PipelineRun> {
        cfg.validate()?;
        let ds = Dataset::read(&self.dataset)?;
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        write_text(&self.out_dir.join("config.toml"), &cfg.to_toml()?)?;
        let n = ds.frames.len();

        let (mussels, logs) = if self.from <= Stage::Mussels {
            let (x, logs) = mussels_stage(&ds, cfg)?;
            self.save_shots("mussels.ncf", &x, cfg)?;
            write_text(&self.out_dir.join("mussels_log.json"), &(serde_json::to_string_pretty(&logs)? + "\n"))?;
            (x, logs)
        } else {
            let x = self.load_shots("mussels.ncf", n)?;
            let path = self.out_dir.join("mussels_log.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            (x, serde_json::from_str(&text)?)
        };

        let mut out = StageOutputs {
            mussels,
            mussels_logs: logs,
            ..Default::default()
        };
        if cfg.stages.stop_after_mussels {
            out.m_init = out.mussels.iter().map(shot_magnitude).collect();
        } else {
            if !cfg.stages.skip_denoise {
                out.denoised = Some(if self.from <= Stage::Denoise {
                    let u = denoise_stage(&out.mussels, cfg)?;
                    self.save_shots("denoised.ncf", &u, cfg)?;
                    u
                } else {
                    self.load_shots("denoised.ncf", n)?
                });
            }
            let (m_init, phi0) = initial_estimates(&out.mussels, out.denoised.as_deref())?;
            let phases = if self.from <= Stage::PhaseCycling {
                let p = phase_stage(&ds, &m_init, &phi0, cfg)?;
                Container::from_real_frames(Layout::Phase, Dtype::F64, &p)?
                    .with_provenance(self.prov(cfg))
                    .write(self.out_dir.join("phases.ncf"))?;
                p
            } else {
                let c = Container::read(self.out_dir.join("phases.ncf"))?;
                c.expect_layout(Layout::Phase)?;
                (0..n).map(|f| c.real_stack(f)).collect::<Result<_>>()?
            };
            let (jvc, conv) = jvc_stage(&ds, &m_init, &phases, cfg)?;
            out.m_init = m_init;
            out.phases = Some(phases);
            out.jvc = Some(jvc);
            out.jvc_converged = conv;
        }
        Container::from_images(Layout::Magnitude, Dtype::F64, &out.final_images())?
            .with_provenance(self.prov(cfg))
            .write(self.out_dir.join("final.ncf"))?;
        let metrics = compute_metrics(&ds, cfg, &out)?;
        write_text(&self.out_dir.join("metrics.json"), &metrics.to_json()?)?;
        Ok(PipelineRun { outputs: out, metrics })
    }
}
