//! Shot-image refinement between the multishot solve and phase cycling.
//!
//! Every kind runs on intensity-normalized data: the real and imaginary
//! channels are each mapped to `[0, 1]` by a min-max affine map, denoised, and
//! mapped back.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Dtype, Layout};
use crate::error::{Error, Result};
use crate::tensor::C64;
use crate::wavelet::{prox_wavelet_l1, Dwt2, Penalized, Wavelet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserSpec {
    Identity,
    ReferenceWavelet {
        #[serde(default)]
        wavelet: Wavelet,
        #[serde(default = "default_levels")]
        levels: usize,
        /// soft threshold in normalized `[0, 1]` units
        sigma_w: f64,
    },
    ExternalProcess {
        /// argv template; `{in}` and `{out}` are replaced by container paths
        command: Vec<String>,
        exchange_dir: PathBuf,
        #[serde(default = "default_layout")]
        layout: Layout,
        #[serde(default = "default_dtype")]
        dtype: Dtype,
    },
}

fn default_levels() -> usize {
    4
}

fn default_layout() -> Layout {
    Layout::ComplexShots
}

fn default_dtype() -> Dtype {
    Dtype::C64
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::ReferenceWavelet {
            wavelet: Wavelet::Db4,
            levels: 4,
            sigma_w: 0.02,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DenoiserSpec::Identity => Ok(()),
            DenoiserSpec::ReferenceWavelet { sigma_w, .. } => {
                if !(*sigma_w >= 0.0) || !sigma_w.is_finite() {
                    return Err(Error::InvalidParameter(format!("sigma_w must be >= 0, got {sigma_w}")));
                }
                Ok(())
            }
            DenoiserSpec::ExternalProcess { command, layout, dtype, .. } => {
                if command.is_empty() {
                    return Err(Error::InvalidParameter("external denoiser command is empty".into()));
                }
                match (layout, dtype.is_complex()) {
                    (Layout::ComplexShots, true) | (Layout::MagnitudeShots, false) => Ok(()),
                    (Layout::ComplexShots | Layout::MagnitudeShots, _) => Err(Error::InvalidParameter(format!(
                        "dtype {dtype:?} does not fit layout {layout:?}"
                    ))),
                    _ => Err(Error::InvalidParameter(format!(
                        "external denoiser layout must be complex-shots or magnitude-shots, got {layout:?}"
                    ))),
                }
            }
        }
    }
}

/// Affine map of one channel onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    lo: f64,
    scale: f64,
}

impl Affine {
    fn fit<'a>(values: impl Iterator<Item = &'a f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Affine { lo: 0.0, scale: 1.0 };
        }
        let span = hi - lo;
        Affine {
            lo,
            scale: if span > 0.0 { span } else { 1.0 },
        }
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.lo) / self.scale
    }

    fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.lo
    }
}

/// Per-channel normalization of a complex stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    re: Affine,
    im: Affine,
}

impl Normalization {
    pub fn fit(x: &Array3<C64>) -> Self {
        let re: Vec<f64> = x.iter().map(|z| z.re).collect();
        let im: Vec<f64> = x.iter().map(|z| z.im).collect();
        Normalization {
            re: Affine::fit(re.iter()),
            im: Affine::fit(im.iter()),
        }
    }

    pub fn forward(&self, x: &Array3<C64>) -> Array3<C64> {
        x.mapv(|z| C64::new(self.re.apply(z.re), self.im.apply(z.im)))
    }

    pub fn inverse(&self, x: &Array3<C64>) -> Array3<C64> {
        x.mapv(|z| C64::new(self.re.invert(z.re), self.im.invert(z.im)))
    }
}

/// Denoise a shot stack `(shots, n1, n2)`; the output has the same shape.
pub fn denoise_shots(x: &Array3<C64>, spec: &DenoiserSpec) -> Result<Array3<C64>> {
    spec.validate()?;
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite {
            context: "denoiser input".into(),
        });
    }
    let out = match spec {
        DenoiserSpec::Identity => {
            let norm = Normalization::fit(x);
            norm.inverse(&norm.forward(x))
        }
        DenoiserSpec::ReferenceWavelet { wavelet, levels, sigma_w } => {
            let norm = Normalization::fit(x);
            let mut u = norm.forward(x);
            let (_, n1, n2) = x.dim();
            let dwt = Dwt2::new(*wavelet, *levels, (n1, n2));
            for mut shot in u.outer_iter_mut() {
                let re: Array2<f64> = shot.mapv(|z| z.re);
                let im: Array2<f64> = shot.mapv(|z| z.im);
                let re = prox_wavelet_l1(&re, *sigma_w, &dwt, Penalized::DetailOnly);
                let im = prox_wavelet_l1(&im, *sigma_w, &dwt, Penalized::DetailOnly);
                ndarray::Zip::from(&mut shot)
                    .and(&re)
                    .and(&im)
                    .for_each(|z, &a, &b| *z = C64::new(a, b));
            }
            norm.inverse(&u)
        }
        DenoiserSpec::ExternalProcess {
            command,
            exchange_dir,
            layout,
            dtype,
        } => external(x, command, exchange_dir, *layout, *dtype)?,
    };
    if out.dim() != x.dim() {
        let (a, b, c) = x.dim();
        let (e, f, g) = out.dim();
        return Err(Error::shape("denoiser output", &[a, b, c], &[e, f, g]));
    }
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite {
            context: "denoiser output".into(),
        });
    }
    Ok(out)
}

// one in-flight exchange per directory
fn dir_lock(dir: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
    let mut map = LOCKS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry(key).or_default().clone()
}

fn external(x: &Array3<C64>, command: &[String], dir: &Path, layout: Layout, dtype: Dtype) -> Result<Array3<C64>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lock = dir_lock(dir);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    let in_path = dir.join("denoise_in.ncf");
    let out_path = dir.join("denoise_out.ncf");
    if out_path.exists() {
        std::fs::remove_file(&out_path).map_err(|e| Error::io(&out_path, e))?;
    }

    let (s, n1, n2) = x.dim();
    let dims = [1, s, 1, n1, n2];
    let norm = Normalization::fit(x);
    let xn = norm.forward(x);
    let input = match layout {
        Layout::ComplexShots => Container::complex(layout, dims, dtype, xn.iter().cloned().collect())?,
        _ => {
            let mags: Vec<f64> = x.iter().map(|z| z.norm()).collect();
            let peak = mags.iter().cloned().fold(0.0, f64::max);
            let scale = if peak > 0.0 { peak } else { 1.0 };
            Container::real(layout, dims, dtype, mags.iter().map(|m| m / scale).collect())?
                .with_extra("scale", serde_json::json!(scale))
        }
    };
    input.write(&in_path)?;

    let argv: Vec<String> = command
        .iter()
        .map(|a| {
            a.replace("{in}", &in_path.to_string_lossy())
                .replace("{out}", &out_path.to_string_lossy())
        })
        .collect();
    let output = Command::new(&argv[0])
        .args(&argv[1..])
        .output()
        .map_err(|e| Error::External(format!("failed to launch {:?}: {e}", argv[0])))?;
    if !output.status.success() {
        return Err(Error::External(format!(
            "{:?} exited with {}: {}",
            argv[0],
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }

    let result = Container::read(&out_path).map_err(|e| Error::External(format!("denoiser output: {e}")))?;
    if result.dims() != dims {
        return Err(Error::External(format!(
            "denoiser output dims {:?}, expected {dims:?}",
            result.dims()
        )));
    }
    result
        .expect_layout(layout)
        .map_err(|e| Error::External(format!("denoiser output: {e}")))?;
    match layout {
        Layout::ComplexShots => {
            let data = result.complex_data().map_err(|e| Error::External(e.to_string()))?;
            let u = Array3::from_shape_vec((s, n1, n2), data.to_vec()).expect("dims checked");
            Ok(norm.inverse(&u))
        }
        _ => {
            // magnitude networks keep the input phase
            let data = result.real_data().map_err(|e| Error::External(e.to_string()))?;
            let scale = input.header.extra["scale"].as_f64().unwrap_or(1.0);
            let mags = Array3::from_shape_vec((s, n1, n2), data.to_vec()).expect("dims checked");
            let mut u = x.clone();
            ndarray::Zip::from(&mut u).and(&mags).for_each(|z, &m| {
                *z = C64::from_polar(m * scale, z.arg());
            });
            Ok(u)
        }
    }
}

/// `m = 1/N_s sum_t |u_t|`.
pub fn combine_magnitude(u: &Array3<C64>) -> Result<Array2<f64>> {
    let n = u.dim().0;
    if n == 0 {
        return Err(Error::InvalidParameter("combine_magnitude needs at least one shot".into()));
    }
    Ok(u.map_axis(Axis(0), |v| v.iter().map(|z| z.norm()).sum::<f64>() / n as f64))
}
