//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ndarray::{stack, Array2, Array3, Axis};
use neatr_core::container::{Container, Dtype, Layout, Payload};
use neatr_core::dataset::{Dataset, Manifest, Protocol};
use neatr_core::error::Error;
use neatr_core::mussels::shot_magnitude;
use neatr_core::pipeline::{DirRun, Stage};
use neatr_core::quantify::{color_fa, fit_dti, fit_sage, otsu_mask, rmse_percent, rsos_error, tensor_scalars};
use neatr_core::simulate::simulate_dataset;
use neatr_core::tensor::{wrap_angle, C64};
use serde_json::json;

use crate::render::{auto_window, parse_window, to_gray, to_rgb};
use crate::settings::{load, ConfigError, Global};
use crate::{parse_stage, FitModel};

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ProtocolArg {
    Sage,
    Dwi,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Sage => Protocol::Sage,
            ProtocolArg::Dwi => Protocol::Dwi,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// dataset directory to create
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// per-slice readout size
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    mb: Option<usize>,
    #[arg(long)]
    r_inplane: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    coils: Option<usize>,
    /// k-space noise std per real/imaginary channel
    #[arg(long)]
    noise: Option<f64>,
    /// keep only the first frames
    #[arg(long)]
    frames: Option<usize>,
}

pub fn simulate(global: &Global, a: SimulateArgs) -> Result<()> {
    let mut cfg = load(global.config.as_deref())?.simulation.unwrap_or_default();
    if let Some(p) = a.protocol {
        cfg.protocol = p.into();
    }
    macro_rules! set {
        ($($field:ident = $arg:expr),*) => { $(if let Some(v) = $arg { cfg.$field = v; })* };
    }
    set!(n1 = a.n1, n2 = a.n2, mb = a.mb, r_inplane = a.r_inplane, n_shots = a.shots, noise_std = a.noise, seed = global.seed);
    if let Some(c) = a.coils {
        cfg.coils.n_coils = c;
    }
    if a.frames.is_some() {
        cfg.max_frames = a.frames;
    }
    let ds = simulate_dataset(&cfg)?;
    ds.write(&a.out)?;
    let g = &ds.manifest.geometry;
    println!(
        "wrote {}: {:?}, {} frames, {} shots, {} coils, {}x{} per slice, R={} MB={}",
        a.out.display(),
        ds.manifest.protocol,
        ds.manifest.n_frames,
        g.n_shots(),
        ds.manifest.n_coils,
        g.n1,
        g.n2,
        g.r_inplane,
        g.mb
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    /// dataset directory written by `simulate`
    #[arg(long)]
    dataset: PathBuf,
    /// output directory for intermediates, final images and metrics
    #[arg(long)]
    out: PathBuf,
    /// resume: reload earlier stages from `--out`
    #[arg(long, default_value = "mussels", value_parser = parse_stage)]
    from: Stage,
    /// phase cycling and JVC start from the multishot images directly
    #[arg(long)]
    skip_denoise: bool,
    #[arg(long)]
    stop_after_mussels: bool,
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Container {
            path,
            reason: format!("manifest: {e}"),
        }
        .into()
    })
}

pub fn recon(global: &Global, a: ReconArgs) -> Result<()> {
    let manifest = read_manifest(&a.dataset)?;
    let mut cfg = load(global.config.as_deref())?.pipeline(manifest.protocol)?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.stages.skip_denoise |= a.skip_denoise;
    cfg.stages.stop_after_mussels |= a.stop_after_mussels;
    cfg.mussels.verbose |= global.verbose;
    if global.verbose {
        eprintln!("config hash {}", cfg.hash());
    }
    let run = DirRun {
        dataset: a.dataset,
        out_dir: a.out.clone(),
        from: a.from,
    }
    .run(&cfg)?;
    let m = &run.metrics;
    let stages: Vec<String> = m
        .stages
        .iter()
        .map(|s| serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        .collect();
    println!("stages {} -> {}", stages.join(" "), a.out.display());
    if let Some(r) = &m.rmse_percent {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}%")).unwrap_or_else(|| "-".into());
        println!("rmse mussels {:.2}% denoised {} final {}", r.mussels, opt(r.denoised), opt(r.final_));
    }
    Ok(())
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    /// ground-truth support when the dataset has one, Otsu otherwise
    Auto,
    Truth,
    Otsu,
    All,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// reconstructed images, e.g. `<recon>/final.ncf`
    #[arg(long)]
    input: PathBuf,
    /// dataset the images came from (echo times, b-table, truth)
    #[arg(long)]
    dataset: PathBuf,
    /// directory for parameter maps and the fit summary
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    mask: MaskSource,
}

/// Magnitude image of every frame of a container.
fn frame_magnitudes(c: &Container) -> Result<Vec<Array2<f64>>> {
    (0..c.dims()[0])
        .map(|f| {
            Ok(match c.payload {
                Payload::Real(_) => {
                    let s = c.real_stack(f)?;
                    if s.dim().0 == 1 {
                        s.index_axis(Axis(0), 0).to_owned()
                    } else {
                        s.mean_axis(Axis(0)).expect("non-empty")
                    }
                }
                Payload::Complex(_) => shot_magnitude(&c.shot_stack(f)?),
            })
        })
        .collect()
}

fn stacked(maps: &[Array2<f64>]) -> Array3<f64> {
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    stack(Axis(0), &views).expect("equal grids")
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn masked(values: &Array2<f64>, mask: &Array2<bool>) -> Vec<f64> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
}

fn median_rel_error(est: &Array2<f64>, truth: &Array2<f64>, mask: &Array2<bool>) -> Option<f64> {
    let errs = ndarray::Zip::from(est)
        .and(truth)
        .and(mask)
        .fold(Vec::new(), |mut v, &e, &t, &m| {
            if m && t != 0.0 {
                v.push(100.0 * ((e - t) / t).abs());
            }
            v
        });
    median(errs)
}

fn write_params(path: &Path, names: &[&str], maps: &[Array2<f64>]) -> Result<()> {
    Container::from_real_frames(Layout::Parameter, Dtype::F64, &[stacked(maps)])?
        .with_extra("names", json!(names))
        .write(path)?;
    Ok(())
}

pub fn fit(global: &Global, model: FitModel, a: FitArgs) -> Result<()> {
    let ds = Dataset::read(&a.dataset)?;
    let images = frame_magnitudes(&Container::read(&a.input)?)?;
    if images.len() != ds.manifest.n_frames {
        bail!(Error::Format(format!(
            "{} has {} frames, dataset has {}",
            a.input.display(),
            images.len(),
            ds.manifest.n_frames
        )));
    }
    let (mask, mask_name) = match (a.mask, &ds.truth) {
        (MaskSource::Auto | MaskSource::Truth, Some(t)) => (t.support.clone(), "truth"),
        (MaskSource::Truth, None) => bail!(ConfigError("dataset has no ground-truth support".into())),
        (MaskSource::All, _) => (Array2::from_elem(images[0].dim(), true), "all"),
        _ => (otsu_mask(&images[0]), "otsu"),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let bool_map = |m: &Array2<bool>| m.mapv(|v| if v { 1.0 } else { 0.0 });
    let mut summary = json!({
        "mask": mask_name,
        "voxels": mask.iter().filter(|&&m| m).count(),
    });
    match model {
        FitModel::Sage => {
            if ds.manifest.protocol != Protocol::Sage {
                bail!(ConfigError("fit sage needs a SAGE dataset".into()));
            }
            let te_se = ds.manifest.te_se.context("dataset lacks TE_SE")?;
            let fit = fit_sage(&images, &ds.manifest.tes, te_se, &mask)?;
            let valid = &fit.valid;
            write_params(
                &a.out.join("sage_params.ncf"),
                &["t2", "t2s", "s0_i", "s0_ii", "valid"],
                &[fit.t2.clone(), fit.t2s.clone(), fit.s0_i.clone(), fit.s0_ii.clone(), bool_map(valid)],
            )?;
            summary["model"] = json!("sage");
            summary["valid"] = json!(valid.iter().filter(|&&v| v).count());
            summary["median_t2_ms"] = json!(median(masked(&fit.t2, valid)));
            summary["median_t2s_ms"] = json!(median(masked(&fit.t2s, valid)));
            if let Some(t) = &ds.truth {
                if let (Some(t2), Some(t2s)) = (t.param("t2"), t.param("t2s")) {
                    let fitted = &mask & valid;
                    summary["t2_rmse_percent"] = json!(rmse_percent(&fit.t2, t2, &fitted)?);
                    summary["t2s_rmse_percent"] = json!(rmse_percent(&fit.t2s, t2s, &fitted)?);
                    summary["t2_median_error_percent"] = json!(median_rel_error(&fit.t2, t2, &fitted));
                    summary["t2s_median_error_percent"] = json!(median_rel_error(&fit.t2s, t2s, &fitted));
                }
            }
        }
        FitModel::Dti => {
            if ds.manifest.protocol != Protocol::Dwi {
                bail!(ConfigError("fit dti needs a DWI dataset".into()));
            }
            let fit = fit_dti(&images, &ds.manifest.bvals, &ds.manifest.bvecs, &mask)?;
            let comp = |k: usize| fit.tensor.index_axis(Axis(2), k).to_owned();
            let mut maps = vec![fit.s0.clone(), fit.fa.clone(), fit.md.clone()];
            maps.extend((0..6).map(comp));
            maps.push(bool_map(&fit.valid));
            write_params(
                &a.out.join("dti_params.ncf"),
                &["s0", "fa", "md", "dxx", "dyy", "dzz", "dxy", "dxz", "dyz", "valid"],
                &maps,
            )?;
            let rgb = color_fa(&fit);
            let channels: Vec<Array2<f64>> = (0..3).map(|c| rgb.index_axis(Axis(2), c).to_owned()).collect();
            write_params(&a.out.join("color_fa.ncf"), &["r", "g", "b"], &channels)?;
            summary["model"] = json!("dti");
            summary["valid"] = json!(fit.valid.iter().filter(|&&v| v).count());
            summary["median_fa"] = json!(median(masked(&fit.fa, &fit.valid)));
            summary["median_md"] = json!(median(masked(&fit.md, &fit.valid)));
            if let Some(t) = &ds.truth {
                let names = ["dxx", "dyy", "dzz", "dxy", "dxz", "dyz"];
                let comps: Option<Vec<&Array2<f64>>> = names.iter().map(|n| t.param(n)).collect();
                if let Some(c) = comps {
                    let fa = Array2::from_shape_fn(fit.fa.dim(), |idx| {
                        tensor_scalars(&std::array::from_fn(|k| c[k][idx])).0
                    });
                    let fitted = &mask & &fit.valid;
                    summary["fa_rmse_percent"] = json!(rmse_percent(&fit.fa, &fa, &fitted)?);
                    summary["fa_median_error_percent"] = json!(median_rel_error(&fit.fa, &fa, &fitted));
                }
            }
        }
    }
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    fs::write(a.out.join("fit.json"), &text).with_context(|| format!("writing {}", a.out.display()))?;
    if global.verbose {
        eprint!("{text}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// container under test
    recon: PathBuf,
    /// reference container with the same dims
    reference: PathBuf,
    /// real image whose voxels above 0.5 are compared (all voxels otherwise)
    #[arg(long)]
    mask: Option<PathBuf>,
    /// also write the root-sum-of-squares error map over all images
    #[arg(long)]
    rsos: Option<PathBuf>,
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let x = Container::read(&a.recon)?;
    let r = Container::read(&a.reference)?;
    if x.dims() != r.dims() {
        bail!(Error::Format(format!("dims differ: {:?} vs {:?}", x.dims(), r.dims())));
    }
    let [_, _, _, n1, n2] = x.dims();
    let mask = match &a.mask {
        Some(p) => {
            let m = Container::read(p)?.real_image(0)?;
            if m.dim() != (n1, n2) {
                bail!(Error::Format(format!("mask grid {:?} differs from {:?}", m.dim(), (n1, n2))));
            }
            m.mapv(|v| v > 0.5)
        }
        None => Array2::from_elem((n1, n2), true),
    };
    // per-element |x - r| and |r|
    let (err, refm): (Vec<f64>, Vec<f64>) = match (&x.payload, &r.payload) {
        (Payload::Complex(a), Payload::Complex(b)) => a.iter().zip(b).map(|(p, q): (&C64, &C64)| ((p - q).norm(), q.norm())).unzip(),
        (Payload::Real(a), Payload::Real(b)) => a.iter().zip(b).map(|(p, q)| ((p - q).abs(), q.abs())).unzip(),
        _ => bail!(Error::Format("cannot compare a complex container with a real one".into())),
    };
    let plane = n1 * n2;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (e, q)) in err.iter().zip(&refm).enumerate() {
        let k = i % plane;
        if mask[[k / n2, k % n2]] {
            num += e * e;
            den += q * q;
        }
    }
    if mask.iter().all(|&m| !m) {
        bail!(ConfigError("mask selects no voxels".into()));
    }
    if den == 0.0 {
        bail!(Error::Numerical("reference is zero on the mask".into()));
    }
    let rmse = 100.0 * (num / den).sqrt();
    if let Some(out) = &a.rsos {
        let images: Vec<Array2<f64>> = err
            .chunks_exact(plane)
            .map(|c| Array2::from_shape_vec((n1, n2), c.to_vec()).expect("plane"))
            .collect();
        Container::from_images(Layout::Magnitude, Dtype::F64, &[rsos_error(&images)?])?.write(out)?;
    }
    println!(
        "{}",
        json!({
            "rmse_percent": rmse,
            "mask_voxels": mask.iter().filter(|&&m| m).count(),
            "images": err.len() / plane,
        })
    );
    Ok(())
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Magnitude,
    Phase,
    /// `|input - reference|`
    Error,
    /// three channels of one frame as RGB, e.g. `color_fa.ncf`
    Rgb,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "magnitude")]
    mode: RenderMode,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 0)]
    shot: usize,
    #[arg(long, default_value_t = 0)]
    coil: usize,
    /// required by `--mode error`
    #[arg(long)]
    reference: Option<PathBuf>,
    /// display range `LO,HI`
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    window: Option<(f64, f64)>,
}

enum Plane {
    Real(Array2<f64>),
    Complex(Array2<C64>),
}

fn pick(c: &Container, frame: usize, shot: usize, coil: usize) -> Result<Plane> {
    let [f, s, k, _, _] = c.dims();
    if frame >= f || shot >= s || coil >= k {
        bail!(Error::Format(format!("index ({frame}, {shot}, {coil}) out of range for dims {:?}", c.dims())));
    }
    Ok(match c.payload {
        Payload::Real(_) => Plane::Real(c.real_frame(frame)?.slice(ndarray::s![shot, coil, .., ..]).to_owned()),
        Payload::Complex(_) => Plane::Complex(c.complex_frame(frame)?.slice(ndarray::s![shot, coil, .., ..]).to_owned()),
    })
}

pub fn export_png(a: ExportArgs) -> Result<()> {
    let c = Container::read(&a.input)?;
    let [_, _, _, n1, n2] = c.dims();
    let (pixels, color) = match a.mode {
        RenderMode::Rgb => {
            if c.dims()[1] != 3 {
                bail!(Error::Format(format!("rgb needs 3 channels per frame, found {}", c.dims()[1])));
            }
            let ch: Vec<Array2<f64>> = (0..3)
                .map(|s| match pick(&c, a.frame, s, 0)? {
                    Plane::Real(p) => Ok(p),
                    Plane::Complex(p) => Ok(p.mapv(|z| z.norm())),
                })
                .collect::<Result<_>>()?;
            let rgb = Array3::from_shape_fn((n1, n2, 3), |(i, j, k)| ch[k][[i, j]]);
            (to_rgb(&rgb), image::ColorType::Rgb8)
        }
        mode => {
            let plane = pick(&c, a.frame, a.shot, a.coil)?;
            let (img, default) = match mode {
                RenderMode::Phase => {
                    let p = match plane {
                        Plane::Real(p) => p.mapv(wrap_angle),
                        Plane::Complex(p) => p.mapv(|z| z.arg()),
                    };
                    (p, (-std::f64::consts::PI, std::f64::consts::PI))
                }
                RenderMode::Error => {
                    let path = a.reference.as_ref().ok_or_else(|| ConfigError("--mode error needs --reference".into()))?;
                    let r = Container::read(path)?;
                    if r.dims()[3..] != c.dims()[3..] {
                        bail!(Error::Format(format!("reference grid {:?} differs", &r.dims()[3..])));
                    }
                    let e = match (plane, pick(&r, a.frame, a.shot, a.coil)?) {
                        (Plane::Real(p), Plane::Real(q)) => (&p - &q).mapv(f64::abs),
                        (Plane::Complex(p), Plane::Complex(q)) => (&p - &q).mapv(|z| z.norm()),
                        (Plane::Complex(p), Plane::Real(q)) => p.mapv(|z| z.norm()) - &q,
                        (Plane::Real(p), Plane::Complex(q)) => &p - &q.mapv(|z| z.norm()),
                    }
                    .mapv(f64::abs);
                    let w = auto_window(&e);
                    (e, w)
                }
                _ => {
                    let m = match plane {
                        Plane::Real(p) => p,
                        Plane::Complex(p) => p.mapv(|z| z.norm()),
                    };
                    let w = auto_window(&m);
                    (m, w)
                }
            };
            let (lo, hi) = a.window.unwrap_or(default);
            (to_gray(&img, lo, hi), image::ColorType::L8)
        }
    };
    image::save_buffer(&a.out, &pixels, n2 as u32, n1 as u32, color)
        .map_err(|e| Error::Format(format!("writing {}: {e}", a.out.display())))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
