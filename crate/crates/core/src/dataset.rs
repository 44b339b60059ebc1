//! A multi-frame acquisition plus optional ground truth, and its on-disk
//! directory form.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/kspace.ncf            [frames, shots, coils, n1_ext, n2] c128
//! <dir>/coil_maps.ncf         [1, 1, coils, n1_ext, n2] c128
//! <dir>/truth_magnitude.ncf   [frames, 1, 1, n1_ext, n2] f64   (optional)
//! <dir>/truth_phase.ncf       [frames, shots, 1, n1_ext, n2] f64
//! <dir>/truth_support.ncf     [1, 1, 1, n1_ext, n2] f64, 0/1
//! <dir>/truth_params.ncf      [1, P, 1, n1_ext, n2] f64, names in header
//! ```
//!
//! Sampling masks are not stored; they follow from the geometry.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Dtype, GeometryInfo, Layout, Provenance};
use crate::encoding::{make_mask, CoilMaps, KSpaceShotSet, SamplingMask};
use crate::error::{Error, Result};
use crate::tensor::C64;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Sage,
    Dwi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    /// per-slice readout size
    pub n1: usize,
    pub n2: usize,
    pub mb: usize,
    pub r_inplane: usize,
    /// ky shift of each shot
    pub delta_ky: Vec<usize>,
}

impl AcquisitionGeometry {
    pub fn n1_ext(&self) -> usize {
        self.n1 * self.mb
    }

    pub fn n_shots(&self) -> usize {
        self.delta_ky.len()
    }

    pub fn masks(&self) -> Result<Vec<SamplingMask>> {
        self.delta_ky
            .iter()
            .enumerate()
            .map(|(t, &d)| make_mask(t, self.n1_ext(), self.n2, self.r_inplane, self.mb, d))
            .collect()
    }

    /// Evenly interleaved shifts `t * R / N_s`.
    pub fn interleaved(n1: usize, n2: usize, mb: usize, r_inplane: usize, n_shots: usize) -> Self {
        AcquisitionGeometry {
            n1,
            n2,
            mb,
            r_inplane,
            delta_ky: (0..n_shots).map(|t| t * r_inplane / n_shots.max(1)).collect(),
        }
    }

    fn info(&self) -> GeometryInfo {
        GeometryInfo {
            mb: self.mb,
            r_inplane: self.r_inplane,
            delta_ky: self.delta_ky.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub geometry: AcquisitionGeometry,
    pub n_frames: usize,
    pub n_coils: usize,
    /// echo times for SAGE, ms
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub te_se: Option<f64>,
    /// b-values and directions for DWI, one per frame
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bvals: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bvecs: Vec<[f64; 3]>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    pub has_truth: bool,
    /// names of the `truth_params` channels
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truth_params: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Truth {
    /// per frame, extended grid
    pub magnitude: Vec<Array2<f64>>,
    /// per frame, `(shots, n1_ext, n2)`
    pub phases: Vec<Array3<f64>>,
    pub support: Array2<bool>,
    /// named parameter maps on the extended grid
    pub params: Vec<(String, Array2<f64>)>,
}

impl Truth {
    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub coils: CoilMaps,
    pub frames: Vec<KSpaceShotSet>,
    pub truth: Option<Truth>,
}

fn real_frames_of(images: &[Array2<f64>]) -> Vec<Array3<f64>> {
    images.iter().map(|m| m.clone().insert_axis(Axis(0))).collect()
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let g = &self.manifest.geometry;
        let grid = (g.n1_ext(), g.n2);
        if self.coils.grid() != grid {
            return Err(Error::shape("dataset coil grid", &[grid.0, grid.1], &[self.coils.grid().0, self.coils.grid().1]));
        }
        if self.frames.len() != self.manifest.n_frames {
            return Err(Error::shape("dataset frames", &[self.manifest.n_frames], &[self.frames.len()]));
        }
        for f in &self.frames {
            if f.grid() != grid || f.n_shots() != g.n_shots() || f.n_coils() != self.coils.n_coils() {
                return Err(Error::shape(
                    "dataset frame",
                    &[g.n_shots(), self.coils.n_coils(), grid.0, grid.1],
                    &[f.n_shots(), f.n_coils(), f.grid().0, f.grid().1],
                ));
            }
        }
        match self.manifest.protocol {
            Protocol::Sage => {
                if self.manifest.tes.len() != self.manifest.n_frames || self.manifest.te_se.is_none() {
                    return Err(Error::InvalidParameter("SAGE dataset needs one TE per frame and TE_SE".into()));
                }
            }
            Protocol::Dwi => {
                if self.manifest.bvals.len() != self.manifest.n_frames || self.manifest.bvecs.len() != self.manifest.n_frames {
                    return Err(Error::InvalidParameter("DWI dataset needs one b-value and direction per frame".into()));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = &self.manifest.geometry;
        let (n1e, n2) = (g.n1_ext(), g.n2);
        let prov = Provenance {
            seed: self.manifest.seed,
            config_hash: None,
        };

        let mut k = Vec::new();
        for f in &self.frames {
            k.extend(f.data().iter().cloned());
        }
        let dims = [self.frames.len(), g.n_shots(), self.coils.n_coils(), n1e, n2];
        Container::complex(Layout::Kspace, dims, Dtype::C128, k)?
            .with_geometry(g.info())
            .with_provenance(prov.clone())
            .write(dir.join("kspace.ncf"))?;
        Container::complex(
            Layout::CoilMaps,
            [1, 1, self.coils.n_coils(), n1e, n2],
            Dtype::C128,
            self.coils.maps().iter().cloned().collect(),
        )?
        .write(dir.join("coil_maps.ncf"))?;

        if let Some(t) = &self.truth {
            Container::from_real_frames(Layout::Magnitude, Dtype::F64, &real_frames_of(&t.magnitude))?
                .with_provenance(prov.clone())
                .write(dir.join("truth_magnitude.ncf"))?;
            Container::from_real_frames(Layout::Phase, Dtype::F64, &t.phases)?
                .with_provenance(prov.clone())
                .write(dir.join("truth_phase.ncf"))?;
            Container::from_images(Layout::Support, Dtype::F64, &[t.support.mapv(|s| if s { 1.0 } else { 0.0 })])?
                .write(dir.join("truth_support.ncf"))?;
            if !t.params.is_empty() {
                let maps: Vec<Array2<f64>> = t.params.iter().map(|(_, a)| a.clone()).collect();
                let views: Vec<_> = maps.iter().map(|a| a.view()).collect();
                let stacked = ndarray::stack(Axis(0), &views).expect("equal grids");
                Container::from_real_frames(Layout::Parameter, Dtype::F64, &[stacked])?
                    .write(dir.join("truth_params.ncf"))?;
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.has_truth = self.truth.is_some();
        manifest.truth_params = self
            .truth
            .as_ref()
            .map(|t| t.params.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default();
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Container {
            path: path.clone(),
            reason: format!("manifest: {e}"),
        })?;
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.schema_version)));
        }
        let g = &manifest.geometry;
        let (n1e, n2) = (g.n1_ext(), g.n2);
        let masks = g.masks()?;

        let maps = Container::read(dir.join("coil_maps.ncf"))?;
        maps.expect_layout(Layout::CoilMaps)?;
        let m = maps.complex_frame(0)?;
        let (_, nc, a, b) = m.dim();
        if (a, b) != (n1e, n2) || nc != manifest.n_coils {
            return Err(Error::shape("coil_maps.ncf", &[manifest.n_coils, n1e, n2], &[nc, a, b]));
        }
        let coils = CoilMaps::new(m.index_axis(Axis(0), 0).to_owned())?;

        let k = Container::read(dir.join("kspace.ncf"))?;
        k.expect_layout(Layout::Kspace)?;
        let expect = [manifest.n_frames, g.n_shots(), manifest.n_coils, n1e, n2];
        if k.dims() != expect {
            return Err(Error::shape("kspace.ncf", &expect, &k.dims()));
        }
        let mut frames = Vec::with_capacity(manifest.n_frames);
        for f in 0..manifest.n_frames {
            let data: Array4<C64> = k.complex_frame(f)?;
            frames.push(KSpaceShotSet::new(data, masks.clone())?);
        }

        let truth = if manifest.has_truth {
            let mag = Container::read(dir.join("truth_magnitude.ncf"))?;
            let ph = Container::read(dir.join("truth_phase.ncf"))?;
            let sup = Container::read(dir.join("truth_support.ncf"))?;
            let magnitude = (0..manifest.n_frames).map(|f| mag.real_image(f)).collect::<Result<Vec<_>>>()?;
            let phases = (0..manifest.n_frames).map(|f| ph.real_stack(f)).collect::<Result<Vec<_>>>()?;
            let support = sup.real_image(0)?.mapv(|v| v > 0.5);
            let params = if manifest.truth_params.is_empty() {
                Vec::new()
            } else {
                let p = Container::read(dir.join("truth_params.ncf"))?.real_stack(0)?;
                manifest
                    .truth_params
                    .iter()
                    .cloned()
                    .zip(p.outer_iter().map(|a| a.to_owned()))
                    .collect()
            };
            Some(Truth {
                magnitude,
                phases,
                support,
                params,
            })
        } else {
            None
        };
        let ds = Dataset {
            manifest,
            coils,
            frames,
            truth,
        };
        ds.validate()?;
        Ok(ds)
    }
}
