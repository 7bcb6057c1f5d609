//! Engineered wind channels on the spherical grid: wind speed and relative
//! vorticity at 850 mbar and at the lowest model level.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::data::{channels, ClimateSample};
use crate::error::{invalid, Error, Result};
use crate::tensor::GridTensor;

const DEG: f64 = core::f64::consts::PI / 180.0;
const LON_SPACING_TOL_DEG: f64 = 1e-9;

/// Latitude/longitude coordinates of an H×W grid, in degrees.
///
/// Latitudes are strictly monotonic with |lat| <= 90. Longitudes ascend
/// eastward with uniform spacing modulo 360 and wrap periodically, so a
/// rolled grid is still valid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry {
    lat_deg: Vec<f64>,
    lon_deg: Vec<f64>,
}

impl GridGeometry {
    pub fn new(lat_deg: Vec<f64>, lon_deg: Vec<f64>) -> Result<Self> {
        if lat_deg.is_empty() || lon_deg.is_empty() {
            return Err(invalid("geometry needs at least one latitude and longitude"));
        }
        for &phi in &lat_deg {
            if !(phi.is_finite() && phi.abs() <= 90.0) {
                return Err(invalid(format!("latitude {phi} is outside [-90, 90]")));
            }
        }
        let ascending = lat_deg.windows(2).all(|p| p[1] > p[0]);
        let descending = lat_deg.windows(2).all(|p| p[1] < p[0]);
        if lat_deg.len() > 1 && !ascending && !descending {
            return Err(invalid("latitudes must be strictly monotonic"));
        }
        if lon_deg.len() > 1 {
            let step = wrap_east(lon_deg[1] - lon_deg[0]);
            if !(step > 0.0 && step < 180.0) {
                return Err(invalid(
                    "longitudes must ascend eastward with spacing below 180 degrees",
                ));
            }
            for k in 1..lon_deg.len() {
                let d = wrap_east(lon_deg[k] - lon_deg[k - 1]);
                if (d - step).abs() > LON_SPACING_TOL_DEG {
                    return Err(invalid(format!(
                        "longitude spacing is not uniform: step {d} vs {step}"
                    )));
                }
            }
        }
        Ok(GridGeometry { lat_deg, lon_deg })
    }

    /// Equirectangular grid: latitudes span (-90, 90) exclusive of the poles,
    /// longitudes cover the full circle starting at 0.
    pub fn equirectangular(height: usize, width: usize) -> Self {
        let lat_step = 180.0 / (height as f64 + 1.0);
        let lat = (0..height)
            .map(|i| -90.0 + lat_step * (i as f64 + 1.0))
            .collect();
        let lon_step = 360.0 / width as f64;
        let lon = (0..width).map(|j| lon_step * j as f64).collect();
        GridGeometry {
            lat_deg: lat,
            lon_deg: lon,
        }
    }

    pub fn height(&self) -> usize {
        self.lat_deg.len()
    }

    pub fn width(&self) -> usize {
        self.lon_deg.len()
    }

    pub fn lat_deg(&self) -> &[f64] {
        &self.lat_deg
    }

    pub fn lon_deg(&self) -> &[f64] {
        &self.lon_deg
    }

    pub fn lat_rad(&self, row: usize) -> f64 {
        self.lat_deg[row] * DEG
    }

    /// Uniform eastward longitude step in radians.
    pub fn lon_spacing_rad(&self) -> f64 {
        if self.lon_deg.len() < 2 {
            return 0.0;
        }
        wrap_east(self.lon_deg[1] - self.lon_deg[0]) * DEG
    }

    /// Rows lying exactly on a pole, where 1/cos(lat) is undefined.
    pub fn pole_rows(&self) -> Vec<usize> {
        self.lat_deg
            .iter()
            .enumerate()
            .filter(|(_, &phi)| phi.abs() == 90.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Longitude labels moved along with a circular column shift.
    pub fn rolled(&self, offset: usize) -> GridGeometry {
        let w = self.lon_deg.len();
        if w == 0 {
            return self.clone();
        }
        let k = offset % w;
        let lon = (0..w).map(|j| self.lon_deg[(j + w - k) % w]).collect();
        GridGeometry {
            lat_deg: self.lat_deg.clone(),
            lon_deg: lon,
        }
    }
}

/// Difference of two longitudes reduced to an eastward step in [0, 360).
fn wrap_east(d: f64) -> f64 {
    let r = d % 360.0;
    if r < 0.0 {
        r + 360.0
    } else {
        r
    }
}

/// Which model level a wind field lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindLevel {
    Mbar850,
    Bottom,
}

/// Zonal and meridional wind grids at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct WindComponents {
    pub u: GridTensor,
    pub v: GridTensor,
    pub level: WindLevel,
}

impl WindComponents {
    pub fn new(u: GridTensor, v: GridTensor, level: WindLevel) -> Result<Self> {
        u.same_shape(&v, "wind components")?;
        u.dims2("wind components")?;
        Ok(WindComponents { u, v, level })
    }
}

/// Per-pixel wind speed sqrt(u^2 + v^2), in m/s.
pub fn wind_speed(w: &WindComponents) -> Result<GridTensor> {
    let out = w
        .u
        .zip(&w.v, "wind_speed", |u, v| libm::sqrt(u * u + v * v))?;
    out.check_finite("wind_speed")?;
    Ok(out)
}

/// Relative vorticity with the rows lying on a pole masked to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct VorticityField {
    pub zeta: GridTensor,
    /// Rows where cos(lat) = 0 forced the value to 0.
    pub masked_pole_rows: Vec<usize>,
}

/// Finite-difference discretization of
/// `zeta = du/dlambda - (1/cos(phi)) * d(v cos(phi))/dphi`
/// with lambda (longitude) and phi (latitude) in radians.
///
/// The longitude derivative is a central difference with periodic wrap; the
/// latitude derivative is central on interior rows and one-sided on the
/// first and last rows. Rows exactly on a pole are masked to zero and
/// reported in the result.
pub fn relative_vorticity(w: &WindComponents, geom: &GridGeometry) -> Result<VorticityField> {
    let (h, width) = w.u.dims2("relative_vorticity")?;
    if h != geom.height() || width != geom.width() {
        return Err(invalid(format!(
            "wind grids are {h}x{width} but the geometry is {}x{}",
            geom.height(),
            geom.width()
        )));
    }
    if h < 3 || width < 3 {
        return Err(invalid(format!(
            "relative_vorticity needs a grid of at least 3x3, got {h}x{width}"
        )));
    }
    let dlon = geom.lon_spacing_rad();
    let lat: Vec<f64> = (0..h).map(|i| geom.lat_rad(i)).collect();
    let coslat: Vec<f64> = lat.iter().map(|&p| libm::cos(p)).collect();
    let pole_rows = geom.pole_rows();

    let u = w.u.data();
    let v = w.v.data();
    let mut zeta = Vec::with_capacity(h * width);
    for i in 0..h {
        if pole_rows.contains(&i) {
            for _ in 0..width {
                zeta.push(0.0);
            }
            continue;
        }
        // d(v cos phi)/dphi uses the signed latitude spacing, so ascending
        // and descending latitude axes both work.
        let (i_lo, i_hi) = if i == 0 {
            (0, 1)
        } else if i == h - 1 {
            (h - 2, h - 1)
        } else {
            (i - 1, i + 1)
        };
        let dphi = lat[i_hi] - lat[i_lo];
        let inv_cos = 1.0 / coslat[i];
        for j in 0..width {
            let je = (j + 1) % width;
            let jw = (j + width - 1) % width;
            let du_dlon = (u[i * width + je] - u[i * width + jw]) / (2.0 * dlon);
            let g_hi = v[i_hi * width + j] * coslat[i_hi];
            let g_lo = v[i_lo * width + j] * coslat[i_lo];
            let dvc_dphi = (g_hi - g_lo) / dphi;
            zeta.push(du_dlon - inv_cos * dvc_dphi);
        }
    }
    let zeta = GridTensor::from_parts([h, width].to_vec(), zeta);
    zeta.check_finite("relative_vorticity")?;
    Ok(VorticityField {
        zeta,
        masked_pole_rows: pole_rows,
    })
}

/// Appends WS850, VRT850, WSBOT and VRTBOT computed from U850/V850 and
/// UBOT/VBOT. The source channels are untouched; running this twice fails
/// on the duplicate names.
pub fn engineer_features(sample: &ClimateSample) -> Result<ClimateSample> {
    let mut out = sample.clone();
    for (uc, vc, level, ws_name, vrt_name) in [
        (
            channels::U850,
            channels::V850,
            WindLevel::Mbar850,
            channels::WS850,
            channels::VRT850,
        ),
        (
            channels::UBOT,
            channels::VBOT,
            WindLevel::Bottom,
            channels::WSBOT,
            channels::VRTBOT,
        ),
    ] {
        let u = sample
            .channel(uc)
            .ok_or_else(|| Error::MissingChannel(uc.to_string()))?;
        let v = sample
            .channel(vc)
            .ok_or_else(|| Error::MissingChannel(vc.to_string()))?;
        let wind = WindComponents::new(u.clone(), v.clone(), level)?;
        out.push_channel(ws_name, wind_speed(&wind)?)?;
        out.push_channel(vrt_name, relative_vorticity(&wind, &sample.geometry)?.zeta)?;
    }
    Ok(out)
}
