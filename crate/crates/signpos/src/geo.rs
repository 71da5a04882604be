//! Local Mercator conversion between geodetic (lat, lon) and planar metric
//! coordinates.
//!
//! ```text
//! x = cos(pi lat0 / 180) * R * pi lon / 180
//! y = cos(pi lat0 / 180) * R * log(tan(pi (90 + lat) / 360))
//! ```
//!
//! with a spherical Earth radius of 6378137 m. The inverse is analytic:
//! `lat = (360/pi) atan(exp(y / (cos(pi lat0 / 180) R))) - 90`.

use nalgebra::{Vector2, Vector3};
use std::f64::consts::PI;
use thiserror::Error;

/// Spherical Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

#[derive(Debug, Clone, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    InvalidLatitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    InvalidLongitude(f64),
    #[error("reference latitude {0} outside (-85, 85)")]
    InvalidReference(f64),
}

/// A geodetic fix. Altitude is carried through unused by the projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
    alt: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::InvalidLatitude(lat));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::InvalidLongitude(lon));
        }
        Ok(Self { lat, lon, alt })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn alt(&self) -> f64 {
        self.alt
    }

    pub fn with_alt(&self, alt: f64) -> Self {
        Self { alt, ..*self }
    }
}

/// One GPS fix of a journey, keyed by the frame it was captured with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsFix {
    pub frame_id: i64,
    pub geo: GeoPoint,
}

/// Reference latitude anchoring the local Mercator plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MercatorRef {
    lat0: f64,
}

impl MercatorRef {
    pub fn new(lat0: f64) -> Result<Self, GeoError> {
        if !lat0.is_finite() || lat0.abs() >= 85.0 {
            return Err(GeoError::InvalidReference(lat0));
        }
        Ok(Self { lat0 })
    }

    pub fn lat0(&self) -> f64 {
        self.lat0
    }

    fn scale(&self) -> f64 {
        (PI * self.lat0 / 180.0).cos() * EARTH_RADIUS_M
    }
}

/// Converts a geodetic point to planar metric coordinates.
pub fn to_mercator(g: &GeoPoint, r: &MercatorRef) -> Vector2<f64> {
    let s = r.scale();
    Vector2::new(
        s * PI * g.lon / 180.0,
        s * (PI * (90.0 + g.lat) / 360.0).tan().ln(),
    )
}

/// Planar conversion with the altitude appended as z.
pub fn to_mercator_3d(g: &GeoPoint, r: &MercatorRef) -> Vector3<f64> {
    let xy = to_mercator(g, r);
    Vector3::new(xy.x, xy.y, g.alt)
}

/// Analytic inverse of [`to_mercator`]. Altitude is set to zero.
pub fn from_mercator(p: Vector2<f64>, r: &MercatorRef) -> GeoPoint {
    let s = r.scale();
    let lat = (360.0 / PI) * (p.y / s).exp().atan() - 90.0;
    let lon = 180.0 * p.x / (PI * s);
    // The analytic inverse keeps lat strictly inside (-90, 90); clamp the
    // rounding tails so the GeoPoint invariant always holds.
    GeoPoint {
        lat: lat.clamp(-90.0, 90.0),
        lon: lon.clamp(-180.0, 180.0),
        alt: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn origin_maps_to_origin() {
        let r = MercatorRef::new(0.0).unwrap();
        let p = to_mercator(&GeoPoint::new(0.0, 0.0, 0.0).unwrap(), &r);
        assert_eq!(p.x, 0.0);
        assert!(p.y.abs() < 1e-6); // log tan(pi/4) in f64
        let g = from_mercator(Vector2::new(0.0, 0.0), &r);
        assert_eq!((g.lat(), g.lon()), (0.0, 0.0));
    }

    #[test]
    fn one_degree_of_longitude_at_equator() {
        let r = MercatorRef::new(0.0).unwrap();
        let p = to_mercator(&GeoPoint::new(0.0, 1.0, 0.0).unwrap(), &r);
        // 6378137 * pi / 180, evaluated independently.
        assert_relative_eq!(p.x, 111319.49079327357, epsilon = 1e-6);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        // lat = 49.0001, lon = 8.43, lat0 = 49; both formulas evaluated by
        // hand at high precision before the build.
        let r = MercatorRef::new(49.0).unwrap();
        let p = to_mercator(&GeoPoint::new(49.0001, 8.43, 112.0).unwrap(), &r);
        assert_relative_eq!(p.x, 615661.08382657, epsilon = 1e-6);
        assert_relative_eq!(p.y, 4116690.60516223, epsilon = 1e-6);
    }

    #[test]
    fn inverse_matches_analytic_oracle() {
        // y = R log tan(135 pi / 360) corresponds to lat = 45 exactly under
        // the analytic inverse.
        let r = MercatorRef::new(0.0).unwrap();
        let y = EARTH_RADIUS_M * (PI * 135.0 / 360.0).tan().ln();
        let g = from_mercator(Vector2::new(0.0, y), &r);
        assert_relative_eq!(g.lat(), 45.0, epsilon = 1e-9);
    }

    #[test]
    fn inverse_stays_within_latitude_bounds_near_pole() {
        let r = MercatorRef::new(0.0).unwrap();
        // An extreme northing lands just under the pole, never outside it.
        let g = from_mercator(Vector2::new(0.0, 40.0 * EARTH_RADIUS_M), &r);
        assert!(g.lat() > 89.9 && g.lat() <= 90.0);
    }

    #[test]
    fn reference_latitude_guard() {
        assert!(MercatorRef::new(85.0).is_err());
        assert!(MercatorRef::new(-90.0).is_err());
        assert!(MercatorRef::new(84.9).is_ok());
    }

    #[test]
    fn geo_point_range_guards() {
        assert!(GeoPoint::new(90.5, 0.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5, 0.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn x_is_linear_in_longitude() {
        let r = MercatorRef::new(49.0).unwrap();
        let at = |lon: f64| to_mercator(&GeoPoint::new(10.0, lon, 0.0).unwrap(), &r).x;
        let slope = at(1.0) - at(0.0);
        for lon in [-120.0, -3.5, 17.25, 100.0] {
            assert_relative_eq!(at(lon), slope * lon, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_identity(
            lat in -84.0f64..84.0,
            lon in -179.0f64..179.0,
            lat0 in -80.0f64..80.0,
        ) {
            let r = MercatorRef::new(lat0).unwrap();
            let g = GeoPoint::new(lat, lon, 0.0).unwrap();
            let back = from_mercator(to_mercator(&g, &r), &r);
            prop_assert!((back.lat() - lat).abs() < 1e-9);
            prop_assert!((back.lon() - lon).abs() < 1e-9);
            let metric_again = to_mercator(&back, &r);
            let metric = to_mercator(&g, &r);
            prop_assert!((metric_again.x - metric.x).abs() < 1e-6);
            prop_assert!((metric_again.y - metric.y).abs() < 1e-6);
        }

        #[test]
        fn y_strictly_increasing_in_latitude(
            lat in -84.0f64..83.0,
            step in 1e-6f64..1.0,
        ) {
            let r = MercatorRef::new(0.0).unwrap();
            let y0 = to_mercator(&GeoPoint::new(lat, 0.0, 0.0).unwrap(), &r).y;
            let y1 = to_mercator(&GeoPoint::new(lat + step, 0.0, 0.0).unwrap(), &r).y;
            prop_assert!(y1 > y0);
        }
    }
}
