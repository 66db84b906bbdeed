//! Solar geometry on the representative day of each month.
//!
//! All angles at the public surface are in degrees; insolation is in
//! kWh·m⁻²·day⁻¹.

use std::f64::consts::PI;

/// Solar constant, W·m⁻².
pub const SOLAR_CONSTANT: f64 = 1361.0;

/// Day-of-year of the representative ("mean") day of each month.
pub const REPRESENTATIVE_DAYS: [u32; 12] = [17, 47, 75, 105, 135, 162, 198, 228, 258, 288, 318, 344];

/// Days per month of a non-leap year.
pub const DAYS_IN_MONTH: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

/// Representative day of `month` (1-12).
pub fn representative_day(month: u8) -> u32 {
    REPRESENTATIVE_DAYS[month_index(month)]
}

/// Number of days in `month` (1-12), non-leap year.
pub fn days_in_month(month: u8) -> u32 {
    DAYS_IN_MONTH[month_index(month)]
}

fn month_index(month: u8) -> usize {
    assert!((1..=12).contains(&month), "month out of range: {month}");
    usize::from(month - 1)
}

/// Solar declination in radians (Cooper's formula).
pub fn declination(day_of_year: u32) -> f64 {
    let arg = 2.0 * PI * (284.0 + f64::from(day_of_year)) / 365.0;
    (23.45_f64).to_radians() * arg.sin()
}

/// Earth-sun distance correction factor for the extraterrestrial flux.
pub fn eccentricity_factor(day_of_year: u32) -> f64 {
    1.0 + 0.033 * (2.0 * PI * f64::from(day_of_year) / 365.0).cos()
}

/// Sunset hour angle in radians for latitude `lat_rad` and declination `decl`.
///
/// Returns 0 during polar night and π during midnight sun.
pub fn sunset_hour_angle(lat_rad: f64, decl: f64) -> f64 {
    let c = -lat_rad.tan() * decl.tan();
    if c >= 1.0 {
        0.0
    } else if c <= -1.0 {
        PI
    } else {
        c.acos()
    }
}

/// Day length in hours on the representative day of `month`.
pub fn daylight_hours(lat: f64, month: u8) -> f64 {
    let decl = declination(representative_day(month));
    let ws = sunset_hour_angle(lat.to_radians(), decl);
    24.0 * ws / PI
}

/// Daily extraterrestrial insolation on a horizontal surface, kWh·m⁻²·day⁻¹,
/// evaluated on the representative day of `month`.
pub fn extraterrestrial_insolation(lat: f64, month: u8) -> f64 {
    let n = representative_day(month);
    let phi = lat.to_radians();
    let decl = declination(n);
    let ws = sunset_hour_angle(phi, decl);
    if ws == 0.0 {
        return 0.0;
    }
    // 24 h · G_sc / π, W·h·m⁻² per unit of the bracketed geometry term.
    let scale = 24.0 * SOLAR_CONSTANT / PI / 1000.0;
    let geometry = phi.cos() * decl.cos() * ws.sin() + ws * phi.sin() * decl.sin();
    (scale * eccentricity_factor(n) * geometry).max(0.0)
}
