#pragma once

// Solar geometry and clear-sky shortwave radiation (R_so) at a site.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "gppcast/calendar.hpp"
#include "gppcast/errors.hpp"

namespace gppcast::solar {

inline constexpr double kSolarConstant = 1361.0;  // W m^-2
inline constexpr double kMaxElevation = 9000.0;   // m

struct GeoLocation {
  double latitude = 0.0;   // degrees north
  double longitude = 0.0;  // degrees east
  double elevation = 0.0;  // metres

  void validate() const {
    if (!(latitude >= -90.0 && latitude <= 90.0)) throw ConfigError("latitude must lie in [-90, 90]");
    if (!(longitude >= -180.0 && longitude <= 180.0)) throw ConfigError("longitude must lie in [-180, 180]");
    if (!(elevation >= -430.0 && elevation <= kMaxElevation)) {
      throw ConfigError("elevation must lie in [-430, 9000] m");
    }
  }
};

struct SolarState {
  double zenith = 0.0;       // degrees, geometric (no refraction)
  double declination = 0.0;  // degrees
  double hour_angle = 0.0;   // degrees in [-180, 180), 0 at solar noon
  double earth_sun_distance_factor = 1.0;  // (mean distance / distance)^2
};

using UtcTime = std::chrono::sys_seconds;

inline UtcTime utc_time(const Date& d, int hour = 0, int minute = 0, int second = 0) {
  return std::chrono::sys_days{d} + std::chrono::hours{hour} + std::chrono::minutes{minute} +
         std::chrono::seconds{second};
}

namespace detail {
inline double rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double deg(double rad) { return rad * 180.0 / std::numbers::pi; }
}  // namespace detail

// NOAA solar calculator ephemeris (Meeus low-precision series).
inline SolarState solar_position(const GeoLocation& loc, UtcTime t) {
  using detail::deg;
  using detail::rad;
  loc.validate();
  const Date day{std::chrono::floor<std::chrono::days>(t)};
  if (year_of(day) < 1950 || year_of(day) > 2050) {
    throw DataError("solar position supported for 1950-2050 only, got " + format_date(day));
  }
  const double unix_seconds = static_cast<double>(t.time_since_epoch().count());
  const double jd = unix_seconds / 86400.0 + 2440587.5;
  const double T = (jd - 2451545.0) / 36525.0;

  const double L0 = std::fmod(280.46646 + T * (36000.76983 + T * 0.0003032), 360.0);
  const double M = 357.52911 + T * (35999.05029 - 0.0001537 * T);
  const double e = 0.016708634 - T * (0.000042037 + 0.0000001267 * T);
  const double C = std::sin(rad(M)) * (1.914602 - T * (0.004817 + 0.000014 * T)) +
                   std::sin(rad(2 * M)) * (0.019993 - 0.000101 * T) + std::sin(rad(3 * M)) * 0.000289;
  const double true_long = L0 + C;
  const double true_anomaly = M + C;
  const double radius = 1.000001018 * (1 - e * e) / (1 + e * std::cos(rad(true_anomaly)));
  const double omega = 125.04 - 1934.136 * T;
  const double lambda = true_long - 0.00569 - 0.00478 * std::sin(rad(omega));
  const double eps0 = 23.0 + (26.0 + (21.448 - T * (46.815 + T * (0.00059 - T * 0.001813))) / 60.0) / 60.0;
  const double eps = eps0 + 0.00256 * std::cos(rad(omega));
  const double decl = deg(std::asin(std::sin(rad(eps)) * std::sin(rad(lambda))));

  const double y = std::pow(std::tan(rad(eps / 2)), 2);
  const double eot_minutes =
      4.0 * deg(y * std::sin(2 * rad(L0)) - 2 * e * std::sin(rad(M)) +
                4 * e * y * std::sin(rad(M)) * std::cos(2 * rad(L0)) - 0.5 * y * y * std::sin(4 * rad(L0)) -
                1.25 * e * e * std::sin(2 * rad(M)));
  const double minutes_utc = std::fmod(unix_seconds, 86400.0) / 60.0;
  double true_solar = std::fmod(minutes_utc + eot_minutes + 4.0 * loc.longitude, 1440.0);
  if (true_solar < 0) true_solar += 1440.0;
  double ha = true_solar / 4.0 - 180.0;
  if (ha >= 180.0) ha -= 360.0;

  const double cos_zen = std::sin(rad(loc.latitude)) * std::sin(rad(decl)) +
                         std::cos(rad(loc.latitude)) * std::cos(rad(decl)) * std::cos(rad(ha));
  SolarState s;
  s.zenith = deg(std::acos(std::clamp(cos_zen, -1.0, 1.0)));
  s.declination = decl;
  s.hour_angle = ha;
  s.earth_sun_distance_factor = 1.0 / (radius * radius);
  return s;
}

inline double transmittance(double elevation) { return 0.75 + 2e-5 * elevation; }

inline double clear_sky_irradiance(const SolarState& state, const GeoLocation& loc) {
  if (state.zenith >= 90.0) return 0.0;
  return kSolarConstant * state.earth_sun_distance_factor * std::cos(detail::rad(state.zenith)) *
         transmittance(loc.elevation);
}

// Mean of the 24 hourly values at 00:30 ... 23:30 UTC.
inline double rso_daily(const GeoLocation& loc, const Date& date) {
  double sum = 0;
  for (int h = 0; h < 24; ++h) sum += clear_sky_irradiance(solar_position(loc, utc_time(date, h, 30)), loc);
  return sum / 24.0;
}

inline std::vector<double> rso_series(const GeoLocation& loc, const Date& start, std::size_t days) {
  std::vector<double> out(days);
  for (std::size_t i = 0; i < days; ++i) out[i] = rso_daily(loc, add_days(start, static_cast<long>(i)));
  return out;
}

}  // namespace gppcast::solar
