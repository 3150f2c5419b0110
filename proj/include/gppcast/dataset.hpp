#pragma once

// Per-site daily series of 28-wide tokens, the synthetic generator, context
// windows, the temporal year split and feature standardization.
//
// Token layout (columns of SiteSeries::tokens):
//   [0, 18)  S2  vegetation-index PCA scores, zero padded
//   [18, 23) S1  dprvi, vv_db, vh_db, vv, vh
//   [23, 27) LST day, night, mean, diurnal range
//   [27]     R_so daily clear-sky shortwave radiation

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gppcast/calendar.hpp"
#include "gppcast/config.hpp"
#include "gppcast/errors.hpp"
#include "gppcast/features.hpp"
#include "gppcast/grad.hpp"
#include "gppcast/random.hpp"
#include "gppcast/solar.hpp"
#include "gppcast/stats.hpp"

namespace gppcast::dataset {

using grad::Array;

inline constexpr std::size_t kTokenWidth = 28;
inline constexpr std::size_t kContextLength = 120;
inline constexpr std::size_t kS2Width = 18;
inline constexpr std::size_t kRsoColumn = 27;

struct ModalitySlice {
  std::string_view name;
  std::size_t begin, end;
};

inline constexpr std::array<ModalitySlice, 4> kModalities = {{
    {"S2", 0, 18},
    {"S1", 18, 23},
    {"LST", 23, 27},
    {"Rso", 27, 28},
}};

inline const ModalitySlice& modality(std::string_view name) {
  for (const auto& m : kModalities) {
    if (m.name == name) return m;
  }
  throw ConfigError("unknown modality '" + std::string(name) + "' (expected S2, S1, LST or Rso)");
}

inline std::vector<std::string> token_column_names() {
  std::vector<std::string> names;
  char buf[16];
  for (std::size_t i = 1; i <= 18; ++i) {
    std::snprintf(buf, sizeof buf, "s2_pc%02zu", i);
    names.emplace_back(buf);
  }
  for (std::size_t i = 1; i <= 5; ++i) names.push_back("s1_f" + std::to_string(i));
  for (std::size_t i = 1; i <= 4; ++i) names.push_back("lst_f" + std::to_string(i));
  names.emplace_back("rso");
  return names;
}

struct BuildOptions {
  features::LowessOptions lowess;
  features::ExtremeOptions extremes;
};

struct SiteSeries {
  std::string site_id;
  std::vector<Date> dates;
  Array<double> tokens;           // days x 28, gaps interpolated
  std::vector<double> gpp;        // observed, missing allowed
  std::vector<double> gpp_qc;     // carried through, not used by the models
  std::vector<double> gpp_smoothed;
  features::ConditionFlags flags;
  bool extremes_available = false;  // false when the record is shorter than a year

  std::size_t days() const { return dates.size(); }
};

// Validates the record, interpolates token gaps and derives the smoothed
// target and condition flags.
inline SiteSeries build_site(std::string site_id, std::vector<Date> dates, Array<double> tokens,
                             std::vector<double> gpp, std::vector<double> gpp_qc,
                             const BuildOptions& opt = {}) {
  const std::size_t n = dates.size();
  if (n == 0) throw DataError("site '" + site_id + "' has no rows");
  if (tokens.cols() != kTokenWidth) {
    throw DataError("site '" + site_id + "' has " + std::to_string(tokens.cols()) +
                    " feature columns, expected 28");
  }
  if (tokens.rows() != n || gpp.size() != n || gpp_qc.size() != n) {
    throw DataError("site '" + site_id + "': column lengths differ");
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (days_between(dates[i - 1], dates[i]) != 1) {
      throw DataError("site '" + site_id + "': dates not consecutive between " + format_date(dates[i - 1]) +
                      " and " + format_date(dates[i]));
    }
  }
  for (std::size_t j = 0; j < kTokenWidth; ++j) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = tokens(i, j);
    if (std::all_of(col.begin(), col.end(), is_missing)) {
      throw DataError("site '" + site_id + "': feature column " + token_column_names()[j] + " is empty");
    }
    col = features::interpolate_gaps(col);
    for (std::size_t i = 0; i < n; ++i) tokens(i, j) = col[i];
  }

  SiteSeries s;
  s.site_id = std::move(site_id);
  s.dates = std::move(dates);
  s.tokens = std::move(tokens);
  s.gpp = std::move(gpp);
  s.gpp_qc = std::move(gpp_qc);
  if (std::all_of(s.gpp.begin(), s.gpp.end(), is_missing)) {
    throw DataError("site '" + s.site_id + "' has no GPP observations");
  }
  const auto observed = std::count_if(s.gpp.begin(), s.gpp.end(), [](double v) { return !is_missing(v); });
  if (opt.lowess.frac * static_cast<double>(observed) + 1e-10 < 3.0) {
    throw DataError("site '" + s.site_id + "' has " + std::to_string(observed) +
                    " GPP observations, too few for the smoothing window");
  }
  s.gpp_smoothed = features::lowess_smooth(s.gpp, opt.lowess);

  // Anomalies use the gap-filled record so every seasonal day has a value;
  // days without an observation stay missing and break extreme runs.
  if (days_between(s.dates.front(), s.dates.back()) >= 365) {
    std::vector<double> anomalies = features::seasonal_anomalies(features::interpolate_gaps(s.gpp), s.dates);
    for (std::size_t i = 0; i < n; ++i) {
      if (is_missing(s.gpp[i])) anomalies[i] = kMissing;
    }
    s.flags = features::flag_extremes(anomalies, s.dates, opt.extremes);
    s.extremes_available = true;
  } else {
    const std::vector<double> none(n, kMissing);
    s.flags = features::flag_extremes(none, s.dates, opt.extremes);
  }
  return s;
}

// --- CSV -------------------------------------------------------------------------

inline std::string csv_header() {
  std::string h = "date,gpp,gpp_qc";
  for (const auto& name : token_column_names()) h += "," + name;
  return h;
}

inline std::string format_number(double v) {
  if (is_missing(v)) return "";
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline void write_site_csv(const SiteSeries& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << csv_header() << '\n';
  for (std::size_t i = 0; i < s.days(); ++i) {
    out << format_date(s.dates[i]) << ',' << format_number(s.gpp[i]) << ',' << format_number(s.gpp_qc[i]);
    for (std::size_t j = 0; j < kTokenWidth; ++j) out << ',' << format_number(s.tokens(i, j));
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

namespace detail {
inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t end = line.find(',', pos);
    out.push_back(line.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  return out;
}

inline double parse_field(std::string_view f, const std::string& where) {
  if (f.empty()) return kMissing;
  double v = 0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc{} || ptr != f.data() + f.size() || !std::isfinite(v)) {
    throw DataError(where + ": malformed number '" + std::string(f) + "'");
  }
  return v;
}
}  // namespace detail

inline SiteSeries read_site_csv(const std::filesystem::path& path, const BuildOptions& opt = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  const std::string file = path.string();
  std::string line;
  if (!std::getline(in, line)) throw DataError(file + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  const std::size_t expected = 3 + kTokenWidth;
  if (header.size() != expected) {
    const std::size_t width = header.size() > 3 ? header.size() - 3 : 0;
    throw DataError(file + ": header has " + std::to_string(width) + " feature columns, expected 28");
  }
  if (line != csv_header()) throw DataError(file + ": header does not match the documented schema");

  std::vector<Date> dates;
  std::vector<double> gpp, qc, values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = file + ":" + std::to_string(line_no);
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != expected) {
      throw DataError(where + ": expected " + std::to_string(expected) + " fields, got " +
                      std::to_string(fields.size()));
    }
    Date d;
    if (!try_parse_date(fields[0], d)) throw DataError(where + ": malformed date '" + std::string(fields[0]) + "'");
    if (!dates.empty() && days_between(dates.back(), d) != 1) {
      throw DataError(where + ": dates not consecutive, gap between " + format_date(dates.back()) + " and " +
                      format_date(d));
    }
    dates.push_back(d);
    gpp.push_back(detail::parse_field(fields[1], where));
    qc.push_back(detail::parse_field(fields[2], where));
    for (std::size_t j = 0; j < kTokenWidth; ++j) values.push_back(detail::parse_field(fields[3 + j], where));
  }
  const std::size_t n = dates.size();
  return build_site(path.stem().string(), std::move(dates), Array<double>({n, kTokenWidth}, std::move(values)),
                    std::move(gpp), std::move(qc), opt);
}

// Every `<site_id>.csv` in `dir`, ordered by site id.
inline std::vector<SiteSeries> load_sites(const std::filesystem::path& dir, const BuildOptions& opt = {}) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no site CSV files in '" + dir.string() + "'");
  std::vector<SiteSeries> sites;
  for (const auto& f : files) sites.push_back(read_site_csv(f, opt));
  return sites;
}

// --- synthetic generator ------------------------------------------------------------

struct SynthConfig {
  std::size_t n_sites = 3;
  std::vector<double> latitudes = {45.0, 52.0, 60.0};
  std::vector<double> longitudes = {8.0, 5.0, 25.0};
  std::vector<double> elevations = {400.0, 10.0, 150.0};
  int start_year = 2016;
  std::size_t years = 5;
  std::size_t warmup_days = kContextLength - 1;  // history before start_year-01-01
  std::size_t lag_days = 30;
  // Exponents on the normalized drivers: 0 removes a modality's influence.
  double w_rso = 1.0;
  double w_s2 = 0.6;
  double w_lst = 0.25;
  double w_s1 = 0.0;
  double noise = 0.05;  // Gaussian noise sd as a fraction of gpp_max
  double gpp_max = 12.0;
  double gpp_missing_rate = 0.02;
  double cloud_rate = 0.4;
  std::size_t s2_revisit = 5;
  std::size_t s1_revisit = 6;

  static SynthConfig from(const KeyValueConfig& c) {
    SynthConfig s;
    s.n_sites = c.get_size("n_sites", s.n_sites);
    s.latitudes = c.get_doubles("latitudes", s.latitudes);
    s.longitudes = c.get_doubles("longitudes", s.longitudes);
    s.elevations = c.get_doubles("elevations", s.elevations);
    s.start_year = static_cast<int>(c.get_int("start_year", s.start_year));
    s.years = c.get_size("years", s.years);
    s.warmup_days = c.get_size("warmup_days", s.warmup_days);
    s.lag_days = c.get_size("lag_days", s.lag_days);
    s.w_rso = c.get_double("w_rso", s.w_rso);
    s.w_s2 = c.get_double("w_s2", s.w_s2);
    s.w_lst = c.get_double("w_lst", s.w_lst);
    s.w_s1 = c.get_double("w_s1", s.w_s1);
    s.noise = c.get_double("noise", s.noise);
    s.gpp_max = c.get_double("gpp_max", s.gpp_max);
    s.gpp_missing_rate = c.get_double("gpp_missing_rate", s.gpp_missing_rate);
    s.cloud_rate = c.get_double("cloud_rate", s.cloud_rate);
    s.s2_revisit = c.get_size("s2_revisit", s.s2_revisit);
    s.s1_revisit = c.get_size("s1_revisit", s.s1_revisit);
    s.validate();
    return s;
  }

  void validate() const {
    if (n_sites == 0) throw ConfigError("n_sites must be >= 1");
    if (years == 0) throw ConfigError("years must be >= 1");
    if (latitudes.empty() || longitudes.empty() || elevations.empty()) {
      throw ConfigError("latitudes, longitudes and elevations need at least one value");
    }
    for (std::size_t i = 0; i < n_sites; ++i) site(i).validate();
    if (start_year < 1951 || start_year + static_cast<int>(years) - 1 > 2050) {
      throw ConfigError("synthetic years must lie within 1951-2050");
    }
    if (warmup_days > 366) throw ConfigError("warmup_days must be <= 366");
    for (double w : {w_rso, w_s2, w_lst, w_s1}) {
      if (!(w >= 0.0 && w <= 5.0)) throw ConfigError("modality weights must lie in [0, 5]");
    }
    if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
    if (!(gpp_max > 0.0)) throw ConfigError("gpp_max must be > 0");
    if (!(gpp_missing_rate >= 0.0 && gpp_missing_rate < 0.5)) throw ConfigError("gpp_missing_rate must lie in [0, 0.5)");
    if (!(cloud_rate >= 0.0 && cloud_rate < 0.9)) throw ConfigError("cloud_rate must lie in [0, 0.9)");
    if (s2_revisit == 0 || s1_revisit == 0) throw ConfigError("revisit intervals must be >= 1");
  }

  // Site i cycles through the coordinate lists.
  solar::GeoLocation site(std::size_t i) const {
    return {latitudes[i % latitudes.size()], longitudes[i % longitudes.size()], elevations[i % elevations.size()]};
  }

  Date first_date() const { return add_days(make_date(start_year, 1, 1), -static_cast<long>(warmup_days)); }
  Date last_date() const { return make_date(start_year + static_cast<int>(years) - 1, 12, 31); }
};

inline constexpr double kRsoReference = 300.0;  // W m^-2, normalizes the radiation driver

// Latent daily drivers of one synthetic site, before observation.
struct SynthDrivers {
  std::vector<Date> dates;
  std::vector<double> rso;         // R_so on each date
  std::vector<double> rso_lagged;  // R_so lag_days earlier
  std::vector<double> season;      // phenology in [0.15, 1]
  std::vector<double> stress;      // AR(1) with planted droughts, sd 0.6 outside them
  std::vector<double> s1_latent;
  std::vector<double> gpp_clean;   // GPP before noise
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline SynthDrivers synth_drivers(const SynthConfig& cfg, std::size_t site, std::uint64_t seed) {
  const solar::GeoLocation loc = cfg.site(site);
  Rng rng(derive_seed(seed, "synth.drivers", site));
  SynthDrivers d;
  for (Date t = cfg.first_date(); days_between(t, cfg.last_date()) >= 0; t = add_days(t, 1)) d.dates.push_back(t);
  const std::size_t n = d.dates.size();

  // Per-year phenology and one growing-season drought per year. Droughts
  // take distinct 20-day slots so they do not wash out of the seasonal mean.
  struct YearPlan {
    double onset, offset, drought_start, drought_length;
  };
  constexpr std::size_t kSlots = 5;
  const std::vector<std::size_t> slots = rng.permutation(kSlots);
  std::map<int, YearPlan> plans;
  for (int y = year_of(d.dates.front()); y <= year_of(d.dates.back()); ++y) {
    YearPlan p;
    p.onset = rng.normal(125.0, 8.0);
    p.offset = rng.normal(275.0, 8.0);
    const std::size_t slot = slots[plans.size() % kSlots];
    p.drought_start = 140.0 + 20.0 * static_cast<double>(slot) + std::floor(rng.uniform(0.0, 5.0));
    p.drought_length = std::floor(rng.uniform(10.0, 16.0));
    plans[y] = p;
  }

  d.rso.resize(n);
  d.rso_lagged.resize(n);
  d.season.resize(n);
  d.stress.resize(n);
  d.s1_latent.resize(n);
  d.gpp_clean.resize(n);
  const bool south = loc.latitude < 0;
  double z = rng.normal(), u = rng.normal();
  const double phi_z = 0.9, phi_u = 0.8;
  for (std::size_t i = 0; i < n; ++i) {
    const Date t = d.dates[i];
    d.rso[i] = solar::rso_daily(loc, t);
    d.rso_lagged[i] = solar::rso_daily(loc, add_days(t, -static_cast<long>(cfg.lag_days)));
    // Southern sites run half a year out of phase.
    const Date local = south ? add_days(t, -182) : t;
    const YearPlan& p = plans.count(year_of(local)) ? plans.at(year_of(local)) : plans.begin()->second;
    const double doy = static_cast<double>(seasonal_day(local));
    d.season[i] = 0.15 + 0.85 * logistic((doy - p.onset) / 8.0) * logistic((p.offset - doy) / 8.0);

    if (i > 0) {
      z = phi_z * z + std::sqrt(1 - phi_z * phi_z) * rng.normal();
      u = phi_u * u + std::sqrt(1 - phi_u * phi_u) * rng.normal();
    }
    const double into = doy - p.drought_start;
    const double drought = (into >= 0 && into < p.drought_length) ? 3.0 : 0.0;
    d.stress[i] = 0.6 * z - drought;
    d.s1_latent[i] = u;

    const double r = std::pow(d.rso_lagged[i] / kRsoReference, cfg.w_rso);
    d.gpp_clean[i] = cfg.gpp_max * r * std::pow(d.season[i], cfg.w_s2) * std::exp(cfg.w_lst * d.stress[i]) *
                     std::exp(cfg.w_s1 * d.s1_latent[i]);
  }
  return d;
}

struct SynthSite {
  SynthDrivers drivers;
  std::vector<features::Reflectance> bands;  // NaN on unobserved days
  Array<double> s1_lst_rso;                  // days x 10, token columns 18..27 before gap filling
  std::vector<double> gpp, gpp_qc;
};

inline SynthSite synth_observe(const SynthConfig& cfg, std::size_t site, std::uint64_t seed) {
  SynthSite s;
  s.drivers = synth_drivers(cfg, site, seed);
  const SynthDrivers& d = s.drivers;
  const std::size_t n = d.dates.size();
  Rng rng(derive_seed(seed, "synth.observations", site));
  const double lat = cfg.site(site).latitude;
  const double offset_s2 = static_cast<double>(rng.below(cfg.s2_revisit));
  const double offset_s1 = static_cast<double>(rng.below(cfg.s1_revisit));

  s.bands.resize(n);
  s.s1_lst_rso = Array<double>::matrix(n, 10, kMissing);
  s.gpp.resize(n);
  s.gpp_qc.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double veg = d.season[i];
    // Every draw happens every day so the stream does not depend on gaps.
    std::array<double, 7> eps;
    for (double& e : eps) e = rng.normal(0.0, 0.006);
    const bool s2_seen = std::fmod(static_cast<double>(i) + offset_s2, static_cast<double>(cfg.s2_revisit)) == 0.0 &&
                         rng.uniform() >= cfg.cloud_rate;
    auto band = [](double v) { return std::clamp(v, 0.0, 1.0); };
    features::Reflectance r;
    r.blue = band(0.05 + 0.02 * (1 - veg) + eps[0]);
    r.green = band(0.07 + 0.02 * veg + eps[1]);
    r.red = band(0.11 - 0.08 * veg + eps[2]);
    r.red_edge = band(0.16 + 0.08 * veg + eps[3]);
    r.nir = band(0.20 + 0.28 * veg + eps[4]);
    r.swir1 = band(0.26 - 0.08 * veg + eps[5]);
    r.swir2 = band(0.19 - 0.09 * veg + eps[6]);
    if (!s2_seen) r = {kMissing, kMissing, kMissing, kMissing, kMissing, kMissing, kMissing};
    s.bands[i] = r;

    const double n_vv = rng.normal(), n_vh = rng.normal();
    if (std::fmod(static_cast<double>(i) + offset_s1, static_cast<double>(cfg.s1_revisit)) == 0.0) {
      const double vv = 0.08 * std::exp(0.2 * n_vv + 0.4 * d.s1_latent[i]);
      const double vh = 0.02 * std::exp(0.2 * n_vh + 0.4 * d.s1_latent[i]);
      s.s1_lst_rso(i, 0) = features::dprvi(vv, vh);
      s.s1_lst_rso(i, 1) = features::to_db(vv);
      s.s1_lst_rso(i, 2) = features::to_db(vh);
      s.s1_lst_rso(i, 3) = vv;
      s.s1_lst_rso(i, 4) = vh;
    }

    const double doy = static_cast<double>(seasonal_day(d.dates[i]));
    const double hemisphere = lat < 0 ? -1.0 : 1.0;
    const double climate = 8.0 - hemisphere * 12.0 * std::cos(2 * std::numbers::pi * (doy - 20.0) / 365.0);
    const double heat = -d.stress[i];
    const double lst_day = climate + 6.0 + 3.0 * heat + rng.normal(0.0, 1.0);
    const double lst_night = climate - 4.0 + 1.0 * heat + rng.normal(0.0, 1.0);
    if (rng.uniform() >= cfg.cloud_rate) {
      s.s1_lst_rso(i, 5) = lst_day;
      s.s1_lst_rso(i, 6) = lst_night;
      s.s1_lst_rso(i, 7) = 0.5 * (lst_day + lst_night);
      s.s1_lst_rso(i, 8) = lst_day - lst_night;
    }
    s.s1_lst_rso(i, 9) = d.rso[i];

    const double noisy = std::max(0.0, d.gpp_clean[i] + cfg.noise * cfg.gpp_max * rng.normal());
    const double qc = rng.uniform(0.7, 1.0);
    const bool missing = rng.uniform() < cfg.gpp_missing_rate;
    s.gpp[i] = missing ? kMissing : noisy;
    s.gpp_qc[i] = missing ? kMissing : qc;
  }
  return s;
}

// Generates complete SiteSeries. S2 scores come from one PCA fitted on the
// gap-filled vegetation indices pooled over all sites.
inline std::vector<SiteSeries> synth_generate(const SynthConfig& cfg, std::uint64_t seed,
                                              const BuildOptions& opt = {}) {
  cfg.validate();
  std::vector<SynthSite> raw;
  for (std::size_t i = 0; i < cfg.n_sites; ++i) raw.push_back(synth_observe(cfg, i, seed));

  std::vector<Eigen::MatrixXd> vis;
  Eigen::Index total_rows = 0;
  for (const SynthSite& s : raw) {
    const std::size_t n = s.bands.size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(features::kViCount));
    for (std::size_t i = 0; i < n; ++i) {
      const features::ViVector v = features::compute_vis(s.bands[i]);
      for (std::size_t j = 0; j < v.size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
    }
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::vector<double> col(m.col(j).data(), m.col(j).data() + m.rows());
      col = features::interpolate_gaps(col);
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = col[static_cast<std::size_t>(i)];
    }
    total_rows += m.rows();
    vis.push_back(std::move(m));
  }
  Eigen::MatrixXd pooled(total_rows, static_cast<Eigen::Index>(features::kViCount));
  Eigen::Index at = 0;
  for (const auto& m : vis) {
    pooled.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  const features::PcaModel pca = features::pca_fit(pooled);

  std::vector<SiteSeries> sites;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    SynthSite& s = raw[k];
    const std::size_t n = s.bands.size();
    Array<double> tokens = Array<double>::matrix(n, kTokenWidth);
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::VectorXd row = vis[k].row(static_cast<Eigen::Index>(i)).transpose();
      const auto scores = features::pca_transform(pca, std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
      for (std::size_t j = 0; j < kS2Width; ++j) tokens(i, j) = scores[j];
      for (std::size_t j = 0; j < 10; ++j) tokens(i, kS2Width + j) = s.s1_lst_rso(i, j);
    }
    const std::string id = (k + 1 < 10 ? "SYN0" : "SYN") + std::to_string(k + 1);
    sites.push_back(build_site(id, s.drivers.dates, std::move(tokens), std::move(s.gpp), std::move(s.gpp_qc), opt));
  }
  return sites;
}

// --- windows and split ---------------------------------------------------------------

struct WindowSample {
  std::size_t site = 0;     // index into the site list
  std::size_t end_row = 0;  // row of the target date in the site series
  Date target_date;
  double target = 0.0;
  double target_smoothed = 0.0;
};

// One sample per date with at least k-1 predecessors and an observed GPP.
inline std::vector<WindowSample> make_windows(const SiteSeries& s, std::size_t site_index,
                                              std::size_t k = kContextLength) {
  if (k == 0) throw ConfigError("context length must be >= 1");
  if (s.days() < k) {
    throw DataError("site '" + s.site_id + "' has " + std::to_string(s.days()) + " days, shorter than the context " +
                    std::to_string(k));
  }
  std::vector<WindowSample> out;
  for (std::size_t i = k - 1; i < s.days(); ++i) {
    if (is_missing(s.gpp[i])) continue;
    out.push_back({site_index, i, s.dates[i], s.gpp[i], s.gpp_smoothed[i]});
  }
  return out;
}

inline std::vector<WindowSample> make_windows(const std::vector<SiteSeries>& sites, std::size_t k = kContextLength) {
  std::vector<WindowSample> out;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    auto w = make_windows(sites[i], i, k);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

struct Normalizer {
  std::vector<double> mean = std::vector<double>(kTokenWidth, 0.0);
  std::vector<double> scale = std::vector<double>(kTokenWidth, 1.0);
};

// Raw context rows (end_row - k + 1 ... end_row), oldest first, optionally
// standardized.
inline Array<double> context(const std::vector<SiteSeries>& sites, const WindowSample& w, std::size_t k,
                             const Normalizer* norm = nullptr) {
  const SiteSeries& s = sites.at(w.site);
  if (w.end_row + 1 < k || w.end_row >= s.days()) throw ShapeError("window outside its site series");
  Array<double> out = Array<double>::matrix(k, kTokenWidth);
  const std::size_t first = w.end_row + 1 - k;
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t j = 0; j < kTokenWidth; ++j) {
      const double v = s.tokens(first + t, j);
      out(t, j) = norm ? (v - norm->mean[j]) / norm->scale[j] : v;
    }
  }
  return out;
}

// Column statistics over every row whose year is in `years`, pooled across
// sites. Constant columns (padding) keep scale 1.
inline Normalizer fit_normalizer(const std::vector<SiteSeries>& sites, const std::set<int>& years) {
  Normalizer n;
  std::vector<double> sum(kTokenWidth, 0.0), sumsq(kTokenWidth, 0.0);
  double count = 0;
  for (const SiteSeries& s : sites) {
    for (std::size_t i = 0; i < s.days(); ++i) {
      if (!years.count(year_of(s.dates[i]))) continue;
      count += 1;
      for (std::size_t j = 0; j < kTokenWidth; ++j) sum[j] += s.tokens(i, j);
    }
  }
  if (count < 2) throw DataError("too few training rows to fit feature standardization");
  for (std::size_t j = 0; j < kTokenWidth; ++j) n.mean[j] = sum[j] / count;
  for (const SiteSeries& s : sites) {
    for (std::size_t i = 0; i < s.days(); ++i) {
      if (!years.count(year_of(s.dates[i]))) continue;
      for (std::size_t j = 0; j < kTokenWidth; ++j) sumsq[j] += (s.tokens(i, j) - n.mean[j]) * (s.tokens(i, j) - n.mean[j]);
    }
  }
  for (std::size_t j = 0; j < kTokenWidth; ++j) {
    const double sd = std::sqrt(sumsq[j] / (count - 1));
    n.scale[j] = sd > 1e-12 * std::max(1.0, std::abs(n.mean[j])) ? sd : 1.0;
  }
  return n;
}

struct SplitSpec {
  std::set<int> train_years, validation_years, test_years;

  void validate() const {
    for (int y : train_years) {
      if (validation_years.count(y) || test_years.count(y)) {
        throw ConfigError("year " + std::to_string(y) + " is in more than one split");
      }
    }
    for (int y : validation_years) {
      if (test_years.count(y)) throw ConfigError("year " + std::to_string(y) + " is in more than one split");
    }
    if (train_years.empty()) throw ConfigError("no training years");
  }

  static SplitSpec from(const KeyValueConfig& c) {
    auto years = [&](const std::string& key, std::vector<long long> fallback) {
      std::set<int> out;
      for (long long y : c.get_ints(key, fallback)) out.insert(static_cast<int>(y));
      return out;
    };
    SplitSpec s{years("train_years", {2016, 2017, 2018}), years("validation_years", {2020}),
                years("test_years", {2019})};
    s.validate();
    return s;
  }
};

struct Splits {
  std::vector<WindowSample> train, validation, test;
};

// Assignment by target-date year; contexts may reach into earlier periods.
// Samples whose year is in no split are an error unless `drop_uncovered`.
inline Splits split(const std::vector<WindowSample>& samples, const SplitSpec& spec, bool drop_uncovered = false) {
  spec.validate();
  Splits out;
  for (const WindowSample& w : samples) {
    const int y = year_of(w.target_date);
    if (spec.train_years.count(y)) {
      out.train.push_back(w);
    } else if (spec.validation_years.count(y)) {
      out.validation.push_back(w);
    } else if (spec.test_years.count(y)) {
      out.test.push_back(w);
    } else if (!drop_uncovered) {
      throw DataError("target year " + std::to_string(y) + " (" + format_date(w.target_date) +
                      ") is not covered by the split");
    }
  }
  return out;
}

}  // namespace gppcast::dataset
