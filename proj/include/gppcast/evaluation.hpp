#pragma once

// Evaluation: condition-stratified NRMSE, permutation memory-retention
// curves, minimum-error lag and modality feature importance.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "gppcast/dataset.hpp"
#include "gppcast/errors.hpp"
#include "gppcast/models.hpp"
#include "gppcast/random.hpp"
#include "gppcast/stats.hpp"

namespace gppcast::evaluation {

using dataset::SiteSeries;
using dataset::WindowSample;
using grad::Array;

// --- NRMSE ----------------------------------------------------------------------------

enum class NrmseNormalizer { kMean, kRange, kStdDev };

inline std::string_view to_string(NrmseNormalizer n) {
  switch (n) {
    case NrmseNormalizer::kMean: return "mean";
    case NrmseNormalizer::kRange: return "range";
    case NrmseNormalizer::kStdDev: return "sd";
  }
  return "mean";
}

inline NrmseNormalizer parse_normalizer(const std::string& s) {
  if (s == "mean") return NrmseNormalizer::kMean;
  if (s == "range") return NrmseNormalizer::kRange;
  if (s == "sd") return NrmseNormalizer::kStdDev;
  throw ConfigError("nrmse normalizer must be mean, range or sd, got '" + s + "'");
}

inline double nrmse(std::span<const double> predictions, std::span<const double> observations,
                    NrmseNormalizer normalizer = NrmseNormalizer::kMean) {
  const std::size_t n = observations.size();
  if (predictions.size() != n) throw ShapeError("nrmse: prediction and observation lengths differ");
  if (n < 2) throw DataError("nrmse needs at least 2 observations");
  double sq = 0;
  for (std::size_t i = 0; i < n; ++i) sq += (predictions[i] - observations[i]) * (predictions[i] - observations[i]);
  const double rmse = std::sqrt(sq / static_cast<double>(n));
  double denom = 0;
  switch (normalizer) {
    case NrmseNormalizer::kMean:
      denom = mean(observations);
      break;
    case NrmseNormalizer::kRange: {
      const auto [lo, hi] = std::minmax_element(observations.begin(), observations.end());
      denom = *hi - *lo;
      break;
    }
    case NrmseNormalizer::kStdDev: {
      const double m = mean(observations);
      double ss = 0;
      for (double v : observations) ss += (v - m) * (v - m);
      denom = std::sqrt(ss / static_cast<double>(n - 1));
      break;
    }
  }
  if (denom == 0.0 || !std::isfinite(denom)) {
    throw NumericError("nrmse undefined: observation " + std::string(to_string(normalizer)) + " is zero");
  }
  return rmse / std::abs(denom);
}

// --- conditions -----------------------------------------------------------------------

enum class Condition { kOverall, kGrowing, kNegative, kPositive };
inline constexpr std::array<Condition, 4> kConditions = {Condition::kOverall, Condition::kGrowing,
                                                         Condition::kNegative, Condition::kPositive};

inline std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::kOverall: return "overall";
    case Condition::kGrowing: return "growing";
    case Condition::kNegative: return "extreme_neg";
    case Condition::kPositive: return "extreme_pos";
  }
  return "overall";
}

inline Condition parse_condition(const std::string& s) {
  for (Condition c : kConditions) {
    if (to_string(c) == s) return c;
  }
  throw ConfigError("unknown condition '" + s + "' (overall, growing, extreme_neg, extreme_pos)");
}

struct ConditionSet {
  std::array<std::vector<bool>, 4> members;  // indexed like kConditions

  const std::vector<bool>& operator[](Condition c) const { return members[static_cast<std::size_t>(c)]; }
  std::size_t size() const { return members[0].size(); }
};

// Membership by target date, read from the site's flags.
inline ConditionSet condition_masks(const std::vector<SiteSeries>& sites, std::span<const WindowSample> samples) {
  ConditionSet c;
  for (auto& m : c.members) m.assign(samples.size(), false);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SiteSeries& s = sites.at(samples[i].site);
    const std::size_t r = samples[i].end_row;
    c.members[0][i] = true;
    c.members[1][i] = s.flags.growing[r];
    c.members[2][i] = s.flags.extreme_neg[r];
    c.members[3][i] = s.flags.extreme_pos[r];
  }
  return c;
}

// --- evaluation context ----------------------------------------------------------------

enum class TargetKind { kRaw, kSmoothed };

inline TargetKind parse_target_kind(const std::string& s) {
  if (s == "raw") return TargetKind::kRaw;
  if (s == "smoothed") return TargetKind::kSmoothed;
  throw ConfigError("evaluation target must be raw or smoothed, got '" + s + "'");
}

inline std::string_view to_string(TargetKind t) { return t == TargetKind::kRaw ? "raw" : "smoothed"; }

struct EvalOptions {
  NrmseNormalizer normalizer = NrmseNormalizer::kMean;
  TargetKind target = TargetKind::kRaw;
  std::size_t batch_size = 64;
  std::size_t jobs = 1;
};

// Standardized windows, grouped by site, for one set of samples.
struct EvalSet {
  std::vector<std::string> site_ids;                  // sites with at least one sample, in site order
  std::vector<std::vector<Array<double>>> windows;    // per site
  std::vector<std::vector<double>> observations;      // per site
  std::vector<std::array<std::vector<bool>, 4>> masks;  // per site, per condition
  std::vector<std::vector<WindowSample>> samples;     // per site

  std::size_t sites() const { return site_ids.size(); }
};

inline EvalSet make_eval_set(const std::vector<SiteSeries>& sites, std::span<const WindowSample> samples,
                             std::size_t k, const dataset::Normalizer& norm, TargetKind target) {
  const ConditionSet cond = condition_masks(sites, samples);
  std::map<std::size_t, std::size_t> slot;
  EvalSet e;
  for (const auto& w : samples) slot.emplace(w.site, 0);
  for (auto& [site, idx] : slot) {
    idx = e.site_ids.size();
    e.site_ids.push_back(sites.at(site).site_id);
  }
  const std::size_t n = e.site_ids.size();
  e.windows.resize(n);
  e.observations.resize(n);
  e.masks.resize(n);
  e.samples.resize(n);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t s = slot.at(samples[i].site);
    e.windows[s].push_back(dataset::context(sites, samples[i], k, &norm));
    e.observations[s].push_back(target == TargetKind::kRaw ? samples[i].target : samples[i].target_smoothed);
    for (std::size_t c = 0; c < 4; ++c) e.masks[s][c].push_back(cond.members[c][i]);
    e.samples[s].push_back(samples[i]);
  }
  return e;
}

// NRMSE over the masked subset; empty when fewer than 2 samples qualify.
inline std::optional<double> masked_nrmse(std::span<const double> predictions, std::span<const double> observations,
                                          const std::vector<bool>& mask, NrmseNormalizer normalizer) {
  std::vector<double> p, o;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    if (!mask[i]) continue;
    p.push_back(predictions[i]);
    o.push_back(observations[i]);
  }
  if (o.size() < 2) return std::nullopt;
  return nrmse(p, o, normalizer);
}

inline std::size_t count_true(const std::vector<bool>& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
}

// Runs fn(cell, predictor) for cell in [0, cells) on up to `jobs` threads,
// each with its own predictor. Results must be written by cell index.
inline void parallel_cells(const models::ModelParams& params, const models::OutputScaling& scaling, std::size_t k,
                           std::size_t batch_size, std::size_t jobs, std::size_t cells,
                           const std::function<void(std::size_t, models::Predictor&)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, cells));
  std::vector<std::exception_ptr> errors(workers);
  std::atomic<std::size_t> next{0};
  auto worker = [&](std::size_t w) {
    try {
      models::Predictor p(params, scaling, k, batch_size);
      for (std::size_t cell = next++; cell < cells; cell = next++) fn(cell, p);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Model {
  models::ModelParams params;
  models::OutputScaling scaling;
  std::size_t context_length = dataset::kContextLength;
};

// --- per-site report ----------------------------------------------------------------------

struct SiteScore {
  std::string site_id;
  Condition condition;
  std::size_t samples = 0;
  std::optional<double> nrmse;  // absent when fewer than 2 samples
};

struct Summary {
  Condition condition;
  std::size_t sites = 0;  // sites where the condition is present
  double median = kMissing, q25 = kMissing, q75 = kMissing, q05 = kMissing, q95 = kMissing;
};

struct EvalReport {
  std::vector<SiteScore> scores;  // site-major, conditions in kConditions order
  std::vector<Summary> summaries;
  NrmseNormalizer normalizer = NrmseNormalizer::kMean;
  TargetKind target = TargetKind::kRaw;
};

inline Summary summarize(Condition c, std::vector<double> values) {
  Summary s;
  s.condition = c;
  s.sites = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.median = quantile_sorted(values, 0.5);
  s.q25 = quantile_sorted(values, 0.25);
  s.q75 = quantile_sorted(values, 0.75);
  s.q05 = quantile_sorted(values, 0.05);
  s.q95 = quantile_sorted(values, 0.95);
  return s;
}

inline std::vector<std::vector<double>> predict_sets(const Model& model, const EvalSet& e, const EvalOptions& opt) {
  std::vector<std::vector<double>> out(e.sites());
  parallel_cells(model.params, model.scaling, model.context_length, opt.batch_size, opt.jobs, e.sites(),
                 [&](std::size_t s, models::Predictor& p) { out[s] = p.predict(e.windows[s]); });
  return out;
}

inline EvalReport evaluate_report(const Model& model, const EvalSet& e, const EvalOptions& opt = {}) {
  if (e.sites() == 0) throw DataError("evaluation set is empty");
  const auto preds = predict_sets(model, e, opt);
  EvalReport r;
  r.normalizer = opt.normalizer;
  r.target = opt.target;
  std::array<std::vector<double>, 4> present;
  for (std::size_t s = 0; s < e.sites(); ++s) {
    for (std::size_t c = 0; c < 4; ++c) {
      SiteScore score{e.site_ids[s], kConditions[c], count_true(e.masks[s][c]), std::nullopt};
      score.nrmse = masked_nrmse(preds[s], e.observations[s], e.masks[s][c], opt.normalizer);
      if (score.nrmse) present[c].push_back(*score.nrmse);
      r.scores.push_back(score);
    }
  }
  for (std::size_t c = 0; c < 4; ++c) r.summaries.push_back(summarize(kConditions[c], present[c]));
  return r;
}

// --- memory retention -----------------------------------------------------------------------

enum class PermutationMode { kBlock, kRow };

inline PermutationMode parse_permutation_mode(const std::string& s) {
  if (s == "block") return PermutationMode::kBlock;
  if (s == "row") return PermutationMode::kRow;
  throw ConfigError("permutation mode must be block or row, got '" + s + "'");
}

inline std::string_view to_string(PermutationMode m) { return m == PermutationMode::kBlock ? "block" : "row"; }

// τ = 0, stride, 2·stride, ... below k.
inline std::vector<std::size_t> tau_grid(std::size_t k, std::size_t stride) {
  if (stride == 0) throw ConfigError("tau stride must be >= 1");
  std::vector<std::size_t> taus;
  for (std::size_t t = 0; t < k; t += stride) taus.push_back(t);
  return taus;
}

struct MemoryOptions {
  std::vector<std::size_t> taus;
  std::size_t repeats = 20;
  std::uint64_t seed = 0;
  PermutationMode mode = PermutationMode::kBlock;
};

struct DiagnosticCurve {
  std::string site_id;
  Condition condition;
  std::vector<std::size_t> taus;
  std::vector<double> nrmse;                  // median over repeats, per τ
  std::vector<std::vector<double>> per_repeat;  // [τ][repeat]
  double baseline = 0.0;
  std::size_t repeats = 0;
};

// Window i with rows older than τ (positions 0 .. k-2-τ) taken from the
// partner samples. perms[p] gives the partner for row p (one shared
// permutation in block mode).
inline void permute_old_rows(const std::vector<Array<double>>& windows, std::size_t tau,
                             const std::vector<std::vector<std::size_t>>& perms, std::size_t i, Array<double>& out) {
  const std::size_t k = windows[i].rows(), f = windows[i].cols();
  out = windows[i];
  if (tau >= k - 1) return;
  const std::size_t old_rows = k - 1 - tau;
  for (std::size_t p = 0; p < old_rows; ++p) {
    const std::vector<std::size_t>& perm = perms.size() == 1 ? perms[0] : perms[p];
    const auto src = windows[perm[i]].row(p);
    std::copy(src.begin(), src.end(), out.row(p).begin());
  }
  // The most recent τ+1 rows must be untouched.
  if (std::memcmp(out.row(old_rows).data(), windows[i].row(old_rows).data(), (tau + 1) * f * sizeof(double)) != 0) {
    throw Error("memory permutation altered preserved rows");
  }
}

inline std::vector<std::vector<std::size_t>> draw_permutations(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::vector<std::size_t>> perms(count);
  for (auto& p : perms) p = rng.permutation(n);
  return perms;
}

// Curves for every site in `e` and every condition present at that site.
inline std::vector<DiagnosticCurve> memory_retention_curves(const Model& model, const EvalSet& e,
                                                           const MemoryOptions& mo, const EvalOptions& opt = {}) {
  const std::size_t k = model.context_length;
  if (mo.taus.empty()) throw ConfigError("no tau values");
  if (mo.repeats == 0) throw ConfigError("repeats must be >= 1");
  for (std::size_t i = 0; i < mo.taus.size(); ++i) {
    if (mo.taus[i] >= k) throw ConfigError("tau " + std::to_string(mo.taus[i]) + " outside [0, " + std::to_string(k - 1) + "]");
    if (i > 0 && mo.taus[i] <= mo.taus[i - 1]) throw ConfigError("tau values must be strictly increasing");
  }
  for (std::size_t s = 0; s < e.sites(); ++s) {
    if (e.windows[s].size() < 2) throw DataError("site '" + e.site_ids[s] + "' has fewer than 2 samples to permute");
  }
  const auto baseline = predict_sets(model, e, opt);

  // cell = (site, repeat); all τ share the repeat's permutation.
  const std::size_t cells = e.sites() * mo.repeats;
  std::vector<std::vector<std::vector<double>>> preds(cells);  // [cell][τ] -> predictions
  parallel_cells(model.params, model.scaling, k, opt.batch_size, opt.jobs, cells,
                 [&](std::size_t cell, models::Predictor& p) {
                   const std::size_t s = cell / mo.repeats, rep = cell % mo.repeats;
                   const auto& windows = e.windows[s];
                   Rng rng(derive_seed(mo.seed, "memory." + e.site_ids[s], rep));
                   const auto perms =
                       draw_permutations(windows.size(), mo.mode == PermutationMode::kBlock ? 1 : k, rng);
                   preds[cell].resize(mo.taus.size());
                   std::vector<Array<double>> permuted(windows.size());
                   for (std::size_t t = 0; t < mo.taus.size(); ++t) {
                     if (mo.taus[t] == k - 1) {
                       preds[cell][t] = baseline[s];
                       continue;
                     }
                     for (std::size_t i = 0; i < windows.size(); ++i) {
                       permute_old_rows(windows, mo.taus[t], perms, i, permuted[i]);
                     }
                     preds[cell][t] = p.predict(permuted);
                   }
                 });

  std::vector<DiagnosticCurve> curves;
  for (std::size_t s = 0; s < e.sites(); ++s) {
    for (std::size_t c = 0; c < 4; ++c) {
      const auto base = masked_nrmse(baseline[s], e.observations[s], e.masks[s][c], opt.normalizer);
      if (!base) continue;
      DiagnosticCurve curve;
      curve.site_id = e.site_ids[s];
      curve.condition = kConditions[c];
      curve.taus = mo.taus;
      curve.baseline = *base;
      curve.repeats = mo.repeats;
      curve.per_repeat.assign(mo.taus.size(), std::vector<double>(mo.repeats));
      for (std::size_t t = 0; t < mo.taus.size(); ++t) {
        for (std::size_t rep = 0; rep < mo.repeats; ++rep) {
          curve.per_repeat[t][rep] =
              *masked_nrmse(preds[s * mo.repeats + rep][t], e.observations[s], e.masks[s][c], opt.normalizer);
        }
        curve.nrmse.push_back(median(curve.per_repeat[t]));
      }
      curves.push_back(std::move(curve));
    }
  }
  return curves;
}

struct MinErrorLag {
  std::size_t tau_star = 0;
  double nrmse_star = 0.0;
  std::vector<double> median_curve;  // median across sites, per τ
};

// Argmin over τ of the across-site median; ties go to the smaller τ.
inline MinErrorLag min_error_lag(const std::vector<DiagnosticCurve>& curves, Condition condition) {
  std::vector<const DiagnosticCurve*> chosen;
  for (const auto& c : curves) {
    if (c.condition == condition) chosen.push_back(&c);
  }
  if (chosen.empty()) throw DataError("no curves for condition " + std::string(to_string(condition)));
  const auto& taus = chosen.front()->taus;
  MinErrorLag out;
  for (std::size_t t = 0; t < taus.size(); ++t) {
    std::vector<double> v;
    for (const auto* c : chosen) {
      if (c->taus != taus) throw DataError("curves use different tau grids");
      v.push_back(c->nrmse[t]);
    }
    out.median_curve.push_back(median(v));
  }
  std::size_t best = 0;
  for (std::size_t t = 1; t < taus.size(); ++t) {
    if (out.median_curve[t] < out.median_curve[best]) best = t;
  }
  out.tau_star = taus[best];
  out.nrmse_star = out.median_curve[best];
  return out;
}

inline MinErrorLag min_error_lag(const DiagnosticCurve& curve) { return min_error_lag({curve}, curve.condition); }

// --- modality importance ------------------------------------------------------------------

struct ImportanceOptions {
  std::vector<dataset::ModalitySlice> slices{dataset::kModalities.begin(), dataset::kModalities.end()};
  bool include_all = false;  // also permute every modality together
  std::size_t repeats = 20;
  std::uint64_t seed = 0;
};

struct ModalityScore {
  std::string modality;
  std::vector<double> permuted;  // per repeat
  double fi = 0.0;               // median over repeats of permuted - baseline
};

struct ImportanceReport {
  std::string site_id;
  Condition condition;
  double baseline = 0.0;
  std::vector<ModalityScore> modalities;
};

// Swaps whole columns [begin, end) of every window between samples.
inline void permute_columns(const std::vector<Array<double>>& windows, std::span<const dataset::ModalitySlice> slices,
                            const std::vector<std::size_t>& perm, std::vector<Array<double>>& out) {
  out = windows;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const Array<double>& src = windows[perm[i]];
    for (std::size_t r = 0; r < src.rows(); ++r) {
      for (const auto& sl : slices) {
        for (std::size_t j = sl.begin; j < sl.end; ++j) out[i](r, j) = src(r, j);
      }
    }
  }
}

inline std::vector<ImportanceReport> modality_importance(const Model& model, const EvalSet& e,
                                                         const ImportanceOptions& io, const EvalOptions& opt = {}) {
  if (io.repeats == 0) throw ConfigError("repeats must be >= 1");
  if (io.slices.empty()) throw ConfigError("no modalities to permute");
  for (std::size_t s = 0; s < e.sites(); ++s) {
    if (e.windows[s].size() < 2) throw DataError("site '" + e.site_ids[s] + "' has fewer than 2 samples to permute");
  }
  std::vector<std::vector<dataset::ModalitySlice>> groups;
  std::vector<std::string> names;
  for (const auto& sl : io.slices) {
    groups.push_back({sl});
    names.emplace_back(sl.name);
  }
  if (io.include_all) {
    groups.push_back(io.slices);
    names.push_back("all");
  }
  const auto baseline = predict_sets(model, e, opt);

  // cell = (site, modality, repeat); one permutation per (site, modality, repeat).
  const std::size_t g = groups.size();
  const std::size_t cells = e.sites() * g * io.repeats;
  std::vector<std::vector<double>> preds(cells);
  parallel_cells(model.params, model.scaling, model.context_length, opt.batch_size, opt.jobs, cells,
                 [&](std::size_t cell, models::Predictor& p) {
                   const std::size_t s = cell / (g * io.repeats);
                   const std::size_t m = (cell / io.repeats) % g, rep = cell % io.repeats;
                   Rng rng(derive_seed(io.seed, "importance." + e.site_ids[s] + "." + names[m], rep));
                   const auto perm = rng.permutation(e.windows[s].size());
                   std::vector<Array<double>> permuted;
                   permute_columns(e.windows[s], groups[m], perm, permuted);
                   preds[cell] = p.predict(permuted);
                 });

  std::vector<ImportanceReport> reports;
  for (std::size_t s = 0; s < e.sites(); ++s) {
    for (std::size_t c = 0; c < 4; ++c) {
      const auto base = masked_nrmse(baseline[s], e.observations[s], e.masks[s][c], opt.normalizer);
      if (!base) continue;
      ImportanceReport r{e.site_ids[s], kConditions[c], *base, {}};
      for (std::size_t m = 0; m < g; ++m) {
        ModalityScore ms{names[m], {}, 0.0};
        std::vector<double> diffs;
        for (std::size_t rep = 0; rep < io.repeats; ++rep) {
          const double v =
              *masked_nrmse(preds[(s * g + m) * io.repeats + rep], e.observations[s], e.masks[s][c], opt.normalizer);
          ms.permuted.push_back(v);
          diffs.push_back(v - *base);
        }
        ms.fi = median(diffs);
        r.modalities.push_back(std::move(ms));
      }
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

// Median FI across sites for one condition, per modality name.
inline std::map<std::string, double> median_importance(const std::vector<ImportanceReport>& reports,
                                                       Condition condition) {
  std::map<std::string, std::vector<double>> by;
  for (const auto& r : reports) {
    if (r.condition != condition) continue;
    for (const auto& m : r.modalities) by[m.modality].push_back(m.fi);
  }
  std::map<std::string, double> out;
  for (auto& [name, v] : by) out[name] = median(v);
  return out;
}

// --- output ------------------------------------------------------------------------------

inline std::string fmt(double v) { return dataset::format_number(v); }

inline std::string report_csv(const EvalReport& r) {
  std::string out = "site,condition,samples,nrmse\n";
  for (const auto& s : r.scores) {
    out += s.site_id + "," + std::string(to_string(s.condition)) + "," + std::to_string(s.samples) + "," +
           (s.nrmse ? fmt(*s.nrmse) : std::string()) + "\n";
  }
  return out;
}

inline nlohmann::ordered_json summary_json(const Summary& s) {
  nlohmann::ordered_json j;
  j["condition"] = std::string(to_string(s.condition));
  j["sites"] = s.sites;
  if (s.sites == 0) {
    j["status"] = "absent";
    return j;
  }
  j["median"] = s.median;
  j["q25"] = s.q25;
  j["q75"] = s.q75;
  j["q05"] = s.q05;
  j["q95"] = s.q95;
  return j;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["normalizer"] = std::string(to_string(r.normalizer));
  j["target"] = std::string(to_string(r.target));
  j["summaries"] = nlohmann::ordered_json::array();
  for (const auto& s : r.summaries) j["summaries"].push_back(summary_json(s));
  return j;
}

inline std::string memory_csv(const std::vector<DiagnosticCurve>& curves) {
  std::string out = "site,condition,tau,repeat,nrmse\n";
  for (const auto& c : curves) {
    const std::string prefix = c.site_id + "," + std::string(to_string(c.condition)) + ",";
    out += prefix + "baseline,," + fmt(c.baseline) + "\n";
    for (std::size_t t = 0; t < c.taus.size(); ++t) {
      for (std::size_t rep = 0; rep < c.repeats; ++rep) {
        out += prefix + std::to_string(c.taus[t]) + "," + std::to_string(rep) + "," + fmt(c.per_repeat[t][rep]) + "\n";
      }
    }
  }
  return out;
}

inline nlohmann::ordered_json memory_json(const std::vector<DiagnosticCurve>& curves, const MemoryOptions& mo,
                                          NrmseNormalizer normalizer) {
  nlohmann::ordered_json j;
  j["normalizer"] = std::string(to_string(normalizer));
  j["permutation"] = std::string(to_string(mo.mode));
  j["repeats"] = mo.repeats;
  j["taus"] = mo.taus;
  j["conditions"] = nlohmann::ordered_json::array();
  for (Condition c : kConditions) {
    nlohmann::ordered_json cj;
    cj["condition"] = std::string(to_string(c));
    bool any = false;
    for (const auto& curve : curves) any |= curve.condition == c;
    if (!any) {
      cj["status"] = "absent";
    } else {
      const MinErrorLag m = min_error_lag(curves, c);
      cj["tau_star"] = m.tau_star;
      cj["nrmse_star"] = m.nrmse_star;
      cj["median_curve"] = m.median_curve;
    }
    j["conditions"].push_back(cj);
  }
  return j;
}

inline std::string importance_csv(const std::vector<ImportanceReport>& reports) {
  std::string out = "site,condition,modality,repeat,baseline,permuted,delta\n";
  for (const auto& r : reports) {
    for (const auto& m : r.modalities) {
      for (std::size_t rep = 0; rep < m.permuted.size(); ++rep) {
        out += r.site_id + "," + std::string(to_string(r.condition)) + "," + m.modality + "," + std::to_string(rep) +
               "," + fmt(r.baseline) + "," + fmt(m.permuted[rep]) + "," + fmt(m.permuted[rep] - r.baseline) + "\n";
      }
    }
  }
  return out;
}

inline nlohmann::ordered_json importance_json(const std::vector<ImportanceReport>& reports,
                                              const ImportanceOptions& io, NrmseNormalizer normalizer) {
  nlohmann::ordered_json j;
  j["normalizer"] = std::string(to_string(normalizer));
  j["repeats"] = io.repeats;
  j["conditions"] = nlohmann::ordered_json::array();
  for (Condition c : kConditions) {
    nlohmann::ordered_json cj;
    cj["condition"] = std::string(to_string(c));
    const auto fi = median_importance(reports, c);
    if (fi.empty()) {
      cj["status"] = "absent";
    } else {
      nlohmann::ordered_json per = nlohmann::ordered_json::object();
      for (const auto& sl : io.slices) per[std::string(sl.name)] = fi.at(std::string(sl.name));
      if (io.include_all) per["all"] = fi.at("all");
      cj["median_fi"] = per;
      for (const auto& r : reports) {
        if (r.condition == c) {
          nlohmann::ordered_json site;
          site["site"] = r.site_id;
          site["baseline"] = r.baseline;
          for (const auto& m : r.modalities) site["fi"][m.modality] = m.fi;
          cj["sites"].push_back(site);
        }
      }
    }
    j["conditions"].push_back(cj);
  }
  return j;
}

}  // namespace gppcast::evaluation
