#pragma once

// Experiment driver: config parsing, replication loop, CSV persistence and
// aggregation.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "survhte/bart.hpp"
#include "survhte/common.hpp"
#include "survhte/csf.hpp"
#include "survhte/dgp.hpp"
#include "survhte/metrics.hpp"
#include "survhte/propensity.hpp"

namespace survhte::harness {

/// Invalid configuration or unusable output location.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Profile { Desk, Paper };

inline Profile parse_profile(const std::string& s) {
  if (s == "desk") return Profile::Desk;
  if (s == "paper") return Profile::Paper;
  throw ConfigError("unknown profile '" + s + "' (expected desk or paper)");
}

inline std::string to_string(Profile p) { return p == Profile::Desk ? "desk" : "paper"; }

struct SpecEntry {
  Family family = Family::Hu;
  int dgp = 1;
  bool null_hte = false;

  std::string family_label() const { return survhte::to_string(family) + (null_hte ? "_null" : ""); }
};

struct ExperimentConfig {
  Profile profile = Profile::Desk;
  std::vector<SpecEntry> specs;
  std::vector<std::string> estimators{"bart", "csf"};
  std::vector<std::string> variants{"default", "improved"};
  std::size_t reps = 10;
  std::size_t n = 1000;
  std::uint64_t seed_base = 1;
  std::string output_dir = "results";
  std::size_t workers = 1;
  bool details = true;
  BartHyperparams bart;
  CsfHyperparams csf;

  static ExperimentConfig for_profile(Profile p) {
    ExperimentConfig c;
    c.profile = p;
    if (p == Profile::Desk) {
      c.reps = 10;
      c.bart.iterations = 1500;
      c.bart.burn_in = 300;
      c.csf.num_trees = 1000;
    } else {
      c.reps = 50;
      c.bart.iterations = 2500;
      c.bart.burn_in = 500;
      c.csf.num_trees = 2000;
    }
    return c;
  }

  BartHyperparams bart_for(const std::string& variant) const {
    BartHyperparams h = bart;
    if (variant == "improved") h.k = 1.0;
    return h;
  }

  CsfHyperparams csf_for(const std::string& variant) const {
    CsfHyperparams h = csf;
    if (variant == "improved") h.min_node_size = 2;
    return h;
  }

  void validate() const {
    if (reps < 1) throw ConfigError("reps must be >= 1");
    if (n < 1) throw ConfigError("n must be >= 1");
    if (specs.empty()) throw ConfigError("no [spec] blocks");
    if (estimators.empty()) throw ConfigError("estimators must be nonempty");
    if (variants.empty()) throw ConfigError("variants must be nonempty");
    for (const auto& e : estimators)
      if (e != "bart" && e != "csf") throw ConfigError("unknown estimator '" + e + "'");
    for (const auto& v : variants)
      if (v != "default" && v != "improved") throw ConfigError("unknown variant '" + v + "'");
    try {
      for (const auto& s : specs) DgpSpec::make(s.family, s.dgp, n, 0, s.null_hte);
      bart.validate();
      csf.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_uint(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("invalid integer for '" + key + "': " + v);
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const std::exception&) {
    throw ConfigError("invalid number for '" + key + "': " + v);
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw ConfigError("invalid boolean for '" + key + "': " + v);
}

inline void set_global(ExperimentConfig& c, const std::string& key, const std::string& v) {
  auto& b = c.bart;
  auto& f = c.csf;
  if (key == "reps") c.reps = parse_uint<std::size_t>(key, v);
  else if (key == "n") c.n = parse_uint<std::size_t>(key, v);
  else if (key == "seed_base") c.seed_base = parse_uint<std::uint64_t>(key, v);
  else if (key == "output_dir") c.output_dir = v;
  else if (key == "workers") c.workers = parse_uint<std::size_t>(key, v);
  else if (key == "details") c.details = parse_bool(key, v);
  else if (key == "estimators") c.estimators = split_list(v);
  else if (key == "variants") c.variants = split_list(v);
  else if (key == "bart.num_trees") b.num_trees = parse_uint<std::size_t>(key, v);
  else if (key == "bart.k") b.k = parse_real(key, v);
  else if (key == "bart.alpha") b.alpha = parse_real(key, v);
  else if (key == "bart.beta") b.beta = parse_real(key, v);
  else if (key == "bart.nu") b.nu = parse_real(key, v);
  else if (key == "bart.q") b.q = parse_real(key, v);
  else if (key == "bart.iterations") b.iterations = parse_uint<std::size_t>(key, v);
  else if (key == "bart.burn_in") b.burn_in = parse_uint<std::size_t>(key, v);
  else if (key == "bart.thin") b.thin = parse_uint<std::size_t>(key, v);
  else if (key == "bart.num_cuts") b.num_cuts = parse_uint<std::size_t>(key, v);
  else if (key == "bart.min_leaf_size") b.min_leaf_size = parse_uint<std::size_t>(key, v);
  else if (key == "csf.num_trees") f.num_trees = parse_uint<std::size_t>(key, v);
  else if (key == "csf.min_node_size") f.min_node_size = parse_uint<std::size_t>(key, v);
  else if (key == "csf.subsample_fraction") f.subsample_fraction = parse_real(key, v);
  else if (key == "csf.honesty_fraction") f.honesty_fraction = parse_real(key, v);
  else if (key == "csf.mtry") f.mtry = parse_uint<std::size_t>(key, v);
  else if (key == "csf.bag_size") f.bag_size = parse_uint<std::size_t>(key, v);
  else if (key == "csf.horizon_quantile") f.horizon_quantile = parse_real(key, v);
  else if (key == "csf.censor_trees") f.censor_trees = parse_uint<std::size_t>(key, v);
  else if (key == "csf.nuisance_trees") f.nuisance_trees = parse_uint<std::size_t>(key, v);
  else if (key == "csf.folds") f.folds = parse_uint<std::size_t>(key, v);
  else throw ConfigError("unknown key '" + key + "'");
}

struct PendingSpec {
  std::optional<Family> family;
  std::vector<int> dgps;
  bool null_hte = false;
  int line = 0;
};

inline void flush_spec(ExperimentConfig& c, const PendingSpec& s) {
  if (!s.family) throw ConfigError("[spec] block at line " + std::to_string(s.line) + " has no family");
  if (s.dgps.empty()) throw ConfigError("[spec] block at line " + std::to_string(s.line) + " has no dgp");
  for (int d : s.dgps) c.specs.push_back({*s.family, d, s.null_hte});
}

}  // namespace detail

/// Parses `key = value` lines and `[spec]` blocks on top of a profile.
/// A spec's `dgp` may list several indices ("1, 2, 3, 4").
inline ExperimentConfig parse_config(std::istream& in, Profile profile) {
  ExperimentConfig c = ExperimentConfig::for_profile(profile);
  std::optional<detail::PendingSpec> spec;
  std::string raw;
  for (int line = 1; std::getline(in, raw); ++line) {
    const auto hash = raw.find('#');
    const std::string text = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    if (text == "[spec]") {
      if (spec) detail::flush_spec(c, *spec);
      spec = detail::PendingSpec{};
      spec->line = line;
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line) + ": expected key = value");
    const std::string key = detail::trim(text.substr(0, eq)), value = detail::trim(text.substr(eq + 1));
    try {
      if (spec) {
        if (key == "family") {
          spec->family = parse_family(value);
        } else if (key == "dgp") {
          spec->dgps.clear();
          for (const auto& d : detail::split_list(value)) spec->dgps.push_back(detail::parse_uint<int>(key, d));
        } else if (key == "null") {
          spec->null_hte = detail::parse_bool(key, value);
        } else {
          throw ConfigError("unknown key '" + key + "' in [spec] block");
        }
      } else {
        detail::set_global(c, key, value);
      }
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("line " + std::to_string(line) + ": " + e.what());
    }
  }
  if (spec) detail::flush_spec(c, *spec);
  return c;
}

inline ExperimentConfig load_config(const std::string& path, Profile profile) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  return parse_config(in, profile);
}

/// Every setting, in the config syntax, so the file re-parses to the same run.
inline void write_resolved_config(const ExperimentConfig& c, std::ostream& os) {
  const auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
    return s;
  };
  const auto& b = c.bart;
  const auto& f = c.csf;
  os << "# profile: " << to_string(c.profile) << '\n'
     << "reps = " << c.reps << '\n'
     << "n = " << c.n << '\n'
     << "seed_base = " << c.seed_base << '\n'
     << "output_dir = " << c.output_dir << '\n'
     << "workers = " << c.workers << '\n'
     << "details = " << (c.details ? "true" : "false") << '\n'
     << "estimators = " << join(c.estimators) << '\n'
     << "variants = " << join(c.variants) << '\n'
     << "bart.num_trees = " << b.num_trees << '\n'
     << "bart.k = " << format_double(b.k) << '\n'
     << "bart.alpha = " << format_double(b.alpha) << '\n'
     << "bart.beta = " << format_double(b.beta) << '\n'
     << "bart.nu = " << format_double(b.nu) << '\n'
     << "bart.q = " << format_double(b.q) << '\n'
     << "bart.iterations = " << b.iterations << '\n'
     << "bart.burn_in = " << b.burn_in << '\n'
     << "bart.thin = " << b.thin << '\n'
     << "bart.num_cuts = " << b.num_cuts << '\n'
     << "bart.min_leaf_size = " << b.min_leaf_size << '\n'
     << "csf.num_trees = " << f.num_trees << '\n'
     << "csf.min_node_size = " << f.min_node_size << '\n'
     << "csf.subsample_fraction = " << format_double(f.subsample_fraction) << '\n'
     << "csf.honesty_fraction = " << format_double(f.honesty_fraction) << '\n'
     << "csf.mtry = " << f.mtry << '\n'
     << "csf.bag_size = " << f.bag_size << '\n'
     << "csf.horizon_quantile = " << format_double(f.horizon_quantile) << '\n'
     << "csf.censor_trees = " << f.censor_trees << '\n'
     << "csf.nuisance_trees = " << f.nuisance_trees << '\n'
     << "csf.folds = " << f.folds << '\n';
  for (const auto& s : c.specs)
    os << "\n[spec]\nfamily = " << survhte::to_string(s.family) << "\ndgp = " << s.dgp
       << "\nnull = " << (s.null_hte ? "true" : "false") << '\n';
}

/// seed_base xor a hash of (family, dgp, null, rep).
inline std::uint64_t replication_seed(std::uint64_t seed_base, const SpecEntry& s, std::size_t rep) {
  std::uint64_t h = derive_seed(0x73757276687465ULL, static_cast<std::uint64_t>(s.family));
  h = derive_seed(h, static_cast<std::uint64_t>(s.dgp));
  h = derive_seed(h, s.null_hte ? 1 : 0);
  h = derive_seed(h, rep);
  return seed_base ^ h;
}

struct DetailRow {
  std::size_t rep = 0;
  std::string family;
  int dgp = 0;
  std::string estimator;
  std::string variant;
  std::size_t id = 0;
  double theta_true = 0.0;
  double theta_hat = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  bool flag_hte = false;
};

struct Failure {
  std::string family;
  int dgp = 0;
  std::size_t rep = 0;
  std::string estimator;
  std::string variant;
  std::string message;
};

struct RunOutput {
  std::vector<ReplicationResult> results;
  std::vector<DetailRow> details;
  std::vector<Failure> failures;
  std::size_t attempted = 0;
};

inline const std::vector<std::string>& results_columns() {
  static const std::vector<std::string> cols{"family", "dgp",  "estimator", "variant",  "rep",
                                             "seed",   "n",    "bias",      "rmse",     "misclass",
                                             "hl",     "coverage", "null_flag_prop", "censor_rate"};
  return cols;
}

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"bias", "rmse", "misclass", "hl", "coverage", "null_flag_prop",
                                             "censor_rate"};
  return cols;
}

namespace detail {

struct Fitted {
  std::vector<double> theta_hat;
  std::vector<Interval> ci;
  std::vector<char> flags;
  double misclass = 0.0;
  double null_flag_prop = 0.0;
};

inline Fitted fit_estimator(const ExperimentConfig& c, const std::string& estimator, const std::string& variant,
                            const SurvivalDataset& d, const Eigen::MatrixXd& X_aug, std::span<const double> ehat,
                            std::uint64_t seed) {
  Fitted out;
  if (estimator == "bart") {
    const auto post = fit_bart(X_aug, d.A, d.Y, d.delta, c.bart_for(variant), seed);
    out.theta_hat = post.posterior_mean();
    out.ci = credible_interval(post);
    const auto D = posterior_d_statistics(post);
    out.flags.resize(D.size());
    for (std::size_t i = 0; i < D.size(); ++i) out.flags[i] = d_flagged(D[i]);
    out.misclass = misclass_bart(post, d.theta_true);
    out.null_flag_prop = null_flags_bart(post);
  } else {
    const auto est = csf_estimate_ite(X_aug, d.A, d.Y, d.delta, ehat, c.csf_for(variant), seed);
    out.theta_hat = est.theta_hat;
    out.ci = est.ci;
    out.flags = csf_flags(est);
    out.misclass = misclass_csf(est.theta_hat, d.theta_true);
    out.null_flag_prop = null_flags_csf(est);
  }
  return out;
}

inline std::tuple<std::string, int, std::string, std::string, std::size_t> sort_key(const ReplicationResult& r) {
  return {r.family, r.dgp_index, r.estimator, r.hyper_variant, r.rep_index};
}

}  // namespace detail

/// Runs every (spec, rep, estimator, variant) cell in memory. Failed cells are
/// recorded, not scored. Output order is independent of `workers`.
inline RunOutput execute(const ExperimentConfig& c, std::ostream* log = nullptr) {
  c.validate();
  struct Unit {
    SpecEntry spec;
    std::size_t rep;
  };
  std::vector<Unit> units;
  for (const auto& s : c.specs)
    for (std::size_t r = 0; r < c.reps; ++r) units.push_back({s, r});

  std::vector<RunOutput> parts(units.size());
  std::mutex log_mutex;
  parallel_for(units.size(), c.workers, [&](std::size_t u) {
    const auto& [spec, rep] = units[u];
    auto& part = parts[u];
    const std::uint64_t seed = replication_seed(c.seed_base, spec, rep);
    const std::string family = spec.family_label();
    const auto fail = [&](const std::string& est, const std::string& var, const std::string& msg) {
      part.failures.push_back({family, spec.dgp, rep, est, var, msg});
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << "replication failed: " << family << " dgp" << spec.dgp << " rep " << rep << ' ' << est << ' ' << var
             << ": " << msg << '\n';
      }
    };
    part.attempted = c.estimators.size() * c.variants.size();

    SurvivalDataset data;
    PropensityFit prop;
    Eigen::MatrixXd X_aug;
    try {
      data = generate(DgpSpec::make(spec.family, spec.dgp, c.n, seed, spec.null_hte));
      prop = fit_propensity(data.X, data.A, derive_seed(seed, 1), 1);
      X_aug = augment(data.X, prop.ehat);
    } catch (const std::exception& e) {
      for (const auto& est : c.estimators)
        for (const auto& var : c.variants) fail(est, var, e.what());
      return;
    }

    for (std::size_t ei = 0; ei < c.estimators.size(); ++ei) {
      for (std::size_t vi = 0; vi < c.variants.size(); ++vi) {
        const auto& est = c.estimators[ei];
        const auto& var = c.variants[vi];
        try {
          const std::uint64_t fit_seed = derive_seed(seed, 2 + (est == "csf" ? 2 : 0) + (var == "improved" ? 1 : 0));
          const auto fit = detail::fit_estimator(c, est, var, data, X_aug, prop.ehat, fit_seed);
          ReplicationResult r;
          r.family = family;
          r.dgp_index = spec.dgp;
          r.estimator = est;
          r.hyper_variant = var;
          r.rep_index = rep;
          r.seed = seed;
          r.n = c.n;
          const auto br = bias_rmse(fit.theta_hat, data.theta_true);
          r.bias = br.bias;
          r.rmse = br.rmse;
          r.misclass = fit.misclass;
          r.hl = hosmer_lemeshow(fit.theta_hat, data.theta_true);
          r.coverage = coverage(fit.ci, data.theta_true);
          r.null_flag_prop = fit.null_flag_prop;
          r.censor_rate = data.censor_rate();
          part.results.push_back(r);
          if (c.details) {
            for (std::size_t i = 0; i < data.size(); ++i)
              part.details.push_back({rep, family, spec.dgp, est, var, i + 1, data.theta_true[i], fit.theta_hat[i],
                                      fit.ci[i].lo, fit.ci[i].hi, fit.flags[i] != 0});
          }
        } catch (const std::exception& e) {
          fail(est, var, e.what());
        }
      }
    }
  });

  RunOutput out;
  for (auto& p : parts) {
    out.attempted += p.attempted;
    out.results.insert(out.results.end(), p.results.begin(), p.results.end());
    out.details.insert(out.details.end(), std::make_move_iterator(p.details.begin()),
                       std::make_move_iterator(p.details.end()));
    out.failures.insert(out.failures.end(), p.failures.begin(), p.failures.end());
  }
  std::stable_sort(out.results.begin(), out.results.end(),
                   [](const auto& a, const auto& b) { return detail::sort_key(a) < detail::sort_key(b); });
  std::stable_sort(out.details.begin(), out.details.end(), [](const DetailRow& a, const DetailRow& b) {
    return std::tie(a.family, a.dgp, a.estimator, a.variant, a.rep, a.id) <
           std::tie(b.family, b.dgp, b.estimator, b.variant, b.rep, b.id);
  });
  return out;
}

inline void write_results_csv(const std::vector<ReplicationResult>& rows, std::ostream& os) {
  const auto& cols = results_columns();
  for (std::size_t k = 0; k < cols.size(); ++k) os << (k ? "," : "") << cols[k];
  os << '\n';
  for (const auto& r : rows) {
    os << r.family << ',' << r.dgp_index << ',' << r.estimator << ',' << r.hyper_variant << ',' << r.rep_index << ','
       << r.seed << ',' << r.n << ',' << format_double(r.bias) << ',' << format_double(r.rmse) << ','
       << format_double(r.misclass) << ',' << format_double(r.hl) << ',' << format_double(r.coverage) << ','
       << format_double(r.null_flag_prop) << ',' << format_double(r.censor_rate) << '\n';
  }
}

inline void write_details_csv(const std::vector<DetailRow>& rows, std::ostream& os) {
  os << "rep,family,dgp,estimator,variant,id,theta_true,theta_hat,lo,hi,flag_hte\n";
  for (const auto& d : rows) {
    os << d.rep << ',' << d.family << ',' << d.dgp << ',' << d.estimator << ',' << d.variant << ',' << d.id << ','
       << format_double(d.theta_true) << ',' << format_double(d.theta_hat) << ',' << format_double(d.lo) << ','
       << format_double(d.hi) << ',' << (d.flag_hte ? 1 : 0) << '\n';
  }
}

struct RunSummary {
  std::size_t rows = 0;
  std::size_t failures = 0;
  std::size_t attempted = 0;
  bool all_failed() const { return attempted > 0 && rows == 0; }
};

/// Full run with persistence into `config.output_dir`: resolved_config.txt,
/// results.csv, details.csv (when enabled) and failures.log. The directory is
/// checked for writability before any fitting.
inline RunSummary run(const ExperimentConfig& c, std::ostream* log = nullptr) {
  c.validate();
  namespace fs = std::filesystem;
  const fs::path dir(c.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  {
    std::ofstream resolved(dir / "resolved_config.txt");
    if (ec || !resolved) throw ConfigError("output directory '" + c.output_dir + "' is not writable");
    write_resolved_config(c, resolved);
    if (!resolved) throw ConfigError("output directory '" + c.output_dir + "' is not writable");
  }

  const auto out = execute(c, log);
  const auto write = [&](const std::string& name, const auto& writer) {
    std::ofstream os(dir / name, std::ios::binary);
    writer(os);
    if (!os) throw std::runtime_error("failed writing " + (dir / name).string());
  };
  write("results.csv", [&](std::ostream& os) { write_results_csv(out.results, os); });
  if (c.details) write("details.csv", [&](std::ostream& os) { write_details_csv(out.details, os); });
  write("failures.log", [&](std::ostream& os) {
    for (const auto& f : out.failures)
      os << f.family << ",dgp" << f.dgp << ",rep " << f.rep << ',' << f.estimator << ',' << f.variant << ": "
         << f.message << '\n';
  });
  return {out.results.size(), out.failures.size(), out.attempted};
}

struct AggregateRow {
  std::string family;
  std::string dgp;
  std::string estimator;
  std::string variant;
  std::size_t reps_used = 0;
  std::vector<double> mean;  // metric_columns() order
  std::vector<double> se;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Groups results rows by (family, dgp, estimator, variant) and reports the
/// mean and Monte-Carlo SE (sd / sqrt(reps)) of each metric.
inline std::vector<AggregateRow> aggregate(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("results file is empty");
  const auto cols = detail::split_csv_line(header);
  const auto& expected = results_columns();
  for (std::size_t k = 0; k < std::max(cols.size(), expected.size()); ++k) {
    if (k >= cols.size()) throw std::runtime_error("schema mismatch: missing column '" + expected[k] + "'");
    if (k >= expected.size() || cols[k] != expected[k])
      throw std::runtime_error("schema mismatch: unexpected column '" + cols[k] + "'");
  }

  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  std::map<Key, std::vector<std::vector<double>>> groups;
  std::string line;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != expected.size())
      throw std::runtime_error("line " + std::to_string(lineno) + ": expected " + std::to_string(expected.size()) +
                               " fields");
    auto& metrics = groups[{cells[0], cells[1], cells[2], cells[3]}];
    if (metrics.empty()) metrics.resize(metric_columns().size());
    for (std::size_t m = 0; m < metric_columns().size(); ++m) {
      try {
        metrics[m].push_back(parse_double(cells[7 + m]));
      } catch (const std::exception&) {
        throw std::runtime_error("line " + std::to_string(lineno) + ": invalid value in column '" +
                                 metric_columns()[m] + "'");
      }
    }
  }
  if (groups.empty()) throw std::runtime_error("results file has no rows");

  std::vector<AggregateRow> out;
  for (auto& [key, metrics] : groups) {
    AggregateRow row{std::get<0>(key), std::get<1>(key), std::get<2>(key), std::get<3>(key), metrics[0].size(), {}, {}};
    for (auto& values : metrics) {
      std::sort(values.begin(), values.end());
      row.mean.push_back(mean(values));
      row.se.push_back(values.size() > 1 ? std::sqrt(sample_variance(values) / static_cast<double>(values.size()))
                                         : 0.0);
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline void write_aggregate_csv(const std::vector<AggregateRow>& rows, std::ostream& os) {
  os << "family,dgp,estimator,variant,reps_used";
  for (const auto& m : metric_columns()) os << ',' << m << "_mean," << m << "_se";
  os << '\n';
  for (const auto& r : rows) {
    os << r.family << ',' << r.dgp << ',' << r.estimator << ',' << r.variant << ',' << r.reps_used;
    for (std::size_t m = 0; m < r.mean.size(); ++m) os << ',' << format_double(r.mean[m]) << ',' << format_double(r.se[m]);
    os << '\n';
  }
}

inline constexpr std::uint64_t kProbeSeed = 20250202ULL;

/// The frozen probe covariate rows used by the truth oracle command.
inline Eigen::MatrixXd probe_points(Family family, std::size_t count = 10) {
  return gen_covariates(family, count, kProbeSeed);
}

struct OracleRow {
  std::size_t probe = 0;
  double analytic = 0.0;
  double monte_carlo = 0.0;
  double se = 0.0;
};

inline std::vector<OracleRow> truth_oracle_table(const DgpSpec& spec, std::size_t n_mc, std::uint64_t seed,
                                                 std::size_t probes = 10) {
  const auto X = probe_points(spec.family, probes);
  std::vector<OracleRow> rows;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const Eigen::RowVectorXd r = X.row(i);
    const std::vector<double> x(r.data(), r.data() + r.size());
    const auto mc = true_theta_oracle(spec, x, n_mc, derive_seed(seed, static_cast<std::uint64_t>(i)));
    rows.push_back({static_cast<std::size_t>(i + 1), analytic_theta(spec, x), mc.value, mc.se});
  }
  return rows;
}

}  // namespace survhte::harness
