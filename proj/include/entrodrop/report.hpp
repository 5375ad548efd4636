#pragma once

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "entrodrop/checksum.hpp"
#include "entrodrop/importance.hpp"

namespace entrodrop {

inline constexpr const char* kToolVersion = "0.1.0";

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(s);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

}  // namespace detail

/// Inverse of describe(): parses "bucket bins=40 max_tokens=4096 sample_seed=0".
inline EstimatorConfig parse_estimator_description(const std::string& text) {
  std::istringstream in(text);
  std::string name, token;
  in >> name;
  std::size_t bins = 40, k = 25;
  double alpha = 2.0;
  SamplePolicy policy;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw InputError("malformed estimator parameter '" + token + "'");
    const std::string key = token.substr(0, eq), value = token.substr(eq + 1);
    try {
      if (key == "bins") bins = std::stoull(value);
      else if (key == "k") k = std::stoull(value);
      else if (key == "alpha") alpha = std::stod(value);
      else if (key == "max_tokens") policy.max_tokens = std::stoull(value);
      else if (key == "sample_seed") policy.seed = std::stoull(value);
      else throw InputError("unknown estimator parameter '" + key + "'");
    } catch (const std::logic_error&) {
      throw InputError("invalid value for estimator parameter '" + key + "'");
    }
  }
  EstimatorConfig config;
  if (name == "bucket") config = EstimatorConfig::bucket(bins);
  else if (name == "knn") config = EstimatorConfig::knn(k);
  else if (name == "renyi") config = EstimatorConfig::renyi(alpha, bins);
  else throw InputError("unknown estimator '" + name + "'");
  config.sample_policy = policy;
  return config;
}

// ---------------------------------------------------------------------------
// Profile CSV
//
//   # estimator: <describe()>
//   # granularity: layer|attention|mlp
//   # criterion: entropy
//   # s_start: <block>
//   # sample_size: <tokens>
//   block_index,position,h_nats,delta_h_nats,score,rank,pruned
//
// One row per snapshot in trace order. block_index is the 1-based layer of the
// snapshot (0 for the embedding output). The block columns are filled on the
// row holding the output snapshot of that block and left empty elsewhere; rank
// is the 1-based position in the plan's ranking, empty for protected blocks.
// ---------------------------------------------------------------------------

inline void write_profile_csv(std::ostream& out, const EntropyProfile& profile, const PruningPlan& plan) {
  out << "# estimator: " << describe(profile.estimator) << '\n';
  out << "# granularity: " << to_string(profile.granularity) << '\n';
  out << "# criterion: " << to_string(plan.criterion) << '\n';
  out << "# s_start: " << plan.s_start << '\n';
  out << "# sample_size: " << profile.sample_size << '\n';
  out << "block_index,position,h_nats,delta_h_nats,score,rank,pruned\n";
  for (std::size_t i = 0; i < profile.h_values.size(); ++i) {
    const SnapshotLabel label = expected_label(i);
    const std::size_t layer = i == 0 ? 0 : label.layer_index + 1;
    out << layer << ',' << to_string(label.position) << ',' << detail::format_double(profile.h_values[i]);
    if (i > 0 && block_output(profile.granularity, layer) == i) {
      const double dh = profile.delta_h[layer - 1];
      out << ',' << detail::format_double(dh) << ',' << detail::format_double(dh) << ',';
      const auto it = std::find(plan.ranked.begin(), plan.ranked.end(), layer);
      if (it != plan.ranked.end()) out << (it - plan.ranked.begin()) + 1;
      const bool pruned = std::find(plan.prune_set.begin(), plan.prune_set.end(), layer) != plan.prune_set.end();
      out << ',' << (pruned ? 1 : 0) << '\n';
    } else {
      out << ",,,,\n";
    }
  }
}

/// Reads a profile CSV back. Entropies round-trip exactly.
inline EntropyProfile read_profile_csv(std::istream& in) {
  EntropyProfile profile;
  bool have_estimator = false, have_granularity = false, have_header = false;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::pair<std::size_t, double>> deltas;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      const std::string key = detail::trim(line.substr(1, colon - 1));
      const std::string value = detail::trim(line.substr(colon + 1));
      if (key == "estimator") {
        profile.estimator = parse_estimator_description(value);
        have_estimator = true;
      } else if (key == "granularity") {
        profile.granularity = parse_granularity(value);
        have_granularity = true;
      } else if (key == "sample_size") {
        profile.sample_size = std::stoull(value);
      }
      continue;
    }
    if (!have_header) {
      if (line != "block_index,position,h_nats,delta_h_nats,score,rank,pruned")
        throw InputError("profile CSV line " + std::to_string(line_no) + ": unexpected column header");
      have_header = true;
      continue;
    }
    const auto fields = detail::split(line, ',');
    if (fields.size() != 7) throw InputError("profile CSV line " + std::to_string(line_no) + ": expected 7 fields");
    try {
      profile.h_values.push_back(std::stod(fields[2]));
      if (!fields[3].empty()) deltas.emplace_back(std::stoull(fields[0]), std::stod(fields[3]));
    } catch (const std::logic_error&) {
      throw InputError("profile CSV line " + std::to_string(line_no) + ": malformed number");
    }
  }
  if (!have_estimator || !have_granularity || !have_header)
    throw InputError("profile CSV is missing its estimator, granularity or column header");
  if (profile.h_values.size() < 3 || profile.h_values.size() % 2 == 0)
    throw InputError("profile CSV holds " + std::to_string(profile.h_values.size()) +
                     " snapshot rows; expected 2L+1 with L >= 1");
  profile.block_count = (profile.h_values.size() - 1) / 2;
  profile.delta_h.assign(profile.block_count, 0.0);
  profile = with_granularity(std::move(profile), profile.granularity);
  if (deltas.size() != profile.block_count)
    throw InputError("profile CSV has " + std::to_string(deltas.size()) + " block rows for " +
                     std::to_string(profile.block_count) + " blocks");
  return profile;
}

// ---------------------------------------------------------------------------
// Plan JSON
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json plan_to_json(const PruningPlan& plan) {
  nlohmann::ordered_json j;
  j["granularity"] = to_string(plan.granularity);
  j["criterion"] = to_string(plan.criterion);
  j["estimator"] = plan.estimator;
  j["s_start"] = plan.s_start;
  j["k"] = plan.k;
  j["block_count"] = plan.block_count;
  j["ranked"] = plan.ranked;
  j["ranked_scores"] = plan.ranked_scores;
  j["prune_set"] = plan.prune_set;
  return j;
}

inline PruningPlan plan_from_json(const nlohmann::json& j) {
  PruningPlan plan;
  try {
    plan.granularity = parse_granularity(j.at("granularity").get<std::string>());
    plan.criterion = parse_criterion(j.at("criterion").get<std::string>());
    plan.estimator = j.value("estimator", std::string{});
    plan.s_start = j.at("s_start").get<std::size_t>();
    plan.k = j.at("k").get<std::size_t>();
    plan.ranked = j.at("ranked").get<std::vector<std::size_t>>();
    plan.prune_set = j.at("prune_set").get<std::vector<std::size_t>>();
    plan.ranked_scores = j.value("ranked_scores", std::vector<double>{});
    plan.block_count = j.value("block_count", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed plan JSON: ") + e.what());
  } catch (const ContractViolation& e) {
    throw InputError(std::string("malformed plan JSON: ") + e.what());
  }
  if (plan.block_count == 0) {
    for (auto b : plan.ranked) plan.block_count = std::max(plan.block_count, b);
  }
  if (plan.prune_set.size() != plan.k) throw InputError("plan JSON: prune_set size differs from k");
  for (std::size_t i = 0; i < plan.k; ++i) {
    if (i >= plan.ranked.size() || plan.prune_set[i] != plan.ranked[i])
      throw InputError("plan JSON: prune_set is not a prefix of ranked");
  }
  for (auto b : plan.ranked) {
    if (b < plan.s_start || b < 1 || b > plan.block_count)
      throw InputError("plan JSON: ranked block " + std::to_string(b) + " is outside the eligible range");
  }
  return plan;
}

inline void save_plan(const PruningPlan& plan, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  out << plan_to_json(plan).dump(2) << '\n';
  if (!out) throw IoError("failed writing plan '" + path + "'", 0);
}

inline PruningPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan '" + path + "'", 0);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("plan '" + path + "' is not valid JSON: " + e.what());
  }
  return plan_from_json(j);
}

// ---------------------------------------------------------------------------
// Sweep tables
// ---------------------------------------------------------------------------

/// One row per grid entry: estimator,s_start,ranked (space separated),error.
inline void write_sweep_csv(std::ostream& out, const SweepResult& result) {
  out << "estimator,s_start,ranked,error\n";
  for (const auto& e : result.entries) {
    out << describe(e.config) << ',';
    if (e.plan) {
      out << e.plan->s_start << ',';
      for (std::size_t i = 0; i < e.plan->ranked.size(); ++i) out << (i ? " " : "") << e.plan->ranked[i];
    } else {
      out << ',';
    }
    std::string err = e.error;
    std::replace(err.begin(), err.end(), ',', ';');
    out << ',' << err << '\n';
  }
}

/// Square Spearman matrix with the estimator descriptions as row and column labels.
inline void write_correlation_csv(std::ostream& out, const SweepResult& result) {
  out << "estimator";
  for (const auto& e : result.entries) out << ',' << describe(e.config);
  out << '\n';
  for (std::size_t i = 0; i < result.entries.size(); ++i) {
    out << describe(result.entries[i].config);
    for (double v : result.correlation[i]) out << ',' << (std::isnan(v) ? std::string("nan") : detail::format_double(v));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct FileRecord {
  std::string path;
  std::uint32_t crc = 0;
  std::uint64_t bytes = 0;
};

inline FileRecord record_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for checksumming", 0);
  std::vector<char> buffer{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return {path, crc32(std::as_bytes(std::span(buffer))), buffer.size()};
}

struct RunManifest {
  std::string subcommand;
  std::vector<std::string> argv;
  nlohmann::ordered_json parameters = nlohmann::ordered_json::object();
  std::vector<FileRecord> inputs;
  std::vector<FileRecord> outputs;
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0.0;

  nlohmann::ordered_json to_json() const {
    auto files = [](const std::vector<FileRecord>& records) {
      auto arr = nlohmann::ordered_json::array();
      for (const auto& r : records) {
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", r.crc);
        arr.push_back({{"path", r.path}, {"crc32", crc}, {"bytes", r.bytes}});
      }
      return arr;
    };
    nlohmann::ordered_json j;
    j["tool"] = "entrodrop";
    j["version"] = kToolVersion;
    j["subcommand"] = subcommand;
    j["argv"] = argv;
    j["seed"] = seed;
    j["parameters"] = parameters;
    j["inputs"] = files(inputs);
    j["outputs"] = files(outputs);
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    out << to_json().dump(2) << '\n';
    if (!out) throw IoError("failed writing manifest '" + path + "'", 0);
  }
};

}  // namespace entrodrop
