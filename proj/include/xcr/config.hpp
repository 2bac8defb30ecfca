#pragma once

// Experiment configuration: flat "section.key = value" text.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <type_traits>
#include <vector>

#include "xcr/corruptions.hpp"
#include "xcr/data_io.hpp"
#include "xcr/explainer.hpp"
#include "xcr/format.hpp"
#include "xcr/metrics.hpp"
#include "xcr/training.hpp"

namespace xcr {

enum class DataSource { Synthetic, Native, Idx, Cifar };

struct DatasetConfig {
  DataSource source = DataSource::Synthetic;
  std::string path;         // native / cifar file, or IDX images
  std::string labels_path;  // IDX labels
  std::size_t classes = 10;
  std::size_t n = 10000, height = 16, width = 16, channels = 1;
  double noise = 0.7;
  std::size_t informative_per_class = 4, layout_pool = 6;
  std::uint64_t layout_seed = 7;
  std::array<double, 3> split{0.8, 0.1, 0.1};

  PlantedSpec planted(std::size_t patch_size) const {
    PlantedSpec s;
    s.height = height, s.width = width, s.channels = channels, s.patch_size = patch_size;
    s.classes = classes, s.n = n, s.noise = noise;
    s.assign_layout(informative_per_class, layout_pool, layout_seed);
    return s;
  }
};

struct EvalConfig {
  std::size_t ece_bins = kDefaultEceBins;
  double sufficiency_s = 0.25;
  std::vector<CorruptionKind> corruptions{kAllCorruptions.begin(), kAllCorruptions.end()};
  std::vector<int> severities{1, 2, 3, 4, 5};
  bool apply_temperature = true;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  IBConfig ib;
  TrainConfig train;
  std::size_t explainer_epochs = 10;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{1};

  /// TrainConfig for one seed; the explainer variant uses its own epoch count.
  TrainConfig train_for(std::uint64_t seed, bool explainer = false) const {
    TrainConfig t = train;
    t.seed = seed;
    if (explainer) t.epochs = explainer_epochs;
    return t;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& s) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("not a valid number: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

inline const char* source_name(DataSource s) {
  switch (s) {
    case DataSource::Synthetic: return "synthetic";
    case DataSource::Native: return "native";
    case DataSource::Idx: return "idx";
    case DataSource::Cifar: return "cifar";
  }
  return "?";
}

inline DataSource parse_source(const std::string& s) {
  for (auto k : {DataSource::Synthetic, DataSource::Native, DataSource::Idx, DataSource::Cifar})
    if (s == source_name(k)) return k;
  throw ConfigError("unknown dataset source '" + s + "'");
}

template <class T>
std::string join_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, CorruptionKind>) out += corruption_name(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

/// Key/value pairs in file order. Duplicate keys keep the last value.
using ConfigEntries = std::map<std::string, std::string>;

/// Reads "key = value" lines; '#' starts a comment. Keys under "manifest."
/// are recorded provenance and are ignored by apply_config.
inline ConfigEntries parse_config_text(const std::string& text) {
  ConfigEntries out;
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> bad;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos || detail::trim(line.substr(0, eq)).empty()) {
      bad.push_back("line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    out[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  if (!bad.empty()) {
    std::string msg = "config syntax error";
    for (auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
  return out;
}

/// Applies entries on top of `cfg` and validates the result. Every unknown
/// key, unparsable value and violated constraint is collected into one error.
inline ExperimentConfig apply_config(ExperimentConfig cfg, const ConfigEntries& entries) {
  std::vector<std::string> errors;
  auto& d = cfg.dataset;
  auto& ib = cfg.ib;
  auto& tr = cfg.train;
  auto& ev = cfg.eval;
  for (const auto& [key, value] : entries) {
    try {
      using detail::parse_number;
      if (key.rfind("manifest.", 0) == 0) continue;
      else if (key == "dataset.source") d.source = detail::parse_source(value);
      else if (key == "dataset.path") d.path = value;
      else if (key == "dataset.labels_path") d.labels_path = value;
      else if (key == "dataset.classes") d.classes = parse_number<std::size_t>(value);
      else if (key == "dataset.n") d.n = parse_number<std::size_t>(value);
      else if (key == "dataset.height") d.height = parse_number<std::size_t>(value);
      else if (key == "dataset.width") d.width = parse_number<std::size_t>(value);
      else if (key == "dataset.channels") d.channels = parse_number<std::size_t>(value);
      else if (key == "dataset.noise") d.noise = parse_number<double>(value);
      else if (key == "dataset.informative_per_class") d.informative_per_class = parse_number<std::size_t>(value);
      else if (key == "dataset.layout_pool") d.layout_pool = parse_number<std::size_t>(value);
      else if (key == "dataset.layout_seed") d.layout_seed = parse_number<std::uint64_t>(value);
      else if (key == "dataset.split") {
        auto parts = detail::split_list(value);
        if (parts.size() != 3) throw ConfigError("expected three fractions train,val,test");
        for (std::size_t i = 0; i < 3; ++i) d.split[i] = parse_number<double>(parts[i]);
      }
      else if (key == "ib.k") ib.k = parse_number<std::size_t>(value);
      else if (key == "ib.beta") ib.beta = parse_number<double>(value);
      else if (key == "ib.tau") ib.tau = parse_number<double>(value);
      else if (key == "ib.patch_size") ib.patch_size = parse_number<std::size_t>(value);
      else if (key == "ib.num_samples") ib.num_samples = parse_number<std::size_t>(value);
      else if (key == "ib.selection_mode") ib.mode = parse_mode(value);
      else if (key == "train.learning_rate") tr.learning_rate = parse_number<double>(value);
      else if (key == "train.momentum") tr.momentum = parse_number<double>(value);
      else if (key == "train.epochs") tr.epochs = parse_number<std::size_t>(value);
      else if (key == "train.explainer_epochs") cfg.explainer_epochs = parse_number<std::size_t>(value);
      else if (key == "train.batch_size") tr.batch_size = parse_number<std::size_t>(value);
      else if (key == "train.weight_decay") tr.weight_decay = parse_number<double>(value);
      else if (key == "train.counterfactual_weight") tr.counterfactual_weight = parse_number<double>(value);
      else if (key == "eval.ece_bins") ev.ece_bins = parse_number<std::size_t>(value);
      else if (key == "eval.sufficiency_s") ev.sufficiency_s = parse_number<double>(value);
      else if (key == "eval.apply_temperature") ev.apply_temperature = detail::parse_bool(value);
      else if (key == "eval.corruptions") {
        ev.corruptions.clear();
        if (value == "all") ev.corruptions.assign(kAllCorruptions.begin(), kAllCorruptions.end());
        else if (value != "none")
          for (auto& s : detail::split_list(value)) ev.corruptions.push_back(parse_corruption(s));
      }
      else if (key == "eval.severities") {
        ev.severities.clear();
        for (auto& s : detail::split_list(value)) ev.severities.push_back(parse_number<int>(s));
      }
      else if (key == "seeds") {
        cfg.seeds.clear();
        for (auto& s : detail::split_list(value)) cfg.seeds.push_back(parse_number<std::uint64_t>(s));
      }
      else throw ConfigError("unknown key");
    } catch (const std::exception& e) {
      errors.push_back(key + ": " + e.what());
    }
  }

  auto check = [&](bool ok, const std::string& key, const std::string& msg) {
    if (!ok) errors.push_back(key + ": " + msg);
  };
  check(d.source == DataSource::Synthetic || !d.path.empty(), "dataset.path", "required for non-synthetic sources");
  check(d.source != DataSource::Idx || !d.labels_path.empty(), "dataset.labels_path", "required for idx");
  check(d.classes >= 2, "dataset.classes", "need at least 2 classes");
  check(d.split[0] >= 0 && d.split[1] >= 0 && d.split[2] >= 0 &&
            std::fabs(d.split[0] + d.split[1] + d.split[2] - 1.0) <= 1e-9,
        "dataset.split", "fractions must be non-negative and sum to 1");
  check(d.split[1] > 0, "dataset.split", "validation fraction must be positive (temperature fitting)");
  if (d.source == DataSource::Synthetic) {
    check(d.n >= d.classes, "dataset.n", "must be at least the class count");
    check(d.noise >= 0.0 && d.noise <= 1.0, "dataset.noise", "must be in [0,1]");
    check(d.informative_per_class >= 1 && d.informative_per_class <= d.layout_pool, "dataset.informative_per_class",
          "must be in [1, dataset.layout_pool]");
    check(ib.patch_size > 0 && d.height % ib.patch_size == 0 && d.width % ib.patch_size == 0, "ib.patch_size",
          "must divide dataset.height and dataset.width");
    check(d.height % 4 == 0 && d.width % 4 == 0, "dataset.height", "height and width must be multiples of 4");
  }
  check(ib.patch_size > 0 && (ib.patch_size & (ib.patch_size - 1)) == 0, "ib.patch_size", "must be a power of two");
  check(ib.k >= 1, "ib.k", "must be at least 1");
  if (d.source == DataSource::Synthetic && ib.patch_size > 0 && d.height % ib.patch_size == 0 &&
      d.width % ib.patch_size == 0) {
    std::size_t dd = (d.height / ib.patch_size) * (d.width / ib.patch_size);
    check(ib.k <= dd, "ib.k", "exceeds the patch count " + std::to_string(dd));
    check(d.layout_pool <= dd, "dataset.layout_pool", "exceeds the patch count " + std::to_string(dd));
  }
  check(ib.tau > 0.0, "ib.tau", "must be positive");
  check(ib.beta >= 0.0, "ib.beta", "must be non-negative");
  check(ib.num_samples >= 1, "ib.num_samples", "must be at least 1");
  check(tr.learning_rate >= 0.0, "train.learning_rate", "must be non-negative");
  check(tr.momentum >= 0.0 && tr.momentum < 1.0, "train.momentum", "must be in [0,1)");
  check(tr.epochs >= 1, "train.epochs", "must be at least 1");
  check(cfg.explainer_epochs >= 1, "train.explainer_epochs", "must be at least 1");
  check(tr.batch_size >= 1, "train.batch_size", "must be at least 1");
  check(tr.weight_decay >= 0.0, "train.weight_decay", "must be non-negative");
  check(tr.counterfactual_weight >= 0.0 && tr.counterfactual_weight <= 1.0, "train.counterfactual_weight",
        "must be in [0,1]");
  check(ev.ece_bins >= 1, "eval.ece_bins", "must be at least 1");
  check(ev.sufficiency_s > 0.0 && ev.sufficiency_s <= 1.0, "eval.sufficiency_s", "must be in (0,1]");
  for (int s : ev.severities) check(s >= 1 && s <= 5, "eval.severities", "severity " + std::to_string(s) + " not in 1..5");
  check(!cfg.seeds.empty(), "seeds", "need at least one seed");

  if (!errors.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(errors.size()) + " problem" +
                      (errors.size() == 1 ? "" : "s") + "):";
    for (auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& text, const ConfigEntries& overrides = {}) {
  ConfigEntries e = parse_config_text(text);
  for (const auto& [k, v] : overrides) e[k] = v;
  return apply_config(ExperimentConfig{}, e);
}

/// Every key with its resolved value, sorted; parse_config(to_text(c)) == c.
inline ConfigEntries to_entries(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  ConfigEntries e;
  e["dataset.source"] = detail::source_name(d.source);
  e["dataset.path"] = d.path;
  e["dataset.labels_path"] = d.labels_path;
  e["dataset.classes"] = std::to_string(d.classes);
  e["dataset.n"] = std::to_string(d.n);
  e["dataset.height"] = std::to_string(d.height);
  e["dataset.width"] = std::to_string(d.width);
  e["dataset.channels"] = std::to_string(d.channels);
  e["dataset.noise"] = format_double(d.noise);
  e["dataset.informative_per_class"] = std::to_string(d.informative_per_class);
  e["dataset.layout_pool"] = std::to_string(d.layout_pool);
  e["dataset.layout_seed"] = std::to_string(d.layout_seed);
  e["dataset.split"] = format_double(d.split[0]) + "," + format_double(d.split[1]) + "," + format_double(d.split[2]);
  e["ib.k"] = std::to_string(c.ib.k);
  e["ib.beta"] = format_double(c.ib.beta);
  e["ib.tau"] = format_double(c.ib.tau);
  e["ib.patch_size"] = std::to_string(c.ib.patch_size);
  e["ib.num_samples"] = std::to_string(c.ib.num_samples);
  e["ib.selection_mode"] = mode_name(c.ib.mode);
  e["train.learning_rate"] = format_double(c.train.learning_rate);
  e["train.momentum"] = format_double(c.train.momentum);
  e["train.epochs"] = std::to_string(c.train.epochs);
  e["train.explainer_epochs"] = std::to_string(c.explainer_epochs);
  e["train.batch_size"] = std::to_string(c.train.batch_size);
  e["train.weight_decay"] = format_double(c.train.weight_decay);
  e["train.counterfactual_weight"] = format_double(c.train.counterfactual_weight);
  e["eval.ece_bins"] = std::to_string(c.eval.ece_bins);
  e["eval.sufficiency_s"] = format_double(c.eval.sufficiency_s);
  e["eval.corruptions"] = c.eval.corruptions.empty() ? "none" : detail::join_list(c.eval.corruptions);
  e["eval.severities"] = detail::join_list(c.eval.severities);
  e["eval.apply_temperature"] = c.eval.apply_temperature ? "true" : "false";
  e["seeds"] = detail::join_list(c.seeds);
  return e;
}

inline std::string to_text(const ConfigEntries& e) {
  std::string out;
  for (const auto& [k, v] : e) out += k + " = " + v + "\n";
  return out;
}

inline std::string to_text(const ExperimentConfig& c) { return to_text(to_entries(c)); }

}  // namespace xcr
