#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcarve/data.hpp"
#include "deepcarve/hash.hpp"
#include "deepcarve/nn.hpp"
#include "deepcarve/train.hpp"

namespace deepcarve {

/// Raised for malformed or unknown configuration; the CLI maps it to a usage error.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` file. '#' starts a comment; blank lines are ignored.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text, const std::string& origin = "<config>") {
    FlatConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
      cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static FlatConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("empty config key");
    values_[key] = value;
  }

  /// Applies a "key=value" override.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, _] : values_)
      if (!known.count(k)) {
        std::string list;
        for (const auto& n : known) list += (list.empty() ? "" : ", ") + n;
        throw ConfigError("unknown config key '" + k + "' (known keys: " + list + ")");
      }
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const auto& v = values_.at(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const auto& v = values_.at(key);
    try {
      if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
      std::size_t used = 0;
      const auto n = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
  }

  /// Sorted `key = value` lines; the frozen copy written into run directories.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Training settings --------------------------------------------------------------

inline const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys{
      "arch",           "learning_rate",  "momentum",       "weight_decay", "lr_decay_every", "lr_decay_factor",
      "batch_size",     "max_epochs",     "warmup_epochs",  "carve_period", "gamma",          "positive_label",
      "negative_label", "seed",           "loss",           "checkpoint_every"};
  return keys;
}

/// Fills every training key with its default so the frozen copy is complete.
inline FlatConfig resolve_train_config(FlatConfig cfg) {
  cfg.require_known(train_config_keys());
  const TrainConfig d;
  const auto dflt = [&](const char* key, const std::string& v) {
    if (!cfg.has(key)) cfg.set(key, v);
  };
  const auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  dflt("arch", "mini-alexnet");
  dflt("learning_rate", num(d.learning_rate));
  dflt("momentum", num(d.momentum));
  dflt("weight_decay", num(d.weight_decay));
  dflt("lr_decay_every", std::to_string(d.lr_decay_every));
  dflt("lr_decay_factor", num(d.lr_decay_factor));
  dflt("batch_size", std::to_string(d.batch_size));
  dflt("max_epochs", std::to_string(d.max_epochs));
  dflt("warmup_epochs", "auto");
  dflt("carve_period", std::to_string(d.carve_period));
  dflt("gamma", num(d.gamma));
  dflt("positive_label", num(d.encoding.positive));
  dflt("negative_label", num(d.encoding.negative));
  dflt("seed", std::to_string(d.seed));
  dflt("loss", to_string(d.loss));
  dflt("checkpoint_every", std::to_string(d.checkpoint_every));
  return cfg;
}

inline TrainConfig train_config_from(const FlatConfig& raw) {
  const FlatConfig cfg = resolve_train_config(raw);
  TrainConfig c;
  c.learning_rate = cfg.get_double("learning_rate", c.learning_rate);
  c.momentum = cfg.get_double("momentum", c.momentum);
  c.weight_decay = cfg.get_double("weight_decay", c.weight_decay);
  c.lr_decay_every = cfg.get_uint("lr_decay_every", c.lr_decay_every);
  c.lr_decay_factor = cfg.get_double("lr_decay_factor", c.lr_decay_factor);
  c.batch_size = cfg.get_uint("batch_size", c.batch_size);
  c.max_epochs = cfg.get_uint("max_epochs", c.max_epochs);
  if (cfg.get("warmup_epochs", "auto") != "auto") c.warmup_epochs = cfg.get_uint("warmup_epochs", 0);
  c.carve_period = cfg.get_uint("carve_period", c.carve_period);
  c.gamma = cfg.get_double("gamma", c.gamma);
  c.encoding.positive = cfg.get_double("positive_label", c.encoding.positive);
  c.encoding.negative = cfg.get_double("negative_label", c.encoding.negative);
  c.seed = cfg.get_uint("seed", c.seed);
  c.checkpoint_every = cfg.get_uint("checkpoint_every", c.checkpoint_every);
  try {
    c.loss = parse_loss_head(cfg.get("loss", "deep_carve"));
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline NetworkSpec network_spec_from(const FlatConfig& raw, const Shape& input, std::size_t num_classes) {
  const FlatConfig cfg = resolve_train_config(raw);
  try {
    return parse_architecture(cfg.get("arch", "mini-alexnet"), input, num_classes);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("bad arch: ") + e.what());
  }
}

/// Separate stream for weight initialisation so it does not alias the
/// shuffling/dropout stream seeded by the same value.
inline Rng init_rng(std::uint64_t seed) { return Rng(Fnv1a{}.str("weight-init").u64(seed).value()); }

// Synthetic dataset settings -------------------------------------------------------

inline const std::set<std::string>& synth_config_keys() {
  static const std::set<std::string> keys{"attributes", "names",       "channels",        "image_size",
                                          "cooccurrence", "amplitude", "noise",           "overlap",
                                          "seed",       "train_per_class", "val_per_class", "test_per_class"};
  return keys;
}

/// `cooccurrence` is either one number (every off-diagonal q) or M rows of M
/// numbers separated by ';'.
inline std::pair<SynthSpec, SplitCounts> synth_spec_from(const FlatConfig& cfg) {
  cfg.require_known(synth_config_keys());
  SynthSpec s;
  SplitCounts counts;
  s.num_attributes = cfg.get_uint("attributes", s.num_attributes);
  s.channels = cfg.get_uint("channels", s.channels);
  s.image_size = cfg.get_uint("image_size", s.image_size);
  s.amplitude = cfg.get_double("amplitude", s.amplitude);
  s.noise = cfg.get_double("noise", s.noise);
  s.overlap = cfg.get_double("overlap", s.overlap);
  s.seed = cfg.get_uint("seed", s.seed);
  counts.train_per_class = cfg.get_uint("train_per_class", counts.train_per_class);
  counts.val_per_class = cfg.get_uint("val_per_class", counts.val_per_class);
  counts.test_per_class = cfg.get_uint("test_per_class", counts.test_per_class);
  if (cfg.has("names")) {
    std::stringstream ss(cfg.get("names", ""));
    std::string n;
    while (std::getline(ss, n, ',')) s.names.push_back(detail::trim(n));
  }
  if (cfg.has("cooccurrence")) {
    const std::string text = cfg.get("cooccurrence", "");
    const std::size_t m = s.num_attributes;
    if (text.find(';') == std::string::npos && text.find(' ') == std::string::npos) {
      const double q = cfg.get_double("cooccurrence", 0.4);
      s.cooccurrence = Tensor::fill({m, m}, q);
      for (std::size_t i = 0; i < m; ++i) s.cooccurrence.at(i, i) = 1.0;
    } else {
      std::vector<double> vals;
      std::stringstream ss(text);
      std::string row;
      while (std::getline(ss, row, ';')) {
        std::istringstream rs(row);
        double v;
        while (rs >> v) vals.push_back(v);
        if (!rs.eof()) throw ConfigError("bad number in cooccurrence row '" + row + "'");
      }
      if (vals.size() != m * m) throw ConfigError("cooccurrence needs " + std::to_string(m * m) + " values");
      s.cooccurrence = Tensor({m, m}, vals);
    }
  }
  try {
    s.resolve();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return {s, counts};
}

/// Fully resolved generator settings, for the frozen copy next to a dataset.
inline FlatConfig synth_config_dump(const SynthSpec& s, const SplitCounts& counts) {
  const auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  FlatConfig cfg;
  cfg.set("attributes", std::to_string(s.num_attributes));
  std::string names, co;
  for (const auto& n : s.names) names += (names.empty() ? "" : ",") + n;
  for (std::size_t i = 0; i < s.num_attributes; ++i) {
    if (i) co += "; ";
    for (std::size_t j = 0; j < s.num_attributes; ++j) co += (j ? " " : "") + num(s.cooccurrence.at(i, j));
  }
  cfg.set("names", names);
  cfg.set("cooccurrence", co);
  cfg.set("channels", std::to_string(s.channels));
  cfg.set("image_size", std::to_string(s.image_size));
  cfg.set("amplitude", num(s.amplitude));
  cfg.set("noise", num(s.noise));
  cfg.set("overlap", num(s.overlap));
  cfg.set("seed", std::to_string(s.seed));
  cfg.set("train_per_class", std::to_string(counts.train_per_class));
  cfg.set("val_per_class", std::to_string(counts.val_per_class));
  cfg.set("test_per_class", std::to_string(counts.test_per_class));
  return cfg;
}

}  // namespace deepcarve
