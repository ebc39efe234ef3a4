#pragma once

#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pointlap/data_io.hpp"
#include "pointlap/errors.hpp"
#include "pointlap/networks.hpp"
#include "pointlap/task.hpp"
#include "pointlap/training.hpp"

namespace pointlap {

// One experiment end to end: the synthetic data recipe, the network
// architecture, and the optimization schedule. Serialized as a flat
// `key = value` text file; every key is listed by the `gencfg` command.
struct ExperimentConfig {
  SyntheticTaskSpec data;
  NetworkConfig net;
  TrainConfig train;

  // Fills derived fields (task propagation, class counts) and validates.
  ExperimentConfig resolved() const {
    ExperimentConfig out = *this;
    out.net.task = out.data.task;
    if (out.net.num_classes == 0) {
      out.net.num_classes =
          out.data.task == Task::kClassification ? out.data.shapes.size() : 2;
    }
    if (out.data.task == Task::kSegmentation && out.net.num_categories == 0) {
      out.net.num_categories = 1;
    }
    out.data.validate();
    out.net.validate();
    out.train.validate();
    return out;
  }
};

namespace config_detail {

inline std::string bool_to_string(bool v) { return v ? "true" : "false"; }

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError("expected a boolean (true/false), got '" + v + "'");
}

inline double parse_double(const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') throw ParseError("expected a number, got '" + v + "'");
  return d;
}

inline std::size_t parse_size(const std::string& v) {
  const double d = parse_double(v);
  if (d < 0 || d != std::floor(d)) throw ParseError("expected a nonnegative integer, got '" + v + "'");
  return static_cast<std::size_t>(d);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      out.push_back(io_detail::trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  const std::string last = io_detail::trim(cur);
  if (!last.empty() || !out.empty()) out.push_back(last);
  return out;
}

template <typename T, std::size_t N>
std::string join_array(const std::array<T, N>& values,
                       const std::function<std::string(const T&)>& one) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) out += ",";
    out += one(values[i]);
  }
  return out;
}

struct Key {
  std::string comment;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline const std::vector<std::pair<std::string, Key>>& key_registry() {
  static const std::vector<std::pair<std::string, Key>> keys = [] {
    std::vector<std::pair<std::string, Key>> k;
    auto add = [&](const std::string& name, const std::string& comment,
                   std::function<std::string(const ExperimentConfig&)> get,
                   std::function<void(ExperimentConfig&, const std::string&)> set) {
      k.push_back({name, Key{comment, std::move(get), std::move(set)}});
    };

    // data
    add("task", "classification | segmentation",
        [](const ExperimentConfig& c) { return std::string(task_name(c.data.task)); },
        [](ExperimentConfig& c, const std::string& v) { c.data.task = task_from_name(v); });
    add("shapes", "classification shape families (sphere,cube,torus,cylinder,capsule)",
        [](const ExperimentConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.data.shapes.size(); ++i) {
            if (i) out += ",";
            out += shape_name(c.data.shapes[i]);
          }
          return out;
        },
        [](ExperimentConfig& c, const std::string& v) {
          c.data.shapes.clear();
          for (const auto& s : split_list(v)) c.data.shapes.push_back(shape_from_name(s));
        });
    add("points_per_cloud", "points sampled per synthetic cloud",
        [](const ExperimentConfig& c) { return std::to_string(c.data.points_per_cloud); },
        [](ExperimentConfig& c, const std::string& v) { c.data.points_per_cloud = parse_size(v); });
    add("noise_sigma", "gaussian surface noise",
        [](const ExperimentConfig& c) { return std::to_string(c.data.noise_sigma); },
        [](ExperimentConfig& c, const std::string& v) { c.data.noise_sigma = parse_double(v); });
    add("train_count", "training clouds",
        [](const ExperimentConfig& c) { return std::to_string(c.data.train_count); },
        [](ExperimentConfig& c, const std::string& v) { c.data.train_count = parse_size(v); });
    add("test_count", "test clouds",
        [](const ExperimentConfig& c) { return std::to_string(c.data.test_count); },
        [](ExperimentConfig& c, const std::string& v) { c.data.test_count = parse_size(v); });
    add("data_seed", "dataset generation seed",
        [](const ExperimentConfig& c) { return std::to_string(c.data.seed); },
        [](ExperimentConfig& c, const std::string& v) { c.data.seed = parse_size(v); });

    // network
    add("stage_widths", "channel width per encoder stage",
        [](const ExperimentConfig& c) {
          return join_array<std::size_t, 5>(c.net.stage_widths,
                                            [](const std::size_t& v) { return std::to_string(v); });
        },
        [](ExperimentConfig& c, const std::string& v) {
          auto parts = split_list(v);
          if (parts.size() != kStageCount) throw ParseError("stage_widths needs 5 entries");
          for (std::size_t i = 0; i < kStageCount; ++i) c.net.stage_widths[i] = parse_size(parts[i]);
        });
    add("stage_points", "point count per encoder stage (strictly decreasing)",
        [](const ExperimentConfig& c) {
          return join_array<std::size_t, 5>(c.net.stage_points,
                                            [](const std::size_t& v) { return std::to_string(v); });
        },
        [](ExperimentConfig& c, const std::string& v) {
          auto parts = split_list(v);
          if (parts.size() != kStageCount) throw ParseError("stage_points needs 5 entries");
          for (std::size_t i = 0; i < kStageCount; ++i) c.net.stage_points[i] = parse_size(parts[i]);
        });
    add("blocks_per_stage", "bottleneck blocks per stage",
        [](const ExperimentConfig& c) { return std::to_string(c.net.blocks_per_stage); },
        [](ExperimentConfig& c, const std::string& v) { c.net.blocks_per_stage = parse_size(v); });
    add("lu_per_stage", "laplacian units per stage (0 disables them)",
        [](const ExperimentConfig& c) { return std::to_string(c.net.lu_per_stage); },
        [](ExperimentConfig& c, const std::string& v) { c.net.lu_per_stage = parse_size(v); });
    add("k_conv", "convolution neighborhood size",
        [](const ExperimentConfig& c) { return std::to_string(c.net.k_conv); },
        [](ExperimentConfig& c, const std::string& v) { c.net.k_conv = parse_size(v); });
    add("k_lu", "laplacian unit neighborhood size",
        [](const ExperimentConfig& c) { return std::to_string(c.net.k_lu); },
        [](ExperimentConfig& c, const std::string& v) { c.net.k_lu = parse_size(v); });
    add("num_classes", "output classes (0 = derive from the task)",
        [](const ExperimentConfig& c) { return std::to_string(c.net.num_classes); },
        [](ExperimentConfig& c, const std::string& v) { c.net.num_classes = parse_size(v); });
    add("num_categories", "one-hot conditioning width (segmentation; 0 = derive)",
        [](const ExperimentConfig& c) { return std::to_string(c.net.num_categories); },
        [](ExperimentConfig& c, const std::string& v) { c.net.num_categories = parse_size(v); });
    add("lu_use_m", "enable the learned linear map M",
        [](const ExperimentConfig& c) { return bool_to_string(c.net.lu_use_m); },
        [](ExperimentConfig& c, const std::string& v) { c.net.lu_use_m = parse_bool(v); });
    add("lu_use_t", "enable the nonlinear transform T (batch norm + relu)",
        [](const ExperimentConfig& c) { return bool_to_string(c.net.lu_use_t); },
        [](ExperimentConfig& c, const std::string& v) { c.net.lu_use_t = parse_bool(v); });
    add("lu_fusion", "local/global fusion: add | concat | mul | none",
        [](const ExperimentConfig& c) { return std::string(fusion_name(c.net.lu_fusion)); },
        [](ExperimentConfig& c, const std::string& v) { c.net.lu_fusion = fusion_from_name(v); });
    add("lu_stages", "per-stage unit mask, e.g. 1,1,1,1,1",
        [](const ExperimentConfig& c) {
          return join_array<bool, 5>(c.net.lu_stages,
                                     [](const bool& v) { return std::string(v ? "1" : "0"); });
        },
        [](ExperimentConfig& c, const std::string& v) {
          auto parts = split_list(v);
          if (parts.size() != kStageCount) throw ParseError("lu_stages needs 5 entries");
          for (std::size_t i = 0; i < kStageCount; ++i) c.net.lu_stages[i] = parse_bool(parts[i]);
        });
    add("bottleneck_ratio", "channel reduction inside each block",
        [](const ExperimentConfig& c) { return std::to_string(c.net.bottleneck_ratio); },
        [](ExperimentConfig& c, const std::string& v) { c.net.bottleneck_ratio = parse_size(v); });
    add("kernel_points", "kernel points per convolution",
        [](const ExperimentConfig& c) { return std::to_string(c.net.kernel_points); },
        [](ExperimentConfig& c, const std::string& v) { c.net.kernel_points = parse_size(v); });
    add("aug_hidden_layers", "hidden layers in the convolution's feature MLP",
        [](const ExperimentConfig& c) { return std::to_string(c.net.aug_hidden_layers); },
        [](ExperimentConfig& c, const std::string& v) { c.net.aug_hidden_layers = parse_size(v); });

    // training
    add("lr", "initial learning rate",
        [](const ExperimentConfig& c) { return std::to_string(c.train.lr); },
        [](ExperimentConfig& c, const std::string& v) { c.train.lr = parse_double(v); });
    add("momentum", "sgd momentum",
        [](const ExperimentConfig& c) { return std::to_string(c.train.momentum); },
        [](ExperimentConfig& c, const std::string& v) { c.train.momentum = parse_double(v); });
    add("decay_epochs", "epochs at which lr divides by decay_factor",
        [](const ExperimentConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.train.decay_epochs.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(c.train.decay_epochs[i]);
          }
          return out;
        },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.decay_epochs.clear();
          for (const auto& s : split_list(v)) {
            if (!s.empty()) c.train.decay_epochs.push_back(parse_size(s));
          }
        });
    add("decay_factor", "learning-rate division factor",
        [](const ExperimentConfig& c) { return std::to_string(c.train.decay_factor); },
        [](ExperimentConfig& c, const std::string& v) { c.train.decay_factor = parse_double(v); });
    add("epochs", "training epochs",
        [](const ExperimentConfig& c) { return std::to_string(c.train.epochs); },
        [](ExperimentConfig& c, const std::string& v) { c.train.epochs = parse_size(v); });
    add("batch_size", "clouds per mini-batch",
        [](const ExperimentConfig& c) { return std::to_string(c.train.batch_size); },
        [](ExperimentConfig& c, const std::string& v) { c.train.batch_size = parse_size(v); });
    add("seed", "training seed (shuffling, init, augmentation)",
        [](const ExperimentConfig& c) { return std::to_string(c.train.seed); },
        [](ExperimentConfig& c, const std::string& v) { c.train.seed = parse_size(v); });
    add("voting_rounds", "augmented passes averaged at final evaluation",
        [](const ExperimentConfig& c) { return std::to_string(c.train.voting_rounds); },
        [](ExperimentConfig& c, const std::string& v) { c.train.voting_rounds = parse_size(v); });

    // augmentation
    add("aug_rotation", "random rotation about the gravity axis",
        [](const ExperimentConfig& c) { return bool_to_string(c.train.augment.rotation); },
        [](ExperimentConfig& c, const std::string& v) { c.train.augment.rotation = parse_bool(v); });
    add("aug_translation", "random translation",
        [](const ExperimentConfig& c) { return bool_to_string(c.train.augment.translation); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.augment.translation = parse_bool(v);
        });
    add("aug_scale", "random anisotropic scaling",
        [](const ExperimentConfig& c) { return bool_to_string(c.train.augment.aniso_scale); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.augment.aniso_scale = parse_bool(v);
        });
    add("aug_color_jitter", "per-point color jitter (colored inputs)",
        [](const ExperimentConfig& c) { return bool_to_string(c.train.augment.color_jitter); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.augment.color_jitter = parse_bool(v);
        });
    add("aug_color_shift", "per-cloud color translation (colored inputs)",
        [](const ExperimentConfig& c) { return bool_to_string(c.train.augment.color_shift); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.augment.color_shift = parse_bool(v);
        });
    add("translation_bound", "translation range, normalized units",
        [](const ExperimentConfig& c) { return std::to_string(c.train.augment.translation_bound); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.augment.translation_bound = parse_double(v);
        });
    add("scale_min", "anisotropic scale lower bound",
        [](const ExperimentConfig& c) { return std::to_string(c.train.augment.scale_min); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.augment.scale_min = parse_double(v);
        });
    add("scale_max", "anisotropic scale upper bound",
        [](const ExperimentConfig& c) { return std::to_string(c.train.augment.scale_max); },
        [](ExperimentConfig& c, const std::string& v) {
          c.train.augment.scale_max = parse_double(v);
        });
    return k;
  }();
  return keys;
}

}  // namespace config_detail

inline void apply_override(ExperimentConfig& cfg, const std::string& key,
                           const std::string& value) {
  for (const auto& [name, entry] : config_detail::key_registry()) {
    if (name == key) {
      entry.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key: " + key);
}

// Parses one `key=value` token (the --overrides form).
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override must look like key=value, got '" + assignment + "'");
  }
  apply_override(cfg, io_detail::trim(assignment.substr(0, eq)),
                 io_detail::trim(assignment.substr(eq + 1)));
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  for (const auto& [name, entry] : config_detail::key_registry()) {
    out << "# " << entry.comment << "\n";
    out << name << " = " << entry.get(cfg) << "\n";
  }
  return out.str();
}

inline ExperimentConfig parse_config(std::istream& in, const std::string& origin) {
  ExperimentConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = io_detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ParseError(origin + ": line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = io_detail::trim(t.substr(0, eq));
    const std::string value = io_detail::trim(t.substr(eq + 1));
    try {
      apply_override(cfg, key, value);
    } catch (const ParseError& e) {
      throw ParseError(origin + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  return parse_config(f, path);
}

}  // namespace pointlap
