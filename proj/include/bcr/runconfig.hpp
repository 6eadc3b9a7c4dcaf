#pragma once

#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bcr/pipeline.hpp"

// Flat `key = value` run configuration. One schema drives parsing, flag
// generation, help text and the resolved-config dump, so they cannot drift
// apart. Unknown keys are rejected, never ignored.

namespace bcr {

struct RunConfig {
  DetectorConfig det;
  double box_ratio = 0.05;
  int pretrain_epochs = 24;
  int finetune_epochs = 24;
  double pseudo_weight = 1.0;

  PipelineConfig pipeline() const {
    return {det, box_ratio, pretrain_epochs, finetune_epochs, pseudo_weight};
  }
};

struct ConfigKey {
  std::string name;
  std::string description;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline long long parse_int_value(const std::string& v, const std::string& key) {
  size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw std::invalid_argument("key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double_value(const std::string& v, const std::string& key) {
  size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw std::invalid_argument("key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool_value(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct SchemaBuilder {
  std::vector<ConfigKey> keys;

  void add_int(const std::string& name, const std::string& desc,
               std::function<int&(RunConfig&)> ref) {
    keys.push_back(
        {name, desc,
         [ref](const RunConfig& c) {
           return std::to_string(ref(const_cast<RunConfig&>(c)));
         },
         [ref, name](RunConfig& c, const std::string& v) {
           const long long x = parse_int_value(v, name);
           if (x < INT32_MIN || x > INT32_MAX) {
             throw std::invalid_argument("key '" + name + "': out of range");
           }
           ref(c) = static_cast<int>(x);
         }});
  }

  void add_double(const std::string& name, const std::string& desc,
                  std::function<double&(RunConfig&)> ref) {
    keys.push_back({name, desc,
                    [ref](const RunConfig& c) {
                      return format_double(ref(const_cast<RunConfig&>(c)));
                    },
                    [ref, name](RunConfig& c, const std::string& v) {
                      ref(c) = parse_double_value(v, name);
                    }});
  }

  void add_bool(const std::string& name, const std::string& desc,
                std::function<bool&(RunConfig&)> ref) {
    keys.push_back({name, desc,
                    [ref](const RunConfig& c) {
                      return ref(const_cast<RunConfig&>(c)) ? "true" : "false";
                    },
                    [ref, name](RunConfig& c, const std::string& v) {
                      ref(c) = parse_bool_value(v, name);
                    }});
  }

  void add_u64(const std::string& name, const std::string& desc,
               std::function<uint64_t&(RunConfig&)> ref) {
    keys.push_back({name, desc,
                    [ref](const RunConfig& c) {
                      return std::to_string(ref(const_cast<RunConfig&>(c)));
                    },
                    [ref, name](RunConfig& c, const std::string& v) {
                      size_t used = 0;
                      uint64_t out = 0;
                      try {
                        out = std::stoull(v, &used);
                      } catch (const std::exception&) {
                        used = 0;
                      }
                      if (used != v.size() || v.empty()) {
                        throw std::invalid_argument("key '" + name +
                                                    "': expected an unsigned integer");
                      }
                      ref(c) = out;
                    }});
  }
};

}  // namespace detail

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    using R = RunConfig;
    detail::SchemaBuilder b;
    auto i = [](int R::DetectorConfig_t) {};  // placeholder removed below
    (void)i;
    b.add_int("image_h", "image height in pixels, multiple of 32",
              [](R& c) -> int& { return c.det.image_h; });
    b.add_int("image_w", "image width in pixels, multiple of 32",
              [](R& c) -> int& { return c.det.image_w; });
    b.add_int("num_classes", "number of foreground classes",
              [](R& c) -> int& { return c.det.num_classes; });
    b.add_int("channels", "feature pyramid width",
              [](R& c) -> int& { return c.det.channels; });
    b.add_int("embed_dim", "contrastive embedding width",
              [](R& c) -> int& { return c.det.embed_dim; });
    b.add_int("roi_hidden", "hidden width of the box head",
              [](R& c) -> int& { return c.det.roi_hidden; });
    b.add_double("tau", "contrastive temperature",
                 [](R& c) -> double& { return c.det.tau; });
    b.add_double("gamma", "weight of the contrastive term in the total loss",
                 [](R& c) -> double& { return c.det.gamma; });
    b.add_int("proposals_train", "per-level proposal cap during training",
              [](R& c) -> int& { return c.det.proposals_train; });
    b.add_int("proposals_test", "per-level proposal cap at inference",
              [](R& c) -> int& { return c.det.proposals_test; });
    b.add_int("post_nms_keep", "proposal cap after cross-level suppression",
              [](R& c) -> int& { return c.det.post_nms_keep; });
    b.add_int("rpn_sample", "objectness rows sampled per image for the loss",
              [](R& c) -> int& { return c.det.rpn_sample; });
    b.add_int("rpn_contrast_sample", "embedding rows sampled per level for contrast",
              [](R& c) -> int& { return c.det.rpn_contrast_sample; });
    b.add_double("infer_score_thresh", "minimum class score kept at inference",
                 [](R& c) -> double& { return c.det.infer_score_thresh; });
    b.add_double("infer_nms_iou", "per-class suppression threshold at inference",
                 [](R& c) -> double& { return c.det.infer_nms_iou; });
    b.add_int("infer_topk", "detections kept per image",
              [](R& c) -> int& { return c.det.infer_topk; });
    b.add_bool("br", "boundary refinement over the pyramid",
               [](R& c) -> bool& { return c.det.br_enabled; });
    b.add_bool("forward_attention", "pooled-statistics spatial gate inside br",
               [](R& c) -> bool& { return c.det.forward_attention; });
    b.add_bool("reverse_attention", "coarse-prior reverse gate inside br",
               [](R& c) -> bool& { return c.det.reverse_attention; });
    b.add_bool("cr", "category refinement contrastive training",
               [](R& c) -> bool& { return c.det.cr_enabled; });
    b.add_bool("scale_variant", "scale-jittered embedding variant",
               [](R& c) -> bool& { return c.det.scale_variant; });
    b.add_bool("rotate_variant", "orientation-aligned embedding variant",
               [](R& c) -> bool& { return c.det.rotate_variant; });
    b.add_bool("rpn_contrast", "contrast on proposal-stage embeddings",
               [](R& c) -> bool& { return c.det.rpn_contrast; });
    b.add_bool("roi_contrast", "contrast on box-head embeddings",
               [](R& c) -> bool& { return c.det.roi_contrast; });
    b.add_double("lr", "peak learning rate of the cosine schedule",
                 [](R& c) -> double& { return c.det.lr; });
    b.add_double("momentum", "SGD momentum",
                 [](R& c) -> double& { return c.det.momentum; });
    b.add_int("batch_size", "images per optimization step",
              [](R& c) -> int& { return c.det.batch_size; });
    b.add_u64("seed", "master seed; env BCR_SEED applies when unset",
              [](R& c) -> uint64_t& { return c.det.seed; });
    b.add_double("box_ratio", "share of training images keeping box annotations",
                 [](R& c) -> double& { return c.box_ratio; });
    b.add_int("pretrain_epochs", "stage-1 epochs over the box subset",
              [](R& c) -> int& { return c.pretrain_epochs; });
    b.add_int("finetune_epochs", "stage-3 epochs over the union",
              [](R& c) -> int& { return c.finetune_epochs; });
    b.add_double("pseudo_weight", "loss weight of pseudo-annotated images",
                 [](R& c) -> double& { return c.pseudo_weight; });
    return std::move(b.keys);
  }();
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return k;
  }
  throw std::invalid_argument("unknown config key: " + name);
}

/// Applies `key = value` lines. '#' starts a comment; blank lines are fine.
/// Returns the set of keys that were assigned.
inline std::set<std::string> apply_config_text(RunConfig& cfg, const std::string& text,
                                               const std::string& source) {
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(source + ":" + std::to_string(line_no) +
                                  ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      find_config_key(key).set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
    seen.insert(key);
  }
  return seen;
}

inline std::set<std::string> apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  return apply_config_text(cfg, text, path);
}

/// Every key in schema order, reparseable by apply_config_text.
inline std::string render_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_schema()) {
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

inline void write_resolved_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << render_config(cfg);
}

}  // namespace bcr
