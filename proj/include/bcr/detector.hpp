#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bcr/autodiff.hpp"
#include "bcr/br.hpp"
#include "bcr/checkpoint.hpp"
#include "bcr/contrastive.hpp"
#include "bcr/geometry.hpp"
#include "bcr/tensor.hpp"
#include "bcr/tensor_ops.hpp"

namespace bcr {

struct DetectorConfig {
  int image_h = 128, image_w = 128;
  int num_classes = 4;  // foreground classes; background index = num_classes
  int channels = 64;    // pyramid width
  int embed_dim = 32;   // contrastive embedding width
  int roi_hidden = 128;
  int roi_out = 7;
  int sampling_ratio = 2;
  double tau = 0.2;
  double gamma = 0.5;  // weight of the contrastive term in the total loss

  int proposals_train = 256;  // per-level pre-NMS cap during training
  int proposals_test = 128;
  int post_nms_keep = 256;
  double proposal_nms_iou = 0.7;

  double roi_fg_iou = 0.5, roi_bg_iou = 0.4;
  double rpn_fg_iou = 0.7, rpn_bg_iou = 0.3;
  int rpn_sample = 64;  // objectness anchors sampled per image
  double rpn_fg_frac = 0.5;
  int rpn_contrast_sample = 64;  // labeled anchors per image per level

  double infer_score_thresh = 0.05;
  double infer_nms_iou = 0.5;
  int infer_topk = 100;

  bool br_enabled = true;
  bool forward_attention = true;
  bool reverse_attention = true;
  bool cr_enabled = true;
  bool scale_variant = true;
  bool rotate_variant = true;
  bool rpn_contrast = true;
  bool roi_contrast = true;

  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 2;
  std::uint64_t seed = 7;

  static constexpr int kLevels = 3;
  static constexpr int kAnchorsPerCell = 3;

  int stride(int level) const { return 8 << level; }

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || image_h % 32 || image_w % 32) {
      throw std::invalid_argument("config: image extents must be positive multiples of 32");
    }
    if (num_classes < 1 || channels < 1 || embed_dim < 1 || roi_hidden < 1 ||
        roi_out < 1 || sampling_ratio < 1) {
      throw std::invalid_argument("config: positive dimensions required");
    }
    if (tau <= 0 || gamma < 0) {
      throw std::invalid_argument("config: tau > 0 and gamma >= 0 required");
    }
  }
};

/// Anchor boxes for one pyramid level, flat order (i * W + j) * A + a.
/// Three anchors per cell: a square plus area-matched tall and wide boxes.
inline std::vector<Box> anchor_boxes(int stride, int hl, int wl) {
  const double base = 4.0 * stride;
  const double r = std::sqrt(2.0);
  const double ws[3] = {base, 1.6 * base / r, 2.5 * base * r};
  const double hs[3] = {base, 1.6 * base * r, 2.5 * base / r};
  std::vector<Box> out;
  out.reserve(static_cast<size_t>(hl) * wl * 3);
  for (int i = 0; i < hl; ++i) {
    for (int j = 0; j < wl; ++j) {
      const double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
      for (int a = 0; a < 3; ++a) {
        out.push_back(Box{cx - 0.5 * ws[a], cy - 0.5 * hs[a], cx + 0.5 * ws[a],
                          cy + 0.5 * hs[a]});
      }
    }
  }
  return out;
}

inline std::array<double, 4> encode_box_delta(const Box& anchor, const Box& gt) {
  const double aw = anchor.width(), ah = anchor.height();
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah,
          std::log(gt.width() / aw), std::log(gt.height() / ah)};
}

/// Inverse of encode_box_delta. Log-scale deltas are clamped before exp so a
/// wild regression output cannot overflow.
inline Box decode_box_delta(const Box& anchor, double tx, double ty, double tw,
                            double th) {
  constexpr double kClamp = 4.0;
  const double cx = anchor.cx() + tx * anchor.width();
  const double cy = anchor.cy() + ty * anchor.height();
  const double w = anchor.width() * std::exp(std::min(tw, kClamp));
  const double h = anchor.height() * std::exp(std::min(th, kClamp));
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline Box clip_box(const Box& b, double w, double h) {
  return Box{std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h),
             std::clamp(b.x2, 0.0, w), std::clamp(b.y2, 0.0, h)};
}

/// Per-row assignment: gt[i] >= 0 names the matched truth box, -1 is
/// background, -2 is ignored (overlap between the two thresholds).
struct Assignment {
  std::vector<int> gt;
  std::vector<std::array<double, 4>> targets;  // valid where gt[i] >= 0
};

/// Max-IoU assignment with fixed tie-breaks (lowest index wins). With
/// force_match, every truth box claims its best-overlap row even when that
/// overlap is below the foreground threshold.
inline Assignment assign_labels(const std::vector<Box>& boxes,
                                const std::vector<Box>& gt_boxes,
                                double fg_iou, double bg_iou,
                                bool force_match) {
  const size_t n = boxes.size(), g = gt_boxes.size();
  Assignment out;
  out.gt.assign(n, -1);
  out.targets.assign(n, {0, 0, 0, 0});
  if (g == 0) return out;
  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> gt_best_iou(g, 0.0);
  std::vector<int> gt_best_row(g, -1);
  for (size_t i = 0; i < n; ++i) {
    for (size_t k = 0; k < g; ++k) {
      const double v = iou(boxes[i], gt_boxes[k]);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        best_gt[i] = static_cast<int>(k);
      }
      if (v > gt_best_iou[k]) {
        gt_best_iou[k] = v;
        gt_best_row[k] = static_cast<int>(i);
      }
    }
  }
  for (size_t i = 0; i < n; ++i) {
    if (best_iou[i] >= fg_iou) {
      out.gt[i] = best_gt[i];
    } else if (best_iou[i] >= bg_iou) {
      out.gt[i] = -2;
    }
  }
  if (force_match) {
    for (size_t k = 0; k < g; ++k) {
      if (gt_best_row[k] >= 0 && gt_best_iou[k] > 0.0) {
        out.gt[static_cast<size_t>(gt_best_row[k])] = static_cast<int>(k);
      }
    }
  }
  for (size_t i = 0; i < n; ++i) {
    if (out.gt[i] >= 0) {
      out.targets[i] =
          encode_box_delta(boxes[i], gt_boxes[static_cast<size_t>(out.gt[i])]);
    }
  }
  return out;
}

/// Greedy suppression over boxes already sorted in keep-priority order.
/// Returns the kept indices in that order.
template <typename BoxOf>
std::vector<int> greedy_nms(int n, double iou_thr, BoxOf box_of) {
  std::vector<int> keep;
  std::vector<char> dead(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    if (dead[static_cast<size_t>(i)]) continue;
    keep.push_back(i);
    for (int j = i + 1; j < n; ++j) {
      if (!dead[static_cast<size_t>(j)] &&
          iou(box_of(i), box_of(j)) > iou_thr) {
        dead[static_cast<size_t>(j)] = 1;
      }
    }
  }
  return keep;
}

struct Proposal {
  Box box;
  double score = 0.0;
  int level = 0;
  int image = 0;
  std::int64_t anchor = -1;  // flat anchor index within its level; -1 = injected
};

struct Detection {
  Box box;
  int label = 0;
  double score = 0.0;
};

/// Decodes RPN outputs into scored proposals: per-level top-M by objectness,
/// clip, drop degenerate boxes, then one cross-level NMS pass. All ordering
/// ties break on (level, flat anchor index) so the result is reproducible.
template <typename T>
std::vector<Proposal> select_proposals(
    const std::vector<const Tensor<T>*>& obj_maps,
    const std::vector<const Tensor<T>*>& reg_maps,
    const std::vector<std::vector<Box>>& anchors, const DetectorConfig& cfg,
    bool training, int image_index) {
  constexpr double kMinSide = 1e-3;
  const int cap = training ? cfg.proposals_train : cfg.proposals_test;
  std::vector<Proposal> pool;
  for (int l = 0; l < static_cast<int>(obj_maps.size()); ++l) {
    const Tensor<T>& obj = *obj_maps[l];
    const Tensor<T>& reg = *reg_maps[l];
    const int hl = obj.dim(0), wl = obj.dim(1), A = obj.dim(2);
    const std::int64_t count = static_cast<std::int64_t>(hl) * wl * A;
    std::vector<std::int64_t> order(static_cast<size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
      const T sa = obj[a], sb = obj[b];
      if (sa != sb) return sa > sb;
      return a < b;
    });
    const std::int64_t take = std::min<std::int64_t>(cap, count);
    for (std::int64_t t = 0; t < take; ++t) {
      const std::int64_t flat = order[static_cast<size_t>(t)];
      const int a = static_cast<int>(flat % A);
      const std::int64_t cell = flat / A;
      const int j = static_cast<int>(cell % wl);
      const int i = static_cast<int>(cell / wl);
      const T* d = &reg.at(i, j, 4 * a);
      Box b = decode_box_delta(anchors[static_cast<size_t>(l)][static_cast<size_t>(flat)],
                               d[0], d[1], d[2], d[3]);
      b = clip_box(b, cfg.image_w, cfg.image_h);
      if (b.width() < kMinSide || b.height() < kMinSide) continue;
      pool.push_back(Proposal{b, sigmoid_scalar(static_cast<double>(obj[flat])),
                              l, image_index, flat});
    }
  }
  std::sort(pool.begin(), pool.end(), [](const Proposal& a, const Proposal& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.level != b.level) return a.level < b.level;
    return a.anchor < b.anchor;
  });
  const auto keep = greedy_nms(static_cast<int>(pool.size()), cfg.proposal_nms_iou,
                               [&](int i) { return pool[static_cast<size_t>(i)].box; });
  std::vector<Proposal> out;
  for (int idx : keep) {
    if (static_cast<int>(out.size()) >= cfg.post_nms_keep) break;
    out.push_back(pool[static_cast<size_t>(idx)]);
  }
  return out;
}

template <typename T>
struct DetectorParams {
  using V = ad::VarPtr<T>;

  V stem_w, stem_b;  // 5x5 stride-4 stem
  V c2_w, c2_b, c3_w, c3_b, c4_w, c4_b;
  std::array<V, 3> lat_w, lat_b, out_w, out_b;
  BRParams<T> br;
  V rpn_trunk_w, rpn_trunk_b;
  V rpn_obj_w, rpn_obj_b, rpn_reg_w, rpn_reg_b, rpn_emb_w, rpn_emb_b;
  V fc1_w, fc1_b, fc2_w, fc2_b, cls_w, cls_b, reg_w, reg_b;
  V proj1_w, proj1_b, proj2_w, proj2_b;
  V proto_roi, proto_rpn;  // [num_classes, embed_dim], unit rows

  static DetectorParams init(const DetectorConfig& cfg, Rng& rng) {
    cfg.validate();
    DetectorParams p;
    const int C = cfg.channels, D = cfg.embed_dim, K = cfg.num_classes;
    auto conv = [&](int k, int cin, int cout, const std::string& name, V& w, V& b) {
      Tensor<T> wt({k, k, cin, cout});
      he_init(wt, k * k * cin, rng);
      w = ad::param(std::move(wt), name + ".w");
      b = ad::param(Tensor<T>({cout}), name + ".b");
    };
    auto dense = [&](int in, int out, const std::string& name, V& w, V& b) {
      Tensor<T> wt({in, out});
      he_init(wt, in, rng);
      w = ad::param(std::move(wt), name + ".w");
      b = ad::param(Tensor<T>({out}), name + ".b");
    };
    conv(5, 1, 16, "det.stem", p.stem_w, p.stem_b);
    conv(3, 16, 32, "det.c2", p.c2_w, p.c2_b);
    conv(3, 32, 64, "det.c3", p.c3_w, p.c3_b);
    conv(3, 64, 64, "det.c4", p.c4_w, p.c4_b);
    const int taps[3] = {32, 64, 64};
    for (int l = 0; l < 3; ++l) {
      conv(1, taps[l], C, "det.lat" + std::to_string(l), p.lat_w[static_cast<size_t>(l)],
           p.lat_b[static_cast<size_t>(l)]);
    }
    for (int l = 0; l < 3; ++l) {
      conv(3, C, C, "det.fpn" + std::to_string(l), p.out_w[static_cast<size_t>(l)],
           p.out_b[static_cast<size_t>(l)]);
    }
    p.br = BRParams<T>::init(std::vector<int>(3, C), rng);
    conv(3, C, C, "det.rpn.trunk", p.rpn_trunk_w, p.rpn_trunk_b);
    conv(1, C, DetectorConfig::kAnchorsPerCell, "det.rpn.obj", p.rpn_obj_w, p.rpn_obj_b);
    conv(1, C, 4 * DetectorConfig::kAnchorsPerCell, "det.rpn.reg", p.rpn_reg_w, p.rpn_reg_b);
    conv(1, C, D * DetectorConfig::kAnchorsPerCell, "det.rpn.emb", p.rpn_emb_w, p.rpn_emb_b);
    dense(cfg.roi_out * cfg.roi_out * C, cfg.roi_hidden, "det.roi.fc1", p.fc1_w, p.fc1_b);
    dense(cfg.roi_hidden, cfg.roi_hidden, "det.roi.fc2", p.fc2_w, p.fc2_b);
    dense(cfg.roi_hidden, K + 1, "det.roi.cls", p.cls_w, p.cls_b);
    dense(cfg.roi_hidden, 4, "det.roi.reg", p.reg_w, p.reg_b);
    dense(C, C, "det.proj1", p.proj1_w, p.proj1_b);
    dense(C, D, "det.proj2", p.proj2_w, p.proj2_b);
    auto protos = [&](const std::string& name) {
      Tensor<T> y({K, D});
      for (int k = 0; k < K; ++k) {
        double norm2 = 0.0;
        for (int d = 0; d < D; ++d) {
          y.at(k, d) = static_cast<T>(rng.normal());
          norm2 += static_cast<double>(y.at(k, d)) * y.at(k, d);
        }
        const T inv = static_cast<T>(1.0 / std::sqrt(std::max(norm2, 1e-12)));
        for (int d = 0; d < D; ++d) y.at(k, d) *= inv;
      }
      return ad::param(std::move(y), name);
    };
    p.proto_roi = protos("det.proto.roi");
    p.proto_rpn = protos("det.proto.rpn");
    return p;
  }

  std::vector<V> all() const {
    std::vector<V> v{stem_w, stem_b, c2_w, c2_b, c3_w, c3_b, c4_w, c4_b};
    for (int l = 0; l < 3; ++l) {
      v.push_back(lat_w[static_cast<size_t>(l)]);
      v.push_back(lat_b[static_cast<size_t>(l)]);
    }
    for (int l = 0; l < 3; ++l) {
      v.push_back(out_w[static_cast<size_t>(l)]);
      v.push_back(out_b[static_cast<size_t>(l)]);
    }
    br.collect(&v);
    for (const V& x : {rpn_trunk_w, rpn_trunk_b, rpn_obj_w, rpn_obj_b, rpn_reg_w,
                       rpn_reg_b, rpn_emb_w, rpn_emb_b, fc1_w, fc1_b, fc2_w,
                       fc2_b, cls_w, cls_b, reg_w, reg_b, proj1_w, proj1_b,
                       proj2_w, proj2_b, proto_roi, proto_rpn}) {
      v.push_back(x);
    }
    return v;
  }

  void zero_grads() {
    for (auto& v : all()) v->zero_grad();
  }

  /// Prototype rows drift off the unit sphere during optimization; callers
  /// rescale them after every optimizer step.
  void renormalize_prototypes() {
    for (const V& y : {proto_roi, proto_rpn}) {
      const int K = y->value.dim(0), D = y->value.dim(1);
      for (int k = 0; k < K; ++k) {
        double n2 = 0.0;
        for (int d = 0; d < D; ++d) {
          n2 += static_cast<double>(y->value.at(k, d)) * y->value.at(k, d);
        }
        const T inv = static_cast<T>(1.0 / std::sqrt(std::max(n2, 1e-24)));
        for (int d = 0; d < D; ++d) y->value.at(k, d) *= inv;
      }
    }
  }

  void save(const std::string& path) const {
    std::vector<std::pair<std::string, const Tensor<T>*>> items;
    for (const auto& v : all()) items.emplace_back(v->name, &v->value);
    save_checkpoint<T>(path, items);
  }

  /// Loads values into an already-initialized parameter set. Names and
  /// shapes must match exactly.
  void load(const std::string& path) {
    auto stored = load_checkpoint<T>(path);
    auto vars = all();
    if (stored.size() != vars.size()) {
      throw std::runtime_error("checkpoint: parameter count mismatch");
    }
    for (auto& v : vars) {
      auto it = stored.find(v->name);
      if (it == stored.end()) {
        throw std::runtime_error("checkpoint: missing tensor " + v->name);
      }
      if (!it->second.same_shape(v->value)) {
        throw std::runtime_error("checkpoint: shape mismatch for " + v->name);
      }
      v->value = std::move(it->second);
    }
  }
};

/// Backbone + top-down pyramid. Returns three maps at strides 8/16/32 with
/// cfg.channels channels each; index 0 is the finest level.
template <typename T>
std::vector<ad::VarPtr<T>> backbone_fpn(const ad::VarPtr<T>& image,
                                        const DetectorParams<T>& p) {
  const Tensor<T>& im = image->value;
  if (im.rank() != 3 || im.dim(2) != 1 || im.dim(0) % 32 || im.dim(1) % 32) {
    throw std::invalid_argument("backbone: HxWx1 image, extents multiples of 32");
  }
  auto s1 = ad::relu(ad::conv2d(image, p.stem_w, p.stem_b, 4, 2));
  auto s2 = ad::relu(ad::conv2d(s1, p.c2_w, p.c2_b, 2, 1));
  auto s3 = ad::relu(ad::conv2d(s2, p.c3_w, p.c3_b, 2, 1));
  auto s4 = ad::relu(ad::conv2d(s3, p.c4_w, p.c4_b, 2, 1));
  auto l0 = ad::conv2d(s2, p.lat_w[0], p.lat_b[0], 1, 0);
  auto l1 = ad::conv2d(s3, p.lat_w[1], p.lat_b[1], 1, 0);
  auto l2 = ad::conv2d(s4, p.lat_w[2], p.lat_b[2], 1, 0);
  auto t2 = l2;
  auto t1 = ad::add(l1, ad::bilinear_resize(t2, l1->value.dim(0), l1->value.dim(1)));
  auto t0 = ad::add(l0, ad::bilinear_resize(t1, l0->value.dim(0), l0->value.dim(1)));
  return {ad::conv2d(t0, p.out_w[0], p.out_b[0], 1, 1),
          ad::conv2d(t1, p.out_w[1], p.out_b[1], 1, 1),
          ad::conv2d(t2, p.out_w[2], p.out_b[2], 1, 1)};
}

template <typename T>
struct RpnLevelOut {
  ad::VarPtr<T> obj;  // [H, W, A]
  ad::VarPtr<T> reg;  // [H, W, 4A]
  ad::VarPtr<T> emb;  // [H, W, D*A], null unless requested
};

/// Shared 3x3 trunk then 1x1 heads per level. The anchor-a embedding at cell
/// (i, j) lives in channels [a*D, (a+1)*D) of the emb map.
template <typename T>
std::vector<RpnLevelOut<T>> rpn_forward(const std::vector<ad::VarPtr<T>>& pyr,
                                        const DetectorParams<T>& p,
                                        bool with_embeddings) {
  std::vector<RpnLevelOut<T>> out;
  for (const auto& f : pyr) {
    auto t = ad::relu(ad::conv2d(f, p.rpn_trunk_w, p.rpn_trunk_b, 1, 1));
    RpnLevelOut<T> o;
    o.obj = ad::conv2d(t, p.rpn_obj_w, p.rpn_obj_b, 1, 0);
    o.reg = ad::conv2d(t, p.rpn_reg_w, p.rpn_reg_b, 1, 0);
    if (with_embeddings) o.emb = ad::conv2d(t, p.rpn_emb_w, p.rpn_emb_b, 1, 0);
    out.push_back(std::move(o));
  }
  return out;
}

template <typename T>
struct RoiHeadOut {
  ad::VarPtr<T> cls;  // [N, K+1]
  ad::VarPtr<T> reg;  // [N, 4]
};

template <typename T>
RoiHeadOut<T> roi_head(const std::vector<ad::VarPtr<T>>& patches,
                       const DetectorParams<T>& p) {
  std::vector<ad::VarPtr<T>> flat;
  flat.reserve(patches.size());
  for (const auto& q : patches) flat.push_back(ad::flatten(q));
  auto x = ad::stack_rows(flat);
  auto h1 = ad::relu(ad::linear(x, p.fc1_w, p.fc1_b));
  auto h2 = ad::relu(ad::linear(h1, p.fc2_w, p.fc2_b));
  return {ad::linear(h2, p.cls_w, p.cls_b), ad::linear(h2, p.reg_w, p.reg_b)};
}

/// Patch -> global average pool -> two-layer projection -> unit rows.
template <typename T>
ad::VarPtr<T> roi_embeddings(const std::vector<ad::VarPtr<T>>& patches,
                             const DetectorParams<T>& p) {
  std::vector<ad::VarPtr<T>> pooled;
  pooled.reserve(patches.size());
  for (const auto& q : patches) pooled.push_back(ad::spatial_mean(q));
  auto x = ad::stack_rows(pooled);
  auto h = ad::relu(ad::linear(x, p.proj1_w, p.proj1_b));
  return ad::l2_normalize_rows(ad::linear(h, p.proj2_w, p.proj2_b));
}

struct ImageAnnotations {
  std::vector<Box> boxes;
  std::vector<int> labels;
  double weight = 1.0;  // loss weight, used to down/up-weight pseudo boxes
};

/// Truth boxes injected as proposals are aligned from the level whose anchor
/// scale is nearest to sqrt(area): 32 px at the finest level, doubling up.
inline int level_for_box(const Box& b) {
  const double s = std::sqrt(std::max(b.area(), 1.0));
  const int l = static_cast<int>(std::lround(std::log2(s / 32.0)));
  return std::clamp(l, 0, DetectorConfig::kLevels - 1);
}

struct RpnAnchorRef {
  int level = 0;
  std::int64_t flat = 0;
};

/// Frozen per-image stochastic decisions of one training step. Recording and
/// replaying a plan makes the loss a deterministic smooth function of the
/// parameters, which is what finite-difference verification requires.
struct ImagePlan {
  std::vector<Proposal> proposals;  // truth boxes already appended
  std::vector<int> roi_gt;
  std::vector<std::array<double, 4>> roi_targets;
  std::vector<int> contrast_rows;  // proposal indices, foreground + background
  std::vector<ScaleJitter> jitters;
  std::vector<double> thetas;
  std::vector<RpnAnchorRef> obj_anchors;
  std::vector<double> obj_targets;
  std::vector<RpnAnchorRef> rpn_fg;
  std::vector<std::array<double, 4>> rpn_fg_targets;
  std::vector<RpnAnchorRef> rpn_rows;
  std::vector<int> rpn_labels;
  std::vector<char> rpn_positive;
};

struct TrainPlan {
  std::vector<ImagePlan> images;
};

template <typename T>
struct TrainOutputs {
  ad::VarPtr<T> l_det, l_contrast, l_total;
  int proposals = 0, roi_fg = 0, rpn_fg = 0;
};

namespace detail {

/// Splits a flat cross-level anchor index back into (level, within-level).
inline RpnAnchorRef split_flat(const std::vector<std::int64_t>& level_offsets,
                               std::int64_t flat) {
  int level = 0;
  while (level + 1 < static_cast<int>(level_offsets.size()) &&
         flat >= level_offsets[static_cast<size_t>(level + 1)]) {
    ++level;
  }
  return {level, flat - level_offsets[static_cast<size_t>(level)]};
}

}  // namespace detail

/// One training forward pass over a batch. Builds the full loss graph:
/// detection terms (RPN objectness + box deltas, RoI classes + box deltas)
/// plus the prototype-anchored contrastive terms over RoI variants and RPN
/// anchor embeddings. Pass `record` to capture the step's stochastic plan or
/// `replay` to reuse one; at most one of the two.
template <typename T>
TrainOutputs<T> forward_train(const std::vector<Tensor<T>>& images,
                              const std::vector<ImageAnnotations>& anns,
                              const DetectorParams<T>& params,
                              const DetectorConfig& cfg, std::uint64_t step,
                              const TrainPlan* replay = nullptr,
                              TrainPlan* record = nullptr) {
  cfg.validate();
  if (images.empty() || images.size() != anns.size()) {
    throw std::invalid_argument("forward_train: batch/annotation mismatch");
  }
  if (replay && record) {
    throw std::invalid_argument("forward_train: replay excludes record");
  }
  if (replay && replay->images.size() != images.size()) {
    throw std::invalid_argument("forward_train: plan size mismatch");
  }
  const int K = cfg.num_classes;
  const bool want_rpn_ctr = cfg.cr_enabled && cfg.rpn_contrast;
  const bool want_roi_ctr = cfg.cr_enabled && cfg.roi_contrast;

  // Detection-loss accumulators across the batch.
  std::vector<std::pair<double, ad::VarPtr<T>>> obj_terms;  // (weight*count, bce)
  double obj_weight_total = 0.0;
  std::vector<ad::VarPtr<T>> rpn_reg_rows;
  std::vector<std::array<double, 4>> rpn_reg_targets;
  std::vector<double> rpn_reg_weights;
  std::vector<ad::VarPtr<T>> all_patches;
  std::vector<int> ce_labels;
  std::vector<double> ce_weights;
  std::vector<std::array<double, 4>> roi_reg_targets;
  std::vector<double> roi_reg_weights;

  // Contrastive accumulators.
  std::vector<ad::VarPtr<T>> ctr_base, ctr_scale, ctr_rot;
  std::vector<int> ctr_labels;
  std::vector<char> ctr_positive;
  std::vector<ad::VarPtr<T>> rpn_emb_rows;
  std::vector<int> rpn_emb_labels;
  std::vector<char> rpn_emb_positive;

  TrainOutputs<T> stats;

  for (size_t n = 0; n < images.size(); ++n) {
    const ImageAnnotations& ann = anns[n];
    if (ann.boxes.size() != ann.labels.size()) {
      throw std::invalid_argument("forward_train: box/label count mismatch");
    }
    auto image = ad::constant(images[n]);
    auto pyr = backbone_fpn(image, params);
    auto refined = cfg.br_enabled
                       ? refine_pyramid(pyr, params.br, cfg.forward_attention,
                                        cfg.reverse_attention)
                       : pyr;
    auto rpn = rpn_forward(refined, params, want_rpn_ctr);

    std::vector<std::vector<Box>> anchors;
    std::vector<std::int64_t> level_offsets{0};
    std::vector<Box> flat_anchors;
    for (int l = 0; l < DetectorConfig::kLevels; ++l) {
      auto av = anchor_boxes(cfg.stride(l), rpn[static_cast<size_t>(l)].obj->value.dim(0),
                             rpn[static_cast<size_t>(l)].obj->value.dim(1));
      flat_anchors.insert(flat_anchors.end(), av.begin(), av.end());
      level_offsets.push_back(level_offsets.back() + static_cast<std::int64_t>(av.size()));
      anchors.push_back(std::move(av));
    }

    ImagePlan plan;
    if (replay) {
      plan = replay->images[n];
    } else {
      std::vector<const Tensor<T>*> obj_maps, reg_maps;
      for (auto& o : rpn) {
        obj_maps.push_back(&o.obj->value);
        reg_maps.push_back(&o.reg->value);
      }
      plan.proposals = select_proposals(obj_maps, reg_maps, anchors, cfg, true,
                                        static_cast<int>(n));
      for (size_t g = 0; g < ann.boxes.size(); ++g) {
        Box b = clip_box(ann.boxes[g], cfg.image_w, cfg.image_h);
        if (!b.valid()) continue;
        plan.proposals.push_back(
            Proposal{b, 1.0, level_for_box(b), static_cast<int>(n), -1});
      }
      std::vector<Box> prop_boxes;
      for (const auto& pr : plan.proposals) prop_boxes.push_back(pr.box);
      Assignment roi_assign = assign_labels(prop_boxes, ann.boxes, cfg.roi_fg_iou,
                                            cfg.roi_bg_iou, false);
      plan.roi_gt = std::move(roi_assign.gt);
      plan.roi_targets = std::move(roi_assign.targets);
      for (size_t i = 0; i < plan.proposals.size(); ++i) {
        if (plan.roi_gt[i] != -2) plan.contrast_rows.push_back(static_cast<int>(i));
      }
      {
        Rng jr = purpose_rng(cfg.seed, rngkey::kScaleJitter, step, n);
        for (size_t r = 0; r < plan.contrast_rows.size(); ++r) {
          plan.jitters.push_back(ScaleJitter{jr.uniform(0.9, 1.1), jr.uniform(0.9, 1.1)});
        }
      }
      // Orientations are filled in below once patches exist.

      Assignment rpn_assign =
          assign_labels(flat_anchors, ann.boxes, cfg.rpn_fg_iou, cfg.rpn_bg_iou, true);
      std::vector<std::int64_t> fg_pool, bg_pool;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(flat_anchors.size()); ++i) {
        const int a = rpn_assign.gt[static_cast<size_t>(i)];
        if (a >= 0) {
          fg_pool.push_back(i);
        } else if (a == -1) {
          bg_pool.push_back(i);
        }
      }
      {
        Rng sr = purpose_rng(cfg.seed, rngkey::kRpnSample, step, n);
        sr.shuffle(fg_pool);
        sr.shuffle(bg_pool);
        const int want_fg =
            static_cast<int>(std::lround(cfg.rpn_sample * cfg.rpn_fg_frac));
        const int n_fg = std::min<int>(want_fg, static_cast<int>(fg_pool.size()));
        const int n_bg = std::min<int>(cfg.rpn_sample - n_fg,
                                       static_cast<int>(bg_pool.size()));
        for (int t = 0; t < n_fg; ++t) {
          const std::int64_t flat = fg_pool[static_cast<size_t>(t)];
          plan.obj_anchors.push_back(detail::split_flat(level_offsets, flat));
          plan.obj_targets.push_back(1.0);
          plan.rpn_fg.push_back(plan.obj_anchors.back());
          plan.rpn_fg_targets.push_back(rpn_assign.targets[static_cast<size_t>(flat)]);
        }
        for (int t = 0; t < n_bg; ++t) {
          plan.obj_anchors.push_back(
              detail::split_flat(level_offsets, bg_pool[static_cast<size_t>(t)]));
          plan.obj_targets.push_back(0.0);
        }
      }
      if (want_rpn_ctr) {
        Rng cr = purpose_rng(cfg.seed, rngkey::kRpnContrast, step, n);
        for (int l = 0; l < DetectorConfig::kLevels; ++l) {
          std::vector<std::int64_t> fg, bg;
          for (std::int64_t i = level_offsets[static_cast<size_t>(l)];
               i < level_offsets[static_cast<size_t>(l) + 1]; ++i) {
            const int a = rpn_assign.gt[static_cast<size_t>(i)];
            if (a >= 0) {
              fg.push_back(i);
            } else if (a == -1) {
              bg.push_back(i);
            }
          }
          cr.shuffle(fg);
          cr.shuffle(bg);
          const int n_fg = std::min<int>(cfg.rpn_contrast_sample,
                                         static_cast<int>(fg.size()));
          const int n_bg = std::min<int>(cfg.rpn_contrast_sample - n_fg,
                                         static_cast<int>(bg.size()));
          for (int t = 0; t < n_fg; ++t) {
            const std::int64_t flat = fg[static_cast<size_t>(t)];
            plan.rpn_rows.push_back(detail::split_flat(level_offsets, flat));
            plan.rpn_labels.push_back(
                ann.labels[static_cast<size_t>(rpn_assign.gt[static_cast<size_t>(flat)])]);
            plan.rpn_positive.push_back(1);
          }
          for (int t = 0; t < n_bg; ++t) {
            plan.rpn_rows.push_back(
                detail::split_flat(level_offsets, bg[static_cast<size_t>(t)]));
            plan.rpn_labels.push_back(-1);
            plan.rpn_positive.push_back(0);
          }
        }
      }
    }

    stats.proposals += static_cast<int>(plan.proposals.size());

    // RoI aligned patches for every proposal, from its source level.
    std::vector<ad::VarPtr<T>> patches;
    patches.reserve(plan.proposals.size());
    for (const auto& pr : plan.proposals) {
      patches.push_back(ad::roi_align(refined[static_cast<size_t>(pr.level)], pr.box,
                                      cfg.roi_out, cfg.sampling_ratio));
    }
    if (!replay && want_roi_ctr && cfg.rotate_variant) {
      for (int row : plan.contrast_rows) {
        double theta = 0.0;
        try {
          theta = principal_orientation(
              compress_channels(patches[static_cast<size_t>(row)]->value));
        } catch (const DegenerateOrientation&) {
          theta = 0.0;
        }
        plan.thetas.push_back(theta);
      }
    }

    for (size_t i = 0; i < plan.proposals.size(); ++i) {
      all_patches.push_back(patches[i]);
      const int a = plan.roi_gt[i];
      if (a >= 0) {
        ce_labels.push_back(ann.labels[static_cast<size_t>(a)]);
        ce_weights.push_back(ann.weight);
        roi_reg_targets.push_back(plan.roi_targets[i]);
        roi_reg_weights.push_back(ann.weight);
        ++stats.roi_fg;
      } else {
        ce_labels.push_back(K);  // background class
        ce_weights.push_back(a == -1 ? ann.weight : 0.0);
        roi_reg_targets.push_back({0, 0, 0, 0});
        roi_reg_weights.push_back(0.0);
      }
    }

    // RPN objectness + regression rows.
    if (!plan.obj_anchors.empty()) {
      std::vector<ad::VarPtr<T>> parts;
      for (int l = 0; l < DetectorConfig::kLevels; ++l) {
        std::vector<std::array<int, 3>> coords;
        for (const auto& ref : plan.obj_anchors) {
          if (ref.level != l) continue;
          const int A = DetectorConfig::kAnchorsPerCell;
          const int a = static_cast<int>(ref.flat % A);
          const std::int64_t cell = ref.flat / A;
          const int wl = rpn[static_cast<size_t>(l)].obj->value.dim(1);
          coords.push_back({static_cast<int>(cell / wl), static_cast<int>(cell % wl), a});
        }
        if (!coords.empty()) {
          parts.push_back(ad::gather_pixels(rpn[static_cast<size_t>(l)].obj, coords));
        }
      }
      // gather order above is level-major; rebuild targets in the same order
      std::vector<double> targets;
      for (int l = 0; l < DetectorConfig::kLevels; ++l) {
        for (size_t t = 0; t < plan.obj_anchors.size(); ++t) {
          if (plan.obj_anchors[t].level == l) targets.push_back(plan.obj_targets[t]);
        }
      }
      auto logits = parts.size() == 1 ? parts[0] : ad::concat_vec(parts);
      obj_terms.emplace_back(ann.weight * static_cast<double>(targets.size()),
                             ad::bce_with_logits(logits, targets));
      obj_weight_total += ann.weight * static_cast<double>(targets.size());
    }
    for (size_t t = 0; t < plan.rpn_fg.size(); ++t) {
      const auto& ref = plan.rpn_fg[t];
      const int A = DetectorConfig::kAnchorsPerCell;
      const int a = static_cast<int>(ref.flat % A);
      const std::int64_t cell = ref.flat / A;
      const int wl = rpn[static_cast<size_t>(ref.level)].reg->value.dim(1);
      rpn_reg_rows.push_back(ad::slice_pixel_channels(
          rpn[static_cast<size_t>(ref.level)].reg, static_cast<int>(cell / wl),
          static_cast<int>(cell % wl), 4 * a, 4));
      rpn_reg_targets.push_back(plan.rpn_fg_targets[t]);
      rpn_reg_weights.push_back(ann.weight);
      ++stats.rpn_fg;
    }

    // RoI contrastive rows: base patches plus jittered and rotated aligns.
    if (want_roi_ctr) {
      for (size_t r = 0; r < plan.contrast_rows.size(); ++r) {
        const int row = plan.contrast_rows[r];
        const auto& pr = plan.proposals[static_cast<size_t>(row)];
        const int a = plan.roi_gt[static_cast<size_t>(row)];
        ctr_labels.push_back(a >= 0 ? ann.labels[static_cast<size_t>(a)] : -1);
        ctr_positive.push_back(a >= 0 ? 1 : 0);
        ctr_base.push_back(patches[static_cast<size_t>(row)]);
        if (cfg.scale_variant) {
          Box jb = scale_jitter(pr.box, plan.jitters[r]);
          ctr_scale.push_back(ad::roi_align(refined[static_cast<size_t>(pr.level)], jb,
                                            cfg.roi_out, cfg.sampling_ratio));
        }
        if (cfg.rotate_variant) {
          RotatedBox rb = to_rotated(pr.box, plan.thetas[r]);
          ctr_rot.push_back(ad::rotated_roi_align(refined[static_cast<size_t>(pr.level)],
                                                  rb, cfg.roi_out, cfg.sampling_ratio));
        }
      }
    }

    // RPN contrastive rows.
    if (want_rpn_ctr) {
      for (size_t t = 0; t < plan.rpn_rows.size(); ++t) {
        const auto& ref = plan.rpn_rows[t];
        const int A = DetectorConfig::kAnchorsPerCell;
        const int a = static_cast<int>(ref.flat % A);
        const std::int64_t cell = ref.flat / A;
        const int wl = rpn[static_cast<size_t>(ref.level)].emb->value.dim(1);
        rpn_emb_rows.push_back(ad::slice_pixel_channels(
            rpn[static_cast<size_t>(ref.level)].emb, static_cast<int>(cell / wl),
            static_cast<int>(cell % wl), cfg.embed_dim * a, cfg.embed_dim));
        rpn_emb_labels.push_back(plan.rpn_labels[t]);
        rpn_emb_positive.push_back(plan.rpn_positive[t]);
      }
    }

    if (record) record->images.push_back(std::move(plan));
  }

  // Detection loss.
  std::vector<std::pair<double, ad::VarPtr<T>>> det_terms;
  if (!obj_terms.empty() && obj_weight_total > 0.0) {
    std::vector<std::pair<double, ad::VarPtr<T>>> scaled;
    for (auto& [wn, term] : obj_terms) scaled.emplace_back(wn / obj_weight_total, term);
    det_terms.emplace_back(1.0, ad::combine_scalars(scaled));
  }
  if (!rpn_reg_rows.empty()) {
    auto pred = ad::stack_rows(rpn_reg_rows);
    Tensor<T> tgt({static_cast<int>(rpn_reg_targets.size()), 4});
    for (size_t r = 0; r < rpn_reg_targets.size(); ++r) {
      for (int d = 0; d < 4; ++d) {
        tgt.at(static_cast<int>(r), d) = static_cast<T>(rpn_reg_targets[r][static_cast<size_t>(d)]);
      }
    }
    det_terms.emplace_back(1.0, ad::smooth_l1(pred, tgt, 1.0, rpn_reg_weights));
  }
  if (!all_patches.empty()) {
    auto head = roi_head(all_patches, params);
    det_terms.emplace_back(1.0, ad::softmax_cross_entropy(head.cls, ce_labels, ce_weights));
    Tensor<T> tgt({static_cast<int>(roi_reg_targets.size()), 4});
    for (size_t r = 0; r < roi_reg_targets.size(); ++r) {
      for (int d = 0; d < 4; ++d) {
        tgt.at(static_cast<int>(r), d) = static_cast<T>(roi_reg_targets[r][static_cast<size_t>(d)]);
      }
    }
    det_terms.emplace_back(1.0, ad::smooth_l1(head.reg, tgt, 1.0, roi_reg_weights));
  }
  stats.l_det = det_terms.empty() ? ad::scalar_var<T>(T(0))
                                  : ad::combine_scalars(det_terms);

  // Contrastive loss.
  std::vector<std::pair<double, ad::VarPtr<T>>> ctr_terms;
  if (want_roi_ctr && !ctr_base.empty()) {
    std::vector<ad::VarPtr<T>> variants;
    variants.push_back(roi_embeddings(ctr_base, params));
    if (cfg.scale_variant) variants.push_back(roi_embeddings(ctr_scale, params));
    if (cfg.rotate_variant) variants.push_back(roi_embeddings(ctr_rot, params));
    ctr_terms.emplace_back(
        1.0, ad::contrastive_loss(variants, params.proto_roi, ctr_labels,
                                  ctr_positive, cfg.tau));
  }
  if (want_rpn_ctr && !rpn_emb_rows.empty()) {
    auto emb = ad::l2_normalize_rows(ad::stack_rows(rpn_emb_rows));
    ctr_terms.emplace_back(
        1.0, ad::contrastive_loss(std::vector<ad::VarPtr<T>>{emb}, params.proto_rpn,
                                  rpn_emb_labels, rpn_emb_positive, cfg.tau));
  }
  stats.l_contrast = ctr_terms.empty() ? ad::scalar_var<T>(T(0))
                                       : ad::combine_scalars(ctr_terms);

  // gamma = 0 must leave the total bit-identical to the detection loss.
  if (cfg.cr_enabled && cfg.gamma > 0.0 && !ctr_terms.empty()) {
    stats.l_total = ad::combine_scalars<T>(
        {{1.0, stats.l_det}, {cfg.gamma, stats.l_contrast}});
  } else {
    stats.l_total = stats.l_det;
  }
  return stats;
}

/// Softmax over one logits row in double precision.
template <typename T>
std::vector<double> softmax_row(const Tensor<T>& logits, int row) {
  const int k = logits.dim(1);
  std::vector<double> p(static_cast<size_t>(k));
  double m = static_cast<double>(logits.at(row, 0));
  for (int i = 1; i < k; ++i) m = std::max(m, static_cast<double>(logits.at(row, i)));
  double z = 0.0;
  for (int i = 0; i < k; ++i) {
    p[static_cast<size_t>(i)] = std::exp(static_cast<double>(logits.at(row, i)) - m);
    z += p[static_cast<size_t>(i)];
  }
  for (auto& v : p) v /= z;
  return p;
}

/// Full inference pass: proposals, RoI scoring, per-class NMS, score
/// threshold, top-k. Pure function of (image, params, cfg).
template <typename T>
std::vector<Detection> infer(const Tensor<T>& image, const DetectorParams<T>& params,
                             const DetectorConfig& cfg) {
  cfg.validate();
  auto img = ad::constant(image);
  auto pyr = backbone_fpn(img, params);
  auto refined = cfg.br_enabled
                     ? refine_pyramid(pyr, params.br, cfg.forward_attention,
                                      cfg.reverse_attention)
                     : pyr;
  auto rpn = rpn_forward(refined, params, false);
  std::vector<std::vector<Box>> anchors;
  std::vector<const Tensor<T>*> obj_maps, reg_maps;
  for (int l = 0; l < DetectorConfig::kLevels; ++l) {
    anchors.push_back(anchor_boxes(cfg.stride(l), rpn[static_cast<size_t>(l)].obj->value.dim(0),
                                   rpn[static_cast<size_t>(l)].obj->value.dim(1)));
    obj_maps.push_back(&rpn[static_cast<size_t>(l)].obj->value);
    reg_maps.push_back(&rpn[static_cast<size_t>(l)].reg->value);
  }
  auto proposals = select_proposals(obj_maps, reg_maps, anchors, cfg, false, 0);
  if (proposals.empty()) return {};
  std::vector<ad::VarPtr<T>> patches;
  for (const auto& pr : proposals) {
    patches.push_back(ad::roi_align(refined[static_cast<size_t>(pr.level)], pr.box,
                                    cfg.roi_out, cfg.sampling_ratio));
  }
  auto head = roi_head(patches, params);
  struct Cand {
    Box box;
    double score;
    int row;
  };
  std::vector<Detection> dets;
  for (int k = 0; k < cfg.num_classes; ++k) {
    std::vector<Cand> cands;
    for (size_t r = 0; r < proposals.size(); ++r) {
      const auto p = softmax_row(head.cls->value, static_cast<int>(r));
      const double score = p[static_cast<size_t>(k)];
      if (score < cfg.infer_score_thresh) continue;
      const T* d = &head.reg->value.at(static_cast<int>(r), 0);
      Box b = decode_box_delta(proposals[r].box, d[0], d[1], d[2], d[3]);
      b = clip_box(b, cfg.image_w, cfg.image_h);
      if (!b.valid()) continue;
      cands.push_back(Cand{b, score, static_cast<int>(r)});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.row < b.row;
    });
    const auto keep = greedy_nms(static_cast<int>(cands.size()), cfg.infer_nms_iou,
                                 [&](int i) { return cands[static_cast<size_t>(i)].box; });
    for (int idx : keep) {
      dets.push_back(Detection{cands[static_cast<size_t>(idx)].box, k,
                               cands[static_cast<size_t>(idx)].score});
    }
  }
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.label != b.label) return a.label < b.label;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    return a.box.y1 < b.box.y1;
  });
  if (static_cast<int>(dets.size()) > cfg.infer_topk) {
    dets.resize(static_cast<size_t>(cfg.infer_topk));
  }
  return dets;
}

inline double cosine_lr(double lr0, int epoch, int total_epochs) {
  if (total_epochs <= 1) return lr0;
  const double t = static_cast<double>(epoch) / total_epochs;
  return lr0 * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

/// Plain SGD with momentum. Parameters with no gradient this step still see
/// their velocity decay, so a step is a pure function of (state, grads).
template <typename T>
struct SgdMomentum {
  double momentum = 0.9;
  std::map<std::string, Tensor<T>> velocity;

  void step(const std::vector<ad::VarPtr<T>>& params, double lr) {
    for (const auto& v : params) {
      if (!v->requires_grad) continue;
      auto [it, fresh] = velocity.try_emplace(v->name, v->value.shape());
      Tensor<T>& vel = it->second;
      const bool has_grad = v->grad.numel() == v->value.numel();
      for (std::int64_t i = 0; i < v->value.numel(); ++i) {
        const T g = has_grad ? v->grad[i] : T(0);
        vel[i] = static_cast<T>(momentum) * vel[i] - static_cast<T>(lr) * g;
        v->value[i] += vel[i];
      }
    }
  }
};

}  // namespace bcr
