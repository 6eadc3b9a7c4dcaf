#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bcr/detector.hpp"
#include "bcr/evaluation.hpp"
#include "bcr/synthdata.hpp"
#include "json.hpp"

// Three-stage weakly-semi-supervised training: split the training set into a
// small box-annotated part and a large point-annotated part, pretrain on the
// boxes, grow pseudo boxes from the points with the pretrained model, then
// fine-tune on everything. Every stage is a pure function of (data, config,
// seed); two runs write byte-identical outputs.

namespace bcr {

inline constexpr int kPhasePretrain = 1;
inline constexpr int kPhaseFinetune = 2;

struct Point {
  double x = 0, y = 0;
};

struct PointAnnotation {
  double x = 0, y = 0;
  int label = 0;
};

/// Uniform draw strictly inside the box.
inline Point sample_point_in_box(const Box& b, Rng& rng) {
  if (!b.valid()) throw std::invalid_argument("sample_point_in_box: invalid box");
  return {rng.uniform_open(b.x1, b.x2), rng.uniform_open(b.y1, b.y2)};
}

struct SplitResult {
  std::vector<int> box_indices;    // ascending positions into the record list
  std::vector<int> point_indices;  // ascending, disjoint complement
  std::vector<std::vector<PointAnnotation>> points;  // aligned with point_indices
};

/// Keeps ceil(N * ratio) images fully box-annotated and reduces every box of
/// the remaining images to one point drawn strictly inside it. Membership and
/// points depend only on (record count, ratio, seed).
inline SplitResult split_annotations(const std::vector<DatasetRecord>& records,
                                     double ratio, uint64_t seed) {
  if (records.empty()) throw std::invalid_argument("split: empty dataset");
  if (!(ratio > 0.0) || ratio > 1.0) {
    throw std::invalid_argument("box ratio must be in (0, 1]");
  }
  const int n = static_cast<int>(records.size());
  const int keep = std::min(n, static_cast<int>(std::ceil(ratio * n)));

  std::vector<int> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = purpose_rng(seed, rngkey::kSplit);
  rng.shuffle(idx);

  SplitResult out;
  out.box_indices.assign(idx.begin(), idx.begin() + keep);
  out.point_indices.assign(idx.begin() + keep, idx.end());
  std::sort(out.box_indices.begin(), out.box_indices.end());
  std::sort(out.point_indices.begin(), out.point_indices.end());

  for (int i : out.point_indices) {
    const DatasetRecord& rec = records[static_cast<size_t>(i)];
    Rng prng = purpose_rng(seed, rngkey::kPointInBox, static_cast<uint64_t>(i));
    std::vector<PointAnnotation> pts;
    for (size_t b = 0; b < rec.boxes.size(); ++b) {
      const Point p = sample_point_in_box(rec.boxes[b], prng);
      pts.push_back({p.x, p.y, rec.labels[b]});
    }
    out.points.push_back(std::move(pts));
  }
  return out;
}

struct TrainResult {
  double initial_loss = 0;  // first batch, before any update
  double final_loss = 0;    // last epoch mean
  std::vector<double> epoch_mean_loss;
};

/// SGD with momentum under a cosine schedule, shuffling image order each
/// epoch from a stream keyed by (seed, phase, epoch). Aborts on a non-finite
/// loss. epochs <= 0 leaves the parameters untouched.
template <typename T>
TrainResult train_detector(DetectorParams<T>& params, const std::vector<Tensor<T>>& images,
                           const std::vector<ImageAnnotations>& anns,
                           const DetectorConfig& cfg, int epochs, int phase) {
  if (images.empty() || images.size() != anns.size()) {
    throw std::invalid_argument("train: image/annotation mismatch");
  }
  TrainResult res;
  if (epochs <= 0) return res;

  SgdMomentum<T> opt;
  opt.momentum = cfg.momentum;
  const auto vars = params.all();
  // Distinct phases use disjoint step counters so their sampling streams
  // never collide.
  uint64_t step = static_cast<uint64_t>(phase) << 32;
  bool first = true;
  const size_t batch = static_cast<size_t>(std::max(1, cfg.batch_size));

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = purpose_rng(cfg.seed, rngkey::kEpochOrder,
                                  static_cast<uint64_t>(phase),
                                  static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    const double lr = cosine_lr(cfg.lr, epoch, epochs);

    double acc = 0;
    int batches = 0;
    for (size_t pos = 0; pos < order.size(); pos += batch) {
      std::vector<Tensor<T>> bi;
      std::vector<ImageAnnotations> ba;
      for (size_t k = pos; k < std::min(pos + batch, order.size()); ++k) {
        bi.push_back(images[static_cast<size_t>(order[k])]);
        ba.push_back(anns[static_cast<size_t>(order[k])]);
      }
      const auto out = forward_train(bi, ba, params, cfg, step++);
      const double loss = out.l_total->value[0];
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged: non-finite loss in phase " +
                                 std::to_string(phase) + ", epoch " +
                                 std::to_string(epoch) + ", batch " +
                                 std::to_string(batches));
      }
      if (first) {
        res.initial_loss = loss;
        first = false;
      }
      acc += loss;
      ++batches;
      params.zero_grads();
      ad::backward(out.l_total);
      opt.step(vars, lr);
      params.renormalize_prototypes();
    }
    res.epoch_mean_loss.push_back(acc / batches);
  }
  res.final_loss = res.epoch_mean_loss.back();
  return res;
}

/// Stage 1: fresh parameters trained on the box-annotated subset alone.
/// Points play no role here; they only matter once pseudo boxes are grown.
template <typename T>
std::pair<DetectorParams<T>, TrainResult> pretrain(const std::vector<Tensor<T>>& images,
                                                   const std::vector<ImageAnnotations>& anns,
                                                   const DetectorConfig& cfg, int epochs) {
  if (images.empty()) throw std::invalid_argument("pretrain: empty box subset");
  Rng rng = purpose_rng(cfg.seed, rngkey::kParamInit);
  DetectorParams<T> params = DetectorParams<T>::init(cfg, rng);
  TrainResult stats = train_detector(params, images, anns, cfg, epochs, kPhasePretrain);
  return {std::move(params), std::move(stats)};
}

struct ScoredProposal {
  Proposal proposal;
  std::vector<double> probs;  // softmax over classes, background last
};

/// Inference-style proposal generation plus class scoring, without the final
/// threshold/NMS stage. This is the raw material pseudo boxes pick from.
template <typename T>
std::vector<ScoredProposal> score_proposals(const Tensor<T>& image,
                                            const DetectorParams<T>& params,
                                            const DetectorConfig& cfg) {
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
    const auto& o = rpn[static_cast<size_t>(l)];
    anchors.push_back(anchor_boxes(cfg.stride(l), o.obj->value.dim(0), o.obj->value.dim(1)));
    obj_maps.push_back(&o.obj->value);
    reg_maps.push_back(&o.reg->value);
  }
  const auto proposals = select_proposals(obj_maps, reg_maps, anchors, cfg, false, 0);
  if (proposals.empty()) return {};
  std::vector<ad::VarPtr<T>> patches;
  for (const auto& pr : proposals) {
    patches.push_back(ad::roi_align(refined[static_cast<size_t>(pr.level)], pr.box,
                                    cfg.roi_out, cfg.sampling_ratio));
  }
  const auto head = roi_head(patches, params);
  std::vector<ScoredProposal> out;
  for (size_t r = 0; r < proposals.size(); ++r) {
    out.push_back({proposals[r], softmax_row(head.cls->value, static_cast<int>(r))});
  }
  return out;
}

struct PseudoChoice {
  Box box;
  // 0: best class score among proposals containing the point
  // 1: nearest proposal whose predicted class matches the point
  // 2: best class score anywhere (nothing contained, nothing class-matched)
  // 3: no proposals at all, fixed-size box dropped on the point
  int fallback = 0;
};

/// Picks one box for a point of class `label` from scored proposals. Ties
/// break toward the proposal center closest to the point, then first wins.
inline PseudoChoice select_pseudo_box(double px, double py, int label,
                                      const std::vector<Box>& boxes,
                                      const std::vector<std::vector<double>>& probs,
                                      int image_w, int image_h) {
  if (boxes.size() != probs.size()) {
    throw std::invalid_argument("select_pseudo_box: box/score mismatch");
  }
  auto center_dist = [&](const Box& b) { return std::hypot(b.cx() - px, b.cy() - py); };
  auto better = [&](size_t a, size_t b, bool by_score) {
    // by_score: higher class score first, else nearer center first.
    const double sa = probs[a][static_cast<size_t>(label)];
    const double sb = probs[b][static_cast<size_t>(label)];
    const double da = center_dist(boxes[a]), db = center_dist(boxes[b]);
    if (by_score) return sa != sb ? sa > sb : da < db;
    return da != db ? da < db : sa > sb;
  };

  if (boxes.empty()) {
    const Box def{px - 16, py - 16, px + 16, py + 16};
    return {clip_box(def, image_w, image_h), 3};
  }

  size_t pick = boxes.size();
  for (size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    if (px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2) continue;
    if (pick == boxes.size() || better(i, pick, true)) pick = i;
  }
  if (pick < boxes.size()) return {boxes[pick], 0};

  for (size_t i = 0; i < boxes.size(); ++i) {
    const auto& p = probs[i];
    const size_t argmax =
        static_cast<size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    if (argmax != static_cast<size_t>(label)) continue;
    if (pick == boxes.size() || better(i, pick, false)) pick = i;
  }
  if (pick < boxes.size()) return {boxes[pick], 1};

  pick = 0;
  for (size_t i = 1; i < boxes.size(); ++i) {
    if (better(i, pick, true)) pick = i;
  }
  return {boxes[pick], 2};
}

struct PseudoBox {
  std::string path;  // source image file
  int image = 0;     // position within the point subset
  int label = 0;
  double px = 0, py = 0;
  Box box;
  int fallback = 0;
};

/// One pseudo box per annotated point, using the trained model's proposals.
template <typename T>
std::vector<PseudoBox> generate_pseudo_boxes(
    const DetectorParams<T>& params, const DetectorConfig& cfg,
    const std::vector<Tensor<T>>& images,
    const std::vector<std::vector<PointAnnotation>>& points,
    const std::vector<std::string>& paths) {
  if (images.size() != points.size() || images.size() != paths.size()) {
    throw std::invalid_argument("generate_pseudo_boxes: input size mismatch");
  }
  std::vector<PseudoBox> out;
  for (size_t i = 0; i < images.size(); ++i) {
    if (points[i].empty()) continue;
    const auto scored = score_proposals(images[i], params, cfg);
    std::vector<Box> boxes;
    std::vector<std::vector<double>> probs;
    for (const auto& s : scored) {
      boxes.push_back(s.proposal.box);
      probs.push_back(s.probs);
    }
    for (const auto& pt : points[i]) {
      const PseudoChoice c =
          select_pseudo_box(pt.x, pt.y, pt.label, boxes, probs, cfg.image_w, cfg.image_h);
      out.push_back({paths[i], static_cast<int>(i), pt.label, pt.x, pt.y, c.box,
                     c.fallback});
    }
  }
  return out;
}

inline void write_pseudo_jsonl(const std::string& path, const std::vector<PseudoBox>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& r : rows) {
    nlohmann::json j;
    j["path"] = r.path;
    j["point"] = {r.px, r.py};
    j["label"] = r.label;
    j["box"] = {r.box.x1, r.box.y1, r.box.x2, r.box.y2};
    j["fallback"] = r.fallback;
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("short write: " + path);
}

inline std::vector<PseudoBox> load_pseudo_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<PseudoBox> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    PseudoBox r;
    r.path = j.at("path").get<std::string>();
    r.px = j.at("point")[0].get<double>();
    r.py = j.at("point")[1].get<double>();
    r.label = j.at("label").get<int>();
    r.box = Box{j.at("box")[0].get<double>(), j.at("box")[1].get<double>(),
                j.at("box")[2].get<double>(), j.at("box")[3].get<double>()};
    r.fallback = j.at("fallback").get<int>();
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Stage 3: resume from a stage-1 checkpoint and train over the union of real
/// and pseudo annotations. An empty pseudo set degenerates to continued
/// pretraining on the box subset.
template <typename T>
std::pair<DetectorParams<T>, TrainResult> finetune(const std::string& stage1_ckpt,
                                                   const std::vector<Tensor<T>>& images,
                                                   const std::vector<ImageAnnotations>& anns,
                                                   const DetectorConfig& cfg, int epochs) {
  Rng rng = purpose_rng(cfg.seed, rngkey::kParamInit);
  DetectorParams<T> params = DetectorParams<T>::init(cfg, rng);
  params.load(stage1_ckpt);
  TrainResult stats = train_detector(params, images, anns, cfg, epochs, kPhaseFinetune);
  return {std::move(params), std::move(stats)};
}

struct PipelineConfig {
  DetectorConfig det;
  double box_ratio = 0.05;
  int pretrain_epochs = 24;
  int finetune_epochs = 24;
  double pseudo_weight = 1.0;  // loss weight of pseudo-annotated images

  void validate() const {
    det.validate();
    if (!(box_ratio > 0.0) || box_ratio > 1.0) {
      throw std::invalid_argument("box ratio must be in (0, 1]");
    }
    if (pretrain_epochs < 0 || finetune_epochs < 0) {
      throw std::invalid_argument("epochs must be >= 0");
    }
    if (pseudo_weight < 0) throw std::invalid_argument("pseudo weight must be >= 0");
  }
};

struct PipelineResult {
  SplitResult split;
  TrainResult pretrain_stats;
  TrainResult finetune_stats;
  std::vector<PseudoBox> pseudo;
  PseudoQuality pseudo_q;
  ApBreakdown ap;
  std::vector<MetricRow> metrics;
};

namespace detail {

template <typename T>
std::vector<Tensor<T>> load_images(const std::vector<DatasetRecord>& records,
                                   const DetectorConfig& cfg) {
  std::vector<Tensor<T>> images;
  for (const auto& rec : records) {
    const Tensor<float> raw = read_xray(rec.path);
    if (raw.dim(0) != cfg.image_h || raw.dim(1) != cfg.image_w || raw.dim(2) != 1) {
      throw std::runtime_error("image extent mismatch vs config: " + rec.path);
    }
    for (int lbl : rec.labels) {
      if (lbl < 0 || lbl >= cfg.num_classes) {
        throw std::runtime_error("label out of range for config: " + rec.path);
      }
    }
    if constexpr (std::is_same_v<T, float>) {
      images.push_back(raw);
    } else {
      images.push_back(raw.template cast<T>());
    }
  }
  return images;
}

}  // namespace detail

/// The full three-stage run. Writes stage1.ckpt, pseudo.jsonl, stage2.ckpt and
/// metrics.csv into run_dir. Byte-identical outputs for identical inputs.
inline PipelineResult run_pipeline(const std::vector<DatasetRecord>& train_records,
                                   const std::vector<DatasetRecord>& test_records,
                                   const PipelineConfig& pc, const std::string& run_dir) {
  pc.validate();
  if (train_records.empty()) throw std::invalid_argument("pipeline: empty training set");
  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  using T = float;

  const std::vector<Tensor<T>> train_images = detail::load_images<T>(train_records, pc.det);

  PipelineResult res;
  res.split = split_annotations(train_records, pc.box_ratio, pc.det.seed);

  std::vector<Tensor<T>> box_images;
  std::vector<ImageAnnotations> box_anns;
  for (int i : res.split.box_indices) {
    const auto& rec = train_records[static_cast<size_t>(i)];
    box_images.push_back(train_images[static_cast<size_t>(i)]);
    box_anns.push_back({rec.boxes, rec.labels, 1.0});
  }

  auto [params, pre_stats] = pretrain(box_images, box_anns, pc.det, pc.pretrain_epochs);
  res.pretrain_stats = pre_stats;
  const std::string stage1 = (fs::path(run_dir) / "stage1.ckpt").string();
  params.save(stage1);

  std::vector<Tensor<T>> point_images;
  std::vector<std::string> point_paths;
  for (int i : res.split.point_indices) {
    point_images.push_back(train_images[static_cast<size_t>(i)]);
    point_paths.push_back(train_records[static_cast<size_t>(i)].path);
  }
  res.pseudo = generate_pseudo_boxes(params, pc.det, point_images, res.split.points,
                                     point_paths);
  write_pseudo_jsonl((fs::path(run_dir) / "pseudo.jsonl").string(), res.pseudo);

  std::vector<Tensor<T>> union_images = box_images;
  std::vector<ImageAnnotations> union_anns = box_anns;
  {
    std::vector<ImageAnnotations> pseudo_anns(point_images.size());
    for (auto& a : pseudo_anns) a.weight = pc.pseudo_weight;
    for (const auto& pb : res.pseudo) {
      pseudo_anns[static_cast<size_t>(pb.image)].boxes.push_back(pb.box);
      pseudo_anns[static_cast<size_t>(pb.image)].labels.push_back(pb.label);
    }
    for (size_t i = 0; i < point_images.size(); ++i) {
      union_images.push_back(point_images[i]);
      union_anns.push_back(std::move(pseudo_anns[i]));
    }
  }

  auto [tuned, ft_stats] =
      finetune(stage1, union_images, union_anns, pc.det, pc.finetune_epochs);
  res.finetune_stats = ft_stats;
  tuned.save((fs::path(run_dir) / "stage2.ckpt").string());

  // Held-out evaluation.
  const std::vector<Tensor<T>> test_images = detail::load_images<T>(test_records, pc.det);
  std::vector<EvalDetection> dets;
  std::vector<EvalGroundTruth> gts;
  for (size_t i = 0; i < test_images.size(); ++i) {
    for (const auto& d : infer(test_images[i], tuned, pc.det)) {
      dets.push_back({static_cast<int>(i), d.label, d.score, d.box});
    }
    const auto& rec = test_records[i];
    for (size_t b = 0; b < rec.boxes.size(); ++b) {
      gts.push_back({static_cast<int>(i), rec.labels[b], rec.boxes[b]});
    }
  }
  res.ap = compute_ap(dets, gts, pc.det.num_classes);

  // Pseudo-box agreement against the withheld ground truth of point images.
  std::vector<PseudoSample> samples;
  std::vector<EvalGroundTruth> point_gts;
  for (size_t i = 0; i < res.split.point_indices.size(); ++i) {
    const auto& rec = train_records[static_cast<size_t>(res.split.point_indices[i])];
    for (size_t b = 0; b < rec.boxes.size(); ++b) {
      point_gts.push_back({static_cast<int>(i), rec.labels[b], rec.boxes[b]});
    }
  }
  for (const auto& pb : res.pseudo) {
    samples.push_back({pb.image, pb.label, pb.px, pb.py, pb.box});
  }
  res.pseudo_q = pseudo_quality(samples, point_gts);
  if (res.pseudo_q.orphaned > 0) {
    std::cerr << "warning: " << res.pseudo_q.orphaned
              << " pseudo points lie in no ground-truth box and were excluded\n";
  }

  for (size_t c = 0; c < res.ap.classes.size(); ++c) {
    res.metrics.push_back({"ap50", std::to_string(res.ap.classes[c]), res.ap.ap[c][0]});
  }
  res.metrics.push_back({"ap50", "mean", res.ap.mean_ap50});
  res.metrics.push_back({"ap", "mean", res.ap.mean_ap});
  res.metrics.push_back({"pseudo_mean_iou", "all", res.pseudo_q.mean_iou});
  res.metrics.push_back({"pseudo_recall50", "all", res.pseudo_q.recall_at_half});
  res.metrics.push_back(
      {"pseudo_matched", "all", static_cast<double>(res.pseudo_q.matched)});
  res.metrics.push_back(
      {"pseudo_orphaned", "all", static_cast<double>(res.pseudo_q.orphaned)});
  res.metrics.push_back({"loss_pretrain", "all", res.pretrain_stats.final_loss});
  res.metrics.push_back({"loss_finetune", "all", res.finetune_stats.final_loss});
  write_metrics_csv((fs::path(run_dir) / "metrics.csv").string(), res.metrics);
  return res;
}

}  // namespace bcr
