#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bcr/geometry.hpp"

// Detection quality metrics: average precision with greedy matching over a
// ladder of IoU thresholds, 101-point interpolation, plus agreement scores
// for pseudo boxes against the boxes their source points fell in.

namespace bcr {

inline constexpr double kApThresholds[10] = {0.50, 0.55, 0.60, 0.65, 0.70,
                                             0.75, 0.80, 0.85, 0.90, 0.95};

struct EvalDetection {
  int image = 0;
  int label = 0;
  double score = 0;
  Box box;
};

struct EvalGroundTruth {
  int image = 0;
  int label = 0;
  Box box;
};

struct ApBreakdown {
  std::vector<int> classes;             // classes with at least one ground truth
  std::vector<std::vector<double>> ap;  // [class position][threshold]
  double mean_ap50 = 0;                 // over classes, threshold 0.50
  double mean_ap = 0;                   // over classes and all thresholds

  double ap_for(int label, int threshold_index) const {
    for (size_t c = 0; c < classes.size(); ++c) {
      if (classes[c] == label) return ap[c][static_cast<size_t>(threshold_index)];
    }
    throw std::out_of_range("class has no ground truth: " + std::to_string(label));
  }
};

/// Average precision per class per IoU threshold. Detections are ranked by
/// score, earlier insertion first on ties; each greedily claims the unmatched
/// same-image ground truth with the highest IoU if that IoU clears the
/// threshold. Precision is interpolated at 101 recall points. Classes without
/// ground truth are skipped entirely.
inline ApBreakdown compute_ap(const std::vector<EvalDetection>& dets,
                              const std::vector<EvalGroundTruth>& gts, int num_classes) {
  if (num_classes <= 0) throw std::invalid_argument("num_classes must be positive");
  ApBreakdown out;
  for (int cls = 0; cls < num_classes; ++cls) {
    int n_gt = 0;
    for (const auto& g : gts) {
      if (g.label == cls) ++n_gt;
    }
    if (n_gt == 0) continue;
    out.classes.push_back(cls);

    std::vector<size_t> order;  // indices into dets, this class only
    for (size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].label == cls) order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return dets[a].score > dets[b].score;
    });

    std::vector<double> per_threshold;
    for (double thr : kApThresholds) {
      std::vector<char> gt_taken(gts.size(), 0);
      std::vector<char> is_tp(order.size(), 0);
      for (size_t k = 0; k < order.size(); ++k) {
        const EvalDetection& d = dets[order[k]];
        double best_iou = 0;
        size_t best_gt = gts.size();
        for (size_t g = 0; g < gts.size(); ++g) {
          if (gts[g].label != cls || gts[g].image != d.image || gt_taken[g]) continue;
          const double v = iou(d.box, gts[g].box);
          if (v > best_iou) {
            best_iou = v;
            best_gt = g;
          }
        }
        if (best_gt < gts.size() && best_iou >= thr) {
          gt_taken[best_gt] = 1;
          is_tp[k] = 1;
        }
      }
      std::vector<double> precision(order.size()), recall(order.size());
      int tp = 0, fp = 0;
      for (size_t k = 0; k < order.size(); ++k) {
        if (is_tp[k]) {
          ++tp;
        } else {
          ++fp;
        }
        precision[k] = static_cast<double>(tp) / static_cast<double>(tp + fp);
        recall[k] = static_cast<double>(tp) / static_cast<double>(n_gt);
      }
      double acc = 0;
      for (int r = 0; r <= 100; ++r) {
        const double want = static_cast<double>(r) / 100.0;
        double best = 0;
        for (size_t k = 0; k < order.size(); ++k) {
          if (recall[k] >= want) best = std::max(best, precision[k]);
        }
        acc += best;
      }
      per_threshold.push_back(acc / 101.0);
    }
    out.ap.push_back(std::move(per_threshold));
  }

  if (!out.classes.empty()) {
    double s50 = 0, s_all = 0;
    for (const auto& row : out.ap) {
      s50 += row[0];
      for (double v : row) s_all += v;
    }
    out.mean_ap50 = s50 / static_cast<double>(out.classes.size());
    out.mean_ap = s_all / static_cast<double>(out.classes.size() * 10);
  }
  return out;
}

struct PseudoSample {
  int image = 0;
  int label = 0;
  double px = 0, py = 0;  // the point annotation the box was grown from
  Box box;
};

struct PseudoQuality {
  double mean_iou = 0;      // over matched samples
  double recall_at_half = 0;  // fraction of matched samples with IoU >= 0.5
  int matched = 0;
  int orphaned = 0;  // samples whose point lies in no same-class box
};

/// Scores pseudo boxes against the ground truth each one's source point fell
/// inside (same image and class). A point inside several boxes credits the one
/// with the highest IoU against the pseudo box; a point inside none leaves the
/// sample out of both averages and is only counted as orphaned.
inline PseudoQuality pseudo_quality(const std::vector<PseudoSample>& samples,
                                    const std::vector<EvalGroundTruth>& gts) {
  PseudoQuality q;
  double iou_acc = 0;
  int hits = 0;
  for (const auto& s : samples) {
    double best = -1;
    for (const auto& g : gts) {
      if (g.image != s.image || g.label != s.label) continue;
      if (s.px < g.box.x1 || s.px > g.box.x2 || s.py < g.box.y1 || s.py > g.box.y2) {
        continue;
      }
      best = std::max(best, iou(s.box, g.box));
    }
    if (best < 0) {
      ++q.orphaned;
      continue;
    }
    ++q.matched;
    iou_acc += best;
    if (best >= 0.5) ++hits;
  }
  if (q.matched > 0) {
    q.mean_iou = iou_acc / static_cast<double>(q.matched);
    q.recall_at_half = static_cast<double>(hits) / static_cast<double>(q.matched);
  }
  return q;
}

struct MetricRow {
  std::string metric;
  std::string cls;  // class name or "all"
  double value = 0;
};

/// Writes rows exactly in the given order: fixed header, one line per row.
/// The same rows always produce the same bytes.
inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "metric,class,value\n";
  for (const auto& r : rows) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", r.value);
    out << r.metric << "," << r.cls << "," << buf << "\n";
  }
  if (!out) throw std::runtime_error("short write: " + path);
}

}  // namespace bcr
