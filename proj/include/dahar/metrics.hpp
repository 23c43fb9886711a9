#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "dahar/labels.hpp"

namespace dahar {

// Post-sigmoid scores and tri-state labels for one evaluation, row-major B x C.
struct ScoreMatrix {
  int batch = 0;
  int attributes = 0;
  std::vector<double> scores;
  std::vector<Label> labels;

  double score(int b, int c) const { return scores[static_cast<size_t>(b) * attributes + c]; }
  Label label(int b, int c) const { return labels[static_cast<size_t>(b) * attributes + c]; }
};

// Interpolation-free AP: mean of precision at each positive's rank.
// Ranking is by descending score with ties broken by ascending original
// index; unknown labels are removed before ranking.
inline double average_precision(const std::vector<double>& scores, const std::vector<Label>& labels) {
  if (scores.size() != labels.size()) throw ConfigError("average_precision: size mismatch");
  std::vector<int> idx;
  idx.reserve(scores.size());
  int positives = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == Label::unknown) continue;
    idx.push_back(static_cast<int>(i));
    if (labels[i] == Label::positive) ++positives;
  }
  if (positives == 0) throw ConfigError("average_precision: no known positive sample");
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  double ap = 0.0;
  int hits = 0;
  for (size_t rank = 0; rank < idx.size(); ++rank) {
    if (labels[idx[rank]] == Label::positive) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

struct MapResult {
  double map = 0.0;
  std::vector<double> per_attribute;  // NaN where skipped
  std::vector<bool> eligible;         // has at least one known positive
};

inline MapResult map_score(const ScoreMatrix& m) {
  MapResult out;
  out.per_attribute.assign(m.attributes, std::nan(""));
  out.eligible.assign(m.attributes, false);
  double acc = 0.0;
  int eligible_count = 0;
  for (int c = 0; c < m.attributes; ++c) {
    std::vector<double> s(m.batch);
    std::vector<Label> l(m.batch);
    int positives = 0;
    for (int b = 0; b < m.batch; ++b) {
      s[b] = m.score(b, c);
      l[b] = m.label(b, c);
      if (l[b] == Label::positive) ++positives;
    }
    if (positives == 0) continue;
    out.eligible[c] = true;
    out.per_attribute[c] = average_precision(s, l);
    acc += out.per_attribute[c];
    ++eligible_count;
  }
  if (eligible_count == 0) throw ConfigError("map_score: no attribute has a known positive");
  out.map = acc / static_cast<double>(eligible_count);
  return out;
}

// mA = (1/2C) sum_c (TP_c/P_c + TN_c/N_c) over attributes with both a
// known positive and a known negative; prediction is score > threshold.
inline double mean_accuracy(const ScoreMatrix& m, double threshold = 0.5) {
  double acc = 0.0;
  int eligible = 0;
  for (int c = 0; c < m.attributes; ++c) {
    int64_t p = 0, n = 0, tp = 0, tn = 0;
    for (int b = 0; b < m.batch; ++b) {
      Label l = m.label(b, c);
      if (l == Label::unknown) continue;
      bool pred = m.score(b, c) > threshold;
      if (l == Label::positive) {
        ++p;
        if (pred) ++tp;
      } else {
        ++n;
        if (!pred) ++tn;
      }
    }
    if (p == 0 || n == 0) continue;
    acc += 0.5 * (static_cast<double>(tp) / p + static_cast<double>(tn) / n);
    ++eligible;
  }
  if (eligible == 0) throw ConfigError("mean_accuracy: no attribute has both labels present");
  return acc / static_cast<double>(eligible);
}

struct InstanceMetrics {
  double acc = 0.0, prec = 0.0, rec = 0.0, f1 = 0.0;
};

// Set-overlap metrics per sample, averaged over the dataset. Unknown
// entries are dropped from both the true and predicted sets. Empty-set
// conventions: a sample scores 1 on a ratio whose reference set is empty
// only when the other set is empty too, else 0; an empty union counts
// as full agreement.
inline InstanceMetrics instance_metrics(const ScoreMatrix& m, double threshold = 0.5) {
  InstanceMetrics out;
  double s_acc = 0.0, s_prec = 0.0, s_rec = 0.0;
  for (int b = 0; b < m.batch; ++b) {
    int64_t y = 0, yhat = 0, both = 0;
    for (int c = 0; c < m.attributes; ++c) {
      Label l = m.label(b, c);
      if (l == Label::unknown) continue;
      bool truth = (l == Label::positive);
      bool pred = m.score(b, c) > threshold;
      if (truth) ++y;
      if (pred) ++yhat;
      if (truth && pred) ++both;
    }
    int64_t uni = y + yhat - both;
    s_acc += (uni == 0) ? 1.0 : static_cast<double>(both) / static_cast<double>(uni);
    s_prec += (yhat == 0) ? (y == 0 ? 1.0 : 0.0) : static_cast<double>(both) / static_cast<double>(yhat);
    s_rec += (y == 0) ? (yhat == 0 ? 1.0 : 0.0) : static_cast<double>(both) / static_cast<double>(y);
  }
  if (m.batch > 0) {
    out.acc = s_acc / m.batch;
    out.prec = s_prec / m.batch;
    out.rec = s_rec / m.batch;
    out.f1 = (out.prec + out.rec > 0.0) ? 2.0 * out.prec * out.rec / (out.prec + out.rec) : 0.0;
  }
  return out;
}

struct AttributeCounts {
  int64_t positives = 0, negatives = 0, unknowns = 0;
};

struct MetricsReport {
  std::string protocol;  // "wider" | "rap"
  double threshold = 0.5;
  std::vector<double> per_attribute_ap;
  std::vector<bool> ap_valid;
  std::vector<AttributeCounts> counts;
  double map = 0.0;
  bool has_rap_fields = false;
  double ma = 0.0, acc = 0.0, prec = 0.0, rec = 0.0, f1 = 0.0;

  std::string to_text() const {
    auto fmt = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", v);
      return std::string(buf);
    };
    std::string s;
    s += "protocol=" + protocol + "\n";
    s += "threshold=" + fmt(threshold) + "\n";
    s += "ap_variant=mean_precision_at_positive_ranks\n";
    s += "tie_break=score_desc_then_index_asc\n";
    s += "unknown_labels=excluded\n";
    s += "empty_set_convention=match_empty_is_one\n";
    s += "attribute,ap,positives,negatives,unknowns\n";
    for (size_t c = 0; c < per_attribute_ap.size(); ++c) {
      char name[32];
      std::snprintf(name, sizeof(name), "attr_%03zu", c);
      s += std::string(name) + "," + (ap_valid[c] ? fmt(per_attribute_ap[c]) : "skipped") + "," +
           std::to_string(counts[c].positives) + "," + std::to_string(counts[c].negatives) + "," +
           std::to_string(counts[c].unknowns) + "\n";
    }
    s += "summary,map=" + fmt(map);
    if (has_rap_fields) {
      s += ",ma=" + fmt(ma) + ",acc=" + fmt(acc) + ",prec=" + fmt(prec) + ",rec=" + fmt(rec) +
           ",f1=" + fmt(f1);
    }
    s += "\n";
    return s;
  }
};

inline MetricsReport metrics_report(const ScoreMatrix& m, const std::string& protocol) {
  if (protocol != "wider" && protocol != "rap")
    throw ConfigError("metrics_report: protocol must be wider|rap, got '" + protocol + "'");
  MetricsReport r;
  r.protocol = protocol;
  MapResult mr = map_score(m);
  r.per_attribute_ap = mr.per_attribute;
  r.ap_valid = mr.eligible;
  r.map = mr.map;
  r.counts.assign(m.attributes, AttributeCounts{});
  for (int c = 0; c < m.attributes; ++c)
    for (int b = 0; b < m.batch; ++b) {
      Label l = m.label(b, c);
      if (l == Label::positive)
        ++r.counts[c].positives;
      else if (l == Label::negative)
        ++r.counts[c].negatives;
      else
        ++r.counts[c].unknowns;
    }
  if (protocol == "rap") {
    r.has_rap_fields = true;
    r.ma = mean_accuracy(m, r.threshold);
    InstanceMetrics im = instance_metrics(m, r.threshold);
    r.acc = im.acc;
    r.prec = im.prec;
    r.rec = im.rec;
    r.f1 = im.f1;
  }
  return r;
}

}  // namespace dahar
