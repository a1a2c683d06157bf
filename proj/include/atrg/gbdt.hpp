// Copyright 2026 The atrg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ATRG_GBDT_HPP
#define ATRG_GBDT_HPP

// Gradient-boosted decision trees on logistic loss with second-order (Newton)
// boosting: depth-limited regression trees fit to gradient/hessian statistics,
// exact split enumeration over sorted unique feature values, row/column
// subsampling, L1/L2 leaf regularization, a hessian-sum floor per child, and
// early stopping on validation F1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "atrg/errors.hpp"

namespace atrg {

struct EnsembleConfig {
  int64_t estimators = 15;
  int64_t max_depth = 6;
  double row_subsample = 0.8;
  double col_subsample = 0.8;
  double min_child_weight = 3.0;
  double reg_lambda = 1.0;  // L2
  double reg_alpha = 1.0;   // L1
  double learning_rate = 0.3;
  int64_t early_stopping_rounds = 5;
  uint64_t seed = 1;

  void validate() const {
    if (estimators < 1 || max_depth < 1) throw ConfigError("ensemble config: bad tree sizes");
    if (row_subsample <= 0.0 || row_subsample > 1.0 || col_subsample <= 0.0 ||
        col_subsample > 1.0)
      throw ConfigError("ensemble config: subsample ratios must be in (0,1]");
    if (min_child_weight < 0.0 || reg_lambda < 0.0 || reg_alpha < 0.0)
      throw ConfigError("ensemble config: regularization must be >= 0");
    if (learning_rate <= 0.0 || learning_rate > 1.0)
      throw ConfigError("ensemble config: learning rate must be in (0,1]");
    if (early_stopping_rounds < 1) throw ConfigError("ensemble config: early stopping rounds");
  }
};

inline double f1_score(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw DataError("f1: length mismatch");
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == 1 && labels[i] == 1) ++tp;
    if (predictions[i] == 1 && labels[i] == 0) ++fp;
    if (predictions[i] == 0 && labels[i] == 1) ++fn;
  }
  if (tp == 0) return 0.0;
  double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

struct TreeNode {
  int32_t feature = -1;       // -1 for leaves
  double threshold = 0.0;     // go left when x[feature] < threshold
  int32_t left = -1;
  int32_t right = -1;
  double leaf_value = 0.0;    // learning-rate-scaled margin contribution
};

struct Tree {
  std::vector<TreeNode> nodes;

  double score(const std::vector<double>& x) const {
    int32_t i = 0;
    while (nodes[static_cast<size_t>(i)].feature >= 0) {
      const TreeNode& n = nodes[static_cast<size_t>(i)];
      i = x[static_cast<size_t>(n.feature)] < n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<size_t>(i)].leaf_value;
  }
};

class GbdtClassifier {
 public:
  // Fits on (rows, 0/1 labels); early stopping tracks F1 on the validation
  // split when one is given, otherwise all estimators are grown.
  static GbdtClassifier fit(const std::vector<std::vector<double>>& rows,
                            const std::vector<int>& labels, const EnsembleConfig& cfg,
                            const std::vector<std::vector<double>>& val_rows = {},
                            const std::vector<int>& val_labels = {}) {
    cfg.validate();
    if (rows.empty()) throw DataError("gbdt fit: empty input");
    if (rows.size() != labels.size()) throw DataError("gbdt fit: row/label count mismatch");
    bool has_pos = false, has_neg = false;
    for (int y : labels) (y == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw DataError("gbdt fit: training data has a single class");
    if (val_rows.size() != val_labels.size()) throw DataError("gbdt fit: bad validation split");

    GbdtClassifier model;
    model.cfg_ = cfg;
    model.n_features_ = static_cast<int64_t>(rows[0].size());
    for (const auto& r : rows)
      if (static_cast<int64_t>(r.size()) != model.n_features_)
        throw DataError("gbdt fit: ragged feature rows");

    size_t n = rows.size();
    std::vector<double> margin(n, 0.0);
    std::mt19937_64 rng(cfg.seed);

    double best_val_f1 = -1.0;
    size_t best_tree_count = 0;
    int64_t rounds_since_best = 0;

    for (int64_t round = 0; round < cfg.estimators; ++round) {
      std::vector<double> grad(n), hess(n);
      for (size_t i = 0; i < n; ++i) {
        double p = sigmoid(margin[i]);
        grad[i] = p - static_cast<double>(labels[i]);
        hess[i] = std::max(p * (1.0 - p), 1e-16);
      }

      std::vector<size_t> row_idx = subsample_rows(n, cfg.row_subsample, rng);
      std::vector<int32_t> cols = subsample_cols(model.n_features_, cfg.col_subsample, rng);

      Tree tree;
      model.grow_node(tree, rows, grad, hess, row_idx, cols, 0);
      model.trees_.push_back(tree);
      for (size_t i = 0; i < n; ++i) margin[i] += tree.score(rows[i]);

      if (!val_rows.empty()) {
        double f1 = f1_score(model.predict_labels(val_rows), val_labels);
        if (f1 > best_val_f1) {
          best_val_f1 = f1;
          best_tree_count = model.trees_.size();
          rounds_since_best = 0;
        } else {
          ++rounds_since_best;
          if (rounds_since_best >= cfg.early_stopping_rounds) break;
        }
      }
    }
    if (!val_rows.empty() && best_tree_count > 0) model.trees_.resize(best_tree_count);
    return model;
  }

  double predict_proba(const std::vector<double>& x) const {
    if (static_cast<int64_t>(x.size()) != n_features_)
      throw DataError("gbdt predict: feature arity mismatch");
    double m = 0.0;
    for (const auto& t : trees_) m += t.score(x);
    return sigmoid(m);
  }

  std::vector<double> predict_proba(const std::vector<std::vector<double>>& rows) const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(predict_proba(r));
    return out;
  }

  std::vector<int> predict_labels(const std::vector<std::vector<double>>& rows,
                                  double threshold = 0.5) const {
    std::vector<int> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(predict_proba(r) >= threshold ? 1 : 0);
    return out;
  }

  const std::vector<Tree>& trees() const { return trees_; }
  int64_t feature_count() const { return n_features_; }
  const EnsembleConfig& config() const { return cfg_; }

  // Training logistic loss under the current ensemble prefix; used by the
  // monotonicity property test.
  double logistic_loss(const std::vector<std::vector<double>>& rows,
                       const std::vector<int>& labels, size_t tree_prefix) const {
    double acc = 0.0;
    for (size_t i = 0; i < rows.size(); ++i) {
      double m = 0.0;
      for (size_t t = 0; t < std::min(tree_prefix, trees_.size()); ++t)
        m += trees_[t].score(rows[i]);
      double y = static_cast<double>(labels[i]);
      acc += std::log1p(std::exp(-std::abs(m))) + std::max(m, 0.0) - y * m;
    }
    return acc / static_cast<double>(rows.size());
  }

  nlohmann::json to_json() const {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) {
      nlohmann::json nodes = nlohmann::json::array();
      for (const auto& n : t.nodes) {
        nodes.push_back({{"feature", n.feature},
                         {"threshold", n.threshold},
                         {"left", n.left},
                         {"right", n.right},
                         {"leaf_value", n.leaf_value}});
      }
      trees.push_back({{"nodes", nodes}});
    }
    nlohmann::json config = {{"estimators", cfg_.estimators},
                             {"max_depth", cfg_.max_depth},
                             {"row_subsample", cfg_.row_subsample},
                             {"col_subsample", cfg_.col_subsample},
                             {"min_child_weight", cfg_.min_child_weight},
                             {"reg_lambda", cfg_.reg_lambda},
                             {"reg_alpha", cfg_.reg_alpha},
                             {"learning_rate", cfg_.learning_rate},
                             {"early_stopping_rounds", cfg_.early_stopping_rounds},
                             {"seed", cfg_.seed}};
    return {{"trees", trees}, {"config", config}, {"n_features", n_features_}};
  }

  static GbdtClassifier from_json(const nlohmann::json& j) {
    GbdtClassifier model;
    const auto& c = j.at("config");
    model.cfg_.estimators = c.at("estimators").get<int64_t>();
    model.cfg_.max_depth = c.at("max_depth").get<int64_t>();
    model.cfg_.row_subsample = c.at("row_subsample").get<double>();
    model.cfg_.col_subsample = c.at("col_subsample").get<double>();
    model.cfg_.min_child_weight = c.at("min_child_weight").get<double>();
    model.cfg_.reg_lambda = c.at("reg_lambda").get<double>();
    model.cfg_.reg_alpha = c.at("reg_alpha").get<double>();
    model.cfg_.learning_rate = c.at("learning_rate").get<double>();
    model.cfg_.early_stopping_rounds = c.at("early_stopping_rounds").get<int64_t>();
    model.cfg_.seed = c.at("seed").get<uint64_t>();
    model.n_features_ = j.at("n_features").get<int64_t>();
    for (const auto& tj : j.at("trees")) {
      Tree t;
      for (const auto& nj : tj.at("nodes")) {
        TreeNode n;
        n.feature = nj.at("feature").get<int32_t>();
        n.threshold = nj.at("threshold").get<double>();
        n.left = nj.at("left").get<int32_t>();
        n.right = nj.at("right").get<int32_t>();
        n.leaf_value = nj.at("leaf_value").get<double>();
        t.nodes.push_back(n);
      }
      model.trees_.push_back(std::move(t));
    }
    return model;
  }

 private:
  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  // L1 soft threshold on the gradient sum.
  double shrink(double g) const {
    if (g > cfg_.reg_alpha) return g - cfg_.reg_alpha;
    if (g < -cfg_.reg_alpha) return g + cfg_.reg_alpha;
    return 0.0;
  }

  double node_score(double g, double h) const {
    double s = shrink(g);
    return s * s / (h + cfg_.reg_lambda);
  }

  double leaf_weight(double g, double h) const { return -shrink(g) / (h + cfg_.reg_lambda); }

  static std::vector<size_t> subsample_rows(size_t n, double ratio, std::mt19937_64& rng) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    if (ratio >= 1.0) return idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    size_t keep = std::max<size_t>(1, static_cast<size_t>(std::floor(ratio * static_cast<double>(n))));
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  static std::vector<int32_t> subsample_cols(int64_t f, double ratio, std::mt19937_64& rng) {
    std::vector<int32_t> cols(static_cast<size_t>(f));
    for (int64_t i = 0; i < f; ++i) cols[static_cast<size_t>(i)] = static_cast<int32_t>(i);
    if (ratio >= 1.0) return cols;
    std::shuffle(cols.begin(), cols.end(), rng);
    size_t keep = std::max<size_t>(
        1, static_cast<size_t>(std::llround(ratio * static_cast<double>(f))));
    cols.resize(std::min(cols.size(), keep));
    std::sort(cols.begin(), cols.end());
    return cols;
  }

  struct BestSplit {
    double gain = 0.0;
    int32_t feature = -1;
    double threshold = 0.0;
  };

  // Exact enumeration over sorted unique feature values.
  BestSplit find_split(const std::vector<std::vector<double>>& rows,
                       const std::vector<double>& grad, const std::vector<double>& hess,
                       const std::vector<size_t>& node_rows,
                       const std::vector<int32_t>& cols) const {
    double g_total = 0.0, h_total = 0.0;
    for (size_t i : node_rows) {
      g_total += grad[i];
      h_total += hess[i];
    }
    double parent = node_score(g_total, h_total);
    BestSplit best;

    std::vector<std::pair<double, size_t>> sorted;
    sorted.reserve(node_rows.size());
    for (int32_t f : cols) {
      sorted.clear();
      for (size_t i : node_rows) sorted.emplace_back(rows[i][static_cast<size_t>(f)], i);
      std::sort(sorted.begin(), sorted.end());
      double g_left = 0.0, h_left = 0.0;
      for (size_t k = 0; k + 1 < sorted.size(); ++k) {
        g_left += grad[sorted[k].second];
        h_left += hess[sorted[k].second];
        if (sorted[k].first == sorted[k + 1].first) continue;  // not a boundary
        double h_right = h_total - h_left;
        if (h_left < cfg_.min_child_weight || h_right < cfg_.min_child_weight) continue;
        double g_right = g_total - g_left;
        double gain =
            0.5 * (node_score(g_left, h_left) + node_score(g_right, h_right) - parent);
        if (gain > best.gain + 1e-12) {
          best.gain = gain;
          best.feature = f;
          best.threshold = 0.5 * (sorted[k].first + sorted[k + 1].first);
        }
      }
    }
    return best;
  }

  int32_t grow_node(Tree& tree, const std::vector<std::vector<double>>& rows,
                    const std::vector<double>& grad, const std::vector<double>& hess,
                    const std::vector<size_t>& node_rows, const std::vector<int32_t>& cols,
                    int64_t depth) {
    int32_t id = static_cast<int32_t>(tree.nodes.size());
    tree.nodes.emplace_back();

    double g = 0.0, h = 0.0;
    for (size_t i : node_rows) {
      g += grad[i];
      h += hess[i];
    }

    BestSplit split;
    if (depth < cfg_.max_depth && node_rows.size() >= 2)
      split = find_split(rows, grad, hess, node_rows, cols);

    if (split.feature < 0) {
      tree.nodes[static_cast<size_t>(id)].leaf_value = cfg_.learning_rate * leaf_weight(g, h);
      return id;
    }

    std::vector<size_t> left_rows, right_rows;
    for (size_t i : node_rows) {
      if (rows[i][static_cast<size_t>(split.feature)] < split.threshold)
        left_rows.push_back(i);
      else
        right_rows.push_back(i);
    }
    int32_t left = grow_node(tree, rows, grad, hess, left_rows, cols, depth + 1);
    int32_t right = grow_node(tree, rows, grad, hess, right_rows, cols, depth + 1);
    TreeNode& n = tree.nodes[static_cast<size_t>(id)];
    n.feature = split.feature;
    n.threshold = split.threshold;
    n.left = left;
    n.right = right;
    return id;
  }

  EnsembleConfig cfg_;
  std::vector<Tree> trees_;
  int64_t n_features_ = 0;
};

}  // namespace atrg

#endif  // ATRG_GBDT_HPP
