#include "reqvec/classify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "reqvec/embedder.hpp"
#include "reqvec/errors.hpp"
#include "reqvec/rng.hpp"

namespace reqvec {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

void check_xy(const Eigen::MatrixXd& x, const std::vector<int>& y) {
  if (x.rows() != static_cast<Eigen::Index>(y.size()))
    raise(Errc::dimension_mismatch, std::to_string(x.rows()) + " rows vs " +
                                        std::to_string(y.size()) + " labels");
  bool has0 = false, has1 = false;
  for (int v : y) (v == 1 ? has1 : has0) = true;
  if (!has0 || !has1) raise(Errc::single_class, "training data contains a single class");
}

}  // namespace

std::vector<int> binary_labels(const std::vector<Label>& labels) {
  std::vector<int> y;
  y.reserve(labels.size());
  for (Label l : labels) {
    if (l == Label::unlabeled) raise(Errc::schema_error, "unlabeled doc in labeled operation");
    y.push_back(l == Label::anomaly ? 1 : 0);
  }
  return y;
}

StandardScaler StandardScaler::fit(const Eigen::MatrixXd& x) {
  if (x.rows() == 0) raise(Errc::empty_input, "cannot fit a scaler on zero rows");
  StandardScaler s;
  s.mean = x.colwise().mean();
  Eigen::VectorXd var =
      (x.rowwise() - s.mean.transpose()).array().square().colwise().mean();
  s.stddev = var.array().sqrt();
  for (Eigen::Index i = 0; i < s.stddev.size(); ++i)
    if (s.stddev(i) == 0.0) s.stddev(i) = 1.0;
  return s;
}

StandardScaler StandardScaler::identity(Eigen::Index dim) {
  StandardScaler s;
  s.mean = Eigen::VectorXd::Zero(dim);
  s.stddev = Eigen::VectorXd::Ones(dim);
  return s;
}

Eigen::MatrixXd StandardScaler::transform(const Eigen::MatrixXd& x) const {
  if (x.cols() != mean.size())
    raise(Errc::dimension_mismatch, "scaler dim " + std::to_string(mean.size()) + " vs input " +
                                        std::to_string(x.cols()));
  return ((x.rowwise() - mean.transpose()).array().rowwise() /
          stddev.transpose().array())
      .matrix();
}

Eigen::RowVectorXd StandardScaler::transform(const Eigen::RowVectorXd& x) const {
  return transform(Eigen::MatrixXd(x)).row(0);
}

// ---------------------------------------------------------------------------
// Linear trainers
// ---------------------------------------------------------------------------

LinearModel train_logreg(const Eigen::MatrixXd& x, const std::vector<int>& y,
                         const LogRegConfig& config) {
  check_xy(x, y);
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();

  LinearModel model;
  model.kind = LinearModel::Kind::logreg;
  model.scaler = StandardScaler::fit(x);

  Eigen::MatrixXd zaug(n, d + 1);
  zaug.leftCols(d) = model.scaler.transform(x);
  zaug.col(d).setOnes();

  Eigen::VectorXd s(n);
  for (Eigen::Index i = 0; i < n; ++i) s(i) = y[static_cast<size_t>(i)] == 1 ? 1.0 : -1.0;

  double step = config.lr;
  if (step <= 0.0) {
    // Lipschitz bound of the gradient: sigma_max(Z)^2 / (4n) + l2, with
    // sigma_max^2 from deterministic power iteration.
    Eigen::VectorXd v = Eigen::VectorXd::Ones(d + 1).normalized();
    double sigma2 = 0.0;
    for (int it = 0; it < 100; ++it) {
      Eigen::VectorXd u = zaug.transpose() * (zaug * v);
      const double norm = u.norm();
      if (norm == 0.0) break;
      v = u / norm;
      sigma2 = norm;
    }
    step = 1.0 / (sigma2 / (4.0 * double(n)) + config.l2);
  }

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  int iters = 0;
  bool converged = false;
  for (; iters < config.max_iter; ++iters) {
    const Eigen::VectorXd margins = (zaug * theta).cwiseProduct(s);
    // sigmoid(-m), evaluated stably on both tails
    Eigen::VectorXd q(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = margins(i);
      q(i) = m >= 0.0 ? std::exp(-m) / (1.0 + std::exp(-m)) : 1.0 / (1.0 + std::exp(m));
    }
    Eigen::VectorXd grad = -(zaug.transpose() * q.cwiseProduct(s)) / double(n);
    grad.head(d) += config.l2 * theta.head(d);
    if (grad.norm() < config.tol) {
      converged = true;
      break;
    }
    theta -= step * grad;
  }

  model.w = theta.head(d);
  model.b = theta(d);
  model.iterations = iters;
  model.converged = converged;
  return model;
}

LinearModel train_linear_svm(const Eigen::MatrixXd& x, const std::vector<int>& y,
                             const SvmConfig& config) {
  check_xy(x, y);
  if (config.epochs < 1) raise(Errc::invalid_config, "epochs must be >= 1");
  if (config.C <= 0.0) raise(Errc::invalid_config, "C must be positive");
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();

  LinearModel model;
  model.kind = LinearModel::Kind::linear_svm;
  model.scaler = StandardScaler::fit(x);
  const Eigen::MatrixXd z = model.scaler.transform(x);

  // Pegasos: stochastic subgradient descent on the hinge objective with
  // lambda = 1 / (C n); the bias stays unregularized.
  const double lambda = 1.0 / (config.C * double(n));
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  Rng rng(config.seed);
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  int64_t t = 0;
  int last_epoch_violations = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    last_epoch_violations = 0;
    for (Eigen::Index i : order) {
      ++t;
      const double eta = 1.0 / (lambda * double(t));
      const double s = y[static_cast<size_t>(i)] == 1 ? 1.0 : -1.0;
      const double margin = s * (z.row(i).dot(w) + b);
      w *= (1.0 - eta * lambda);
      if (margin < 1.0) {
        w += (eta * s) * z.row(i).transpose();
        b += eta * s;
        ++last_epoch_violations;
      }
    }
  }

  model.w = std::move(w);
  model.b = b;
  model.iterations = static_cast<int>(t);
  model.converged = last_epoch_violations == 0;
  return model;
}

// ---------------------------------------------------------------------------
// Random forest
// ---------------------------------------------------------------------------

namespace {

struct TreeBuilder {
  const Eigen::MatrixXd& x;
  const std::vector<int>& y;
  int max_features;
  int max_depth;
  int min_samples_leaf;
  Rng& rng;
  std::vector<TreeNode> nodes;
  std::vector<int> feature_pool;

  int build(std::vector<Eigen::Index>& samples, int depth) {
    const int node_id = static_cast<int>(nodes.size());
    nodes.emplace_back();

    const auto n = static_cast<double>(samples.size());
    double pos = 0;
    for (Eigen::Index i : samples) pos += y[static_cast<size_t>(i)];
    const double p1 = pos / n;
    nodes[static_cast<size_t>(node_id)].p_anomaly = p1;

    const bool pure = pos == 0 || pos == n;
    const bool depth_capped = max_depth > 0 && depth >= max_depth;
    if (pure || depth_capped || samples.size() < 2 * static_cast<size_t>(min_samples_leaf))
      return node_id;

    // Candidate features: a seeded draw without replacement.
    for (size_t i = feature_pool.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(rng.uniform_index(i));
      std::swap(feature_pool[i - 1], feature_pool[j]);
    }
    const int num_candidates = std::min<int>(max_features, static_cast<int>(feature_pool.size()));

    const double parent_gini = 2.0 * p1 * (1.0 - p1);
    double best_gain = 1e-12;
    int best_feature = -1;
    double best_threshold = 0.0;

    std::vector<Eigen::Index> sorted = samples;
    for (int c = 0; c < num_candidates; ++c) {
      const int feat = feature_pool[feature_pool.size() - 1 - static_cast<size_t>(c)];
      std::sort(sorted.begin(), sorted.end(), [&](Eigen::Index a, Eigen::Index b) {
        return x(a, feat) < x(b, feat);
      });
      double left_pos = 0;
      for (size_t i = 0; i + 1 < sorted.size(); ++i) {
        left_pos += y[static_cast<size_t>(sorted[i])];
        const double va = x(sorted[i], feat);
        const double vb = x(sorted[i + 1], feat);
        if (va == vb) continue;
        const auto nl = static_cast<double>(i + 1);
        const double nr = n - nl;
        if (nl < min_samples_leaf || nr < min_samples_leaf) continue;
        const double pl = left_pos / nl;
        const double pr = (pos - left_pos) / nr;
        const double child =
            (nl * 2.0 * pl * (1.0 - pl) + nr * 2.0 * pr * (1.0 - pr)) / n;
        const double gain = parent_gini - child;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = feat;
          best_threshold = va + 0.5 * (vb - va);
        }
      }
    }

    if (best_feature < 0) return node_id;

    std::vector<Eigen::Index> left, right;
    for (Eigen::Index i : samples)
      (x(i, best_feature) <= best_threshold ? left : right).push_back(i);
    samples.clear();
    samples.shrink_to_fit();

    const int left_id = build(left, depth + 1);
    const int right_id = build(right, depth + 1);
    auto& node = nodes[static_cast<size_t>(node_id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = left_id;
    node.right = right_id;
    return node_id;
  }
};

}  // namespace

double DecisionTree::predict(const Eigen::RowVectorXd& x) const {
  int i = 0;
  while (nodes[static_cast<size_t>(i)].feature >= 0) {
    const auto& n = nodes[static_cast<size_t>(i)];
    if (n.feature >= x.size())
      raise(Errc::dimension_mismatch, "tree splits on feature " + std::to_string(n.feature) +
                                          " but input has " + std::to_string(x.size()));
    i = x(n.feature) <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<size_t>(i)].p_anomaly;
}

ForestModel train_random_forest(const Eigen::MatrixXd& x, const std::vector<int>& y,
                                const ForestConfig& config) {
  check_xy(x, y);
  if (config.num_trees < 1) raise(Errc::invalid_config, "num_trees must be >= 1");
  if (config.min_samples_leaf < 1) raise(Errc::invalid_config, "min_samples_leaf must be >= 1");
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();

  ForestModel model;
  model.max_features =
      config.max_features > 0
          ? config.max_features
          : std::max(1, static_cast<int>(std::lround(std::sqrt(double(d)))));

  std::vector<std::vector<char>> in_bag(static_cast<size_t>(config.num_trees),
                                        std::vector<char>(static_cast<size_t>(n), 0));
  const uint64_t base = fnv1a64("forest", config.seed);
  for (int t = 0; t < config.num_trees; ++t) {
    const auto t64 = static_cast<uint64_t>(t);
    Rng rng(fnv1a64(&t64, sizeof t64, base));

    std::vector<Eigen::Index> samples;
    samples.reserve(static_cast<size_t>(n));
    if (config.bootstrap) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto j = static_cast<Eigen::Index>(rng.uniform_index(static_cast<uint64_t>(n)));
        samples.push_back(j);
        in_bag[static_cast<size_t>(t)][static_cast<size_t>(j)] = 1;
      }
    } else {
      for (Eigen::Index i = 0; i < n; ++i) samples.push_back(i);
      std::fill(in_bag[static_cast<size_t>(t)].begin(), in_bag[static_cast<size_t>(t)].end(), 1);
    }

    TreeBuilder builder{x,   y,   model.max_features, config.max_depth, config.min_samples_leaf,
                        rng, {}, {}};
    builder.feature_pool.resize(static_cast<size_t>(d));
    std::iota(builder.feature_pool.begin(), builder.feature_pool.end(), 0);
    builder.build(samples, 0);
    model.trees.push_back(DecisionTree{std::move(builder.nodes)});
  }

  if (config.bootstrap) {
    Eigen::Index voted = 0, correct = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double p_sum = 0;
      int votes = 0;
      for (int t = 0; t < config.num_trees; ++t) {
        if (in_bag[static_cast<size_t>(t)][static_cast<size_t>(i)]) continue;
        p_sum += model.trees[static_cast<size_t>(t)].predict(x.row(i));
        ++votes;
      }
      if (votes == 0) continue;
      ++voted;
      const int pred = p_sum / votes > 0.5 ? 1 : 0;
      if (pred == y[static_cast<size_t>(i)]) ++correct;
    }
    model.oob_accuracy = voted > 0 ? double(correct) / double(voted) : -1.0;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

double decision_score(const LinearModel& model, const Eigen::RowVectorXd& x) {
  if (x.size() != model.w.size())
    raise(Errc::dimension_mismatch, "model dim " + std::to_string(model.w.size()) +
                                        " vs input " + std::to_string(x.size()));
  return model.scaler.transform(x).dot(model.w) + model.b;
}

double decision_score(const ForestModel& model, const Eigen::RowVectorXd& x) {
  double p = 0;
  for (const auto& tree : model.trees) p += tree.predict(x);
  return p / static_cast<double>(model.trees.size()) - 0.5;
}

Eigen::VectorXd decision_scores(const LinearModel& model, const Eigen::MatrixXd& x) {
  if (x.cols() != model.w.size())
    raise(Errc::dimension_mismatch, "model dim " + std::to_string(model.w.size()) +
                                        " vs input " + std::to_string(x.cols()));
  return ((model.scaler.transform(x) * model.w).array() + model.b).matrix();
}

Eigen::VectorXd decision_scores(const ForestModel& model, const Eigen::MatrixXd& x) {
  Eigen::VectorXd out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = decision_score(model, x.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

FoldMetrics metrics_from(const std::vector<RocPoint>& roc, double tp, double fp, double tn,
                         double fn) {
  FoldMetrics m;
  m.fpr90 = 1.0;
  m.fpr99 = 1.0;
  for (const auto& p : roc) {
    if (p.tpr >= 0.90) m.fpr90 = std::min(m.fpr90, p.fpr);
    if (p.tpr >= 0.99) m.fpr99 = std::min(m.fpr99, p.fpr);
  }
  const double f1_den = 2 * tp + fp + fn;
  m.f1 = f1_den > 0 ? 2 * tp / f1_den : 0.0;
  const double mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  m.mcc = mcc_den > 0 ? (tp * tn - fp * fn) / std::sqrt(mcc_den) : 0.0;
  return m;
}

MeanStd mean_std(const std::vector<FoldMetrics>& folds, double FoldMetrics::* field) {
  MeanStd out;
  const double k = static_cast<double>(folds.size());
  for (const auto& f : folds) out.mean += f.*field;
  out.mean /= k;
  double var = 0;
  for (const auto& f : folds) var += (f.*field - out.mean) * (f.*field - out.mean);
  out.stddev = std::sqrt(var / k);
  return out;
}

}  // namespace

EvalReport evaluate(const Eigen::VectorXd& scores, const std::vector<int>& y) {
  const Eigen::Index n = scores.size();
  if (n != static_cast<Eigen::Index>(y.size()))
    raise(Errc::dimension_mismatch, std::to_string(n) + " scores vs " +
                                        std::to_string(y.size()) + " labels");
  double npos = 0;
  for (int v : y) npos += v;
  const double nneg = static_cast<double>(n) - npos;
  if (npos == 0 || nneg == 0) raise(Errc::single_class, "evaluation needs both classes");

  std::vector<Eigen::Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](Eigen::Index a, Eigen::Index b) { return scores(a) > scores(b); });

  EvalReport report;
  report.roc.push_back({0.0, 0.0, kInf});
  double tp = 0, fp = 0;
  size_t i = 0;
  while (i < idx.size()) {
    const double threshold = scores(idx[i]);
    size_t j = i;
    while (j < idx.size() && scores(idx[j]) == threshold) {
      (y[static_cast<size_t>(idx[j])] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    report.roc.push_back({fp / nneg, tp / npos, threshold});
    i = j;
  }

  double d_tp = 0, d_fp = 0, d_tn = 0, d_fn = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const bool pred = scores(k) > 0.0;
    const bool truth = y[static_cast<size_t>(k)] == 1;
    if (pred && truth) ++d_tp;
    else if (pred) ++d_fp;
    else if (truth) ++d_fn;
    else ++d_tn;
  }
  report.folds.push_back(metrics_from(report.roc, d_tp, d_fp, d_tn, d_fn));
  report.fpr90 = {report.folds[0].fpr90, 0.0};
  report.fpr99 = {report.folds[0].fpr99, 0.0};
  report.f1 = {report.folds[0].f1, 0.0};
  report.mcc = {report.folds[0].mcc, 0.0};
  report.threshold = 0.0;
  return report;
}

EvalReport evaluate_cv(const Eigen::MatrixXd& x, const std::vector<int>& y,
                       const TrainScoreFn& trainer, const std::vector<int>& fold_of, int k) {
  if (x.rows() != static_cast<Eigen::Index>(y.size()) || y.size() != fold_of.size())
    raise(Errc::dimension_mismatch, "rows, labels and fold assignment disagree");
  if (k < 2) raise(Errc::invalid_config, "need k >= 2 folds");

  EvalReport report;
  std::vector<std::vector<RocPoint>> fold_rocs;
  for (int f = 0; f < k; ++f) {
    std::vector<Eigen::Index> train_rows, test_rows;
    for (size_t i = 0; i < fold_of.size(); ++i)
      (fold_of[i] == f ? test_rows : train_rows).push_back(static_cast<Eigen::Index>(i));
    if (train_rows.empty() || test_rows.empty())
      raise(Errc::invalid_config, "fold " + std::to_string(f) + " is empty");

    Eigen::MatrixXd xtr(static_cast<Eigen::Index>(train_rows.size()), x.cols());
    Eigen::MatrixXd xte(static_cast<Eigen::Index>(test_rows.size()), x.cols());
    std::vector<int> ytr, yte;
    for (size_t i = 0; i < train_rows.size(); ++i) {
      xtr.row(static_cast<Eigen::Index>(i)) = x.row(train_rows[i]);
      ytr.push_back(y[static_cast<size_t>(train_rows[i])]);
    }
    for (size_t i = 0; i < test_rows.size(); ++i) {
      xte.row(static_cast<Eigen::Index>(i)) = x.row(test_rows[i]);
      yte.push_back(y[static_cast<size_t>(test_rows[i])]);
    }

    EvalReport fold_report = evaluate(trainer(xtr, ytr, xte), yte);
    report.folds.push_back(fold_report.folds[0]);
    fold_rocs.push_back(std::move(fold_report.roc));
  }

  report.fpr90 = mean_std(report.folds, &FoldMetrics::fpr90);
  report.fpr99 = mean_std(report.folds, &FoldMetrics::fpr99);
  report.f1 = mean_std(report.folds, &FoldMetrics::f1);
  report.mcc = mean_std(report.folds, &FoldMetrics::mcc);

  // Vertical averaging: sample every fold's step curve on the union of
  // breakpoints.
  std::vector<double> grid;
  for (const auto& roc : fold_rocs)
    for (const auto& p : roc) grid.push_back(p.fpr);
  grid.push_back(1.0);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  for (double g : grid) {
    double tpr_sum = 0;
    for (const auto& roc : fold_rocs) {
      double best = 0;
      for (const auto& p : roc)
        if (p.fpr <= g) best = std::max(best, p.tpr);
      tpr_sum += best;
    }
    report.roc.push_back({g, tpr_sum / static_cast<double>(k), kNan});
  }
  report.threshold = 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& a) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

}  // namespace

void save_model(const AnyModel& model, std::ostream& out) {
  nlohmann::json j;
  j["format"] = "reqvec-model";
  j["version"] = 1;
  if (const auto* linear = std::get_if<LinearModel>(&model)) {
    j["kind"] = linear->kind == LinearModel::Kind::logreg ? "logreg" : "linear_svm";
    j["weights"] = vector_to_json(linear->w);
    j["bias"] = linear->b;
    j["scaler"] = {{"mean", vector_to_json(linear->scaler.mean)},
                   {"stddev", vector_to_json(linear->scaler.stddev)}};
    j["iterations"] = linear->iterations;
    j["converged"] = linear->converged;
    j["embeddings_fingerprint"] = fingerprint_hex(linear->embeddings_fingerprint);
  } else {
    const auto& forest = std::get<ForestModel>(model);
    j["kind"] = "forest";
    j["max_features"] = forest.max_features;
    j["oob_accuracy"] = forest.oob_accuracy;
    j["embeddings_fingerprint"] = fingerprint_hex(forest.embeddings_fingerprint);
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& tree : forest.trees) {
      nlohmann::json nodes = nlohmann::json::array();
      for (const auto& n : tree.nodes)
        nodes.push_back({{"feature", n.feature},
                         {"threshold", n.threshold},
                         {"left", n.left},
                         {"right", n.right},
                         {"p", n.p_anomaly}});
      trees.push_back({{"nodes", std::move(nodes)}});
    }
    j["trees"] = std::move(trees);
  }
  out << j.dump() << '\n';
  if (!out) raise(Errc::io_error, "failed while writing model");
}

void save_model(const AnyModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Errc::io_error, "cannot open " + path + " for writing");
  save_model(model, out);
}

AnyModel load_model(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::format_error, std::string("bad model file: ") + e.what());
  }
  if (j.value("format", "") != "reqvec-model") raise(Errc::format_error, "not a model file");
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "logreg" || kind == "linear_svm") {
      LinearModel m;
      m.kind = kind == "logreg" ? LinearModel::Kind::logreg : LinearModel::Kind::linear_svm;
      m.w = vector_from_json(j.at("weights"));
      m.b = j.at("bias").get<double>();
      m.scaler.mean = vector_from_json(j.at("scaler").at("mean"));
      m.scaler.stddev = vector_from_json(j.at("scaler").at("stddev"));
      if (m.scaler.mean.size() != m.w.size() || m.scaler.stddev.size() != m.w.size())
        raise(Errc::format_error, "scaler dim disagrees with weights");
      m.iterations = j.at("iterations").get<int>();
      m.converged = j.at("converged").get<bool>();
      m.embeddings_fingerprint =
          fingerprint_from_hex(j.at("embeddings_fingerprint").get<std::string>());
      return m;
    }
    if (kind == "forest") {
      ForestModel m;
      m.max_features = j.at("max_features").get<int>();
      m.oob_accuracy = j.at("oob_accuracy").get<double>();
      m.embeddings_fingerprint =
          fingerprint_from_hex(j.at("embeddings_fingerprint").get<std::string>());
      for (const auto& tj : j.at("trees")) {
        DecisionTree tree;
        for (const auto& nj : tj.at("nodes"))
          tree.nodes.push_back({nj.at("feature").get<int>(), nj.at("threshold").get<double>(),
                                nj.at("left").get<int>(), nj.at("right").get<int>(),
                                nj.at("p").get<double>()});
        if (tree.nodes.empty()) raise(Errc::format_error, "tree with no nodes");
        m.trees.push_back(std::move(tree));
      }
      if (m.trees.empty()) raise(Errc::format_error, "forest with no trees");
      return m;
    }
    raise(Errc::format_error, "unknown model kind: " + kind);
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::format_error, std::string("bad model file: ") + e.what());
  }
}

AnyModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Errc::io_error, "cannot open " + path);
  return load_model(in);
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace {

nlohmann::json finite_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace

std::string report_to_json(const EvalReport& report, const std::string& model_name) {
  nlohmann::json j;
  j["format"] = "reqvec-report";
  j["version"] = 1;
  j["model"] = model_name;
  j["threshold"] = report.threshold;
  auto ms = [](const MeanStd& m) {
    return nlohmann::json{{"mean", m.mean}, {"std", m.stddev}};
  };
  j["fpr90"] = ms(report.fpr90);
  j["fpr99"] = ms(report.fpr99);
  j["f1"] = ms(report.f1);
  j["mcc"] = ms(report.mcc);
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : report.folds)
    folds.push_back({{"fpr90", f.fpr90}, {"fpr99", f.fpr99}, {"f1", f.f1}, {"mcc", f.mcc}});
  j["folds"] = std::move(folds);
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& p : report.roc)
    roc.push_back({p.fpr, p.tpr, finite_or_null(p.threshold)});
  j["roc"] = std::move(roc);
  return j.dump() + "\n";
}

std::string report_to_text(const EvalReport& report, const std::string& model_name) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-12s %-16s %-16s %-16s %-16s\n", "model", "FPR90", "FPR99",
                "F1", "MCC");
  out += buf;
  auto cell = [&](const MeanStd& m) {
    char c[64];
    std::snprintf(c, sizeof c, "%.3f +/- %.3f", m.mean, m.stddev);
    return std::string(c);
  };
  std::snprintf(buf, sizeof buf, "%-12s %-16s %-16s %-16s %-16s\n", model_name.c_str(),
                cell(report.fpr90).c_str(), cell(report.fpr99).c_str(), cell(report.f1).c_str(),
                cell(report.mcc).c_str());
  out += buf;
  std::snprintf(buf, sizeof buf, "(threshold %.1f; %zu folds)\n", report.threshold,
                report.folds.size());
  out += buf;
  return out;
}

std::string roc_to_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "fpr,tpr,threshold\n";
  out.precision(17);
  for (const auto& p : report.roc) {
    out << p.fpr << ',' << p.tpr << ',';
    if (std::isinf(p.threshold))
      out << "inf";
    else if (std::isnan(p.threshold))
      out << "nan";
    else
      out << p.threshold;
    out << '\n';
  }
  return out.str();
}

}  // namespace reqvec
