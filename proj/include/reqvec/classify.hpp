#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "reqvec/corpus.hpp"

namespace reqvec {

/// Per-dimension z-score transform. Always fit on training rows only; folds
/// never see inference statistics.
struct StandardScaler {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;  // zero-variance dimensions are stored as 1

  static StandardScaler fit(const Eigen::MatrixXd& x);
  static StandardScaler identity(Eigen::Index dim);
  Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const;
  Eigen::RowVectorXd transform(const Eigen::RowVectorXd& x) const;
};

struct LinearModel {
  enum class Kind { logreg, linear_svm };
  Kind kind = Kind::logreg;
  Eigen::VectorXd w;
  double b = 0.0;
  StandardScaler scaler;  // applied inside decision_score
  int iterations = 0;
  bool converged = false;
  uint64_t embeddings_fingerprint = 0;
};

struct LogRegConfig {
  int max_iter = 500;
  double lr = 0.0;  // 0 selects 1/L from the data's Lipschitz bound
  double l2 = 1e-4;
  double tol = 1e-7;
};

struct SvmConfig {
  double C = 1.0;
  int epochs = 50;
  uint64_t seed = 0;
};

struct ForestConfig {
  int num_trees = 100;
  int max_features = 0;  // 0 selects round(sqrt(dim))
  int max_depth = 0;     // 0 means unbounded
  int min_samples_leaf = 1;
  bool bootstrap = true;
  uint64_t seed = 0;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double p_anomaly = 0.0;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // node 0 is the root
  double predict(const Eigen::RowVectorXd& x) const;
};

struct ForestModel {
  std::vector<DecisionTree> trees;
  int max_features = 0;
  double oob_accuracy = -1.0;  // -1 when bootstrap was off
  uint64_t embeddings_fingerprint = 0;
};

using AnyModel = std::variant<LinearModel, ForestModel>;

/// Labels as 0 (normal) / 1 (anomaly); unlabeled docs are rejected.
std::vector<int> binary_labels(const std::vector<Label>& labels);

LinearModel train_logreg(const Eigen::MatrixXd& x, const std::vector<int>& y,
                         const LogRegConfig& config = {});
LinearModel train_linear_svm(const Eigen::MatrixXd& x, const std::vector<int>& y,
                             const SvmConfig& config = {});
ForestModel train_random_forest(const Eigen::MatrixXd& x, const std::vector<int>& y,
                                const ForestConfig& config = {});

/// Linear: w . z(x) + b on the standardized input. Forest: anomaly-class
/// probability minus 0.5. Positive score predicts anomaly.
double decision_score(const LinearModel& model, const Eigen::RowVectorXd& x);
double decision_score(const ForestModel& model, const Eigen::RowVectorXd& x);
Eigen::VectorXd decision_scores(const LinearModel& model, const Eigen::MatrixXd& x);
Eigen::VectorXd decision_scores(const ForestModel& model, const Eigen::MatrixXd& x);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // +inf on the (0,0) point; NaN on averaged curves
};

struct FoldMetrics {
  double fpr90 = 0.0;
  double fpr99 = 0.0;
  double f1 = 0.0;
  double mcc = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over folds
};

struct EvalReport {
  std::vector<FoldMetrics> folds;
  MeanStd fpr90, fpr99, f1, mcc;
  /// Single fold: the exact curve. Cross-validation: vertical average over
  /// the union of fold FPR breakpoints, thresholds NaN.
  std::vector<RocPoint> roc;
  double threshold = 0.0;  // decision threshold used for F1/MCC
};

/// Single-fold metrics. ROC points are swept over the sorted unique scores
/// (predict anomaly when score >= threshold) with a (0,0) sentinel; FPR90 and
/// FPR99 take the minimum FPR among points whose TPR reaches 0.90 and 0.99.
/// F1 and MCC are computed at score > 0.
EvalReport evaluate(const Eigen::VectorXd& scores, const std::vector<int>& y);

/// Trains on the other folds and scores the held-out one.
using TrainScoreFn = std::function<Eigen::VectorXd(
    const Eigen::MatrixXd& x_train, const std::vector<int>& y_train, const Eigen::MatrixXd& x_test)>;

EvalReport evaluate_cv(const Eigen::MatrixXd& x, const std::vector<int>& y,
                       const TrainScoreFn& trainer, const std::vector<int>& fold_of, int k);

void save_model(const AnyModel& model, std::ostream& out);
void save_model(const AnyModel& model, const std::string& path);
AnyModel load_model(std::istream& in);
AnyModel load_model(const std::string& path);

std::string report_to_json(const EvalReport& report, const std::string& model_name);
std::string report_to_text(const EvalReport& report, const std::string& model_name);
std::string roc_to_csv(const EvalReport& report);

}  // namespace reqvec
