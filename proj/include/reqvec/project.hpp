#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "reqvec/corpus.hpp"
#include "reqvec/embedder.hpp"

namespace reqvec {

struct ProjectionConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  int momentum_switch_iter = 250;
  int pca_predim = 50;  // 0 disables PCA pre-reduction
  uint64_t seed = 0;
};

struct ProjectionPoint {
  std::string doc_id;
  double x = 0.0;
  double y = 0.0;
  Label label = Label::unlabeled;
};

struct ProjectionResult {
  std::vector<ProjectionPoint> points;  // input row order
  std::vector<double> kl_trace;         // KL(P||Q) per iteration, exaggeration removed
};

/// Centered PCA to at most `dims` components. When rows < columns the
/// eigendecomposition runs on the Gram matrix instead of the covariance.
Eigen::MatrixXd pca_reduce(const Eigen::MatrixXd& x, int dims);

struct RowAffinity {
  Eigen::VectorXd p;  // conditional P(j|i) over the other points, in their order
  double beta = 0.0;  // precision of the fitted Gaussian
  double entropy = 0.0;
  int iterations = 0;
};

/// Bisects the Gaussian precision until the row's Shannon entropy matches
/// log(perplexity); at most 50 iterations.
RowAffinity solve_row_affinity(const Eigen::VectorXd& sq_dists, double perplexity);

/// Symmetrized affinities P = (P(j|i) + P(i|j)) / 2n; zero diagonal, entries
/// sum to 1.
Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& x, double perplexity);

/// Exact-gradient t-SNE. Internally the points are processed in doc-id order
/// and mapped back, so permuting input rows permutes the output identically.
ProjectionResult tsne(const Eigen::MatrixXd& x, const std::vector<std::string>& ids,
                      const std::vector<Label>& labels, const ProjectionConfig& config);
ProjectionResult tsne(const EmbeddingMatrix& matrix, const ProjectionConfig& config);

enum class ScatterFormat { csv, svg };

std::string scatter_to_csv(const std::vector<ProjectionPoint>& points);
std::string scatter_to_svg(const std::vector<ProjectionPoint>& points);
std::string kl_trace_to_csv(const std::vector<double>& kl_trace);
void emit_scatter(const std::vector<ProjectionPoint>& points, const std::string& path,
                  ScatterFormat format);

}  // namespace reqvec
