#include "reqvec/project.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "reqvec/errors.hpp"
#include "reqvec/rng.hpp"

namespace reqvec {

Eigen::MatrixXd pca_reduce(const Eigen::MatrixXd& x, int dims) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index k = std::min<Eigen::Index>({dims, n, d});
  if (k <= 0 || k == d) return x;

  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  if (d <= n) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(centered.transpose() * centered);
    // Eigenvalues come out ascending; take the trailing k columns.
    return centered * solver.eigenvectors().rightCols(k).rowwise().reverse();
  }
  // Gram route: X = U S V^T gives X V = U S, and the Gram eigenvectors are U.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(centered * centered.transpose());
  const Eigen::MatrixXd u = solver.eigenvectors().rightCols(k).rowwise().reverse();
  const Eigen::VectorXd lambda = solver.eigenvalues().tail(k).reverse();
  Eigen::MatrixXd out(n, k);
  for (Eigen::Index j = 0; j < k; ++j)
    out.col(j) = u.col(j) * std::sqrt(std::max(0.0, lambda(j)));
  return out;
}

RowAffinity solve_row_affinity(const Eigen::VectorXd& sq_dists, double perplexity) {
  const double target = std::log(perplexity);
  RowAffinity row;
  row.beta = 1.0;
  double beta_min = -std::numeric_limits<double>::infinity();
  double beta_max = std::numeric_limits<double>::infinity();
  const double d_min = sq_dists.minCoeff();

  for (row.iterations = 1; row.iterations <= 50; ++row.iterations) {
    // Shift by the smallest distance so the largest exponent is 0.
    Eigen::VectorXd p = (-(sq_dists.array() - d_min) * row.beta).exp();
    const double sum = p.sum();
    p /= sum;
    double entropy = 0.0;
    for (Eigen::Index j = 0; j < p.size(); ++j)
      if (p(j) > 0.0) entropy -= p(j) * std::log(p(j));
    row.p = std::move(p);
    row.entropy = entropy;

    const double diff = entropy - target;
    if (std::abs(diff) < 1e-5) break;
    if (diff > 0) {  // entropy too high: sharpen
      beta_min = row.beta;
      row.beta = std::isinf(beta_max) ? row.beta * 2.0 : 0.5 * (row.beta + beta_max);
    } else {
      beta_max = row.beta;
      row.beta = std::isinf(beta_min) ? row.beta * 0.5 : 0.5 * (row.beta + beta_min);
    }
  }
  return row;
}

Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& x, double perplexity) {
  const Eigen::Index n = x.rows();
  if (n < 4) raise(Errc::invalid_config, "t-SNE needs at least 4 points");
  if (perplexity <= 1.0) raise(Errc::invalid_config, "perplexity must exceed 1");
  if (perplexity >= (static_cast<double>(n) - 1.0) / 3.0)
    raise(Errc::perplexity_too_large, "perplexity " + std::to_string(perplexity) +
                                          " too large for " + std::to_string(n) + " points");

  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d2 =
      (sq.replicate(1, n) + sq.transpose().replicate(n, 1) - 2.0 * x * x.transpose())
          .cwiseMax(0.0);
  d2.diagonal().setZero();
  if (d2.maxCoeff() == 0.0)
    raise(Errc::degenerate_input, "all points are identical");

  Eigen::MatrixXd cond = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd others(n - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index k = 0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) others(k++) = d2(i, j);
    const RowAffinity row = solve_row_affinity(others, perplexity);
    k = 0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) cond(i, j) = row.p(k++);
  }
  return (cond + cond.transpose()) / (2.0 * static_cast<double>(n));
}

namespace {

double kl_divergence(const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      if (i != j && p(i, j) > 0.0) kl += p(i, j) * std::log(p(i, j) / std::max(q(i, j), 1e-12));
  return kl;
}

}  // namespace

ProjectionResult tsne(const Eigen::MatrixXd& x, const std::vector<std::string>& ids,
                      const std::vector<Label>& labels, const ProjectionConfig& config) {
  const Eigen::Index n = x.rows();
  if (n != static_cast<Eigen::Index>(ids.size()) || ids.size() != labels.size())
    raise(Errc::dimension_mismatch, "rows, ids and labels disagree");
  if (config.iterations < 1) raise(Errc::invalid_config, "iterations must be >= 1");
  {
    std::set<std::string> unique(ids.begin(), ids.end());
    if (unique.size() != ids.size())
      raise(Errc::invalid_config, "doc ids must be unique for projection");
  }

  // Canonical doc-id order makes the run independent of input row order.
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return ids[a] < ids[b]; });
  Eigen::MatrixXd xs(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) xs.row(i) = x.row(order[static_cast<size_t>(i)]);

  const Eigen::MatrixXd reduced = config.pca_predim > 0 ? pca_reduce(xs, config.pca_predim) : xs;
  const Eigen::MatrixXd p = tsne_affinities(reduced, config.perplexity);

  Eigen::MatrixXd y(n, 2);
  const uint64_t init_base = fnv1a64("tsne-init", config.seed);
  for (Eigen::Index i = 0; i < n; ++i) {
    Rng rng(fnv1a64(ids[order[static_cast<size_t>(i)]], init_base));
    y(i, 0) = rng.normal(0.0, 1e-4);
    y(i, 1) = rng.normal(0.0, 1e-4);
  }

  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  ProjectionResult result;
  result.kl_trace.reserve(static_cast<size_t>(config.iterations));

  for (int iter = 0; iter < config.iterations; ++iter) {
    const double exaggeration = iter < config.exaggeration_iters ? config.early_exaggeration : 1.0;
    const double momentum =
        iter < config.momentum_switch_iter ? config.initial_momentum : config.final_momentum;

    const Eigen::VectorXd sq = y.rowwise().squaredNorm();
    Eigen::MatrixXd num =
        (1.0 + (sq.replicate(1, n) + sq.transpose().replicate(n, 1) - 2.0 * y * y.transpose())
                   .cwiseMax(0.0)
                   .array())
            .inverse()
            .matrix();
    num.diagonal().setZero();
    const double z = num.sum();
    const Eigen::MatrixXd q = num / z;

    const Eigen::MatrixXd pq = ((exaggeration * p) - q).cwiseProduct(num);
    const Eigen::MatrixXd grad =
        4.0 * (pq.rowwise().sum().asDiagonal() * y - pq * y);

    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < 2; ++c) {
        const bool same_sign = (grad(i, c) > 0.0) == (velocity(i, c) > 0.0);
        gains(i, c) = same_sign ? std::max(gains(i, c) * 0.8, 0.01) : gains(i, c) + 0.2;
      }
    velocity = momentum * velocity - config.learning_rate * gains.cwiseProduct(grad);
    y += velocity;
    y.rowwise() -= y.colwise().mean();

    result.kl_trace.push_back(kl_divergence(p, q));
  }

  result.points.resize(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index src = order[static_cast<size_t>(i)];
    result.points[static_cast<size_t>(src)] =
        ProjectionPoint{ids[static_cast<size_t>(src)], y(i, 0), y(i, 1),
                        labels[static_cast<size_t>(src)]};
  }
  return result;
}

ProjectionResult tsne(const EmbeddingMatrix& matrix, const ProjectionConfig& config) {
  return tsne(matrix.values.cast<double>(), matrix.doc_ids, matrix.labels, config);
}

std::string scatter_to_csv(const std::vector<ProjectionPoint>& points) {
  std::ostringstream out;
  out << "id,x,y,label\n";
  out.precision(17);
  for (const auto& p : points)
    out << p.doc_id << ',' << p.x << ',' << p.y << ',' << label_name(p.label) << '\n';
  return out.str();
}

namespace {

const char* point_color(Label l) {
  switch (l) {
    case Label::anomaly: return "#d62728";  // red
    case Label::normal: return "#1f77b4";   // blue
    case Label::unlabeled: return "#7f7f7f";
  }
  return "#7f7f7f";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string scatter_to_svg(const std::vector<ProjectionPoint>& points) {
  if (points.empty()) raise(Errc::empty_input, "no points to plot");
  double xmin = points[0].x, xmax = points[0].x, ymin = points[0].y, ymax = points[0].y;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;

  const double width = 800, height = 600, margin = 60;
  auto sx = [&](double v) { return margin + (v - xmin) / (xmax - xmin) * (width - 2 * margin); };
  auto sy = [&](double v) { return height - margin - (v - ymin) / (ymax - ymin) * (height - 2 * margin); };

  std::ostringstream out;
  out.precision(6);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
      << "  <line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin
      << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n"
      << "  <line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
      << height - margin << "\" stroke=\"black\"/>\n";
  out << "  <text x=\"" << margin << "\" y=\"" << height - margin / 3 << "\" font-size=\"12\">"
      << xmin << "</text>\n"
      << "  <text x=\"" << width - margin << "\" y=\"" << height - margin / 3
      << "\" font-size=\"12\" text-anchor=\"end\">" << xmax << "</text>\n"
      << "  <text x=\"" << margin / 4 << "\" y=\"" << height - margin << "\" font-size=\"12\">"
      << ymin << "</text>\n"
      << "  <text x=\"" << margin / 4 << "\" y=\"" << margin << "\" font-size=\"12\">" << ymax
      << "</text>\n";

  for (const auto& p : points)
    out << "  <circle cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y) << "\" r=\"3\" fill=\""
        << point_color(p.label) << "\" fill-opacity=\"0.7\"><title>" << xml_escape(p.doc_id)
        << "</title></circle>\n";

  const struct {
    Label label;
    const char* text;
  } legend[] = {{Label::normal, "normal"}, {Label::anomaly, "anomaly"}, {Label::unlabeled, "unlabeled"}};
  double ly = margin;
  for (const auto& item : legend) {
    out << "  <circle cx=\"" << width - margin - 90 << "\" cy=\"" << ly << "\" r=\"5\" fill=\""
        << point_color(item.label) << "\"/>\n"
        << "  <text x=\"" << width - margin - 78 << "\" y=\"" << ly + 4
        << "\" font-size=\"13\">" << item.text << "</text>\n";
    ly += 20;
  }
  out << "</svg>\n";
  return out.str();
}

std::string kl_trace_to_csv(const std::vector<double>& kl_trace) {
  std::ostringstream out;
  out << "iteration,kl\n";
  out.precision(17);
  for (size_t i = 0; i < kl_trace.size(); ++i) out << i << ',' << kl_trace[i] << '\n';
  return out.str();
}

void emit_scatter(const std::vector<ProjectionPoint>& points, const std::string& path,
                  ScatterFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Errc::io_error, "cannot open " + path + " for writing");
  out << (format == ScatterFormat::csv ? scatter_to_csv(points) : scatter_to_svg(points));
  if (!out) raise(Errc::io_error, "failed while writing " + path);
}

}  // namespace reqvec
