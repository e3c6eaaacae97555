#include "reqvec/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "reqvec/errors.hpp"

namespace reqvec {

const LinearModel& require_linear(const AnyModel& model) {
  if (const auto* linear = std::get_if<LinearModel>(&model)) return *linear;
  raise(Errc::model_mismatch, "attribution needs a linear model, not a forest");
}

namespace {

double hyperplane_distance(const LinearModel& model, const Eigen::RowVectorXd& x) {
  const double norm = model.w.norm();
  if (norm == 0.0) raise(Errc::model_mismatch, "model has a zero weight vector");
  return decision_score(model, x) / norm;
}

// Mean line embedding of a doc given per-line token id sequences; lines whose
// content was entirely ablated are skipped, and a doc with nothing left
// embeds as the zero vector.
Eigen::RowVectorXd embed_id_lines(const EncoderParams<float>& params,
                                  const std::vector<std::vector<int>>& id_lines, Pooling pooling,
                                  Eigen::Index dim) {
  Eigen::VectorXf sum = Eigen::VectorXf::Zero(dim);
  int used = 0;
  for (const auto& ids : id_lines) {
    bool has_content = false;
    for (int id : ids)
      if (!BbpeVocab::is_special(id)) has_content = true;
    if (!has_content) continue;
    sum += embed_token_ids(params, ids, pooling);
    ++used;
  }
  if (used > 0) sum /= static_cast<float>(used);
  return sum.cast<double>().transpose();
}

}  // namespace

AttributionReport token_ablation_scores(const HttpRequestDoc& doc, const BbpeVocab& vocab,
                                        const EncoderParams<float>& params,
                                        const LinearModel& model, Pooling pooling) {
  const Eigen::Index dim =
      static_cast<Eigen::Index>(std::min(4, params.config.num_layers)) * params.config.hidden;
  if (model.w.size() != dim)
    raise(Errc::dimension_mismatch, "model dim " + std::to_string(model.w.size()) +
                                        " vs embedding dim " + std::to_string(dim));

  std::vector<std::vector<int>> id_lines;
  std::map<int, int> occurrences;  // token id -> count, ordered for determinism
  for (const auto& line : doc.lines) {
    if (line.empty()) continue;
    id_lines.push_back(tokenize_line(vocab, line, params.config.max_seq_len));
    for (int id : id_lines.back())
      if (!BbpeVocab::is_special(id)) ++occurrences[id];
  }
  if (id_lines.empty())
    raise(Errc::empty_document, "doc " + doc.id + " has no non-empty lines");

  AttributionReport report;
  report.doc_id = doc.id;
  report.base_distance = hyperplane_distance(model, embed_id_lines(params, id_lines, pooling, dim));

  report.entries.reserve(occurrences.size());
  for (const auto& [token_id, count] : occurrences) {
    std::vector<std::vector<int>> variant;
    variant.reserve(id_lines.size());
    for (const auto& ids : id_lines) {
      std::vector<int> kept;
      kept.reserve(ids.size());
      for (int id : ids)
        if (id != token_id) kept.push_back(id);
      variant.push_back(std::move(kept));
    }
    AttributionEntry entry;
    entry.token = vocab.expansion(token_id);
    entry.occurrences = count;
    entry.raw_distance = hyperplane_distance(model, embed_id_lines(params, variant, pooling, dim));
    report.entries.push_back(std::move(entry));
  }

  double lo = report.entries.front().raw_distance;
  double hi = lo;
  for (const auto& e : report.entries) {
    lo = std::min(lo, e.raw_distance);
    hi = std::max(hi, e.raw_distance);
  }
  if (hi == lo) {
    report.degenerate_scale = true;
    for (auto& e : report.entries) {
      e.scaled = 0.0;
      e.score = 0.0;
    }
  } else {
    double mean_scaled = 0.0;
    for (auto& e : report.entries) {
      e.scaled = (e.raw_distance - lo) / (hi - lo);
      mean_scaled += e.scaled;
    }
    mean_scaled /= static_cast<double>(report.entries.size());
    for (auto& e : report.entries) e.score = mean_scaled - e.scaled;
  }

  std::sort(report.entries.begin(), report.entries.end(),
            [](const AttributionEntry& a, const AttributionEntry& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.token < b.token;
            });
  return report;
}

std::vector<ScoredToken> aggregate_scores(const std::vector<AttributionReport>& reports,
                                          int top_k) {
  if (reports.empty()) raise(Errc::empty_input, "no reports to aggregate");
  if (top_k < 1) raise(Errc::invalid_config, "top_k must be >= 1");
  std::map<std::string, double> sums;
  for (const auto& r : reports)
    for (const auto& e : r.entries) sums[e.token] += e.score;

  std::vector<ScoredToken> ranked;
  ranked.reserve(sums.size());
  for (const auto& [token, score] : sums) ranked.push_back({token, score});
  std::sort(ranked.begin(), ranked.end(), [](const ScoredToken& a, const ScoredToken& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.token < b.token;
  });
  if (static_cast<size_t>(top_k) < ranked.size()) ranked.resize(static_cast<size_t>(top_k));
  return ranked;
}

NeighborList nearest_neighbors(const EmbeddingMatrix& matrix, const std::string& query_id, int n,
                               bool include_self) {
  const Eigen::Index q = matrix.row_of(query_id);
  const Eigen::Index limit = matrix.count() - (include_self ? 0 : 1);
  if (n < 1) raise(Errc::invalid_config, "neighbor count must be >= 1");
  if (static_cast<Eigen::Index>(n) > limit)
    raise(Errc::n_too_large, "asked for " + std::to_string(n) + " neighbors out of " +
                                 std::to_string(limit) + " available");

  NeighborList list;
  list.query_id = query_id;
  std::vector<Neighbor> all;
  all.reserve(static_cast<size_t>(matrix.count()));
  for (Eigen::Index i = 0; i < matrix.count(); ++i) {
    if (!include_self && i == q) continue;
    const double d = (matrix.values.row(i) - matrix.values.row(q)).cast<double>().norm();
    all.push_back({matrix.doc_ids[static_cast<size_t>(i)], d});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.doc_id < b.doc_id;
  });
  all.resize(static_cast<size_t>(n));
  list.neighbors = std::move(all);
  return list;
}

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
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

std::string render_highlight(const HttpRequestDoc& doc, const BbpeVocab& vocab,
                             const AttributionReport& report, HighlightFormat format) {
  if (report.doc_id != doc.id)
    raise(Errc::mismatched_report,
          "report for doc " + report.doc_id + " rendered against doc " + doc.id);

  std::map<std::string, double> score_of;
  double max_positive = 0.0;
  for (const auto& e : report.entries) {
    score_of[e.token] = e.score;
    max_positive = std::max(max_positive, e.score);
  }

  const bool html = format == HighlightFormat::html;
  std::ostringstream out;
  if (html)
    out << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>"
        << html_escape(doc.id) << "</title>\n</head>\n<body>\n<pre>";

  bool first_line = true;
  for (const auto& line : doc.lines) {
    if (!first_line) out << '\n';
    first_line = false;
    // Walk the line's own token stream so rendering matches what was scored.
    for (int id : vocab.encode(line, /*add_bos_eos=*/false)) {
      const std::string& token = vocab.expansion(id);
      const auto it = score_of.find(token);
      const double score = it == score_of.end() ? 0.0 : it->second;
      if (score <= 0.0 || max_positive <= 0.0) {
        out << (html ? html_escape(token) : token);
        continue;
      }
      const double intensity = score / max_positive;
      if (html) {
        char style[64];
        std::snprintf(style, sizeof style, "%.2f", intensity);
        out << "<span style=\"background-color:rgba(255,0,0," << style << ")\">"
            << html_escape(token) << "</span>";
      } else {
        const int red = 128 + static_cast<int>(std::lround(127.0 * intensity));
        out << "\x1b[38;2;" << red << ";0;0m" << token << "\x1b[0m";
      }
    }
  }

  if (html) out << "</pre>\n</body>\n</html>\n";
  return out.str();
}

std::string attribution_to_json(const AttributionReport& report) {
  nlohmann::json j;
  j["format"] = "reqvec-attribution";
  j["version"] = 1;
  j["doc_id"] = report.doc_id;
  j["base_distance"] = report.base_distance;
  j["degenerate_scale"] = report.degenerate_scale;
  j["weighting"] = "equal";
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : report.entries)
    entries.push_back({{"token", e.token},
                       {"occurrences", e.occurrences},
                       {"raw_distance", e.raw_distance},
                       {"scaled", e.scaled},
                       {"score", e.score}});
  j["entries"] = std::move(entries);
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

std::string neighbors_to_json(const NeighborList& list) {
  nlohmann::json j;
  j["format"] = "reqvec-neighbors";
  j["version"] = 1;
  j["query_id"] = list.query_id;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& n : list.neighbors)
    rows.push_back({{"doc_id", n.doc_id}, {"distance", n.distance}});
  j["neighbors"] = std::move(rows);
  return j.dump() + "\n";
}

std::string neighbors_to_csv(const NeighborList& list) {
  std::ostringstream out;
  out << "rank,doc_id,distance\n";
  out.precision(17);
  for (size_t i = 0; i < list.neighbors.size(); ++i)
    out << i << ',' << list.neighbors[i].doc_id << ',' << list.neighbors[i].distance << '\n';
  return out.str();
}

}  // namespace reqvec
