#pragma once

#include <string>
#include <vector>

#include "reqvec/classify.hpp"
#include "reqvec/embedder.hpp"

namespace reqvec {

struct AttributionEntry {
  std::string token;  // byte expansion of the ablated token type
  int occurrences = 0;
  double raw_distance = 0.0;  // hyperplane distance of the doc with this token removed
  double scaled = 0.0;        // min-max scaled distance
  double score = 0.0;         // mean(scaled) - scaled; positive points at anomaly
};

struct AttributionReport {
  std::string doc_id;
  double base_distance = 0.0;  // unablated doc
  bool degenerate_scale = false;  // all ablated distances equal; every score is 0
  std::vector<AttributionEntry> entries;  // one per distinct token type, score-descending
};

/// Unwraps a linear model for attribution; a forest has no hyperplane.
const LinearModel& require_linear(const AnyModel& model);

/// For each distinct token type in the document, removes every occurrence
/// from the token sequences, re-embeds the variant and measures the signed
/// hyperplane distance (w . z + b) / |w|. Distances are min-max scaled and
/// each token scored by how far below the mean its variant lands.
AttributionReport token_ablation_scores(const HttpRequestDoc& doc, const BbpeVocab& vocab,
                                        const EncoderParams<float>& params,
                                        const LinearModel& model,
                                        Pooling pooling = Pooling::mean_tokens);

struct ScoredToken {
  std::string token;
  double score = 0.0;
};

/// Sums scores per token across reports with equal weighting; descending
/// score, ties broken lexicographically; truncated to top_k.
std::vector<ScoredToken> aggregate_scores(const std::vector<AttributionReport>& reports,
                                          int top_k);

struct Neighbor {
  std::string doc_id;
  double distance = 0.0;
};

struct NeighborList {
  std::string query_id;
  std::vector<Neighbor> neighbors;  // ascending distance, ties by doc id
};

/// Exact Euclidean search over the embedding matrix.
NeighborList nearest_neighbors(const EmbeddingMatrix& matrix, const std::string& query_id, int n,
                               bool include_self = false);

enum class HighlightFormat { ansi, html };

/// Renders the document with positively scored tokens shaded red, intensity
/// proportional to score over the maximum positive score.
std::string render_highlight(const HttpRequestDoc& doc, const BbpeVocab& vocab,
                             const AttributionReport& report, HighlightFormat format);

std::string attribution_to_json(const AttributionReport& report);
std::string neighbors_to_json(const NeighborList& list);
std::string neighbors_to_csv(const NeighborList& list);

}  // namespace reqvec
