#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "reqvec/bbpe.hpp"
#include "reqvec/corpus.hpp"
#include "reqvec/encoder.hpp"

namespace reqvec {

enum class Pooling { mean_tokens, first_token };

Pooling pooling_from_name(const std::string& s);
const char* pooling_name(Pooling p);

/// Row-per-document embedding matrix bound to the artifacts that produced it.
struct EmbeddingMatrix {
  Eigen::MatrixXf values;  // count x dim, dim = min(4, layers) * hidden
  std::vector<std::string> doc_ids;
  std::vector<Label> labels;
  uint64_t fingerprint = 0;

  Eigen::Index count() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
  /// Row index of a document id, or UnknownId.
  Eigen::Index row_of(const std::string& doc_id) const;
};

/// Joint hash of the serialized vocab and weights; embeddings carry it so
/// downstream stages can refuse mismatched artifacts.
uint64_t model_fingerprint(const BbpeVocab& vocab, const EncoderParams<float>& params);

std::string fingerprint_hex(uint64_t fp);
uint64_t fingerprint_from_hex(const std::string& hex);

/// BOS + byte-level ids + EOS, truncated to the model's max sequence length
/// (the final EOS is kept when truncation strikes).
std::vector<int> tokenize_line(const BbpeVocab& vocab, const std::string& line, int max_seq_len);

/// Per-token features are the concatenation of the token's hidden state in
/// the last four encoder layers (earliest first); the line vector pools them
/// over non-special tokens. With fewer than four layers all layers are used
/// unless strict_layers is set.
Eigen::VectorXf embed_line(const EncoderParams<float>& params, const BbpeVocab& vocab,
                           const std::string& line, Pooling pooling = Pooling::mean_tokens,
                           bool strict_layers = false);

/// Same as embed_line but on an already-tokenized sequence (specials
/// included). Token ablation goes through here so that id deletions never get
/// re-tokenized.
Eigen::VectorXf embed_token_ids(const EncoderParams<float>& params, const std::vector<int>& ids,
                                Pooling pooling = Pooling::mean_tokens,
                                bool strict_layers = false);

/// Arithmetic mean of embed_line over the document's non-empty lines.
Eigen::VectorXf embed_request(const EncoderParams<float>& params, const BbpeVocab& vocab,
                              const HttpRequestDoc& doc, Pooling pooling = Pooling::mean_tokens,
                              bool strict_layers = false);

/// Rows follow corpus order. A per-document failure aborts with the offending
/// id in the message.
EmbeddingMatrix embed_corpus(const EncoderParams<float>& params, const BbpeVocab& vocab,
                             const Corpus& corpus, Pooling pooling = Pooling::mean_tokens,
                             bool strict_layers = false);

void save_embeddings(const EmbeddingMatrix& matrix, std::ostream& out);
void save_embeddings(const EmbeddingMatrix& matrix, const std::string& path);
EmbeddingMatrix load_embeddings(std::istream& in,
                                std::optional<uint64_t> expect_fingerprint = std::nullopt);
EmbeddingMatrix load_embeddings(const std::string& path,
                                std::optional<uint64_t> expect_fingerprint = std::nullopt);

}  // namespace reqvec
