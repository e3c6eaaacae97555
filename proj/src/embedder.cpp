#include "reqvec/embedder.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace reqvec {

Pooling pooling_from_name(const std::string& s) {
  if (s == "mean" || s == "mean_tokens") return Pooling::mean_tokens;
  if (s == "first" || s == "first_token") return Pooling::first_token;
  raise(Errc::invalid_config, "unknown pooling mode: " + s);
}

const char* pooling_name(Pooling p) {
  return p == Pooling::mean_tokens ? "mean_tokens" : "first_token";
}

Eigen::Index EmbeddingMatrix::row_of(const std::string& doc_id) const {
  for (size_t i = 0; i < doc_ids.size(); ++i)
    if (doc_ids[i] == doc_id) return static_cast<Eigen::Index>(i);
  raise(Errc::unknown_id, "no embedding row for doc " + doc_id);
}

uint64_t model_fingerprint(const BbpeVocab& vocab, const EncoderParams<float>& params) {
  std::ostringstream vs;
  save_vocab(vocab, vs);
  std::ostringstream ps;
  save_params(params, ps);
  const std::string vbytes = vs.str();
  const std::string pbytes = ps.str();
  return fnv1a64(pbytes.data(), pbytes.size(), fnv1a64(vbytes.data(), vbytes.size()));
}

std::string fingerprint_hex(uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

uint64_t fingerprint_from_hex(const std::string& hex) {
  if (hex.size() != 16) raise(Errc::format_error, "fingerprint must be 16 hex digits");
  uint64_t v = 0;
  for (char c : hex) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
    else raise(Errc::format_error, "fingerprint must be 16 hex digits");
    v = (v << 4) | static_cast<uint64_t>(d);
  }
  return v;
}

std::vector<int> tokenize_line(const BbpeVocab& vocab, const std::string& line, int max_seq_len) {
  std::vector<int> ids = vocab.encode(line, /*add_bos_eos=*/true);
  if (static_cast<int>(ids.size()) > max_seq_len) {
    ids.resize(static_cast<size_t>(max_seq_len));
    ids.back() = BbpeVocab::kEos;
  }
  return ids;
}

Eigen::VectorXf embed_line(const EncoderParams<float>& params, const BbpeVocab& vocab,
                           const std::string& line, Pooling pooling, bool strict_layers) {
  return embed_token_ids(params, tokenize_line(vocab, line, params.config.max_seq_len), pooling,
                         strict_layers);
}

Eigen::VectorXf embed_token_ids(const EncoderParams<float>& params, const std::vector<int>& ids,
                                Pooling pooling, bool strict_layers) {
  const int num_layers = params.config.num_layers;
  if (strict_layers && num_layers < 4)
    raise(Errc::too_few_layers,
          "encoder has " + std::to_string(num_layers) + " layers; 4 required in strict mode");
  const int use = std::min(4, num_layers);
  const int h = params.config.hidden;

  auto result = forward(params, ids);

  std::vector<Eigen::Index> content;
  for (size_t t = 0; t < ids.size(); ++t)
    if (!BbpeVocab::is_special(ids[t])) content.push_back(static_cast<Eigen::Index>(t));
  if (content.empty()) raise(Errc::empty_input, "line has no content tokens");

  const size_t first_state = result.states.size() - static_cast<size_t>(use);
  Eigen::VectorXf out = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(use) * h);
  if (pooling == Pooling::first_token) {
    for (int k = 0; k < use; ++k)
      out.segment(static_cast<Eigen::Index>(k) * h, h) =
          result.states[first_state + static_cast<size_t>(k)].row(content.front()).transpose();
    return out;
  }
  for (Eigen::Index t : content)
    for (int k = 0; k < use; ++k)
      out.segment(static_cast<Eigen::Index>(k) * h, h) +=
          result.states[first_state + static_cast<size_t>(k)].row(t).transpose();
  out /= static_cast<float>(content.size());
  return out;
}

Eigen::VectorXf embed_request(const EncoderParams<float>& params, const BbpeVocab& vocab,
                              const HttpRequestDoc& doc, Pooling pooling, bool strict_layers) {
  Eigen::VectorXf sum;
  int lines_used = 0;
  for (const auto& line : doc.lines) {
    if (line.empty()) continue;
    Eigen::VectorXf v = embed_line(params, vocab, line, pooling, strict_layers);
    if (lines_used == 0)
      sum = std::move(v);
    else
      sum += v;
    ++lines_used;
  }
  if (lines_used == 0)
    raise(Errc::empty_document, "doc " + doc.id + " has no non-empty lines");
  return sum / static_cast<float>(lines_used);
}

EmbeddingMatrix embed_corpus(const EncoderParams<float>& params, const BbpeVocab& vocab,
                             const Corpus& corpus, Pooling pooling, bool strict_layers) {
  EmbeddingMatrix matrix;
  matrix.fingerprint = model_fingerprint(vocab, params);
  const Eigen::Index dim =
      static_cast<Eigen::Index>(std::min(4, params.config.num_layers)) * params.config.hidden;
  matrix.values.resize(static_cast<Eigen::Index>(corpus.docs.size()), dim);
  matrix.doc_ids.reserve(corpus.docs.size());
  matrix.labels.reserve(corpus.docs.size());
  for (size_t i = 0; i < corpus.docs.size(); ++i) {
    const auto& doc = corpus.docs[i];
    try {
      matrix.values.row(static_cast<Eigen::Index>(i)) =
          embed_request(params, vocab, doc, pooling, strict_layers).transpose();
    } catch (const Error& e) {
      raise(e.code(), "embedding doc " + doc.id + ": " + e.what());
    }
    matrix.doc_ids.push_back(doc.id);
    matrix.labels.push_back(doc.label);
  }
  return matrix;
}

void save_embeddings(const EmbeddingMatrix& matrix, std::ostream& out) {
  nlohmann::json manifest;
  manifest["format"] = "reqvec-embeddings";
  manifest["version"] = 1;
  manifest["dim"] = matrix.dim();
  manifest["count"] = matrix.count();
  manifest["fingerprint"] = fingerprint_hex(matrix.fingerprint);
  nlohmann::json docs = nlohmann::json::array();
  for (size_t i = 0; i < matrix.doc_ids.size(); ++i)
    docs.push_back({{"id", matrix.doc_ids[i]}, {"label", label_name(matrix.labels[i])}});
  manifest["docs"] = std::move(docs);
  out << manifest.dump() << '\n';

  std::vector<float> row(static_cast<size_t>(matrix.dim()));
  for (Eigen::Index r = 0; r < matrix.count(); ++r) {
    for (Eigen::Index c = 0; c < matrix.dim(); ++c) row[static_cast<size_t>(c)] = matrix.values(r, c);
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) raise(Errc::io_error, "failed while writing embeddings");
}

void save_embeddings(const EmbeddingMatrix& matrix, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Errc::io_error, "cannot open " + path + " for writing");
  save_embeddings(matrix, out);
}

EmbeddingMatrix load_embeddings(std::istream& in, std::optional<uint64_t> expect_fingerprint) {
  std::string line;
  if (!std::getline(in, line)) raise(Errc::io_error, "embedding file is empty");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::format_error, std::string("bad embedding manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "reqvec-embeddings")
    raise(Errc::format_error, "not an embedding file");

  EmbeddingMatrix matrix;
  try {
    matrix.fingerprint = fingerprint_from_hex(manifest.at("fingerprint").get<std::string>());
    const auto count = manifest.at("count").get<Eigen::Index>();
    const auto dim = manifest.at("dim").get<Eigen::Index>();
    if (count < 0 || dim < 0) raise(Errc::format_error, "negative embedding shape");
    matrix.values.resize(count, dim);
    for (const auto& d : manifest.at("docs")) {
      matrix.doc_ids.push_back(d.at("id").get<std::string>());
      matrix.labels.push_back(label_from_name(d.at("label").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::format_error, std::string("bad embedding manifest: ") + e.what());
  }
  if (static_cast<Eigen::Index>(matrix.doc_ids.size()) != matrix.count())
    raise(Errc::format_error, "doc list length disagrees with count");

  if (expect_fingerprint && *expect_fingerprint != matrix.fingerprint)
    raise(Errc::fingerprint_mismatch,
          "embeddings were produced by model " + fingerprint_hex(matrix.fingerprint) +
              ", expected " + fingerprint_hex(*expect_fingerprint));

  std::vector<float> row(static_cast<size_t>(matrix.dim()));
  for (Eigen::Index r = 0; r < matrix.count(); ++r) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) raise(Errc::format_error, "embedding payload is shorter than the manifest claims");
    for (Eigen::Index c = 0; c < matrix.dim(); ++c) matrix.values(r, c) = row[static_cast<size_t>(c)];
  }
  if (in.peek() != std::char_traits<char>::eof())
    raise(Errc::format_error, "trailing bytes after the embedding payload");
  return matrix;
}

EmbeddingMatrix load_embeddings(const std::string& path,
                                std::optional<uint64_t> expect_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Errc::io_error, "cannot open " + path);
  return load_embeddings(in, expect_fingerprint);
}

}  // namespace reqvec
