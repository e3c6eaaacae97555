#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "reqvec/bbpe.hpp"
#include "reqvec/embedder.hpp"
#include "reqvec/encoder.hpp"
#include "reqvec/errors.hpp"
#include "test_util.hpp"

using namespace reqvec;
using testutil::code_of;
using testutil::TempDir;

namespace {

EncoderConfig small_config(int layers) {
  EncoderConfig c;
  c.num_layers = layers;
  c.num_heads = 2;
  c.hidden = 8;
  c.ffn = 16;
  c.max_seq_len = 32;
  c.vocab_size = 260;
  c.dropout = 0.0;
  c.seed = 3;
  return c;
}

BbpeVocab plain_vocab() { return BbpeVocab(); }

Corpus tiny_corpus() {
  Corpus c;
  for (int i = 0; i < 4; ++i) {
    HttpRequestDoc d;
    d.id = "doc-" + std::to_string(i);
    d.label = i % 2 ? Label::anomaly : Label::normal;
    d.lines = {"GET /p" + std::to_string(i) + " HTTP/1.1", "Host: h"};
    c.docs.push_back(d);
  }
  return c;
}

// Reference implementation: pool the concatenation of the last min(4, L)
// layer states over content positions.
Eigen::VectorXf oracle_line(const EncoderParams<float>& params, const BbpeVocab& vocab,
                            const std::string& line, Pooling pooling) {
  const auto ids = tokenize_line(vocab, line, params.config.max_seq_len);
  const auto result = forward(params, ids);
  const int use = std::min<int>(4, params.config.num_layers);
  const size_t first_state = result.states.size() - size_t(use);
  const int h = params.config.hidden;

  std::vector<int> content;
  for (size_t i = 0; i < ids.size(); ++i)
    if (!BbpeVocab::is_special(ids[i])) content.push_back(int(i));

  Eigen::VectorXf out = Eigen::VectorXf::Zero(use * h);
  if (pooling == Pooling::first_token) {
    for (int s = 0; s < use; ++s)
      out.segment(s * h, h) = result.states[first_state + s].row(content.front()).transpose();
    return out;
  }
  for (int pos : content)
    for (int s = 0; s < use; ++s)
      out.segment(s * h, h) += result.states[first_state + s].row(pos).transpose();
  return out / float(content.size());
}

}  // namespace

TEST_CASE("embedding length is min(4, layers) times hidden") {
  auto vocab = plain_vocab();
  auto p6 = init_encoder<float>(small_config(6));
  CHECK(embed_line(p6, vocab, "GET / HTTP/1.1").size() == 32);

  auto p2 = init_encoder<float>(small_config(2));
  CHECK(embed_line(p2, vocab, "GET / HTTP/1.1").size() == 16);

  auto p4 = init_encoder<float>(small_config(4));
  CHECK(embed_line(p4, vocab, "GET / HTTP/1.1").size() == 32);
}

TEST_CASE("strict layer policy") {
  auto vocab = plain_vocab();
  auto p2 = init_encoder<float>(small_config(2));
  CHECK(code_of([&] { embed_line(p2, vocab, "GET / HTTP/1.1", Pooling::mean_tokens, true); }) ==
        Errc::too_few_layers);

  auto p4 = init_encoder<float>(small_config(4));
  CHECK_NOTHROW(embed_line(p4, vocab, "GET / HTTP/1.1", Pooling::mean_tokens, true));
}

TEST_CASE("mean pooling matches the reference computation") {
  auto vocab = plain_vocab();
  for (int layers : {2, 4, 6}) {
    auto p = init_encoder<float>(small_config(layers));
    const std::string line = "GET /item?id=7 HTTP/1.1";
    auto got = embed_line(p, vocab, line, Pooling::mean_tokens);
    auto want = oracle_line(p, vocab, line, Pooling::mean_tokens);
    REQUIRE(got.size() == want.size());
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6f);
  }
}

TEST_CASE("first-token pooling matches the reference computation") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(4));
  const std::string line = "POST /login HTTP/1.1";
  auto got = embed_line(p, vocab, line, Pooling::first_token);
  auto want = oracle_line(p, vocab, line, Pooling::first_token);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6f);

  SUBCASE("differs from mean pooling") {
    auto mean = embed_line(p, vocab, line, Pooling::mean_tokens);
    CHECK((got - mean).cwiseAbs().maxCoeff() > 0);
  }
}

TEST_CASE("pooling names resolve") {
  CHECK(pooling_from_name("mean") == Pooling::mean_tokens);
  CHECK(pooling_from_name("mean_tokens") == Pooling::mean_tokens);
  CHECK(pooling_from_name("first") == Pooling::first_token);
  CHECK(code_of([] { pooling_from_name("median"); }) == Errc::invalid_config);
}

TEST_CASE("tokenize_line truncates but keeps the frame") {
  auto vocab = plain_vocab();
  const std::string longline(100, 'a');
  auto ids = tokenize_line(vocab, longline, 16);
  REQUIRE(ids.size() == 16);
  CHECK(ids.front() == BbpeVocab::kBos);
  CHECK(ids.back() == BbpeVocab::kEos);

  auto shortline = tokenize_line(vocab, "ab", 16);
  CHECK(shortline.size() == 4);
}

TEST_CASE("document embedding averages the line embeddings") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(4));

  HttpRequestDoc doc;
  doc.id = "d";
  doc.lines = {"GET /a HTTP/1.1", "", "Host: x"};  // empty line must be skipped

  const Eigen::VectorXf got = embed_request(p, vocab, doc);
  const Eigen::VectorXf want =
      (embed_line(p, vocab, doc.lines[0]) + embed_line(p, vocab, doc.lines[2])) / 2.0f;
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("documents with no usable lines are rejected") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(2));
  HttpRequestDoc doc;
  doc.id = "empty";
  doc.lines = {"", ""};
  CHECK(code_of([&] { embed_request(p, vocab, doc); }) == Errc::empty_document);
}

TEST_CASE("corpus embedding keeps corpus order and doc ids") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(2));
  auto corpus = tiny_corpus();

  auto matrix = embed_corpus(p, vocab, corpus);
  REQUIRE(matrix.count() == 4);
  CHECK(matrix.dim() == 16);
  CHECK(matrix.fingerprint == model_fingerprint(vocab, p));
  for (int i = 0; i < 4; ++i) {
    CHECK(matrix.doc_ids[i] == corpus.docs[i].id);
    CHECK(matrix.labels[i] == corpus.docs[i].label);
    CHECK(matrix.row_of(corpus.docs[i].id) == i);
    auto want = embed_request(p, vocab, corpus.docs[i]);
    CHECK((matrix.values.row(i).transpose() - want).cwiseAbs().maxCoeff() == 0.0f);
  }
  CHECK(code_of([&] { matrix.row_of("nope"); }) == Errc::unknown_id);
}

TEST_CASE("per-document embeddings do not depend on corpus order") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(2));
  auto corpus = tiny_corpus();
  auto forward_order = embed_corpus(p, vocab, corpus);

  std::reverse(corpus.docs.begin(), corpus.docs.end());
  auto reverse_order = embed_corpus(p, vocab, corpus);

  for (const auto& id : forward_order.doc_ids) {
    auto a = forward_order.values.row(forward_order.row_of(id));
    auto b = reverse_order.values.row(reverse_order.row_of(id));
    CHECK(a == b);
  }
}

TEST_CASE("corpus embedding failures carry the document id") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(2));
  Corpus corpus = tiny_corpus();
  corpus.docs[2].lines = {""};

  try {
    embed_corpus(p, vocab, corpus);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_document);
    CHECK(testutil::contains(e.what(), "doc-2"));
  }
}

TEST_CASE("fingerprint reacts to both vocab and weights") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(2));
  const uint64_t base = model_fingerprint(vocab, p);

  auto p2 = p;
  p2.tok_emb(0, 0) += 1.0f;
  CHECK(model_fingerprint(vocab, p2) != base);

  auto vocab2 = vocab;
  vocab2.add_merge(BbpeVocab::kByteOffset + 'a', BbpeVocab::kByteOffset + 'b');
  CHECK(model_fingerprint(vocab2, p) != base);

  SUBCASE("hex round-trip") {
    CHECK(fingerprint_from_hex(fingerprint_hex(base)) == base);
  }
}

TEST_CASE("embedding file round-trip") {
  TempDir tmp;
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(2));
  auto matrix = embed_corpus(p, vocab, tiny_corpus());

  const std::string path = tmp.sub("emb.bin");
  save_embeddings(matrix, path);
  auto loaded = load_embeddings(path);

  CHECK(loaded.values == matrix.values);
  CHECK(loaded.doc_ids == matrix.doc_ids);
  CHECK(loaded.labels == matrix.labels);
  CHECK(loaded.fingerprint == matrix.fingerprint);

  SUBCASE("expected fingerprint accepted, wrong one refused") {
    CHECK_NOTHROW(load_embeddings(path, matrix.fingerprint));
    CHECK(code_of([&] { load_embeddings(path, matrix.fingerprint + 1); }) ==
          Errc::fingerprint_mismatch);
  }

  SUBCASE("rerun writes identical bytes") {
    std::ostringstream a, b;
    save_embeddings(matrix, a);
    save_embeddings(embed_corpus(p, vocab, tiny_corpus()), b);
    CHECK(a.str() == b.str());
  }
}

TEST_CASE("tampered embedding files are rejected") {
  auto vocab = plain_vocab();
  auto p = init_encoder<float>(small_config(2));
  auto matrix = embed_corpus(p, vocab, tiny_corpus());
  std::ostringstream out;
  save_embeddings(matrix, out);
  const std::string full = out.str();

  SUBCASE("truncated payload") {
    std::istringstream in(full.substr(0, full.size() - 4));
    CHECK(code_of([&] { load_embeddings(in); }) == Errc::format_error);
  }
  SUBCASE("trailing bytes") {
    std::istringstream in(full + "zz");
    CHECK(code_of([&] { load_embeddings(in); }) == Errc::format_error);
  }
  SUBCASE("wrong format tag") {
    std::istringstream in("{\"format\":\"not-embeddings\"}\n");
    CHECK(code_of([&] { load_embeddings(in); }) == Errc::format_error);
  }
}
