#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "reqvec/encoder.hpp"
#include "reqvec/errors.hpp"
#include "reqvec/rng.hpp"
#include "test_util.hpp"

using namespace reqvec;
using testutil::code_of;
using testutil::TempDir;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.hidden = 8;
  c.ffn = 16;
  c.max_seq_len = 16;
  c.vocab_size = 264;
  c.dropout = 0.0;
  c.seed = 1;
  return c;
}

template <typename Scalar>
bool params_equal(const EncoderParams<Scalar>& a, const EncoderParams<Scalar>& b) {
  bool equal = true;
  std::map<std::string, const Mat<Scalar>*> ta;
  a.visit([&](const std::string& n, const Mat<Scalar>& t) { ta[n] = &t; });
  b.visit([&](const std::string& n, const Mat<Scalar>& t) {
    auto it = ta.find(n);
    if (it == ta.end() || it->second->rows() != t.rows() || it->second->cols() != t.cols() ||
        *it->second != t)
      equal = false;
  });
  return equal && ta.size() == 3 + 16 * a.layers.size();  // visit enumerates every tensor
}

}  // namespace

TEST_CASE("init produces the documented shapes") {
  EncoderConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.hidden = 8;
  c.max_seq_len = 16;
  c.vocab_size = 260;
  c.seed = 0;
  auto p = init_encoder<float>(c);

  CHECK(p.tok_emb.rows() == 260);
  CHECK(p.tok_emb.cols() == 8);
  CHECK(p.pos_emb.rows() == 16);
  CHECK(p.pos_emb.cols() == 8);
  REQUIRE(p.layers.size() == 1);
  CHECK(p.layers[0].wq.rows() == 8);
  CHECK(p.layers[0].wq.cols() == 8);
  CHECK(p.layers[0].w1.rows() == 8);
  CHECK(p.layers[0].w1.cols() == 32);  // ffn defaults to 4H
  CHECK(p.layers[0].w2.rows() == 32);
  CHECK(p.layers[0].w2.cols() == 8);
  CHECK(p.layers[0].ln1_scale.rows() == 1);
  CHECK(p.layers[0].ln1_scale.cols() == 8);
  CHECK(p.mlm_bias.rows() == 1);
  CHECK(p.mlm_bias.cols() == 260);

  CHECK((p.layers[0].ln1_scale.array() == 1.0f).all());
  CHECK((p.layers[0].ln2_shift.array() == 0.0f).all());
}

TEST_CASE("invalid configs are rejected") {
  EncoderConfig c = tiny_config();
  c.hidden = 10;
  c.num_heads = 4;
  CHECK(code_of([&] { init_encoder<float>(c); }) == Errc::invalid_config);

  c = tiny_config();
  c.mask_rate = 0.0;
  CHECK(code_of([&] { init_encoder<float>(c); }) == Errc::invalid_config);

  c = tiny_config();
  c.max_seq_len = 1;
  CHECK(code_of([&] { init_encoder<float>(c); }) == Errc::invalid_config);
}

TEST_CASE("init is deterministic in the seed") {
  auto a = init_encoder<float>(tiny_config());
  auto b = init_encoder<float>(tiny_config());
  CHECK(params_equal(a, b));

  EncoderConfig other = tiny_config();
  other.seed = 2;
  CHECK_FALSE(params_equal(a, init_encoder<float>(other)));
}

TEST_CASE("forward on a single token returns layers+1 states of 1 x H") {
  auto p = init_encoder<float>(tiny_config());
  auto result = forward(p, {BbpeVocab::kBos});
  REQUIRE(result.states.size() == 3);  // embedding output + 2 layers
  for (const auto& s : result.states) {
    CHECK(s.rows() == 1);
    CHECK(s.cols() == 8);
    CHECK(s.allFinite());
  }
}

TEST_CASE("forward is sensitive to token content and position") {
  auto p = init_encoder<float>(tiny_config());
  std::vector<int> base = {0, 10, 20, 30, 1};
  auto r0 = forward(p, base);

  std::vector<int> changed = base;
  changed[2] = 21;
  auto r1 = forward(p, changed);
  CHECK((r0.states.back() - r1.states.back()).cwiseAbs().maxCoeff() > 0);

  std::vector<int> swapped = {0, 20, 10, 30, 1};
  auto r2 = forward(p, swapped);
  CHECK((r0.states.back() - r2.states.back()).cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("forward enforces max_seq_len") {
  auto p = init_encoder<float>(tiny_config());
  std::vector<int> too_long(17, 10);
  CHECK(code_of([&] { forward(p, too_long); }) == Errc::sequence_too_long);
  CHECK(code_of([&] { forward(p, {}); }) == Errc::empty_input);
  CHECK(code_of([&] { forward(p, {9999}); }) == Errc::unknown_id);
}

TEST_CASE("attention rows are stochastic") {
  auto p = init_encoder<float>(tiny_config());
  std::vector<int> ids = {0, 10, 20, 30, 40, 1};
  auto result = forward(p, ids, false, nullptr, true);
  REQUIRE(result.attention.size() == 2);
  for (const auto& layer : result.attention) {
    REQUIRE(layer.size() == 2);
    for (const auto& head : layer) {
      REQUIRE(head.rows() == 6);
      REQUIRE(head.cols() == 6);
      CHECK((head.array() >= 0).all());
      for (Eigen::Index r = 0; r < head.rows(); ++r)
        CHECK(head.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("layer norm emits zero-mean unit-variance rows") {
  Rng rng(5);
  Mat<double> x(4, 32);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = 3.0 * rng.normal() + 1.5;

  Mat<double> scale = Mat<double>::Ones(1, 32);
  Mat<double> shift = Mat<double>::Zero(1, 32);
  Mat<double> y, xhat, invstd;
  detail::layer_norm_rows(x, scale, shift, y, xhat, invstd);

  const double denom = 32.0;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    CHECK(std::abs(y.row(r).mean()) < 1e-5);
    const double var = y.row(r).array().square().sum() / denom -
                       y.row(r).mean() * y.row(r).mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("with dropout 0 the train and eval passes agree") {
  auto p = init_encoder<float>(tiny_config());
  std::vector<int> ids = {0, 50, 60, 1};
  Rng rng(9);
  auto eval_result = forward(p, ids, false);
  auto train_result = forward(p, ids, true, &rng);
  CHECK(eval_result.states.back() == train_result.states.back());
}

TEST_CASE("dropout perturbs the training pass only") {
  EncoderConfig c = tiny_config();
  c.dropout = 0.5;
  auto p = init_encoder<float>(c);
  std::vector<int> ids = {0, 50, 60, 1};
  Rng rng(9);
  auto dropped = forward(p, ids, true, &rng);
  auto clean = forward(p, ids, false);
  CHECK((dropped.states.back() - clean.states.back()).cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("mlm_mask selects roughly the configured fraction") {
  std::vector<int> ids(10002, 100);
  ids.front() = BbpeVocab::kBos;
  ids.back() = BbpeVocab::kEos;
  auto masked = mlm_mask(ids, 0.15, 3, 264);
  const double fraction = double(masked.targets.size()) / 10000.0;
  CHECK(fraction > 0.13);
  CHECK(fraction < 0.17);

  SUBCASE("deterministic given the seed") {
    auto again = mlm_mask(ids, 0.15, 3, 264);
    CHECK(again.ids == masked.ids);
    CHECK(again.targets == masked.targets);
  }
}

TEST_CASE("mlm_mask corruption follows the 80/10/10 split") {
  std::vector<int> ids(20002, 100);
  ids.front() = BbpeVocab::kBos;
  ids.back() = BbpeVocab::kEos;
  auto masked = mlm_mask(ids, 0.5, 11, 264);

  int to_mask = 0, changed = 0, kept = 0;
  for (const auto& [pos, orig] : masked.targets) {
    CHECK(orig == 100);
    if (masked.ids[pos] == BbpeVocab::kMask) ++to_mask;
    else if (masked.ids[pos] != orig) ++changed;
    else ++kept;
  }
  const double n = double(masked.targets.size());
  CHECK(to_mask / n == doctest::Approx(0.8).epsilon(0.05));
  CHECK(changed / n == doctest::Approx(0.1).epsilon(0.35));
  CHECK(kept / n > 0.05);  // random replacement can collide with the original

  SUBCASE("unselected positions are untouched") {
    std::set<int> sel;
    for (const auto& [pos, orig] : masked.targets) sel.insert(pos);
    for (size_t i = 1; i + 1 < masked.ids.size(); ++i)
      if (!sel.count(int(i))) CHECK(masked.ids[i] == 100);
  }
}

TEST_CASE("mlm_mask needs a maskable token and always selects at least one") {
  CHECK(code_of([] { mlm_mask({BbpeVocab::kBos, BbpeVocab::kEos}, 0.15, 0, 264); }) ==
        Errc::nothing_to_mask);

  std::vector<int> ids = {BbpeVocab::kBos, 42, BbpeVocab::kEos};
  auto masked = mlm_mask(ids, 1e-9, 0, 264);
  CHECK(masked.targets.size() == 1);
  CHECK(masked.targets[0].first == 1);
}

TEST_CASE("uniform logits give cross-entropy ln V") {
  auto p = zeros_like(init_encoder<float>(tiny_config()));
  // Zero parameters keep every activation at zero, so logits are uniform.
  MaskedSequence seq;
  seq.ids = {BbpeVocab::kBos, BbpeVocab::kMask, 17, BbpeVocab::kEos};
  seq.targets = {{1, 99}};
  auto result = mlm_loss_and_grads(p, std::vector<MaskedSequence>{seq}, false);
  CHECK(result.loss == doctest::Approx(std::log(264.0)).epsilon(1e-6));
}

TEST_CASE("batch loss is a mean: duplicating a sequence changes nothing") {
  auto p = init_encoder<float>(tiny_config());
  MaskedSequence seq;
  seq.ids = {BbpeVocab::kBos, BbpeVocab::kMask, 17, 41, BbpeVocab::kEos};
  seq.targets = {{1, 99}, {3, 41}};

  auto one = mlm_loss_and_grads(p, {seq}, false);
  auto two = mlm_loss_and_grads(p, {seq, seq}, false);
  CHECK(one.loss == doctest::Approx(two.loss).epsilon(1e-12));
}

TEST_CASE("loss depends only on corrupted ids and targets") {
  // Two masked sequences built from different originals that happen to agree
  // on the corrupted ids and the target map give identical losses: unmasked
  // originals are not inputs to the loss at all.
  auto p = init_encoder<float>(tiny_config());
  MaskedSequence a;
  a.ids = {BbpeVocab::kBos, BbpeVocab::kMask, 50, BbpeVocab::kEos};
  a.targets = {{1, 70}};
  MaskedSequence b = a;  // same corrupted view, "original" token at 2 unknowable
  CHECK(mlm_loss_and_grads(p, {a}, false).loss ==
        mlm_loss_and_grads(p, {b}, false).loss);
}

TEST_CASE("analytic gradients match central differences") {
  EncoderConfig c = tiny_config();
  c.num_layers = 1;
  CHECK(gradient_check(c, 7, 2) < 1e-4);
}

TEST_CASE("training reduces the masked perplexity on a small corpus") {
  EncoderConfig c = tiny_config();
  auto p = init_encoder<float>(c);

  Rng rng(21);
  std::vector<std::vector<int>> sequences;
  for (int i = 0; i < 24; ++i) {
    std::vector<int> s = {BbpeVocab::kBos};
    const int len = 6 + int(rng.uniform_index(6));
    for (int t = 0; t < len; ++t) s.push_back(100 + int(rng.uniform_index(8)));
    s.push_back(BbpeVocab::kEos);
    sequences.push_back(std::move(s));
  }

  TrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.seed = 2;
  auto trace = train_mlm(p, sequences, tc);

  REQUIRE(trace.epoch_perplexity.size() == 8);
  for (double ppl : trace.epoch_perplexity) CHECK(ppl >= 1.0);
  CHECK(trace.epoch_perplexity.back() < trace.epoch_perplexity.front());
  CHECK(trace.step_loss.size() == 8 * 3);  // ceil(24/8) batches per epoch
}

TEST_CASE("zero epochs leave the parameters untouched") {
  auto p = init_encoder<float>(tiny_config());
  auto original = p;
  TrainConfig tc;
  tc.epochs = 0;
  auto trace = train_mlm(p, {{BbpeVocab::kBos, 100, BbpeVocab::kEos}}, tc);
  CHECK(trace.step_loss.empty());
  CHECK(trace.epoch_perplexity.empty());
  CHECK(params_equal(p, original));
}

TEST_CASE("training is deterministic given the seed") {
  std::vector<std::vector<int>> sequences;
  for (int i = 0; i < 8; ++i)
    sequences.push_back({BbpeVocab::kBos, 100 + i, 110 + i, 120, BbpeVocab::kEos});

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 5;

  auto p1 = init_encoder<float>(tiny_config());
  auto t1 = train_mlm(p1, sequences, tc);
  auto p2 = init_encoder<float>(tiny_config());
  auto t2 = train_mlm(p2, sequences, tc);

  CHECK(t1.step_loss == t2.step_loss);
  CHECK(params_equal(p1, p2));
}

TEST_CASE("dynamic masking draws different masks across epochs") {
  std::vector<std::vector<int>> sequences;
  for (int i = 0; i < 8; ++i)
    sequences.push_back({BbpeVocab::kBos, 100 + i, 110 + i, 120, 130, 140, BbpeVocab::kEos});

  TrainConfig dynamic;
  dynamic.epochs = 4;
  dynamic.batch_size = 8;
  dynamic.lr = 0.0;  // freeze the weights; only the masks vary
  dynamic.seed = 5;

  TrainConfig fixed = dynamic;
  fixed.dynamic_masking = false;

  auto p = init_encoder<float>(tiny_config());
  auto pd = p;
  auto trace_dynamic = train_mlm(pd, sequences, dynamic);
  auto pf = p;
  auto trace_fixed = train_mlm(pf, sequences, fixed);

  // With static masking and frozen weights every epoch sees the same batch.
  for (double loss : trace_fixed.step_loss)
    CHECK(loss == doctest::Approx(trace_fixed.step_loss[0]).epsilon(1e-12));

  bool any_different = false;
  for (double loss : trace_dynamic.step_loss)
    if (std::abs(loss - trace_dynamic.step_loss[0]) > 1e-9) any_different = true;
  CHECK(any_different);
}

TEST_CASE("weight round-trip is bit-exact and preserves the forward pass") {
  TempDir tmp;
  auto p = init_encoder<float>(tiny_config());
  const std::string path = tmp.sub("weights.bin");
  save_params(p, path);
  auto loaded = load_params(path);

  CHECK(params_equal(p, loaded));
  std::vector<int> ids = {BbpeVocab::kBos, 77, 88, BbpeVocab::kEos};
  CHECK(forward(p, ids).states.back() == forward(loaded, ids).states.back());

  SUBCASE("saved bytes are identical across saves") {
    std::ostringstream a, b;
    save_params(p, a);
    save_params(p, b);
    CHECK(a.str() == b.str());
  }
}

TEST_CASE("weight files with tampered payloads are rejected") {
  auto p = init_encoder<float>(tiny_config());
  std::ostringstream out;
  save_params(p, out);
  const std::string full = out.str();

  SUBCASE("truncated payload") {
    std::istringstream in(full.substr(0, full.size() - 8));
    CHECK(code_of([&] { load_params(in); }) == Errc::shape_mismatch);
  }
  SUBCASE("trailing bytes") {
    std::istringstream in(full + "XXXX");
    CHECK(code_of([&] { load_params(in); }) == Errc::shape_mismatch);
  }
  SUBCASE("wrong format tag") {
    std::istringstream in("{\"format\":\"other\"}\n");
    CHECK(code_of([&] { load_params(in); }) == Errc::format_error);
  }
}
