#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "reqvec/bbpe.hpp"
#include "reqvec/errors.hpp"
#include "reqvec/rng.hpp"

namespace reqvec {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

struct EncoderConfig {
  int num_layers = 6;
  int num_heads = 12;
  int hidden = 768;
  int ffn = 0;  // 0 -> 4 * hidden
  int max_seq_len = 512;
  int vocab_size = 0;
  double dropout = 0.1;
  double mask_rate = 0.15;
  uint64_t seed = 0;

  int ffn_size() const { return ffn > 0 ? ffn : 4 * hidden; }

  void validate() const {
    if (num_layers < 1) raise(Errc::invalid_config, "num_layers must be >= 1");
    if (num_heads < 1) raise(Errc::invalid_config, "num_heads must be >= 1");
    if (hidden < 1 || hidden % num_heads != 0)
      raise(Errc::invalid_config, "hidden must be a positive multiple of num_heads");
    if (max_seq_len < 2) raise(Errc::invalid_config, "max_seq_len must be >= 2");
    if (vocab_size <= BbpeVocab::kNumSpecial)
      raise(Errc::invalid_config, "vocab_size must exceed the special-token count");
    if (!(mask_rate > 0.0 && mask_rate < 1.0))
      raise(Errc::invalid_config, "mask_rate must lie in (0, 1)");
    if (!(dropout >= 0.0 && dropout < 1.0))
      raise(Errc::invalid_config, "dropout must lie in [0, 1)");
  }
};

constexpr double kLayerNormEps = 1e-12;

template <typename Scalar>
struct EncoderLayerParams {
  Mat<Scalar> wq, wk, wv, wo;              // hidden x hidden
  Mat<Scalar> bq, bk, bv, bo;              // 1 x hidden
  Mat<Scalar> w1, b1;                      // hidden x ffn, 1 x ffn
  Mat<Scalar> w2, b2;                      // ffn x hidden, 1 x hidden
  Mat<Scalar> ln1_scale, ln1_shift;        // 1 x hidden
  Mat<Scalar> ln2_scale, ln2_shift;        // 1 x hidden
};

/// All trainable tensors. The MLM head projects with the transposed token
/// embedding table (weight tying), so only its bias is a separate tensor.
template <typename Scalar>
struct EncoderParams {
  EncoderConfig config;
  Mat<Scalar> tok_emb;  // vocab x hidden
  Mat<Scalar> pos_emb;  // max_seq_len x hidden
  std::vector<EncoderLayerParams<Scalar>> layers;
  Mat<Scalar> mlm_bias;  // 1 x vocab

  // Enumerates (name, tensor) in a fixed order; serialization, the optimizer
  // and the gradient checker all iterate through here.
  template <typename F>
  void visit(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& ly = layers[l];
      f(p + "wq", ly.wq);
      f(p + "bq", ly.bq);
      f(p + "wk", ly.wk);
      f(p + "bk", ly.bk);
      f(p + "wv", ly.wv);
      f(p + "bv", ly.bv);
      f(p + "wo", ly.wo);
      f(p + "bo", ly.bo);
      f(p + "ln1_scale", ly.ln1_scale);
      f(p + "ln1_shift", ly.ln1_shift);
      f(p + "w1", ly.w1);
      f(p + "b1", ly.b1);
      f(p + "w2", ly.w2);
      f(p + "b2", ly.b2);
      f(p + "ln2_scale", ly.ln2_scale);
      f(p + "ln2_shift", ly.ln2_shift);
    }
    f("mlm_bias", mlm_bias);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<EncoderParams*>(this)->visit(
        [&](const std::string& name, const Mat<Scalar>& t) { f(name, t); });
  }
};

template <typename Scalar>
EncoderParams<Scalar> init_encoder(const EncoderConfig& config) {
  config.validate();
  const int h = config.hidden;
  const int ff = config.ffn_size();

  EncoderParams<Scalar> p;
  p.config = config;
  p.tok_emb.resize(config.vocab_size, h);
  p.pos_emb.resize(config.max_seq_len, h);
  p.layers.resize(config.num_layers);
  for (auto& ly : p.layers) {
    ly.wq.resize(h, h);
    ly.bq.resize(1, h);
    ly.wk.resize(h, h);
    ly.bk.resize(1, h);
    ly.wv.resize(h, h);
    ly.bv.resize(1, h);
    ly.wo.resize(h, h);
    ly.bo.resize(1, h);
    ly.ln1_scale.resize(1, h);
    ly.ln1_shift.resize(1, h);
    ly.w1.resize(h, ff);
    ly.b1.resize(1, ff);
    ly.w2.resize(ff, h);
    ly.b2.resize(1, h);
    ly.ln2_scale.resize(1, h);
    ly.ln2_shift.resize(1, h);
  }
  p.mlm_bias.resize(1, config.vocab_size);

  Rng rng(config.seed);
  p.visit([&](const std::string& name, Mat<Scalar>& t) {
    if (name.find("ln") != std::string::npos) {
      t.setConstant(name.find("scale") != std::string::npos ? Scalar(1) : Scalar(0));
      return;
    }
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j)
        t(i, j) = static_cast<Scalar>(rng.normal(0.0, 0.02));
  });
  return p;
}

template <typename Scalar>
EncoderParams<Scalar> zeros_like(const EncoderParams<Scalar>& src) {
  EncoderParams<Scalar> z = src;
  z.visit([](const std::string&, Mat<Scalar>& t) { t.setZero(); });
  return z;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

template <typename Scalar>
struct ForwardResult {
  /// states[0] is the embedding-layer output, states[l] the output of encoder
  /// layer l; each is seq_len x hidden.
  std::vector<Mat<Scalar>> states;
  /// attention[l][h] is the row-stochastic seq_len x seq_len matrix of head h
  /// in layer l; filled only when capture_attention was requested.
  std::vector<std::vector<Mat<Scalar>>> attention;
};

namespace detail {

template <typename Scalar>
struct LayerCache {
  Mat<Scalar> q, k, v;                // T x H
  std::vector<Mat<Scalar>> probs;     // per head, T x T
  Mat<Scalar> context;                // T x H
  Mat<Scalar> attn_drop_mask;         // T x H (empty when unused)
  Mat<Scalar> r1;                     // T x H, pre-LN residual
  Mat<Scalar> ln1_xhat;               // T x H
  Mat<Scalar> ln1_invstd;             // T x 1
  Mat<Scalar> n1;                     // T x H
  Mat<Scalar> ffn_pre;                // T x F, pre-GELU
  Mat<Scalar> ffn_act;                // T x F
  Mat<Scalar> ffn_drop_mask;          // T x H
  Mat<Scalar> r2;                     // T x H
  Mat<Scalar> ln2_xhat;               // T x H
  Mat<Scalar> ln2_invstd;             // T x 1
};

template <typename Scalar>
struct ForwardCache {
  std::vector<int> ids;
  Mat<Scalar> emb_drop_mask;
  std::vector<Mat<Scalar>> states;
  std::vector<LayerCache<Scalar>> layers;
};

template <typename Scalar>
void layer_norm_rows(const Mat<Scalar>& x, const Mat<Scalar>& scale, const Mat<Scalar>& shift,
                     Mat<Scalar>& out, Mat<Scalar>& xhat, Mat<Scalar>& invstd) {
  const Eigen::Index n = x.cols();
  out.resize(x.rows(), n);
  xhat.resize(x.rows(), n);
  invstd.resize(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().sum() / Scalar(n);
    const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    invstd(r, 0) = inv;
    xhat.row(r) = (x.row(r).array() - mean) * inv;
    out.row(r) = xhat.row(r).cwiseProduct(scale.row(0)) + shift.row(0);
  }
}

template <typename Scalar>
Mat<Scalar> layer_norm_backward_rows(const Mat<Scalar>& dout, const Mat<Scalar>& xhat,
                                     const Mat<Scalar>& invstd, const Mat<Scalar>& scale,
                                     Mat<Scalar>& dscale, Mat<Scalar>& dshift) {
  const Eigen::Index n = xhat.cols();
  Mat<Scalar> dx(dout.rows(), n);
  for (Eigen::Index r = 0; r < dout.rows(); ++r) {
    dscale.row(0) += dout.row(r).cwiseProduct(xhat.row(r));
    dshift.row(0) += dout.row(r);
    const auto dxhat = dout.row(r).cwiseProduct(scale.row(0));
    const Scalar m1 = dxhat.mean();
    const Scalar m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) = (dxhat.array() - m1 - xhat.row(r).array() * m2) * invstd(r, 0);
  }
  return dx;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(0.7071067811865475244)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(0.7071067811865475244)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.3989422804014326779);
  return cdf + x * pdf;
}

template <typename Scalar>
Mat<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  Mat<Scalar> mask(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      mask(i, j) = rng.bernoulli(rate) ? Scalar(0) : keep_scale;
  return mask;
}

template <typename Scalar>
ForwardCache<Scalar> forward_cached(const EncoderParams<Scalar>& params,
                                    const std::vector<int>& ids, bool train_mode, Rng* rng,
                                    std::vector<std::vector<Mat<Scalar>>>* attention_out) {
  const EncoderConfig& cfg = params.config;
  const auto t_len = static_cast<Eigen::Index>(ids.size());
  if (t_len == 0) raise(Errc::empty_input, "cannot run the encoder on an empty sequence");
  if (t_len > cfg.max_seq_len)
    raise(Errc::sequence_too_long, std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
                                       std::to_string(cfg.max_seq_len));
  const bool use_dropout = train_mode && cfg.dropout > 0.0;
  if (use_dropout && rng == nullptr)
    raise(Errc::invalid_config, "train-mode forward with dropout needs an RNG");

  const int h = cfg.hidden;
  const int heads = cfg.num_heads;
  const int dh = h / heads;
  const Scalar alpha = Scalar(1) / std::sqrt(Scalar(dh));

  ForwardCache<Scalar> cache;
  cache.ids = ids;
  cache.states.reserve(cfg.num_layers + 1);

  Mat<Scalar> x(t_len, h);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const int id = ids[t];
    if (id < 0 || id >= cfg.vocab_size)
      raise(Errc::unknown_id, "token id " + std::to_string(id) + " outside vocab");
    x.row(t) = params.tok_emb.row(id) + params.pos_emb.row(t);
  }
  if (use_dropout) {
    cache.emb_drop_mask = dropout_mask<Scalar>(t_len, h, cfg.dropout, *rng);
    x = x.cwiseProduct(cache.emb_drop_mask);
  }
  cache.states.push_back(x);

  cache.layers.resize(cfg.num_layers);
  if (attention_out) attention_out->resize(cfg.num_layers);

  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& ly = params.layers[l];
    auto& lc = cache.layers[l];
    const Mat<Scalar>& a = cache.states.back();

    lc.q = (a * ly.wq).rowwise() + ly.bq.row(0);
    lc.k = (a * ly.wk).rowwise() + ly.bk.row(0);
    lc.v = (a * ly.wv).rowwise() + ly.bv.row(0);

    lc.probs.resize(heads);
    lc.context.resize(t_len, h);
    for (int hd = 0; hd < heads; ++hd) {
      const auto qh = lc.q.middleCols(hd * dh, dh);
      const auto kh = lc.k.middleCols(hd * dh, dh);
      const auto vh = lc.v.middleCols(hd * dh, dh);
      Mat<Scalar> scores = qh * kh.transpose() * alpha;
      for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const Scalar mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      lc.probs[hd] = std::move(scores);
      lc.context.middleCols(hd * dh, dh) = lc.probs[hd] * vh;
    }
    if (attention_out) (*attention_out)[l] = lc.probs;

    Mat<Scalar> attn_out = (lc.context * ly.wo).rowwise() + ly.bo.row(0);
    if (use_dropout) {
      lc.attn_drop_mask = dropout_mask<Scalar>(t_len, h, cfg.dropout, *rng);
      attn_out = attn_out.cwiseProduct(lc.attn_drop_mask);
    }
    lc.r1 = a + attn_out;
    layer_norm_rows(lc.r1, ly.ln1_scale, ly.ln1_shift, lc.n1, lc.ln1_xhat, lc.ln1_invstd);

    lc.ffn_pre = (lc.n1 * ly.w1).rowwise() + ly.b1.row(0);
    lc.ffn_act = lc.ffn_pre.unaryExpr([](Scalar v) { return gelu(v); });
    Mat<Scalar> ffn_out = (lc.ffn_act * ly.w2).rowwise() + ly.b2.row(0);
    if (use_dropout) {
      lc.ffn_drop_mask = dropout_mask<Scalar>(t_len, h, cfg.dropout, *rng);
      ffn_out = ffn_out.cwiseProduct(lc.ffn_drop_mask);
    }
    lc.r2 = lc.n1 + ffn_out;
    Mat<Scalar> out;
    layer_norm_rows(lc.r2, ly.ln2_scale, ly.ln2_shift, out, lc.ln2_xhat, lc.ln2_invstd);
    cache.states.push_back(std::move(out));
  }
  return cache;
}

}  // namespace detail

template <typename Scalar>
ForwardResult<Scalar> forward(const EncoderParams<Scalar>& params, const std::vector<int>& ids,
                              bool train_mode = false, Rng* rng = nullptr,
                              bool capture_attention = false) {
  ForwardResult<Scalar> result;
  std::vector<std::vector<Mat<Scalar>>>* attn = capture_attention ? &result.attention : nullptr;
  auto cache = detail::forward_cached(params, ids, train_mode, rng, attn);
  result.states = std::move(cache.states);
  return result;
}

// ---------------------------------------------------------------------------
// Masked-LM objective
// ---------------------------------------------------------------------------

struct MaskedSequence {
  std::vector<int> ids;                        // corrupted sequence
  std::vector<std::pair<int, int>> targets;    // (position, original id)
};

/// Selects each non-special position independently with probability
/// mask_rate, resampling until at least one is chosen. Selected positions are
/// replaced by MASK (80%), a random non-special id (10%) or left as-is (10%).
inline MaskedSequence mlm_mask(const std::vector<int>& ids, double mask_rate, uint64_t seed,
                               int vocab_size) {
  std::vector<int> maskable;
  for (size_t i = 0; i < ids.size(); ++i)
    if (!BbpeVocab::is_special(ids[i])) maskable.push_back(static_cast<int>(i));
  if (maskable.empty()) raise(Errc::nothing_to_mask, "sequence has no non-special tokens");

  Rng rng(seed);
  std::vector<int> selected;
  while (selected.empty()) {
    for (int pos : maskable)
      if (rng.bernoulli(mask_rate)) selected.push_back(pos);
  }

  MaskedSequence out;
  out.ids = ids;
  out.targets.reserve(selected.size());
  const int n_free = vocab_size - BbpeVocab::kNumSpecial;
  for (int pos : selected) {
    out.targets.emplace_back(pos, ids[pos]);
    const double u = rng.uniform();
    if (u < 0.8) {
      out.ids[pos] = BbpeVocab::kMask;
    } else if (u < 0.9) {
      out.ids[pos] =
          BbpeVocab::kNumSpecial + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(n_free)));
    }  // else: keep the original token
  }
  return out;
}

namespace detail {

// Cross-entropy over masked positions of one sequence. Fills row gradients
// when grads is non-null; dz rows are already scaled by inv_total_masked.
template <typename Scalar>
double mlm_sequence_loss(const EncoderParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                         const MaskedSequence& seq, double inv_total_masked,
                         Mat<Scalar>* d_last_state, EncoderParams<Scalar>* grads) {
  const auto m = static_cast<Eigen::Index>(seq.targets.size());
  const Mat<Scalar>& last = cache.states.back();

  Mat<Scalar> xm(m, params.config.hidden);
  for (Eigen::Index i = 0; i < m; ++i) xm.row(i) = last.row(seq.targets[i].first);

  Mat<Scalar> logits = xm * params.tok_emb.transpose();
  logits.rowwise() += params.mlm_bias.row(0);

  double loss = 0.0;
  Mat<Scalar> dz;
  if (grads) dz.resize(m, params.config.vocab_size);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Scalar mx = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - mx).eval();
    double sum_exp = 0.0;
    for (Eigen::Index j = 0; j < shifted.size(); ++j) sum_exp += std::exp(double(shifted(j)));
    const double lse = std::log(sum_exp);
    const int target = seq.targets[i].second;
    loss += lse - double(shifted(target));
    if (grads) {
      dz.row(i) = (shifted - Scalar(lse)).exp().matrix() * Scalar(inv_total_masked);
      dz(i, target) -= Scalar(inv_total_masked);
    }
  }

  if (grads) {
    grads->mlm_bias.row(0) += dz.colwise().sum();
    grads->tok_emb += dz.transpose() * xm;  // head side of the tied embedding
    d_last_state->setZero(last.rows(), last.cols());
    Mat<Scalar> dxm = dz * params.tok_emb;
    for (Eigen::Index i = 0; i < m; ++i) d_last_state->row(seq.targets[i].first) += dxm.row(i);
  }
  return loss;
}

template <typename Scalar>
void backward_sequence(const EncoderParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                       Mat<Scalar> dx, EncoderParams<Scalar>& grads) {
  const EncoderConfig& cfg = params.config;
  const int h = cfg.hidden;
  const int heads = cfg.num_heads;
  const int dh = h / heads;
  const Scalar alpha = Scalar(1) / std::sqrt(Scalar(dh));

  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const auto& ly = params.layers[l];
    auto& gl = grads.layers[l];
    const auto& lc = cache.layers[l];
    const Mat<Scalar>& a = cache.states[l];

    // LN2
    Mat<Scalar> dr2 = layer_norm_backward_rows(dx, lc.ln2_xhat, lc.ln2_invstd, ly.ln2_scale,
                                               gl.ln2_scale, gl.ln2_shift);
    // FFN
    Mat<Scalar> dffn_out = dr2;
    if (lc.ffn_drop_mask.size() > 0) dffn_out = dffn_out.cwiseProduct(lc.ffn_drop_mask);
    Mat<Scalar> dn1 = dr2;  // residual branch
    gl.w2 += lc.ffn_act.transpose() * dffn_out;
    gl.b2.row(0) += dffn_out.colwise().sum();
    Mat<Scalar> dact = dffn_out * ly.w2.transpose();
    Mat<Scalar> dpre =
        dact.cwiseProduct(lc.ffn_pre.unaryExpr([](Scalar v) { return gelu_grad(v); }));
    gl.w1 += lc.n1.transpose() * dpre;
    gl.b1.row(0) += dpre.colwise().sum();
    dn1 += dpre * ly.w1.transpose();

    // LN1
    Mat<Scalar> dr1 = layer_norm_backward_rows(dn1, lc.ln1_xhat, lc.ln1_invstd, ly.ln1_scale,
                                               gl.ln1_scale, gl.ln1_shift);
    // attention output projection
    Mat<Scalar> dattn_out = dr1;
    if (lc.attn_drop_mask.size() > 0) dattn_out = dattn_out.cwiseProduct(lc.attn_drop_mask);
    Mat<Scalar> da = dr1;  // residual branch
    gl.wo += lc.context.transpose() * dattn_out;
    gl.bo.row(0) += dattn_out.colwise().sum();
    Mat<Scalar> dcontext = dattn_out * ly.wo.transpose();

    Mat<Scalar> dq(dx.rows(), h), dk(dx.rows(), h), dv(dx.rows(), h);
    for (int hd = 0; hd < heads; ++hd) {
      const auto qh = lc.q.middleCols(hd * dh, dh);
      const auto kh = lc.k.middleCols(hd * dh, dh);
      const auto vh = lc.v.middleCols(hd * dh, dh);
      const auto dch = dcontext.middleCols(hd * dh, dh);
      const Mat<Scalar>& probs = lc.probs[hd];

      Mat<Scalar> dprobs = dch * vh.transpose();
      dv.middleCols(hd * dh, dh) = probs.transpose() * dch;

      Mat<Scalar> dscores(probs.rows(), probs.cols());
      for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const Scalar dot = dprobs.row(r).dot(probs.row(r));
        dscores.row(r) = (probs.row(r).array() * (dprobs.row(r).array() - dot)).matrix();
      }
      dq.middleCols(hd * dh, dh) = dscores * kh * alpha;
      dk.middleCols(hd * dh, dh) = dscores.transpose() * qh * alpha;
    }

    gl.wq += a.transpose() * dq;
    gl.bq.row(0) += dq.colwise().sum();
    gl.wk += a.transpose() * dk;
    gl.bk.row(0) += dk.colwise().sum();
    gl.wv += a.transpose() * dv;
    gl.bv.row(0) += dv.colwise().sum();
    da += dq * ly.wq.transpose() + dk * ly.wk.transpose() + dv * ly.wv.transpose();

    dx = std::move(da);
  }

  if (cache.emb_drop_mask.size() > 0) dx = dx.cwiseProduct(cache.emb_drop_mask);
  for (Eigen::Index t = 0; t < dx.rows(); ++t) {
    grads.tok_emb.row(cache.ids[t]) += dx.row(t);  // input side of the tied embedding
    grads.pos_emb.row(t) += dx.row(t);
  }
}

}  // namespace detail

template <typename Scalar>
struct MlmBatchResult {
  double loss = 0.0;          // mean cross-entropy over masked positions
  size_t masked_count = 0;
  EncoderParams<Scalar> grads;
};

/// Loss (and, when compute_grads, gradients for every tensor) of a batch of
/// corrupted sequences. Only masked positions contribute.
template <typename Scalar>
MlmBatchResult<Scalar> mlm_loss_and_grads(const EncoderParams<Scalar>& params,
                                          const std::vector<MaskedSequence>& batch,
                                          bool compute_grads = true, bool train_mode = false,
                                          Rng* dropout_rng = nullptr) {
  if (batch.empty()) raise(Errc::empty_input, "empty MLM batch");
  size_t total_masked = 0;
  for (const auto& seq : batch) total_masked += seq.targets.size();
  if (total_masked == 0) raise(Errc::nothing_to_mask, "batch has no masked positions");

  MlmBatchResult<Scalar> result;
  result.masked_count = total_masked;
  if (compute_grads) result.grads = zeros_like(params);

  const double inv_total = 1.0 / static_cast<double>(total_masked);
  double loss_sum = 0.0;
  for (const auto& seq : batch) {
    auto cache = detail::forward_cached(
        params, seq.ids, train_mode, dropout_rng,
        static_cast<std::vector<std::vector<Mat<Scalar>>>*>(nullptr));
    Mat<Scalar> d_last;
    loss_sum += detail::mlm_sequence_loss(params, cache, seq, inv_total,
                                          compute_grads ? &d_last : nullptr,
                                          compute_grads ? &result.grads : nullptr);
    if (compute_grads) detail::backward_sequence(params, cache, std::move(d_last), result.grads);
  }
  result.loss = loss_sum * inv_total;
  return result;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-4;
  double warmup_frac = 0.06;
  double weight_decay = 0.01;
  bool dynamic_masking = true;
  uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) raise(Errc::invalid_config, "epochs must be >= 0");
    if (batch_size < 1) raise(Errc::invalid_config, "batch_size must be >= 1");
  }
};

struct LossTrace {
  std::vector<double> step_loss;          // mean masked CE per optimizer step
  std::vector<double> epoch_perplexity;   // exp(mean masked CE) per epoch
};

template <typename Scalar>
std::vector<Mat<Scalar>*> tensor_ptrs(EncoderParams<Scalar>& params) {
  std::vector<Mat<Scalar>*> out;
  params.visit([&](const std::string&, Mat<Scalar>& t) { out.push_back(&t); });
  return out;
}

template <typename Scalar>
class AdamState {
 public:
  explicit AdamState(const EncoderParams<Scalar>& params)
      : m_(zeros_like(params)), v_(zeros_like(params)) {}

  // AdamW-style update; decoupled decay on matrices only (biases and
  // layer-norm tensors are 1 x n and stay undecayed).
  void update(EncoderParams<Scalar>& params, const EncoderParams<Scalar>& grads, double lr,
              double weight_decay) {
    ++t_;
    const Scalar inv_bc1 = Scalar(1.0 / (1.0 - std::pow(0.9, double(t_))));
    const Scalar inv_bc2 = Scalar(1.0 / (1.0 - std::pow(0.999, double(t_))));
    auto ps = tensor_ptrs(params);
    auto ms = tensor_ptrs(m_);
    auto vs = tensor_ptrs(v_);
    auto gs = tensor_ptrs(const_cast<EncoderParams<Scalar>&>(grads));
    for (size_t i = 0; i < ps.size(); ++i) {
      Mat<Scalar>& p = *ps[i];
      Mat<Scalar>& m = *ms[i];
      Mat<Scalar>& v = *vs[i];
      const Mat<Scalar>& g = *gs[i];
      m = Scalar(0.9) * m + Scalar(0.1) * g;
      v = Scalar(0.999) * v + Scalar(0.001) * g.cwiseProduct(g);
      if (weight_decay > 0.0 && p.rows() > 1) p -= (Scalar(lr * weight_decay) * p).eval();
      p.array() -=
          Scalar(lr) * (m.array() * inv_bc1) / ((v.array() * inv_bc2).sqrt() + Scalar(1e-8));
    }
  }

 private:
  EncoderParams<Scalar> m_, v_;
  int64_t t_ = 0;
};

/// MLM training over single tokenized lines (there is no segment pairing and
/// no next-segment objective). Dynamic masking draws a fresh mask per epoch.
template <typename Scalar>
LossTrace train_mlm(EncoderParams<Scalar>& params, const std::vector<std::vector<int>>& sequences,
                    const TrainConfig& cfg) {
  cfg.validate();
  std::vector<const std::vector<int>*> usable;
  for (const auto& s : sequences) {
    bool maskable = false;
    for (int id : s)
      if (!BbpeVocab::is_special(id)) maskable = true;
    if (maskable && static_cast<int>(s.size()) <= params.config.max_seq_len)
      usable.push_back(&s);
  }
  if (usable.empty()) raise(Errc::empty_corpus, "no trainable sequences");

  LossTrace trace;
  if (cfg.epochs == 0) return trace;

  const int64_t steps_per_epoch =
      (static_cast<int64_t>(usable.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  const int64_t warmup_steps =
      std::max<int64_t>(1, static_cast<int64_t>(std::llround(cfg.warmup_frac * double(total_steps))));

  AdamState<Scalar> adam(params);
  Rng shuffle_rng(fnv1a64("shuffle", cfg.seed));
  Rng dropout_rng(fnv1a64("dropout", cfg.seed));
  const bool use_dropout = params.config.dropout > 0.0;

  std::vector<size_t> order(usable.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_ce_sum = 0.0;
    size_t epoch_masked = 0;

    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<MaskedSequence> batch;
      const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      const size_t end = std::min(begin + cfg.batch_size, usable.size());
      for (size_t i = begin; i < end; ++i) {
        const uint64_t mask_epoch = cfg.dynamic_masking ? static_cast<uint64_t>(epoch) : 0;
        uint64_t seed = fnv1a64("mask", cfg.seed);
        seed = fnv1a64(&mask_epoch, sizeof mask_epoch, seed);
        const uint64_t idx = order[i];
        seed = fnv1a64(&idx, sizeof idx, seed);
        batch.push_back(
            mlm_mask(*usable[order[i]], params.config.mask_rate, seed, params.config.vocab_size));
      }

      auto res = mlm_loss_and_grads(params, batch, true, use_dropout,
                                    use_dropout ? &dropout_rng : nullptr);
      double lr = cfg.lr;
      if (step < warmup_steps) {
        lr *= double(step + 1) / double(warmup_steps);
      } else if (total_steps > warmup_steps) {
        lr *= double(total_steps - step) / double(total_steps - warmup_steps);
      }
      adam.update(params, res.grads, lr, cfg.weight_decay);

      trace.step_loss.push_back(res.loss);
      epoch_ce_sum += res.loss * double(res.masked_count);
      epoch_masked += res.masked_count;
      ++step;
    }
    trace.epoch_perplexity.push_back(std::exp(epoch_ce_sum / double(epoch_masked)));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Compares analytic gradients against central differences on randomly probed
/// coordinates of every tensor; dropout is forced off. Returns the largest
/// relative error seen. Double precision; intended for tiny configs.
double gradient_check(EncoderConfig config, uint64_t seed, int probes_per_tensor);

// ---------------------------------------------------------------------------
// Serialization (float32 payload)
// ---------------------------------------------------------------------------

void save_params(const EncoderParams<float>& params, std::ostream& out);
void save_params(const EncoderParams<float>& params, const std::string& path);
EncoderParams<float> load_params(std::istream& in);
EncoderParams<float> load_params(const std::string& path);

}  // namespace reqvec
