#include "reqvec/encoder.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace reqvec {

static_assert(std::endian::native == std::endian::little,
              "weight files are little-endian; big-endian hosts are unsupported");

double gradient_check(EncoderConfig config, uint64_t seed, int probes_per_tensor) {
  config.dropout = 0.0;
  config.validate();
  auto params = init_encoder<double>(config);

  Rng data_rng(fnv1a64("gradcheck-data", seed));
  auto make_sequence = [&](int body_len) {
    std::vector<int> ids;
    ids.push_back(BbpeVocab::kBos);
    const int n_free = config.vocab_size - BbpeVocab::kNumSpecial;
    for (int i = 0; i < body_len; ++i)
      ids.push_back(BbpeVocab::kNumSpecial +
                    static_cast<int>(data_rng.uniform_index(static_cast<uint64_t>(n_free))));
    ids.push_back(BbpeVocab::kEos);
    return ids;
  };
  const int cap = config.max_seq_len - 2;
  std::vector<MaskedSequence> batch;
  batch.push_back(mlm_mask(make_sequence(std::min(3, cap)), config.mask_rate,
                           fnv1a64("gradcheck-mask-0", seed), config.vocab_size));
  batch.push_back(mlm_mask(make_sequence(std::min(5, cap)), config.mask_rate,
                           fnv1a64("gradcheck-mask-1", seed), config.vocab_size));

  auto analytic = mlm_loss_and_grads(params, batch, true);
  auto loss_at = [&]() { return mlm_loss_and_grads(params, batch, false).loss; };

  Rng probe_rng(fnv1a64("gradcheck-probe", seed));
  const double h = 1e-5;
  double max_rel = 0.0;

  auto ps = tensor_ptrs(params);
  auto gs = tensor_ptrs(analytic.grads);
  for (size_t ti = 0; ti < ps.size(); ++ti) {
    Mat<double>& tensor = *ps[ti];
    const Mat<double>& grad = *gs[ti];
    for (int p = 0; p < probes_per_tensor; ++p) {
      const auto r = static_cast<Eigen::Index>(probe_rng.uniform_index(tensor.rows()));
      const auto c = static_cast<Eigen::Index>(probe_rng.uniform_index(tensor.cols()));
      const double saved = tensor(r, c);
      tensor(r, c) = saved + h;
      const double lp = loss_at();
      tensor(r, c) = saved - h;
      const double lm = loss_at();
      tensor(r, c) = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = grad(r, c);
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

namespace {

nlohmann::json config_to_json(const EncoderConfig& c) {
  return {{"num_layers", c.num_layers}, {"num_heads", c.num_heads},  {"hidden", c.hidden},
          {"ffn", c.ffn},               {"max_seq_len", c.max_seq_len},
          {"vocab_size", c.vocab_size}, {"dropout", c.dropout},      {"mask_rate", c.mask_rate},
          {"seed", c.seed}};
}

EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.mask_rate = j.at("mask_rate").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

}  // namespace

void save_params(const EncoderParams<float>& params, std::ostream& out) {
  nlohmann::json manifest;
  manifest["format"] = "reqvec-weights";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(params.config);

  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  params.visit([&](const std::string& name, const Mat<float>& t) {
    tensors.push_back({{"name", name},
                       {"rows", t.rows()},
                       {"cols", t.cols()},
                       {"offset", offset}});
    offset += static_cast<uint64_t>(t.size());
  });
  manifest["tensors"] = std::move(tensors);
  manifest["payload_floats"] = offset;

  out << manifest.dump() << '\n';
  std::vector<float> row;
  params.visit([&](const std::string&, const Mat<float>& t) {
    row.resize(static_cast<size_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) row[static_cast<size_t>(c)] = t(r, c);
      out.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
  });
  if (!out) raise(Errc::io_error, "failed while writing weights");
}

void save_params(const EncoderParams<float>& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Errc::io_error, "cannot open " + path + " for writing");
  save_params(params, out);
}

EncoderParams<float> load_params(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) raise(Errc::io_error, "weight file is empty");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::format_error, std::string("bad weight manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "reqvec-weights")
    raise(Errc::format_error, "not a weight file");

  EncoderConfig config;
  try {
    config = config_from_json(manifest.at("config"));
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::format_error, std::string("bad weight manifest: ") + e.what());
  }
  config.validate();
  auto params = init_encoder<float>(config);

  const auto& tensors = manifest.at("tensors");
  size_t idx = 0;
  uint64_t expect_offset = 0;
  std::vector<float> row;
  params.visit([&](const std::string& name, Mat<float>& t) {
    if (idx >= tensors.size()) raise(Errc::shape_mismatch, "manifest lists too few tensors");
    const auto& entry = tensors[idx++];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("rows").get<Eigen::Index>() != t.rows() ||
        entry.at("cols").get<Eigen::Index>() != t.cols() ||
        entry.at("offset").get<uint64_t>() != expect_offset)
      raise(Errc::shape_mismatch, "tensor directory disagrees with config for " + name);
    expect_offset += static_cast<uint64_t>(t.size());
    row.resize(static_cast<size_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      in.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
      if (!in) raise(Errc::shape_mismatch, "weight payload is shorter than the manifest claims");
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = row[static_cast<size_t>(c)];
    }
  });
  if (idx != tensors.size()) raise(Errc::shape_mismatch, "manifest lists too many tensors");
  if (manifest.contains("payload_floats") &&
      manifest.at("payload_floats").get<uint64_t>() != expect_offset)
    raise(Errc::shape_mismatch, "payload size disagrees with the tensor directory");
  if (in.peek() != std::char_traits<char>::eof())
    raise(Errc::shape_mismatch, "trailing bytes after the weight payload");
  return params;
}

EncoderParams<float> load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Errc::io_error, "cannot open " + path);
  return load_params(in);
}

}  // namespace reqvec
