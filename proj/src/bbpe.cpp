#include "reqvec/bbpe.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "reqvec/errors.hpp"

using json = nlohmann::json;

namespace reqvec {

BbpeVocab::BbpeVocab() {
  expansions_.resize(kMergeOffset);
  for (int b = 0; b < 256; ++b) {
    expansions_[kByteOffset + b] = std::string(1, static_cast<char>(b));
    token_to_id_[expansions_[kByteOffset + b]] = kByteOffset + b;
  }
}

const std::string& BbpeVocab::expansion(int id) const {
  if (id < 0 || id >= size()) raise(Errc::unknown_id, "token id " + std::to_string(id));
  return expansions_[id];
}

int BbpeVocab::token_id(const std::string& expansion) const {
  auto it = token_to_id_.find(expansion);
  return it == token_to_id_.end() ? -1 : it->second;
}

int BbpeVocab::add_merge(int left, int right) {
  const std::string merged = expansion(left) + expansion(right);
  if (token_to_id_.count(merged))
    raise(Errc::format_error, "merge duplicates expansion '" + merged + "'");
  const int id = size();
  merges_.emplace_back(left, right);
  expansions_.push_back(merged);
  token_to_id_[merged] = id;
  pair_rank_[{left, right}] = static_cast<int>(merges_.size()) - 1;
  return id;
}

BbpeVocab BbpeVocab::truncated(size_t num_merges) const {
  BbpeVocab out;
  out.configured_vocab_size_ = configured_vocab_size_;
  for (size_t i = 0; i < std::min(num_merges, merges_.size()); ++i)
    out.add_merge(merges_[i].first, merges_[i].second);
  return out;
}

std::vector<int> BbpeVocab::encode(const std::string& text, bool add_bos_eos) const {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  if (add_bos_eos) ids.push_back(kBos);
  const size_t start = ids.size();
  for (unsigned char c : text) ids.push_back(kByteOffset + c);

  // Rank-greedy: repeatedly apply the lowest-rank merge present, all of its
  // occurrences left to right.
  while (ids.size() - start >= 2) {
    int best_rank = -1;
    for (size_t i = start; i + 1 < ids.size(); ++i) {
      auto it = pair_rank_.find({ids[i], ids[i + 1]});
      if (it != pair_rank_.end() && (best_rank < 0 || it->second < best_rank))
        best_rank = it->second;
    }
    if (best_rank < 0) break;
    const auto [left, right] = merges_[best_rank];
    const int merged_id = kMergeOffset + best_rank;
    size_t w = start;
    for (size_t r = start; r < ids.size();) {
      if (r + 1 < ids.size() && ids[r] == left && ids[r + 1] == right) {
        ids[w++] = merged_id;
        r += 2;
      } else {
        ids[w++] = ids[r++];
      }
    }
    ids.resize(w);
  }

  if (add_bos_eos) ids.push_back(kEos);
  return ids;
}

std::string BbpeVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) raise(Errc::unknown_id, "token id " + std::to_string(id));
    if (is_special(id)) continue;
    out += expansions_[id];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct WeightedLine {
  std::vector<int> ids;
  int64_t count = 0;
};

struct PairKeyHash {
  size_t operator()(const std::pair<int, int>& p) const {
    return std::hash<uint64_t>()((static_cast<uint64_t>(p.first) << 32) ^
                                 static_cast<uint32_t>(p.second));
  }
};

void collect_lines(const Corpus& corpus, std::unordered_map<std::string, int64_t>& counts) {
  for (const auto& doc : corpus.docs)
    for (const auto& line : doc.lines)
      if (!line.empty()) ++counts[line];
}

}  // namespace

BbpeVocab train_bbpe(const Corpus& train, const Corpus* inference, const BbpeTrainConfig& config) {
  if (config.vocab_size <= BbpeVocab::kMergeOffset)
    raise(Errc::invalid_config, "vocab_size must exceed " +
                                    std::to_string(BbpeVocab::kMergeOffset) +
                                    " (bytes + specials)");

  std::unordered_map<std::string, int64_t> line_counts;
  collect_lines(train, line_counts);
  if (inference && config.include_inference) collect_lines(*inference, line_counts);
  if (line_counts.empty()) raise(Errc::empty_corpus, "no non-empty lines to train on");

  BbpeVocab vocab;
  vocab.set_configured_vocab_size(config.vocab_size);

  std::vector<WeightedLine> lines;
  lines.reserve(line_counts.size());
  for (const auto& [text, count] : line_counts) {
    WeightedLine wl;
    wl.count = count;
    wl.ids.reserve(text.size());
    for (unsigned char c : text) wl.ids.push_back(BbpeVocab::kByteOffset + c);
    lines.push_back(std::move(wl));
  }
  // Hash-map order must not influence tie-breaking downstream; it does not
  // (selection compares expansions), but keep the scan order stable anyway.
  std::sort(lines.begin(), lines.end(),
            [&](const WeightedLine& a, const WeightedLine& b) { return a.ids < b.ids; });

  const int max_merges = config.vocab_size - BbpeVocab::kMergeOffset;
  std::unordered_map<std::pair<int, int>, int64_t, PairKeyHash> pair_counts;

  for (int merge_idx = 0; merge_idx < max_merges; ++merge_idx) {
    pair_counts.clear();
    for (const auto& wl : lines)
      for (size_t i = 0; i + 1 < wl.ids.size(); ++i)
        pair_counts[{wl.ids[i], wl.ids[i + 1]}] += wl.count;

    // Highest count wins; ties break on the smallest concatenated expansion,
    // then on the smallest left expansion. Pairs whose concatenation would
    // duplicate an existing token are not eligible.
    bool found = false;
    std::pair<int, int> best{};
    int64_t best_count = 0;
    std::string best_concat;
    for (const auto& [pair, count] : pair_counts) {
      if (count < 2) continue;
      std::string concat = vocab.expansion(pair.first) + vocab.expansion(pair.second);
      if (vocab.token_id(concat) >= 0) continue;
      bool better = false;
      if (!found || count > best_count) {
        better = true;
      } else if (count == best_count) {
        if (concat < best_concat)
          better = true;
        else if (concat == best_concat && vocab.expansion(pair.first) < vocab.expansion(best.first))
          better = true;
      }
      if (better) {
        found = true;
        best = pair;
        best_count = count;
        best_concat = std::move(concat);
      }
    }
    if (!found) break;

    const int merged_id = vocab.add_merge(best.first, best.second);
    for (auto& wl : lines) {
      size_t w = 0;
      for (size_t r = 0; r < wl.ids.size();) {
        if (r + 1 < wl.ids.size() && wl.ids[r] == best.first && wl.ids[r + 1] == best.second) {
          wl.ids[w++] = merged_id;
          r += 2;
        } else {
          wl.ids[w++] = wl.ids[r++];
        }
      }
      wl.ids.resize(w);
    }
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// Serialization: one-line JSON manifest, then "left<TAB>right" per merge with
// backslash escapes for tab/CR/LF bytes inside token expansions.
// ---------------------------------------------------------------------------

namespace {

std::string escape_token(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_token(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 1 >= s.size()) raise(Errc::format_error, "dangling escape in merge line");
    switch (s[++i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: raise(Errc::format_error, "bad escape in merge line");
    }
  }
  return out;
}

}  // namespace

void save_vocab(const BbpeVocab& vocab, std::ostream& out) {
  json manifest;
  manifest["format"] = "reqvec-bbpe";
  manifest["version"] = 1;
  manifest["vocab_size"] = vocab.configured_vocab_size();
  manifest["num_merges"] = vocab.merges().size();
  manifest["specials"] = {{"bos", BbpeVocab::kBos},
                          {"eos", BbpeVocab::kEos},
                          {"pad", BbpeVocab::kPad},
                          {"mask", BbpeVocab::kMask}};
  out << manifest.dump() << "\n";
  for (const auto& [left, right] : vocab.merges())
    out << escape_token(vocab.expansion(left)) << "\t" << escape_token(vocab.expansion(right))
        << "\n";
}

void save_vocab(const BbpeVocab& vocab, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(Errc::io_error, "cannot open '" + path + "' for writing");
  save_vocab(vocab, f);
  if (!f) raise(Errc::io_error, "write failed for '" + path + "'");
}

BbpeVocab load_vocab(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) raise(Errc::format_error, "missing vocab manifest");
  json manifest;
  try {
    manifest = json::parse(line);
  } catch (const json::exception& e) {
    raise(Errc::format_error, std::string("bad vocab manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "reqvec-bbpe")
    raise(Errc::format_error, "not a reqvec-bbpe vocab file");

  BbpeVocab vocab;
  vocab.set_configured_vocab_size(manifest.value("vocab_size", BbpeVocab::kMergeOffset));
  const size_t num_merges = manifest.value("num_merges", size_t{0});
  for (size_t i = 0; i < num_merges; ++i) {
    if (!std::getline(in, line))
      raise(Errc::format_error, "truncated vocab file: expected " + std::to_string(num_merges) +
                                    " merges, got " + std::to_string(i));
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) raise(Errc::format_error, "merge line missing tab separator");
    const int left = vocab.token_id(unescape_token(line.substr(0, tab)));
    const int right = vocab.token_id(unescape_token(line.substr(tab + 1)));
    if (left < 0 || right < 0)
      raise(Errc::format_error, "merge references unknown token at rank " + std::to_string(i));
    vocab.add_merge(left, right);
  }
  return vocab;
}

BbpeVocab load_vocab(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Errc::io_error, "cannot open '" + path + "'");
  return load_vocab(f);
}

}  // namespace reqvec
