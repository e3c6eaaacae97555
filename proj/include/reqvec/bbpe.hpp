#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "reqvec/corpus.hpp"

namespace reqvec {

/// Byte-level BPE vocabulary. Ids are laid out as specials, the 256 base
/// bytes, then one id per merge in creation order:
///   0 <s>  1 </s>  2 <pad>  3 <mask>  |  4..259 bytes  |  260.. merges
/// Every merged token's byte expansion is the concatenation of its parents'
/// expansions, and expansions are unique across the vocabulary.
class BbpeVocab {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumSpecial = 4;
  static constexpr int kByteOffset = kNumSpecial;
  static constexpr int kMergeOffset = kByteOffset + 256;

  BbpeVocab();

  int size() const { return kMergeOffset + static_cast<int>(merges_.size()); }
  int configured_vocab_size() const { return configured_vocab_size_; }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  static bool is_special(int id) { return id >= 0 && id < kNumSpecial; }

  /// Byte expansion of a token ("" for specials).
  const std::string& expansion(int id) const;

  /// Id for a byte expansion, or -1 when no token has it.
  int token_id(const std::string& expansion) const;

  std::vector<int> encode(const std::string& text, bool add_bos_eos) const;
  std::string decode(const std::vector<int>& ids) const;

  /// Copy restricted to the first `num_merges` merges.
  BbpeVocab truncated(size_t num_merges) const;

  // Used by the trainer and the loader; the pair must reference existing ids
  // and the concatenated expansion must be new.
  int add_merge(int left, int right);
  void set_configured_vocab_size(int v) { configured_vocab_size_ = v; }

 private:
  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> expansions_;  // indexed by id
  std::unordered_map<std::string, int> token_to_id_;
  struct PairHash {
    size_t operator()(const std::pair<int, int>& p) const {
      return std::hash<uint64_t>()((static_cast<uint64_t>(p.first) << 32) ^
                                   static_cast<uint32_t>(p.second));
    }
  };
  std::unordered_map<std::pair<int, int>, int, PairHash> pair_rank_;
  int configured_vocab_size_ = kMergeOffset;
};

struct BbpeTrainConfig {
  int vocab_size = 5000;
  /// The reference behavior trains on the full dataset (normal + anomalous);
  /// pass false if inference data must not leak into token statistics.
  bool include_inference = true;
};

/// Greedy highest-frequency pair merging until vocab_size is reached or no
/// pair occurs at least twice. Ties break on the lexicographically smallest
/// concatenated byte expansion.
BbpeVocab train_bbpe(const Corpus& train, const Corpus* inference, const BbpeTrainConfig& config);

void save_vocab(const BbpeVocab& vocab, std::ostream& out);
void save_vocab(const BbpeVocab& vocab, const std::string& path);
BbpeVocab load_vocab(std::istream& in);
BbpeVocab load_vocab(const std::string& path);

}  // namespace reqvec
