#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace reqvec {

enum class Label { normal, anomaly, unlabeled };

const char* label_name(Label l);
Label label_from_name(const std::string& s);

/// One HTTP request as normalized text lines. Line 0 is the request line when
/// the document was parsed in full-request mode. After normalization no raw CR
/// or LF byte remains inside any line.
struct HttpRequestDoc {
  std::string id;
  Label label = Label::unlabeled;
  std::vector<std::string> lines;
  std::string source;

  bool operator==(const HttpRequestDoc&) const = default;
};

enum class Split { train, inference };

struct Corpus {
  std::vector<HttpRequestDoc> docs;
  Split split = Split::inference;

  bool operator==(const Corpus&) const = default;
};

// Validates id uniqueness and, for the train split, label purity.
void validate_corpus(const Corpus& corpus);

enum class ParseMode { full_request, lenient };

struct HostPool {
  std::vector<std::string> hosts;
};

/// Deterministic per-dataset cleanup. csic literalizes embedded CR/LF bytes,
/// ump_firstline keeps only the request line, ids2018 applies the sanitizer
/// below using `host_pool` and `seed`, identity is a no-op.
struct NormalizationProfile {
  enum class Name { csic, ids2018, ump_firstline, identity };
  Name name = Name::identity;
  HostPool host_pool;           // ids2018 only
  uint64_t seed = 0;            // ids2018 only
  bool require_text_content_type = false;  // ids2018 corpus-level filter
};

NormalizationProfile::Name profile_from_name(const std::string& s);

HttpRequestDoc parse_http_request(const std::string& raw, ParseMode mode);

HttpRequestDoc normalize_request(const HttpRequestDoc& doc, const NormalizationProfile& profile);

/// Host header redrawn from the pool (seeded per doc id, so repeated
/// application is stable), DVWA URI prefixes stripped from the request line,
/// Upgrade-Insecure-Requests header dropped.
HttpRequestDoc ids2018_sanitize(const HttpRequestDoc& doc, const HostPool& host_pool,
                                uint64_t seed);

/// Normalizes every doc; with require_text_content_type set, drops docs whose
/// body carries a non-text Content-Type.
Corpus apply_profile(const Corpus& corpus, const NormalizationProfile& profile);

enum class CorpusFormat { jsonl, rawdir };

Corpus load_corpus(const std::string& path, CorpusFormat format,
                   Split split = Split::inference, ParseMode mode = ParseMode::full_request,
                   Label rawdir_default_label = Label::unlabeled);
void save_corpus(const Corpus& corpus, const std::string& path);

struct FoldAssignment {
  int k = 0;
  std::unordered_map<std::string, int> fold_of;
};

/// Seeded stratified split; per-class fold counts differ from perfect
/// stratification by at most one.
std::vector<int> stratified_fold_indices(const std::vector<Label>& labels, int k, uint64_t seed);

FoldAssignment split_stratified_kfold(const std::vector<std::string>& ids,
                                      const std::vector<Label>& labels, int k, uint64_t seed);

/// Desk-scale stand-in for the benchmark corpora: templated benign requests
/// plus anomalous variants carrying injection payloads. When planted_token is
/// set it appears (in a fixed context) in every anomaly and in no normal doc;
/// with planted_only the planted token is the sole anomaly signal.
struct SynthSpec {
  int normal = 0;
  int anomaly = 0;
  uint64_t seed = 0;
  std::optional<std::string> planted_token;
  bool planted_only = false;
  Split split = Split::inference;
};

Corpus generate_synthetic_corpus(const SynthSpec& spec);

/// Substrings that the generator places only in anomalous docs; attribution
/// tests key off this inventory.
const std::vector<std::string>& synthetic_payload_markers();

}  // namespace reqvec
