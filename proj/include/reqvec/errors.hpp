#pragma once

#include <stdexcept>
#include <string>

namespace reqvec {

enum class Errc {
  // corpus
  empty_input,
  malformed_request_line,
  unknown_profile,
  io_error,
  schema_error,
  class_too_small,
  // tokenizer
  empty_corpus,
  unknown_id,
  format_error,
  // encoder
  invalid_config,
  sequence_too_long,
  nothing_to_mask,
  shape_mismatch,
  // embedder
  too_few_layers,
  empty_document,
  fingerprint_mismatch,
  // classify
  single_class,
  dimension_mismatch,
  // explain
  model_mismatch,
  n_too_large,
  mismatched_report,
  // project
  perplexity_too_large,
  degenerate_input,
  // cli
  usage,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::empty_input: return "EmptyInput";
    case Errc::malformed_request_line: return "MalformedRequestLine";
    case Errc::unknown_profile: return "UnknownProfile";
    case Errc::io_error: return "IoError";
    case Errc::schema_error: return "SchemaError";
    case Errc::class_too_small: return "ClassTooSmall";
    case Errc::empty_corpus: return "EmptyCorpus";
    case Errc::unknown_id: return "UnknownId";
    case Errc::format_error: return "FormatError";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::sequence_too_long: return "SequenceTooLong";
    case Errc::nothing_to_mask: return "NothingToMask";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::too_few_layers: return "TooFewLayers";
    case Errc::empty_document: return "EmptyDocument";
    case Errc::fingerprint_mismatch: return "FingerprintMismatch";
    case Errc::single_class: return "SingleClass";
    case Errc::dimension_mismatch: return "DimensionMismatch";
    case Errc::model_mismatch: return "ModelMismatch";
    case Errc::n_too_large: return "NTooLarge";
    case Errc::mismatched_report: return "MismatchedReport";
    case Errc::perplexity_too_large: return "PerplexityTooLarge";
    case Errc::degenerate_input: return "DegenerateInput";
    case Errc::usage: return "UsageError";
  }
  return "Error";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace reqvec
