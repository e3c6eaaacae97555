#include "reqvec/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "reqvec/errors.hpp"
#include "reqvec/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace reqvec {

const char* label_name(Label l) {
  switch (l) {
    case Label::normal: return "normal";
    case Label::anomaly: return "anomaly";
    case Label::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

Label label_from_name(const std::string& s) {
  if (s == "normal") return Label::normal;
  if (s == "anomaly") return Label::anomaly;
  if (s == "unlabeled") return Label::unlabeled;
  raise(Errc::schema_error, "unknown label '" + s + "'");
}

NormalizationProfile::Name profile_from_name(const std::string& s) {
  using Name = NormalizationProfile::Name;
  if (s == "csic") return Name::csic;
  if (s == "ids2018") return Name::ids2018;
  if (s == "ump" || s == "ump_firstline") return Name::ump_firstline;
  if (s == "identity") return Name::identity;
  raise(Errc::unknown_profile, "unknown normalization profile '" + s + "'");
}

void validate_corpus(const Corpus& corpus) {
  std::unordered_set<std::string> seen;
  seen.reserve(corpus.docs.size());
  for (const auto& d : corpus.docs) {
    if (!seen.insert(d.id).second) raise(Errc::schema_error, "duplicate doc id '" + d.id + "'");
    if (corpus.split == Split::train && d.label != Label::normal)
      raise(Errc::schema_error, "train split contains non-normal doc '" + d.id + "'");
  }
}

namespace {

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool has_header_prefix(const std::string& line, const std::string& lowered_name) {
  if (line.size() < lowered_name.size() + 1) return false;
  return lower(line.substr(0, lowered_name.size())) == lowered_name &&
         line[lowered_name.size()] == ':';
}

void check_request_line(const std::string& line) {
  // METHOD SP URI SP VERSION; anomalous URIs may themselves carry spaces, so
  // only the outer fields are checked.
  auto first_sp = line.find(' ');
  auto last_sp = line.rfind(' ');
  if (first_sp == std::string::npos || last_sp == first_sp)
    raise(Errc::malformed_request_line, "expected 'METHOD URI VERSION' in '" + line + "'");
  if (first_sp == 0 || last_sp + 1 >= line.size())
    raise(Errc::malformed_request_line, "empty method or version in '" + line + "'");
  if (last_sp - first_sp < 2)
    raise(Errc::malformed_request_line, "empty URI in '" + line + "'");
}

}  // namespace

HttpRequestDoc parse_http_request(const std::string& raw, ParseMode mode) {
  if (raw.empty()) raise(Errc::empty_input, "empty request");

  // Split on CRLF when present, else on bare LF. Stray line endings of the
  // other kind stay embedded in the line so that normalization can literalize
  // them later instead of silently losing the distinction.
  const std::string sep = raw.find("\r\n") != std::string::npos ? "\r\n" : "\n";
  std::vector<std::string> lines;
  size_t pos = 0;
  while (pos <= raw.size()) {
    size_t next = raw.find(sep, pos);
    if (next == std::string::npos) {
      lines.push_back(raw.substr(pos));
      break;
    }
    lines.push_back(raw.substr(pos, next - pos));
    pos = next + sep.size();
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) raise(Errc::empty_input, "request contains only line terminators");

  if (mode == ParseMode::full_request) check_request_line(lines.front());

  HttpRequestDoc doc;
  doc.lines = std::move(lines);
  return doc;
}

HttpRequestDoc normalize_request(const HttpRequestDoc& doc, const NormalizationProfile& profile) {
  using Name = NormalizationProfile::Name;
  switch (profile.name) {
    case Name::identity:
      return doc;
    case Name::csic: {
      HttpRequestDoc out = doc;
      out.source = doc.source;
      for (auto& line : out.lines) {
        std::string repl;
        repl.reserve(line.size());
        for (char c : line) {
          if (c == '\r') repl += "\\r";
          else if (c == '\n') repl += "\\n";
          else repl += c;
        }
        line = std::move(repl);
      }
      return out;
    }
    case Name::ump_firstline: {
      HttpRequestDoc out = doc;
      if (!out.lines.empty()) out.lines.resize(1);
      return out;
    }
    case Name::ids2018:
      return ids2018_sanitize(doc, profile.host_pool, profile.seed);
  }
  raise(Errc::unknown_profile, "unhandled profile");
}

HttpRequestDoc ids2018_sanitize(const HttpRequestDoc& doc, const HostPool& host_pool,
                                uint64_t seed) {
  if (host_pool.hosts.empty()) raise(Errc::empty_input, "ids2018 host pool is empty");

  HttpRequestDoc out;
  out.id = doc.id;
  out.label = doc.label;
  out.source = doc.source;

  // Keyed per doc id so the transform is a pure function of (doc, seed) and
  // reapplying it reproduces the same draw.
  Rng rng(seed ^ fnv1a64(doc.id));
  const std::string& host = host_pool.hosts[rng.uniform_index(host_pool.hosts.size())];

  static const std::vector<std::string> kUriPrefixes = {"/DVWA/vulnerabilities/xss", "DVWA/dvwa",
                                                        "/DVWA"};

  for (size_t i = 0; i < doc.lines.size(); ++i) {
    std::string line = doc.lines[i];
    if (i == 0) {
      auto sp = line.find(' ');
      if (sp != std::string::npos) {
        for (const auto& prefix : kUriPrefixes) {
          if (line.compare(sp + 1, prefix.size(), prefix) == 0) {
            line.erase(sp + 1, prefix.size());
            break;
          }
        }
      }
      out.lines.push_back(std::move(line));
      continue;
    }
    if (has_header_prefix(line, "upgrade-insecure-requests")) continue;
    if (has_header_prefix(line, "host")) {
      line = line.substr(0, line.find(':') + 1) + " " + host;
    }
    out.lines.push_back(std::move(line));
  }
  return out;
}

namespace {

bool doc_has_body(const HttpRequestDoc& doc, size_t& blank_at) {
  for (size_t i = 0; i < doc.lines.size(); ++i) {
    if (doc.lines[i].empty()) {
      for (size_t j = i + 1; j < doc.lines.size(); ++j) {
        if (!doc.lines[j].empty()) {
          blank_at = i;
          return true;
        }
      }
      return false;
    }
  }
  return false;
}

bool text_content_type(const HttpRequestDoc& doc) {
  static const std::vector<std::string> kTextish = {
      "text/", "application/json", "application/x-www-form-urlencoded", "application/xml",
      "application/xhtml+xml"};
  for (const auto& line : doc.lines) {
    if (!has_header_prefix(line, "content-type")) continue;
    std::string value = lower(line.substr(line.find(':') + 1));
    value.erase(0, value.find_first_not_of(" \t"));
    for (const auto& t : kTextish)
      if (value.rfind(t, 0) == 0) return true;
    return false;
  }
  return false;
}

}  // namespace

Corpus apply_profile(const Corpus& corpus, const NormalizationProfile& profile) {
  Corpus out;
  out.split = corpus.split;
  out.docs.reserve(corpus.docs.size());
  for (const auto& doc : corpus.docs) {
    if (profile.require_text_content_type) {
      size_t blank_at = 0;
      if (doc_has_body(doc, blank_at) && !text_content_type(doc)) continue;
    }
    out.docs.push_back(normalize_request(doc, profile));
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(Errc::io_error, "cannot open '" + path + "' for writing");
  for (const auto& d : corpus.docs) {
    json rec;
    rec["id"] = d.id;
    rec["label"] = label_name(d.label);
    rec["lines"] = d.lines;
    rec["source"] = d.source;
    f << rec.dump() << "\n";
  }
  if (!f) raise(Errc::io_error, "write failed for '" + path + "'");
}

namespace {

Corpus load_corpus_jsonl(const std::string& path, Split split) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Errc::io_error, "cannot open '" + path + "'");
  Corpus corpus;
  corpus.split = split;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      raise(Errc::schema_error, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("id") || !rec.contains("label") ||
        !rec.contains("lines"))
      raise(Errc::schema_error,
            path + ":" + std::to_string(lineno) + ": record needs id, label, lines");
    HttpRequestDoc d;
    try {
      d.id = rec.at("id").get<std::string>();
      d.label = label_from_name(rec.at("label").get<std::string>());
      d.lines = rec.at("lines").get<std::vector<std::string>>();
      d.source = rec.value("source", std::string());
    } catch (const json::exception& e) {
      raise(Errc::schema_error, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    corpus.docs.push_back(std::move(d));
  }
  return corpus;
}

// One raw request per blank-line-separated segment, one or more per file.
Corpus load_corpus_rawdir(const std::string& path, Split split, ParseMode mode,
                          Label default_label) {
  if (!fs::is_directory(path)) raise(Errc::io_error, "'" + path + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(path))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  Corpus corpus;
  corpus.split = split;
  for (const auto& file : files) {
    std::ifstream f(file, std::ios::binary);
    if (!f) raise(Errc::io_error, "cannot open '" + file.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string content = ss.str();
    const std::string rel = fs::relative(file, path).generic_string();

    Label label = default_label;
    if (rel.find("normal/") != std::string::npos || rel.rfind("normal/", 0) == 0)
      label = Label::normal;
    else if (rel.find("anomaly/") != std::string::npos)
      label = Label::anomaly;

    // Split the file into segments at blank lines (any line-ending style).
    std::vector<std::string> segments;
    std::string cur;
    std::istringstream is(content);
    std::string raw_line;
    while (std::getline(is, raw_line)) {
      if (!raw_line.empty() && raw_line.back() == '\r') raw_line.pop_back();
      if (raw_line.empty()) {
        if (!cur.empty()) segments.push_back(std::exchange(cur, {}));
      } else {
        cur += raw_line;
        cur += "\r\n";
      }
    }
    if (!cur.empty()) segments.push_back(std::move(cur));

    for (size_t s = 0; s < segments.size(); ++s) {
      HttpRequestDoc d = parse_http_request(segments[s], mode);
      d.id = rel + "#" + std::to_string(s);
      d.label = label;
      d.source = "rawdir:" + rel;
      corpus.docs.push_back(std::move(d));
    }
  }
  return corpus;
}

}  // namespace

Corpus load_corpus(const std::string& path, CorpusFormat format, Split split, ParseMode mode,
                   Label rawdir_default_label) {
  Corpus corpus = format == CorpusFormat::jsonl
                      ? load_corpus_jsonl(path, split)
                      : load_corpus_rawdir(path, split, mode, rawdir_default_label);
  validate_corpus(corpus);
  return corpus;
}

std::vector<int> stratified_fold_indices(const std::vector<Label>& labels, int k, uint64_t seed) {
  if (k < 2) raise(Errc::invalid_config, "k must be >= 2");
  std::map<Label, std::vector<size_t>> by_class;
  for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (static_cast<int>(members.size()) < k)
      raise(Errc::class_too_small, std::string("class '") + label_name(label) + "' has " +
                                       std::to_string(members.size()) + " members, need >= " +
                                       std::to_string(k));
  }

  std::vector<int> fold(labels.size(), -1);
  Rng rng(seed);
  int offset = 0;  // staggers remainders so fold totals stay balanced
  for (auto& [label, members] : by_class) {
    rng.shuffle(members);
    for (size_t i = 0; i < members.size(); ++i)
      fold[members[i]] = static_cast<int>((i + offset) % k);
    offset = static_cast<int>((offset + members.size()) % k);
  }
  return fold;
}

FoldAssignment split_stratified_kfold(const std::vector<std::string>& ids,
                                      const std::vector<Label>& labels, int k, uint64_t seed) {
  if (ids.size() != labels.size()) raise(Errc::dimension_mismatch, "ids/labels length mismatch");
  const std::vector<int> fold = stratified_fold_indices(labels, k, seed);
  FoldAssignment out;
  out.k = k;
  out.fold_of.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) out.fold_of[ids[i]] = fold[i];
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string> kHosts = {"shop.example.com", "store.example.org",
                                         "mart.example.net"};
const std::vector<std::string> kAgents = {
    "Mozilla/5.0 (X11; Linux x86_64; rv:115.0) Gecko/20100101 Firefox/115.0",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 Chrome/120.0",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) Safari/605.1.15"};
const std::vector<std::string> kLangs = {"en-US,en;q=0.9", "es-ES,es;q=0.8", "de-DE,de;q=0.7"};
const std::vector<std::string> kWords = {"jamon", "vino",  "pan",   "aceite", "miel",
                                         "cafe",  "torta", "queso", "arroz",  "leche"};

struct PayloadFamily {
  const char* name;
  std::vector<std::string> payloads;
};

const std::vector<PayloadFamily> kPayloadFamilies = {
    {"sqli",
     {"%27%3B+DROP+TABLE+users%3B+SELECT+*+FROM+accounts+WHERE+name+LIKE+%27%25",
      "1+OR+1%3D1+--", "x%27+UNION+SELECT+password+FROM+users--"}},
    {"xss",
     {"%3Cscript%3Ealert%281%29%3C%2Fscript%3E",
      "%22%3E%3Cscript%3Ealert%28document.cookie%29%3C%2Fscript%3E"}},
    {"traversal", {"..%2F..%2F..%2Fetc%2Fpasswd", "../../../etc/passwd"}},
    {"cmdinj", {"%3C%21--%23exec+cmd%3D%22cat+%2Fetc%2Fpasswd%22+--%3E"}},
};

struct RequestTemplate {
  std::string method;
  std::string path_query;  // request-line target, possibly with placeholders
  bool has_query;
  bool has_body;
};

// Placeholders: {W} word, {N} small number, {M} price-like number.
const std::vector<RequestTemplate> kTemplates = {
    {"GET", "/index.jsp", false, false},
    {"GET", "/browse.jsp?cat={W}&page={N}", true, false},
    {"GET", "/item.jsp?id={N}&name={W}&price={M}", true, false},
    {"GET", "/search.jsp?q={W}", true, false},
    {"GET", "/cart.jsp?id={N}&qty={N}", true, false},
    {"POST", "/login.jsp", false, true},
    {"POST", "/checkout.jsp", false, true},
};

std::string fill_placeholders(std::string s, Rng& rng) {
  auto replace_all = [&](const std::string& ph, auto gen) {
    size_t pos;
    while ((pos = s.find(ph)) != std::string::npos) s.replace(pos, ph.size(), gen());
  };
  replace_all("{W}", [&] { return kWords[rng.uniform_index(kWords.size())]; });
  replace_all("{N}", [&] { return std::to_string(1 + rng.uniform_index(97)); });
  replace_all("{M}", [&] {
    return std::to_string(1 + rng.uniform_index(90)) + "." + std::to_string(rng.uniform_index(10)) +
           std::to_string(rng.uniform_index(10));
  });
  return s;
}

HttpRequestDoc make_request(Rng& rng, size_t template_idx) {
  const RequestTemplate& t = kTemplates[template_idx];
  HttpRequestDoc doc;
  std::string target = fill_placeholders(t.path_query, rng);

  std::string body;
  if (t.has_body) {
    if (t.path_query == "/login.jsp") {
      body = fill_placeholders("user={W}&pass={W}{N}", rng);
    } else {
      body = fill_placeholders("id={N}&qty={N}&addr={W}+road+{N}", rng);
    }
  }

  doc.lines.push_back(t.method + " " + target + " HTTP/1.1");
  doc.lines.push_back("Host: " + kHosts[rng.uniform_index(kHosts.size())]);
  doc.lines.push_back("User-Agent: " + kAgents[rng.uniform_index(kAgents.size())]);
  doc.lines.push_back("Accept: text/html,application/xhtml+xml");
  doc.lines.push_back("Accept-Language: " + kLangs[rng.uniform_index(kLangs.size())]);
  if (rng.bernoulli(0.5)) doc.lines.push_back("Connection: keep-alive");
  if (t.has_body) {
    doc.lines.push_back("Content-Type: application/x-www-form-urlencoded");
    doc.lines.push_back("Content-Length: " + std::to_string(body.size()));
    doc.lines.push_back("");
    doc.lines.push_back(body);
  }
  return doc;
}

// Injects a payload into the last query/body value of the doc.
void inject_payload(HttpRequestDoc& doc, const std::string& payload) {
  const bool has_body =
      doc.lines.size() > 2 && doc.lines[doc.lines.size() - 2].empty() && !doc.lines.back().empty();
  if (has_body) {
    doc.lines.back() += payload;
    for (auto& l : doc.lines)
      if (has_header_prefix(l, "content-length"))
        l = "Content-Length: " + std::to_string(doc.lines.back().size());
    return;
  }
  std::string& line = doc.lines.front();
  const size_t ver = line.rfind(" HTTP/");
  if (line.find('?') != std::string::npos)
    line.insert(ver, payload);
  else
    line.insert(ver, "?err=" + payload);
}

}  // namespace

const std::vector<std::string>& synthetic_payload_markers() {
  static const std::vector<std::string> markers = {
      "DROP",   "TABLE", "SELECT", "FROM",  "WHERE", "LIKE", "UNION", "OR+1",
      "script", "alert", "passwd", "%2Fetc", "%27",  "%3B",  "%3C",   "../",
      "exec",   "cmd",   "password"};
  return markers;
}

Corpus generate_synthetic_corpus(const SynthSpec& spec) {
  if (spec.normal < 0 || spec.anomaly < 0)
    raise(Errc::invalid_config, "synthetic corpus sizes must be >= 0");
  Rng rng(spec.seed);
  Corpus corpus;
  corpus.split = spec.split;
  corpus.docs.reserve(static_cast<size_t>(spec.normal + spec.anomaly));
  const std::string source = "synthetic:seed=" + std::to_string(spec.seed);

  char idbuf[32];
  for (int i = 0; i < spec.normal; ++i) {
    HttpRequestDoc doc = make_request(rng, rng.uniform_index(kTemplates.size()));
    std::snprintf(idbuf, sizeof idbuf, "syn-n-%05d", i);
    doc.id = idbuf;
    doc.label = Label::normal;
    doc.source = source;
    corpus.docs.push_back(std::move(doc));
  }

  // Anomalies with a planted token always use a query-bearing template so the
  // token sits in one fixed byte context ("&z=" ... " HTTP/1.1").
  std::vector<size_t> query_templates;
  for (size_t t = 0; t < kTemplates.size(); ++t)
    if (kTemplates[t].has_query) query_templates.push_back(t);

  for (int i = 0; i < spec.anomaly; ++i) {
    size_t tidx = spec.planted_token
                      ? query_templates[rng.uniform_index(query_templates.size())]
                      : rng.uniform_index(kTemplates.size());
    HttpRequestDoc doc = make_request(rng, tidx);
    if (!spec.planted_only || !spec.planted_token) {
      const PayloadFamily& fam = kPayloadFamilies[rng.uniform_index(kPayloadFamilies.size())];
      inject_payload(doc, fam.payloads[rng.uniform_index(fam.payloads.size())]);
    }
    if (spec.planted_token) {
      std::string& line = doc.lines.front();
      size_t ver = line.rfind(" HTTP/");
      line.insert(ver, "&z=" + *spec.planted_token);
    }
    std::snprintf(idbuf, sizeof idbuf, "syn-a-%05d", i);
    doc.id = idbuf;
    doc.label = Label::anomaly;
    doc.source = source;
    corpus.docs.push_back(std::move(doc));
  }

  validate_corpus(corpus);
  return corpus;
}

}  // namespace reqvec
